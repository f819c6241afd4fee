//! Acceptance criteria. Each test prints one `PASS` or `FAIL` line; run with
//! `cargo test -p atmosim-cli --test acceptance -- --nocapture --test-threads=1`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use atmosim::detector::{
    click_statistics, monte_carlo_clicks, sample_clicks, ClickStatistics, DetectorConfig,
    MomentVector,
};
use atmosim::exec::{derive_seed, stream_rng};
use atmosim::nonclassicality::{
    classify, min_eigenvalue, moment_matrix, BootstrapReplicates, Classification, EnsembleMember,
};
use atmosim::pdt::{beta_binomial, discretize, DiscretePDT, TransmittanceModel};
use atmosim::pipeline::{
    build_ensemble, calibrate_source, constant_loss_sweep, default_postselection_grid,
    merge_statistics, postselection_sweep, AnalysisSettings, Analyzer, CalibrationFamily,
    EnsembleMode,
};
use atmosim::source::{
    amplitude_squeezed, apply_loss, coherent, squeezed_vacuum, thermal, PhotonNumberDistribution,
    Truncation,
};
use atmosim::Execution;
use rand::Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};

fn report(criterion: u32, name: &str, pass: bool, detail: String) {
    println!(
        "{} criterion {criterion} ({name}): {detail}",
        if pass { "PASS" } else { "FAIL" }
    );
    assert!(pass, "criterion {criterion} failed: {detail}");
}

fn det() -> DetectorConfig {
    DetectorConfig::default()
}

fn min_eig(mv: &MomentVector, k: usize) -> f64 {
    min_eigenvalue(&moment_matrix(mv, k).unwrap()).unwrap()
}

fn log_normal() -> TransmittanceModel {
    TransmittanceModel::log_normal_from_variance(-1.75, 0.55).unwrap()
}

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_atmosim")
}

fn demo() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("demo/demo.json")
}

#[test]
fn criterion_1_discretization_regression() {
    let t = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let status = Command::new(bin())
        .args(["discretize", "--n", "100", "--model"])
        .arg(serde_json::to_string(&log_normal()).unwrap())
        .arg("--output")
        .arg(dir.path())
        .output()
        .unwrap();
    assert!(status.status.success());
    let elapsed = t.elapsed();
    let report_json: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(dir.path().join("discretization.json")).unwrap(),
    )
    .unwrap();
    let triple = |path: [&str; 2]| -> Vec<f64> {
        (0..3)
            .map(|i| {
                report_json["errors"][path[0]][path[1]][i]
                    .as_f64()
                    .unwrap()
                    .abs()
            })
            .collect()
    };
    let raw = triple(["truncated", "raw"]);
    let reference = [0.6e-3, 2.1e-3, 4.7e-3];
    let within = raw
        .iter()
        .zip(reference)
        .all(|(v, q)| (v - q).abs() <= 0.5 * q);
    let central = triple(["truncated", "central"]);
    let full = triple(["untruncated", "raw"]);
    report(
        1,
        "discretization regression",
        within && elapsed < Duration::from_secs(1),
        format!(
            "raw moments vs [0,1]-renormalised density ({:.2e}, {:.2e}, {:.2e}) against ({:.1e}, {:.1e}, {:.1e}) +-50%; \
             central ({:.2e}, {:.2e}, {:.2e}); raw vs untruncated ({:.2e}, {:.2e}, {:.2e}); {elapsed:.2?}",
            raw[0], raw[1], raw[2], reference[0], reference[1], reference[2], central[0], central[1], central[2],
            full[0], full[1], full[2]
        ),
    );
}

#[test]
fn criterion_2_classical_null() {
    let t = Instant::now();
    let mut worst_e2: f64 = 0.0;
    let mut worst_any = f64::INFINITY;
    for mean in [0.1, 0.5, 1.0, 2.0, 5.0] {
        for efficiency in [0.22, 1.0] {
            let cfg = DetectorConfig {
                efficiency,
                ..det()
            };
            for (is_coherent, pnd) in [
                (true, coherent(mean, Truncation::default()).unwrap()),
                (false, thermal(mean, Truncation::default()).unwrap()),
            ] {
                let mv = MomentVector::from_clicks(&click_statistics(&pnd, &cfg).unwrap());
                for k in [2, 4, 6, 8] {
                    let e = min_eig(&mv, k);
                    worst_any = worst_any.min(e);
                    if is_coherent && k == 2 {
                        worst_e2 = worst_e2.max(e.abs());
                    }
                }
            }
        }
    }
    let elapsed = t.elapsed();
    report(
        2,
        "classical null",
        worst_e2 <= 1e-10 && worst_any >= -1e-10 && elapsed < Duration::from_secs(1),
        format!("max |e2| coherent {worst_e2:.1e}, min e over K and states {worst_any:.1e}; {elapsed:.2?}"),
    );
}

/// Pearson statistic with adjacent bins merged until each expects >= 5.
fn chi_square_p(observed: &ClickStatistics, expected: &ClickStatistics) -> f64 {
    let counts = observed.counts().unwrap();
    let m = observed.trials().unwrap() as f64;
    let mut groups: Vec<(f64, f64)> = Vec::new();
    let (mut o, mut e) = (0.0, 0.0);
    for (c, p) in counts.iter().zip(expected.probabilities()) {
        o += *c as f64;
        e += p * m;
        if e >= 5.0 {
            groups.push((o, e));
            o = 0.0;
            e = 0.0;
        }
    }
    match groups.last_mut() {
        Some(last) => {
            last.0 += o;
            last.1 += e;
        }
        None => return 1.0,
    }
    if groups.len() < 2 {
        return 1.0;
    }
    let stat: f64 = groups.iter().map(|(o, e)| (o - e).powi(2) / e).sum();
    let dist = ChiSquared::new((groups.len() - 1) as f64).unwrap();
    1.0 - dist.cdf(stat)
}

#[test]
fn criterion_3_oracle_equivalence() {
    let t = Instant::now();
    let states = [
        ("coherent(2)", coherent(2.0, Truncation::default()).unwrap()),
        (
            "squeezed(1)",
            squeezed_vacuum(1.0, Truncation::default()).unwrap(),
        ),
        ("single photon", PhotonNumberDistribution::fock(1)),
    ];
    let mut pass = true;
    let mut detail = Vec::new();
    for (i, (name, pnd)) in states.iter().enumerate() {
        let exact = click_statistics(pnd, &det()).unwrap();
        let mc = monte_carlo_clicks(
            pnd,
            &det(),
            1_000_000,
            derive_seed(3, "oracle", i as u64),
            Execution::default(),
        )
        .unwrap();
        let p = chi_square_p(&mc, &exact);
        pass &= p > 0.001;
        detail.push(format!("{name} p = {p:.3}"));
    }
    let elapsed = t.elapsed();
    report(
        3,
        "oracle equivalence",
        pass && elapsed < Duration::from_secs(60),
        format!("{}; {elapsed:.2?}", detail.join(", ")),
    );
}

#[test]
fn criterion_4_linearity_identities() {
    let source = atmosim::source::SourceSpec::AmplitudeSqueezed {
        amplitude: 3.6,
        squeeze: 1.1,
    };
    let ensemble = build_ensemble(
        &source,
        &det(),
        100,
        EnsembleMode::Analytic,
        Execution::default(),
    )
    .unwrap();
    let mut rng = stream_rng(derive_seed(4, "linearity", 0), 0);
    let mut worst_merge: f64 = 0.0;
    let mut tested = 0;
    while tested < 100 {
        let density: f64 = rng.random_range(0.05..1.0);
        let weights: Vec<f64> = (0..=100)
            .map(|_| {
                if rng.random::<f64>() < density {
                    rng.random::<f64>()
                } else {
                    0.0
                }
            })
            .collect();
        if weights.iter().all(|&w| w == 0.0) {
            continue;
        }
        let pdt = DiscretePDT::from_weights(weights).unwrap();
        let merged = MomentVector::from_clicks(&merge_statistics(&ensemble, &pdt).unwrap());
        let moments =
            atmosim::nonclassicality::atmospheric_moment_vector(ensemble.members(), &pdt).unwrap();
        worst_merge = worst_merge.max((min_eig(&merged, 8) - min_eig(&moments, 8)).abs());
        tested += 1;
    }

    let states = [
        coherent(2.0, Truncation::default()).unwrap(),
        squeezed_vacuum(1.0, Truncation::default()).unwrap(),
        thermal(1.0, Truncation::default()).unwrap(),
        amplitude_squeezed(3.6, 1.1, Truncation::default()).unwrap(),
    ];
    let gap = |a: &ClickStatistics, b: &ClickStatistics| {
        a.probabilities()
            .iter()
            .zip(b.probabilities())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max)
    };
    let (mut worst_compose, mut worst_swap): (f64, f64) = (0.0, 0.0);
    for pnd in &states {
        for _ in 0..10 {
            let (a, b): (f64, f64) = (rng.random(), rng.random());
            let twice = click_statistics(
                &apply_loss(&apply_loss(pnd, a).unwrap(), b).unwrap(),
                &det(),
            )
            .unwrap();
            let once = click_statistics(&apply_loss(pnd, a * b).unwrap(), &det()).unwrap();
            worst_compose = worst_compose.max(gap(&twice, &once));
            let lossy = click_statistics(&apply_loss(pnd, a).unwrap(), &det()).unwrap();
            let weaker = DetectorConfig {
                efficiency: a * det().efficiency,
                ..det()
            };
            worst_swap = worst_swap.max(gap(&lossy, &click_statistics(pnd, &weaker).unwrap()));
        }
    }
    report(
        4,
        "linearity identities",
        worst_merge <= 1e-12 && worst_compose <= 1e-12 && worst_swap <= 1e-12,
        format!(
            "max |e8 merged - e8 moments| {worst_merge:.1e} over 100 PDTs; loss composition {worst_compose:.1e}; \
             loss/efficiency interchange {worst_swap:.1e}"
        ),
    );
}

/// Lowest grid index above which every point has significance <= -3.
fn crossing(s: &atmosim::pipeline::SweepResult, k: usize) -> Option<usize> {
    let mut c = None;
    for i in (0..s.points.len()).rev() {
        if s.result(i, k).unwrap().significance <= -3.0 {
            c = Some(i);
        } else {
            break;
        }
    }
    c
}

#[test]
fn criterion_5_nonclassical_operating_point() {
    let cal = calibrate_source(
        2.7,
        &det(),
        &CalibrationFamily::AmplitudeSqueezed { squeeze: 1.2 },
    )
    .unwrap();
    let mode = EnsembleMode::Sampled {
        trials: 1_000_000,
        seed: 5,
    };
    let ensemble = build_ensemble(&cal.source, &det(), 100, mode, Execution::default()).unwrap();
    let analyzer = Analyzer::new(
        &ensemble,
        &AnalysisSettings::default(),
        5,
        Execution::default(),
    )
    .unwrap();
    let sweep = constant_loss_sweep(&analyzer).unwrap();
    let top = sweep.result(100, 8).unwrap();
    let (c8, c2) = (crossing(&sweep, 8), crossing(&sweep, 2));
    let ordered = match (c8, c2) {
        (Some(a), Some(b)) => a <= b,
        (Some(_), None) => true,
        _ => false,
    };
    let eta =
        |c: Option<usize>| c.map_or("none".to_string(), |i| format!("{:.2}", i as f64 / 100.0));
    report(
        5,
        "nonclassical operating point",
        top.e_min < 0.0 && top.significance <= -3.0 && ordered,
        format!(
            "{} with {:.6} mean clicks; at eta = 1 e8 = {:.3e}, significance {:.1}; crossings of -3: K=8 at eta {}, K=2 at eta {}",
            cal.source.describe(),
            cal.mean_clicks,
            top.e_min,
            top.significance,
            eta(c8),
            eta(c2)
        ),
    );
}

#[test]
fn criterion_6_fluctuating_loss_degradation_and_recovery() {
    let t = Instant::now();
    let cal = calibrate_source(
        2.7,
        &det(),
        &CalibrationFamily::AmplitudeSqueezed { squeeze: 1.1 },
    )
    .unwrap();
    let mode = EnsembleMode::Sampled {
        trials: 1_000_000_000,
        seed: 6,
    };
    let ensemble = build_ensemble(&cal.source, &det(), 100, mode, Execution::default()).unwrap();
    let analyzer = Analyzer::new(
        &ensemble,
        &AnalysisSettings::default(),
        6,
        Execution::default(),
    )
    .unwrap();
    let pdt = discretize(&log_normal(), 100).unwrap();

    let constant = constant_loss_sweep(&analyzer).unwrap();
    let support: Vec<usize> = pdt
        .support()
        .map(|(k, _, _)| k)
        .filter(|&k| k > 0)
        .collect();
    let all_constant = support
        .iter()
        .all(|&k| classify(constant.result(k, 8).unwrap(), 3.0) == Classification::Nonclassical);
    let weakest = support
        .iter()
        .map(|&k| constant.result(k, 8).unwrap().significance)
        .fold(f64::MIN, f64::max);
    let merged = &analyzer.evaluate(&pdt, "log-normal").unwrap()[1];
    let merged_class = classify(merged, 3.0);

    let ps =
        postselection_sweep(&analyzer, &pdt, &default_postselection_grid(), "log-normal").unwrap();
    let curve: Vec<_> = ps
        .points
        .iter()
        .map(|p| p.results.iter().find(|r| r.order == 8))
        .collect();
    let evaluated = curve.iter().all(Option::is_some);
    let curve: Vec<_> = curve.into_iter().flatten().collect();
    let monotone = curve.windows(2).all(|w| {
        w[1].e_min - w[0].e_min <= 3.0 * (w[0].delta_e.powi(2) + w[1].delta_e.powi(2)).sqrt()
    });
    let cross = curve
        .iter()
        .position(|r| classify(r, 3.0) == Classification::Nonclassical)
        .map(|i| ps.points[i].parameters[0]);
    let elapsed = t.elapsed();
    report(
        6,
        "fluctuating-loss degradation and recovery",
        all_constant
            && merged_class != Classification::Nonclassical
            && evaluated
            && monotone
            && cross.is_some_and(|c| c < 1.0)
            && elapsed < Duration::from_secs(300),
        format!(
            "{} at M = 1e9 per level; weakest constant-loss significance {weakest:.1} over {} support points; \
             merged e8 = {:.3e} +- {:.1e} ({merged_class}); post-selection monotone: {monotone}, first NONCLASSICAL at eta_ps = {}; {elapsed:.1?}",
            cal.source.describe(),
            support.len(),
            merged.e_min,
            merged.delta_e,
            cross.map_or("none".to_string(), |c| format!("{c:.2}"))
        ),
    );
}

#[test]
fn criterion_7_beta_binomial() {
    let n = 100usize;
    let uniform = beta_binomial(n, 1.0, 1.0).unwrap();
    let flat = uniform
        .weights()
        .iter()
        .map(|w| (w - 1.0 / 101.0).abs())
        .fold(0.0, f64::max);
    let mut rng = stream_rng(derive_seed(7, "beta", 0), 0);
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let a = 10f64.powf(rng.random_range(-1.0..1.5));
        let b = 10f64.powf(rng.random_range(-1.0..1.5));
        let pdt = beta_binomial(n, a, b).unwrap();
        let nf = n as f64;
        let mean = nf * a / (a + b);
        let var = nf * a * b * (a + b + nf) / ((a + b).powi(2) * (a + b + 1.0));
        let m1: f64 = pdt
            .weights()
            .iter()
            .enumerate()
            .map(|(k, w)| k as f64 * w)
            .sum();
        let m2: f64 = pdt
            .weights()
            .iter()
            .enumerate()
            .map(|(k, w)| (k as f64 - m1).powi(2) * w)
            .sum();
        worst = worst
            .max((m1 - mean).abs() / mean.max(1.0))
            .max((m2 - var).abs() / var.max(1.0));
    }
    report(
        7,
        "beta-binomial",
        flat <= 1e-12 && worst <= 1e-9,
        format!("BB(100,1,1) max deviation from 1/101 {flat:.1e}; worst relative moment error over 50 (alpha, beta) {worst:.1e}"),
    );
}

#[test]
fn criterion_8_bootstrap_calibration() {
    let t = Instant::now();
    let exact = click_statistics(&coherent(2.0, Truncation::default()).unwrap(), &det()).unwrap();
    let point = DiscretePDT::point_mass(1, 1).unwrap();
    let experiment = |trials: u64, i: u64| {
        let members = vec![
            EnsembleMember {
                eta: 0.0,
                statistics: ClickStatistics::from_counts(vec![trials, 0, 0, 0, 0, 0, 0, 0, 0])
                    .unwrap(),
            },
            EnsembleMember {
                eta: 1.0,
                statistics: sample_clicks(
                    &exact,
                    trials,
                    derive_seed(8, &format!("experiment-{trials}"), i),
                )
                .unwrap(),
            },
        ];
        let replicates = BootstrapReplicates::generate(
            &members,
            1000,
            derive_seed(8, &format!("bootstrap-{trials}"), i),
            Execution::default(),
        )
        .unwrap();
        replicates
            .estimate(&members, &point, &[8], "coherent(2)", Execution::default())
            .unwrap()
            .remove(0)
    };
    let runs = 500;
    let within = (0..runs)
        .filter(|&i| experiment(100_000, i).significance.abs() <= 3.0)
        .count();
    let fraction = within as f64 / runs as f64;
    let mean_delta =
        |trials: u64| (0..20).map(|i| experiment(trials, i).delta_e).sum::<f64>() / 20.0;
    let ratio = mean_delta(10_000) / mean_delta(1_000_000);
    let elapsed = t.elapsed();
    report(
        8,
        "bootstrap calibration",
        fraction >= 0.99 && (8.0..=12.0).contains(&ratio) && elapsed < Duration::from_secs(600),
        format!(
            "{within}/{runs} coherent experiments with |significance| <= 3 (M = 1e5, K = 8); \
             delta_e(1e4) / delta_e(1e6) = {ratio:.2} (1/sqrt(M) predicts 10); {elapsed:.1?}"
        ),
    );
}

fn snapshot(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut files = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                files.insert(
                    p.strip_prefix(dir).unwrap().to_path_buf(),
                    std::fs::read(&p).unwrap(),
                );
            }
        }
    }
    files
}

#[test]
fn criterion_9_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let commands: [&[&str]; 8] = [
        &["discretize"],
        &["calibrate"],
        &["simulate"],
        &["analyze"],
        &["sweep", "--kind", "constant-loss"],
        &["sweep", "--kind", "postselect"],
        &["sweep", "--kind", "rytov"],
        &["sweep", "--kind", "beta-scan"],
    ];
    let run = |threads: &str| {
        let _ = std::fs::remove_dir_all(&out);
        for args in commands {
            let o = Command::new(bin())
                .args(args)
                .arg("--config")
                .arg(demo())
                .args(["--threads", threads, "--output"])
                .arg(&out)
                .output()
                .unwrap();
            assert!(
                o.status.success(),
                "{args:?}: {}",
                String::from_utf8_lossy(&o.stderr)
            );
        }
        snapshot(&out)
    };
    let first = run("1");
    let again = run("1");
    let wide = run("4");
    let files = first.len();
    report(
        9,
        "determinism",
        first == again && first == wide && files > 100,
        format!(
            "{files} output files from {} commands byte-identical across reruns and --threads 1 / 4",
            commands.len()
        ),
    );
}
