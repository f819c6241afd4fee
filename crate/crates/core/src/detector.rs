//! Time-multiplexed click detector with `N` bins.
//!
//! Each bin responds linearly: a photon reaching the detector is registered
//! with probability `efficiency` in one of the `N` bins, chosen uniformly, and
//! every bin independently fires a dark click with probability
//! `1 - exp(-dark_click_rate)`. The normally ordered no-click moments are then
//! `<:m^l:> = exp(-l dark) sum_n p_n (1 - l efficiency / N)^n`.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use rand_distr::Binomial;
use serde::{Deserialize, Serialize};

use crate::error::{domain, Error, Result};
use crate::exec::{shard_sizes, stream_rng, Execution};
use crate::source::PhotonNumberDistribution;

/// Trials per independently seeded Monte Carlo shard.
pub const MONTE_CARLO_SHARD: u64 = 1 << 16;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectorConfig {
    pub bins: usize,
    pub efficiency: f64,
    pub dark_click_rate: f64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            bins: 8,
            efficiency: 0.22,
            dark_click_rate: 0.0,
        }
    }
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.bins == 0 {
            return Err(Error::ParameterDomain(
                "detector needs at least one bin".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.efficiency) {
            return Err(domain("efficiency", self.efficiency, "[0, 1]"));
        }
        if !(self.dark_click_rate >= 0.0 && self.dark_click_rate.is_finite()) {
            return Err(domain("dark_click_rate", self.dark_click_rate, "[0, inf)"));
        }
        Ok(())
    }
}

/// Distribution of the number of clicks `k = 0..=N`, optionally with the
/// counts it was estimated from.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClickStatistics {
    probabilities: Vec<f64>,
    counts: Option<Vec<u64>>,
}

impl ClickStatistics {
    /// Validates and normalises `c_0..=c_N`.
    pub fn from_probabilities(probabilities: Vec<f64>) -> Result<Self> {
        if probabilities.len() < 2 {
            return Err(Error::ParameterDomain(
                "click statistics need at least one bin".into(),
            ));
        }
        if let Some(c) = probabilities
            .iter()
            .find(|c| !(**c >= 0.0 && c.is_finite()))
        {
            return Err(Error::ParameterDomain(format!(
                "click probability {c} must be finite and >= 0"
            )));
        }
        let total: f64 = probabilities.iter().sum();
        if !(total > 0.0) {
            return Err(Error::Degenerate("click probabilities sum to zero".into()));
        }
        let probabilities = if (total - 1.0).abs() <= 1e-12 {
            probabilities
        } else {
            probabilities.into_iter().map(|c| c / total).collect()
        };
        Ok(Self {
            probabilities,
            counts: None,
        })
    }

    /// Empirical frequencies `c_k = counts_k / M`.
    pub fn from_counts(counts: Vec<u64>) -> Result<Self> {
        if counts.len() < 2 {
            return Err(Error::ParameterDomain(
                "click statistics need at least one bin".into(),
            ));
        }
        let total: u64 = counts.iter().sum();
        if total == 0 {
            return Err(Error::EmptyInput("click counts sum to zero".into()));
        }
        Ok(Self {
            probabilities: counts.iter().map(|&k| k as f64 / total as f64).collect(),
            counts: Some(counts),
        })
    }

    pub fn bins(&self) -> usize {
        self.probabilities.len() - 1
    }

    pub fn probabilities(&self) -> &[f64] {
        &self.probabilities
    }

    pub fn counts(&self) -> Option<&[u64]> {
        self.counts.as_deref()
    }

    pub fn trials(&self) -> Option<u64> {
        self.counts.as_ref().map(|c| c.iter().sum())
    }

    pub fn counts_or_err(&self) -> Result<&[u64]> {
        self.counts().ok_or(Error::CountsRequired)
    }

    pub fn write_csv<W: Write>(
        &self,
        mut out: W,
        metadata: &BTreeMap<String, String>,
    ) -> Result<()> {
        for (key, value) in metadata {
            writeln!(out, "# {key}={value}")?;
        }
        writeln!(out, "k,count,probability")?;
        for (k, c) in self.probabilities.iter().enumerate() {
            match &self.counts {
                Some(counts) => writeln!(out, "{k},{},{c}", counts[k])?,
                None => writeln!(out, "{k},,{c}")?,
            }
        }
        Ok(())
    }
}

/// Click statistics read from CSV together with their `# key=value` header.
#[derive(Debug, Clone, PartialEq)]
pub struct ClickRecord {
    pub statistics: ClickStatistics,
    pub metadata: BTreeMap<String, String>,
}

impl ClickRecord {
    pub fn read_path(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::Ingestion {
            path: path.to_path_buf(),
            line: 0,
            message: e.to_string(),
        })?;
        Self::read(file, path)
    }

    /// Parses a `k,count,probability` table. Counts take precedence over
    /// probabilities when present; `origin` labels error messages.
    pub fn read<R: Read>(mut reader: R, origin: &Path) -> Result<Self> {
        let fail = |line: u64, message: String| Error::Ingestion {
            path: PathBuf::from(origin),
            line,
            message,
        };
        let mut text = String::new();
        reader
            .read_to_string(&mut text)
            .map_err(|e| fail(0, e.to_string()))?;

        let mut metadata = BTreeMap::new();
        let mut lines = text.lines().enumerate().peekable();
        while let Some((i, line)) = lines.peek() {
            let Some(body) = line.strip_prefix('#') else {
                break;
            };
            let (key, value) = body
                .split_once('=')
                .ok_or_else(|| fail(*i as u64 + 1, format!("metadata line `{line}` lacks `=`")))?;
            metadata.insert(key.trim().to_string(), value.trim().to_string());
            lines.next();
        }
        let (header_idx, header) = lines
            .next()
            .ok_or_else(|| fail(0, "missing `k,count,probability` header".into()))?;
        let columns: Vec<&str> = header.split(',').map(str::trim).collect();
        if columns != ["k", "count", "probability"] {
            return Err(fail(
                header_idx as u64 + 1,
                format!("expected header `k,count,probability`, found `{header}`"),
            ));
        }

        let mut counts = Vec::new();
        let mut probabilities = Vec::new();
        for (i, line) in lines {
            let lineno = i as u64 + 1;
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').map(str::trim).collect();
            if fields.len() != 3 {
                return Err(fail(
                    lineno,
                    format!("expected 3 fields, found {}", fields.len()),
                ));
            }
            let k: usize = fields[0]
                .parse()
                .map_err(|e| fail(lineno, format!("bad k `{}`: {e}", fields[0])))?;
            if k != probabilities.len() {
                return Err(fail(
                    lineno,
                    format!("expected k = {}, found {k}", probabilities.len()),
                ));
            }
            counts.push(if fields[1].is_empty() {
                None
            } else {
                Some(
                    fields[1]
                        .parse::<u64>()
                        .map_err(|e| fail(lineno, format!("bad count `{}`: {e}", fields[1])))?,
                )
            });
            probabilities.push(if fields[2].is_empty() {
                None
            } else {
                Some(
                    fields[2].parse::<f64>().map_err(|e| {
                        fail(lineno, format!("bad probability `{}`: {e}", fields[2]))
                    })?,
                )
            });
        }

        let statistics = if counts.iter().all(Option::is_some) {
            ClickStatistics::from_counts(counts.into_iter().flatten().collect())
        } else if probabilities.iter().all(Option::is_some) {
            ClickStatistics::from_probabilities(probabilities.into_iter().flatten().collect())
        } else {
            return Err(fail(
                0,
                "every row needs a count, or every row a probability".into(),
            ));
        }
        .map_err(|e| fail(0, e.to_string()))?;

        if let Some(n) = metadata.get("N") {
            let n: usize = n
                .parse()
                .map_err(|e| fail(0, format!("bad N `{n}` in metadata: {e}")))?;
            if n != statistics.bins() {
                return Err(fail(
                    0,
                    format!(
                        "metadata N = {n} but table has {} rows",
                        statistics.bins() + 1
                    ),
                ));
            }
        }
        if let (Some(m), Some(trials)) = (metadata.get("M"), statistics.trials()) {
            let m: u64 = m
                .parse()
                .map_err(|e| fail(0, format!("bad M `{m}` in metadata: {e}")))?;
            if m != trials {
                return Err(fail(
                    0,
                    format!("metadata M = {m} but counts sum to {trials}"),
                ));
            }
        }
        Ok(Self {
            statistics,
            metadata,
        })
    }
}

/// Normally ordered no-click moments `<:m^l:>`, `l = 0..=N`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MomentVector {
    values: Vec<f64>,
}

impl MomentVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::EmptyInput("moment vector".into()));
        }
        Ok(Self { values })
    }

    /// Moments of a photon-number distribution seen by the detector,
    /// conditioned on the truncated support.
    pub fn analytic(pnd: &PhotonNumberDistribution, cfg: &DetectorConfig) -> Result<Self> {
        cfg.validate()?;
        let n_bins = cfg.bins as f64;
        let total = pnd.total();
        let values = (0..=cfg.bins)
            .map(|l| {
                let base = 1.0 - l as f64 * cfg.efficiency / n_bins;
                let sum: f64 = pnd
                    .probabilities()
                    .iter()
                    .enumerate()
                    .map(|(n, p)| p * base.powi(n as i32))
                    .sum();
                (-(l as f64) * cfg.dark_click_rate).exp() * sum / total
            })
            .collect();
        Ok(Self { values })
    }

    /// Moments estimated from click statistics.
    pub fn from_clicks(cs: &ClickStatistics) -> Self {
        Self {
            values: (0..=cs.bins()).map(|l| moment_unchecked(cs, l)).collect(),
        }
    }

    pub fn bins(&self) -> usize {
        self.values.len() - 1
    }

    pub fn get(&self, l: usize) -> f64 {
        self.values[l]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Inverse binomial transform back to click probabilities:
    /// `c_k = C(N,k) sum_j C(k,j) (-1)^j <:m^(N-k+j):>`.
    pub fn to_click_probabilities(&self) -> Vec<f64> {
        let n = self.bins();
        (0..=n)
            .map(|k| {
                let inner: f64 = (0..=k)
                    .map(|j| {
                        let sign = if j % 2 == 0 { 1.0 } else { -1.0 };
                        sign * binomial(k, j) * self.values[n - k + j]
                    })
                    .sum();
                binomial(n, k) * inner
            })
            .collect()
    }
}

/// `C(n, k)` as a double.
pub fn binomial(n: usize, k: usize) -> f64 {
    if k > n {
        return 0.0;
    }
    let k = k.min(n - k);
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

fn moment_unchecked(cs: &ClickStatistics, l: usize) -> f64 {
    let n = cs.bins();
    let norm = binomial(n, l);
    cs.probabilities
        .iter()
        .enumerate()
        .take(n - l + 1)
        .map(|(k, c)| binomial(n - k, l) / norm * c)
        .sum()
}

/// `<:m^l:> = sum_{k <= N-l} C(N-k, l) / C(N, l) c_k`.
pub fn moments_from_clicks(cs: &ClickStatistics, l: usize) -> Result<f64> {
    if l > cs.bins() {
        return Err(Error::ParameterDomain(format!(
            "moment order {l} exceeds N = {}",
            cs.bins()
        )));
    }
    Ok(moment_unchecked(cs, l))
}

/// Click statistics of a photon-number distribution under the linear response.
///
/// Equal to the inverse binomial transform of [`MomentVector::analytic`], but
/// evaluated as an occupancy recursion over photons, which has no
/// cancellation: after each photon, `j` occupied bins become `j + 1` with
/// probability `efficiency (N - j) / N`. Dark clicks then fire in each of the
/// `N - j` empty bins independently.
pub fn click_statistics(
    pnd: &PhotonNumberDistribution,
    cfg: &DetectorConfig,
) -> Result<ClickStatistics> {
    cfg.validate()?;
    let n_bins = cfg.bins;
    let grow: Vec<f64> = (0..=n_bins)
        .map(|j| cfg.efficiency * (n_bins - j) as f64 / n_bins as f64)
        .collect();
    let mut occupancy = vec![0.0; n_bins + 1];
    occupancy[0] = 1.0;
    let mut lit = vec![0.0; n_bins + 1];
    for (n, &p) in pnd.probabilities().iter().enumerate() {
        if n > 0 {
            for j in (0..=n_bins).rev() {
                let stay = occupancy[j] * (1.0 - grow[j]);
                let arrive = if j > 0 {
                    occupancy[j - 1] * grow[j - 1]
                } else {
                    0.0
                };
                occupancy[j] = stay + arrive;
            }
        }
        for (acc, o) in lit.iter_mut().zip(&occupancy) {
            *acc += p * o;
        }
    }
    let dark = 1.0 - (-cfg.dark_click_rate).exp();
    let probabilities = if dark > 0.0 {
        let mut out = vec![0.0; n_bins + 1];
        for (j, &pj) in lit.iter().enumerate() {
            let empty = n_bins - j;
            for extra in 0..=empty {
                out[j + extra] += pj
                    * binomial(empty, extra)
                    * dark.powi(extra as i32)
                    * (1.0 - dark).powi((empty - extra) as i32);
            }
        }
        out
    } else {
        lit
    };
    ClickStatistics::from_probabilities(probabilities)
}

pub fn mean_clicks(cs: &ClickStatistics) -> f64 {
    cs.probabilities
        .iter()
        .enumerate()
        .map(|(k, c)| k as f64 * c)
        .sum()
}

/// Multinomial counts with `M` trials, drawn as a chain of conditional
/// binomials from the stream keyed by `seed`.
pub fn sample_clicks(cs: &ClickStatistics, trials: u64, seed: u64) -> Result<ClickStatistics> {
    if trials == 0 {
        return Err(Error::EmptyInput("M = 0 trials".into()));
    }
    let mut rng = stream_rng(seed, 0);
    Ok(
        ClickStatistics::from_counts(multinomial(&mut rng, trials, &cs.probabilities))
            .expect("trials > 0"),
    )
}

pub(crate) fn multinomial<R: Rng>(rng: &mut R, trials: u64, probabilities: &[f64]) -> Vec<u64> {
    let mut counts = vec![0u64; probabilities.len()];
    let mut left = trials;
    let mut mass: f64 = probabilities.iter().sum();
    for (k, &p) in probabilities.iter().enumerate() {
        if left == 0 {
            break;
        }
        if k + 1 == probabilities.len() {
            counts[k] = left;
            break;
        }
        let q = if mass > 0.0 {
            (p / mass).clamp(0.0, 1.0)
        } else {
            0.0
        };
        let draw = Binomial::new(left, q).expect("q in [0, 1]").sample(rng);
        counts[k] = draw;
        left -= draw;
        mass -= p;
    }
    counts
}

/// Brute-force simulation of `M` detection events, photon by photon.
///
/// Trials are split into shards of [`MONTE_CARLO_SHARD`]; shard `s` draws from
/// stream `s` of `seed`, so the counts do not depend on `exec` or the thread
/// count.
pub fn monte_carlo_clicks(
    pnd: &PhotonNumberDistribution,
    cfg: &DetectorConfig,
    trials: u64,
    seed: u64,
    exec: Execution,
) -> Result<ClickStatistics> {
    cfg.validate()?;
    if trials == 0 {
        return Err(Error::EmptyInput("M = 0 trials".into()));
    }
    let photons = WeightedIndex::new(pnd.probabilities())
        .map_err(|e| Error::Degenerate(format!("photon-number distribution: {e}")))?;
    let shards = shard_sizes(trials, MONTE_CARLO_SHARD);
    let dark = 1.0 - (-cfg.dark_click_rate).exp();
    let n_bins = cfg.bins;
    let partial = exec.map(shards.len(), |s| {
        let mut rng = stream_rng(seed, s as u64);
        let mut counts = vec![0u64; n_bins + 1];
        let mut hit = vec![false; n_bins];
        for _ in 0..shards[s] {
            hit.fill(false);
            let n = photons.sample(&mut rng);
            for _ in 0..n {
                if rng.random::<f64>() < cfg.efficiency {
                    hit[rng.random_range(0..n_bins)] = true;
                }
            }
            if dark > 0.0 {
                for h in hit.iter_mut() {
                    if rng.random::<f64>() < dark {
                        *h = true;
                    }
                }
            }
            counts[hit.iter().filter(|h| **h).count()] += 1;
        }
        counts
    });
    let mut counts = vec![0u64; n_bins + 1];
    for shard in partial {
        for (total, c) in counts.iter_mut().zip(shard) {
            *total += c;
        }
    }
    ClickStatistics::from_counts(counts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::source::{apply_loss, coherent, squeezed_vacuum, thermal, Truncation};
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use statrs::distribution::{ChiSquared, ContinuousCDF};

    fn cfg() -> DetectorConfig {
        DetectorConfig::default()
    }

    fn test_states() -> Vec<PhotonNumberDistribution> {
        let t = Truncation::default();
        vec![
            coherent(2.0, t).unwrap(),
            squeezed_vacuum(1.0, t).unwrap(),
            thermal(1.0, t).unwrap(),
        ]
    }

    #[test]
    fn vacuum_and_single_photon() {
        let vac = click_statistics(&PhotonNumberDistribution::fock(0), &cfg()).unwrap();
        assert_eq!(vac.probabilities()[0], 1.0);
        assert_eq!(mean_clicks(&vac), 0.0);
        let one = click_statistics(&PhotonNumberDistribution::fock(1), &cfg()).unwrap();
        assert_abs_diff_eq!(one.probabilities()[0], 0.78, epsilon = 1e-15);
        assert_abs_diff_eq!(one.probabilities()[1], 0.22, epsilon = 1e-15);
        assert!(one.probabilities()[2..].iter().all(|c| c.abs() < 1e-15));
        assert_abs_diff_eq!(mean_clicks(&one), 0.22, epsilon = 1e-15);
    }

    #[test]
    fn coherent_clicks_are_binomial() {
        for (mu, n, eff) in [(2.0, 8usize, 0.22), (5.0, 4, 0.9), (0.3, 16, 1.0)] {
            let c = DetectorConfig {
                bins: n,
                efficiency: eff,
                dark_click_rate: 0.0,
            };
            let cs = click_statistics(&coherent(mu, Truncation::at(80)).unwrap(), &c).unwrap();
            let q = 1.0 - (-eff * mu / n as f64).exp();
            for k in 0..=n {
                let expected = binomial(n, k) * q.powi(k as i32) * (1.0 - q).powi((n - k) as i32);
                assert_abs_diff_eq!(cs.probabilities()[k], expected, epsilon = 1e-13);
            }
        }
    }

    #[test]
    fn dark_clicks_on_vacuum_are_binomial() {
        let c = DetectorConfig {
            dark_click_rate: 0.05,
            ..cfg()
        };
        let cs = click_statistics(&PhotonNumberDistribution::fock(0), &c).unwrap();
        let q = 1.0 - (-0.05f64).exp();
        for k in 0..=8 {
            let expected = binomial(8, k) * q.powi(k as i32) * (1.0 - q).powi(8 - k as i32);
            assert_abs_diff_eq!(cs.probabilities()[k], expected, epsilon = 1e-15);
        }
    }

    #[test]
    fn occupancy_recursion_matches_alternating_sum() {
        let c = DetectorConfig {
            dark_click_rate: 0.03,
            ..cfg()
        };
        for pnd in test_states() {
            let direct = click_statistics(&pnd, &c).unwrap();
            let via_moments = MomentVector::analytic(&pnd, &c)
                .unwrap()
                .to_click_probabilities();
            for (a, b) in direct.probabilities().iter().zip(&via_moments) {
                assert_abs_diff_eq!(*a, *b, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn moments_round_trip() {
        for pnd in test_states() {
            let cs = click_statistics(&pnd, &cfg()).unwrap();
            let analytic = MomentVector::analytic(&pnd, &cfg()).unwrap();
            for l in 0..=8 {
                assert_abs_diff_eq!(
                    moments_from_clicks(&cs, l).unwrap(),
                    analytic.get(l),
                    epsilon = 1e-12
                );
            }
            assert_abs_diff_eq!(
                mean_clicks(&cs),
                8.0 * (1.0 - moments_from_clicks(&cs, 1).unwrap()),
                epsilon = 1e-12
            );
        }
        let cs = click_statistics(&test_states()[0], &cfg()).unwrap();
        assert!(moments_from_clicks(&cs, 9).is_err());
        let dark = ClickStatistics::from_probabilities(vec![1.0, 0.0, 0.0]).unwrap();
        assert_eq!(MomentVector::from_clicks(&dark).values(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn coherent_moments_are_powers() {
        let pnd = coherent(3.0, Truncation::at(60)).unwrap();
        let m = MomentVector::analytic(&pnd, &cfg()).unwrap();
        for l in 0..=8 {
            assert_abs_diff_eq!(m.get(l), m.get(1).powi(l as i32), epsilon = 1e-12);
        }
    }

    #[test]
    fn sampling_cases() {
        let zero = ClickStatistics::from_probabilities(vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        let s = sample_clicks(&zero, 1000, 1).unwrap();
        assert_eq!(s.counts().unwrap(), &[1000, 0, 0, 0]);
        assert!(matches!(
            sample_clicks(&zero, 0, 1),
            Err(Error::EmptyInput(_))
        ));

        let cs = click_statistics(&test_states()[1], &cfg()).unwrap();
        let a = sample_clicks(&cs, 1_000_000, 42).unwrap();
        let b = sample_clicks(&cs, 1_000_000, 42).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.trials(), Some(1_000_000));
        for (emp, p) in a.probabilities().iter().zip(cs.probabilities()) {
            let se = (p * (1.0 - p) / 1e6).sqrt();
            assert!((emp - p).abs() <= 5.0 * se.max(1e-12), "{emp} vs {p}");
        }
    }

    #[test]
    fn monte_carlo_trivial_cases() {
        let vac = monte_carlo_clicks(
            &PhotonNumberDistribution::fock(0),
            &cfg(),
            1000,
            3,
            Execution::Sequential,
        )
        .unwrap();
        assert_eq!(vac.counts().unwrap()[0], 1000);
        let ideal = DetectorConfig {
            efficiency: 1.0,
            ..cfg()
        };
        let one = monte_carlo_clicks(
            &PhotonNumberDistribution::fock(1),
            &ideal,
            1000,
            3,
            Execution::Sequential,
        )
        .unwrap();
        assert_eq!(one.counts().unwrap()[1], 1000);
    }

    #[test]
    fn monte_carlo_is_thread_independent() {
        let pnd = &test_states()[0];
        let trials = 3 * MONTE_CARLO_SHARD + 17;
        let seq = monte_carlo_clicks(pnd, &cfg(), trials, 9, Execution::Sequential).unwrap();
        let par = monte_carlo_clicks(pnd, &cfg(), trials, 9, Execution::Parallel).unwrap();
        assert_eq!(seq, par);
        assert_eq!(seq.trials(), Some(trials));
    }

    #[test]
    fn monte_carlo_agrees_with_dark_count_model() {
        let c = DetectorConfig {
            dark_click_rate: 0.1,
            ..cfg()
        };
        let pnd = thermal(1.0, Truncation::default()).unwrap();
        let exact = click_statistics(&pnd, &c).unwrap();
        let mc = monte_carlo_clicks(&pnd, &c, 400_000, 5, Execution::Parallel).unwrap();
        let counts = mc.counts().unwrap();
        let mut stat = 0.0;
        let mut dof = 0;
        for (o, p) in counts.iter().zip(exact.probabilities()) {
            let e = p * 4e5;
            if e > 5.0 {
                stat += (*o as f64 - e).powi(2) / e;
                dof += 1;
            }
        }
        let pval = 1.0 - ChiSquared::new(f64::from(dof - 1)).unwrap().cdf(stat);
        assert!(pval > 1e-3, "chi2 = {stat}, p = {pval}");
    }

    #[test]
    fn csv_round_trip() {
        let cs = sample_clicks(
            &click_statistics(&test_states()[2], &cfg()).unwrap(),
            5000,
            1,
        )
        .unwrap();
        let mut meta = BTreeMap::new();
        meta.insert("N".to_string(), "8".to_string());
        meta.insert("M".to_string(), "5000".to_string());
        meta.insert("eta".to_string(), "0.50".to_string());
        let mut buf = Vec::new();
        cs.write_csv(&mut buf, &meta).unwrap();
        let back = ClickRecord::read(&buf[..], Path::new("mem.csv")).unwrap();
        assert_eq!(back.statistics, cs);
        assert_eq!(back.metadata, meta);

        let bad = "# N=8\nk,count,probability\n0,5,\n1,x,\n";
        match ClickRecord::read(bad.as_bytes(), Path::new("bad.csv")) {
            Err(Error::Ingestion { line, message, .. }) => {
                assert_eq!(line, 4);
                assert!(message.contains("bad count"));
            }
            other => panic!("{other:?}"),
        }
        let wrong_n = "# N=4\nk,count,probability\n0,5,\n1,6,\n";
        assert!(ClickRecord::read(wrong_n.as_bytes(), Path::new("n.csv")).is_err());
    }

    fn arb_pnd() -> impl Strategy<Value = PhotonNumberDistribution> {
        prop_oneof![
            (0.0f64..8.0).prop_map(|m| coherent(m, Truncation::default()).unwrap()),
            (0.0f64..3.0).prop_map(|m| thermal(m, Truncation::default()).unwrap()),
            (0.0f64..1.5).prop_map(|r| squeezed_vacuum(r, Truncation::default()).unwrap()),
        ]
    }

    fn arb_cfg() -> impl Strategy<Value = DetectorConfig> {
        (1usize..12, 0.0f64..=1.0, 0.0f64..0.2).prop_map(|(bins, efficiency, dark)| {
            DetectorConfig {
                bins,
                efficiency,
                dark_click_rate: dark,
            }
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn reconstruction_and_normalisation(p in arb_pnd(), c in arb_cfg()) {
            let cs = click_statistics(&p, &c).unwrap();
            prop_assert!((cs.probabilities().iter().sum::<f64>() - 1.0).abs() < 1e-12);
            let rebuilt = MomentVector::from_clicks(&cs).to_click_probabilities();
            for (a, b) in rebuilt.iter().zip(cs.probabilities()) {
                prop_assert!((a - b).abs() < 1e-10);
            }
        }

        #[test]
        fn loss_and_efficiency_commute(p in arb_pnd(), c in arb_cfg(), eta in 0.0f64..=1.0) {
            let lossy = click_statistics(&apply_loss(&p, eta).unwrap(), &c).unwrap();
            let weak = click_statistics(&p, &DetectorConfig { efficiency: eta * c.efficiency, ..c }).unwrap();
            for (a, b) in lossy.probabilities().iter().zip(weak.probabilities()) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }

        #[test]
        fn moments_are_monotone(p in arb_pnd(), c in arb_cfg()) {
            let m = MomentVector::analytic(&p, &c).unwrap();
            prop_assert!((m.get(0) - 1.0).abs() < 1e-15);
            for l in 0..c.bins {
                prop_assert!(m.get(l + 1) <= m.get(l) + 1e-15);
                prop_assert!(m.get(l + 1) >= 0.0);
            }
        }
    }
}
