//! End-to-end experiments on ensembles of fixed-attenuation click statistics.
//!
//! An ensemble holds one click distribution for every grid transmittance
//! `eta_j = j / n`. A fluctuating channel is emulated by weighting the members
//! with a discrete PDT, either by merging the click probabilities or by
//! averaging their moments; both routes agree by linearity.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::detector::{
    click_statistics, mean_clicks, sample_clicks, ClickRecord, ClickStatistics, DetectorConfig,
    MomentVector,
};
use crate::error::{Error, Result};
use crate::exec::{derive_seed, Execution};
use crate::nonclassicality::{
    align, classify, exact_result, BootstrapReplicates, Classification, EnsembleMember,
    NonclassicalityResult, DEFAULT_RESAMPLES, DEFAULT_THRESHOLD,
};
use crate::pdt::{
    beta_binomial, discretize, eta_label, grid_eta, post_select, DiscretePDT, TransmittanceModel,
};
use crate::source::{apply_loss, PhotonNumberDistribution, SourceSpec, Truncation};

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Provenance {
    Simulated { source: String, mode: String },
    Ingested { path: PathBuf },
}

/// Click statistics on the complete grid `eta_j = j / n`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ChannelEnsemble {
    n: usize,
    detector: Option<DetectorConfig>,
    members: Vec<EnsembleMember>,
    provenance: Provenance,
}

impl ChannelEnsemble {
    /// Validates that `members` are exactly `eta_j = j / n`, in order, with a
    /// common number of bins.
    pub fn new(
        members: Vec<EnsembleMember>,
        detector: Option<DetectorConfig>,
        provenance: Provenance,
    ) -> Result<Self> {
        if members.len() < 2 {
            return Err(Error::ParameterDomain(format!(
                "an ensemble needs n >= 1 (got {} members)",
                members.len()
            )));
        }
        let n = members.len() - 1;
        for (j, m) in members.iter().enumerate() {
            if (m.eta - grid_eta(j, n)).abs() > 1e-9 {
                return Err(Error::IncompleteEnsemble {
                    eta: eta_label(grid_eta(j, n), n),
                });
            }
        }
        let bins = members[0].statistics.bins();
        if let Some(m) = members.iter().find(|m| m.statistics.bins() != bins) {
            return Err(Error::Schema(format!(
                "click statistics at eta = {} have N = {}, expected {bins}",
                eta_label(m.eta, n),
                m.statistics.bins()
            )));
        }
        if let Some(d) = detector {
            if d.bins != bins {
                return Err(Error::Schema(format!(
                    "detector has N = {} but statistics have N = {bins}",
                    d.bins
                )));
            }
        }
        Ok(Self {
            n,
            detector,
            members,
            provenance,
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn bins(&self) -> usize {
        self.members[0].statistics.bins()
    }

    pub fn detector(&self) -> Option<&DetectorConfig> {
        self.detector.as_ref()
    }

    pub fn members(&self) -> &[EnsembleMember] {
        &self.members
    }

    pub fn provenance(&self) -> &Provenance {
        &self.provenance
    }

    /// True when every member carries counts.
    pub fn is_sampled(&self) -> bool {
        self.members.iter().all(|m| m.statistics.counts().is_some())
    }

    fn check_grid(&self, pdt: &DiscretePDT) -> Result<()> {
        if pdt.n() != self.n {
            // report the first support point the ensemble lacks
            for (_, eta, _) in pdt.support() {
                if !self.members.iter().any(|m| (m.eta - eta).abs() <= 1e-9) {
                    return Err(Error::IncompleteEnsemble {
                        eta: eta_label(eta, pdt.n()),
                    });
                }
            }
        }
        Ok(())
    }
}

/// How each member's click statistics are produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EnsembleMode {
    Analytic,
    /// `trials` multinomial draws per level; level `j` uses
    /// `derive_seed(seed, "sample", j)`.
    Sampled {
        trials: u64,
        seed: u64,
    },
}

pub fn build_ensemble(
    source: &SourceSpec,
    detector: &DetectorConfig,
    n: usize,
    mode: EnsembleMode,
    exec: Execution,
) -> Result<ChannelEnsemble> {
    let pnd = source.build(Truncation::default())?;
    ensemble_from_distribution(&pnd, &source.describe(), detector, n, mode, exec)
}

/// Ensemble for an explicit photon-number distribution labelled `source`.
pub fn ensemble_from_distribution(
    pnd: &PhotonNumberDistribution,
    source: &str,
    detector: &DetectorConfig,
    n: usize,
    mode: EnsembleMode,
    exec: Execution,
) -> Result<ChannelEnsemble> {
    detector.validate()?;
    if n == 0 {
        return Err(Error::ParameterDomain(
            "grid resolution n must be >= 1".into(),
        ));
    }
    if let EnsembleMode::Sampled { trials: 0, .. } = mode {
        return Err(Error::EmptyInput("M = 0 trials".into()));
    }
    let members: Vec<Result<EnsembleMember>> = exec.map(n + 1, |j| {
        let eta = grid_eta(j, n);
        let exact = click_statistics(&apply_loss(pnd, eta)?, detector)?;
        let statistics = match mode {
            EnsembleMode::Analytic => exact,
            EnsembleMode::Sampled { trials, seed } => {
                sample_clicks(&exact, trials, derive_seed(seed, "sample", j as u64))?
            }
        };
        Ok(EnsembleMember { eta, statistics })
    });
    let mode = match mode {
        EnsembleMode::Analytic => "analytic".to_string(),
        EnsembleMode::Sampled { trials, seed } => format!("sampled(M={trials}, seed={seed})"),
    };
    ChannelEnsemble::new(
        members.into_iter().collect::<Result<_>>()?,
        Some(*detector),
        Provenance::Simulated {
            source: source.to_string(),
            mode,
        },
    )
}

/// `c^atm_k = sum_j w_j c_k(eta_j)`. A point mass returns its member
/// unchanged, counts included; otherwise only probabilities are merged.
pub fn merge_statistics(ensemble: &ChannelEnsemble, pdt: &DiscretePDT) -> Result<ClickStatistics> {
    ensemble.check_grid(pdt)?;
    let aligned = align(&ensemble.members, pdt)?;
    if let [(_, w, cs)] = aligned.as_slice() {
        if *w == 1.0 {
            return Ok((*cs).clone());
        }
    }
    let mut merged = vec![0.0; ensemble.bins() + 1];
    for (_, w, cs) in aligned {
        for (acc, c) in merged.iter_mut().zip(cs.probabilities()) {
            *acc += w * c;
        }
    }
    ClickStatistics::from_probabilities(merged)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalysisSettings {
    /// Matrix orders `K`.
    pub orders: Vec<usize>,
    /// Bootstrap resamples `B` for sampled ensembles.
    pub resamples: usize,
    pub threshold: f64,
}

impl Default for AnalysisSettings {
    fn default() -> Self {
        Self {
            orders: vec![2, 8],
            resamples: DEFAULT_RESAMPLES,
            threshold: DEFAULT_THRESHOLD,
        }
    }
}

/// Evaluates channels on one ensemble, reusing the bootstrap replicates of
/// every member across channels.
pub struct Analyzer<'a> {
    ensemble: &'a ChannelEnsemble,
    settings: AnalysisSettings,
    replicates: Option<BootstrapReplicates>,
    exec: Execution,
}

impl<'a> Analyzer<'a> {
    /// Sampled ensembles get bootstrap errors from `derive_seed(seed,
    /// "bootstrap", 0)`; exact ensembles get zero errors.
    pub fn new(
        ensemble: &'a ChannelEnsemble,
        settings: &AnalysisSettings,
        seed: u64,
        exec: Execution,
    ) -> Result<Self> {
        if settings.orders.is_empty() {
            return Err(Error::ParameterDomain("no matrix orders requested".into()));
        }
        if !(settings.threshold > 0.0) {
            return Err(Error::ParameterDomain(format!(
                "significance threshold {} must be > 0",
                settings.threshold
            )));
        }
        for &k in &settings.orders {
            if k < 2 || !k.is_multiple_of(2) || k > ensemble.bins() {
                return Err(Error::ParameterDomain(format!(
                    "matrix order K = {k} must be even with 2 <= K <= N = {}",
                    ensemble.bins()
                )));
            }
        }
        let replicates = if ensemble.is_sampled() {
            Some(BootstrapReplicates::generate(
                &ensemble.members,
                settings.resamples,
                derive_seed(seed, "bootstrap", 0),
                exec,
            )?)
        } else {
            None
        };
        Ok(Self {
            ensemble,
            settings: settings.clone(),
            replicates,
            exec,
        })
    }

    pub fn settings(&self) -> &AnalysisSettings {
        &self.settings
    }

    pub fn ensemble(&self) -> &ChannelEnsemble {
        self.ensemble
    }

    /// One result per requested order for the channel `pdt`.
    pub fn evaluate(&self, pdt: &DiscretePDT, channel: &str) -> Result<Vec<NonclassicalityResult>> {
        self.ensemble.check_grid(pdt)?;
        let members = &self.ensemble.members;
        match &self.replicates {
            Some(r) => r.estimate(members, pdt, &self.settings.orders, channel, self.exec),
            None => {
                let mv = crate::nonclassicality::atmospheric_moment_vector(members, pdt)?;
                self.settings
                    .orders
                    .iter()
                    .map(|&k| exact_result(&mv, k, channel))
                    .collect()
            }
        }
    }

    /// Same as [`Self::evaluate`] but through the merged click statistics.
    /// Only exact statistics are supported.
    pub fn evaluate_merged(
        &self,
        pdt: &DiscretePDT,
        channel: &str,
    ) -> Result<Vec<NonclassicalityResult>> {
        let merged = merge_statistics(self.ensemble, pdt)?;
        let mv = MomentVector::from_clicks(&merged);
        self.settings
            .orders
            .iter()
            .map(|&k| exact_result(&mv, k, channel))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SweepKind {
    ConstantLoss,
    Postselect,
    Rytov,
    BetaScan,
    Atmospheric,
}

impl SweepKind {
    pub fn parameter_names(self) -> &'static [&'static str] {
        match self {
            Self::ConstantLoss => &["eta"],
            Self::Postselect => &["eta_ps"],
            Self::Rytov => &["rytov_variance"],
            Self::BetaScan => &["alpha", "beta"],
            Self::Atmospheric => &[],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::ConstantLoss => "constant-loss",
            Self::Postselect => "postselect",
            Self::Rytov => "rytov",
            Self::BetaScan => "beta-scan",
            Self::Atmospheric => "atmospheric",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepPoint {
    pub parameters: Vec<f64>,
    pub results: Vec<NonclassicalityResult>,
    /// Set when the point could not be evaluated; the sweep continues.
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepResult {
    pub kind: SweepKind,
    pub threshold: f64,
    pub points: Vec<SweepPoint>,
}

impl SweepResult {
    /// Result of order `order` at point `i`, if it was evaluated.
    pub fn result(&self, i: usize, order: usize) -> Option<&NonclassicalityResult> {
        self.points[i].results.iter().find(|r| r.order == order)
    }

    pub fn classification(&self, r: &NonclassicalityResult) -> Classification {
        classify(r, self.threshold)
    }

    /// One row per point and order. `metadata` lines go first as `# key=value`.
    pub fn to_csv(&self, metadata: &BTreeMap<String, String>) -> String {
        let mut out = String::new();
        for (k, v) in metadata {
            let _ = writeln!(out, "# {k}={v}");
        }
        let mut header: Vec<&str> = self.kind.parameter_names().to_vec();
        header.extend([
            "K",
            "e_min",
            "delta_e",
            "significance",
            "classification",
            "error",
        ]);
        let _ = writeln!(out, "{}", header.join(","));
        for p in &self.points {
            let params: Vec<String> = p.parameters.iter().map(|v| v.to_string()).collect();
            let prefix = if params.is_empty() {
                String::new()
            } else {
                format!("{},", params.join(","))
            };
            if let Some(err) = &p.error {
                let _ = writeln!(out, "{prefix},,,,,{}", csv_escape(err));
                continue;
            }
            for r in &p.results {
                let _ = writeln!(
                    out,
                    "{prefix}{},{},{},{},{},",
                    r.order,
                    r.e_min,
                    r.delta_e,
                    r.significance,
                    self.classification(r)
                );
            }
        }
        out
    }
}

fn csv_escape(s: &str) -> String {
    format!("\"{}\"", s.replace('"', "\"\""))
}

fn point(parameters: Vec<f64>, outcome: Result<Vec<NonclassicalityResult>>) -> SweepPoint {
    match outcome {
        Ok(results) => SweepPoint {
            parameters,
            results,
            error: None,
        },
        Err(e) => SweepPoint {
            parameters,
            results: Vec::new(),
            error: Some(e.to_string()),
        },
    }
}

/// Constant loss at every grid transmittance.
pub fn constant_loss_sweep(analyzer: &Analyzer) -> Result<SweepResult> {
    let n = analyzer.ensemble.n();
    let mut points = Vec::with_capacity(n + 1);
    for j in 0..=n {
        let pdt = DiscretePDT::point_mass(n, j)?;
        let eta = grid_eta(j, n);
        let results = analyzer.evaluate(&pdt, &format!("constant(eta={})", eta_label(eta, n)))?;
        points.push(point(vec![eta], Ok(results)));
    }
    Ok(SweepResult {
        kind: SweepKind::ConstantLoss,
        threshold: analyzer.settings.threshold,
        points,
    })
}

/// The channel `pdt` as a single-point sweep.
pub fn atmospheric_run(
    analyzer: &Analyzer,
    pdt: &DiscretePDT,
    channel: &str,
) -> Result<SweepResult> {
    Ok(SweepResult {
        kind: SweepKind::Atmospheric,
        threshold: analyzer.settings.threshold,
        points: vec![point(Vec::new(), Ok(analyzer.evaluate(pdt, channel)?))],
    })
}

/// Default post-selection cutoffs `0, 0.01, ..., 1`.
pub fn default_postselection_grid() -> Vec<f64> {
    (0..=100).map(|i| grid_eta(i, 100)).collect()
}

/// `pdt` post-selected at each cutoff. Cutoffs that leave no mass are
/// recorded as error points.
pub fn postselection_sweep(
    analyzer: &Analyzer,
    pdt: &DiscretePDT,
    thresholds: &[f64],
    channel: &str,
) -> Result<SweepResult> {
    check_ordered(thresholds, "post-selection cutoffs")?;
    let mut points = Vec::with_capacity(thresholds.len());
    for &t in thresholds {
        if !(0.0..=1.0).contains(&t) {
            return Err(crate::error::domain("eta_ps", t, "[0, 1]"));
        }
        let outcome = post_select(pdt, t)
            .and_then(|p| analyzer.evaluate(&p, &format!("{channel}, eta_ps={t}")));
        points.push(point(vec![t], outcome));
    }
    Ok(SweepResult {
        kind: SweepKind::Postselect,
        threshold: analyzer.settings.threshold,
        points,
    })
}

fn check_ordered(values: &[f64], what: &str) -> Result<()> {
    if values.is_empty() {
        return Err(Error::Config(format!("no {what} given")));
    }
    if values.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(Error::Config(format!("{what} must be strictly increasing")));
    }
    Ok(())
}

/// A transmittance model for one turbulence strength.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RytovEntry {
    pub rytov_variance: f64,
    pub model: TransmittanceModel,
}

/// Table from Rytov variance to channel model.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RytovMapping {
    pub entries: Vec<RytovEntry>,
}

impl RytovMapping {
    /// Synthetic beam-wandering family with shape 2, where
    /// `P(eta) = rho eta^(rho-1) / eta0^rho` on `(0, eta0]` and
    /// `rho = stiffness / rytov_variance`: the spread grows with the Rytov
    /// variance. Not a physical turbulence model.
    pub fn synthetic(grid: &[f64], eta0: f64, stiffness: f64) -> Result<Self> {
        let entries = grid
            .iter()
            .map(|&s| {
                if !(s > 0.0) {
                    return Err(crate::error::domain("rytov_variance", s, "(0, inf)"));
                }
                Ok(RytovEntry {
                    rytov_variance: s,
                    model: TransmittanceModel::weibull_bw(eta0, 2.0, 1.0, s / stiffness)?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self { entries })
    }

    pub fn model_for(&self, rytov_variance: f64) -> Result<&TransmittanceModel> {
        self.entries
            .iter()
            .find(|e| {
                (e.rytov_variance - rytov_variance).abs() <= 1e-12 * rytov_variance.abs().max(1.0)
            })
            .map(|e| &e.model)
            .ok_or_else(|| {
                Error::Config(format!(
                    "no channel model configured for rytov variance {rytov_variance}"
                ))
            })
    }

    pub fn grid(&self) -> Vec<f64> {
        self.entries.iter().map(|e| e.rytov_variance).collect()
    }
}

/// Discretizes the mapped model at each Rytov variance and evaluates it.
pub fn rytov_sweep(
    analyzer: &Analyzer,
    mapping: &RytovMapping,
    grid: &[f64],
) -> Result<SweepResult> {
    check_ordered(grid, "rytov variances")?;
    let n = analyzer.ensemble.n();
    let mut points = Vec::with_capacity(grid.len());
    for &s in grid {
        let model = mapping.model_for(s)?;
        let outcome =
            discretize(model, n).and_then(|pdt| analyzer.evaluate(&pdt, &model.describe()));
        points.push(point(vec![s], outcome));
    }
    Ok(SweepResult {
        kind: SweepKind::Rytov,
        threshold: analyzer.settings.threshold,
        points,
    })
}

/// `count` log-spaced values from `lo` to `hi` inclusive.
pub fn log_grid(lo: f64, hi: f64, count: usize) -> Result<Vec<f64>> {
    if !(lo > 0.0 && hi > lo) || count < 2 {
        return Err(Error::Config(format!(
            "log grid needs 0 < lo < hi and at least 2 points (got {lo}, {hi}, {count})"
        )));
    }
    let step = (hi / lo).ln() / (count - 1) as f64;
    Ok((0..count)
        .map(|i| match i {
            0 => lo,
            _ if i == count - 1 => hi,
            _ => lo * (step * i as f64).exp(),
        })
        .collect())
}

pub fn default_beta_grid() -> Vec<f64> {
    log_grid(0.1, 20.0, 21).expect("valid grid")
}

/// Beta-binomial channels over the grid `alphas x betas`, alpha-major.
pub fn beta_scan(analyzer: &Analyzer, alphas: &[f64], betas: &[f64]) -> Result<SweepResult> {
    check_ordered(alphas, "alpha values")?;
    check_ordered(betas, "beta values")?;
    let n = analyzer.ensemble.n();
    let mut points = Vec::with_capacity(alphas.len() * betas.len());
    for &a in alphas {
        for &b in betas {
            let pdt = beta_binomial(n, a, b)?;
            let outcome = analyzer.evaluate(&pdt, &format!("beta-binomial(alpha={a}, beta={b})"));
            points.push(point(vec![a, b], outcome));
        }
    }
    Ok(SweepResult {
        kind: SweepKind::BetaScan,
        threshold: analyzer.settings.threshold,
        points,
    })
}

/// Source family whose single free parameter is tuned by calibration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case", deny_unknown_fields)]
pub enum CalibrationFamily {
    /// `modes` equal squeezed-vacuum modes; tunes the common `r`.
    SqueezedVacuum {
        modes: usize,
    },
    /// Tunes the displacement at fixed squeezing.
    AmplitudeSqueezed {
        squeeze: f64,
    },
    Coherent,
    Thermal,
}

impl CalibrationFamily {
    fn spec(&self, x: f64) -> SourceSpec {
        match *self {
            Self::SqueezedVacuum { modes: 1 } => SourceSpec::SqueezedVacuum { squeeze: x },
            Self::SqueezedVacuum { modes } => SourceSpec::MultimodeSqueezed {
                squeezes: vec![x; modes],
            },
            Self::AmplitudeSqueezed { squeeze } => SourceSpec::AmplitudeSqueezed {
                amplitude: x,
                squeeze,
            },
            Self::Coherent => SourceSpec::Coherent { mean_photons: x },
            Self::Thermal => SourceSpec::Thermal { mean_photons: x },
        }
    }

    /// Parameter value beyond which the bracket is not extended.
    fn ceiling(&self) -> f64 {
        match self {
            Self::SqueezedVacuum { .. } => 4.0,
            Self::AmplitudeSqueezed { .. } => 40.0,
            Self::Coherent | Self::Thermal => 1600.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Calibration {
    pub source: SourceSpec,
    pub parameter: f64,
    pub mean_clicks: f64,
}

/// Finds the source parameter giving `target` mean clicks at `eta = 1` by
/// bracketing and bisection.
pub fn calibrate_source(
    target: f64,
    detector: &DetectorConfig,
    family: &CalibrationFamily,
) -> Result<Calibration> {
    detector.validate()?;
    if let CalibrationFamily::SqueezedVacuum { modes: 0 } = family {
        return Err(Error::ParameterDomain(
            "at least one squeezed mode is required".into(),
        ));
    }
    if let CalibrationFamily::AmplitudeSqueezed { squeeze } = family {
        if !(*squeeze >= 0.0 && squeeze.is_finite()) {
            return Err(crate::error::domain(
                "squeeze parameter",
                *squeeze,
                "[0, inf)",
            ));
        }
    }
    let n_bins = detector.bins as f64;
    if !(target >= 0.0) || target >= n_bins {
        return Err(Error::Unachievable(format!(
            "mean clicks {target} must lie in [0, N = {n_bins})"
        )));
    }
    let clicks = |x: f64| -> Result<f64> {
        let pnd = family.spec(x).build(Truncation::default())?;
        Ok(mean_clicks(&click_statistics(&pnd, detector)?))
    };
    let base = clicks(0.0)?;
    if target <= base {
        if target == base {
            return Ok(Calibration {
                source: family.spec(0.0),
                parameter: 0.0,
                mean_clicks: base,
            });
        }
        return Err(Error::Unachievable(format!(
            "mean clicks {target} is below the family's minimum {base}"
        )));
    }
    let mut lo = 0.0;
    let mut hi = 0.5;
    while clicks(hi)? < target {
        lo = hi;
        hi *= 2.0;
        if hi > family.ceiling() {
            return Err(Error::Unachievable(format!(
                "mean clicks {target} not reached with efficiency {}",
                detector.efficiency
            )));
        }
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        let f = clicks(mid)?;
        if f < target {
            lo = mid;
        } else {
            hi = mid;
        }
        if (f - target).abs() < 1e-12 {
            break;
        }
    }
    let (x, f) = {
        let (flo, fhi) = (clicks(lo)?, clicks(hi)?);
        if (flo - target).abs() <= (fhi - target).abs() {
            (lo, flo)
        } else {
            (hi, fhi)
        }
    };
    Ok(Calibration {
        source: family.spec(x),
        parameter: x,
        mean_clicks: f,
    })
}

fn file_name(eta: f64, n: usize) -> String {
    format!("eta_{}.csv", eta_label(eta, n))
}

/// Writes one `k,count,probability` file per level into `dir`, with the
/// level, grid size and detector in the metadata header after `extra`.
pub fn export_ensemble(
    ensemble: &ChannelEnsemble,
    dir: &Path,
    extra: &BTreeMap<String, String>,
) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let mut written = Vec::with_capacity(ensemble.members.len());
    for (j, m) in ensemble.members.iter().enumerate() {
        let mut meta = extra.clone();
        meta.insert("N".to_string(), ensemble.bins().to_string());
        if let Some(trials) = m.statistics.trials() {
            meta.insert("M".to_string(), trials.to_string());
        }
        meta.insert("eta".to_string(), eta_label(m.eta, ensemble.n));
        meta.insert("level".to_string(), j.to_string());
        meta.insert("n".to_string(), ensemble.n.to_string());
        if let Some(d) = &ensemble.detector {
            meta.insert("efficiency".to_string(), d.efficiency.to_string());
            meta.insert("dark_click_rate".to_string(), d.dark_click_rate.to_string());
        }
        let path = dir.join(file_name(m.eta, ensemble.n));
        let mut file = std::io::BufWriter::new(std::fs::File::create(&path)?);
        m.statistics.write_csv(&mut file, &meta)?;
        file.flush()?;
        written.push(path);
    }
    Ok(written)
}

/// Reads every `*.csv` in `dir` as one attenuation level.
pub fn ingest_ensemble(dir: &Path) -> Result<ChannelEnsemble> {
    let listing = std::fs::read_dir(dir).map_err(|e| Error::Ingestion {
        path: dir.to_path_buf(),
        line: 0,
        message: e.to_string(),
    })?;
    let mut paths: Vec<PathBuf> = listing
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "csv"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::Ingestion {
            path: dir.to_path_buf(),
            line: 0,
            message: "no .csv files found".into(),
        });
    }

    let meta_err = |path: &Path, message: String| Error::Ingestion {
        path: path.to_path_buf(),
        line: 0,
        message,
    };
    let mut grid: Option<usize> = None;
    let mut detector: Option<Option<DetectorConfig>> = None;
    let mut levels: BTreeMap<usize, (PathBuf, ClickStatistics)> = BTreeMap::new();
    for path in paths {
        let record = ClickRecord::read_path(&path)?;
        let get = |key: &str| -> Result<&String> {
            record
                .metadata
                .get(key)
                .ok_or_else(|| meta_err(&path, format!("metadata key `{key}` missing")))
        };
        let parse_usize = |key: &str| -> Result<usize> {
            get(key)?
                .parse()
                .map_err(|e| meta_err(&path, format!("metadata `{key}`: {e}")))
        };
        let n = parse_usize("n")?;
        let level = parse_usize("level")?;
        if n == 0 || level > n {
            return Err(meta_err(
                &path,
                format!("level {level} outside grid 0..={n}"),
            ));
        }
        match grid {
            None => grid = Some(n),
            Some(g) if g != n => {
                return Err(meta_err(
                    &path,
                    format!("grid size n = {n}, other files have {g}"),
                ));
            }
            _ => {}
        }
        if let Some(label) = record.metadata.get("eta") {
            let eta: f64 = label
                .parse()
                .map_err(|e| meta_err(&path, format!("metadata `eta`: {e}")))?;
            if (eta - grid_eta(level, n)).abs() > 0.5 / n as f64 {
                return Err(meta_err(
                    &path,
                    format!("eta = {label} does not match level {level}/{n}"),
                ));
            }
        }
        let this_detector = match (
            record.metadata.get("efficiency"),
            record.metadata.get("dark_click_rate"),
        ) {
            (Some(e), Some(d)) => Some(DetectorConfig {
                bins: record.statistics.bins(),
                efficiency: e
                    .parse()
                    .map_err(|err| meta_err(&path, format!("metadata `efficiency`: {err}")))?,
                dark_click_rate: d
                    .parse()
                    .map_err(|err| meta_err(&path, format!("metadata `dark_click_rate`: {err}")))?,
            }),
            _ => None,
        };
        match &detector {
            None => detector = Some(this_detector),
            Some(d) if *d != this_detector => {
                return Err(meta_err(
                    &path,
                    "detector settings differ between files".into(),
                ));
            }
            _ => {}
        }
        if let Some((other, _)) = levels.get(&level) {
            return Err(meta_err(
                &path,
                format!("level {level} already read from {}", other.display()),
            ));
        }
        levels.insert(level, (path, record.statistics));
    }

    let n = grid.expect("at least one file");
    if let Some(missing) = (0..=n).find(|j| !levels.contains_key(j)) {
        return Err(Error::IncompleteEnsemble {
            eta: eta_label(grid_eta(missing, n), n),
        });
    }
    let bins = levels[&0].1.bins();
    if let Some((path, cs)) = levels.values().find(|(_, cs)| cs.bins() != bins) {
        return Err(Error::Schema(format!(
            "{} has N = {}, other files have N = {bins}",
            path.display(),
            cs.bins()
        )));
    }
    let members = levels
        .into_iter()
        .map(|(j, (_, statistics))| EnsembleMember {
            eta: grid_eta(j, n),
            statistics,
        })
        .collect();
    ChannelEnsemble::new(
        members,
        detector.flatten(),
        Provenance::Ingested {
            path: dir.to_path_buf(),
        },
    )
}
