//! Matrix-of-moments nonclassicality test for click statistics.
//!
//! For classical light the Hankel matrix `M^(K)` with entries
//! `<:m^(s+t):>`, `0 <= s, t <= K/2`, is positive semidefinite. A negative
//! minimal eigenvalue `e^(K)` that is several standard errors below zero
//! certifies nonclassicality. Fluctuating channels enter through the
//! transmittance-weighted average of the moments measured at fixed
//! attenuations.

use serde::Serialize;

use crate::detector::{moments_from_clicks, multinomial, ClickStatistics, MomentVector};
use crate::error::{Error, Result};
use crate::exec::{derive_seed, stream_rng, Execution};
use crate::linalg::{min_symmetric_eigenvalue, DenseMatrix};
use crate::pdt::{eta_label, DiscretePDT};

pub const DEFAULT_RESAMPLES: usize = 1000;
pub const MIN_RESAMPLES: usize = 100;
pub const DEFAULT_THRESHOLD: f64 = 3.0;

/// Click statistics measured at one fixed transmittance.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EnsembleMember {
    pub eta: f64,
    pub statistics: ClickStatistics,
}

/// Hankel matrix of normally ordered moments.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentMatrix {
    order: usize,
    matrix: DenseMatrix,
}

impl MomentMatrix {
    pub fn order(&self) -> usize {
        self.order
    }

    pub fn matrix(&self) -> &DenseMatrix {
        &self.matrix
    }
}

/// `M^(K)` from a moment vector; `K` must be even with `2 <= K <= N`.
pub fn moment_matrix(mv: &MomentVector, order: usize) -> Result<MomentMatrix> {
    if order < 2 || !order.is_multiple_of(2) || order > mv.bins() {
        return Err(Error::ParameterDomain(format!(
            "matrix order K = {order} must be even with 2 <= K <= N = {}",
            mv.bins()
        )));
    }
    let dim = order / 2 + 1;
    let mut matrix = DenseMatrix::zeros(dim);
    for s in 0..dim {
        for t in 0..dim {
            matrix.set(s, t, mv.get(s + t));
        }
    }
    Ok(MomentMatrix { order, matrix })
}

pub fn min_eigenvalue(m: &MomentMatrix) -> Result<f64> {
    min_symmetric_eigenvalue(&m.matrix)
}

/// Pairs each support point of `pdt` with the member measured there.
pub(crate) fn align<'a>(
    members: &'a [EnsembleMember],
    pdt: &DiscretePDT,
) -> Result<Vec<(usize, f64, &'a ClickStatistics)>> {
    if let Some(first) = members.first() {
        let n = first.statistics.bins();
        if let Some(bad) = members.iter().find(|m| m.statistics.bins() != n) {
            return Err(Error::Schema(format!(
                "click statistics at eta = {} have N = {}, expected {n}",
                bad.eta,
                bad.statistics.bins()
            )));
        }
    }
    pdt.support()
        .map(|(_, eta, w)| {
            members
                .iter()
                .position(|m| (m.eta - eta).abs() <= 1e-9)
                .map(|j| (j, w, &members[j].statistics))
                .ok_or_else(|| Error::IncompleteEnsemble {
                    eta: eta_label(eta, pdt.n()),
                })
        })
        .collect()
}

/// Atmospheric moment `sum_j w_j <:m^l:>(eta_j)`.
pub fn atmospheric_moments(members: &[EnsembleMember], pdt: &DiscretePDT, l: usize) -> Result<f64> {
    let mut total = 0.0;
    for (_, w, cs) in align(members, pdt)? {
        total += w * moments_from_clicks(cs, l)?;
    }
    Ok(total)
}

/// All atmospheric moments `l = 0..=N`.
pub fn atmospheric_moment_vector(
    members: &[EnsembleMember],
    pdt: &DiscretePDT,
) -> Result<MomentVector> {
    let aligned = align(members, pdt)?;
    let bins = aligned
        .first()
        .map(|(_, _, cs)| cs.bins())
        .ok_or_else(|| Error::EmptyInput("ensemble".into()))?;
    let mut values = vec![0.0; bins + 1];
    for (_, w, cs) in aligned {
        for (v, m) in values
            .iter_mut()
            .zip(MomentVector::from_clicks(cs).values())
        {
            *v += w * m;
        }
    }
    MomentVector::new(values)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Classification {
    Nonclassical,
    Inconclusive,
    ConsistentClassical,
}

impl std::fmt::Display for Classification {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Nonclassical => "NONCLASSICAL",
            Self::Inconclusive => "INCONCLUSIVE",
            Self::ConsistentClassical => "CONSISTENT_CLASSICAL",
        })
    }
}

/// Minimal eigenvalue of `M^(K)` with its uncertainty.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NonclassicalityResult {
    pub order: usize,
    pub e_min: f64,
    pub delta_e: f64,
    /// `e_min / delta_e`; `0` when both vanish and `+-inf` when only
    /// `delta_e` does (serialised as `null` in JSON).
    pub significance: f64,
    /// Bootstrap resamples, `0` for exact statistics.
    pub resamples: usize,
    pub seed: Option<u64>,
    /// Smallest and largest number of trials over the levels used.
    pub trials: Option<(u64, u64)>,
    pub channel: String,
}

/// Signed significance `e / delta`.
pub fn significance(e: f64, delta: f64) -> f64 {
    if delta > 0.0 {
        e / delta
    } else if e == 0.0 {
        0.0
    } else {
        e.signum() * f64::INFINITY
    }
}

/// `NONCLASSICAL` when the significance is at or below `-threshold`;
/// otherwise `CONSISTENT_CLASSICAL` for a nonnegative eigenvalue and
/// `INCONCLUSIVE` for a negative one.
pub fn classify(result: &NonclassicalityResult, threshold: f64) -> Classification {
    if result.significance <= -threshold {
        Classification::Nonclassical
    } else if result.e_min >= 0.0 {
        Classification::ConsistentClassical
    } else {
        Classification::Inconclusive
    }
}

/// Exact moments are only as accurate as the photon-number truncation, so
/// smaller eigenvalues are reported as zero.
pub const EXACT_ZERO: f64 = 1e-10;

/// Result for exact (infinite-ensemble) moments, with `|e| <= EXACT_ZERO`
/// reported as zero.
pub fn exact_result(
    mv: &MomentVector,
    order: usize,
    channel: &str,
) -> Result<NonclassicalityResult> {
    let raw = min_eigenvalue(&moment_matrix(mv, order)?)?;
    let e_min = if raw.abs() <= EXACT_ZERO { 0.0 } else { raw };
    Ok(NonclassicalityResult {
        order,
        e_min,
        delta_e: 0.0,
        significance: significance(e_min, 0.0),
        resamples: 0,
        seed: None,
        trials: None,
        channel: channel.to_string(),
    })
}

/// Multinomial bootstrap replicates of every member's moments.
///
/// Replicate `b` of member `j` is drawn from stream `b` of
/// `derive_seed(seed, "bootstrap", j)`, so it is the same whichever channel
/// the member is later weighted into and however the work is scheduled.
#[derive(Debug, Clone)]
pub struct BootstrapReplicates {
    seed: u64,
    resamples: usize,
    /// `moments[j][b]`.
    moments: Vec<Vec<MomentVector>>,
}

impl BootstrapReplicates {
    pub fn generate(
        members: &[EnsembleMember],
        resamples: usize,
        seed: u64,
        exec: Execution,
    ) -> Result<Self> {
        let keys: Vec<usize> = (0..members.len()).collect();
        Self::generate_keyed(members, &keys, resamples, seed, exec)
    }

    /// As [`Self::generate`], with member `j` drawing from the streams of
    /// member `keys[j]`.
    fn generate_keyed(
        members: &[EnsembleMember],
        keys: &[usize],
        resamples: usize,
        seed: u64,
        exec: Execution,
    ) -> Result<Self> {
        if resamples < MIN_RESAMPLES {
            return Err(Error::ParameterDomain(format!(
                "bootstrap needs B >= {MIN_RESAMPLES} resamples (got {resamples})"
            )));
        }
        for m in members {
            m.statistics.counts_or_err()?;
        }
        let flat = exec.map(members.len() * resamples, |i| {
            let (j, b) = (i / resamples, i % resamples);
            let cs = &members[j].statistics;
            let trials = cs.trials().expect("checked above");
            let mut rng = stream_rng(derive_seed(seed, "bootstrap", keys[j] as u64), b as u64);
            let counts = multinomial(&mut rng, trials, cs.probabilities());
            MomentVector::from_clicks(&ClickStatistics::from_counts(counts).expect("trials > 0"))
        });
        let mut it = flat.into_iter();
        let moments = members
            .iter()
            .map(|_| it.by_ref().take(resamples).collect())
            .collect();
        Ok(Self {
            seed,
            resamples,
            moments,
        })
    }

    pub fn resamples(&self) -> usize {
        self.resamples
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Point estimates and bootstrap errors of `e^(K)` for each order in
    /// `orders`, for the channel `pdt`.
    pub fn estimate(
        &self,
        members: &[EnsembleMember],
        pdt: &DiscretePDT,
        orders: &[usize],
        channel: &str,
        exec: Execution,
    ) -> Result<Vec<NonclassicalityResult>> {
        if members.len() != self.moments.len() {
            return Err(Error::Schema(format!(
                "replicates were generated for {} members, got {}",
                self.moments.len(),
                members.len()
            )));
        }
        let aligned = align(members, pdt)?;
        let point = atmospheric_moment_vector(members, pdt)?;
        let bins = point.bins();
        let trials: Vec<u64> = aligned
            .iter()
            .map(|(_, _, cs)| cs.trials().ok_or(Error::CountsRequired))
            .collect::<Result<_>>()?;
        let trial_range = (
            *trials.iter().min().expect("nonempty"),
            *trials.iter().max().expect("nonempty"),
        );

        let replicate_eigs: Vec<Result<Vec<f64>>> = exec.map(self.resamples, |b| {
            let mut values = vec![0.0; bins + 1];
            for &(j, w, _) in &aligned {
                for (v, m) in values.iter_mut().zip(self.moments[j][b].values()) {
                    *v += w * m;
                }
            }
            let mv = MomentVector::new(values)?;
            orders
                .iter()
                .map(|&k| min_eigenvalue(&moment_matrix(&mv, k)?))
                .collect()
        });
        let replicate_eigs: Vec<Vec<f64>> = replicate_eigs.into_iter().collect::<Result<_>>()?;

        orders
            .iter()
            .enumerate()
            .map(|(i, &order)| {
                let e_min = min_eigenvalue(&moment_matrix(&point, order)?)?;
                let samples: Vec<f64> = replicate_eigs.iter().map(|r| r[i]).collect();
                let delta_e = sample_std(&samples);
                Ok(NonclassicalityResult {
                    order,
                    e_min,
                    delta_e,
                    significance: significance(e_min, delta_e),
                    resamples: self.resamples,
                    seed: Some(self.seed),
                    trials: Some(trial_range),
                    channel: channel.to_string(),
                })
            })
            .collect()
    }
}

/// Sample standard deviation, summed in index order. Deviations are taken
/// from the first sample so identical samples give exactly zero.
fn sample_std(xs: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let shifted: Vec<f64> = xs.iter().map(|x| x - xs[0]).collect();
    let mean = shifted.iter().sum::<f64>() / n;
    let ss: f64 = shifted.iter().map(|x| (x - mean).powi(2)).sum();
    (ss / (n - 1.0)).sqrt()
}

/// Bootstrap estimate of `e^(K)` for one channel. Only the members on the
/// support of `pdt` are resampled, with the same streams that
/// [`BootstrapReplicates::generate`] assigns them within `members`.
pub fn bootstrap_error(
    members: &[EnsembleMember],
    pdt: &DiscretePDT,
    order: usize,
    resamples: usize,
    seed: u64,
    exec: Execution,
) -> Result<NonclassicalityResult> {
    let aligned = align(members, pdt)?;
    let keys: Vec<usize> = aligned.iter().map(|(j, _, _)| *j).collect();
    let subset: Vec<EnsembleMember> = keys.iter().map(|&j| members[j].clone()).collect();
    let replicates = BootstrapReplicates::generate_keyed(&subset, &keys, resamples, seed, exec)?;
    let mut results = replicates.estimate(&subset, pdt, &[order], "", exec)?;
    Ok(results.remove(0))
}
