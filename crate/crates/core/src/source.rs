//! Truncated photon-number distributions of source states and deterministic
//! loss acting on them.
//!
//! Every distribution carries a `tail_bound`, an upper bound on the
//! probability beyond `nmax`. Unless a truncation point is fixed explicitly it
//! is chosen as the smallest `nmax` whose analytic tail bound meets the
//! tolerance.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use statrs::function::factorial::{ln_binomial, ln_factorial};

use crate::error::{domain, Error, Result};

pub const DEFAULT_TAIL_TOLERANCE: f64 = 1e-10;
const NMAX_LIMIT: usize = 1 << 16;

/// Where to cut a photon-number distribution.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Truncation {
    /// Fixed cutoff; `None` picks the smallest certified one.
    pub nmax: Option<usize>,
    pub tolerance: f64,
}

impl Default for Truncation {
    fn default() -> Self {
        Self {
            nmax: None,
            tolerance: DEFAULT_TAIL_TOLERANCE,
        }
    }
}

impl Truncation {
    pub fn at(nmax: usize) -> Self {
        Self {
            nmax: Some(nmax),
            ..Self::default()
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.tolerance > 0.0 && self.tolerance < 1.0) {
            return Err(Error::ParameterDomain(format!(
                "tail tolerance {} must lie in (0, 1)",
                self.tolerance
            )));
        }
        Ok(())
    }

    /// Runs `tail(nmax)` at the fixed cutoff, or scans upward from `start`
    /// until the bound meets the tolerance.
    fn resolve(&self, start: usize, tail: impl Fn(usize) -> f64) -> Result<(usize, f64)> {
        self.validate()?;
        let check = |nmax: usize, t: f64| {
            if t <= self.tolerance {
                Ok((nmax, t))
            } else {
                Err(Error::Truncation {
                    nmax,
                    tail: t,
                    tolerance: self.tolerance,
                })
            }
        };
        if let Some(nmax) = self.nmax {
            return check(nmax, tail(nmax));
        }
        let mut nmax = start;
        loop {
            let t = tail(nmax);
            if t <= self.tolerance || nmax >= NMAX_LIMIT {
                return check(nmax, t);
            }
            nmax += 1;
        }
    }
}

/// Photon-number probabilities `p_0..=p_nmax` with a bound on the discarded tail.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PhotonNumberDistribution {
    probabilities: Vec<f64>,
    tail_bound: f64,
}

impl PhotonNumberDistribution {
    /// Wraps explicit probabilities; the tail bound is the missing mass.
    pub fn from_probabilities(probabilities: Vec<f64>) -> Result<Self> {
        if probabilities.is_empty() {
            return Err(Error::EmptyInput("photon-number distribution".into()));
        }
        if let Some(p) = probabilities
            .iter()
            .find(|p| !(**p >= 0.0 && p.is_finite()))
        {
            return Err(Error::ParameterDomain(format!(
                "probability {p} must be finite and >= 0"
            )));
        }
        let total: f64 = probabilities.iter().sum();
        if total > 1.0 + 1e-12 {
            return Err(Error::ParameterDomain(format!(
                "probabilities sum to {total} > 1"
            )));
        }
        Ok(Self {
            probabilities,
            tail_bound: (1.0 - total).max(0.0),
        })
    }

    pub fn fock(n: usize) -> Self {
        let mut probabilities = vec![0.0; n + 1];
        probabilities[n] = 1.0;
        Self {
            probabilities,
            tail_bound: 0.0,
        }
    }

    pub fn probabilities(&self) -> &[f64] {
        &self.probabilities
    }

    /// `p_n`, zero beyond the truncation.
    pub fn p(&self, n: usize) -> f64 {
        self.probabilities.get(n).copied().unwrap_or(0.0)
    }

    pub fn nmax(&self) -> usize {
        self.probabilities.len() - 1
    }

    pub fn tail_bound(&self) -> f64 {
        self.tail_bound
    }

    pub fn total(&self) -> f64 {
        self.probabilities.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.probabilities
            .iter()
            .enumerate()
            .map(|(n, p)| n as f64 * p)
            .sum()
    }

    pub fn variance(&self) -> f64 {
        let mean = self.mean();
        self.probabilities
            .iter()
            .enumerate()
            .map(|(n, p)| (n as f64 - mean).powi(2) * p)
            .sum()
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "n,p")?;
        for (n, p) in self.probabilities.iter().enumerate() {
            writeln!(out, "{n},{p}")?;
        }
        Ok(())
    }

    pub fn read_csv<R: BufRead>(reader: R) -> Result<Self> {
        let mut csv = csv::ReaderBuilder::new()
            .comment(Some(b'#'))
            .from_reader(reader);
        let headers = csv.headers()?.clone();
        if headers.iter().collect::<Vec<_>>() != ["n", "p"] {
            return Err(Error::Schema("expected header `n,p`".into()));
        }
        let mut probabilities = Vec::new();
        for (row, record) in csv.records().enumerate() {
            let record = record?;
            let n: usize = record[0]
                .trim()
                .parse()
                .map_err(|e| Error::Schema(format!("row {row}: bad n `{}`: {e}", &record[0])))?;
            if n != row {
                return Err(Error::Schema(format!(
                    "row {row}: expected n = {row}, found {n}"
                )));
            }
            let p: f64 = record[1]
                .trim()
                .parse()
                .map_err(|e| Error::Schema(format!("row {row}: bad p `{}`: {e}", &record[1])))?;
            probabilities.push(p);
        }
        Self::from_probabilities(probabilities)
    }
}

fn check_mean(mean: f64) -> Result<()> {
    if !(mean >= 0.0 && mean.is_finite()) {
        return Err(domain("mean photon number", mean, "[0, inf)"));
    }
    Ok(())
}

fn check_squeeze(r: f64) -> Result<()> {
    if !(r >= 0.0 && r.is_finite()) {
        return Err(domain("squeeze parameter", r, "[0, inf)"));
    }
    Ok(())
}

/// Poisson statistics of a coherent state.
pub fn coherent(mean: f64, truncation: Truncation) -> Result<PhotonNumberDistribution> {
    check_mean(mean)?;
    let ln_p = |n: usize| {
        if mean == 0.0 {
            if n == 0 {
                0.0
            } else {
                f64::NEG_INFINITY
            }
        } else {
            n as f64 * mean.ln() - mean - ln_factorial(n as u64)
        }
    };
    // p_{k+1}/p_k = mean/(k+1) <= mean/(nmax+2) for every k > nmax
    let (nmax, tail_bound) = truncation.resolve(mean.floor() as usize, |nmax| {
        let q = mean / (nmax + 2) as f64;
        if q < 1.0 {
            ln_p(nmax + 1).exp() / (1.0 - q)
        } else {
            1.0
        }
    })?;
    Ok(PhotonNumberDistribution {
        probabilities: (0..=nmax).map(|n| ln_p(n).exp()).collect(),
        tail_bound,
    })
}

/// Geometric statistics of a thermal state.
pub fn thermal(mean: f64, truncation: Truncation) -> Result<PhotonNumberDistribution> {
    check_mean(mean)?;
    let q = mean / (1.0 + mean);
    let (nmax, tail_bound) = truncation.resolve(0, |nmax| q.powi(nmax as i32 + 1))?;
    Ok(PhotonNumberDistribution {
        probabilities: (0..=nmax)
            .map(|n| q.powi(n as i32) / (1.0 + mean))
            .collect(),
        tail_bound,
    })
}

/// Single-mode squeezed vacuum, supported on even photon numbers.
pub fn squeezed_vacuum(r: f64, truncation: Truncation) -> Result<PhotonNumberDistribution> {
    check_squeeze(r)?;
    let t = r.tanh();
    let ln_cosh = r.cosh().ln();
    let ln_p_even = |m: usize| {
        let m64 = m as u64;
        let ln_t = if m == 0 { 0.0 } else { 2.0 * m as f64 * t.ln() };
        ln_factorial(2 * m64) - 2.0 * (m as f64 * std::f64::consts::LN_2 + ln_factorial(m64)) + ln_t
            - ln_cosh
    };
    // p_{2m+2}/p_{2m} = (2m+1)/(2m+2) t^2 < t^2
    let (nmax, tail_bound) = truncation.resolve(0, |nmax| {
        if t == 0.0 {
            return 0.0;
        }
        let m = nmax / 2;
        ln_p_even(m).exp() * t * t / (1.0 - t * t)
    })?;
    Ok(PhotonNumberDistribution {
        probabilities: (0..=nmax)
            .map(|n| {
                if n % 2 == 0 {
                    ln_p_even(n / 2).exp()
                } else {
                    0.0
                }
            })
            .collect(),
        tail_bound,
    })
}

fn convolve(a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; a.len() + b.len() - 1];
    for (i, x) in a.iter().enumerate() {
        if *x == 0.0 {
            continue;
        }
        for (j, y) in b.iter().enumerate() {
            out[i + j] += x * y;
        }
    }
    out
}

/// Independent squeezed-vacuum modes detected together: the convolution of
/// their photon-number distributions.
pub fn multimode_squeezed(
    squeezes: &[f64],
    truncation: Truncation,
) -> Result<PhotonNumberDistribution> {
    truncation.validate()?;
    if squeezes.is_empty() {
        return Err(Error::EmptyInput("no squeezed modes".into()));
    }
    let share = Truncation {
        nmax: None,
        tolerance: truncation.tolerance / (2 * squeezes.len()) as f64,
    };
    let mut probabilities = vec![1.0];
    let mut tail = 0.0;
    for &r in squeezes {
        let mode = squeezed_vacuum(r, share)?;
        probabilities = convolve(&probabilities, &mode.probabilities);
        tail += mode.tail_bound;
    }
    finish_truncation(probabilities, tail, truncation)
}

/// Cuts an untruncated-length vector at the requested or the smallest
/// admissible `nmax`, adding the dropped mass to `tail`.
fn finish_truncation(
    mut probabilities: Vec<f64>,
    tail: f64,
    truncation: Truncation,
) -> Result<PhotonNumberDistribution> {
    let suffix: Vec<f64> = {
        let mut acc = 0.0;
        let mut s: Vec<f64> = probabilities
            .iter()
            .rev()
            .map(|p| {
                acc += p;
                acc
            })
            .collect();
        s.reverse();
        s
    };
    let dropped = |nmax: usize| suffix.get(nmax + 1).copied().unwrap_or(0.0);
    let (nmax, tail_bound) = truncation.resolve(0, |nmax| tail + dropped(nmax))?;
    probabilities.resize(nmax + 1, 0.0);
    Ok(PhotonNumberDistribution {
        probabilities,
        tail_bound,
    })
}

/// Amplitude-squeezed coherent state `D(alpha) S(r)|0>` with real `alpha >= 0`
/// and squeezing along the amplitude quadrature, which gives sub-Poissonian
/// statistics for moderate `r`.
///
/// The state is the eigenstate of `mu a + nu a^dagger` with eigenvalue
/// `g = alpha e^r`, `mu = cosh r`, `nu = sinh r`, so the Fock amplitudes obey
/// `mu sqrt(n+1) c_{n+1} = g c_n - nu sqrt(n) c_{n-1}`. The tail bound is the
/// missing normalisation.
pub fn amplitude_squeezed(
    alpha: f64,
    r: f64,
    truncation: Truncation,
) -> Result<PhotonNumberDistribution> {
    check_squeeze(r)?;
    if !(alpha >= 0.0 && alpha.is_finite()) {
        return Err(domain("coherent amplitude", alpha, "[0, inf)"));
    }
    truncation.validate()?;
    let mu = r.cosh();
    let nu = r.sinh();
    let g = alpha * r.exp();
    let mean = alpha * alpha + nu * nu;
    let c0 = (-0.5 * alpha * alpha - 0.5 * alpha * alpha * nu / mu).exp() / mu.sqrt();
    let mut amps = vec![c0];
    let mut total = c0 * c0;
    let limit = truncation.nmax.unwrap_or(NMAX_LIMIT);
    let mut n = 0usize;
    while n < limit {
        if truncation.nmax.is_none() && n as f64 > mean && 1.0 - total <= 0.5 * truncation.tolerance
        {
            break;
        }
        let prev = if n == 0 { 0.0 } else { amps[n - 1] };
        let next = (g * amps[n] - nu * (n as f64).sqrt() * prev) / (mu * ((n + 1) as f64).sqrt());
        amps.push(next);
        total += next * next;
        n += 1;
    }
    let probabilities: Vec<f64> = amps.iter().map(|c| c * c).collect();
    // rounding of the running sum is a few ulps per term
    let tail_bound = (1.0 - total).max(0.0) + probabilities.len() as f64 * f64::EPSILON;
    if tail_bound > truncation.tolerance {
        return Err(Error::Truncation {
            nmax: probabilities.len() - 1,
            tail: tail_bound,
            tolerance: truncation.tolerance,
        });
    }
    Ok(PhotonNumberDistribution {
        probabilities,
        tail_bound,
    })
}

/// Deterministic loss: `p'_m = sum_n p_n C(n,m) eta^m (1-eta)^(n-m)`.
pub fn apply_loss(pnd: &PhotonNumberDistribution, eta: f64) -> Result<PhotonNumberDistribution> {
    if !(0.0..=1.0).contains(&eta) {
        return Err(domain("eta", eta, "[0, 1]"));
    }
    if eta == 1.0 {
        return Ok(pnd.clone());
    }
    let len = pnd.probabilities.len();
    let mut out = vec![0.0; len];
    if eta == 0.0 {
        out[0] = pnd.total();
    } else {
        let (ln_eta, ln_loss) = (eta.ln(), (-eta).ln_1p());
        for (n, &p) in pnd.probabilities.iter().enumerate() {
            if p == 0.0 {
                continue;
            }
            let ln_pn = p.ln();
            for (m, slot) in out.iter_mut().enumerate().take(n + 1) {
                let ln_term = ln_binomial(n as u64, m as u64)
                    + m as f64 * ln_eta
                    + (n - m) as f64 * ln_loss
                    + ln_pn;
                *slot += ln_term.exp();
            }
        }
    }
    Ok(PhotonNumberDistribution {
        probabilities: out,
        tail_bound: pnd.tail_bound,
    })
}

/// Configurable source state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SourceSpec {
    Coherent { mean_photons: f64 },
    Thermal { mean_photons: f64 },
    SqueezedVacuum { squeeze: f64 },
    MultimodeSqueezed { squeezes: Vec<f64> },
    AmplitudeSqueezed { amplitude: f64, squeeze: f64 },
    Fock { photons: usize },
}

impl SourceSpec {
    pub fn build(&self, truncation: Truncation) -> Result<PhotonNumberDistribution> {
        match self {
            Self::Coherent { mean_photons } => coherent(*mean_photons, truncation),
            Self::Thermal { mean_photons } => thermal(*mean_photons, truncation),
            Self::SqueezedVacuum { squeeze } => squeezed_vacuum(*squeeze, truncation),
            Self::MultimodeSqueezed { squeezes } => multimode_squeezed(squeezes, truncation),
            Self::AmplitudeSqueezed { amplitude, squeeze } => {
                amplitude_squeezed(*amplitude, *squeeze, truncation)
            }
            Self::Fock { photons } => Ok(PhotonNumberDistribution::fock(*photons)),
        }
    }

    pub fn describe(&self) -> String {
        match self {
            Self::Coherent { mean_photons } => format!("coherent(mean={mean_photons})"),
            Self::Thermal { mean_photons } => format!("thermal(mean={mean_photons})"),
            Self::SqueezedVacuum { squeeze } => format!("squeezed-vacuum(r={squeeze})"),
            Self::MultimodeSqueezed { squeezes } => format!("multimode-squeezed(r={squeezes:?})"),
            Self::AmplitudeSqueezed { amplitude, squeeze } => {
                format!("amplitude-squeezed(alpha={amplitude}, r={squeeze})")
            }
            Self::Fock { photons } => format!("fock(n={photons})"),
        }
    }
}
