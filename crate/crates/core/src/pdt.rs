//! Probability distributions of transmittance (PDTs).
//!
//! A continuous [`TransmittanceModel`] is turned into a [`DiscretePDT`] on the
//! equidistant grid `eta_k = k / n`, `k = 0..=n`, by evaluating the density at
//! the grid points and normalising. Discretization quality is judged by
//! comparing transmittance moments of the mass function with those of the
//! continuous density.

use std::f64::consts::PI;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use statrs::function::beta::ln_beta;
use statrs::function::factorial::ln_binomial;

use crate::error::{domain, Error, Result};
use crate::quadrature;

/// Continuous transmittance distribution on `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case", deny_unknown_fields)]
pub enum TransmittanceModel {
    /// Log-normal density with location `mu` and scale `sigma`.
    LogNormal { mu: f64, sigma: f64 },
    /// Log-negative Weibull density of a wandering beam, obtained from
    /// `eta = eta0 * exp(-(r / scale)^shape / 2)` with a Rayleigh-distributed
    /// beam deflection `r` of variance parameter `wander_variance`.
    WeibullBw {
        eta0: f64,
        shape: f64,
        scale: f64,
        wander_variance: f64,
    },
    /// Piecewise-linear density through `(eta, density)` nodes; zero outside
    /// the first and last node.
    Tabulated { points: Vec<(f64, f64)> },
}

impl TransmittanceModel {
    pub fn log_normal(mu: f64, sigma: f64) -> Result<Self> {
        let m = Self::LogNormal { mu, sigma };
        m.validate()?;
        Ok(m)
    }

    /// Log-normal model from the variance `sigma2` of `ln eta`.
    pub fn log_normal_from_variance(mu: f64, sigma2: f64) -> Result<Self> {
        if !(sigma2 > 0.0) {
            return Err(Error::ParameterDomain(format!(
                "sigma^2 = {sigma2} must be > 0"
            )));
        }
        Self::log_normal(mu, sigma2.sqrt())
    }

    pub fn weibull_bw(eta0: f64, shape: f64, scale: f64, wander_variance: f64) -> Result<Self> {
        let m = Self::WeibullBw {
            eta0,
            shape,
            scale,
            wander_variance,
        };
        m.validate()?;
        Ok(m)
    }

    /// Nodes are sorted by `eta`.
    pub fn tabulated(mut points: Vec<(f64, f64)>) -> Result<Self> {
        points.sort_by(|a, b| a.0.total_cmp(&b.0));
        let m = Self::Tabulated { points };
        m.validate()?;
        Ok(m)
    }

    /// Constant density on `[0, 1]`.
    pub fn uniform() -> Self {
        Self::Tabulated {
            points: vec![(0.0, 1.0), (1.0, 1.0)],
        }
    }

    /// Tabulated model whose nodes are the support points of `pdt`.
    pub fn from_discrete(pdt: &DiscretePDT) -> Self {
        Self::Tabulated {
            points: (0..=pdt.n()).map(|k| (pdt.eta(k), pdt.weight(k))).collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::ParameterDomain(msg));
        match *self {
            Self::LogNormal { mu, sigma } => {
                if !mu.is_finite() {
                    return bad(format!("log-normal mu = {mu} must be finite"));
                }
                if !(sigma > 0.0 && sigma.is_finite()) {
                    return bad(format!("log-normal sigma = {sigma} must be > 0"));
                }
            }
            Self::WeibullBw {
                eta0,
                shape,
                scale,
                wander_variance,
            } => {
                if !(eta0 > 0.0 && eta0 <= 1.0) {
                    return bad(format!("eta0 = {eta0} must lie in (0, 1]"));
                }
                if !(shape > 0.0 && shape.is_finite()) {
                    return bad(format!("shape = {shape} must be > 0"));
                }
                if !(scale > 0.0 && scale.is_finite()) {
                    return bad(format!("scale = {scale} must be > 0"));
                }
                if !(wander_variance > 0.0 && wander_variance.is_finite()) {
                    return bad(format!("wander_variance = {wander_variance} must be > 0"));
                }
            }
            Self::Tabulated { ref points } => {
                if points.is_empty() {
                    return bad("tabulated density needs at least one node".into());
                }
                for &(eta, d) in points {
                    if !(0.0..=1.0).contains(&eta) {
                        return bad(format!("tabulated node eta = {eta} outside [0, 1]"));
                    }
                    if !(d >= 0.0 && d.is_finite()) {
                        return bad(format!(
                            "tabulated density {d} at eta = {eta} must be finite and >= 0"
                        ));
                    }
                }
                if points.windows(2).any(|w| w[0].0 >= w[1].0) {
                    return bad("tabulated nodes must have strictly increasing eta".into());
                }
            }
        }
        Ok(())
    }

    /// Density at `eta`; zero at `eta = 0` for the log-normal family.
    pub fn density(&self, eta: f64) -> Result<f64> {
        self.validate()?;
        if !(0.0..=1.0).contains(&eta) {
            return Err(domain("eta", eta, "[0, 1]"));
        }
        Ok(self.density_unchecked(eta))
    }

    fn density_unchecked(&self, eta: f64) -> f64 {
        match *self {
            Self::LogNormal { mu, sigma } => {
                if eta <= 0.0 {
                    return 0.0;
                }
                let z = (eta.ln() - mu) / sigma;
                (-0.5 * z * z).exp() / (eta * sigma * (2.0 * PI).sqrt())
            }
            Self::WeibullBw {
                eta0,
                shape,
                scale,
                wander_variance,
            } => {
                if eta <= 0.0 || eta > eta0 {
                    return 0.0;
                }
                let l2 = 2.0 * (eta0 / eta).ln();
                let r2 = scale * scale / wander_variance;
                r2 * 2.0 / (shape * eta)
                    * l2.powf(2.0 / shape - 1.0)
                    * (-0.5 * r2 * l2.powf(2.0 / shape)).exp()
            }
            Self::Tabulated { ref points } => interpolate(points, eta),
        }
    }

    /// Closed-form raw moment `<eta^s> = exp(s mu + s^2 sigma^2 / 2)` of the
    /// log-normal density over `(0, inf)`, ignoring truncation to `[0, 1]`.
    pub fn closed_moment(&self, s: u32) -> Result<f64> {
        self.validate()?;
        match *self {
            Self::LogNormal { mu, sigma } => {
                let s = f64::from(s);
                Ok((s * mu + 0.5 * s * s * sigma * sigma).exp())
            }
            _ => Err(Error::NotAvailable(format!(
                "closed-form moments for {}",
                self.describe()
            ))),
        }
    }

    /// Raw moments `<eta^s>`, `s = 0..=max_order`, of the density restricted
    /// to `[0, 1]` and renormalised there, by adaptive quadrature.
    pub fn truncated_moments(&self, max_order: u32) -> Result<Vec<f64>> {
        self.validate()?;
        let pieces: Vec<(f64, f64)> = match self {
            Self::Tabulated { points } => points.windows(2).map(|w| (w[0].0, w[1].0)).collect(),
            Self::WeibullBw { eta0, .. } => vec![(0.0, *eta0)],
            Self::LogNormal { .. } => vec![(0.0, 1.0)],
        };
        let integral = |s: u32| -> f64 {
            pieces
                .iter()
                .map(|&(a, b)| {
                    quadrature::integrate(
                        |x| x.powi(s as i32) * self.density_unchecked(x),
                        a,
                        b,
                        1e-15,
                        1e-13,
                        2000,
                    )
                    .value
                })
                .sum()
        };
        let mass = integral(0);
        if !(mass > 0.0) {
            return Err(Error::Degenerate(format!(
                "{} has no mass on [0, 1]",
                self.describe()
            )));
        }
        Ok((0..=max_order)
            .map(|s| if s == 0 { 1.0 } else { integral(s) / mass })
            .collect())
    }

    pub fn describe(&self) -> String {
        match self {
            Self::LogNormal { mu, sigma } => {
                format!("log-normal(mu={mu}, sigma^2={})", sigma * sigma)
            }
            Self::WeibullBw {
                eta0,
                shape,
                scale,
                wander_variance,
            } => format!(
                "weibull-bw(eta0={eta0}, shape={shape}, scale={scale}, wander_variance={wander_variance})"
            ),
            Self::Tabulated { points } => format!("tabulated({} nodes)", points.len()),
        }
    }

    /// Reads a tabulated density from a two-column `eta,value` CSV.
    pub fn read_tabulated_csv<R: BufRead>(reader: R) -> Result<Self> {
        Self::tabulated(read_two_column(reader)?)
    }
}

fn interpolate(points: &[(f64, f64)], eta: f64) -> f64 {
    let idx = points.partition_point(|p| p.0 < eta);
    if idx < points.len() && points[idx].0 == eta {
        return points[idx].1;
    }
    if idx == 0 || idx == points.len() {
        return 0.0;
    }
    let (x0, y0) = points[idx - 1];
    let (x1, y1) = points[idx];
    y0 + (y1 - y0) * (eta - x0) / (x1 - x0)
}

/// Probability mass function on the grid `eta_k = k / n`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscretePDT {
    weights: Vec<f64>,
}

impl DiscretePDT {
    /// Normalises nonnegative `weights` (at least two entries) to unit sum.
    /// Weights already summing to one within `1e-12` are kept verbatim.
    pub fn from_weights(weights: Vec<f64>) -> Result<Self> {
        if weights.len() < 2 {
            return Err(Error::ParameterDomain(format!(
                "a transmittance grid needs n >= 1 (got {} weights)",
                weights.len()
            )));
        }
        if let Some(bad) = weights.iter().find(|w| !(**w >= 0.0 && w.is_finite())) {
            return Err(Error::ParameterDomain(format!(
                "weight {bad} must be finite and >= 0"
            )));
        }
        let total: f64 = weights.iter().sum();
        if !(total > 0.0) {
            return Err(Error::Degenerate("all weights vanish".into()));
        }
        if (total - 1.0).abs() <= 1e-12 {
            return Ok(Self { weights });
        }
        Ok(Self {
            weights: weights.into_iter().map(|w| w / total).collect(),
        })
    }

    pub fn point_mass(n: usize, k: usize) -> Result<Self> {
        if k > n {
            return Err(Error::ParameterDomain(format!(
                "grid index {k} exceeds n = {n}"
            )));
        }
        let mut w = vec![0.0; n + 1];
        w[k] = 1.0;
        Self::from_weights(w)
    }

    pub fn uniform(n: usize) -> Result<Self> {
        Self::from_weights(vec![1.0; n + 1])
    }

    /// Grid resolution `n`; the grid has `n + 1` points.
    pub fn n(&self) -> usize {
        self.weights.len() - 1
    }

    pub fn eta(&self, k: usize) -> f64 {
        grid_eta(k, self.n())
    }

    pub fn weight(&self, k: usize) -> f64 {
        self.weights[k]
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// `(k, eta_k, w_k)` for every grid point with nonzero weight.
    pub fn support(&self) -> impl Iterator<Item = (usize, f64, f64)> + '_ {
        self.weights
            .iter()
            .enumerate()
            .filter(|(_, w)| **w > 0.0)
            .map(|(k, &w)| (k, self.eta(k), w))
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "eta,value")?;
        for (k, w) in self.weights.iter().enumerate() {
            writeln!(out, "{},{}", self.eta(k), w)?;
        }
        Ok(())
    }

    /// Reads an `eta,value` CSV whose rows are the full grid in order.
    pub fn read_csv<R: BufRead>(reader: R) -> Result<Self> {
        let rows = read_two_column(reader)?;
        let n = rows.len().saturating_sub(1);
        for (k, &(eta, _)) in rows.iter().enumerate() {
            if eta != grid_eta(k, n) {
                return Err(Error::Schema(format!(
                    "row {k}: eta = {eta} is not grid point {k}/{n}"
                )));
            }
        }
        Self::from_weights(rows.into_iter().map(|r| r.1).collect())
    }
}

/// `k / n` as the correctly rounded double.
pub fn grid_eta(k: usize, n: usize) -> f64 {
    k as f64 / n as f64
}

/// Fixed-point label of `eta` with enough digits to tell grid points of
/// resolution `n` apart, at least two (`0.50` for `n = 100`).
pub fn eta_label(eta: f64, n: usize) -> String {
    let mut digits = 2;
    let mut scale = 100;
    while scale < n {
        digits += 1;
        scale *= 10;
    }
    format!("{eta:.digits$}")
}

fn read_two_column<R: BufRead>(reader: R) -> Result<Vec<(f64, f64)>> {
    let mut csv = csv::ReaderBuilder::new()
        .has_headers(true)
        .comment(Some(b'#'))
        .from_reader(reader);
    let headers = csv.headers()?.clone();
    if headers.len() != 2 || &headers[0] != "eta" || &headers[1] != "value" {
        return Err(Error::Schema(format!(
            "expected header `eta,value`, found `{}`",
            headers.iter().collect::<Vec<_>>().join(",")
        )));
    }
    let mut rows = Vec::new();
    for record in csv.records() {
        let record = record?;
        let line = record.position().map_or(0, |p| p.line());
        let parse = |i: usize| -> Result<f64> {
            record[i].trim().parse::<f64>().map_err(|e| {
                Error::Schema(format!("line {line}: cannot parse `{}`: {e}", &record[i]))
            })
        };
        rows.push((parse(0)?, parse(1)?));
    }
    Ok(rows)
}

/// Evaluates the density on the grid and normalises: `w_k = P(eta_k) / sum_j P(eta_j)`.
pub fn discretize(model: &TransmittanceModel, n: usize) -> Result<DiscretePDT> {
    model.validate()?;
    if n == 0 {
        return Err(Error::ParameterDomain(
            "grid resolution n must be >= 1".into(),
        ));
    }
    let weights: Vec<f64> = (0..=n)
        .map(|k| model.density_unchecked(grid_eta(k, n)))
        .collect();
    if let Some(k) = weights.iter().position(|w| !w.is_finite()) {
        return Err(Error::Degenerate(format!(
            "density of {} is not finite at eta = {}",
            model.describe(),
            grid_eta(k, n)
        )));
    }
    if !(weights.iter().sum::<f64>() > 0.0) {
        return Err(Error::Degenerate(format!(
            "density of {} vanishes on the whole grid",
            model.describe()
        )));
    }
    DiscretePDT::from_weights(weights)
}

/// Transmittance moments of a mass function or a density.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TransmittanceMoments {
    /// `raw[s] = <eta^s>`, `raw[0] = 1`.
    pub raw: Vec<f64>,
}

impl TransmittanceMoments {
    pub fn mean(&self) -> f64 {
        self.raw[1]
    }

    pub fn variance(&self) -> f64 {
        self.raw[2] - self.raw[1] * self.raw[1]
    }

    /// Standardised third central moment.
    pub fn skewness(&self) -> Result<f64> {
        let var = self.variance();
        if !(var > 0.0) {
            return Err(Error::SkewnessUndefined);
        }
        let (r1, r2, r3) = (self.raw[1], self.raw[2], self.raw[3]);
        Ok((r3 - 3.0 * r1 * r2 + 2.0 * r1.powi(3)) / var.powf(1.5))
    }
}

/// Raw moments up to `max(max_order, 3)` of a discrete PDT.
pub fn transmittance_moments(pdt: &DiscretePDT, max_order: u32) -> TransmittanceMoments {
    let order = max_order.max(3);
    let raw = (0..=order)
        .map(|s| {
            pdt.weights
                .iter()
                .enumerate()
                .map(|(k, w)| w * pdt.eta(k).powi(s as i32))
                .sum()
        })
        .collect();
    TransmittanceMoments { raw }
}

/// Relative errors of three statistics; `None` where the continuous
/// reference is zero or the statistic is undefined.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ErrorTriple(pub [Option<f64>; 3]);

impl ErrorTriple {
    fn between(discrete: [Option<f64>; 3], continuous: [Option<f64>; 3]) -> Self {
        let mut out = [None; 3];
        for i in 0..3 {
            if let (Some(d), Some(c)) = (discrete[i], continuous[i]) {
                if c != 0.0 {
                    out[i] = Some((d - c).abs() / c.abs());
                }
            }
        }
        Self(out)
    }
}

/// Discretization errors against one continuous reference.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DiscretizationErrors {
    /// Errors of `<eta>`, `<eta^2>`, `<eta^3>`.
    pub raw: ErrorTriple,
    /// Errors of mean, variance and skewness.
    pub central: ErrorTriple,
}

impl DiscretizationErrors {
    fn compare(discrete: &TransmittanceMoments, continuous: &TransmittanceMoments) -> Self {
        let raw3 = |m: &TransmittanceMoments| [Some(m.raw[1]), Some(m.raw[2]), Some(m.raw[3])];
        let central3 =
            |m: &TransmittanceMoments| [Some(m.mean()), Some(m.variance()), m.skewness().ok()];
        Self {
            raw: ErrorTriple::between(raw3(discrete), raw3(continuous)),
            central: ErrorTriple::between(central3(discrete), central3(continuous)),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DiscretizationReport {
    /// Reference: density restricted to `[0, 1]` and renormalised.
    pub truncated: DiscretizationErrors,
    /// Reference: closed-form moments over `(0, inf)`, where available.
    pub untruncated: Option<DiscretizationErrors>,
}

/// Relative errors of the discretized moments against the continuous model.
pub fn discretization_errors(
    model: &TransmittanceModel,
    pdt: &DiscretePDT,
) -> Result<DiscretizationReport> {
    let discrete = transmittance_moments(pdt, 3);
    let truncated = TransmittanceMoments {
        raw: model.truncated_moments(3)?,
    };
    if truncated.mean() == 0.0 {
        return Err(Error::RelativeErrorUndefined("mean"));
    }
    let untruncated = match model {
        TransmittanceModel::LogNormal { .. } => Some(TransmittanceMoments {
            raw: (0..=3)
                .map(|s| model.closed_moment(s))
                .collect::<Result<_>>()?,
        }),
        _ => None,
    };
    Ok(DiscretizationReport {
        truncated: DiscretizationErrors::compare(&discrete, &truncated),
        untruncated: untruncated.map(|u| DiscretizationErrors::compare(&discrete, &u)),
    })
}

/// Drops grid points with `eta_k < threshold` and renormalises.
pub fn post_select(pdt: &DiscretePDT, threshold: f64) -> Result<DiscretePDT> {
    if !(0.0..=1.0).contains(&threshold) {
        return Err(domain("eta_ps", threshold, "[0, 1]"));
    }
    let mut weights = pdt.weights.clone();
    let mut removed = false;
    for (k, w) in weights.iter_mut().enumerate() {
        if pdt.eta(k) < threshold && *w > 0.0 {
            *w = 0.0;
            removed = true;
        }
    }
    if !removed {
        return Ok(pdt.clone());
    }
    if !(weights.iter().sum::<f64>() > 0.0) {
        return Err(Error::EmptyPostSelection { threshold });
    }
    DiscretePDT::from_weights(weights)
}

/// Beta-binomial mass function `C(n,k) B(k+alpha, n-k+beta) / B(alpha, beta)`,
/// evaluated in log space.
pub fn beta_binomial(n: usize, alpha: f64, beta: f64) -> Result<DiscretePDT> {
    if !(alpha > 0.0 && alpha.is_finite()) || !(beta > 0.0 && beta.is_finite()) {
        return Err(Error::ParameterDomain(format!(
            "beta-binomial needs alpha, beta > 0 (got {alpha}, {beta})"
        )));
    }
    if n == 0 {
        return Err(Error::ParameterDomain(
            "grid resolution n must be >= 1".into(),
        ));
    }
    let norm = ln_beta(alpha, beta);
    let nn = n as u64;
    let weights = (0..=n)
        .map(|k| {
            let kf = k as f64;
            (ln_binomial(nn, k as u64) + ln_beta(kf + alpha, (n - k) as f64 + beta) - norm).exp()
        })
        .collect();
    DiscretePDT::from_weights(weights)
}

/// Histogram of `samples` on the nearest grid points `k / n`.
pub fn empirical_pdt(samples: &[f64], n: usize) -> Result<DiscretePDT> {
    if samples.is_empty() {
        return Err(Error::EmptyInput("no transmittance samples".into()));
    }
    if n == 0 {
        return Err(Error::ParameterDomain(
            "grid resolution n must be >= 1".into(),
        ));
    }
    let mut counts = vec![0.0; n + 1];
    for &s in samples {
        if !(0.0..=1.0).contains(&s) {
            return Err(domain("sample", s, "[0, 1]"));
        }
        counts[(s * n as f64).round() as usize] += 1.0;
    }
    DiscretePDT::from_weights(counts)
}
