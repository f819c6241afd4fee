//! Run configuration: a JSON tree with flag overrides.

use std::path::{Path, PathBuf};

use atmosim::detector::DetectorConfig;
use atmosim::pdt::TransmittanceModel;
use atmosim::pipeline::{AnalysisSettings, CalibrationFamily, RytovEntry};
use atmosim::source::SourceSpec;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

pub const CONFIG_KEYS: &str = "\
Configuration keys (JSON file given with --config; any key can be overridden
with --set key.path=JSON, and the dedicated flags win over both):
  source                    photon source, an object whose \"kind\" is one of
                              coherent {mean_photons}, thermal {mean_photons},
                              squeezed_vacuum {squeeze}, multimode_squeezed {squeezes},
                              amplitude_squeezed {amplitude, squeeze}, fock {photons}
  calibration.target        mean clicks per pulse at eta = 1 (default 2.7); when the
                              calibration section is present it replaces `source`
  calibration.family        squeezed_vacuum | amplitude_squeezed | coherent | thermal
  calibration.modes         squeezed modes sharing one squeeze parameter (default 1)
  calibration.squeeze       fixed squeeze parameter for amplitude_squeezed (default 0)
  detector.bins             number of bins N (default 8)
  detector.efficiency       detection efficiency (default 0.22)
  detector.dark_click_rate  mean dark exposure per bin and pulse (default 0)
  channel.n                 grid size n, levels eta_j = j/n (default 100)
  channel.model             transmittance model, an object whose \"family\" is one of
                              log_normal {mu, sigma}, weibull_bw {eta0, shape, scale,
                              wander_variance}, tabulated {points: [[eta, density], ...]}
  channel.density_csv       tabulated density file with header eta,value
  channel.point_mass        constant transmittance, must be a grid point
  sampling.trials           trials M per level; omit for exact statistics
  sampling.seed             root seed, required whenever anything is sampled
  analysis.orders           matrix orders K (default [2, 8])
  analysis.resamples        bootstrap resamples B (default 1000)
  analysis.threshold        significance threshold (default 3)
  sweep.postselect          post-selection cutoffs (default 0, 0.01, ..., 1)
  sweep.rytov               table of {rytov_variance, model} entries
  sweep.rytov_grid          Rytov variances to evaluate (default: every table entry)
  sweep.alphas              beta-binomial alphas (default 21 log-spaced in [0.1, 20])
  sweep.betas               beta-binomial betas (same default)
  data                      directory of click CSVs to ingest instead of simulating
  output                    output directory (default atmosim-out)";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub source: Option<SourceSpec>,
    pub calibration: Option<CalibrationConfig>,
    pub detector: DetectorConfig,
    pub channel: ChannelConfig,
    pub sampling: SamplingConfig,
    pub analysis: AnalysisSettings,
    pub sweep: SweepConfig,
    pub data: Option<PathBuf>,
    pub output: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            source: None,
            calibration: None,
            detector: DetectorConfig::default(),
            channel: ChannelConfig::default(),
            sampling: SamplingConfig::default(),
            analysis: AnalysisSettings::default(),
            sweep: SweepConfig::default(),
            data: None,
            output: PathBuf::from("atmosim-out"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FamilyName {
    SqueezedVacuum,
    AmplitudeSqueezed,
    Coherent,
    Thermal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CalibrationConfig {
    pub target: f64,
    pub family: FamilyName,
    pub modes: usize,
    pub squeeze: f64,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        Self {
            target: 2.7,
            family: FamilyName::SqueezedVacuum,
            modes: 1,
            squeeze: 0.0,
        }
    }
}

impl CalibrationConfig {
    pub fn family(&self) -> CalibrationFamily {
        match self.family {
            FamilyName::SqueezedVacuum => CalibrationFamily::SqueezedVacuum { modes: self.modes },
            FamilyName::AmplitudeSqueezed => CalibrationFamily::AmplitudeSqueezed {
                squeeze: self.squeeze,
            },
            FamilyName::Coherent => CalibrationFamily::Coherent,
            FamilyName::Thermal => CalibrationFamily::Thermal,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ChannelConfig {
    pub n: usize,
    pub model: Option<TransmittanceModel>,
    pub density_csv: Option<PathBuf>,
    pub point_mass: Option<f64>,
}

impl Default for ChannelConfig {
    fn default() -> Self {
        Self {
            n: 100,
            model: None,
            density_csv: None,
            point_mass: None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplingConfig {
    pub trials: Option<u64>,
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub postselect: Option<Vec<f64>>,
    pub rytov: Vec<RytovEntry>,
    pub rytov_grid: Option<Vec<f64>>,
    pub alphas: Option<Vec<f64>>,
    pub betas: Option<Vec<f64>>,
}

/// Reads the file (if any), applies `key.path=JSON` overrides in order and
/// deserializes the result.
pub fn load(file: Option<&Path>, overrides: &[(String, Value)]) -> Result<RunConfig, String> {
    let mut tree = match file {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| format!("cannot read config {}: {e}", path.display()))?;
            serde_json::from_str(&text).map_err(|e| format!("config {}: {e}", path.display()))?
        }
        None => Value::Object(Default::default()),
    };
    for (key, value) in overrides {
        set_path(&mut tree, key, value.clone())?;
    }
    serde_json::from_value(tree).map_err(|e| format!("config: {e}"))
}

/// Parses `key.path=value`; a value that is not valid JSON is taken as a string.
pub fn parse_override(arg: &str) -> Result<(String, Value), String> {
    let (key, raw) = arg
        .split_once('=')
        .ok_or_else(|| format!("override `{arg}` must have the form key.path=value"))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    Ok((key.trim().to_string(), value))
}

fn set_path(tree: &mut Value, key: &str, value: Value) -> Result<(), String> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(format!("invalid config key `{key}`"));
    }
    let mut node = tree;
    for part in &parts[..parts.len() - 1] {
        let obj = node
            .as_object_mut()
            .ok_or_else(|| format!("config key `{key}`: `{part}` is not inside an object"))?;
        node = obj
            .entry(part.to_string())
            .or_insert_with(|| Value::Object(Default::default()));
        if node.is_null() {
            *node = Value::Object(Default::default());
        }
    }
    node.as_object_mut()
        .ok_or_else(|| format!("config key `{key}` is not inside an object"))?
        .insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

impl RunConfig {
    /// SHA-256 of the canonical JSON form without `output`, hex encoded.
    pub fn digest(&self) -> String {
        let mut c = self.clone();
        c.output = PathBuf::new();
        let canonical = serde_json::to_string(&c).expect("config serializes");
        hex::encode(Sha256::digest(canonical.as_bytes()))
    }

    pub fn check_files(&self) -> Result<(), String> {
        if let Some(p) = &self.channel.density_csv {
            if !p.is_file() {
                return Err(format!(
                    "channel.density_csv: {} does not exist",
                    p.display()
                ));
            }
        }
        if let Some(p) = &self.data {
            if !p.is_dir() {
                return Err(format!("data: {} is not a directory", p.display()));
            }
        }
        if self.sampling.trials.is_some() && self.sampling.seed.is_none() {
            return Err("sampling.seed is required when sampling.trials is set".into());
        }
        Ok(())
    }
}
