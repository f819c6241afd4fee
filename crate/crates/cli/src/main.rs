//! `atmosim`: batch front end for channel emulation and nonclassicality sweeps.

mod config;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::PathBuf;
use std::process::ExitCode;

use atmosim::exec::init_threads;
use atmosim::nonclassicality::{classify, Classification, NonclassicalityResult};
use atmosim::pdt::{
    discretization_errors, discretize, DiscretePDT, ErrorTriple, TransmittanceModel,
};
use atmosim::pipeline::{
    atmospheric_run, beta_scan, build_ensemble, calibrate_source, constant_loss_sweep,
    default_beta_grid, default_postselection_grid, export_ensemble, ingest_ensemble,
    postselection_sweep, rytov_sweep, Analyzer, Calibration, ChannelEnsemble, EnsembleMode,
    Provenance, RytovMapping, SweepKind, SweepResult,
};
use atmosim::source::SourceSpec;
use atmosim::{Error, Execution};
use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::Value;

use config::{parse_override, RunConfig, CONFIG_KEYS};

#[derive(Parser)]
#[command(
    name = "atmosim",
    version,
    about = "Emulate fluctuating-loss channels by merging fixed-attenuation click statistics",
    after_help = CONFIG_KEYS
)]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// JSON configuration file.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Override one configuration key, e.g. `--set channel.n=50`.
    #[arg(long = "set", global = true, value_name = "KEY=JSON", value_parser = parse_override)]
    overrides: Vec<(String, Value)>,

    /// Worker threads (default: all cores). Results do not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// Root seed (`sampling.seed`).
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Trials per level (`sampling.trials`).
    #[arg(long, global = true)]
    trials: Option<u64>,

    /// Grid size (`channel.n`).
    #[arg(long, global = true)]
    n: Option<usize>,

    /// Output directory (`output`).
    #[arg(long, global = true, value_name = "DIR")]
    output: Option<PathBuf>,

    /// Click data directory to ingest (`data`).
    #[arg(long, global = true, value_name = "DIR")]
    data: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Discretize a transmittance model and report the moment errors.
    Discretize {
        /// Transmittance model as JSON (`channel.model`).
        #[arg(long, value_name = "JSON")]
        model: Option<String>,
        /// Use the uniform density on [0, 1].
        #[arg(long, conflicts_with = "model")]
        uniform: bool,
    },
    /// Build the click-statistics ensemble and export one CSV per level.
    Simulate,
    /// Evaluate one channel on an ensemble.
    Analyze,
    /// Run a parameter sweep and write plot-ready CSV.
    Sweep {
        #[arg(long, value_enum)]
        kind: Kind,
    },
    /// Tune a source to a mean click number at unit transmittance.
    Calibrate {
        /// `calibration.target`
        #[arg(long)]
        target: Option<f64>,
        /// `calibration.family`
        #[arg(long, value_enum)]
        family: Option<Family>,
        /// `calibration.modes`
        #[arg(long)]
        modes: Option<usize>,
        /// `calibration.squeeze`
        #[arg(long)]
        squeeze: Option<f64>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Kind {
    ConstantLoss,
    Postselect,
    Rytov,
    BetaScan,
}

#[derive(Clone, Copy, ValueEnum)]
enum Family {
    SqueezedVacuum,
    AmplitudeSqueezed,
    Coherent,
    Thermal,
}

#[derive(Debug)]
enum Failure {
    Config(String),
    Core(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Core(Error::Io(e))
    }
}

impl Failure {
    fn exit_code(&self) -> u8 {
        match self {
            Failure::Config(_) => 2,
            Failure::Core(Error::IncompleteEnsemble { .. }) => 3,
            Failure::Core(Error::Ingestion { .. } | Error::Schema(_) | Error::Csv(_)) => 4,
            Failure::Core(Error::Io(_)) => 1,
            Failure::Core(_) => 2,
        }
    }
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Failure::Config(m) => write!(f, "configuration error: {m}"),
            Failure::Core(e) => write!(f, "{e}"),
        }
    }
}

type Outcome<T> = Result<T, Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("atmosim: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

fn json<T: Serialize>(value: T) -> Value {
    serde_json::to_value(value).expect("serializable")
}

fn collect_overrides(cli: &Cli) -> Outcome<Vec<(String, Value)>> {
    let mut o = cli.overrides.clone();
    let mut push = |key: &str, v: Value| o.push((key.to_string(), v));
    if let Some(s) = cli.seed {
        push("sampling.seed", json(s));
    }
    if let Some(m) = cli.trials {
        push("sampling.trials", json(m));
    }
    if let Some(n) = cli.n {
        push("channel.n", json(n));
    }
    if let Some(p) = &cli.output {
        push("output", json(p));
    }
    if let Some(p) = &cli.data {
        push("data", json(p));
    }
    match &cli.command {
        Command::Discretize { model, uniform } => {
            if let Some(m) = model {
                let v: Value = serde_json::from_str(m)
                    .map_err(|e| Failure::Config(format!("--model: {e}")))?;
                push("channel.model", v);
            }
            if *uniform {
                push("channel.model", json(TransmittanceModel::uniform()));
            }
        }
        Command::Calibrate {
            target,
            family,
            modes,
            squeeze,
        } => {
            if let Some(t) = target {
                push("calibration.target", json(t));
            }
            if let Some(f) = family {
                let name = match f {
                    Family::SqueezedVacuum => "squeezed_vacuum",
                    Family::AmplitudeSqueezed => "amplitude_squeezed",
                    Family::Coherent => "coherent",
                    Family::Thermal => "thermal",
                };
                push("calibration.family", json(name));
            }
            if let Some(m) = modes {
                push("calibration.modes", json(m));
            }
            if let Some(r) = squeeze {
                push("calibration.squeeze", json(r));
            }
        }
        _ => {}
    }
    Ok(o)
}

fn run(cli: Cli) -> Outcome<()> {
    let overrides = collect_overrides(&cli)?;
    let mut cfg = config::load(cli.config.as_deref(), &overrides).map_err(Failure::Config)?;
    if let Command::Calibrate { .. } = cli.command {
        cfg.calibration.get_or_insert_with(Default::default);
    }
    cfg.check_files().map_err(Failure::Config)?;
    if let Some(t) = cli.threads {
        if t == 0 {
            return Err(Failure::Config("--threads must be >= 1".into()));
        }
        init_threads(t);
    }
    let ctx = Context {
        digest: cfg.digest(),
        cfg,
        exec: Execution::default(),
    };
    match cli.command {
        Command::Discretize { .. } => ctx.discretize(),
        Command::Simulate => ctx.simulate(),
        Command::Analyze => ctx.analyze(),
        Command::Sweep { kind } => ctx.sweep(kind),
        Command::Calibrate { .. } => ctx.calibrate(),
    }
}

struct Context {
    cfg: RunConfig,
    digest: String,
    exec: Execution,
}

#[derive(Serialize)]
struct Stamp<'a> {
    config_digest: &'a str,
    seed: Option<u64>,
}

#[derive(Serialize)]
struct ResultRecord<'a> {
    #[serde(flatten)]
    result: &'a NonclassicalityResult,
    classification: Classification,
}

fn records(results: &[NonclassicalityResult], threshold: f64) -> Vec<ResultRecord<'_>> {
    results
        .iter()
        .map(|r| ResultRecord {
            result: r,
            classification: classify(r, threshold),
        })
        .collect()
}

impl Context {
    fn stamp(&self) -> Stamp<'_> {
        Stamp {
            config_digest: &self.digest,
            seed: self.cfg.sampling.seed,
        }
    }

    fn metadata(&self) -> BTreeMap<String, String> {
        let mut m = BTreeMap::new();
        m.insert("config_digest".to_string(), self.digest.clone());
        m.insert(
            "seed".to_string(),
            self.cfg
                .sampling
                .seed
                .map_or("none".to_string(), |s| s.to_string()),
        );
        m
    }

    fn write(&self, name: &str, contents: &str) -> Outcome<PathBuf> {
        std::fs::create_dir_all(&self.cfg.output)?;
        let path = self.cfg.output.join(name);
        std::fs::write(&path, contents)?;
        Ok(path)
    }

    fn write_json<T: Serialize>(&self, name: &str, value: &T) -> Outcome<PathBuf> {
        let mut text = serde_json::to_string_pretty(value).expect("serializable");
        text.push('\n');
        self.write(name, &text)
    }

    fn model(&self) -> Outcome<Option<TransmittanceModel>> {
        let c = &self.cfg.channel;
        match (&c.model, &c.density_csv) {
            (Some(_), Some(_)) => Err(Failure::Config(
                "set only one of channel.model and channel.density_csv".into(),
            )),
            (Some(m), None) => Ok(Some(m.clone())),
            (None, Some(p)) => {
                let file = std::fs::File::open(p)?;
                Ok(Some(TransmittanceModel::read_tabulated_csv(
                    std::io::BufReader::new(file),
                )?))
            }
            (None, None) => Ok(None),
        }
    }

    /// The configured channel on a grid of size `n`, with its description.
    fn channel(&self, n: usize) -> Outcome<(DiscretePDT, String)> {
        let model = self.model()?;
        match (model, self.cfg.channel.point_mass) {
            (Some(_), Some(_)) => Err(Failure::Config(
                "channel.point_mass cannot be combined with a channel model".into(),
            )),
            (Some(m), None) => Ok((discretize(&m, n)?, m.describe())),
            (None, Some(eta)) => {
                let k = (eta * n as f64).round();
                if !(0.0..=1.0).contains(&eta) || (k / n as f64 - eta).abs() > 1e-9 {
                    return Err(Failure::Config(format!(
                        "channel.point_mass = {eta} is not a grid point j/{n}"
                    )));
                }
                Ok((
                    DiscretePDT::point_mass(n, k as usize)?,
                    format!("constant(eta={eta})"),
                ))
            }
            (None, None) => Err(Failure::Config(
                "no channel: set channel.model, channel.density_csv or channel.point_mass".into(),
            )),
        }
    }

    fn source(&self) -> Outcome<(SourceSpec, Option<Calibration>)> {
        match (&self.cfg.calibration, &self.cfg.source) {
            (Some(c), _) => {
                let cal = calibrate_source(c.target, &self.cfg.detector, &c.family())?;
                Ok((cal.source.clone(), Some(cal)))
            }
            (None, Some(s)) => Ok((s.clone(), None)),
            (None, None) => Err(Failure::Config(
                "no source: set `source` or `calibration`".into(),
            )),
        }
    }

    fn ensemble(&self) -> Outcome<ChannelEnsemble> {
        if let Some(dir) = &self.cfg.data {
            return Ok(ingest_ensemble(dir)?);
        }
        self.simulated(&self.source()?.0)
    }

    fn simulated(&self, source: &SourceSpec) -> Outcome<ChannelEnsemble> {
        let mode = match self.cfg.sampling.trials {
            Some(trials) => EnsembleMode::Sampled {
                trials,
                seed: self.cfg.sampling.seed.expect("checked with the config"),
            },
            None => EnsembleMode::Analytic,
        };
        Ok(build_ensemble(
            source,
            &self.cfg.detector,
            self.cfg.channel.n,
            mode,
            self.exec,
        )?)
    }

    fn analyzer<'a>(&self, ensemble: &'a ChannelEnsemble) -> Outcome<Analyzer<'a>> {
        let seed = match (ensemble.is_sampled(), self.cfg.sampling.seed) {
            (true, None) => {
                return Err(Failure::Config(
                    "sampling.seed is required to bootstrap sampled click data".into(),
                ))
            }
            (_, s) => s.unwrap_or(0),
        };
        Ok(Analyzer::new(
            ensemble,
            &self.cfg.analysis,
            seed,
            self.exec,
        )?)
    }

    fn discretize(&self) -> Outcome<()> {
        let n = self.cfg.channel.n;
        let model = self.model()?.ok_or_else(|| {
            Failure::Config("no model: set channel.model or channel.density_csv".into())
        })?;
        let pdt = discretize(&model, n)?;
        let report = discretization_errors(&model, &pdt);

        let mut csv = String::new();
        for (k, v) in self.metadata() {
            let _ = writeln!(csv, "# {k}={v}");
        }
        let _ = writeln!(csv, "# model={}", model.describe());
        let mut body = Vec::new();
        pdt.write_csv(&mut body)?;
        csv.push_str(std::str::from_utf8(&body).expect("utf-8"));
        let csv_path = self.write("pdt.csv", &csv)?;

        #[derive(Serialize)]
        struct Out<'a> {
            #[serde(flatten)]
            stamp: Stamp<'a>,
            model: &'a TransmittanceModel,
            n: usize,
            errors: Option<&'a atmosim::pdt::DiscretizationReport>,
            error: Option<String>,
        }
        let (errors, error) = match &report {
            Ok(r) => (Some(r), None),
            Err(e) => (None, Some(e.to_string())),
        };
        self.write_json(
            "discretization.json",
            &Out {
                stamp: self.stamp(),
                model: &model,
                n,
                errors,
                error,
            },
        )?;

        println!(
            "{} on n = {n}: wrote {}",
            model.describe(),
            csv_path.display()
        );
        match &report {
            Ok(r) => {
                let show = |t: &ErrorTriple| {
                    t.0.iter()
                        .map(|v| v.map_or("undefined".to_string(), |x| format!("{x:.3e}")))
                        .collect::<Vec<_>>()
                        .join("  ")
                };
                println!("relative errors             first  second  third");
                println!("  [0,1] reference, raw      {}", show(&r.truncated.raw));
                println!("  [0,1] reference, central  {}", show(&r.truncated.central));
                if let Some(u) = &r.untruncated {
                    println!("  full reference, raw       {}", show(&u.raw));
                    println!("  full reference, central   {}", show(&u.central));
                }
            }
            Err(e) => println!("relative errors unavailable: {e}"),
        }
        Ok(())
    }

    fn simulate(&self) -> Outcome<()> {
        if self.cfg.data.is_some() {
            return Err(Failure::Config(
                "simulate does not take a data directory".into(),
            ));
        }
        let (source, calibration) = self.source()?;
        let ensemble = self.simulated(&source)?;
        let dir = self.cfg.output.join("ensemble");
        let mut extra = self.metadata();
        extra.insert("source".to_string(), source.describe());
        let files = export_ensemble(&ensemble, &dir, &extra)?;

        #[derive(Serialize)]
        struct Out<'a> {
            #[serde(flatten)]
            stamp: Stamp<'a>,
            source: &'a SourceSpec,
            calibration: Option<&'a Calibration>,
            provenance: &'a Provenance,
            n: usize,
            bins: usize,
            files: usize,
        }
        self.write_json(
            "simulate.json",
            &Out {
                stamp: self.stamp(),
                source: &source,
                calibration: calibration.as_ref(),
                provenance: ensemble.provenance(),
                n: ensemble.n(),
                bins: ensemble.bins(),
                files: files.len(),
            },
        )?;
        println!(
            "{}: {} levels written to {}",
            source.describe(),
            files.len(),
            dir.display()
        );
        Ok(())
    }

    fn analyze(&self) -> Outcome<()> {
        let ensemble = self.ensemble()?;
        let (pdt, channel) = self.channel(ensemble.n())?;
        let analyzer = self.analyzer(&ensemble)?;
        let sweep = atmospheric_run(&analyzer, &pdt, &channel)?;
        let results = &sweep.points[0].results;
        let threshold = self.cfg.analysis.threshold;

        #[derive(Serialize)]
        struct Out<'a> {
            #[serde(flatten)]
            stamp: Stamp<'a>,
            ensemble: &'a Provenance,
            channel: &'a str,
            threshold: f64,
            results: Vec<ResultRecord<'a>>,
        }
        self.write_json(
            "analysis.json",
            &Out {
                stamp: self.stamp(),
                ensemble: ensemble.provenance(),
                channel: &channel,
                threshold,
                results: records(results, threshold),
            },
        )?;
        println!("channel {channel}");
        for r in results {
            println!("{}", verdict(r, threshold));
        }
        Ok(())
    }

    fn sweep(&self, kind: Kind) -> Outcome<()> {
        let ensemble = self.ensemble()?;
        let analyzer = self.analyzer(&ensemble)?;
        let s = &self.cfg.sweep;
        let (result, channel) = match kind {
            Kind::ConstantLoss => (constant_loss_sweep(&analyzer)?, None),
            Kind::Postselect => {
                let (pdt, channel) = self.channel(ensemble.n())?;
                let grid = s
                    .postselect
                    .clone()
                    .unwrap_or_else(default_postselection_grid);
                (
                    postselection_sweep(&analyzer, &pdt, &grid, &channel)?,
                    Some(channel),
                )
            }
            Kind::Rytov => {
                let mapping = RytovMapping {
                    entries: s.rytov.clone(),
                };
                let grid = s.rytov_grid.clone().unwrap_or_else(|| mapping.grid());
                if grid.is_empty() {
                    return Err(Failure::Config(
                        "rytov sweep needs sweep.rytov entries or sweep.rytov_grid".into(),
                    ));
                }
                (rytov_sweep(&analyzer, &mapping, &grid)?, None)
            }
            Kind::BetaScan => {
                let alphas = s.alphas.clone().unwrap_or_else(default_beta_grid);
                let betas = s.betas.clone().unwrap_or_else(default_beta_grid);
                (beta_scan(&analyzer, &alphas, &betas)?, None)
            }
        };
        let name = format!("sweep-{}", result.kind.name());
        let mut meta = self.metadata();
        if let Some(c) = &channel {
            meta.insert("channel".to_string(), c.clone());
        }
        let csv_path = self.write(&format!("{name}.csv"), &result.to_csv(&meta))?;
        self.write_json(
            &format!("{name}.json"),
            &SweepRecord::new(self, &ensemble, &result, channel.as_deref()),
        )?;
        print!("{}", summary(&result));
        println!("wrote {}", csv_path.display());
        Ok(())
    }

    fn calibrate(&self) -> Outcome<()> {
        let c = self.cfg.calibration.as_ref().expect("set for calibrate");
        let cal = calibrate_source(c.target, &self.cfg.detector, &c.family())?;

        #[derive(Serialize)]
        struct Out<'a> {
            #[serde(flatten)]
            stamp: Stamp<'a>,
            target: f64,
            detector: &'a atmosim::detector::DetectorConfig,
            calibration: &'a Calibration,
        }
        self.write_json(
            "calibration.json",
            &Out {
                stamp: self.stamp(),
                target: c.target,
                detector: &self.cfg.detector,
                calibration: &cal,
            },
        )?;
        println!(
            "{}: parameter {} gives {:.9} mean clicks (target {})",
            cal.source.describe(),
            cal.parameter,
            cal.mean_clicks,
            c.target
        );
        Ok(())
    }
}

#[derive(Serialize)]
struct SweepRecord<'a> {
    #[serde(flatten)]
    stamp: Stamp<'a>,
    kind: SweepKind,
    ensemble: &'a Provenance,
    channel: Option<&'a str>,
    threshold: f64,
    parameters: &'static [&'static str],
    points: Vec<PointRecord<'a>>,
}

#[derive(Serialize)]
struct PointRecord<'a> {
    parameters: &'a [f64],
    results: Vec<ResultRecord<'a>>,
    error: Option<&'a str>,
}

impl<'a> SweepRecord<'a> {
    fn new(
        ctx: &'a Context,
        ensemble: &'a ChannelEnsemble,
        result: &'a SweepResult,
        channel: Option<&'a str>,
    ) -> Self {
        Self {
            stamp: ctx.stamp(),
            kind: result.kind,
            ensemble: ensemble.provenance(),
            channel,
            threshold: result.threshold,
            parameters: result.kind.parameter_names(),
            points: result
                .points
                .iter()
                .map(|p| PointRecord {
                    parameters: &p.parameters,
                    results: records(&p.results, result.threshold),
                    error: p.error.as_deref(),
                })
                .collect(),
        }
    }
}

fn verdict(r: &NonclassicalityResult, threshold: f64) -> String {
    format!(
        "K={}  e_min = {:.6e} +- {:.3e}  significance = {:.2}  {}",
        r.order,
        r.e_min,
        r.delta_e,
        r.significance,
        classify(r, threshold)
    )
}

fn summary(result: &SweepResult) -> String {
    let mut out = String::new();
    let names = result.kind.parameter_names().join(" ");
    let _ = writeln!(
        out,
        "{names:>16}  {:>2}  {:>13}  {:>10}  {:>9}  classification",
        "K", "e_min", "delta_e", "sig"
    );
    for p in &result.points {
        let params = p
            .parameters
            .iter()
            .map(|v| format!("{v:.4}"))
            .collect::<Vec<_>>()
            .join(" ");
        if let Some(e) = &p.error {
            let _ = writeln!(out, "{params:>16}  {e}");
        }
        for r in &p.results {
            let _ = writeln!(
                out,
                "{params:>16}  {:>2}  {:>13.6e}  {:>10.3e}  {:>9.2}  {}",
                r.order,
                r.e_min,
                r.delta_e,
                r.significance,
                classify(r, result.threshold)
            );
        }
    }
    out
}
