//! Run configuration and the batch pipeline behind the `radiot` command.
//!
//! A run directory looks like this:
//!
//! ```text
//! manifest.json                 config hash, seeds, spans (written by train)
//! datasets/<name>.rdio          simulate / ingest output
//! datasets/<name>_truth.csv
//! slices/<band>/scaler.json     per-slice reference model
//! slices/<band>/model.json
//! slices/<band>/profile.json
//! slices/<band>/calibration.json
//! slices/<band>/{train,test}_features.csv   when persist_features is set
//! detect/<dataset>/summary.json
//! detect/<dataset>/<band>_alarms.csv
//! detect/<dataset>/<band>_curve.csv
//! reports/testing.{csv,txt}
//! reports/<dataset>.{csv,txt}
//! reports/<dataset>_attacks.csv
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use log::{info, warn};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autoencoder::{Architecture, ModelError, ModelParams, Trainer, TrainingConfig};
use crate::detector::{
    calibrate_threshold, default_grid, fit_error_stats, read_alarms_csv, write_alarms_csv, Aggregation, Alarm,
    Detector, DetectorError, DetectorProfile, PROFILE_FORMAT_VERSION,
};
use crate::eval::{
    match_alarms, match_attack, mark_starts, write_curve_csv, ConfusionCounts, CreditedBand, CurvePoint, EvalError,
    MatchConfig, MetricsReport, ReportRow, DEFAULT_WINDOW_S,
};
use crate::features::{write_features_csv, FeatureError, FeatureExtractor, FeatureScaler, FeatureVector};
use crate::sim::{
    default_environment, mix, name_hash, AttackSpec, CampaignSchedule, Environment, GroundTruthLog, SimError,
    Simulator,
};
use crate::spectrum::{
    parse_sweep_csv, write_waterfall, FrequencyRange, ProbeConfig, SpectrumError, Waterfall, WaterfallAssembler,
    WaterfallReader,
};

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Missing(String),
    #[error("leakage guard: {0}")]
    Leakage(String),
    #[error("slice {band}: {source}")]
    Training {
        band: FrequencyRange,
        #[source]
        source: ModelError,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Spectrum(#[from] SpectrumError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Detector(#[from] DetectorError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

/// Coarse error class, mapped to the process exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorCategory {
    Config,
    Input,
    Data,
    Training,
    Leakage,
    Io,
}

impl ErrorCategory {
    pub fn name(self) -> &'static str {
        match self {
            ErrorCategory::Config => "config",
            ErrorCategory::Input => "input",
            ErrorCategory::Data => "data",
            ErrorCategory::Training => "training",
            ErrorCategory::Leakage => "leakage",
            ErrorCategory::Io => "io",
        }
    }

    pub fn exit_code(self) -> i32 {
        match self {
            ErrorCategory::Config => 2,
            ErrorCategory::Input => 3,
            ErrorCategory::Data => 4,
            ErrorCategory::Training => 5,
            ErrorCategory::Leakage => 6,
            ErrorCategory::Io => 7,
        }
    }
}

impl PipelineError {
    pub fn category(&self) -> ErrorCategory {
        use PipelineError as E;
        match self {
            E::Config(_) | E::Json(_) => ErrorCategory::Config,
            E::Missing(_) => ErrorCategory::Input,
            E::Leakage(_) => ErrorCategory::Leakage,
            E::Training { .. } | E::Model(ModelError::Diverged { .. }) => ErrorCategory::Training,
            E::Io { .. } => ErrorCategory::Io,
            E::Sim(SimError::Config(_) | SimError::Schedule(_) | SimError::UnknownAttack(_)) => ErrorCategory::Config,
            E::Spectrum(SpectrumError::Config(_)) => ErrorCategory::Config,
            E::Spectrum(SpectrumError::Io(_))
            | E::Feature(FeatureError::Io(_))
            | E::Model(ModelError::Io(_))
            | E::Detector(DetectorError::Io(_))
            | E::Eval(EvalError::Io(_))
            | E::Sim(SimError::Io(_)) => ErrorCategory::Io,
            _ => ErrorCategory::Data,
        }
    }
}

pub type Result<T, E = PipelineError> = std::result::Result<T, E>;

fn io<T>(path: &Path, r: std::io::Result<T>) -> Result<T> {
    r.map_err(|source| PipelineError::Io { path: path.to_path_buf(), source })
}

/// A value given inline or as a path to a JSON file (relative to the config).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Inline<T> {
    Path(PathBuf),
    Value(T),
}

impl<T: DeserializeOwned + Clone> Inline<T> {
    pub fn resolve(&self, base: &Path) -> Result<T> {
        match self {
            Inline::Value(v) => Ok(v.clone()),
            Inline::Path(p) => {
                let path = base.join(p);
                let text = fs::read_to_string(&path)
                    .map_err(|e| PipelineError::Missing(format!("{}: {e}", path.display())))?;
                serde_json::from_str(&text)
                    .map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum DatasetSource {
    /// Generated from the run environment. The noise seed is derived from the
    /// run seed and the dataset name.
    Simulated {
        start_time: f64,
        duration_s: f64,
        #[serde(default)]
        schedule: Option<Inline<CampaignSchedule>>,
    },
    /// Concatenated waterfall records, with an optional ground-truth CSV.
    Waterfalls {
        path: PathBuf,
        #[serde(default)]
        truth: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub name: String,
    #[serde(flatten)]
    pub source: DatasetSource,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IngestSpec {
    pub csv: PathBuf,
    #[serde(default = "ingest_name")]
    pub name: String,
}

fn ingest_name() -> String {
    "capture".into()
}

/// The single JSON document driving every subcommand.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Overrides the probe of the environment.
    #[serde(default)]
    pub probe: Option<ProbeConfig>,
    /// Defaults to the built-in smart-home environment.
    #[serde(default)]
    pub environment: Option<Inline<Environment>>,
    /// Clean data for training (first part) and calibration (rest).
    #[serde(default = "default_reference")]
    pub reference: DatasetSpec,
    /// Datasets scored by the trained detectors.
    #[serde(default)]
    pub evaluation: Vec<DatasetSpec>,
    #[serde(default = "default_slices")]
    pub slices: Vec<FrequencyRange>,
    #[serde(default = "default_split")]
    pub split_fraction: f64,
    #[serde(default)]
    pub architecture: Architecture,
    #[serde(default)]
    pub training: TrainingConfig,
    /// Train on every k-th vector of the training split. Consecutive vectors
    /// share 9 of their 10 groups.
    #[serde(default = "one")]
    pub train_stride: usize,
    #[serde(default)]
    pub aggregation: Aggregation,
    #[serde(default = "default_grid")]
    pub threshold_grid: Vec<f64>,
    #[serde(default)]
    pub fp_target: usize,
    #[serde(default = "default_window")]
    pub window_s: f64,
    /// Extra bands credited to attacks, on top of the DoS aftermath channels.
    #[serde(default)]
    pub credited_bands: Vec<CreditedBand>,
    #[serde(default = "yes")]
    pub persist_features: bool,
    #[serde(default)]
    pub ingest: Option<IngestSpec>,
}

fn default_reference() -> DatasetSpec {
    DatasetSpec {
        name: "reference".into(),
        source: DatasetSource::Simulated {
            start_time: crate::sim::DEFAULT_START_TIME,
            duration_s: 2.0 * 3600.0,
            schedule: None,
        },
    }
}

fn default_slices() -> Vec<FrequencyRange> {
    ProbeConfig::default().ranges
}

fn default_split() -> f64 {
    0.7
}

fn one() -> usize {
    1
}

fn yes() -> bool {
    true
}

fn default_window() -> f64 {
    DEFAULT_WINDOW_S
}

impl Default for RunConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("empty config takes every default")
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(PipelineError::Config(m));
        if !(self.split_fraction > 0.0 && self.split_fraction < 1.0) {
            return bad(format!("split_fraction {} outside (0,1)", self.split_fraction));
        }
        if self.slices.is_empty() {
            return bad("slice list is empty".into());
        }
        if self.train_stride == 0 {
            return bad("train_stride must be at least 1".into());
        }
        if !(self.window_s > 0.0) {
            return bad("window_s must be positive".into());
        }
        let mut names = BTreeSet::new();
        for d in std::iter::once(&self.reference).chain(&self.evaluation) {
            if d.name.is_empty() || !d.name.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_') {
                return bad(format!("dataset name {:?} must be non-empty [A-Za-z0-9_-]", d.name));
            }
            if d.name == "testing" {
                return bad("dataset name \"testing\" is reserved".into());
            }
            if !names.insert(d.name.as_str()) {
                return bad(format!("duplicate dataset name {}", d.name));
            }
        }
        let mut seen = BTreeSet::new();
        for s in &self.slices {
            if !seen.insert(*s) {
                return bad(format!("duplicate slice {s}"));
            }
        }
        self.training.validate()?;
        self.architecture.validate()?;
        Ok(())
    }

    /// SHA-256 of the canonical JSON serialization.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        format!("{:x}", Sha256::digest(&json))
    }
}

/// Files attack effects to the channels DoS victims move to afterwards.
pub fn aftermath_bands(env: &Environment, attacks: &[AttackSpec]) -> Vec<CreditedBand> {
    let mut out: Vec<CreditedBand> = Vec::new();
    for a in attacks {
        let Some(dos) = &a.dos else { continue };
        let Some(center) = dos.resume_center_khz else { continue };
        for target in &dos.targets {
            let Some(d) = env.devices.iter().find(|d| &d.name == target) else { continue };
            let half = d.occupied_bandwidth_khz / 2;
            let Ok(band) = FrequencyRange::new(center.saturating_sub(half), center + half) else { continue };
            let c = CreditedBand { attack_id: a.attack_id, band };
            if !out.contains(&c) {
                out.push(c);
            }
        }
    }
    out
}

/// Per-slice record in the manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SliceRecord {
    pub band: FrequencyRange,
    pub model_seed: u64,
    pub train_span: (f64, f64),
    pub train_vectors: usize,
    pub test_span: (f64, f64),
    pub test_vectors: usize,
    pub threshold: f64,
    pub saturated: bool,
    pub epochs_run: usize,
    pub final_loss: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub name: String,
    pub noise_seed: Option<u64>,
    pub span: (f64, f64),
    pub waterfalls: usize,
    pub attacks: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub config_hash: String,
    pub seed: u64,
    pub reference: DatasetRecord,
    pub slices: Vec<SliceRecord>,
}

/// What calibration leaves behind for the evaluation stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationRecord {
    pub threshold: f64,
    pub saturated: bool,
    pub testing: ConfusionCounts,
    pub test_span: (f64, f64),
    pub test_max_score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct DetectSummary {
    span: (f64, f64),
    waterfalls: usize,
}

/// A loaded configuration bound to a run directory and seed.
#[derive(Debug, Clone)]
pub struct Run {
    pub config: RunConfig,
    pub base_dir: PathBuf,
    pub out: PathBuf,
    pub seed: u64,
    pub environment: Environment,
}

struct Opened {
    waterfalls: Box<dyn Iterator<Item = Result<Waterfall>>>,
    truth: GroundTruthLog,
    attacks: Vec<AttackSpec>,
    noise_seed: Option<u64>,
}

/// Whole seconds are enough to name a slice directory.
fn slice_dir_name(b: &FrequencyRange) -> String {
    b.to_string()
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    io(path, fs::write(path, text))
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| PipelineError::Missing(format!("{}: {e}", path.display())))?;
    Ok(serde_json::from_str(&text)?)
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent() {
        io(dir, fs::create_dir_all(dir))?;
    }
    Ok(BufWriter::new(io(path, File::create(path))?))
}

impl Run {
    pub fn new(config: RunConfig, base_dir: impl Into<PathBuf>, out: impl Into<PathBuf>, seed: u64) -> Result<Run> {
        config.validate()?;
        let base_dir = base_dir.into();
        let mut environment = match &config.environment {
            Some(e) => e.resolve(&base_dir)?,
            None => default_environment(),
        };
        if let Some(p) = &config.probe {
            environment.probe = p.clone();
        }
        environment.validate()?;
        for s in &config.slices {
            if environment.probe.range_containing(s).is_none() {
                return Err(PipelineError::Config(format!("slice {s} is not inside a single probe range")));
            }
        }
        Ok(Run { config, base_dir, out: out.into(), seed, environment })
    }

    /// Reads a config file; relative paths inside it resolve against its directory.
    pub fn load(config_path: &Path, out: impl Into<PathBuf>, seed: u64) -> Result<Run> {
        let text = fs::read_to_string(config_path)
            .map_err(|e| PipelineError::Missing(format!("{}: {e}", config_path.display())))?;
        let config: RunConfig =
            serde_json::from_str(&text).map_err(|e| PipelineError::Config(format!("{}: {e}", config_path.display())))?;
        let base = config_path.parent().map(Path::to_path_buf).unwrap_or_default();
        Run::new(config, base, out, seed)
    }

    fn slice_path(&self, band: &FrequencyRange, file: &str) -> PathBuf {
        self.out.join("slices").join(slice_dir_name(band)).join(file)
    }

    fn detect_path(&self, dataset: &str, file: &str) -> PathBuf {
        self.out.join("detect").join(dataset).join(file)
    }

    pub fn noise_seed(&self, dataset: &str) -> u64 {
        mix(self.seed, name_hash(dataset))
    }

    pub fn model_seed(&self, band: &FrequencyRange) -> u64 {
        mix(self.seed ^ self.config.training.seed, name_hash(&band.to_string()))
    }

    fn simulator(&self, d: &DatasetSpec) -> Result<Option<(Simulator, Vec<AttackSpec>)>> {
        let DatasetSource::Simulated { start_time, duration_s, schedule } = &d.source else {
            return Ok(None);
        };
        let schedule = match schedule {
            Some(s) => s.resolve(&self.base_dir)?,
            None => CampaignSchedule::clean(),
        };
        let mut env = self.environment.clone();
        env.noise.rng_seed = self.noise_seed(&d.name);
        let sim = Simulator::new(&env, &schedule, *start_time, *duration_s)?;
        Ok(Some((sim, schedule.attacks)))
    }

    fn open(&self, d: &DatasetSpec) -> Result<Opened> {
        if let Some((sim, attacks)) = self.simulator(d)? {
            let truth = sim.truth().clone();
            let n = sim.waterfall_count();
            let noise_seed = Some(self.noise_seed(&d.name));
            let sim = Arc::new(sim);
            return Ok(Opened {
                waterfalls: Box::new((0..n).map(move |i| Ok(sim.waterfall(i)))),
                truth,
                attacks,
                noise_seed,
            });
        }
        let DatasetSource::Waterfalls { path, truth } = &d.source else { unreachable!() };
        let path = self.base_dir.join(path);
        let file = File::open(&path).map_err(|e| PipelineError::Missing(format!("{}: {e}", path.display())))?;
        let truth = match truth {
            Some(t) => {
                let tp = self.base_dir.join(t);
                let f = File::open(&tp).map_err(|e| PipelineError::Missing(format!("{}: {e}", tp.display())))?;
                GroundTruthLog::read_csv(BufReader::new(f))?
            }
            None => GroundTruthLog::default(),
        };
        let probe = self.environment.probe.clone();
        let reader = WaterfallReader::new(BufReader::new(file)).map(move |w| {
            let w = w?;
            let c = w.config();
            if c.ranges != probe.ranges || c.bin_width_khz != probe.bin_width_khz {
                return Err(PipelineError::Config(format!(
                    "waterfall at {} was recorded with a different probe configuration",
                    w.start_time()
                )));
            }
            Ok(w)
        });
        Ok(Opened { waterfalls: Box::new(reader), truth, attacks: AttackSpec::full_catalog(), noise_seed: None })
    }

    fn match_config(&self, attacks: &[AttackSpec]) -> MatchConfig {
        let mut credited = self.config.credited_bands.clone();
        for c in aftermath_bands(&self.environment, attacks) {
            if !credited.contains(&c) {
                credited.push(c);
            }
        }
        MatchConfig { window_s: self.config.window_s, credited_bands: credited }
    }

    fn datasets(&self) -> impl Iterator<Item = &DatasetSpec> {
        std::iter::once(&self.config.reference).chain(&self.config.evaluation)
    }

    /// Writes every simulated dataset as waterfall records plus its truth CSV.
    pub fn simulate(&self) -> Result<Vec<DatasetRecord>> {
        let mut records = Vec::new();
        for d in self.datasets() {
            let Some((sim, _)) = self.simulator(d)? else { continue };
            let dir = self.out.join("datasets");
            let wpath = dir.join(format!("{}.rdio", d.name));
            let mut sink = create(&wpath)?;
            let mut span = (f64::NAN, f64::NAN);
            let n = sim.waterfall_count();
            for i in 0..n {
                let w = sim.waterfall(i);
                if i == 0 {
                    span.0 = w.start_time();
                }
                span.1 = w.end_time();
                write_waterfall(&w, &mut sink)?;
            }
            io(&wpath, sink.flush())?;
            let tpath = dir.join(format!("{}_truth.csv", d.name));
            sim.truth().write_csv(create(&tpath)?)?;
            info!("simulated {}: {n} waterfalls, {} attacks", d.name, sim.truth().len());
            records.push(DatasetRecord {
                name: d.name.clone(),
                noise_seed: Some(self.noise_seed(&d.name)),
                span,
                waterfalls: n,
                attacks: sim.truth().len(),
            });
        }
        write_json(&self.out.join("datasets").join("manifest.json"), &self.dataset_manifest(&records))?;
        Ok(records)
    }

    fn dataset_manifest(&self, records: &[DatasetRecord]) -> serde_json::Value {
        serde_json::json!({
            "format_version": MANIFEST_VERSION,
            "config_hash": self.config.hash(),
            "seed": self.seed,
            "datasets": records,
        })
    }

    /// Converts a `hackrf_sweep` capture into waterfall records. Sweeps that
    /// break the timing grid restart assembly; the partial waterfall before
    /// the gap is dropped.
    pub fn ingest(&self, csv_path: Option<&Path>) -> Result<usize> {
        let (csv_path, name) = match (csv_path, &self.config.ingest) {
            (Some(p), spec) => (p.to_path_buf(), spec.as_ref().map_or_else(ingest_name, |s| s.name.clone())),
            (None, Some(spec)) => (self.base_dir.join(&spec.csv), spec.name.clone()),
            (None, None) => return Err(PipelineError::Config("no capture given to ingest".into())),
        };
        let file = File::open(&csv_path).map_err(|e| PipelineError::Missing(format!("{}: {e}", csv_path.display())))?;
        let probe = Arc::new(self.environment.probe.clone());
        let parser = parse_sweep_csv(BufReader::new(file), probe.clone())?;
        let wpath = self.out.join("datasets").join(format!("{name}.rdio"));
        let mut sink = create(&wpath)?;
        let mut assembler = WaterfallAssembler::new(probe.clone())?;
        let mut count = 0;
        for sweep in parser {
            let sweep = sweep?;
            let result = match assembler.push(sweep.clone()) {
                Err(SpectrumError::Assembly { reason, .. }) if sweep.check(&probe).is_ok() => {
                    warn!("restarting waterfall assembly: {reason}");
                    assembler = WaterfallAssembler::new(probe.clone())?;
                    assembler.push(sweep)?
                }
                other => other?,
            };
            if let Some(w) = result {
                write_waterfall(&w, &mut sink)?;
                count += 1;
            }
        }
        io(&wpath, sink.flush())?;
        info!("ingested {count} waterfalls into {}", wpath.display());
        Ok(count)
    }

    /// Extracts reference features, trains and calibrates every slice.
    pub fn train(&self, reuse_models: bool) -> Result<Manifest> {
        let cfg = &self.config;
        let reference = &cfg.reference;
        let opened = self.open(reference)?;
        if !opened.truth.is_empty() {
            return Err(PipelineError::Leakage(format!(
                "reference dataset {} contains {} attack intervals",
                reference.name,
                opened.truth.len()
            )));
        }
        let mut extractor = FeatureExtractor::new(&cfg.slices);
        let mut per_slice: Vec<Vec<FeatureVector>> = vec![Vec::new(); cfg.slices.len()];
        let mut span = (f64::NAN, f64::NAN);
        let mut waterfalls = 0;
        for w in opened.waterfalls {
            let w = w?;
            if waterfalls == 0 {
                span.0 = w.start_time();
            }
            span.1 = w.end_time();
            waterfalls += 1;
            for (store, v) in per_slice.iter_mut().zip(extractor.push(&w)?) {
                store.extend(v);
            }
        }
        info!("reference {}: {waterfalls} waterfalls", reference.name);
        let mut slices = Vec::new();
        for (band, vectors) in cfg.slices.iter().zip(per_slice) {
            slices.push(self.train_slice(band, &vectors, reuse_models)?);
        }
        let manifest = Manifest {
            format_version: MANIFEST_VERSION,
            config_hash: cfg.hash(),
            seed: self.seed,
            reference: DatasetRecord {
                name: reference.name.clone(),
                noise_seed: opened.noise_seed,
                span,
                waterfalls,
                attacks: 0,
            },
            slices,
        };
        write_json(&self.out.join("manifest.json"), &manifest)?;
        Ok(manifest)
    }

    fn train_slice(&self, band: &FrequencyRange, vectors: &[FeatureVector], reuse: bool) -> Result<SliceRecord> {
        let cfg = &self.config;
        let cut = (vectors.len() as f64 * cfg.split_fraction).floor() as usize;
        let (train, test) = vectors.split_at(cut);
        if train.len() < 2 || test.len() < 2 {
            return Err(PipelineError::Config(format!(
                "slice {band}: {} reference vectors are too few to split",
                vectors.len()
            )));
        }
        let scaler = FeatureScaler::fit(train.iter().map(|v| v.values.as_slice()))?;
        let seed = self.model_seed(band);
        let model_path = self.slice_path(band, "model.json");
        let reused = if reuse && model_path.exists() {
            let m = ModelParams::load(&model_path)?;
            if m.metadata.seed == seed && m.architecture == cfg.architecture {
                Some(m)
            } else {
                warn!("slice {band}: saved model does not match this config, retraining");
                None
            }
        } else {
            None
        };
        let model = match reused {
            Some(m) => {
                info!("slice {band}: reusing saved model");
                m
            }
            None => {
                let data: Vec<Vec<f64>> = train
                    .iter()
                    .step_by(cfg.train_stride)
                    .map(|v| scaler.apply(&v.values))
                    .collect::<std::result::Result<_, _>>()?;
                let tcfg = TrainingConfig { seed, ..cfg.training.clone() };
                let params = ModelParams::init(&cfg.architecture, seed)?;
                let trainer = Trainer::new(params, &data, tcfg)
                    .map_err(|source| PipelineError::Training { band: *band, source })?;
                let m = trainer.run().map_err(|source| PipelineError::Training { band: *band, source })?;
                info!(
                    "slice {band}: trained on {} vectors, {} epochs, loss {:?}",
                    data.len(),
                    m.metadata.epochs_run,
                    m.metadata.final_loss
                );
                m
            }
        };
        let mut errors = Vec::with_capacity(test.len());
        for v in test {
            errors.push(model.reconstruction_error(&scaler.apply(&v.values)?)?);
        }
        let stats = fit_error_stats(&errors)?;
        let scores: Vec<f64> = errors
            .iter()
            .map(|e| stats.score(e, cfg.aggregation).map(|s| s.value))
            .collect::<std::result::Result<_, _>>()?;
        let cal = calibrate_threshold(&scores, &cfg.threshold_grid, cfg.fp_target)?;
        if cal.saturated {
            warn!("slice {band}: calibration saturated with {} false positives", cal.false_positives);
        }
        let alarm_times: Vec<f64> =
            test.iter().zip(&scores).filter(|(_, s)| **s > cal.threshold).map(|(v, _)| v.window_end_time).collect();
        let test_span = (test[0].window_end_time, test[test.len() - 1].window_end_time);
        let testing = match_alarms(
            &alarm_times,
            &GroundTruthLog::default(),
            band,
            test_span,
            &MatchConfig { window_s: cfg.window_s, credited_bands: Vec::new() },
        )?;

        let dir = self.out.join("slices").join(slice_dir_name(band));
        io(&dir, fs::create_dir_all(&dir))?;
        scaler.save(&dir.join("scaler.json"))?;
        model.save(&model_path)?;
        let profile = DetectorProfile {
            format_version: PROFILE_FORMAT_VERSION,
            band: *band,
            stats,
            threshold: cal.threshold,
            aggregation: cfg.aggregation,
            model_path: "model.json".into(),
            scaler_path: "scaler.json".into(),
        };
        profile.save(&dir.join("profile.json"))?;
        let test_max_score = scores.iter().copied().fold(0.0, f64::max);
        write_json(
            &dir.join("calibration.json"),
            &CalibrationRecord { threshold: cal.threshold, saturated: cal.saturated, testing, test_span, test_max_score },
        )?;
        if cfg.persist_features {
            write_features_csv(train, create(&dir.join("train_features.csv"))?)?;
            write_features_csv(test, create(&dir.join("test_features.csv"))?)?;
        }
        Ok(SliceRecord {
            band: *band,
            model_seed: seed,
            train_span: (train[0].window_end_time, train[train.len() - 1].window_end_time),
            train_vectors: train.len(),
            test_span,
            test_vectors: test.len(),
            threshold: cal.threshold,
            saturated: cal.saturated,
            epochs_run: model.metadata.epochs_run,
            final_loss: model.metadata.final_loss,
        })
    }

    fn detectors(&self) -> Result<Vec<Detector>> {
        self.config
            .slices
            .iter()
            .map(|b| {
                let p = self.slice_path(b, "profile.json");
                if !p.exists() {
                    return Err(PipelineError::Missing(format!("no trained profile for slice {b}; run the pipeline first")));
                }
                Ok(Detector::load(&p)?)
            })
            .collect()
    }

    /// Scores every evaluation dataset with the trained slice detectors.
    pub fn detect(&self) -> Result<()> {
        let detectors = self.detectors()?;
        for d in &self.config.evaluation {
            let opened = self.open(d)?;
            let mcfg = self.match_config(&opened.attacks);
            let mut extractor = FeatureExtractor::new(&self.config.slices);
            let mut curves: Vec<Vec<CurvePoint>> = vec![Vec::new(); detectors.len()];
            let mut alarms: Vec<Vec<Alarm>> = vec![Vec::new(); detectors.len()];
            let mut span = (f64::NAN, f64::NAN);
            let mut waterfalls = 0;
            for w in opened.waterfalls {
                let w = w?;
                if waterfalls == 0 {
                    span.0 = w.start_time();
                }
                span.1 = w.end_time();
                waterfalls += 1;
                for (i, v) in extractor.push(&w)?.into_iter().enumerate() {
                    let Some(v) = v else { continue };
                    let det = &detectors[i];
                    let s = det.score(&v)?;
                    if s.score.value > det.profile.threshold {
                        alarms[i].push(Alarm {
                            time: s.time,
                            band: det.profile.band,
                            score: s.score.value,
                            feature: s.score.argmax,
                        });
                    }
                    curves[i].push(CurvePoint {
                        time: s.time,
                        score: s.score.value,
                        max_abs_error: s.max_abs_error,
                        attack_start: false,
                    });
                }
            }
            for ((det, mut curve), found) in detectors.iter().zip(curves).zip(alarms) {
                let band = det.profile.band;
                let concerning =
                    GroundTruthLog { entries: opened.truth.entries.iter().filter(|e| mcfg.concerns(e, &band)).cloned().collect() };
                mark_starts(&mut curve, &concerning);
                let name = slice_dir_name(&band);
                write_curve_csv(&curve, create(&self.detect_path(&d.name, &format!("{name}_curve.csv")))?)?;
                write_alarms_csv(&found, create(&self.detect_path(&d.name, &format!("{name}_alarms.csv")))?)?;
                info!("{} on {band}: {} alarms", d.name, found.len());
            }
            write_json(&self.detect_path(&d.name, "summary.json"), &DetectSummary { span, waterfalls })?;
        }
        Ok(())
    }

    fn calibration(&self, band: &FrequencyRange) -> Result<CalibrationRecord> {
        read_json(&self.slice_path(band, "calibration.json"))
    }

    fn truth_of(&self, d: &DatasetSpec) -> Result<(GroundTruthLog, Vec<AttackSpec>)> {
        if let Some((sim, attacks)) = self.simulator(d)? {
            return Ok((sim.truth().clone(), attacks));
        }
        let DatasetSource::Waterfalls { truth, .. } = &d.source else { unreachable!() };
        let log = match truth {
            Some(t) => {
                let tp = self.base_dir.join(t);
                let f = File::open(&tp).map_err(|e| PipelineError::Missing(format!("{}: {e}", tp.display())))?;
                GroundTruthLog::read_csv(BufReader::new(f))?
            }
            None => GroundTruthLog::default(),
        };
        Ok((log, AttackSpec::full_catalog()))
    }

    /// Builds the reports from calibration records and detection output.
    pub fn evaluate(&self) -> Result<BTreeMap<String, MetricsReport>> {
        let mut out = BTreeMap::new();
        let mut testing = MetricsReport::default();
        let mut cals = Vec::new();
        for band in &self.config.slices {
            let c = self.calibration(band)?;
            testing.rows.push(ReportRow {
                band: *band,
                attack_ids: Vec::new(),
                threshold: c.threshold,
                testing: c.testing,
                attack: None,
            });
            cals.push(c);
        }
        self.write_report("testing", &testing, None)?;
        out.insert("testing".to_string(), testing);

        for d in &self.config.evaluation {
            let (truth, attacks) = self.truth_of(d)?;
            let mcfg = self.match_config(&attacks);
            let summary: DetectSummary = read_json(&self.detect_path(&d.name, "summary.json"))?;
            let mut report = MetricsReport::default();
            let mut per_attack = Vec::new();
            for (band, cal) in self.config.slices.iter().zip(&cals) {
                let apath = self.detect_path(&d.name, &format!("{}_alarms.csv", slice_dir_name(band)));
                let f = File::open(&apath).map_err(|e| PipelineError::Missing(format!("{}: {e}", apath.display())))?;
                let times: Vec<f64> = read_alarms_csv(BufReader::new(f))?.iter().map(|a| a.time).collect();
                let counts = match_alarms(&times, &truth, band, summary.span, &mcfg)?;
                let ids: BTreeSet<u8> =
                    truth.entries.iter().filter(|e| mcfg.concerns(e, band)).map(|e| e.attack_id).collect();
                for &id in &ids {
                    per_attack.push((*band, id, match_attack(&times, &truth, band, summary.span, &mcfg, id)?));
                }
                report.rows.push(ReportRow {
                    band: *band,
                    attack_ids: ids.into_iter().collect(),
                    threshold: cal.threshold,
                    testing: cal.testing,
                    attack: Some(counts),
                });
            }
            self.write_report(&d.name, &report, Some(&per_attack))?;
            out.insert(d.name.clone(), report);
        }
        Ok(out)
    }

    fn write_report(
        &self,
        name: &str,
        report: &MetricsReport,
        per_attack: Option<&[(FrequencyRange, u8, ConfusionCounts)]>,
    ) -> Result<()> {
        let dir = self.out.join("reports");
        let csv_path = dir.join(format!("{name}.csv"));
        let mut sink = create(&csv_path)?;
        report.write_csv(&mut sink)?;
        io(&csv_path, sink.flush())?;
        let txt = dir.join(format!("{name}.txt"));
        io(&txt, fs::write(&txt, report.to_table()))?;
        if let Some(rows) = per_attack {
            let path = dir.join(format!("{name}_attacks.csv"));
            let mut w = csv::Writer::from_writer(create(&path)?);
            w.write_record(["bandwidth", "attack_id", "tp", "fp", "fn", "precision", "recall"])
                .map_err(EvalError::from)?;
            let opt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
            for (band, id, c) in rows {
                w.write_record([
                    band.to_string(),
                    id.to_string(),
                    c.tp.to_string(),
                    c.fp.to_string(),
                    c.r#fn.to_string(),
                    opt(c.precision()),
                    opt(c.recall()),
                ])
                .map_err(EvalError::from)?;
            }
            io(&path, w.flush())?;
        }
        Ok(())
    }

    /// Train, calibrate, detect and evaluate.
    pub fn pipeline(&self, reuse_models: bool) -> Result<BTreeMap<String, MetricsReport>> {
        self.train(reuse_models)?;
        self.detect()?;
        self.evaluate()
    }
}

/// Per-attack rows of `reports/<dataset>_attacks.csv`.
#[derive(Debug, Clone, PartialEq, Deserialize)]
pub struct AttackReportRow {
    pub bandwidth: FrequencyRange,
    pub attack_id: u8,
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
}

pub fn read_attack_report(path: &Path) -> Result<Vec<AttackReportRow>> {
    let f = File::open(path).map_err(|e| PipelineError::Missing(format!("{}: {e}", path.display())))?;
    let mut r = csv::Reader::from_reader(BufReader::new(f));
    let rows = r.deserialize().collect::<std::result::Result<Vec<AttackReportRow>, _>>().map_err(EvalError::from)?;
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_takes_defaults() {
        let c = RunConfig::default();
        assert_eq!(c.split_fraction, 0.7);
        assert_eq!(c.slices.len(), 3);
        assert_eq!(c.window_s, 300.0);
        assert_eq!(c.threshold_grid, default_grid());
        assert!(c.evaluation.is_empty());
        c.validate().unwrap();
    }

    #[test]
    fn config_errors_are_categorized() {
        let mut c = RunConfig { split_fraction: 1.0, ..RunConfig::default() };
        assert_eq!(c.validate().unwrap_err().category(), ErrorCategory::Config);
        c.split_fraction = 0.7;
        c.slices.clear();
        assert!(c.validate().is_err());
        let c = RunConfig { slices: vec![FrequencyRange::mhz(490, 810).unwrap()], ..RunConfig::default() };
        assert!(Run::new(c, ".", "/nonexistent", 0).is_err());
        let bad: std::result::Result<RunConfig, _> = serde_json::from_str(r#"{"slicez": []}"#);
        assert!(bad.is_err());
    }

    #[test]
    fn dataset_specs_parse_both_sources() {
        let c: RunConfig = serde_json::from_str(
            r#"{
                "reference": {"name": "ref", "source": "waterfalls", "path": "ref.rdio"},
                "evaluation": [{"name": "hi", "source": "simulated", "start_time": 0, "duration_s": 60,
                                "schedule": "schedule.json"}]
            }"#,
        )
        .unwrap();
        assert!(matches!(c.reference.source, DatasetSource::Waterfalls { .. }));
        let DatasetSource::Simulated { schedule, .. } = &c.evaluation[0].source else { panic!() };
        assert_eq!(schedule, &Some(Inline::Path("schedule.json".into())));
        let dup = RunConfig { evaluation: vec![c.reference.clone()], ..c };
        assert!(dup.validate().is_err());
    }

    #[test]
    fn dos_relocation_is_credited_once() {
        let env = default_environment();
        let credited = aftermath_bands(&env, &AttackSpec::full_catalog());
        assert_eq!(
            credited,
            vec![CreditedBand { attack_id: 1, band: FrequencyRange::new(2_402_000, 2_422_000).unwrap() }]
        );
    }

    #[test]
    fn hash_tracks_content() {
        let a = RunConfig::default();
        let b = RunConfig { window_s: 200.0, ..RunConfig::default() };
        assert_eq!(a.hash(), RunConfig::default().hash());
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
    }
}
