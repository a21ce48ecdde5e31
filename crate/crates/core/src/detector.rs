//! Gaussian scoring of reconstruction errors, threshold calibration and alarms.

use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::autoencoder::{ModelError, ModelParams};
use crate::features::{FeatureError, FeatureScaler, FeatureVector};
use crate::spectrum::FrequencyRange;

/// Lower bound on fitted error standard deviations, in normalized units.
pub const SIGMA_FLOOR: f64 = 1e-6;
pub const PROFILE_FORMAT_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum DetectorError {
    #[error("error statistics need at least 2 vectors, got {0}")]
    TooFewVectors(usize),
    #[error("expected {expected} values, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("calibration: {0}")]
    Calibration(String),
    #[error("profile: {0}")]
    Profile(String),
    #[error("alarm csv line {line}: {reason}")]
    Parse { line: u64, reason: String },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = DetectorError> = std::result::Result<T, E>;

/// Per-feature mean and standard deviation of reconstruction errors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// Sample mean and (n − 1) standard deviation per component, the latter
/// floored at [`SIGMA_FLOOR`].
pub fn fit_error_stats<B: AsRef<[f64]>>(errors: &[B]) -> Result<ErrorStats> {
    if errors.len() < 2 {
        return Err(DetectorError::TooFewVectors(errors.len()));
    }
    let dim = errors[0].as_ref().len();
    let n = errors.len() as f64;
    let mut mean = vec![0.0; dim];
    for e in errors {
        let e = e.as_ref();
        if e.len() != dim {
            return Err(DetectorError::Dimension { expected: dim, got: e.len() });
        }
        for (m, v) in mean.iter_mut().zip(e) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0; dim];
    for e in errors {
        for ((s, v), m) in var.iter_mut().zip(e.as_ref()).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    let std = var.iter().map(|s| (s / (n - 1.0)).sqrt().max(SIGMA_FLOOR)).collect();
    Ok(ErrorStats { mean, std })
}

/// How per-feature scores combine into one vector score.
///
/// `Max` reacts to a single deviant feature but saturates on clean data: the
/// largest of 80 clean z-scores routinely exceeds 4, where the per-feature
/// score is already above 0.999. `Mean` keeps clean scores well inside the
/// threshold grid and is the default.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    Max,
    #[default]
    Mean,
}

/// `1 − exp(−z²/2)`.
pub fn feature_score(z: f64) -> f64 {
    -(-0.5 * z * z).exp_m1()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Score {
    pub value: f64,
    /// Feature with the largest individual score.
    pub argmax: usize,
}

impl ErrorStats {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn z(&self, e: &[f64]) -> Result<Vec<f64>> {
        if e.len() != self.dim() {
            return Err(DetectorError::Dimension { expected: self.dim(), got: e.len() });
        }
        Ok(e.iter().zip(self.mean.iter().zip(&self.std)).map(|(v, (m, s))| (v - m) / s).collect())
    }

    pub fn score(&self, e: &[f64], aggregation: Aggregation) -> Result<Score> {
        let z = self.z(e)?;
        let mut argmax = 0;
        let mut best = f64::NEG_INFINITY;
        let mut total = 0.0;
        for (i, zi) in z.iter().enumerate() {
            let p = feature_score(*zi);
            total += p;
            // compare on |z| so ties at p = 1 still pick the largest deviation
            if zi.abs() > best {
                best = zi.abs();
                argmax = i;
            }
        }
        let value = match aggregation {
            Aggregation::Max => feature_score(best),
            Aggregation::Mean => total / z.len() as f64,
        };
        Ok(Score { value, argmax })
    }

    fn validate(&self) -> Result<()> {
        if self.mean.len() != self.std.len() || self.mean.is_empty() {
            return Err(DetectorError::Profile("mean and std arrays differ in length".into()));
        }
        if self.std.iter().any(|s| !(*s >= SIGMA_FLOOR)) {
            return Err(DetectorError::Profile("a standard deviation is below the floor".into()));
        }
        Ok(())
    }
}

/// 0.1, 0.2, …, 0.9
pub fn default_grid() -> Vec<f64> {
    (1..=9).map(|i| i as f64 / 10.0).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub threshold: f64,
    /// Scores above the threshold on the calibration data.
    pub false_positives: usize,
    /// No grid value met the target; the largest one was used.
    pub saturated: bool,
}

/// Smallest grid value with at most `target` scores strictly above it.
pub fn calibrate_threshold(scores: &[f64], grid: &[f64], target: usize) -> Result<Calibration> {
    if grid.is_empty() {
        return Err(DetectorError::Calibration("empty threshold grid".into()));
    }
    if scores.is_empty() {
        return Err(DetectorError::Calibration("no calibration scores".into()));
    }
    if grid.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(DetectorError::Calibration("grid must be strictly ascending".into()));
    }
    if grid.iter().any(|t| !(*t > 0.0 && *t < 1.0)) {
        return Err(DetectorError::Calibration("grid values must lie in (0,1)".into()));
    }
    let above = |t: f64| scores.iter().filter(|s| **s > t).count();
    for &t in grid {
        let fp = above(t);
        if fp <= target {
            return Ok(Calibration { threshold: t, false_positives: fp, saturated: false });
        }
    }
    let t = grid[grid.len() - 1];
    let fp = above(t);
    log::warn!("threshold grid saturated: {fp} calibration scores exceed {t}");
    Ok(Calibration { threshold: t, false_positives: fp, saturated: true })
}

/// Everything needed to score one slice, persisted as JSON next to the model
/// and scaler files it references.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorProfile {
    pub format_version: u32,
    pub band: FrequencyRange,
    pub stats: ErrorStats,
    pub threshold: f64,
    #[serde(default)]
    pub aggregation: Aggregation,
    pub model_path: PathBuf,
    pub scaler_path: PathBuf,
}

impl DetectorProfile {
    pub fn validate(&self) -> Result<()> {
        if self.format_version != PROFILE_FORMAT_VERSION {
            return Err(DetectorError::Profile(format!("unsupported format version {}", self.format_version)));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(DetectorError::Profile(format!("threshold {} outside (0,1)", self.threshold)));
        }
        self.stats.validate()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<DetectorProfile> {
        let p: DetectorProfile = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        p.validate()?;
        Ok(p)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Alarm {
    /// End of the feature window that raised the alarm.
    pub time: f64,
    pub band: FrequencyRange,
    pub score: f64,
    pub feature: usize,
}

/// One scored feature vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Scored {
    pub time: f64,
    pub score: Score,
    /// Largest absolute reconstruction error over the features.
    pub max_abs_error: f64,
}

/// A calibrated profile bound to its model and scaler.
#[derive(Debug, Clone)]
pub struct Detector {
    pub profile: DetectorProfile,
    pub model: ModelParams,
    pub scaler: FeatureScaler,
}

impl Detector {
    pub fn new(profile: DetectorProfile, model: ModelParams, scaler: FeatureScaler) -> Result<Detector> {
        profile.validate()?;
        let d = profile.stats.dim();
        if model.input_dim() != d || scaler.dim() != d {
            return Err(DetectorError::Profile(format!(
                "profile has {d} features, model {} and scaler {}",
                model.input_dim(),
                scaler.dim()
            )));
        }
        Ok(Detector { profile, model, scaler })
    }

    /// Loads the model and scaler referenced by the profile, relative to the
    /// profile's directory.
    pub fn load(profile_path: &Path) -> Result<Detector> {
        let profile = DetectorProfile::load(profile_path)?;
        let dir = profile_path.parent().unwrap_or(Path::new("."));
        let model = ModelParams::load(&dir.join(&profile.model_path))?;
        let scaler = FeatureScaler::load(&dir.join(&profile.scaler_path))?;
        Detector::new(profile, model, scaler)
    }

    pub fn errors(&self, v: &FeatureVector) -> Result<Vec<f64>> {
        let x = if v.normalized { v.values.clone() } else { self.scaler.apply(&v.values)? };
        Ok(self.model.reconstruction_error(&x)?)
    }

    pub fn score(&self, v: &FeatureVector) -> Result<Scored> {
        let e = self.errors(v)?;
        let score = self.profile.stats.score(&e, self.profile.aggregation)?;
        let max_abs_error = e.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        Ok(Scored { time: v.window_end_time, score, max_abs_error })
    }

    pub fn check(&self, v: &FeatureVector) -> Result<Option<Alarm>> {
        let s = self.score(v)?;
        Ok((s.score.value > self.profile.threshold).then_some(Alarm {
            time: s.time,
            band: self.profile.band,
            score: s.score.value,
            feature: s.score.argmax,
        }))
    }

    /// Alarms in stream order. The first malformed vector stops the stream.
    pub fn detect<'a, I>(&self, vectors: I) -> Result<Vec<Alarm>>
    where
        I: IntoIterator<Item = &'a FeatureVector>,
    {
        let mut out = Vec::new();
        for v in vectors {
            if let Some(a) = self.check(v)? {
                out.push(a);
            }
        }
        Ok(out)
    }
}

const ALARM_HEADER: [&str; 4] = ["unix_time", "slice_id", "score", "argmax_feature"];

pub fn write_alarms_csv<'a, W, I>(alarms: I, sink: W) -> Result<()>
where
    W: Write,
    I: IntoIterator<Item = &'a Alarm>,
{
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(sink);
    w.write_record(ALARM_HEADER)?;
    for a in alarms {
        w.write_record(&[a.time.to_string(), a.band.to_string(), a.score.to_string(), a.feature.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_alarms_csv<R: Read>(source: R) -> Result<Vec<Alarm>> {
    let mut r = csv::Reader::from_reader(source);
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        let bad = |reason: &str| DetectorError::Parse { line, reason: reason.into() };
        if rec.len() != 4 {
            return Err(bad("expected 4 fields"));
        }
        out.push(Alarm {
            time: rec[0].parse().map_err(|_| bad("bad time"))?,
            band: rec[1].parse().map_err(|_| bad("bad slice id"))?,
            score: rec[2].parse().map_err(|_| bad("bad score"))?,
            feature: rec[3].parse().map_err(|_| bad("bad feature index"))?,
        });
    }
    Ok(out)
}
