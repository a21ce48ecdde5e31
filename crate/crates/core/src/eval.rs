//! Alarm/ground-truth matching, confusion metrics and reports.

use std::fmt::Write as _;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::detector::{Detector, DetectorError};
use crate::features::FeatureVector;
use crate::sim::{GroundTruthEntry, GroundTruthLog};
use crate::spectrum::FrequencyRange;

pub const DEFAULT_WINDOW_S: f64 = 300.0;

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("alarms are not time-sorted at index {0}")]
    Unsorted(usize),
    #[error("evaluation config: {0}")]
    Config(String),
    #[error(transparent)]
    Detector(#[from] DetectorError),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = EvalError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub r#fn: u64,
    pub tn: u64,
}

impl ConfusionCounts {
    pub fn precision(&self) -> Option<f64> {
        ratio(self.tp, self.tp + self.fp)
    }

    pub fn recall(&self) -> Option<f64> {
        ratio(self.tp, self.tp + self.r#fn)
    }

    pub fn tnr(&self) -> Option<f64> {
        ratio(self.tn, self.tn + self.fp)
    }
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

pub fn precision(c: &ConfusionCounts) -> Option<f64> {
    c.precision()
}

pub fn recall(c: &ConfusionCounts) -> Option<f64> {
    c.recall()
}

pub fn tnr(c: &ConfusionCounts) -> Option<f64> {
    c.tnr()
}

/// An extra band in which alarms are credited to an attack, such as the
/// channel a DoS victim moves to afterwards.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CreditedBand {
    pub attack_id: u8,
    pub band: FrequencyRange,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchConfig {
    pub window_s: f64,
    #[serde(default)]
    pub credited_bands: Vec<CreditedBand>,
}

impl Default for MatchConfig {
    fn default() -> Self {
        MatchConfig { window_s: DEFAULT_WINDOW_S, credited_bands: Vec::new() }
    }
}

impl MatchConfig {
    /// Whether the attack behind `e` can show up in `band`.
    pub fn concerns(&self, e: &GroundTruthEntry, band: &FrequencyRange) -> bool {
        e.band.overlaps(band)
            || self.credited_bands.iter().any(|c| c.attack_id == e.attack_id && c.band.overlaps(band))
    }
}

fn extended(e: &GroundTruthEntry, w: f64) -> (f64, f64) {
    (e.start - w, e.end + w)
}

fn check_sorted(alarms: &[f64]) -> Result<()> {
    match alarms.windows(2).position(|p| p[1] < p[0]) {
        Some(i) => Err(EvalError::Unsorted(i + 1)),
        None => Ok(()),
    }
}

/// Counts over the evaluation span `[span.0, span.1]`.
///
/// A truth interval concerning `band` is a TP when some alarm falls in
/// `[start − w, end + w]`, otherwise a FN. An alarm outside every such
/// extended interval is a FP. The span is cut into back-to-back segments of
/// length `w` starting at `span.0`; each segment that touches no extended
/// interval and holds no alarm is a TN.
pub fn match_alarms(
    alarms: &[f64],
    truth: &GroundTruthLog,
    band: &FrequencyRange,
    span: (f64, f64),
    cfg: &MatchConfig,
) -> Result<ConfusionCounts> {
    match_selected(alarms, truth, band, span, cfg, |_| true)
}

/// Counts for one attack id. Alarms inside the extended intervals of other
/// attacks concerning the band are neither credited nor counted as FP.
pub fn match_attack(
    alarms: &[f64],
    truth: &GroundTruthLog,
    band: &FrequencyRange,
    span: (f64, f64),
    cfg: &MatchConfig,
    attack_id: u8,
) -> Result<ConfusionCounts> {
    match_selected(alarms, truth, band, span, cfg, |e| e.attack_id == attack_id)
}

fn match_selected(
    alarms: &[f64],
    truth: &GroundTruthLog,
    band: &FrequencyRange,
    span: (f64, f64),
    cfg: &MatchConfig,
    selected: impl Fn(&GroundTruthEntry) -> bool,
) -> Result<ConfusionCounts> {
    if !(cfg.window_s > 0.0) {
        return Err(EvalError::Config("window_s must be positive".into()));
    }
    if !(span.1 >= span.0) {
        return Err(EvalError::Config("evaluation span ends before it starts".into()));
    }
    check_sorted(alarms)?;
    let w = cfg.window_s;
    let relevant: Vec<&GroundTruthEntry> = truth.entries.iter().filter(|e| cfg.concerns(e, band)).collect();
    let inside = |t: f64, e: &GroundTruthEntry| {
        let (a, b) = extended(e, w);
        t >= a && t <= b
    };
    let mut c = ConfusionCounts::default();
    for e in relevant.iter().filter(|e| selected(e)) {
        if alarms.iter().any(|&t| inside(t, e)) {
            c.tp += 1;
        } else {
            c.r#fn += 1;
        }
    }
    c.fp = alarms.iter().filter(|&&t| !relevant.iter().any(|e| inside(t, e))).count() as u64;

    let busy: Vec<(f64, f64)> = relevant.iter().map(|e| extended(e, w)).collect();
    let segments = ((span.1 - span.0) / w + 1e-9).floor() as u64;
    for k in 0..segments {
        let (s0, s1) = (span.0 + k as f64 * w, span.0 + (k + 1) as f64 * w);
        if busy.iter().any(|&(a, b)| a < s1 && b >= s0) {
            continue;
        }
        let lo = alarms.partition_point(|&t| t < s0);
        if lo >= alarms.len() || alarms[lo] >= s1 {
            c.tn += 1;
        }
    }
    Ok(c)
}

/// One line of the results table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub band: FrequencyRange,
    pub attack_ids: Vec<u8>,
    pub threshold: f64,
    /// Counts on the clean testing data.
    pub testing: ConfusionCounts,
    /// Counts on the attack data, if any was evaluated.
    pub attack: Option<ConfusionCounts>,
}

impl ReportRow {
    pub fn tnr(&self) -> Option<f64> {
        self.testing.tnr()
    }

    pub fn precision(&self) -> Option<f64> {
        self.attack.and_then(|c| c.precision())
    }

    pub fn recall(&self) -> Option<f64> {
        self.attack.and_then(|c| c.recall())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub rows: Vec<ReportRow>,
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

fn pct(v: Option<f64>) -> String {
    v.map(|x| format!("{:.2}%", 100.0 * x)).unwrap_or_else(|| "-".into())
}

fn ids(v: &[u8]) -> String {
    v.iter().map(|i| i.to_string()).collect::<Vec<_>>().join(" ")
}

impl MetricsReport {
    pub fn write_csv<W: Write>(&self, sink: W) -> Result<()> {
        let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(sink);
        w.write_record([
            "bandwidth", "attack_ids", "threshold", "tnr", "precision", "recall", "test_fp", "test_tn", "tp", "fp",
            "fn", "tn",
        ])?;
        for r in &self.rows {
            let a = r.attack.unwrap_or_default();
            let attack_counts = |v: u64| if r.attack.is_some() { v.to_string() } else { String::new() };
            w.write_record([
                r.band.to_string(),
                ids(&r.attack_ids),
                format!("{:.2}", r.threshold),
                opt(r.tnr()),
                opt(r.precision()),
                opt(r.recall()),
                r.testing.fp.to_string(),
                r.testing.tn.to_string(),
                attack_counts(a.tp),
                attack_counts(a.fp),
                attack_counts(a.r#fn),
                attack_counts(a.tn),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    /// Aligned plain-text table, one row per slice.
    pub fn to_table(&self) -> String {
        let header = ["Bandwidth (MHz)", "ID Attack", "Threshold", "TNR", "Precision", "Recall"];
        let body: Vec<[String; 6]> = self
            .rows
            .iter()
            .map(|r| {
                let mhz = |k: u64| {
                    if k % 1000 == 0 {
                        (k / 1000).to_string()
                    } else {
                        format!("{}", k as f64 / 1000.0)
                    }
                };
                [
                    format!("{}-{}", mhz(r.band.start_khz()), mhz(r.band.end_khz())),
                    if r.attack_ids.is_empty() { "-".into() } else { ids(&r.attack_ids).replace(' ', ",") },
                    format!("{:.1}", r.threshold),
                    pct(r.tnr()),
                    pct(r.precision()),
                    pct(r.recall()),
                ]
            })
            .collect();
        let mut width = header.map(|h| h.chars().count());
        for row in &body {
            for (w, c) in width.iter_mut().zip(row) {
                *w = (*w).max(c.chars().count());
            }
        }
        let mut out = String::new();
        let line = |cells: Vec<&str>, out: &mut String| {
            let padded: Vec<String> = cells.iter().zip(&width).map(|(c, w)| format!("{c:<w$}")).collect();
            let _ = writeln!(out, "{}", padded.join("  ").trim_end());
        };
        line(header.to_vec(), &mut out);
        let rule: Vec<String> = width.iter().map(|w| "-".repeat(*w)).collect();
        line(rule.iter().map(|s| s.as_str()).collect(), &mut out);
        for row in &body {
            line(row.iter().map(|s| s.as_str()).collect(), &mut out);
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub time: f64,
    pub score: f64,
    pub max_abs_error: f64,
    pub attack_start: bool,
}

/// Score per vector, with the row nearest each truth start flagged.
pub fn error_curve(detector: &Detector, vectors: &[FeatureVector], truth: &GroundTruthLog) -> Result<Vec<CurvePoint>> {
    let mut rows = Vec::with_capacity(vectors.len());
    for v in vectors {
        let s = detector.score(v)?;
        rows.push(CurvePoint { time: s.time, score: s.score.value, max_abs_error: s.max_abs_error, attack_start: false });
    }
    mark_starts(&mut rows, truth);
    Ok(rows)
}

/// Flags the row nearest each truth start that falls within the curve's span.
pub fn mark_starts(rows: &mut [CurvePoint], truth: &GroundTruthLog) {
    let (Some(first), Some(last)) = (rows.first().map(|r| r.time), rows.last().map(|r| r.time)) else {
        return;
    };
    for e in &truth.entries {
        if e.start < first || e.start > last {
            continue;
        }
        let i = rows.partition_point(|r| r.time < e.start);
        let nearest = if i == 0 {
            0
        } else if i == rows.len() || e.start - rows[i - 1].time <= rows[i].time - e.start {
            i - 1
        } else {
            i
        };
        rows[nearest].attack_start = true;
    }
}

pub fn write_curve_csv<W: Write>(rows: &[CurvePoint], sink: W) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(sink);
    w.write_record(["unix_time", "score", "max_abs_error", "attack_start"])?;
    for r in rows {
        w.write_record([
            r.time.to_string(),
            r.score.to_string(),
            r.max_abs_error.to_string(),
            u8::from(r.attack_start).to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
