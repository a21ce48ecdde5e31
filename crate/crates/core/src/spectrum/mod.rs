//! Frequency, sweep and waterfall data model.
//!
//! A probe measures power over `M` disjoint frequency ranges with a fixed FFT
//! bin width. One pass over every range is a [`Sweep`]; `N` consecutive
//! sweeps stacked row by row form a [`Waterfall`], the unit of observation for
//! everything downstream. Columns of a waterfall are the bins of every range
//! concatenated in configured order, so cell `(l, k)` of range `i` is the
//! power at frequency `f_start(i) + k·b` and time `t + l·T`.

mod assemble;
mod format;
mod sweep_csv;

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use assemble::{assemble_waterfall, WaterfallAssembler, DEFAULT_TIMING_TOLERANCE};
pub use format::{
    read_waterfall, write_waterfall, WaterfallReader, FORMAT_VERSION, HEADER_MAGIC,
};
pub use sweep_csv::{parse_sweep_csv, write_sweep_csv, SweepCsvParser};

/// Errors raised by the spectrum data model.
#[derive(Debug, Error)]
pub enum SpectrumError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("waterfall assembly failed at sweep {index}: {reason}")]
    Assembly { index: usize, reason: String },
    #[error("cannot slice waterfall: {0}")]
    Slice(String),
    #[error("malformed waterfall stream: {0}")]
    Format(String),
    #[error("sweep csv line {line}: {reason}")]
    Csv { line: u64, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = SpectrumError> = std::result::Result<T, E>;

/// A closed-open frequency interval `[start, end)` in KHz.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "RangeRepr", into = "RangeRepr")]
pub struct FrequencyRange {
    start_khz: u64,
    end_khz: u64,
}

/// Written as `{"start_khz", "end_khz"}`; the `"start-end"` string form is
/// also accepted on input.
#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum RangeRepr {
    Bounds { start_khz: u64, end_khz: u64 },
    Text(String),
}

impl TryFrom<RangeRepr> for FrequencyRange {
    type Error = SpectrumError;
    fn try_from(r: RangeRepr) -> Result<Self> {
        match r {
            RangeRepr::Bounds { start_khz, end_khz } => FrequencyRange::new(start_khz, end_khz),
            RangeRepr::Text(s) => s.parse(),
        }
    }
}

impl From<FrequencyRange> for RangeRepr {
    fn from(r: FrequencyRange) -> Self {
        RangeRepr::Bounds { start_khz: r.start_khz, end_khz: r.end_khz }
    }
}

impl FrequencyRange {
    pub fn new(start_khz: u64, end_khz: u64) -> Result<Self> {
        if start_khz == 0 || start_khz >= end_khz {
            return Err(SpectrumError::Config(format!(
                "frequency range {start_khz}-{end_khz} KHz must satisfy 0 < start < end"
            )));
        }
        Ok(FrequencyRange { start_khz, end_khz })
    }

    /// Convenience constructor from whole MHz.
    pub fn mhz(start_mhz: u64, end_mhz: u64) -> Result<Self> {
        Self::new(start_mhz * 1000, end_mhz * 1000)
    }

    pub fn start_khz(&self) -> u64 {
        self.start_khz
    }

    pub fn end_khz(&self) -> u64 {
        self.end_khz
    }

    pub fn width_khz(&self) -> u64 {
        self.end_khz - self.start_khz
    }

    pub fn contains_khz(&self, khz: f64) -> bool {
        khz >= self.start_khz as f64 && khz < self.end_khz as f64
    }

    pub fn contains(&self, other: &FrequencyRange) -> bool {
        other.start_khz >= self.start_khz && other.end_khz <= self.end_khz
    }

    pub fn overlaps(&self, other: &FrequencyRange) -> bool {
        self.start_khz < other.end_khz && other.start_khz < self.end_khz
    }

    /// Splits the range into windows of `width_khz` advancing by `step_khz`.
    /// Only windows that fit entirely are returned.
    pub fn windows(&self, width_khz: u64, step_khz: u64) -> Result<Vec<FrequencyRange>> {
        if width_khz == 0 || step_khz == 0 {
            return Err(SpectrumError::Config("window width and step must be positive".into()));
        }
        let mut out = Vec::new();
        let mut start = self.start_khz;
        while start + width_khz <= self.end_khz {
            out.push(FrequencyRange::new(start, start + width_khz)?);
            start += step_khz;
        }
        Ok(out)
    }
}

impl fmt::Display for FrequencyRange {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}-{}", self.start_khz, self.end_khz)
    }
}

impl FromStr for FrequencyRange {
    type Err = SpectrumError;

    /// Parses the `start-end` KHz form produced by `Display`.
    fn from_str(s: &str) -> Result<Self> {
        let (a, b) = s
            .split_once('-')
            .ok_or_else(|| SpectrumError::Config(format!("expected `start-end` in KHz, got {s:?}")))?;
        let parse = |v: &str| {
            v.trim()
                .parse::<u64>()
                .map_err(|e| SpectrumError::Config(format!("bad frequency {v:?}: {e}")))
        };
        FrequencyRange::new(parse(a)?, parse(b)?)
    }
}

/// Number of FFT bins covering `range` at `bin_width_khz`.
pub fn bin_count(range: &FrequencyRange, bin_width_khz: f64) -> Result<usize> {
    if !(bin_width_khz > 0.0 && bin_width_khz.is_finite()) {
        return Err(SpectrumError::Config(format!("bin width {bin_width_khz} must be positive")));
    }
    let bins = range.width_khz() as f64 / bin_width_khz;
    let rounded = bins.round();
    if rounded < 1.0 || (bins - rounded).abs() > 1e-9 * bins.max(1.0) {
        return Err(SpectrumError::Config(format!(
            "range {range} KHz is not a whole number of {bin_width_khz} KHz bins"
        )));
    }
    Ok(rounded as usize)
}

fn on_grid(khz: u64, bin_width_khz: f64) -> bool {
    let q = khz as f64 / bin_width_khz;
    (q - q.round()).abs() <= 1e-9 * q.max(1.0)
}

/// Static description of what a probe measures and how often.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub probe_id: String,
    pub ranges: Vec<FrequencyRange>,
    pub bin_width_khz: f64,
    pub sweep_interval_s: f64,
    pub sweeps_per_waterfall: usize,
}

impl Default for ProbeConfig {
    /// HackRF deployment: 400-500, 800-900 and 2400-2500 MHz at 200 KHz bins,
    /// one sweep every 37.5 ms, 100 sweeps per waterfall.
    fn default() -> Self {
        ProbeConfig {
            probe_id: "probe-0".to_string(),
            ranges: vec![
                FrequencyRange { start_khz: 400_000, end_khz: 500_000 },
                FrequencyRange { start_khz: 800_000, end_khz: 900_000 },
                FrequencyRange { start_khz: 2_400_000, end_khz: 2_500_000 },
            ],
            bin_width_khz: 200.0,
            sweep_interval_s: 0.0375,
            sweeps_per_waterfall: 100,
        }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.ranges.is_empty() {
            return Err(SpectrumError::Config("probe needs at least one frequency range".into()));
        }
        if !(self.sweep_interval_s > 0.0 && self.sweep_interval_s.is_finite()) {
            return Err(SpectrumError::Config("sweep interval must be positive".into()));
        }
        if self.sweeps_per_waterfall == 0 {
            return Err(SpectrumError::Config("sweeps per waterfall must be positive".into()));
        }
        if self.probe_id.len() > u16::MAX as usize {
            return Err(SpectrumError::Config("probe id too long".into()));
        }
        for r in &self.ranges {
            bin_count(r, self.bin_width_khz)?;
            if !on_grid(r.start_khz, self.bin_width_khz) || !on_grid(r.end_khz, self.bin_width_khz) {
                return Err(SpectrumError::Config(format!(
                    "range {r} KHz endpoints are not multiples of the {} KHz bin width",
                    self.bin_width_khz
                )));
            }
        }
        for (i, a) in self.ranges.iter().enumerate() {
            for b in &self.ranges[i + 1..] {
                if a.overlaps(b) {
                    return Err(SpectrumError::Config(format!("ranges {a} and {b} overlap")));
                }
            }
        }
        Ok(())
    }

    /// `L_i` for every range, in configured order.
    pub fn bins_per_range(&self) -> Vec<usize> {
        self.ranges
            .iter()
            .map(|r| bin_count(r, self.bin_width_khz).expect("validated probe config"))
            .collect()
    }

    pub fn total_bins(&self) -> usize {
        self.bins_per_range().iter().sum()
    }

    /// First waterfall column of range `i`.
    pub fn column_offset(&self, range_index: usize) -> usize {
        self.bins_per_range()[..range_index].iter().sum()
    }

    /// Seconds spanned by one waterfall (`N·T`).
    pub fn waterfall_duration_s(&self) -> f64 {
        self.sweeps_per_waterfall as f64 * self.sweep_interval_s
    }

    /// Serialized payload size of one waterfall in bytes (`8·N·ΣL_i`).
    pub fn payload_bytes(&self) -> usize {
        8 * self.sweeps_per_waterfall * self.total_bins()
    }

    /// Range index and in-range bin index for a frequency, if measured.
    pub fn locate(&self, khz: f64) -> Option<(usize, usize)> {
        self.ranges.iter().enumerate().find_map(|(i, r)| {
            r.contains_khz(khz).then(|| {
                let k = ((khz - r.start_khz as f64) / self.bin_width_khz + 1e-9).floor() as usize;
                (i, k)
            })
        })
    }

    /// Index of the configured range that wholly contains `sub`.
    pub fn range_containing(&self, sub: &FrequencyRange) -> Option<usize> {
        self.ranges.iter().position(|r| r.contains(sub))
    }
}

/// One pass over every configured range at a single instant.
#[derive(Debug, Clone, PartialEq)]
pub struct Sweep {
    /// Unix seconds.
    pub timestamp: f64,
    /// One vector of `L_i` dBm values per range.
    pub powers: Vec<Vec<f64>>,
}

impl Sweep {
    pub fn check(&self, config: &ProbeConfig) -> Result<(), String> {
        if !self.timestamp.is_finite() {
            return Err("timestamp is not finite".into());
        }
        let expected = config.bins_per_range();
        if self.powers.len() != expected.len() {
            return Err(format!("{} ranges, expected {}", self.powers.len(), expected.len()));
        }
        for (i, (p, &l)) in self.powers.iter().zip(&expected).enumerate() {
            if p.len() != l {
                return Err(format!("range {i} has {} bins, expected {l}", p.len()));
            }
            if p.iter().any(|v| !v.is_finite()) {
                return Err(format!("range {i} holds a non-finite power"));
            }
        }
        Ok(())
    }
}

/// `N` consecutive sweeps as an `N × ΣL_i` row-major matrix of dBm values.
#[derive(Debug, Clone, PartialEq)]
pub struct Waterfall {
    start_time: f64,
    config: Arc<ProbeConfig>,
    data: Vec<f64>,
}

impl Waterfall {
    /// Builds a waterfall from a row-major matrix. The matrix must have exactly
    /// `N·ΣL_i` finite entries.
    pub fn from_matrix(start_time: f64, config: Arc<ProbeConfig>, data: Vec<f64>) -> Result<Self> {
        config.validate()?;
        let expected = config.sweeps_per_waterfall * config.total_bins();
        if data.len() != expected {
            return Err(SpectrumError::Config(format!(
                "matrix has {} cells, expected {expected}",
                data.len()
            )));
        }
        if !start_time.is_finite() {
            return Err(SpectrumError::Config("start time is not finite".into()));
        }
        Ok(Waterfall { start_time, config, data })
    }

    pub fn start_time(&self) -> f64 {
        self.start_time
    }

    pub fn end_time(&self) -> f64 {
        self.start_time + self.config.waterfall_duration_s()
    }

    pub fn probe_id(&self) -> &str {
        &self.config.probe_id
    }

    pub fn config(&self) -> &Arc<ProbeConfig> {
        &self.config
    }

    pub fn rows(&self) -> usize {
        self.config.sweeps_per_waterfall
    }

    pub fn cols(&self) -> usize {
        self.data.len() / self.rows()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn row(&self, l: usize) -> &[f64] {
        let c = self.cols();
        &self.data[l * c..(l + 1) * c]
    }

    pub fn get(&self, l: usize, col: usize) -> f64 {
        self.data[l * self.cols() + col]
    }

    /// Frequency (KHz) of global column `col`.
    pub fn column_frequency_khz(&self, col: usize) -> f64 {
        let mut offset = 0;
        for (r, l) in self.config.ranges.iter().zip(self.config.bins_per_range()) {
            if col < offset + l {
                return r.start_khz as f64 + (col - offset) as f64 * self.config.bin_width_khz;
            }
            offset += l;
        }
        panic!("column {col} out of bounds");
    }

    /// Acquisition time of row `l`.
    pub fn row_time(&self, l: usize) -> f64 {
        self.start_time + l as f64 * self.config.sweep_interval_s
    }

    /// Splits the matrix back into sweeps.
    pub fn to_sweeps(&self) -> Vec<Sweep> {
        let bins = self.config.bins_per_range();
        (0..self.rows())
            .map(|l| {
                let row = self.row(l);
                let mut offset = 0;
                let powers = bins
                    .iter()
                    .map(|&n| {
                        let v = row[offset..offset + n].to_vec();
                        offset += n;
                        v
                    })
                    .collect();
                Sweep { timestamp: self.row_time(l), powers }
            })
            .collect()
    }
}

/// A borrowed view of the columns of one sub-band of a waterfall.
#[derive(Debug, Clone, Copy)]
pub struct WaterfallSlice<'a> {
    waterfall: &'a Waterfall,
    range: FrequencyRange,
    col_start: usize,
    cols: usize,
}

impl<'a> WaterfallSlice<'a> {
    pub fn range(&self) -> FrequencyRange {
        self.range
    }

    pub fn start_time(&self) -> f64 {
        self.waterfall.start_time
    }

    pub fn end_time(&self) -> f64 {
        self.waterfall.end_time()
    }

    pub fn probe_id(&self) -> &'a str {
        self.waterfall.probe_id()
    }

    pub fn rows(&self) -> usize {
        self.waterfall.rows()
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    /// Global waterfall column of slice column 0.
    pub fn parent_column_start(&self) -> usize {
        self.col_start
    }

    pub fn len(&self) -> usize {
        self.rows() * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, l: usize, k: usize) -> f64 {
        assert!(k < self.cols, "slice column {k} out of bounds");
        self.waterfall.get(l, self.col_start + k)
    }

    pub fn row(&self, l: usize) -> &'a [f64] {
        &self.waterfall.row(l)[self.col_start..self.col_start + self.cols]
    }

    /// Every cell, row-major.
    pub fn cells(&self) -> impl Iterator<Item = f64> + 'a {
        let this = *self;
        (0..this.rows()).flat_map(move |l| this.row(l).iter().copied())
    }
}

/// Extracts the bins of `waterfall` lying in `sub`.
pub fn slice_waterfall<'a>(waterfall: &'a Waterfall, sub: &FrequencyRange) -> Result<WaterfallSlice<'a>> {
    let cfg = &waterfall.config;
    let i = cfg.range_containing(sub).ok_or_else(|| {
        SpectrumError::Slice(format!("{sub} KHz does not lie within a single configured range"))
    })?;
    let parent = cfg.ranges[i];
    let b = cfg.bin_width_khz;
    if !on_grid(sub.start_khz - parent.start_khz, b) || !on_grid(sub.end_khz - parent.start_khz, b) {
        return Err(SpectrumError::Slice(format!("{sub} KHz endpoints are off the {b} KHz bin grid")));
    }
    let first = ((sub.start_khz - parent.start_khz) as f64 / b).round() as usize;
    let cols = bin_count(sub, b).map_err(|e| SpectrumError::Slice(e.to_string()))?;
    Ok(WaterfallSlice {
        waterfall,
        range: *sub,
        col_start: cfg.column_offset(i) + first,
        cols,
    })
}
