//! Per-slice statistics, daily time encoding and the sliding feature window.

use std::collections::VecDeque;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::spectrum::{slice_waterfall, FrequencyRange, SpectrumError, Waterfall, WaterfallSlice};

/// Waterfalls per feature vector.
pub const WINDOW_LEN: usize = 10;
/// Six statistics then sin and cos of the time of day.
pub const FEATURES_PER_GROUP: usize = 8;
pub const FEATURE_COUNT: usize = WINDOW_LEN * FEATURES_PER_GROUP;

#[derive(Debug, thiserror::Error)]
pub enum FeatureError {
    #[error("statistics of an empty slice")]
    EmptySlice,
    #[error("expected {expected} values, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("window order: {0}")]
    Order(String),
    #[error("scaler: {0}")]
    Scaler(String),
    #[error("feature csv line {line}: {reason}")]
    Parse { line: u64, reason: String },
    #[error(transparent)]
    Spectrum(#[from] SpectrumError),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = FeatureError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SliceStats {
    pub max: f64,
    pub min: f64,
    pub mean: f64,
    pub median: f64,
    /// Population standard deviation.
    pub std: f64,
    pub sum: f64,
}

impl SliceStats {
    pub fn from_values(values: &[f64]) -> Result<SliceStats> {
        let n = values.len();
        if n == 0 {
            return Err(FeatureError::EmptySlice);
        }
        let (mut max, mut min, mut sum) = (f64::NEG_INFINITY, f64::INFINITY, 0.0);
        for &v in values {
            max = max.max(v);
            min = min.min(v);
            sum += v;
        }
        let mean = sum / n as f64;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        let mut scratch = values.to_vec();
        let median = median_in_place(&mut scratch);
        // rounding can push the mean a hair outside [min, max] on near-constant input
        Ok(SliceStats { max, min, mean: mean.clamp(min, max), median, std: var.sqrt(), sum })
    }

    pub fn to_array(&self) -> [f64; 6] {
        [self.max, self.min, self.mean, self.median, self.std, self.sum]
    }
}

fn median_in_place(v: &mut [f64]) -> f64 {
    let n = v.len();
    let mid = n / 2;
    let (lower, m, _) = v.select_nth_unstable_by(mid, f64::total_cmp);
    let upper = *m;
    if n % 2 == 1 {
        upper
    } else {
        let below = lower.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        below + (upper - below) / 2.0
    }
}

/// The six statistics over every cell of the slice.
pub fn slice_stats(slice: &WaterfallSlice<'_>) -> Result<SliceStats> {
    if slice.is_empty() {
        return Err(FeatureError::EmptySlice);
    }
    let mut cells = Vec::with_capacity(slice.len());
    for l in 0..slice.rows() {
        cells.extend_from_slice(slice.row(l));
    }
    SliceStats::from_values(&cells)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeEncoding {
    pub sin: f64,
    pub cos: f64,
}

/// Position of `t` (Unix seconds) on the daily cycle. UTC wall-clock time is
/// taken as the local time of the monitored site.
pub fn encode_time(t: f64) -> TimeEncoding {
    let s = t.rem_euclid(86_400.0);
    let (sin, cos) = (std::f64::consts::TAU * s / 86_400.0).sin_cos();
    TimeEncoding { sin, cos }
}

/// Everything one waterfall contributes to a feature vector.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FeatureGroup {
    pub stats: SliceStats,
    pub time: TimeEncoding,
    pub start_time: f64,
    pub end_time: f64,
}

impl FeatureGroup {
    pub fn from_slice(slice: &WaterfallSlice<'_>) -> Result<FeatureGroup> {
        Ok(FeatureGroup {
            stats: slice_stats(slice)?,
            time: encode_time(slice.start_time()),
            start_time: slice.start_time(),
            end_time: slice.end_time(),
        })
    }

    pub fn values(&self) -> [f64; FEATURES_PER_GROUP] {
        let s = self.stats.to_array();
        [s[0], s[1], s[2], s[3], s[4], s[5], self.time.sin, self.time.cos]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    pub band: FrequencyRange,
    /// End of the newest waterfall in the window.
    pub window_end_time: f64,
    pub values: Vec<f64>,
    pub normalized: bool,
}

/// Concatenates exactly ten groups, oldest first. Fewer groups is the warm-up
/// period and yields `None`.
pub fn window_features(band: FrequencyRange, history: &[FeatureGroup]) -> Result<Option<FeatureVector>> {
    if history.len() < WINDOW_LEN {
        return Ok(None);
    }
    if history.len() > WINDOW_LEN {
        return Err(FeatureError::Dimension { expected: WINDOW_LEN, got: history.len() });
    }
    for w in history.windows(2) {
        if !(w[1].start_time > w[0].start_time) {
            return Err(FeatureError::Order(format!(
                "group at {} does not follow {}",
                w[1].start_time, w[0].start_time
            )));
        }
    }
    let values = history.iter().flat_map(|g| g.values()).collect();
    Ok(Some(FeatureVector {
        band,
        window_end_time: history[WINDOW_LEN - 1].end_time,
        values,
        normalized: false,
    }))
}

/// Ten-waterfall window advancing one waterfall per step.
#[derive(Debug, Clone)]
pub struct SlidingWindow {
    band: FrequencyRange,
    groups: VecDeque<FeatureGroup>,
}

impl SlidingWindow {
    pub fn new(band: FrequencyRange) -> Self {
        SlidingWindow { band, groups: VecDeque::with_capacity(WINDOW_LEN + 1) }
    }

    pub fn band(&self) -> FrequencyRange {
        self.band
    }

    pub fn push(&mut self, group: FeatureGroup) -> Result<Option<FeatureVector>> {
        if let Some(last) = self.groups.back() {
            if !(group.start_time > last.start_time) {
                return Err(FeatureError::Order(format!(
                    "waterfall at {} does not follow {}",
                    group.start_time, last.start_time
                )));
            }
        }
        self.groups.push_back(group);
        if self.groups.len() > WINDOW_LEN {
            self.groups.pop_front();
        }
        window_features(self.band, self.groups.make_contiguous())
    }

    pub fn reset(&mut self) {
        self.groups.clear();
    }
}

/// Feature windows for several slices of one waterfall stream.
#[derive(Debug, Clone)]
pub struct FeatureExtractor {
    windows: Vec<SlidingWindow>,
}

impl FeatureExtractor {
    pub fn new(bands: &[FrequencyRange]) -> Self {
        FeatureExtractor { windows: bands.iter().map(|b| SlidingWindow::new(*b)).collect() }
    }

    pub fn bands(&self) -> Vec<FrequencyRange> {
        self.windows.iter().map(|w| w.band()).collect()
    }

    /// One entry per configured band, `None` during warm-up.
    pub fn push(&mut self, w: &Waterfall) -> Result<Vec<Option<FeatureVector>>> {
        self.windows
            .iter_mut()
            .map(|win| {
                let slice = slice_waterfall(w, &win.band())?;
                win.push(FeatureGroup::from_slice(&slice)?)
            })
            .collect()
    }

    pub fn push_groups(&mut self, groups: &[FeatureGroup]) -> Result<Vec<Option<FeatureVector>>> {
        if groups.len() != self.windows.len() {
            return Err(FeatureError::Dimension { expected: self.windows.len(), got: groups.len() });
        }
        self.windows.iter_mut().zip(groups).map(|(win, g)| win.push(*g)).collect()
    }
}

/// Per-feature min-max normalization learned on training vectors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureScaler {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

impl FeatureScaler {
    pub fn fit<'a, I>(vectors: I) -> Result<FeatureScaler>
    where
        I: IntoIterator<Item = &'a [f64]>,
    {
        let mut it = vectors.into_iter();
        let first = it.next().ok_or_else(|| FeatureError::Scaler("fitting needs at least 2 vectors".into()))?;
        let (mut min, mut max) = (first.to_vec(), first.to_vec());
        let mut count = 1;
        for v in it {
            if v.len() != min.len() {
                return Err(FeatureError::Dimension { expected: min.len(), got: v.len() });
            }
            for ((lo, hi), x) in min.iter_mut().zip(max.iter_mut()).zip(v) {
                *lo = lo.min(*x);
                *hi = hi.max(*x);
            }
            count += 1;
        }
        if count < 2 {
            return Err(FeatureError::Scaler("fitting needs at least 2 vectors".into()));
        }
        Ok(FeatureScaler { min, max })
    }

    pub fn dim(&self) -> usize {
        self.min.len()
    }

    /// Maps into [0,1], clamping values outside the training range; a feature
    /// that never varied during training maps to 0.5.
    pub fn apply(&self, values: &[f64]) -> Result<Vec<f64>> {
        if values.len() != self.dim() {
            return Err(FeatureError::Dimension { expected: self.dim(), got: values.len() });
        }
        Ok(values
            .iter()
            .zip(self.min.iter().zip(&self.max))
            .map(|(&x, (&lo, &hi))| if hi > lo { ((x - lo) / (hi - lo)).clamp(0.0, 1.0) } else { 0.5 })
            .collect())
    }

    pub fn transform(&self, v: &FeatureVector) -> Result<FeatureVector> {
        if v.normalized {
            return Err(FeatureError::Scaler("vector is already normalized".into()));
        }
        Ok(FeatureVector { values: self.apply(&v.values)?, normalized: true, ..v.clone() })
    }

    pub fn validate(&self) -> Result<()> {
        if self.min.len() != self.max.len() || self.min.is_empty() {
            return Err(FeatureError::Scaler("min and max arrays differ in length".into()));
        }
        if self.min.iter().zip(&self.max).any(|(lo, hi)| !(hi >= lo)) {
            return Err(FeatureError::Scaler("max below min".into()));
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<FeatureScaler> {
        let s: FeatureScaler = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        s.validate()?;
        Ok(s)
    }
}

/// `band,window_end_unix,f0,…,f79`
pub fn write_features_csv<'a, W, I>(vectors: I, sink: W) -> Result<()>
where
    W: Write,
    I: IntoIterator<Item = &'a FeatureVector>,
{
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(sink);
    let mut header = vec!["band".to_string(), "window_end_unix".to_string()];
    header.extend((0..FEATURE_COUNT).map(|i| format!("f{i}")));
    w.write_record(&header)?;
    for v in vectors {
        let mut rec = Vec::with_capacity(v.values.len() + 2);
        rec.push(v.band.to_string());
        rec.push(v.window_end_time.to_string());
        rec.extend(v.values.iter().map(|x| x.to_string()));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_features_csv<R: Read>(source: R, normalized: bool) -> Result<Vec<FeatureVector>> {
    let mut r = csv::ReaderBuilder::new().has_headers(true).from_reader(source);
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        let bad = |reason: String| FeatureError::Parse { line, reason };
        if rec.len() != FEATURE_COUNT + 2 {
            return Err(bad(format!("{} fields, expected {}", rec.len(), FEATURE_COUNT + 2)));
        }
        let band: FrequencyRange = rec[0].parse().map_err(|e: SpectrumError| bad(e.to_string()))?;
        let window_end_time = rec[1].parse().map_err(|_| bad("bad timestamp".into()))?;
        let values = (2..rec.len())
            .map(|i| rec[i].parse::<f64>().map_err(|_| bad(format!("bad value {:?}", &rec[i]))))
            .collect::<Result<_>>()?;
        out.push(FeatureVector { band, window_end_time, values, normalized });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spectrum::ProbeConfig;
    use proptest::prelude::*;
    use std::sync::Arc;

    fn close(a: f64, b: f64) -> bool {
        (a - b).abs() <= 1e-12 * b.abs().max(1.0)
    }

    #[test]
    fn constant_slice() {
        let s = SliceStats::from_values(&[-63.5; 12]).unwrap();
        assert_eq!((s.max, s.min, s.mean, s.median, s.std), (-63.5, -63.5, -63.5, -63.5, 0.0));
        assert_eq!(s.sum, -63.5 * 12.0);
    }

    #[test]
    fn four_cells_by_hand() {
        let s = SliceStats::from_values(&[-50.0, -60.0, -70.0, -40.0]).unwrap();
        assert_eq!((s.max, s.min, s.mean, s.median, s.sum), (-40.0, -70.0, -55.0, -55.0, -220.0));
        // deviations 5, -5, -15, 15
        let oracle = ((25.0 + 25.0 + 225.0 + 225.0) / 4.0f64).sqrt();
        assert!(close(s.std, oracle));
        assert!((s.std - 11.1803).abs() < 1e-4);
    }

    #[test]
    fn empty_slice_is_an_error() {
        assert!(matches!(SliceStats::from_values(&[]), Err(FeatureError::EmptySlice)));
    }

    #[test]
    fn time_encoding_landmarks() {
        let day = 1_704_067_200.0;
        let at = |h: f64| encode_time(day + h * 3600.0);
        assert_eq!(at(0.0), TimeEncoding { sin: 0.0, cos: 1.0 });
        assert!((at(6.0).sin - 1.0).abs() < 1e-15 && at(6.0).cos.abs() < 1e-15);
        assert!((at(18.0).sin + 1.0).abs() < 1e-15 && at(18.0).cos.abs() < 1e-15);
    }

    fn group(t: f64, v: f64) -> FeatureGroup {
        let stats = SliceStats { max: v, min: v - 1.0, mean: v - 0.5, median: v - 0.5, std: 0.1, sum: v * 10.0 };
        FeatureGroup { stats, time: encode_time(t), start_time: t, end_time: t + 3.75 }
    }

    fn band() -> FrequencyRange {
        FrequencyRange::mhz(860, 870).unwrap()
    }

    #[test]
    fn identical_groups_repeat_in_order() {
        let g = group(0.0, -70.0);
        let mut hist: Vec<FeatureGroup> = (0..10).map(|i| FeatureGroup { start_time: i as f64, ..g }).collect();
        let v = window_features(band(), &hist).unwrap().unwrap();
        assert_eq!(v.values.len(), 80);
        for chunk in v.values.chunks(8) {
            assert_eq!(chunk, g.values());
        }
        hist.pop();
        assert!(window_features(band(), &hist).unwrap().is_none());
    }

    #[test]
    fn eleven_waterfalls_give_two_overlapping_vectors() {
        let mut win = SlidingWindow::new(band());
        let mut out = Vec::new();
        for i in 0..11 {
            if let Some(v) = win.push(group(i as f64 * 3.75, -80.0 + i as f64)).unwrap() {
                out.push(v);
            }
        }
        assert_eq!(out.len(), 2);
        let shared = out[0].values[8..].iter().zip(&out[1].values[..72]).filter(|(a, b)| a == b).count();
        assert_eq!(shared, 72);
        assert_eq!(out[1].window_end_time, 10.0 * 3.75 + 3.75);
    }

    #[test]
    fn window_rejects_time_regression() {
        let mut win = SlidingWindow::new(band());
        win.push(group(10.0, -80.0)).unwrap();
        assert!(matches!(win.push(group(10.0, -80.0)), Err(FeatureError::Order(_))));
    }

    #[test]
    fn scaler_rules() {
        let a = [-90.0, 5.0, 1.0];
        let b = [-30.0, 5.0, 3.0];
        let s = FeatureScaler::fit([&a[..], &b[..]]).unwrap();
        assert_eq!(s.apply(&[-60.0, 5.0, 2.0]).unwrap(), vec![0.5, 0.5, 0.5]);
        assert_eq!(s.apply(&[-95.0, 7.0, 9.0]).unwrap(), vec![0.0, 0.5, 1.0]);
        assert!(matches!(s.apply(&[1.0]), Err(FeatureError::Dimension { .. })));
        assert!(FeatureScaler::fit([&a[..]]).is_err());
        assert!(FeatureScaler::fit([&a[..], &a[..2]]).is_err());
    }

    #[test]
    fn scaler_json_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("scaler.json");
        let s = FeatureScaler { min: vec![-0.1, 1.0 / 3.0], max: vec![2.5, 1e-300] };
        s.save(&p).unwrap();
        assert!(FeatureScaler::load(&p).is_err(), "max < min must be rejected");
        let s = FeatureScaler { min: vec![-0.1, 1.0 / 3.0], max: vec![2.5, 0.7] };
        s.save(&p).unwrap();
        assert_eq!(FeatureScaler::load(&p).unwrap(), s);
    }

    #[test]
    fn features_csv_round_trip() {
        let mut win = SlidingWindow::new(band());
        let vs: Vec<FeatureVector> =
            (0..12).filter_map(|i| win.push(group(i as f64 * 3.75 + 0.1, -80.0 / 3.0 + i as f64)).unwrap()).collect();
        let mut buf = Vec::new();
        write_features_csv(&vs, &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("band,window_end_unix,f0,f1,"));
        assert!(text.lines().nth(1).unwrap().starts_with("860000-870000,"));
        assert_eq!(read_features_csv(buf.as_slice(), false).unwrap(), vs);
    }

    #[test]
    fn extractor_emits_first_vector_at_tenth_waterfall() {
        let cfg = Arc::new(ProbeConfig { sweeps_per_waterfall: 2, ..ProbeConfig::default() });
        let bands = [FrequencyRange::mhz(400, 500).unwrap(), band()];
        let mut ex = FeatureExtractor::new(&bands);
        for i in 0..13 {
            let data = (0..2 * cfg.total_bins()).map(|k| -90.0 + ((k * 7 + i) % 13) as f64).collect();
            let w = Waterfall::from_matrix(i as f64 * 0.075, cfg.clone(), data).unwrap();
            let out = ex.push(&w).unwrap();
            assert_eq!(out.len(), 2);
            assert_eq!(out[0].is_some(), i >= 9, "waterfall {i}");
            assert_eq!(out[1].is_some(), i >= 9);
        }
    }

    fn oracle(cells: &[f64]) -> [f64; 6] {
        let n = cells.len() as f64;
        let mut sorted = cells.to_vec();
        sorted.sort_by(f64::total_cmp);
        let median = if sorted.len() % 2 == 1 {
            sorted[sorted.len() / 2]
        } else {
            (sorted[sorted.len() / 2 - 1] + sorted[sorted.len() / 2]) / 2.0
        };
        let mut sum = 0.0;
        for c in cells {
            sum += c;
        }
        let mean = sum / n;
        let mut sq = 0.0;
        for c in cells {
            sq += (c - mean).powi(2);
        }
        [sorted[sorted.len() - 1], sorted[0], mean, median, (sq / n).sqrt(), sum]
    }

    proptest! {
        #[test]
        fn stats_match_exhaustive_scan(cells in prop::collection::vec(-120.0f64..0.0, 35)) {
            let got = SliceStats::from_values(&cells).unwrap().to_array();
            for (g, o) in got.iter().zip(oracle(&cells)) {
                prop_assert!(close(*g, o), "{} vs {}", g, o);
            }
        }

        #[test]
        fn stats_are_permutation_invariant(mut cells in prop::collection::vec(-120.0f64..0.0, 1..60), seed in any::<u64>()) {
            let a = SliceStats::from_values(&cells).unwrap();
            let n = cells.len();
            let mut x = seed;
            for i in (1..n).rev() {
                x = x.wrapping_mul(6364136223846793005).wrapping_add(1);
                cells.swap(i, (x >> 33) as usize % (i + 1));
            }
            let b = SliceStats::from_values(&cells).unwrap();
            prop_assert_eq!((a.max, a.min, a.median), (b.max, b.min, b.median));
            prop_assert!(close(a.mean, b.mean) && close(a.sum, b.sum) && (a.std - b.std).abs() < 1e-9);
        }

        #[test]
        fn shifting_cells_shifts_location_stats(cells in prop::collection::vec(-100.0f64..-20.0, 1..60), d in -30.0f64..30.0) {
            let a = SliceStats::from_values(&cells).unwrap();
            let shifted: Vec<f64> = cells.iter().map(|c| c + d).collect();
            let b = SliceStats::from_values(&shifted).unwrap();
            let n = cells.len() as f64;
            prop_assert!((b.max - a.max - d).abs() < 1e-9);
            prop_assert!((b.min - a.min - d).abs() < 1e-9);
            prop_assert!((b.mean - a.mean - d).abs() < 1e-9);
            prop_assert!((b.median - a.median - d).abs() < 1e-9);
            prop_assert!((b.std - a.std).abs() < 1e-9);
            prop_assert!((b.sum - a.sum - d * n).abs() < 1e-7);
        }

        #[test]
        fn stats_are_ordered(cells in prop::collection::vec(-120.0f64..0.0, 1..80)) {
            let s = SliceStats::from_values(&cells).unwrap();
            prop_assert!(s.min <= s.median && s.median <= s.max);
            prop_assert!(s.min <= s.mean && s.mean <= s.max);
            prop_assert!(s.std >= 0.0);
        }

        #[test]
        fn time_encoding_is_daily_and_on_the_circle(t in 0.0f64..4e9) {
            let a = encode_time(t);
            let b = encode_time(t + 86_400.0);
            prop_assert!((a.sin * a.sin + a.cos * a.cos - 1.0).abs() < 1e-12);
            prop_assert!((a.sin - b.sin).abs() < 1e-9 && (a.cos - b.cos).abs() < 1e-9);
        }

        #[test]
        fn stats_ignore_slice_shape(rows in 1usize..6, cols in 1usize..8, seed in any::<u64>()) {
            let mut x = seed;
            let cells: Vec<f64> = (0..rows * cols).map(|_| {
                x = x.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                -100.0 + (x >> 40) as f64 / 1e5
            }).collect();
            // same cells seen as rows×cols and as a single row
            let cfg = Arc::new(ProbeConfig {
                probe_id: "p".into(),
                ranges: vec![FrequencyRange::new(400_000, 400_000 + cols as u64 * 200).unwrap()],
                bin_width_khz: 200.0, sweep_interval_s: 1.0, sweeps_per_waterfall: rows,
            });
            let w = Waterfall::from_matrix(0.0, cfg.clone(), cells.clone()).unwrap();
            let s = slice_stats(&slice_waterfall(&w, &cfg.ranges[0]).unwrap()).unwrap();
            prop_assert_eq!(s, SliceStats::from_values(&cells).unwrap());
        }
    }
}
