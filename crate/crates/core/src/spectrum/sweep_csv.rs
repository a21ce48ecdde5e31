//! The `hackrf_sweep` text dialect.
//!
//! Each record is one FFT segment:
//!
//! ```text
//! date, time, hz_low, hz_high, hz_bin_width, num_samples, dB, dB, ...
//! 2024-05-31, 16:05:22.927896, 400000000, 401000000, 200000.00, 8192, -70.1, -69.8, -71.0, -70.5, -70.2
//! ```
//!
//! Adjacent records sharing a timestamp belong to the same sweep. Timestamps
//! are read as UTC.

use std::io::{Read, Write};
use std::sync::Arc;

use chrono::{DateTime, NaiveDate, NaiveTime};
use log::warn;

use super::{ProbeConfig, Result, SpectrumError, Sweep};

/// Iterator over the sweeps of a capture. Malformed records are skipped and
/// counted; configuration mismatches and regressing timestamps end the stream
/// with an error.
pub struct SweepCsvParser<R: Read> {
    records: csv::StringRecordsIntoIter<R>,
    config: Arc<ProbeConfig>,
    bins: Vec<usize>,
    current: Option<Pending>,
    last_time: Option<f64>,
    warnings: usize,
    deferred: Option<SpectrumError>,
    failed: bool,
}

struct Pending {
    key: (String, String),
    timestamp: f64,
    powers: Vec<Vec<f64>>,
}

pub fn parse_sweep_csv<R: Read>(source: R, config: Arc<ProbeConfig>) -> Result<SweepCsvParser<R>> {
    config.validate()?;
    let reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(source);
    Ok(SweepCsvParser {
        records: reader.into_records(),
        bins: config.bins_per_range(),
        config,
        current: None,
        last_time: None,
        warnings: 0,
        deferred: None,
        failed: false,
    })
}

enum Record {
    Segment { key: (String, String), timestamp: f64, hz_low: f64, bin_hz: f64, values: Vec<f64> },
    Malformed(String),
}

fn parse_timestamp(date: &str, time: &str) -> Option<f64> {
    let d = NaiveDate::parse_from_str(date, "%Y-%m-%d").ok()?;
    let t = NaiveTime::parse_from_str(time, "%H:%M:%S%.f").ok()?;
    let dt = d.and_time(t).and_utc();
    let micros = dt.timestamp() * 1_000_000 + i64::from(dt.timestamp_subsec_micros());
    Some(micros as f64 / 1e6)
}

fn parse_record(rec: &csv::StringRecord) -> Record {
    if rec.len() < 7 {
        return Record::Malformed(format!("{} fields, need at least 7", rec.len()));
    }
    let Some(timestamp) = parse_timestamp(&rec[0], &rec[1]) else {
        return Record::Malformed(format!("bad timestamp {:?} {:?}", &rec[0], &rec[1]));
    };
    let num = |i: usize| rec[i].parse::<f64>().ok().filter(|v| v.is_finite());
    let (Some(hz_low), Some(hz_high), Some(bin_hz)) = (num(2), num(3), num(4)) else {
        return Record::Malformed("bad frequency fields".into());
    };
    if bin_hz <= 0.0 || hz_high <= hz_low {
        return Record::Malformed("empty segment".into());
    }
    let values: Option<Vec<f64>> = (6..rec.len()).map(num).collect();
    let Some(values) = values else {
        return Record::Malformed("bad power value".into());
    };
    let expected = ((hz_high - hz_low) / bin_hz).round() as usize;
    if values.len() != expected {
        return Record::Malformed(format!("{} power values, segment holds {expected} bins", values.len()));
    }
    Record::Segment { key: (rec[0].to_string(), rec[1].to_string()), timestamp, hz_low, bin_hz, values }
}

impl<R: Read> SweepCsvParser<R> {
    /// Records skipped so far (malformed or incomplete sweeps).
    pub fn warnings(&self) -> usize {
        self.warnings
    }

    fn finish(&mut self, p: Pending) -> Option<Sweep> {
        if p.powers.iter().flatten().any(|v| v.is_nan()) {
            self.warnings += 1;
            warn!("dropping incomplete sweep at {}", p.timestamp);
            return None;
        }
        Some(Sweep { timestamp: p.timestamp, powers: p.powers })
    }

    fn blank(&self, key: (String, String), timestamp: f64) -> Pending {
        Pending { key, timestamp, powers: self.bins.iter().map(|&n| vec![f64::NAN; n]).collect() }
    }

    fn fail(&mut self, e: SpectrumError) -> Option<Result<Sweep>> {
        self.failed = true;
        Some(Err(e))
    }
}

impl<R: Read> Iterator for SweepCsvParser<R> {
    type Item = Result<Sweep>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.failed {
            return None;
        }
        if let Some(e) = self.deferred.take() {
            return self.fail(e);
        }
        loop {
            let rec = match self.records.next() {
                None => {
                    let p = self.current.take()?;
                    match self.finish(p) {
                        Some(s) => return Some(Ok(s)),
                        None => return None,
                    }
                }
                Some(Err(e)) => {
                    let line = e.position().map_or(0, |p| p.line());
                    if e.is_io_error() {
                        return self.fail(SpectrumError::Csv { line, reason: e.to_string() });
                    }
                    self.warnings += 1;
                    warn!("skipping unreadable sweep record at line {line}: {e}");
                    continue;
                }
                Some(Ok(r)) => r,
            };
            let line = rec.position().map_or(0, |p| p.line());
            if rec.iter().all(str::is_empty) {
                continue;
            }
            let (key, timestamp, hz_low, bin_hz, values) = match parse_record(&rec) {
                Record::Malformed(reason) => {
                    self.warnings += 1;
                    warn!("skipping malformed sweep record at line {line}: {reason}");
                    continue;
                }
                Record::Segment { key, timestamp, hz_low, bin_hz, values } => {
                    (key, timestamp, hz_low, bin_hz, values)
                }
            };
            let b = self.config.bin_width_khz;
            if ((bin_hz / 1000.0) - b).abs() > 1e-6 * b {
                return self.fail(SpectrumError::Csv {
                    line,
                    reason: format!("bin width {} KHz does not match configured {b} KHz", bin_hz / 1000.0),
                });
            }
            let mut emitted = None;
            let same = self.current.as_ref().is_some_and(|p| p.key == key);
            if !same {
                if let Some(prev) = self.last_time {
                    if timestamp <= prev {
                        let e = SpectrumError::Csv {
                            line,
                            reason: format!("timestamp {timestamp} does not follow {prev}"),
                        };
                        // the sweep before the glitch is complete; hand it out first
                        if let Some(s) = self.current.take().and_then(|p| self.finish(p)) {
                            self.deferred = Some(e);
                            return Some(Ok(s));
                        }
                        return self.fail(e);
                    }
                }
                self.last_time = Some(timestamp);
                if let Some(p) = self.current.take() {
                    emitted = self.finish(p);
                }
                self.current = Some(self.blank(key, timestamp));
            }
            let cfg = self.config.clone();
            let cur = self.current.as_mut().expect("pending sweep");
            for (j, v) in values.into_iter().enumerate() {
                let khz = (hz_low + j as f64 * bin_hz) / 1000.0;
                if let Some((i, k)) = cfg.locate(khz) {
                    cur.powers[i][k] = v;
                }
            }
            if let Some(s) = emitted {
                return Some(Ok(s));
            }
        }
    }
}

fn format_timestamp(t: f64) -> (String, String) {
    let micros = (t * 1e6).round() as i64;
    let dt = DateTime::from_timestamp(micros.div_euclid(1_000_000), (micros.rem_euclid(1_000_000) * 1000) as u32)
        .expect("timestamp in chrono range");
    (dt.format("%Y-%m-%d").to_string(), dt.format("%H:%M:%S%.6f").to_string())
}

/// Writes sweeps in the same dialect, one record per `segment_bins` bins.
/// Powers are printed in shortest round-trip form so parsing recovers them
/// exactly.
pub fn write_sweep_csv<'a, W, I>(sweeps: I, config: &ProbeConfig, segment_bins: usize, sink: &mut W) -> Result<()>
where
    W: Write,
    I: IntoIterator<Item = &'a Sweep>,
{
    let segment_bins = segment_bins.max(1);
    let bin_hz = config.bin_width_khz * 1000.0;
    for s in sweeps {
        s.check(config).map_err(|reason| SpectrumError::Csv { line: 0, reason })?;
        let (date, time) = format_timestamp(s.timestamp);
        for (range, powers) in config.ranges.iter().zip(&s.powers) {
            for (c, chunk) in powers.chunks(segment_bins).enumerate() {
                let lo = range.start_khz() as f64 * 1000.0 + (c * segment_bins) as f64 * bin_hz;
                let hi = lo + chunk.len() as f64 * bin_hz;
                write!(sink, "{date}, {time}, {lo}, {hi}, {bin_hz:.2}, 8192")?;
                for v in chunk {
                    write!(sink, ", {v}")?;
                }
                writeln!(sink)?;
            }
        }
    }
    Ok(())
}
