//! Little-endian waterfall container.
//!
//! ```text
//! "RDIO"            4 bytes magic
//! version           u16
//! probe id length   u16, then that many UTF-8 bytes
//! start time        f64 Unix seconds
//! T                 f64 seconds
//! b                 f64 KHz
//! N                 u32
//! M                 u32
//! ranges            M × (f_start u64 KHz, f_end u64 KHz)
//! payload           N·ΣL_i f64, row-major
//! ```
//!
//! Records may be concatenated; [`WaterfallReader`] iterates them.

use std::io::{self, Read, Write};
use std::sync::Arc;

use super::{FrequencyRange, ProbeConfig, Result, SpectrumError, Waterfall};

pub const HEADER_MAGIC: &[u8; 4] = b"RDIO";
pub const FORMAT_VERSION: u16 = 1;

/// Writes one waterfall record and returns the number of bytes written.
pub fn write_waterfall<W: Write>(w: &Waterfall, sink: &mut W) -> Result<usize> {
    let cfg = w.config();
    let id = cfg.probe_id.as_bytes();
    let mut header = Vec::with_capacity(48 + id.len() + 16 * cfg.ranges.len());
    header.extend_from_slice(HEADER_MAGIC);
    header.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    header.extend_from_slice(&(id.len() as u16).to_le_bytes());
    header.extend_from_slice(id);
    header.extend_from_slice(&w.start_time().to_le_bytes());
    header.extend_from_slice(&cfg.sweep_interval_s.to_le_bytes());
    header.extend_from_slice(&cfg.bin_width_khz.to_le_bytes());
    header.extend_from_slice(&(cfg.sweeps_per_waterfall as u32).to_le_bytes());
    header.extend_from_slice(&(cfg.ranges.len() as u32).to_le_bytes());
    for r in &cfg.ranges {
        header.extend_from_slice(&r.start_khz().to_le_bytes());
        header.extend_from_slice(&r.end_khz().to_le_bytes());
    }
    sink.write_all(&header)?;
    let mut payload = Vec::with_capacity(w.data().len() * 8);
    for v in w.data() {
        payload.extend_from_slice(&v.to_le_bytes());
    }
    sink.write_all(&payload)?;
    Ok(header.len() + payload.len())
}

/// Reads exactly one waterfall record.
pub fn read_waterfall<R: Read>(source: &mut R) -> Result<Waterfall> {
    let mut magic = [0u8; 4];
    read_exact(source, &mut magic, "magic")?;
    read_after_magic(source, magic, None)
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => SpectrumError::Format(format!("truncated while reading {what}")),
        _ => SpectrumError::Io(e),
    })
}

fn u16_le<R: Read>(r: &mut R, what: &str) -> Result<u16> {
    let mut b = [0u8; 2];
    read_exact(r, &mut b, what)?;
    Ok(u16::from_le_bytes(b))
}

fn u32_le<R: Read>(r: &mut R, what: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b, what)?;
    Ok(u32::from_le_bytes(b))
}

fn u64_le<R: Read>(r: &mut R, what: &str) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b, what)?;
    Ok(u64::from_le_bytes(b))
}

fn f64_le<R: Read>(r: &mut R, what: &str) -> Result<f64> {
    Ok(f64::from_bits(u64_le(r, what)?))
}

fn read_after_magic<R: Read>(
    r: &mut R,
    magic: [u8; 4],
    cached: Option<&Arc<ProbeConfig>>,
) -> Result<Waterfall> {
    if &magic != HEADER_MAGIC {
        return Err(SpectrumError::Format(format!("bad magic {magic:?}")));
    }
    let version = u16_le(r, "version")?;
    if version != FORMAT_VERSION {
        return Err(SpectrumError::Format(format!(
            "unsupported format version {version}, expected {FORMAT_VERSION}"
        )));
    }
    let id_len = u16_le(r, "probe id length")? as usize;
    let mut id = vec![0u8; id_len];
    read_exact(r, &mut id, "probe id")?;
    let probe_id = String::from_utf8(id).map_err(|_| SpectrumError::Format("probe id is not UTF-8".into()))?;
    let start_time = f64_le(r, "start time")?;
    let sweep_interval_s = f64_le(r, "sweep interval")?;
    let bin_width_khz = f64_le(r, "bin width")?;
    let n = u32_le(r, "sweep count")? as usize;
    let m = u32_le(r, "range count")? as usize;
    if m == 0 || m > 4096 {
        return Err(SpectrumError::Format(format!("implausible range count {m}")));
    }
    let mut ranges = Vec::with_capacity(m);
    for _ in 0..m {
        let s = u64_le(r, "range start")?;
        let e = u64_le(r, "range end")?;
        ranges.push(FrequencyRange::new(s, e).map_err(|e| SpectrumError::Format(e.to_string()))?);
    }
    let config = ProbeConfig { probe_id, ranges, bin_width_khz, sweep_interval_s, sweeps_per_waterfall: n };
    config
        .validate()
        .map_err(|e| SpectrumError::Format(format!("inconsistent header: {e}")))?;
    let config = match cached {
        Some(c) if **c == config => c.clone(),
        _ => Arc::new(config),
    };
    let cells = n
        .checked_mul(config.total_bins())
        .filter(|c| *c <= (1 << 31))
        .ok_or_else(|| SpectrumError::Format("payload dimensions overflow".into()))?;
    let mut payload = vec![0u8; cells * 8];
    read_exact(r, &mut payload, "payload")?;
    let data = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    Waterfall::from_matrix(start_time, config, data).map_err(|e| SpectrumError::Format(e.to_string()))
}

/// Iterates concatenated waterfall records until a clean end of stream.
pub struct WaterfallReader<R> {
    inner: R,
    last_config: Option<Arc<ProbeConfig>>,
    done: bool,
}

impl<R: Read> WaterfallReader<R> {
    pub fn new(inner: R) -> Self {
        WaterfallReader { inner, last_config: None, done: false }
    }
}

impl<R: Read> Iterator for WaterfallReader<R> {
    type Item = Result<Waterfall>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.done {
            return None;
        }
        let mut magic = [0u8; 4];
        let mut got = 0;
        while got < 4 {
            match self.inner.read(&mut magic[got..]) {
                Ok(0) => break,
                Ok(k) => got += k,
                Err(e) if e.kind() == io::ErrorKind::Interrupted => continue,
                Err(e) => {
                    self.done = true;
                    return Some(Err(e.into()));
                }
            }
        }
        if got == 0 {
            self.done = true;
            return None;
        }
        if got < 4 {
            self.done = true;
            return Some(Err(SpectrumError::Format("truncated while reading magic".into())));
        }
        let res = read_after_magic(&mut self.inner, magic, self.last_config.as_ref());
        match &res {
            Ok(w) => self.last_config = Some(w.config().clone()),
            Err(_) => self.done = true,
        }
        Some(res)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample(n: usize) -> Waterfall {
        let cfg = Arc::new(ProbeConfig { sweeps_per_waterfall: n, ..ProbeConfig::default() });
        let data = (0..n * cfg.total_bins()).map(|i| -90.0 + (i % 97) as f64 * 0.37).collect();
        Waterfall::from_matrix(1_704_067_200.125, cfg, data).unwrap()
    }

    #[test]
    fn payload_size_matches_formula() {
        let w = sample(100);
        let mut buf = Vec::new();
        let written = write_waterfall(&w, &mut buf).unwrap();
        assert_eq!(written, buf.len());
        let header = 4 + 2 + 2 + w.probe_id().len() + 3 * 8 + 2 * 4 + 3 * 16;
        assert_eq!(buf.len() - header, 1_200_000);
    }

    #[test]
    fn round_trip() {
        let w = sample(3);
        let mut buf = Vec::new();
        write_waterfall(&w, &mut buf).unwrap();
        let back = read_waterfall(&mut buf.as_slice()).unwrap();
        assert_eq!(back, w);
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let w = sample(2);
        let mut buf = Vec::new();
        write_waterfall(&w, &mut buf).unwrap();
        buf.truncate(buf.len() - 3);
        assert!(matches!(read_waterfall(&mut buf.as_slice()), Err(SpectrumError::Format(_))));
        let mut it = WaterfallReader::new(buf.as_slice());
        assert!(it.next().unwrap().is_err());
        assert!(it.next().is_none());
    }

    #[test]
    fn header_errors() {
        let w = sample(1);
        let mut buf = Vec::new();
        write_waterfall(&w, &mut buf).unwrap();
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(read_waterfall(&mut bad.as_slice()).is_err());
        let mut bad = buf.clone();
        bad[4] = 9;
        assert!(read_waterfall(&mut bad.as_slice()).is_err());
        // N = 0 is inconsistent
        let id_len = w.probe_id().len();
        let n_at = 4 + 2 + 2 + id_len + 24;
        let mut bad = buf.clone();
        bad[n_at..n_at + 4].copy_from_slice(&0u32.to_le_bytes());
        assert!(matches!(read_waterfall(&mut bad.as_slice()), Err(SpectrumError::Format(_))));
    }

    #[test]
    fn reader_iterates_concatenated_records() {
        let a = sample(2);
        let b = sample(2);
        let mut buf = Vec::new();
        write_waterfall(&a, &mut buf).unwrap();
        write_waterfall(&b, &mut buf).unwrap();
        let all: Vec<_> = WaterfallReader::new(buf.as_slice()).collect::<Result<_>>().unwrap();
        assert_eq!(all, vec![a, b]);
        assert_eq!(WaterfallReader::new(&[][..]).count(), 0);
    }

    proptest! {
        #[test]
        fn random_waterfalls_round_trip(
            n in 1usize..4,
            widths in prop::collection::vec(1u64..20, 1..4),
            seed in any::<u64>(),
            id in "[a-z0-9-]{0,12}",
        ) {
            let mut ranges = Vec::new();
            let mut start = 100_000u64;
            for w in &widths {
                ranges.push(FrequencyRange::new(start, start + w * 200).unwrap());
                start += w * 200;
            }
            let cfg = Arc::new(ProbeConfig {
                probe_id: id, ranges, bin_width_khz: 200.0, sweep_interval_s: 0.05, sweeps_per_waterfall: n,
            });
            let mut x = seed;
            let data: Vec<f64> = (0..n * cfg.total_bins()).map(|_| {
                x = x.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                -120.0 + (x >> 11) as f64 / (1u64 << 53) as f64 * 100.0
            }).collect();
            let w = Waterfall::from_matrix(seed as f64 / 7.0, cfg.clone(), data).unwrap();
            let mut buf = Vec::new();
            let written = write_waterfall(&w, &mut buf).unwrap();
            prop_assert_eq!(written, buf.len());
            prop_assert!(buf.len() >= cfg.payload_bytes());
            let back = read_waterfall(&mut buf.as_slice()).unwrap();
            prop_assert_eq!(back.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                            w.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>());
            prop_assert_eq!(back, w);
        }
    }
}
