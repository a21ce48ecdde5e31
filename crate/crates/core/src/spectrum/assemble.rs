use std::sync::Arc;

use super::{ProbeConfig, Result, SpectrumError, Sweep, Waterfall};

/// Largest accepted deviation of a sweep spacing from `T`, as a fraction of `T`.
pub const DEFAULT_TIMING_TOLERANCE: f64 = 0.5;

/// Stacks exactly `N` sweeps into a waterfall.
pub fn assemble_waterfall(sweeps: &[Sweep], config: Arc<ProbeConfig>) -> Result<Waterfall> {
    config.validate()?;
    let n = config.sweeps_per_waterfall;
    if sweeps.len() != n {
        return Err(SpectrumError::Assembly {
            index: sweeps.len().min(n),
            reason: format!("got {} sweeps, a waterfall needs {n}", sweeps.len()),
        });
    }
    let mut asm = WaterfallAssembler::new(config)?;
    let mut out = None;
    for s in sweeps {
        out = asm.push(s.clone())?;
    }
    Ok(out.expect("N sweeps complete one waterfall"))
}

/// Streaming assembler: feed sweeps, receive a waterfall every `N` sweeps.
///
/// Waterfalls are back-to-back and never overlap. Sweeps must arrive strictly
/// time ordered and spaced `T` apart within the timing tolerance.
#[derive(Debug)]
pub struct WaterfallAssembler {
    config: Arc<ProbeConfig>,
    total_bins: usize,
    tolerance: f64,
    rows: Vec<f64>,
    first_time: f64,
    last_time: Option<f64>,
    filled: usize,
    seen: usize,
}

impl WaterfallAssembler {
    pub fn new(config: Arc<ProbeConfig>) -> Result<Self> {
        config.validate()?;
        let total_bins = config.total_bins();
        Ok(WaterfallAssembler {
            rows: Vec::with_capacity(total_bins * config.sweeps_per_waterfall),
            config,
            total_bins,
            tolerance: DEFAULT_TIMING_TOLERANCE,
            first_time: 0.0,
            last_time: None,
            filled: 0,
            seen: 0,
        })
    }

    pub fn with_timing_tolerance(mut self, fraction: f64) -> Self {
        self.tolerance = fraction;
        self
    }

    pub fn config(&self) -> &Arc<ProbeConfig> {
        &self.config
    }

    /// Sweeps accumulated towards the next waterfall.
    pub fn pending(&self) -> usize {
        self.filled
    }

    pub fn push(&mut self, sweep: Sweep) -> Result<Option<Waterfall>> {
        let index = self.seen;
        self.seen += 1;
        sweep
            .check(&self.config)
            .map_err(|reason| SpectrumError::Assembly { index, reason })?;
        if let Some(prev) = self.last_time {
            let dt = sweep.timestamp - prev;
            if dt <= 0.0 {
                return Err(SpectrumError::Assembly {
                    index,
                    reason: format!("timestamp {} does not follow {prev}", sweep.timestamp),
                });
            }
            let t = self.config.sweep_interval_s;
            if (dt - t).abs() > self.tolerance * t {
                return Err(SpectrumError::Assembly {
                    index,
                    reason: format!("sweep spacing {dt:.6} s deviates from T = {t} s"),
                });
            }
        }
        self.last_time = Some(sweep.timestamp);
        if self.filled == 0 {
            self.first_time = sweep.timestamp;
        }
        for p in &sweep.powers {
            self.rows.extend_from_slice(p);
        }
        self.filled += 1;
        if self.filled < self.config.sweeps_per_waterfall {
            return Ok(None);
        }
        self.filled = 0;
        let data = std::mem::replace(
            &mut self.rows,
            Vec::with_capacity(self.total_bins * self.config.sweeps_per_waterfall),
        );
        Waterfall::from_matrix(self.first_time, self.config.clone(), data).map(Some)
    }
}
