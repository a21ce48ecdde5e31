//! Synthetic smart-home RF environment.
//!
//! Every sweep is a pure function of `(config, seed, sweep index)`: the noise
//! draws for sweep `j` come from ChaCha stream `j`, device burst jitter from a
//! hash of the device name and burst number. Any time segment can therefore be
//! regenerated on its own.

mod attack;
mod schedule;

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::spectrum::{FrequencyRange, ProbeConfig, SpectrumError, Sweep, Waterfall};

pub use attack::{attack_waveform, AttackEffect, AttackSpec, DosEffect, Intensity, ATTACK_IDS, WIFI_AP_GROUP};
pub use schedule::{CampaignSchedule, GroundTruthEntry, GroundTruthLog, PlacedAttack, RealizedAttack};

#[derive(Debug, thiserror::Error)]
pub enum SimError {
    #[error("unknown attack id {0}")]
    UnknownAttack(u8),
    #[error("simulation config: {0}")]
    Config(String),
    #[error("schedule: {0}")]
    Schedule(String),
    #[error(transparent)]
    Spectrum(#[from] SpectrumError),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// splitmix64 finalizer over a pair of words.
pub(crate) fn mix(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_mul(0x9E37_79B9_7F4A_7C15).rotate_left(17);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Maps a hash to [0, 1).
pub(crate) fn unit_interval(h: u64) -> f64 {
    (h >> 11) as f64 / (1u64 << 53) as f64
}

pub(crate) fn name_hash(name: &str) -> u64 {
    // FNV-1a
    name.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseModel {
    pub floor_mean_dbm: f64,
    pub floor_std_db: f64,
    pub rng_seed: u64,
}

impl Default for NoiseModel {
    fn default() -> Self {
        NoiseModel { floor_mean_dbm: -90.0, floor_std_db: 2.0, rng_seed: 0 }
    }
}

/// Seconds since midnight, `start_s` inclusive to `end_s` exclusive. A window
/// with `start_s > end_s` wraps past midnight.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DailyWindow {
    pub start_s: f64,
    pub end_s: f64,
}

impl DailyWindow {
    pub fn contains(&self, second_of_day: f64) -> bool {
        if self.start_s <= self.end_s {
            second_of_day >= self.start_s && second_of_day < self.end_s
        } else {
            second_of_day >= self.start_s || second_of_day < self.end_s
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum EmissionPattern {
    /// A burst of `burst_s` every `interval_s`.
    PeriodicBeacon { interval_s: f64, burst_s: f64 },
    /// On for `on_s`, off for `off_s`, repeating.
    DutyCycled { on_s: f64, off_s: f64 },
    /// Periodic bursts, but only inside the daily windows.
    Scheduled { windows: Vec<DailyWindow>, interval_s: f64, burst_s: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceProfile {
    pub name: String,
    pub center_freq_khz: u64,
    pub occupied_bandwidth_khz: u64,
    pub tx_power_dbm: f64,
    pub pattern: EmissionPattern,
    /// Each burst start is delayed by up to this fraction of the period.
    #[serde(default)]
    pub jitter_fraction: f64,
}

fn band_around(center_khz: u64, width_khz: u64) -> Result<FrequencyRange, SimError> {
    let half = width_khz / 2;
    if center_khz <= half {
        return Err(SimError::Config(format!("band of width {width_khz} KHz around {center_khz} KHz")));
    }
    Ok(FrequencyRange::new(center_khz - half, center_khz + width_khz - half)?)
}

fn second_of_day(t: f64) -> f64 {
    t.rem_euclid(86_400.0)
}

/// Whether some interval `[k·period + offset_k, … + len)` meets `[t, t + dwell)`.
fn periodic_overlap(t: f64, dwell: f64, period: f64, len: f64, offset: impl Fn(i64) -> f64, max_offset: f64) -> bool {
    let first = ((t - len - max_offset) / period).floor() as i64;
    let last = ((t + dwell) / period).floor() as i64;
    (first..=last).any(|k| {
        let s = k as f64 * period + offset(k);
        s < t + dwell && s + len > t
    })
}

impl DeviceProfile {
    pub fn band(&self) -> Result<FrequencyRange, SimError> {
        band_around(self.center_freq_khz, self.occupied_bandwidth_khz)
    }

    pub fn validate(&self, probe: &ProbeConfig, noise: &NoiseModel) -> Result<(), SimError> {
        let band = self.band()?;
        if probe.range_containing(&band).is_none() {
            return Err(SimError::Config(format!("device {} band {band} lies outside the probe ranges", self.name)));
        }
        if !(self.tx_power_dbm > noise.floor_mean_dbm) {
            return Err(SimError::Config(format!("device {} transmits below the noise floor", self.name)));
        }
        if !(0.0..1.0).contains(&self.jitter_fraction) {
            return Err(SimError::Config(format!("device {} jitter must lie in [0,1)", self.name)));
        }
        let ok = match &self.pattern {
            EmissionPattern::PeriodicBeacon { interval_s, burst_s }
            | EmissionPattern::Scheduled { interval_s, burst_s, .. } => {
                *interval_s > 0.0 && *burst_s > 0.0 && burst_s <= interval_s
            }
            EmissionPattern::DutyCycled { on_s, off_s } => *on_s > 0.0 && *off_s >= 0.0,
        };
        if !ok {
            return Err(SimError::Config(format!("device {} has an invalid emission pattern", self.name)));
        }
        Ok(())
    }

    /// Whether the device is on the air at some point of `[t, t + dwell)`.
    ///
    /// A sweep observes a burst if the burst overlaps the sweep's dwell time.
    pub fn is_active(&self, seed: u64, t: f64, dwell: f64) -> bool {
        let dev = mix(seed, name_hash(&self.name));
        let jitter = self.jitter_fraction;
        match &self.pattern {
            EmissionPattern::PeriodicBeacon { interval_s, burst_s } => {
                let off = |k: i64| jitter * interval_s * unit_interval(mix(dev, k as u64));
                periodic_overlap(t, dwell, *interval_s, *burst_s, off, jitter * interval_s)
            }
            EmissionPattern::DutyCycled { on_s, off_s } => {
                let period = on_s + off_s;
                let phase = unit_interval(dev) * period;
                periodic_overlap(t, dwell, period, *on_s, |_| phase, phase)
            }
            EmissionPattern::Scheduled { windows, interval_s, burst_s } => {
                let tod = second_of_day(t);
                windows.iter().any(|w| w.contains(tod)) && {
                    let off = |k: i64| jitter * interval_s * unit_interval(mix(dev, k as u64));
                    periodic_overlap(t, dwell, *interval_s, *burst_s, off, jitter * interval_s)
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Environment {
    pub probe: ProbeConfig,
    pub noise: NoiseModel,
    pub devices: Vec<DeviceProfile>,
}

fn periodic(interval_s: f64, burst_s: f64) -> EmissionPattern {
    EmissionPattern::PeriodicBeacon { interval_s, burst_s }
}

fn device(name: &str, center: u64, width: u64, power: f64, pattern: EmissionPattern, jitter: f64) -> DeviceProfile {
    DeviceProfile {
        name: name.into(),
        center_freq_khz: center,
        occupied_bandwidth_khz: width,
        tx_power_dbm: power,
        pattern,
        jitter_fraction: jitter,
    }
}

/// The deployed smart-home device classes on the default probe.
pub fn default_environment() -> Environment {
    let devices = vec![
        device("wifi-ap", 2_437_000, 20_000, -55.0, periodic(0.1024, 0.004), 0.05),
        device(
            "camera-sensor",
            2_437_000,
            20_000,
            -58.0,
            EmissionPattern::DutyCycled { on_s: 0.02, off_s: 0.06 },
            0.0,
        ),
        // hopping over the whole band, seen as a wideband low-duty emitter
        device("bt-flowerpot", 2_441_000, 78_000, -72.0, periodic(1.0, 0.01), 0.9),
        device("ble-scale", 2_402_000, 2_000, -70.0, periodic(0.5, 0.005), 0.2),
        device("zigbee-bulbs", 2_470_000, 2_000, -68.0, periodic(1.0, 0.01), 0.1),
        device(
            "hoover",
            2_437_000,
            20_000,
            -62.0,
            EmissionPattern::Scheduled {
                windows: vec![DailyWindow { start_s: 10.0 * 3600.0, end_s: 11.0 * 3600.0 }],
                interval_s: 0.05,
                burst_s: 0.01,
            },
            0.2,
        ),
        device("domotic-433", 433_920, 1_000, -60.0, periodic(30.0, 0.2), 0.1),
        device("ha-868", 868_300, 600, -62.0, periodic(5.0, 0.05), 0.1),
    ];
    Environment { probe: ProbeConfig::default(), noise: NoiseModel::default(), devices }
}

impl Environment {
    pub fn validate(&self) -> Result<(), SimError> {
        self.probe.validate()?;
        if !(self.noise.floor_std_db >= 0.0) || !self.noise.floor_mean_dbm.is_finite() {
            return Err(SimError::Config("noise floor std must be non-negative".into()));
        }
        for (i, d) in self.devices.iter().enumerate() {
            d.validate(&self.probe, &self.noise)?;
            if self.devices[..i].iter().any(|o| o.name == d.name) {
                return Err(SimError::Config(format!("duplicate device name {}", d.name)));
            }
        }
        Ok(())
    }
}

/// A complete simulation recipe, the JSON document accepted by `radiot simulate`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub environment: Environment,
    #[serde(default = "CampaignSchedule::clean")]
    pub schedule: CampaignSchedule,
    pub start_time: f64,
    pub duration_s: f64,
}

/// 2024-01-01T00:00:00Z
pub const DEFAULT_START_TIME: f64 = 1_704_067_200.0;

/// Column spans `[a, b)` of the concatenated sweep covered by `band`.
fn columns(probe: &ProbeConfig, band: &FrequencyRange) -> Vec<(usize, usize)> {
    let b = probe.bin_width_khz;
    let mut out = Vec::new();
    for (i, r) in probe.ranges.iter().enumerate() {
        if !r.overlaps(band) {
            continue;
        }
        let bins = probe.bins_per_range()[i];
        let lo = ((band.start_khz().max(r.start_khz()) - r.start_khz()) as f64 / b).ceil() as usize;
        let hi = (((band.end_khz().min(r.end_khz()) - r.start_khz()) as f64 / b).ceil() as usize).min(bins);
        if lo < hi {
            let off = probe.column_offset(i);
            out.push((off + lo, off + hi));
        }
    }
    out
}

#[derive(Debug, Clone)]
struct DeviceState {
    profile: DeviceProfile,
    home: Vec<(usize, usize)>,
}

/// Deterministic sweep generator for one scenario.
#[derive(Debug, Clone)]
pub struct Simulator {
    probe: Arc<ProbeConfig>,
    noise: NoiseModel,
    devices: Vec<DeviceState>,
    attacks: Vec<(RealizedAttack, Vec<(usize, usize)>)>,
    start_time: f64,
    sweep_count: usize,
    base_rng: ChaCha8Rng,
    truth: GroundTruthLog,
}

impl Simulator {
    pub fn new(
        env: &Environment,
        schedule: &CampaignSchedule,
        start_time: f64,
        duration_s: f64,
    ) -> Result<Self, SimError> {
        env.validate()?;
        if !(duration_s > 0.0) || !start_time.is_finite() {
            return Err(SimError::Config("duration must be positive".into()));
        }
        let probe = Arc::new(env.probe.clone());
        let realized = schedule.realize(start_time)?;
        let end = start_time + duration_s;
        let mut attacks = Vec::with_capacity(realized.len());
        for a in realized {
            if a.end() > end + 1e-9 {
                return Err(SimError::Schedule(format!(
                    "attack {} ends at {} after the simulated span ends at {end}",
                    a.spec.attack_id,
                    a.end()
                )));
            }
            if probe.range_containing(&a.spec.band).is_none() {
                return Err(SimError::Config(format!(
                    "attack {} band {} lies outside the probe ranges",
                    a.spec.attack_id, a.spec.band
                )));
            }
            if let Some(dos) = &a.spec.dos {
                for t in &dos.targets {
                    let Some(d) = env.devices.iter().find(|d| &d.name == t) else {
                        // an absent target is simply not silenced
                        continue;
                    };
                    if let Some(c) = dos.resume_center_khz {
                        let moved = band_around(c, d.occupied_bandwidth_khz)?;
                        if probe.range_containing(&moved).is_none() {
                            return Err(SimError::Config(format!("relocated band {moved} of {t} is unobserved")));
                        }
                    }
                }
            }
            let cols = columns(&probe, &a.spec.band);
            attacks.push((a, cols));
        }
        let truth = GroundTruthLog::from_realized(&attacks.iter().map(|(a, _)| a.clone()).collect::<Vec<_>>());
        let devices = env
            .devices
            .iter()
            .map(|d| Ok(DeviceState { home: columns(&probe, &d.band()?), profile: d.clone() }))
            .collect::<Result<_, SimError>>()?;
        let sweep_count = (duration_s / probe.sweep_interval_s + 1e-9).floor() as usize;
        Ok(Simulator {
            base_rng: ChaCha8Rng::seed_from_u64(env.noise.rng_seed),
            noise: env.noise,
            probe,
            devices,
            attacks,
            start_time,
            sweep_count,
            truth,
        })
    }

    pub fn from_scenario(s: &Scenario) -> Result<Self, SimError> {
        Simulator::new(&s.environment, &s.schedule, s.start_time, s.duration_s)
    }

    pub fn probe(&self) -> &Arc<ProbeConfig> {
        &self.probe
    }

    pub fn sweep_count(&self) -> usize {
        self.sweep_count
    }

    /// Complete waterfalls in the simulated span.
    pub fn waterfall_count(&self) -> usize {
        self.sweep_count / self.probe.sweeps_per_waterfall
    }

    pub fn truth(&self) -> &GroundTruthLog {
        &self.truth
    }

    pub fn sweep_time(&self, j: usize) -> f64 {
        self.start_time + j as f64 * self.probe.sweep_interval_s
    }

    /// Writes sweep `j` into `row` (length ΣL_i).
    pub fn fill_sweep(&self, j: usize, row: &mut [f64]) {
        debug_assert_eq!(row.len(), self.probe.total_bins());
        let t = self.sweep_time(j);
        let dwell = self.probe.sweep_interval_s;
        let mut rng = self.base_rng.clone();
        rng.set_stream(j as u64);
        rng.set_word_pos(0);
        let (mu, sd) = (self.noise.floor_mean_dbm, self.noise.floor_std_db);
        for v in row.iter_mut() {
            let z: f64 = rng.sample(StandardNormal);
            *v = mu + sd * z;
        }

        let mut silenced: &[String] = &[];
        let mut relocated: Option<(&[String], u64)> = None;
        let from = self.attacks.partition_point(|(a, _)| a.start <= t);
        for (a, cols) in self.attacks[..from].iter().rev().take(3) {
            let effect = attack_waveform(&a.spec, t - a.start, mu).expect("validated attack");
            if let Some((_, level)) = effect.emission {
                raise(row, cols, level);
            }
            if let Some(dos) = &a.spec.dos {
                if effect.targets_silenced {
                    silenced = &dos.targets;
                }
                if let Some(c) = effect.targets_relocated_khz {
                    relocated = Some((&dos.targets, c));
                }
            }
        }

        for d in &self.devices {
            let name = &d.profile.name;
            if silenced.contains(name) || !d.profile.is_active(self.noise.rng_seed, t, dwell) {
                continue;
            }
            match relocated {
                Some((targets, c)) if targets.contains(name) => {
                    let band = band_around(c, d.profile.occupied_bandwidth_khz).expect("validated relocation");
                    raise(row, &columns(&self.probe, &band), d.profile.tx_power_dbm);
                }
                _ => raise(row, &d.home, d.profile.tx_power_dbm),
            }
        }
    }

    pub fn sweep(&self, j: usize) -> Sweep {
        let mut row = vec![0.0; self.probe.total_bins()];
        self.fill_sweep(j, &mut row);
        let mut powers = Vec::with_capacity(self.probe.ranges.len());
        let mut at = 0;
        for n in self.probe.bins_per_range() {
            powers.push(row[at..at + n].to_vec());
            at += n;
        }
        Sweep { timestamp: self.sweep_time(j), powers }
    }

    /// Waterfall `i`, built from sweeps `i·N .. (i+1)·N`.
    pub fn waterfall(&self, i: usize) -> Waterfall {
        let n = self.probe.sweeps_per_waterfall;
        let cols = self.probe.total_bins();
        let mut data = vec![0.0; n * cols];
        for (l, row) in data.chunks_exact_mut(cols).enumerate() {
            self.fill_sweep(i * n + l, row);
        }
        Waterfall::from_matrix(self.sweep_time(i * n), self.probe.clone(), data).expect("consistent dimensions")
    }

    pub fn sweeps(&self) -> impl Iterator<Item = Sweep> + '_ {
        (0..self.sweep_count).map(|j| self.sweep(j))
    }

    pub fn waterfalls(&self) -> impl Iterator<Item = Waterfall> + '_ {
        (0..self.waterfall_count()).map(|i| self.waterfall(i))
    }
}

fn raise(row: &mut [f64], cols: &[(usize, usize)], level: f64) {
    for &(a, b) in cols {
        for v in &mut row[a..b] {
            if *v < level {
                *v = level;
            }
        }
    }
}

/// Owning sweep stream returned by [`simulate`].
#[derive(Debug, Clone)]
pub struct Simulation {
    sim: Simulator,
    next: usize,
}

impl Simulation {
    pub fn simulator(&self) -> &Simulator {
        &self.sim
    }
}

impl Iterator for Simulation {
    type Item = Sweep;

    fn next(&mut self) -> Option<Sweep> {
        if self.next >= self.sim.sweep_count {
            return None;
        }
        self.next += 1;
        Some(self.sim.sweep(self.next - 1))
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        let left = self.sim.sweep_count - self.next;
        (left, Some(left))
    }
}

/// Sweep stream plus the attacks realized inside `[start_time, start_time + duration_s)`.
pub fn simulate(
    env: &Environment,
    schedule: &CampaignSchedule,
    start_time: f64,
    duration_s: f64,
) -> Result<(Simulation, GroundTruthLog), SimError> {
    let sim = Simulator::new(env, schedule, start_time, duration_s)?;
    let truth = sim.truth().clone();
    Ok((Simulation { sim, next: 0 }, truth))
}
