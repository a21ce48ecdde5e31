use serde::{Deserialize, Serialize};

use super::{mix, unit_interval, SimError};
use crate::spectrum::FrequencyRange;

/// Attack signal strength relative to the environment noise floor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Intensity {
    Low,
    Normal,
    High,
}

impl Intensity {
    /// dB above the noise floor mean.
    pub fn offset_db(self) -> f64 {
        match self {
            Intensity::High => 45.0,
            Intensity::Normal => 25.0,
            Intensity::Low => 10.0,
        }
    }

    pub fn level_dbm(self, floor_mean_dbm: f64) -> f64 {
        floor_mean_dbm + self.offset_db()
    }
}

/// Denial-of-service behaviour: a burst, then the targets go silent until the
/// attack ends, then they come back (possibly on another channel) for an
/// aftermath period before returning home.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DosEffect {
    pub burst_s: f64,
    /// Device profile names silenced by the attack.
    pub targets: Vec<String>,
    /// Centre frequency the targets use during the aftermath.
    pub resume_center_khz: Option<u64>,
    pub aftermath_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackSpec {
    pub attack_id: u8,
    pub protocol: String,
    pub kind: String,
    pub intensity: Intensity,
    pub duration_s: f64,
    pub band: FrequencyRange,
    /// Fraction of sweeps in which the attacker is on the air.
    #[serde(default = "one")]
    pub duty_cycle: f64,
    #[serde(default)]
    pub dos: Option<DosEffect>,
}

fn one() -> f64 {
    1.0
}

pub const ATTACK_IDS: std::ops::RangeInclusive<u8> = 1..=8;

fn band(center_khz: u64, width_khz: u64) -> FrequencyRange {
    FrequencyRange::new(center_khz - width_khz / 2, center_khz + width_khz / 2).expect("catalog band")
}

fn spec(id: u8, protocol: &str, kind: &str, intensity: Intensity, duration_s: f64, band: FrequencyRange) -> AttackSpec {
    AttackSpec {
        attack_id: id,
        protocol: protocol.into(),
        kind: kind.into(),
        intensity,
        duration_s,
        band,
        duty_cycle: 1.0,
        dos: None,
    }
}

/// Devices sharing the access point's channel; a WiFi DoS knocks them all off.
pub const WIFI_AP_GROUP: [&str; 3] = ["wifi-ap", "camera-sensor", "hoover"];

impl AttackSpec {
    /// The injected attack set, ids 1 to 8.
    pub fn catalog(id: u8) -> Result<AttackSpec, SimError> {
        use Intensity::*;
        let s = match id {
            1 => AttackSpec {
                dos: Some(DosEffect {
                    burst_s: 60.0,
                    targets: WIFI_AP_GROUP.iter().map(|s| s.to_string()).collect(),
                    resume_center_khz: Some(2_412_000),
                    aftermath_s: 240.0,
                }),
                ..spec(1, "WiFi", "DoS", High, 1200.0, band(2_430_000, 20_000))
            },
            2 => spec(2, "WiFi", "Deauthentification", Normal, 60.0, band(2_437_000, 20_000)),
            3 => spec(3, "WiFi", "Rogue AP", Normal, 240.0, band(2_412_000, 20_000)),
            4 => AttackSpec {
                duty_cycle: 0.1,
                ..spec(4, "BLE", "Man in the Middle", Normal, 240.0, FrequencyRange::mhz(2400, 2500)?)
            },
            5 => spec(5, "Zigbee", "Fake association", Normal, 60.0, band(2_470_000, 2_000)),
            6 => spec(6, "Zigbee", "Fake data send", Normal, 240.0, band(2_470_000, 2_000)),
            7 => spec(7, "868MHz", "Simulated", High, 60.0, band(868_000, 2_000)),
            8 => AttackSpec {
                dos: Some(DosEffect {
                    burst_s: 60.0,
                    targets: vec!["domotic-433".into()],
                    resume_center_khz: None,
                    aftermath_s: 0.0,
                }),
                ..spec(8, "433MHz", "DoS", High, 600.0, band(433_000, 2_000))
            },
            other => return Err(SimError::UnknownAttack(other)),
        };
        Ok(s)
    }

    pub fn full_catalog() -> Vec<AttackSpec> {
        ATTACK_IDS.map(|id| AttackSpec::catalog(id).expect("catalog id")).collect()
    }

    /// Span after `start` during which the attack influences the environment.
    pub fn influence_s(&self) -> f64 {
        self.duration_s + self.dos.as_ref().map_or(0.0, |d| d.aftermath_s)
    }

    pub fn validate(&self) -> Result<(), SimError> {
        if !ATTACK_IDS.contains(&self.attack_id) {
            return Err(SimError::UnknownAttack(self.attack_id));
        }
        if !(self.duration_s > 0.0) {
            return Err(SimError::Config(format!("attack {} needs a positive duration", self.attack_id)));
        }
        if !(0.0..=1.0).contains(&self.duty_cycle) {
            return Err(SimError::Config(format!("attack {} duty cycle outside [0,1]", self.attack_id)));
        }
        if let Some(d) = &self.dos {
            if d.burst_s < 0.0 || d.burst_s > self.duration_s || d.aftermath_s < 0.0 {
                return Err(SimError::Config(format!("attack {} DoS timing is inconsistent", self.attack_id)));
            }
        }
        Ok(())
    }
}

/// What an attack does to the environment at one instant.
#[derive(Debug, Clone, PartialEq)]
pub struct AttackEffect {
    /// Band and flat power level radiated by the attacker.
    pub emission: Option<(FrequencyRange, f64)>,
    /// DoS targets are off the air.
    pub targets_silenced: bool,
    /// DoS targets are on the air at this centre frequency instead of home.
    pub targets_relocated_khz: Option<u64>,
}

impl AttackEffect {
    pub const NONE: AttackEffect =
        AttackEffect { emission: None, targets_silenced: false, targets_relocated_khz: None };
}

/// Attack contribution at `t_rel` seconds after the attack started.
///
/// Outside `[0, duration + aftermath)` the attack has no effect.
pub fn attack_waveform(spec: &AttackSpec, t_rel: f64, floor_mean_dbm: f64) -> Result<AttackEffect, SimError> {
    spec.validate()?;
    if !(t_rel >= 0.0 && t_rel < spec.influence_s()) {
        return Ok(AttackEffect::NONE);
    }
    let level = spec.intensity.level_dbm(floor_mean_dbm);
    let on_air = spec.duty_cycle >= 1.0
        || unit_interval(mix(u64::from(spec.attack_id), t_rel.to_bits())) < spec.duty_cycle;
    let Some(dos) = &spec.dos else {
        return Ok(AttackEffect {
            emission: on_air.then_some((spec.band, level)),
            ..AttackEffect::NONE
        });
    };
    if t_rel < dos.burst_s {
        Ok(AttackEffect { emission: on_air.then_some((spec.band, level)), ..AttackEffect::NONE })
    } else if t_rel < spec.duration_s {
        Ok(AttackEffect { targets_silenced: true, ..AttackEffect::NONE })
    } else {
        Ok(AttackEffect { targets_relocated_khz: dos.resume_center_khz, ..AttackEffect::NONE })
    }
}
