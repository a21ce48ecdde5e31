use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use super::attack::AttackSpec;
use super::SimError;
use crate::spectrum::FrequencyRange;

/// An attack placed at a fixed offset from the start of the simulation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlacedAttack {
    pub attack_id: u8,
    pub offset_s: f64,
}

/// When attacks happen.
///
/// Campaigns repeat back to back separated by `inter_campaign_gap_s`. Inside a
/// campaign, attack `j` of `attack_order` starts `j · intra_attack_gap_s` after
/// the campaign start; the tail of the campaign is legitimate traffic only.
/// `dos_attacks` are placed individually.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CampaignSchedule {
    pub campaign_count: usize,
    pub campaign_length_s: f64,
    pub inter_campaign_gap_s: f64,
    pub intra_attack_gap_s: f64,
    #[serde(default)]
    pub first_campaign_offset_s: f64,
    pub attack_order: Vec<u8>,
    #[serde(default)]
    pub dos_attacks: Vec<PlacedAttack>,
    /// Attack definitions referenced by id; defaults to the full catalog.
    #[serde(default = "AttackSpec::full_catalog")]
    pub attacks: Vec<AttackSpec>,
}

impl Default for CampaignSchedule {
    /// 20 campaigns of 3 h 40 min, 1 h apart, attacks 2-7 every 20 min; the two
    /// DoS attacks once each after the last campaign.
    fn default() -> Self {
        let campaign_length_s = 3.0 * 3600.0 + 40.0 * 60.0;
        let inter_campaign_gap_s = 3600.0;
        let after = 20.0 * (campaign_length_s + inter_campaign_gap_s);
        CampaignSchedule {
            campaign_count: 20,
            campaign_length_s,
            inter_campaign_gap_s,
            intra_attack_gap_s: 20.0 * 60.0,
            first_campaign_offset_s: 0.0,
            attack_order: vec![2, 3, 4, 5, 6, 7],
            dos_attacks: vec![
                PlacedAttack { attack_id: 1, offset_s: after },
                PlacedAttack { attack_id: 8, offset_s: after + 3600.0 },
            ],
            attacks: AttackSpec::full_catalog(),
        }
    }
}

/// A concrete attack occurrence.
#[derive(Debug, Clone, PartialEq)]
pub struct RealizedAttack {
    pub spec: AttackSpec,
    pub start: f64,
}

impl RealizedAttack {
    pub fn end(&self) -> f64 {
        self.start + self.spec.duration_s
    }
}

impl CampaignSchedule {
    /// No attacks at all.
    pub fn clean() -> Self {
        CampaignSchedule {
            campaign_count: 0,
            attack_order: Vec::new(),
            dos_attacks: Vec::new(),
            ..CampaignSchedule::default()
        }
    }

    /// A schedule holding only individually placed attacks.
    pub fn placed(attacks: Vec<PlacedAttack>) -> Self {
        CampaignSchedule { dos_attacks: attacks, ..CampaignSchedule::clean() }
    }

    pub fn spec(&self, id: u8) -> Result<&AttackSpec, SimError> {
        self.attacks
            .iter()
            .find(|a| a.attack_id == id)
            .ok_or(SimError::UnknownAttack(id))
    }

    /// Expands the schedule into time-ordered attack occurrences starting at
    /// `start_time`.
    pub fn realize(&self, start_time: f64) -> Result<Vec<RealizedAttack>, SimError> {
        for a in &self.attacks {
            a.validate()?;
        }
        let mut out = Vec::new();
        let period = self.campaign_length_s + self.inter_campaign_gap_s;
        for c in 0..self.campaign_count {
            let campaign_start = start_time + self.first_campaign_offset_s + c as f64 * period;
            for (j, &id) in self.attack_order.iter().enumerate() {
                let spec = self.spec(id)?.clone();
                let start = campaign_start + j as f64 * self.intra_attack_gap_s;
                if start + spec.duration_s > campaign_start + self.campaign_length_s + 1e-9 {
                    return Err(SimError::Schedule(format!(
                        "attack {id} at position {j} runs past the end of campaign {c}"
                    )));
                }
                out.push(RealizedAttack { spec, start });
            }
        }
        for p in &self.dos_attacks {
            let spec = self.spec(p.attack_id)?.clone();
            out.push(RealizedAttack { spec, start: start_time + p.offset_s });
        }
        out.sort_by(|a, b| a.start.total_cmp(&b.start));
        for w in out.windows(2) {
            if w[1].start < w[0].end() {
                return Err(SimError::Schedule(format!(
                    "attack {} at {} overlaps attack {} at {}",
                    w[1].spec.attack_id, w[1].start, w[0].spec.attack_id, w[0].start
                )));
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthEntry {
    pub attack_id: u8,
    /// Time the attack generator fired.
    pub start: f64,
    pub end: f64,
    pub band: FrequencyRange,
}

/// The attack intervals that actually happened, in time order.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthLog {
    pub entries: Vec<GroundTruthEntry>,
}

const TRUTH_HEADER: &str = "attack_id,start_unix,end_unix,band_start_khz,band_end_khz";

impl GroundTruthLog {
    pub fn from_realized(attacks: &[RealizedAttack]) -> Self {
        GroundTruthLog {
            entries: attacks
                .iter()
                .map(|a| GroundTruthEntry {
                    attack_id: a.spec.attack_id,
                    start: a.start,
                    end: a.end(),
                    band: a.spec.band,
                })
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Entries whose band overlaps `band`.
    pub fn overlapping(&self, band: &FrequencyRange) -> GroundTruthLog {
        GroundTruthLog { entries: self.entries.iter().filter(|e| e.band.overlaps(band)).copied().collect() }
    }

    pub fn with_attack(&self, attack_id: u8) -> GroundTruthLog {
        GroundTruthLog { entries: self.entries.iter().filter(|e| e.attack_id == attack_id).copied().collect() }
    }

    pub fn write_csv<W: Write>(&self, sink: W) -> Result<(), SimError> {
        let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(sink);
        w.write_record(TRUTH_HEADER.split(','))?;
        for e in &self.entries {
            w.write_record(&[
                e.attack_id.to_string(),
                e.start.to_string(),
                e.end.to_string(),
                e.band.start_khz().to_string(),
                e.band.end_khz().to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(source: R) -> Result<Self, SimError> {
        let mut r = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(source);
        let mut entries = Vec::new();
        for rec in r.records() {
            let rec = rec?;
            let bad = || SimError::Config(format!("malformed ground-truth record {rec:?}"));
            if rec.len() != 5 {
                return Err(bad());
            }
            let f = |i: usize| rec[i].parse::<f64>().map_err(|_| bad());
            let k = |i: usize| rec[i].parse::<u64>().map_err(|_| bad());
            entries.push(GroundTruthEntry {
                attack_id: rec[0].parse().map_err(|_| bad())?,
                start: f(1)?,
                end: f(2)?,
                band: FrequencyRange::new(k(3)?, k(4)?).map_err(|e| SimError::Config(e.to_string()))?,
            });
        }
        Ok(GroundTruthLog { entries })
    }
}
