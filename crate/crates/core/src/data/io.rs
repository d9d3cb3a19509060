//! JSON-lines journey logs and user profiles.
//!
//! Log lines: `{"user_id": str, "ts": int, "channel": int, "q": [f64], "gain": f64, "cost": f64}`
//! with an optional `"gains"` array for fusion rewards. Profile lines:
//! `{"user_id": str, "f": [f64]}`.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::{Journey, Observation};
use crate::error::{Error, Result};

/// Inputs with a larger share of malformed lines are rejected.
pub const MAX_MALFORMED_FRACTION: f64 = 0.01;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub user_id: String,
    pub ts: i64,
    pub channel: usize,
    pub q: Vec<f64>,
    pub gain: f64,
    pub cost: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gains: Option<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProfileRecord {
    pub user_id: String,
    pub f: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ParseStats {
    pub lines: usize,
    pub malformed: usize,
}

impl ParseStats {
    pub fn malformed_fraction(&self) -> f64 {
        if self.lines == 0 {
            0.0
        } else {
            self.malformed as f64 / self.lines as f64
        }
    }

    fn check(&self, what: &str) -> Result<()> {
        if self.malformed_fraction() > MAX_MALFORMED_FRACTION {
            return Err(Error::Data(format!(
                "{what}: {} of {} lines malformed (limit {:.0}%)",
                self.malformed,
                self.lines,
                MAX_MALFORMED_FRACTION * 100.0
            )));
        }
        Ok(())
    }
}

fn parse_lines<T: DeserializeOwned>(
    reader: impl BufRead,
    accept: impl Fn(&T) -> bool,
) -> Result<(Vec<T>, ParseStats)> {
    let mut stats = ParseStats::default();
    let mut out = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        stats.lines += 1;
        match serde_json::from_str::<T>(&line) {
            Ok(rec) if accept(&rec) => out.push(rec),
            Ok(_) => {
                log::debug!("line {}: record fails validation", lineno + 1);
                stats.malformed += 1;
            }
            Err(e) => {
                log::debug!("line {}: {e}", lineno + 1);
                stats.malformed += 1;
            }
        }
    }
    Ok((out, stats))
}

/// Parses a journey log, skipping (and counting) malformed lines.
pub fn parse_journey_log(reader: impl BufRead) -> Result<(Vec<LogRecord>, ParseStats)> {
    parse_lines(reader, |r: &LogRecord| {
        r.cost >= 0.0 && r.gain.is_finite() && r.q.iter().all(|v| v.is_finite())
    })
}

pub fn parse_profiles(reader: impl BufRead) -> Result<(Vec<ProfileRecord>, ParseStats)> {
    parse_lines(reader, |r: &ProfileRecord| r.f.iter().all(|v| v.is_finite()))
}

/// Groups records by user (sorted by id) and orders each journey by timestamp.
///
/// Users without a profile get empty static features.
pub fn journeys_from_records(records: Vec<LogRecord>, profiles: &[ProfileRecord]) -> Vec<Journey> {
    let profile_map: BTreeMap<&str, &Vec<f64>> =
        profiles.iter().map(|p| (p.user_id.as_str(), &p.f)).collect();
    let mut grouped: BTreeMap<String, Vec<Observation>> = BTreeMap::new();
    for r in records {
        grouped.entry(r.user_id).or_default().push(Observation {
            channel: r.channel,
            touch_features: r.q,
            gain: r.gain,
            cost: r.cost,
            timestamp: r.ts,
            gains: r.gains,
        });
    }
    grouped
        .into_iter()
        .map(|(user_id, mut observations)| {
            observations.sort_by_key(|o| o.timestamp);
            let static_features = profile_map
                .get(user_id.as_str())
                .map(|f| (*f).clone())
                .unwrap_or_default();
            Journey {
                user_id,
                static_features,
                observations,
            }
        })
        .collect()
}

/// Reads a journey log and optional profile file; fails if more than 1% of
/// either file is malformed.
pub fn read_journeys(log_path: &Path, profile_path: Option<&Path>) -> Result<(Vec<Journey>, ParseStats)> {
    let (records, stats) = parse_journey_log(BufReader::new(File::open(log_path)?))?;
    stats.check(&log_path.display().to_string())?;
    let profiles = match profile_path {
        Some(p) => {
            let (profiles, pstats) = parse_profiles(BufReader::new(File::open(p)?))?;
            pstats.check(&p.display().to_string())?;
            profiles
        }
        None => Vec::new(),
    };
    Ok((journeys_from_records(records, &profiles), stats))
}

pub fn write_journey_log(journeys: &[Journey], mut out: impl Write) -> Result<()> {
    for j in journeys {
        for o in &j.observations {
            let rec = LogRecord {
                user_id: j.user_id.clone(),
                ts: o.timestamp,
                channel: o.channel,
                q: o.touch_features.clone(),
                gain: o.gain,
                cost: o.cost,
                gains: o.gains.clone(),
            };
            serde_json::to_writer(&mut out, &rec)?;
            out.write_all(b"\n")?;
        }
    }
    Ok(())
}

pub fn write_profiles(journeys: &[Journey], mut out: impl Write) -> Result<()> {
    for j in journeys {
        let rec = ProfileRecord {
            user_id: j.user_id.clone(),
            f: j.static_features.clone(),
        };
        serde_json::to_writer(&mut out, &rec)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}
