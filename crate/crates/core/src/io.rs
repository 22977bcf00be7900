//! Trajectory serialization: CSV with header `vehicle_id,t,x,y` and a
//! JSON-lines mirror.
//!
//! Coordinates are canonicalized to 9 significant digits before writing, so
//! read-then-write round-trips are byte-exact in both formats.

use crate::types::VehicleId;
use serde::{Deserialize, Serialize};
use std::io::{BufRead, Write};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("io failure: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {reason}")]
    Malformed { line: usize, reason: String },
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

/// One trajectory sample: vehicle `vehicle_id` at sample index `t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub vehicle_id: VehicleId,
    pub t: u64,
    pub x: f64,
    pub y: f64,
}

/// Canonical 9-significant-digit rendering used in all numeric columns.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.8e}")
}

/// Rounds `v` to the double nearest its 9-significant-digit decimal form.
pub fn round_9sig(v: f64) -> f64 {
    fmt_f64(v).parse().expect("canonical float re-parses")
}

pub fn write_trajectory_csv<W: Write>(w: &mut W, records: &[TrajectoryRecord]) -> Result<(), IoError> {
    writeln!(w, "vehicle_id,t,x,y")?;
    for r in records {
        writeln!(w, "{},{},{},{}", r.vehicle_id, r.t, fmt_f64(r.x), fmt_f64(r.y))?;
    }
    Ok(())
}

pub fn read_trajectory_csv<R: BufRead>(r: R) -> Result<Vec<TrajectoryRecord>, IoError> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if i == 0 {
            if line.trim() != "vehicle_id,t,x,y" {
                return Err(IoError::Malformed {
                    line: 1,
                    reason: format!("unexpected header {line:?}"),
                });
            }
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let mut fields = line.split(',');
        let mut next = |name: &str| {
            fields.next().ok_or_else(|| IoError::Malformed {
                line: i + 1,
                reason: format!("missing field {name}"),
            })
        };
        let record = TrajectoryRecord {
            vehicle_id: parse_field(next("vehicle_id")?, i + 1)?,
            t: parse_field(next("t")?, i + 1)?,
            x: parse_field(next("x")?, i + 1)?,
            y: parse_field(next("y")?, i + 1)?,
        };
        out.push(record);
    }
    Ok(out)
}

fn parse_field<T: std::str::FromStr>(s: &str, line: usize) -> Result<T, IoError> {
    s.trim().parse().map_err(|_| IoError::Malformed {
        line,
        reason: format!("cannot parse {s:?}"),
    })
}

pub fn write_trajectory_jsonl<W: Write>(
    w: &mut W,
    records: &[TrajectoryRecord],
) -> Result<(), IoError> {
    for r in records {
        let canon = TrajectoryRecord {
            x: round_9sig(r.x),
            y: round_9sig(r.y),
            ..*r
        };
        serde_json::to_writer(&mut *w, &canon)?;
        writeln!(w)?;
    }
    Ok(())
}

pub fn read_trajectory_jsonl<R: BufRead>(r: R) -> Result<Vec<TrajectoryRecord>, IoError> {
    let mut out = Vec::new();
    for line in r.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_records(n: usize, seed: u64) -> Vec<TrajectoryRecord> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| TrajectoryRecord {
                vehicle_id: rng.gen_range(0..50),
                t: i as u64,
                x: rng.gen_range(-1e4..1e4),
                y: rng.gen_range(-1e4..1e4) * 10f64.powi(rng.gen_range(-6..6)),
            })
            .collect()
    }

    #[test]
    fn csv_round_trip_is_byte_exact() {
        let records = random_records(1000, 3);
        let mut buf = Vec::new();
        write_trajectory_csv(&mut buf, &records).unwrap();
        let parsed = read_trajectory_csv(buf.as_slice()).unwrap();
        let mut buf2 = Vec::new();
        write_trajectory_csv(&mut buf2, &parsed).unwrap();
        assert_eq!(buf, buf2);
    }

    #[test]
    fn jsonl_round_trip_is_byte_exact() {
        let records = random_records(1000, 4);
        let mut buf = Vec::new();
        write_trajectory_jsonl(&mut buf, &records).unwrap();
        let parsed = read_trajectory_jsonl(buf.as_slice()).unwrap();
        let mut buf2 = Vec::new();
        write_trajectory_jsonl(&mut buf2, &parsed).unwrap();
        assert_eq!(buf, buf2);
    }

    #[test]
    fn csv_and_jsonl_agree_after_canonicalization() {
        let records = random_records(200, 5);
        let mut csv = Vec::new();
        write_trajectory_csv(&mut csv, &records).unwrap();
        let mut jsonl = Vec::new();
        write_trajectory_jsonl(&mut jsonl, &records).unwrap();
        let from_csv = read_trajectory_csv(csv.as_slice()).unwrap();
        let from_jsonl = read_trajectory_jsonl(jsonl.as_slice()).unwrap();
        assert_eq!(from_csv, from_jsonl);
    }

    #[test]
    fn malformed_line_is_reported() {
        let text = "vehicle_id,t,x,y\n1,2,notafloat,4\n";
        let err = read_trajectory_csv(text.as_bytes()).unwrap_err();
        assert!(matches!(err, IoError::Malformed { line: 2, .. }));
    }
}
