//! Prediction traces: JSON-lines records of prediction sets stamped with
//! their offset into a session, for offline replay.

use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::inference::PredictionSet;

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("trace line {line}: {source}")]
    Parse { line: usize, source: serde_json::Error },
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    /// Seconds from the start of the session at which the prediction applies.
    pub offset_seconds: f64,
    pub prediction: PredictionSet,
}

/// Orders records by offset, then device and request id.
pub fn sort_trace(records: &mut [TraceRecord]) {
    records.sort_by(|a, b| {
        a.offset_seconds
            .total_cmp(&b.offset_seconds)
            .then_with(|| a.prediction.device_id.cmp(&b.prediction.device_id))
            .then_with(|| a.prediction.request_id.cmp(&b.prediction.request_id))
    });
}

pub fn write_trace(mut w: impl Write, records: &[TraceRecord]) -> Result<(), TraceError> {
    for r in records {
        serde_json::to_writer(&mut w, r).map_err(std::io::Error::other)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_trace(r: impl BufRead) -> Result<Vec<TraceRecord>, TraceError> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|source| TraceError::Parse { line: i + 1, source })?);
    }
    Ok(out)
}

pub fn save_trace(path: impl AsRef<Path>, records: &[TraceRecord]) -> Result<(), TraceError> {
    write_trace(std::io::BufWriter::new(std::fs::File::create(path)?), records)
}

pub fn load_trace(path: impl AsRef<Path>) -> Result<Vec<TraceRecord>, TraceError> {
    read_trace(std::io::BufReader::new(std::fs::File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::inference::RankedPair;

    fn rec(offset: f64, device: &str) -> TraceRecord {
        TraceRecord {
            offset_seconds: offset,
            prediction: PredictionSet {
                request_id: format!("{device}-{offset}"),
                device_id: device.into(),
                timestamp_utc: "2022-06-01T00:00:30.000Z".into(),
                ranked: vec![RankedPair { masker_id: "m".into(), gain: 0.1, mean: -1.0, log_std: -1.0 }],
            },
        }
    }

    #[test]
    fn roundtrip_and_order() {
        let mut recs = vec![rec(60.0, "b"), rec(30.0, "b"), rec(30.0, "a")];
        sort_trace(&mut recs);
        let order: Vec<_> = recs.iter().map(|r| (r.offset_seconds, r.prediction.device_id.as_str())).collect();
        assert_eq!(order, [(30.0, "a"), (30.0, "b"), (60.0, "b")]);
        let mut buf = Vec::new();
        write_trace(&mut buf, &recs).unwrap();
        assert_eq!(buf.iter().filter(|&&b| b == b'\n').count(), 3);
        assert_eq!(read_trace(&buf[..]).unwrap(), recs);
        assert!(matches!(read_trace(&b"{}\n"[..]), Err(TraceError::Parse { line: 1, .. })));
    }
}
