//! Timestamped READ/YIELD event logs.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Result, StarError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum EventKind {
    Read,
    Yield,
    Flush,
    Eos,
}

/// One streaming event. `step` counts frames read so far (wall time in
/// frame units); `index` is the frame index for READ, the token id for
/// YIELD, the flushed buffer length for FLUSH, and total reads for EOS.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StreamEvent {
    pub kind: EventKind,
    pub index: u64,
    pub step: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct TraceLog {
    pub events: Vec<StreamEvent>,
}

impl TraceLog {
    pub fn push(&mut self, kind: EventKind, index: u64, step: u64) {
        self.events.push(StreamEvent { kind, index, step });
    }

    pub fn reads(&self) -> usize {
        self.events.iter().filter(|e| e.kind == EventKind::Read).count()
    }

    pub fn yields(&self) -> usize {
        self.events.iter().filter(|e| e.kind == EventKind::Yield).count()
    }

    /// Frames elapsed at each token emission.
    pub fn yield_delays(&self) -> Vec<f64> {
        self.events
            .iter()
            .filter(|e| e.kind == EventKind::Yield)
            .map(|e| e.step as f64)
            .collect()
    }

    pub fn to_json_lines(&self) -> String {
        let mut out = String::new();
        for e in &self.events {
            out.push_str(&serde_json::to_string(e).expect("event serializes"));
            out.push('\n');
        }
        out
    }

    pub fn write_json_lines(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(self.to_json_lines().as_bytes())?;
        Ok(())
    }

    pub fn from_json_lines(text: &str) -> Result<TraceLog> {
        let mut events = Vec::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            events.push(
                serde_json::from_str(line)
                    .map_err(|e| StarError::Format(format!("bad trace line: {e}")))?,
            );
        }
        Ok(TraceLog { events })
    }

    /// Differentiable average lagging computed from the trace alone: the
    /// hypothesis length is the yield count and the minimum delay is
    /// total reads over that count.
    pub fn dal(&self) -> Result<f64> {
        let delays = self.yield_delays();
        if delays.is_empty() {
            return Err(StarError::InvalidArgument("trace has no yields".into()));
        }
        let min_delay = self.reads() as f64 / delays.len() as f64;
        Ok(crate::metrics::dal_from_delays(&delays, min_delay))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn json_round_trip() {
        let mut t = TraceLog::default();
        t.push(EventKind::Read, 0, 1);
        t.push(EventKind::Yield, 42, 1);
        t.push(EventKind::Flush, 0, 1);
        t.push(EventKind::Eos, 1, 1);
        let text = t.to_json_lines();
        assert!(text.contains("\"READ\""));
        let back = TraceLog::from_json_lines(&text).unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn trace_dal_matches_metric() {
        // uniform segments of 2 frames, token at each segment end
        let mut t = TraceLog::default();
        let mut step = 0;
        for seg in 0..3u64 {
            for f in 0..2u64 {
                step += 1;
                t.push(EventKind::Read, seg * 2 + f, step);
            }
            t.push(EventKind::Yield, 7, step);
        }
        let d = t.dal().unwrap();
        assert!((d - 2.0).abs() < 1e-12);
    }
}
