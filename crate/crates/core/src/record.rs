//! Line-oriented records of a detection run.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hedge::Label;

/// One timestep of a detection run, as written to `stream.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamRecord {
    pub t: u64,
    pub z: Vec<f64>,
    pub h: Vec<f64>,
    pub filtering_loss: f64,
    /// `log p̂_t`; beliefs can be far below the smallest positive double.
    pub log_belief: f64,
    pub zeta: f64,
    pub tau: f64,
    pub y_hat: Label,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub feedback: Option<Label>,
    pub queried: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub true_loss: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub y_true: Option<Label>,
}

/// A line of detector input that could not be processed.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorRecord {
    /// 1-based input line number.
    pub line: u64,
    pub error: String,
}

/// Detector input: a noisy observation with optional feedback and ground truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputRecord {
    pub z: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub y: Option<Label>,
    /// Clean observation, when known.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub x: Option<Vec<f64>>,
}

impl InputRecord {
    pub fn parse(line: &str) -> Result<Self> {
        Ok(serde_json::from_str(line)?)
    }
}

/// Writes one JSON value per line.
pub fn write_jsonl<W: Write, T: Serialize>(mut w: W, value: &T) -> Result<()> {
    serde_json::to_writer(&mut w, value)?;
    w.write_all(b"\n")?;
    Ok(())
}

/// Reads `StreamRecord` lines, skipping blank ones.
pub fn read_records<R: BufRead>(r: R) -> Result<Vec<StreamRecord>> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|e| Error::InvalidObservation(format!("record on line {}: {e}", i + 1)))?,
        );
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn record_round_trip() {
        let r = StreamRecord {
            t: 3,
            z: vec![1.0, 0.0],
            h: vec![1.125, -0.125],
            filtering_loss: 1.5,
            log_belief: -1.5,
            zeta: -1.5,
            tau: 0.0,
            y_hat: Label::Anomalous,
            feedback: None,
            queried: false,
            true_loss: Some(1.2),
            y_true: Some(Label::Nominal),
        };
        let mut buf = Vec::new();
        write_jsonl(&mut buf, &r).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.ends_with('\n'));
        assert!(text.contains("\"y_hat\":1"));
        assert!(!text.contains("feedback"));
        assert_eq!(read_records(buf.as_slice()).unwrap(), vec![r]);
    }

    #[test]
    fn input_parsing() {
        let r = InputRecord::parse(r#"{"z":[1,0],"y":-1}"#).unwrap();
        assert_eq!(r.z, vec![1.0, 0.0]);
        assert_eq!(r.y, Some(Label::Nominal));
        assert!(InputRecord::parse(r#"{"z":[1],"y":0}"#).is_err());
        assert!(InputRecord::parse("not json").is_err());
    }
}
