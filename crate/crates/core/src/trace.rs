//! Ingestion data model: problems and multi-path reasoning traces.
//!
//! The on-disk format is line-delimited JSON, one problem per line:
//!
//! ```text
//! {"instance_id": "...", "question": "...", "gold_answer": "...",
//!  "paths": [{"path_id": "...", "steps": [{"text": "...", "confidence": 0.9,
//!             "answer": "...", "raw_progress": 0.5}]}]}
//! ```
//!
//! `gold_answer`, `answer` and `raw_progress` are optional and omitted when
//! absent, which keeps parse → serialize → parse a fixed point.

use serde::{Deserialize, Serialize};
use std::io::BufRead;

use crate::error::{Error, Result};

/// One intermediate hypothesis produced by an upstream sampler.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReasoningStep {
    pub text: String,
    pub confidence: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub answer: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub raw_progress: Option<f64>,
}

/// An ordered sequence of steps from a single sampled trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReasoningPath {
    pub path_id: String,
    pub steps: Vec<ReasoningStep>,
}

/// A question plus all sampled reasoning paths for it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProblemInstance {
    pub instance_id: String,
    pub question: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gold_answer: Option<String>,
    pub paths: Vec<ReasoningPath>,
}

impl ReasoningPath {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }
}

impl ProblemInstance {
    /// Checks every type invariant; errors name the offending field.
    pub fn validate(&self) -> Result<()> {
        if self.paths.is_empty() {
            return Err(Error::validation(
                format!("{}.paths", self.instance_id),
                "at least one path required",
            ));
        }
        let mut seen = std::collections::HashSet::new();
        for path in &self.paths {
            if !seen.insert(path.path_id.as_str()) {
                return Err(Error::validation(
                    format!("{}.paths[{}].path_id", self.instance_id, path.path_id),
                    "duplicate path_id",
                ));
            }
            if path.steps.is_empty() {
                return Err(Error::validation(
                    format!("{}.paths[{}].steps", self.instance_id, path.path_id),
                    "at least one step required",
                ));
            }
            for (idx, step) in path.steps.iter().enumerate() {
                let loc = format!(
                    "{}.paths[{}].steps[{}]",
                    self.instance_id,
                    path.path_id,
                    idx + 1
                );
                if !(0.0..=1.0).contains(&step.confidence) || !step.confidence.is_finite() {
                    return Err(Error::validation(
                        format!("{loc}.confidence"),
                        format!("must be in [0,1], got {}", step.confidence),
                    ));
                }
                if let Some(rp) = step.raw_progress {
                    if !(0.0..=1.0).contains(&rp) || !rp.is_finite() {
                        return Err(Error::validation(
                            format!("{loc}.raw_progress"),
                            format!("must be in [0,1], got {rp}"),
                        ));
                    }
                }
            }
        }
        Ok(())
    }
}

/// Progress of step `index` (1-based) along `path`.
///
/// Returns the step's `raw_progress` when the producer supplied one,
/// otherwise the positional default `index / len`.
pub fn effective_progress(path: &ReasoningPath, index: usize) -> Result<f64> {
    if index == 0 || index > path.steps.len() {
        return Err(Error::IndexOutOfRange {
            index,
            len: path.steps.len(),
        });
    }
    let step = &path.steps[index - 1];
    Ok(match step.raw_progress {
        Some(rp) => rp,
        None => index as f64 / path.steps.len() as f64,
    })
}

/// Parses line-delimited trace records, preserving file order.
///
/// Blank lines are skipped. Any malformed or invariant-violating record
/// aborts the parse with its 1-based line number.
pub fn parse_trace_reader<R: BufRead>(reader: R) -> Result<Vec<ProblemInstance>> {
    let mut out = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let instance: ProblemInstance =
            serde_json::from_str(&line).map_err(|e| Error::Parse {
                line: lineno + 1,
                msg: e.to_string(),
            })?;
        instance.validate().map_err(|e| match e {
            Error::Validation { field, msg } => Error::Validation {
                field: format!("line {}: {field}", lineno + 1),
                msg,
            },
            other => other,
        })?;
        out.push(instance);
    }
    Ok(out)
}

pub fn parse_trace_bytes(raw: &[u8]) -> Result<Vec<ProblemInstance>> {
    parse_trace_reader(std::io::BufReader::new(raw))
}

pub fn parse_trace_file(path: &std::path::Path) -> Result<Vec<ProblemInstance>> {
    let file = std::fs::File::open(path)?;
    parse_trace_reader(std::io::BufReader::new(file))
}

/// Serializes instances back to the line-delimited format.
///
/// Output is deterministic: serializing a parsed file twice yields
/// byte-identical text.
pub fn to_jsonl(instances: &[ProblemInstance]) -> Result<String> {
    let mut out = String::new();
    for instance in instances {
        out.push_str(&serde_json::to_string(instance)?);
        out.push('\n');
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn step(text: &str, confidence: f64) -> ReasoningStep {
        ReasoningStep {
            text: text.to_string(),
            confidence,
            answer: None,
            raw_progress: None,
        }
    }

    fn single_path_instance(n_steps: usize) -> ProblemInstance {
        ProblemInstance {
            instance_id: "i0".into(),
            question: "q".into(),
            gold_answer: None,
            paths: vec![ReasoningPath {
                path_id: "p0".into(),
                steps: (0..n_steps).map(|k| step(&format!("s{k}"), 0.5)).collect(),
            }],
        }
    }

    #[test]
    fn parse_single_record() {
        let raw = br#"{"instance_id":"a","question":"q","paths":[{"path_id":"p","steps":[{"text":"s1","confidence":0.5},{"text":"s2","confidence":0.5},{"text":"s3","confidence":0.9,"answer":"4"}]}]}"#;
        let parsed = parse_trace_bytes(raw).unwrap();
        assert_eq!(parsed.len(), 1);
        assert_eq!(parsed[0].paths.len(), 1);
        assert_eq!(parsed[0].paths[0].steps.len(), 3);
    }

    #[test]
    fn confidence_out_of_range_names_field() {
        let raw = br#"{"instance_id":"a","question":"q","paths":[{"path_id":"p","steps":[{"text":"s","confidence":1.3}]}]}"#;
        let err = parse_trace_bytes(raw).unwrap_err();
        match err {
            Error::Validation { field, .. } => assert!(field.contains("confidence"), "{field}"),
            other => panic!("expected validation error, got {other}"),
        }
    }

    #[test]
    fn malformed_record_reports_line() {
        let raw = b"{\"instance_id\":\"a\",\"question\":\"q\",\"paths\":[{\"path_id\":\"p\",\"steps\":[{\"text\":\"s\",\"confidence\":0.5}]}]}\nnot json\n";
        let err = parse_trace_bytes(raw).unwrap_err();
        match err {
            Error::Parse { line, .. } => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other}"),
        }
    }

    #[test]
    fn five_records_keep_order() {
        let instances: Vec<ProblemInstance> = (0..5)
            .map(|i| {
                let mut inst = single_path_instance(2);
                inst.instance_id = format!("i{i}");
                inst
            })
            .collect();
        let text = to_jsonl(&instances).unwrap();
        let back = parse_trace_bytes(text.as_bytes()).unwrap();
        assert_eq!(back, instances);
    }

    #[test]
    fn serialize_is_fixed_point() {
        let raw = br#"{"instance_id":"a","question":"q","gold_answer":"4","paths":[{"path_id":"p","steps":[{"text":"s","confidence":0.5,"raw_progress":0.25}]}]}"#;
        let first = parse_trace_bytes(raw).unwrap();
        let ser1 = to_jsonl(&first).unwrap();
        let second = parse_trace_bytes(ser1.as_bytes()).unwrap();
        let ser2 = to_jsonl(&second).unwrap();
        assert_eq!(ser1, ser2);
    }

    #[test]
    fn progress_positional_default() {
        let inst = single_path_instance(4);
        let path = &inst.paths[0];
        assert_eq!(effective_progress(path, 4).unwrap(), 1.0);
        assert_eq!(effective_progress(path, 1).unwrap(), 0.25);
    }

    #[test]
    fn progress_passthrough() {
        let mut inst = single_path_instance(4);
        inst.paths[0].steps[1].raw_progress = Some(0.7);
        assert_eq!(effective_progress(&inst.paths[0], 2).unwrap(), 0.7);
    }

    #[test]
    fn progress_out_of_range() {
        let inst = single_path_instance(2);
        assert!(effective_progress(&inst.paths[0], 0).is_err());
        assert!(effective_progress(&inst.paths[0], 3).is_err());
    }

    #[test]
    fn positional_progress_nondecreasing() {
        let inst = single_path_instance(7);
        let path = &inst.paths[0];
        let mut prev = 0.0;
        for j in 1..=7 {
            let p = effective_progress(path, j).unwrap();
            assert!(p >= prev);
            prev = p;
        }
    }
}
