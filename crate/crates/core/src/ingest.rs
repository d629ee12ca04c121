//! Interaction-log ingestion and single-session filtering.
//!
//! Input is comma-separated with a header row containing at least these
//! columns (any order, extra columns ignored):
//!
//! ```text
//! student_id,question_id,question_text,answer_given,correct,timestamp,response_time
//! ```
//!
//! `correct` accepts `true/false` or `1/0`; `timestamp` and `response_time`
//! are seconds.

use std::collections::BTreeMap;
use std::io::Read;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::sim::{Interaction, Question, QuestionId, StudentId, Trajectory};

pub const COLUMNS: [&str; 7] = [
    "student_id",
    "question_id",
    "question_text",
    "answer_given",
    "correct",
    "timestamp",
    "response_time",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawRecord {
    pub student_id: StudentId,
    pub question_id: QuestionId,
    pub question_text: String,
    pub answer_given: i64,
    pub correct: bool,
    pub timestamp: f64,
    pub response_time: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SessionFilterConfig {
    pub min_response_time: f64,
    pub max_gap: f64,
    pub min_length: usize,
}

impl Default for SessionFilterConfig {
    fn default() -> Self {
        SessionFilterConfig {
            min_response_time: 5.0,
            max_gap: 180.0,
            min_length: 40,
        }
    }
}

impl SessionFilterConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.min_response_time >= 0.0 && self.max_gap >= 0.0) || self.min_length == 0 {
            return Err(Error::Config(format!(
                "session filter thresholds must be non-negative with min_length >= 1: {self:?}"
            )));
        }
        Ok(())
    }
}

pub fn parse_records<R: Read>(input: R) -> Result<Vec<RawRecord>> {
    let source = PathBuf::from("<records>");
    let err = |line: usize, message: String| Error::Parse {
        path: source.clone(),
        line,
        message,
    };
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .flexible(true)
        .from_reader(input);
    let mut rows = reader.records();
    let header = match rows.next() {
        None => return Ok(Vec::new()),
        Some(h) => h.map_err(|e| err(1, e.to_string()))?,
    };
    let mut cols = [0usize; COLUMNS.len()];
    for (slot, name) in cols.iter_mut().zip(COLUMNS) {
        *slot = header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| err(1, format!("missing required column '{name}'")))?;
    }
    let mut out = Vec::new();
    for row in rows {
        let row = row.map_err(|e| err(e.position().map_or(0, |p| p.line() as usize), e.to_string()))?;
        let line = row.position().map_or(0, |p| p.line() as usize);
        let field = |i: usize| {
            row.get(cols[i])
                .ok_or_else(|| err(line, format!("missing value for '{}'", COLUMNS[i])))
        };
        let int = |i: usize| -> Result<i64> {
            let v = field(i)?;
            v.parse()
                .map_err(|_| err(line, format!("'{}' is not an integer: {v:?}", COLUMNS[i])))
        };
        let secs = |i: usize| -> Result<f64> {
            let v = field(i)?;
            v.parse::<f64>()
                .ok()
                .filter(|x| x.is_finite())
                .ok_or_else(|| err(line, format!("unparseable {}: {v:?}", COLUMNS[i])))
        };
        let correct = match field(4)?.to_ascii_lowercase().as_str() {
            "1" | "true" => true,
            "0" | "false" => false,
            other => return Err(err(line, format!("'correct' must be a boolean, got {other:?}"))),
        };
        let response_time = secs(6)?;
        if response_time < 0.0 {
            return Err(err(line, format!("negative response_time {response_time}")));
        }
        out.push(RawRecord {
            student_id: StudentId(non_negative(int(0)?, line, "student_id", &err)?),
            question_id: QuestionId(non_negative(int(1)?, line, "question_id", &err)?),
            question_text: field(2)?.to_string(),
            answer_given: int(3)?,
            correct,
            timestamp: secs(5)?,
            response_time,
        });
    }
    Ok(out)
}

fn non_negative(v: i64, line: usize, name: &str, err: &dyn Fn(usize, String) -> Error) -> Result<u64> {
    u64::try_from(v).map_err(|_| err(line, format!("{name} must be non-negative")))
}

/// Splits each student's log into sessions and keeps the long ones.
///
/// Per student: stable-sort by timestamp, drop answers faster than
/// `min_response_time`, split wherever consecutive timestamps differ by more
/// than `max_gap`, keep segments with at least `min_length` answers.
pub fn filter_single_session(records: &[RawRecord], config: &SessionFilterConfig) -> Vec<Trajectory> {
    let mut by_student: BTreeMap<StudentId, Vec<&RawRecord>> = BTreeMap::new();
    for r in records {
        by_student.entry(r.student_id).or_default().push(r);
    }
    let mut out = Vec::new();
    for (student, mut rs) in by_student {
        rs.sort_by(|a, b| a.timestamp.total_cmp(&b.timestamp));
        let kept: Vec<&RawRecord> = rs
            .into_iter()
            .filter(|r| r.response_time >= config.min_response_time)
            .collect();
        let mut segment = 0u32;
        let mut start = 0;
        for end in 1..=kept.len() {
            let split = end == kept.len() || kept[end].timestamp - kept[end - 1].timestamp > config.max_gap;
            if !split {
                continue;
            }
            if end - start >= config.min_length {
                out.push(Trajectory {
                    student_id: student,
                    segment,
                    interactions: kept[start..end].iter().map(|r| to_interaction(r)).collect(),
                });
                segment += 1;
            }
            start = end;
        }
    }
    out
}

fn to_interaction(r: &RawRecord) -> Interaction {
    Interaction {
        question_id: r.question_id,
        given_answer: r.answer_given,
        correct: r.correct,
        timestamp: Some(r.timestamp),
        response_time: Some(r.response_time),
    }
}

/// Builds a dataset (bank + trajectories, no profiles) from filtered logs.
/// Question construct tags are unknown for logs and left empty.
pub fn dataset_from_records(records: &[RawRecord], trajectories: Vec<Trajectory>) -> Dataset {
    let mut bank: BTreeMap<QuestionId, Question> = BTreeMap::new();
    for r in records {
        bank.entry(r.question_id).or_insert_with(|| Question {
            id: r.question_id,
            text: r.question_text.clone(),
            construct: String::new(),
            op: None,
            lhs: None,
            rhs: None,
        });
    }
    Dataset {
        bank: bank.into_values().collect(),
        profiles: Vec::new(),
        trajectories,
    }
}
