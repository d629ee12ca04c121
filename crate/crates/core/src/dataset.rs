//! In-memory dataset and its on-disk layout.
//!
//! A dataset directory holds three line-delimited JSON files, each starting
//! with a `{"schema_version":1,"kind":...}` header:
//!
//! * `bank.jsonl`: one [`Question`] per line
//! * `profiles.jsonl`: one [`StudentProfile`] per line (empty for logs)
//! * `trajectories.jsonl`: one [`Trajectory`] per line

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::jsonl;
use crate::sim::{Question, QuestionId, StudentId, StudentProfile, Trajectory};

pub const BANK_FILE: &str = "bank.jsonl";
pub const PROFILES_FILE: &str = "profiles.jsonl";
pub const TRAJECTORIES_FILE: &str = "trajectories.jsonl";

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub bank: Vec<Question>,
    /// Ground-truth profiles; only synthetic datasets have them.
    pub profiles: Vec<StudentProfile>,
    pub trajectories: Vec<Trajectory>,
}

impl Dataset {
    pub fn bank_index(&self) -> HashMap<QuestionId, &Question> {
        self.bank.iter().map(|q| (q.id, q)).collect()
    }

    pub fn profile(&self, id: StudentId) -> Option<&StudentProfile> {
        // synthetic profiles are stored by index
        match self.profiles.get(id.0 as usize) {
            Some(p) if p.id == id => Some(p),
            _ => self.profiles.iter().find(|p| p.id == id),
        }
    }

    pub fn trajectory(&self, id: StudentId, segment: u32) -> Option<&Trajectory> {
        self.trajectories
            .iter()
            .find(|t| t.student_id == id && t.segment == segment)
    }

    /// SHA-256 over the serialized files, used in run manifests.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        for q in &self.bank {
            h.update(serde_json::to_vec(q).expect("serializable"));
        }
        for p in &self.profiles {
            h.update(serde_json::to_vec(p).expect("serializable"));
        }
        for t in &self.trajectories {
            h.update(serde_json::to_vec(t).expect("serializable"));
        }
        hex(&h.finalize())
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn save_dataset(dataset: &Dataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    jsonl::write(&dir.join(BANK_FILE), "bank", &dataset.bank)?;
    jsonl::write(&dir.join(PROFILES_FILE), "profiles", &dataset.profiles)?;
    jsonl::write(&dir.join(TRAJECTORIES_FILE), "trajectories", &dataset.trajectories)
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let bank: Vec<Question> = jsonl::read(&dir.join(BANK_FILE), "bank")?;
    let profiles = jsonl::read(&dir.join(PROFILES_FILE), "profiles")?;
    let trajectories: Vec<Trajectory> = jsonl::read(&dir.join(TRAJECTORIES_FILE), "trajectories")?;
    let known: std::collections::HashSet<_> = bank.iter().map(|q| q.id).collect();
    for t in &trajectories {
        if let Some(i) = t.interactions.iter().find(|i| !known.contains(&i.question_id)) {
            return Err(Error::UnknownQuestion(i.question_id.0));
        }
    }
    Ok(Dataset {
        bank,
        profiles,
        trajectories,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::{generate_dataset, SimConfig};

    #[test]
    fn round_trip_single_student() {
        let cfg = SimConfig {
            n_students: 1,
            n_questions: 30,
            per_student: 10,
            ..SimConfig::default()
        };
        let d = generate_dataset(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&d, dir.path()).unwrap();
        assert_eq!(load_dataset(dir.path()).unwrap(), d);
    }

    #[test]
    fn unknown_schema_version() {
        let cfg = SimConfig {
            n_students: 1,
            n_questions: 5,
            per_student: 2,
            ..SimConfig::default()
        };
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&generate_dataset(&cfg).unwrap(), dir.path()).unwrap();
        let bank = dir.path().join(BANK_FILE);
        let text = fs::read_to_string(&bank).unwrap();
        fs::write(&bank, text.replacen("\"schema_version\":1", "\"schema_version\":99", 1)).unwrap();
        match load_dataset(dir.path()) {
            Err(Error::SchemaVersion { found: 99, expected: 1, .. }) => {}
            other => panic!("expected version error, got {other:?}"),
        }
    }
}
