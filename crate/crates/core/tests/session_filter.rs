use std::fs::File;
use std::path::PathBuf;

use lbm_core::ingest::{filter_single_session, parse_records, RawRecord, SessionFilterConfig};
use lbm_core::sim::{QuestionId, StudentId};
use proptest::prelude::*;

fn fixture(name: &str) -> Vec<RawRecord> {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/sessions").join(name);
    parse_records(File::open(path).unwrap()).unwrap()
}

#[test]
fn steady_session_survives_whole() {
    let records = fixture("steady_45.csv");
    let out = filter_single_session(&records, &SessionFilterConfig::default());
    assert_eq!(out.len(), 1);
    let t = &out[0];
    assert_eq!((t.student_id, t.segment), (StudentId(7), 0));
    let ids: Vec<u64> = t.interactions.iter().map(|i| i.question_id.0).collect();
    assert_eq!(ids, (100..145).collect::<Vec<_>>());
    assert_eq!(t.interactions.iter().filter(|i| !i.correct).count(), 12);
}

#[test]
fn long_gap_leaves_two_short_segments() {
    let records = fixture("gap_after_20.csv");
    assert_eq!(records.len(), 50);
    assert!(filter_single_session(&records, &SessionFilterConfig::default()).is_empty());
    // the cut is where expected: 20 then 30
    let loose = SessionFilterConfig {
        min_length: 20,
        ..SessionFilterConfig::default()
    };
    let lens: Vec<usize> = filter_single_session(&records, &loose).iter().map(|t| t.interactions.len()).collect();
    assert_eq!(lens, [20, 30]);
}

#[test]
fn fast_answer_is_dropped() {
    let records = fixture("one_fast_answer.csv");
    assert_eq!(records.len(), 1);
    let any_length = SessionFilterConfig {
        min_length: 1,
        ..SessionFilterConfig::default()
    };
    assert!(filter_single_session(&records, &any_length).is_empty());
}

#[test]
fn equal_timestamps_keep_input_order() {
    let rec = |q: u64| RawRecord {
        student_id: StudentId(1),
        question_id: QuestionId(q),
        question_text: format!("q{q}"),
        answer_given: 0,
        correct: true,
        timestamp: 10.0,
        response_time: 6.0,
    };
    let cfg = SessionFilterConfig {
        min_length: 1,
        ..SessionFilterConfig::default()
    };
    let out = filter_single_session(&[rec(3), rec(1), rec(2)], &cfg);
    let ids: Vec<u64> = out[0].interactions.iter().map(|i| i.question_id.0).collect();
    assert_eq!(ids, [3, 1, 2]);
}

fn records() -> impl Strategy<Value = Vec<RawRecord>> {
    prop::collection::vec((0u64..3, 1.0f64..400.0, 0.0f64..12.0), 0..120).prop_map(|rows| {
        let mut clock = [0.0f64; 3];
        rows.into_iter()
            .enumerate()
            .map(|(k, (s, step, rt))| {
                clock[s as usize] += step.round();
                RawRecord {
                    student_id: StudentId(s),
                    question_id: QuestionId(k as u64),
                    question_text: format!("q{k}"),
                    answer_given: k as i64,
                    correct: k % 3 != 0,
                    timestamp: clock[s as usize],
                    response_time: rt.round(),
                }
            })
            .collect()
    })
}

fn small_config() -> impl Strategy<Value = SessionFilterConfig> {
    (0.0f64..10.0, 30.0f64..300.0, 1usize..15).prop_map(|(rt, gap, len)| SessionFilterConfig {
        min_response_time: rt,
        max_gap: gap,
        min_length: len,
    })
}

/// Turns surviving interactions back into records so the filter can be re-run.
fn back_to_records(records: &[RawRecord], out: &[lbm_core::sim::Trajectory]) -> Vec<RawRecord> {
    out.iter()
        .flat_map(|t| &t.interactions)
        .map(|i| records.iter().find(|r| r.question_id == i.question_id).unwrap().clone())
        .collect()
}

proptest! {
    #[test]
    fn filter_ignores_record_order(recs in records(), cfg in small_config(), seed in any::<u64>()) {
        let mut shuffled = recs.clone();
        // timestamps are distinct per student, so any permutation is equivalent
        let n = shuffled.len();
        for i in 0..n {
            let j = (seed.wrapping_mul(i as u64 + 1).rotate_left(17) as usize) % n;
            shuffled.swap(i, j);
        }
        prop_assert_eq!(filter_single_session(&recs, &cfg), filter_single_session(&shuffled, &cfg));
    }

    #[test]
    fn survivors_meet_every_threshold(recs in records(), cfg in small_config()) {
        for t in filter_single_session(&recs, &cfg) {
            prop_assert!(t.interactions.len() >= cfg.min_length);
            for w in t.interactions.windows(2) {
                prop_assert!(w[1].timestamp.unwrap() - w[0].timestamp.unwrap() <= cfg.max_gap);
            }
            prop_assert!(t.interactions.iter().all(|i| i.response_time.unwrap() >= cfg.min_response_time));
        }
    }

    #[test]
    fn filter_is_idempotent(recs in records(), cfg in small_config()) {
        let once = filter_single_session(&recs, &cfg);
        let twice = filter_single_session(&back_to_records(&recs, &once), &cfg);
        let flat = |ts: &[lbm_core::sim::Trajectory]| -> Vec<Vec<QuestionId>> {
            ts.iter().map(|t| t.interactions.iter().map(|i| i.question_id).collect()).collect()
        };
        prop_assert_eq!(flat(&once), flat(&twice));
    }
}
