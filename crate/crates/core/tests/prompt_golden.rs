use std::path::PathBuf;

use lbm_core::gateway::CompletionRequest;
use lbm_core::prompt::{decoder_request, direct_request, encoder_request};
use lbm_core::sim::{Interaction, Operator, Question, QuestionId};

fn history() -> Vec<(Question, Interaction)> {
    [(Operator::Add, 38, 17, 45), (Operator::Sub, 9, 4, 5), (Operator::Mul, 6, 7, 42), (Operator::Div, 20, 6, 3)]
        .into_iter()
        .enumerate()
        .map(|(k, (op, l, r, given))| {
            let q = Question::arithmetic(QuestionId(k as u64), op, l, r);
            let i = Interaction {
                question_id: q.id,
                given_answer: given,
                correct: q.true_answer() == Some(given),
                timestamp: None,
                response_time: None,
            };
            (q, i)
        })
        .collect()
}

fn render(req: &CompletionRequest) -> String {
    format!(
        "max_new_tokens: {}\n--- system ---\n{}\n--- user ---\n{}\n",
        req.max_new_tokens, req.system_text, req.user_text
    )
}

/// Compares against `tests/golden/<name>.txt`; `UPDATE_GOLDEN=1` rewrites.
fn golden(name: &str, req: &CompletionRequest) {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/golden").join(format!("{name}.txt"));
    let text = render(req);
    if std::env::var_os("UPDATE_GOLDEN").is_some() {
        std::fs::create_dir_all(path.parent().unwrap()).unwrap();
        std::fs::write(&path, &text).unwrap();
        return;
    }
    let want = std::fs::read_to_string(&path).unwrap_or_else(|_| panic!("missing {}; run with UPDATE_GOLDEN=1", path.display()));
    assert_eq!(text, want, "prompt template {name} changed");
}

#[test]
fn encoder_templates() {
    let items = history();
    let h: Vec<_> = items.iter().map(|(q, i)| (q, i)).collect();
    golden("encoder", &encoder_request(&h, 128, false, None));
    golden("encoder_cot", &encoder_request(&h, 64, true, None));
    golden(
        "encoder_steered",
        &encoder_request(&h, 128, false, Some("Mention any misconceptions explicitly.")),
    );
}

#[test]
fn decoder_template() {
    let q = Question::arithmetic(QuestionId(9), Operator::Add, 27, 18);
    let summary = "Mastered: subtraction, multiplication. Not mastered: division. Misconceptions: does not carry in addition.";
    golden("decoder", &decoder_request(summary, &q));
}

#[test]
fn direct_template() {
    let items = history();
    let h: Vec<_> = items.iter().map(|(q, i)| (q, i)).collect();
    let q = Question::arithmetic(QuestionId(9), Operator::Add, 27, 18);
    golden("direct", &direct_request(&h, &q));
}
