//! Small hand-built studies shared by unit tests.

use std::collections::BTreeMap;

use crate::backends::{LogitKey, MockRespondentModel};
use crate::study::{
    AnalysisPlan, Condition, Direction, GroundTruth, HumanReplication, Measure, Question, Scale,
    StudySpec, VariableMap, SCHEMA_VERSION,
};

fn study(
    id: &str,
    scale: Scale,
    questions: &[(&str, &str)],
    conditions: [(&str, &[&str]); 2],
    measure: Measure,
    analysed: [&[&str]; 2],
    success: Option<Vec<char>>,
) -> StudySpec {
    let (effect, test) = measure.analysis();
    let mut scales = BTreeMap::new();
    scales.insert("main".to_string(), scale);
    let mut map = BTreeMap::new();
    for (i, (cid, _)) in conditions.iter().enumerate() {
        map.insert(cid.to_string(), analysed[i].iter().map(|s| s.to_string()).collect());
    }
    StudySpec {
        schema_version: SCHEMA_VERSION,
        id: id.into(),
        citation: "test".into(),
        scales,
        questions: questions
            .iter()
            .map(|(qid, prompt)| Question {
                id: qid.to_string(),
                prompt: prompt.to_string(),
                scale: "main".into(),
            })
            .collect(),
        conditions: conditions
            .iter()
            .map(|(cid, order)| Condition {
                id: cid.to_string(),
                framing: format!("Framing for {cid}."),
                question_order: order.iter().map(|s| s.to_string()).collect(),
            })
            .collect(),
        plan: AnalysisPlan {
            measure,
            effect,
            test,
            expected_direction: Direction::Positive,
            variable_map: VariableMap { questions: map, success_labels: success },
        },
        truth: GroundTruth {
            original_direction: Direction::Positive,
            human_replication: HumanReplication::Replicated,
        },
    }
}

/// Conditions `a`/`b`, one question `q` on a three-point scale.
pub fn single_question_study() -> StudySpec {
    study(
        "single",
        Scale::likert(3),
        &[("q", "Pick one.")],
        [("a", &["q"]), ("b", &["q"])],
        Measure::TwoGroupMean,
        [&["q"], &["q"]],
        None,
    )
}

/// Conditions `x`/`y`, three questions on a five-point scale.
pub fn three_question_study() -> StudySpec {
    study(
        "triple",
        Scale::likert(5),
        &[("q1", "How warm?"), ("q2", "How bright?"), ("q3", "How loud?")],
        [("x", &["q1", "q2", "q3"]), ("y", &["q1", "q2", "q3"])],
        Measure::TwoGroupMean,
        [&["q1"], &["q1"]],
        None,
    )
}

pub fn three_question_mock() -> MockRespondentModel {
    let mut m = MockRespondentModel::new();
    for c in ["x", "y"] {
        for (i, q) in ["q1", "q2", "q3"].into_iter().enumerate() {
            let logits = (0..5).map(|k| ((k + i) % 5) as f64 * 0.5).collect();
            m = m.with_logits(LogitKey::new("triple", c, q), logits);
        }
    }
    m
}

/// Same single-question layout analysed with an arbitrary measure.
pub fn study_with_measure(measure: Measure) -> StudySpec {
    let (questions, analysed): (&[(&str, &str)], [&[&str]; 2]) = match measure {
        Measure::CorrelationPair => (&[("q", "First?"), ("r", "Second?")], [&["q", "r"], &["q", "r"]]),
        _ => (&[("q", "Pick one.")], [&["q"], &["q"]]),
    };
    let order: &[&str] = if measure == Measure::CorrelationPair { &["q", "r"] } else { &["q"] };
    let success = matches!(measure, Measure::TwoByTwoCounts | Measure::TwoGroupProportion)
        .then(|| vec!['A']);
    study(
        "single",
        Scale::likert(3),
        questions,
        [("a", order), ("b", order)],
        measure,
        analysed,
        success,
    )
}

#[test]
fn helpers_build_valid_studies() {
    single_question_study().validate().unwrap();
    three_question_study().validate().unwrap();
    for m in [
        Measure::TwoGroupMean,
        Measure::TwoByTwoCounts,
        Measure::CorrelationPair,
        Measure::TwoGroupProportion,
    ] {
        study_with_measure(m).validate().unwrap();
    }
}
