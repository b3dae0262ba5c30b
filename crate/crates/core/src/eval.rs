//! Mention-averaged accuracy metrics over decision records.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::context::QueryDocument;
use crate::error::Error;
use crate::ranker::LinkDecision;
use crate::Result;

/// Scoring summary for one decisions/gold pairing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Correct links over queries whose gold is a real title.
    pub in_kb_accuracy: f64,
    /// Correct outcomes over all gold-labeled queries, counting predicted
    /// NIL on gold NIL as correct.
    pub overall_accuracy: f64,
    /// Gold-labeled queries whose gold appeared among the candidates.
    pub fast_match_gold_recall: f64,
    pub n_scored: usize,
    pub n_in_kb: usize,
    /// Query ids present on only one side.
    pub unmatched_decisions: usize,
    pub unmatched_gold: usize,
    /// One outcome per scored query, in decision order.
    pub per_query: Vec<QueryOutcome>,
}

/// How one query was scored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryOutcome {
    pub query_id: String,
    /// `None` encodes NIL on either side.
    pub predicted: Option<String>,
    pub gold: Option<String>,
    pub correct: bool,
}

/// Gold labels per query id; `None` means gold NIL.
pub fn gold_labels(docs: &[QueryDocument]) -> BTreeMap<String, Option<String>> {
    let mut out = BTreeMap::new();
    for doc in docs {
        for m in &doc.mentions {
            let gold = match m.gold_title.as_deref() {
                None | Some("NIL") => None,
                Some(t) => Some(t.to_string()),
            };
            out.insert(m.query_id.clone(), gold);
        }
    }
    out
}

/// Score decisions against gold labels, matching on query id.
pub fn evaluate(
    decisions: &[LinkDecision],
    gold: &BTreeMap<String, Option<String>>,
) -> Result<EvalReport> {
    let mut n_scored = 0usize;
    let mut n_in_kb = 0usize;
    let mut overall_correct = 0usize;
    let mut in_kb_correct = 0usize;
    let mut recall_hits = 0usize;
    let mut unmatched_decisions = 0usize;
    let mut per_query = Vec::new();

    for d in decisions {
        let Some(g) = gold.get(&d.query_id) else {
            unmatched_decisions += 1;
            continue;
        };
        n_scored += 1;
        let correct = match g {
            Some(title) => {
                n_in_kb += 1;
                let hit = d.predicted.as_deref() == Some(title.as_str());
                if hit {
                    in_kb_correct += 1;
                    overall_correct += 1;
                }
                if d.candidates.iter().any(|c| &c.title == title) {
                    recall_hits += 1;
                }
                hit
            }
            None => {
                let hit = d.predicted.is_none();
                if hit {
                    overall_correct += 1;
                }
                hit
            }
        };
        per_query.push(QueryOutcome {
            query_id: d.query_id.clone(),
            predicted: d.predicted.clone(),
            gold: g.clone(),
            correct,
        });
    }
    if n_scored == 0 {
        return Err(Error::Eval(
            "no overlapping query ids between decisions and gold".to_string(),
        ));
    }
    let seen: std::collections::BTreeSet<&str> =
        decisions.iter().map(|d| d.query_id.as_str()).collect();
    let unmatched_gold = gold.keys().filter(|q| !seen.contains(q.as_str())).count();
    if unmatched_decisions > 0 || unmatched_gold > 0 {
        log::warn!(
            "query id mismatch: {unmatched_decisions} decisions without gold, {unmatched_gold} gold without decisions"
        );
    }

    Ok(EvalReport {
        in_kb_accuracy: ratio(in_kb_correct, n_in_kb),
        overall_accuracy: ratio(overall_correct, n_scored),
        fast_match_gold_recall: ratio(recall_hits, n_in_kb),
        n_scored,
        n_in_kb,
        unmatched_decisions,
        unmatched_gold,
        per_query,
    })
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ranker::CandidateScore;

    fn decision(query_id: &str, predicted: Option<&str>, candidates: &[&str]) -> LinkDecision {
        LinkDecision {
            query_id: query_id.to_string(),
            predicted: predicted.map(|s| s.to_string()),
            score: 0.9,
            candidates: candidates
                .iter()
                .map(|t| CandidateScore {
                    title: t.to_string(),
                    probability: 0.5,
                    prior: 0.5,
                })
                .collect(),
        }
    }

    fn gold_of(pairs: &[(&str, Option<&str>)]) -> BTreeMap<String, Option<String>> {
        pairs
            .iter()
            .map(|(q, g)| (q.to_string(), g.map(|s| s.to_string())))
            .collect()
    }

    #[test]
    fn all_correct_scores_one() {
        let decisions = vec![
            decision("q1", Some("A"), &["A", "B"]),
            decision("q2", Some("B"), &["B"]),
        ];
        let gold = gold_of(&[("q1", Some("A")), ("q2", Some("B"))]);
        let r = evaluate(&decisions, &gold).unwrap();
        assert_eq!(r.in_kb_accuracy, 1.0);
        assert_eq!(r.overall_accuracy, 1.0);
    }

    #[test]
    fn three_of_four_scores_three_quarters() {
        let decisions = vec![
            decision("q1", Some("A"), &["A"]),
            decision("q2", Some("B"), &["B"]),
            decision("q3", Some("C"), &["C"]),
            decision("q4", Some("X"), &["D", "X"]),
        ];
        let gold = gold_of(&[
            ("q1", Some("A")),
            ("q2", Some("B")),
            ("q3", Some("C")),
            ("q4", Some("D")),
        ]);
        let r = evaluate(&decisions, &gold).unwrap();
        assert_eq!(r.overall_accuracy, 0.75);
        assert_eq!(r.in_kb_accuracy, 0.75);
        assert_eq!(r.fast_match_gold_recall, 1.0);
    }

    #[test]
    fn nil_gold_counts_in_overall_but_not_in_kb() {
        // Hand-scored four-query fixture: two in-KB correct, one NIL gold
        // predicted NIL (correct overall, excluded from in-KB), one in-KB
        // wrong.
        let decisions = vec![
            decision("q1", Some("A"), &["A"]),
            decision("q2", None, &[]),
            decision("q3", Some("B"), &["B", "C"]),
            decision("q4", Some("Z"), &["Z", "D"]),
        ];
        let gold = gold_of(&[
            ("q1", Some("A")),
            ("q2", None),
            ("q3", Some("B")),
            ("q4", Some("D")),
        ]);
        let r = evaluate(&decisions, &gold).unwrap();
        assert_eq!(r.n_scored, 4);
        assert_eq!(r.n_in_kb, 3);
        assert!((r.overall_accuracy - 0.75).abs() < 1e-12);
        assert!((r.in_kb_accuracy - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(r.fast_match_gold_recall, 1.0);
        assert_eq!(r.per_query.len(), 4);
        assert!(r.per_query[1].correct && r.per_query[1].gold.is_none());
        assert!(!r.per_query[3].correct);
    }

    #[test]
    fn nil_gold_with_wrong_prediction_is_incorrect_overall() {
        let decisions = vec![decision("q1", Some("A"), &["A"])];
        let gold = gold_of(&[("q1", None)]);
        let r = evaluate(&decisions, &gold).unwrap();
        assert_eq!(r.overall_accuracy, 0.0);
        assert_eq!(r.n_in_kb, 0);
    }

    #[test]
    fn disjoint_id_sets_error() {
        let decisions = vec![decision("q1", Some("A"), &["A"])];
        let gold = gold_of(&[("other", Some("A"))]);
        assert!(matches!(evaluate(&decisions, &gold), Err(Error::Eval(_))));
    }

    #[test]
    fn partial_overlap_is_reported() {
        let decisions = vec![
            decision("q1", Some("A"), &["A"]),
            decision("orphan", Some("B"), &["B"]),
        ];
        let gold = gold_of(&[("q1", Some("A")), ("missing", Some("C"))]);
        let r = evaluate(&decisions, &gold).unwrap();
        assert_eq!(r.unmatched_decisions, 1);
        assert_eq!(r.unmatched_gold, 1);
        assert_eq!(r.n_scored, 1);
    }
}
