//! Entity-level micro precision / recall / F1.
//!
//! The matching unit is the unique `(type, trimmed surface)` pair per
//! sentence. Counts are pooled over sentences before computing ratios.

use std::collections::{BTreeMap, HashMap, HashSet};

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{normalize_surface, GoldMention, Schema};
use crate::exec::Execution;
use crate::parse::{ParseStatus, Prediction};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ScoreError {
    #[error("sentence {0:?} has a prediction but no gold entry")]
    MissingGold(String),
    #[error("sentence {0:?} has gold but no prediction")]
    MissingPrediction(String),
    #[error("no reports to average")]
    NoReports,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl Counts {
    fn add(self, other: Counts) -> Counts {
        Counts { tp: self.tp + other.tp, fp: self.fp + other.fp, fn_: self.fn_ + other.fn_ }
    }

    /// tp/(tp+fp); with no predictions, 1.0 if there is also no gold else 0.0.
    pub fn precision(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp, self.fn_ == 0)
    }

    /// tp/(tp+fn); with no gold, 1.0 if there are also no predictions else 0.0.
    pub fn recall(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_, self.fp == 0)
    }

    pub fn f1(&self) -> f64 {
        f1(self.precision(), self.recall())
    }
}

fn ratio(num: u64, den: u64, other_side_empty: bool) -> f64 {
    if den == 0 {
        if other_side_empty { 1.0 } else { 0.0 }
    } else {
        num as f64 / den as f64
    }
}

/// Harmonic mean, 0 when both are 0.
pub fn f1(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TypeScore {
    #[serde(flatten)]
    pub counts: Counts,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl From<Counts> for TypeScore {
    fn from(counts: Counts) -> Self {
        Self { counts, precision: counts.precision(), recall: counts.recall(), f1: counts.f1() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub per_type: IndexMap<String, TypeScore>,
    pub sentences: usize,
    pub parse_failures: usize,
    pub parse_failure_rate: f64,
}

type PairSet<'a> = HashSet<(&'a str, &'a str)>;

fn gold_pairs(gold: &[GoldMention]) -> PairSet<'_> {
    gold.iter()
        .map(|m| (m.etype.as_str(), normalize_surface(&m.surface)))
        .filter(|(_, s)| !s.is_empty())
        .collect()
}

fn predicted_pairs(pred: &Prediction) -> PairSet<'_> {
    pred.by_type
        .iter()
        .flat_map(|(t, set)| set.iter().map(move |s| (t.as_str(), normalize_surface(s))))
        .filter(|(_, s)| !s.is_empty())
        .collect()
}

/// Per-type counts for one sentence, keyed by type name.
fn sentence_counts(pred: &Prediction, gold: &[GoldMention]) -> BTreeMap<String, Counts> {
    let g = gold_pairs(gold);
    let p = predicted_pairs(pred);
    let mut out: BTreeMap<String, Counts> = BTreeMap::new();
    for pair in &p {
        let c = out.entry(pair.0.to_string()).or_default();
        if g.contains(pair) {
            c.tp += 1;
        } else {
            c.fp += 1;
        }
    }
    for pair in g.difference(&p) {
        out.entry(pair.0.to_string()).or_default().fn_ += 1;
    }
    out
}

pub fn score_run(
    preds: &HashMap<String, Prediction>,
    golds: &HashMap<String, Vec<GoldMention>>,
    schema: &Schema,
) -> Result<ScoreReport, ScoreError> {
    score_run_with(preds, golds, schema, Execution::Sequential)
}

/// [`score_run`] with an explicit execution mode. Per-sentence counting may
/// run in parallel; the reduction is over integers so the result does not
/// depend on the mode.
pub fn score_run_with(
    preds: &HashMap<String, Prediction>,
    golds: &HashMap<String, Vec<GoldMention>>,
    schema: &Schema,
    exec: Execution,
) -> Result<ScoreReport, ScoreError> {
    let mut ids: Vec<&String> = golds.keys().collect();
    ids.sort();
    if let Some(id) = ids.iter().find(|id| !preds.contains_key(**id)) {
        return Err(ScoreError::MissingPrediction((*id).clone()));
    }
    if let Some(id) = preds.keys().find(|id| !golds.contains_key(*id)) {
        return Err(ScoreError::MissingGold(id.clone()));
    }

    let per_sentence = exec.map(&ids, |id| sentence_counts(&preds[*id], &golds[*id]));

    let mut per_type: IndexMap<String, Counts> =
        schema.names().map(|n| (n.to_string(), Counts::default())).collect();
    let mut total = Counts::default();
    for counts in per_sentence {
        for (t, c) in counts {
            let slot = per_type.entry(t).or_default();
            *slot = slot.add(c);
            total = total.add(c);
        }
    }
    let parse_failures = preds.values().filter(|p| p.status == ParseStatus::Failed).count();
    let sentences = ids.len();
    Ok(ScoreReport {
        tp: total.tp,
        fp: total.fp,
        fn_: total.fn_,
        precision: total.precision(),
        recall: total.recall(),
        f1: total.f1(),
        per_type: per_type.into_iter().map(|(t, c)| (t, c.into())).collect(),
        sentences,
        parse_failures,
        parse_failure_rate: if sentences == 0 { 0.0 } else { parse_failures as f64 / sentences as f64 },
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RunAverage {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub runs: usize,
}

/// Arithmetic mean of per-run P, R and F1. Values are summed in sorted
/// order so the result does not depend on report order.
pub fn average_runs(reports: &[ScoreReport]) -> Result<RunAverage, ScoreError> {
    if reports.is_empty() {
        return Err(ScoreError::NoReports);
    }
    let mean = |f: fn(&ScoreReport) -> f64| {
        let mut xs: Vec<f64> = reports.iter().map(f).collect();
        xs.sort_by(f64::total_cmp);
        xs.iter().sum::<f64>() / xs.len() as f64
    };
    Ok(RunAverage {
        precision: mean(|r| r.precision),
        recall: mean(|r| r.recall),
        f1: mean(|r| r.f1),
        runs: reports.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use indexmap::IndexSet;
    use proptest::prelude::*;

    fn schema() -> Schema {
        Schema::from_names(&["PER", "LOC", "ORG"]).unwrap()
    }

    fn pred(mentions: &[(&str, &str)]) -> Prediction {
        let mut p = Prediction::empty(&schema(), ParseStatus::Clean);
        for (t, s) in mentions {
            p.by_type.get_mut(*t).unwrap().insert(s.to_string());
        }
        p
    }

    fn gold(mentions: &[(&str, &str)]) -> Vec<GoldMention> {
        mentions.iter().map(|(t, s)| GoldMention::new(*t, *s)).collect()
    }

    fn one(p: Prediction, g: Vec<GoldMention>) -> ScoreReport {
        let preds = HashMap::from([("s".to_string(), p)]);
        let golds = HashMap::from([("s".to_string(), g)]);
        score_run(&preds, &golds, &schema()).unwrap()
    }

    #[test]
    fn perfect() {
        let r = one(pred(&[("PER", "John")]), gold(&[("PER", "John")]));
        assert_eq!(r.f1, 1.0);
    }

    #[test]
    fn empty_prediction() {
        let r = one(pred(&[]), gold(&[("PER", "John")]));
        assert_eq!((r.precision, r.recall, r.f1), (0.0, 0.0, 0.0));
    }

    #[test]
    fn half_right() {
        let r = one(pred(&[("PER", "John"), ("ORG", "Acme")]), gold(&[("PER", "John"), ("LOC", "Paris")]));
        assert_eq!((r.tp, r.fp, r.fn_), (1, 1, 1));
        assert_eq!((r.precision, r.recall, r.f1), (0.5, 0.5, 0.5));
        assert_eq!(r.per_type["ORG"].counts.fp, 1);
        assert_eq!(r.per_type["LOC"].counts.fn_, 1);
    }

    #[test]
    fn both_empty_is_perfect() {
        let r = one(pred(&[]), gold(&[]));
        assert_eq!((r.precision, r.recall, r.f1), (1.0, 1.0, 1.0));
    }

    #[test]
    fn only_spurious() {
        let r = one(pred(&[("PER", "X")]), gold(&[]));
        assert_eq!((r.precision, r.recall, r.f1), (0.0, 0.0, 0.0));
    }

    #[test]
    fn duplicate_gold_collapses() {
        let r = one(pred(&[("LOC", "Paris")]), gold(&[("LOC", "Paris"), ("LOC", "Paris ")]));
        assert_eq!((r.tp, r.fp, r.fn_), (1, 0, 0));
    }

    #[test]
    fn id_mismatch() {
        let preds = HashMap::from([("a".to_string(), pred(&[]))]);
        let golds = HashMap::from([("b".to_string(), vec![])]);
        assert!(score_run(&preds, &golds, &schema()).is_err());
    }

    #[test]
    fn parse_failures_counted() {
        let mut p = pred(&[]);
        p.status = ParseStatus::Failed;
        let r = one(p, gold(&[("PER", "a")]));
        assert_eq!(r.parse_failures, 1);
        assert_eq!(r.parse_failure_rate, 1.0);
    }

    #[test]
    fn averaging() {
        let r1 = one(pred(&[]), gold(&[("PER", "a")]));
        let r2 = one(pred(&[("PER", "a")]), gold(&[("PER", "a")]));
        assert_eq!(average_runs(&[r1.clone(), r2.clone()]).unwrap().f1, 0.5);
        assert_eq!(average_runs(&[r2.clone(), r1.clone()]).unwrap(), average_runs(&[r1, r2.clone()]).unwrap());
        assert_eq!(average_runs(&vec![r2.clone(); 5]).unwrap().f1, r2.f1);
        assert_eq!(average_runs(&[]), Err(ScoreError::NoReports));
    }

    /// Predicted and gold (type index, surface) lists of one sentence.
    type Instance = (Vec<(usize, String)>, Vec<(usize, String)>);

    /// Pairwise-comparison oracle over lists with manual dedup.
    fn brute_force(instances: &[Instance]) -> (u64, u64, u64) {
        let (mut tp, mut fp, mut fn_) = (0, 0, 0);
        for (p, g) in instances {
            let mut pu: Vec<&(usize, String)> = Vec::new();
            for x in p {
                if !pu.contains(&x) {
                    pu.push(x);
                }
            }
            let mut gu: Vec<&(usize, String)> = Vec::new();
            for x in g {
                if !gu.contains(&x) {
                    gu.push(x);
                }
            }
            for x in &pu {
                if gu.iter().any(|y| y == x) { tp += 1 } else { fp += 1 }
            }
            for x in &gu {
                if !pu.iter().any(|y| y == x) {
                    fn_ += 1
                }
            }
        }
        (tp, fp, fn_)
    }

    fn instance() -> impl Strategy<Value = Vec<Instance>> {
        let mention = (0usize..3, "[ab]{1,2}");
        prop::collection::vec(
            (prop::collection::vec(mention.clone(), 0..5), prop::collection::vec(mention, 0..5)),
            1..10,
        )
    }

    fn build(inst: &[Instance]) -> (HashMap<String, Prediction>, HashMap<String, Vec<GoldMention>>) {
        let names = ["PER", "LOC", "ORG"];
        let mut preds = HashMap::new();
        let mut golds = HashMap::new();
        for (i, (p, g)) in inst.iter().enumerate() {
            let mut pr = Prediction::empty(&schema(), ParseStatus::Clean);
            for (t, s) in p {
                pr.by_type.get_mut(names[*t]).unwrap().insert(s.clone());
            }
            preds.insert(i.to_string(), pr);
            golds.insert(i.to_string(), g.iter().map(|(t, s)| GoldMention::new(names[*t], s.clone())).collect());
        }
        (preds, golds)
    }

    proptest! {
        #[test]
        fn matches_brute_force(inst in instance()) {
            let (preds, golds) = build(&inst);
            let r = score_run(&preds, &golds, &schema()).unwrap();
            prop_assert_eq!((r.tp, r.fp, r.fn_), brute_force(&inst));
            prop_assert!((0.0..=1.0).contains(&r.precision));
            prop_assert!((0.0..=1.0).contains(&r.recall));
            prop_assert!((0.0..=1.0).contains(&r.f1));
            if r.precision > 0.0 && r.recall > 0.0 {
                let h = 2.0 * r.precision * r.recall / (r.precision + r.recall);
                prop_assert!((r.f1 - h).abs() < 1e-12);
            }
            let par = score_run_with(&preds, &golds, &schema(), Execution::Parallel).unwrap();
            prop_assert_eq!(par, r);
        }

        #[test]
        fn permutation_invariant(inst in instance()) {
            let (preds, golds) = build(&inst);
            let mut rev = inst.clone();
            rev.reverse();
            let (p2, g2) = build(&rev);
            let a = score_run(&preds, &golds, &schema()).unwrap();
            let b = score_run(&p2, &g2, &schema()).unwrap();
            prop_assert_eq!((a.tp, a.fp, a.fn_, a.f1), (b.tp, b.fp, b.fn_, b.f1));
        }

        #[test]
        fn monotone(inst in instance(), which in 0usize..10, extra in "[cd]{1,2}") {
            let (mut preds, golds) = build(&inst);
            let base = score_run(&preds, &golds, &schema()).unwrap().f1;
            let id = (which % inst.len()).to_string();

            // a correct prediction: some gold pair not yet predicted
            let missing: Option<GoldMention> = golds[&id].iter()
                .find(|m| !preds[&id].by_type[&m.etype].contains(&m.surface)).cloned();
            if let Some(m) = missing {
                let mut better = preds.clone();
                better.get_mut(&id).unwrap().by_type.get_mut(&m.etype).unwrap().insert(m.surface);
                prop_assert!(score_run(&better, &golds, &schema()).unwrap().f1 >= base);
            }

            // a spurious one: surfaces from a disjoint alphabet
            let set: &mut IndexSet<String> = preds.get_mut(&id).unwrap().by_type.get_mut("PER").unwrap();
            set.insert(extra);
            prop_assert!(score_run(&preds, &golds, &schema()).unwrap().f1 <= base);
        }
    }
}
