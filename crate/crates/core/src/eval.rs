//! Detector evaluation: precision-recall sweeps, best-F1 threshold, counting error.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub key: String,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelRecord {
    pub key: String,
    pub label: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CountRecord {
    pub key: String,
    pub count: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    /// Items with `score > threshold` are predicted positive.
    pub threshold: f64,
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl PrPoint {
    pub fn from_counts(threshold: f64, tp: u64, fp: u64, fn_: u64) -> Self {
        let precision = if tp + fp == 0 { 1.0 } else { tp as f64 / (tp + fp) as f64 };
        let recall = if tp + fn_ == 0 { 1.0 } else { tp as f64 / (tp + fn_) as f64 };
        let f1 = if tp == 0 { 0.0 } else { 2.0 * tp as f64 / (2 * tp + fp + fn_) as f64 };
        PrPoint { threshold, tp, fp, fn_, precision, recall, f1 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BestF1 {
    pub f1: f64,
    pub threshold: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub points: Vec<PrPoint>,
    pub best_f1: Option<BestF1>,
    pub counting_error_percent: Option<f64>,
}

fn keyed<T>(items: Vec<T>, key: impl Fn(&T) -> &str, what: &str) -> Result<BTreeMap<String, T>> {
    let mut map = BTreeMap::new();
    for it in items {
        let k = key(&it).to_string();
        if map.insert(k.clone(), it).is_some() {
            return Err(Error::Validation(format!("duplicate {what} key `{k}`")));
        }
    }
    Ok(map)
}

fn check_keys<A, B>(pred: &BTreeMap<String, A>, truth: &BTreeMap<String, B>) -> Result<()> {
    if let Some(k) = pred.keys().find(|k| !truth.contains_key(*k)) {
        return Err(Error::Validation(format!("prediction key `{k}` has no truth label")));
    }
    if let Some(k) = truth.keys().find(|k| !pred.contains_key(*k)) {
        return Err(Error::Validation(format!("truth key `{k}` has no prediction")));
    }
    Ok(())
}

/// Sweeps every distinct score as a strict threshold, in ascending order.
pub fn pr_sweep(pred: Vec<ScoreRecord>, truth: Vec<LabelRecord>) -> Result<EvalReport> {
    let pred = keyed(pred, |r| &r.key, "prediction")?;
    let truth = keyed(truth, |r| &r.key, "truth")?;
    check_keys(&pred, &truth)?;
    if let Some(r) = pred.values().find(|r| !r.score.is_finite()) {
        return Err(Error::Validation(format!("score for `{}` is not finite", r.key)));
    }
    let mut scored: Vec<(f64, bool)> = pred.values().map(|r| (r.score, truth[&r.key].label)).collect();
    scored.sort_by(|a, b| a.0.total_cmp(&b.0));
    let total_pos = scored.iter().filter(|s| s.1).count() as u64;
    let total_neg = scored.len() as u64 - total_pos;

    // Walking upward, everything at or below the threshold is predicted negative.
    let mut points = Vec::new();
    let (mut neg_pos, mut neg_neg) = (0u64, 0u64);
    let mut i = 0;
    while i < scored.len() {
        let t = scored[i].0;
        while i < scored.len() && scored[i].0 == t {
            if scored[i].1 {
                neg_pos += 1;
            } else {
                neg_neg += 1;
            }
            i += 1;
        }
        points.push(PrPoint::from_counts(t, total_pos - neg_pos, total_neg - neg_neg, neg_pos));
    }
    let best_f1 = points
        .iter()
        .fold(None::<&PrPoint>, |best, p| match best {
            Some(b) if b.f1 >= p.f1 => Some(b),
            _ => Some(p),
        })
        .map(|p| BestF1 { f1: p.f1, threshold: p.threshold });
    Ok(EvalReport { points, best_f1, counting_error_percent: None })
}

/// Mean of `|pred - truth| / truth × 100` over keys with a non-zero true count.
pub fn counting_error(pred: Vec<CountRecord>, truth: Vec<CountRecord>) -> Result<EvalReport> {
    let pred = keyed(pred, |r| &r.key, "prediction")?;
    let truth = keyed(truth, |r| &r.key, "truth")?;
    check_keys(&pred, &truth)?;
    let errs: Vec<f64> = truth
        .values()
        .filter(|t| t.count != 0.0)
        .map(|t| (pred[&t.key].count - t.count).abs() / t.count * 100.0)
        .collect();
    let mean = if errs.is_empty() { None } else { Some(errs.iter().sum::<f64>() / errs.len() as f64) };
    Ok(EvalReport { points: Vec::new(), best_f1: None, counting_error_percent: mean })
}

pub fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Schema {
                path: path.to_path_buf(),
                msg: format!("line {}: {e}", i + 1),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn data(items: &[(f64, bool)]) -> (Vec<ScoreRecord>, Vec<LabelRecord>) {
        items
            .iter()
            .enumerate()
            .map(|(i, &(s, l))| {
                (ScoreRecord { key: format!("k{i}"), score: s }, LabelRecord { key: format!("k{i}"), label: l })
            })
            .unzip()
    }

    /// Recounts every threshold from scratch.
    fn naive(items: &[(f64, bool)], t: f64) -> (u64, u64, u64) {
        let tp = items.iter().filter(|(s, l)| *s > t && *l).count() as u64;
        let fp = items.iter().filter(|(s, l)| *s > t && !*l).count() as u64;
        let fn_ = items.iter().filter(|(s, l)| *s <= t && *l).count() as u64;
        (tp, fp, fn_)
    }

    #[test]
    fn formula() {
        let p = PrPoint::from_counts(0.5, 3, 1, 1);
        assert_eq!((p.precision, p.recall, p.f1), (0.75, 0.75, 0.75));
        // Three TP above 0.5, one FP above, one FN below.
        let (pred, truth) = data(&[(0.9, true), (0.8, true), (0.7, true), (0.6, false), (0.4, true), (0.5, false)]);
        let r = pr_sweep(pred, truth).unwrap();
        let at = r.points.iter().find(|p| p.threshold == 0.5).unwrap();
        assert_eq!((at.tp, at.fp, at.fn_), (3, 1, 1));
        assert_eq!(at.f1, 0.75);
    }

    #[test]
    fn perfect_predictions() {
        let items = [(0.9, true), (0.8, true), (0.3, false), (0.2, false)];
        let (pred, truth) = data(&items);
        let r = pr_sweep(pred, truth).unwrap();
        for p in r.points.iter().filter(|p| p.threshold >= 0.3 && p.threshold < 0.8) {
            assert_eq!(p.f1, 1.0);
        }
        assert_eq!(r.best_f1, Some(BestF1 { f1: 1.0, threshold: 0.3 }));
    }

    #[test]
    fn key_mismatch() {
        let (pred, mut truth) = data(&[(0.9, true), (0.1, false)]);
        truth[1].key = "other".into();
        assert!(matches!(pr_sweep(pred, truth), Err(Error::Validation(_))));
        let c = |k: &str, n| CountRecord { key: k.into(), count: n };
        assert!(counting_error(vec![c("a", 1.0)], vec![c("b", 1.0)]).is_err());
    }

    #[test]
    fn counting() {
        let c = |k: &str, n| CountRecord { key: k.into(), count: n };
        let r = counting_error(vec![c("a", 110.0), c("b", 45.0), c("z", 3.0)], vec![c("a", 100.0), c("b", 50.0), c("z", 0.0)])
            .unwrap();
        assert!((r.counting_error_percent.unwrap() - 10.0).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn sweep_matches_naive_recount(items in prop::collection::vec((0u32..20, any::<bool>()), 1..80)) {
            let items: Vec<(f64, bool)> = items.into_iter().map(|(s, l)| (s as f64 / 20.0, l)).collect();
            let (pred, truth) = data(&items);
            let r = pr_sweep(pred, truth).unwrap();
            let mut uniq: Vec<f64> = items.iter().map(|i| i.0).collect();
            uniq.sort_by(f64::total_cmp);
            uniq.dedup();
            prop_assert_eq!(r.points.len(), uniq.len());
            for (p, t) in r.points.iter().zip(&uniq) {
                prop_assert_eq!(p.threshold, *t);
                prop_assert_eq!((p.tp, p.fp, p.fn_), naive(&items, *t));
            }
            prop_assert!(r.points.windows(2).all(|w| w[1].recall <= w[0].recall));
            let best = r.best_f1.unwrap();
            prop_assert!(r.points.iter().all(|p| p.f1 <= best.f1));
            prop_assert!(r.points.iter().all(|p| (0.0..=1.0).contains(&p.precision) && (0.0..=1.0).contains(&p.recall)));
        }
    }
}
