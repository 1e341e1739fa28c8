//! Shared-task scoring: soft-label distances for Task A, perspectivist
//! error metrics for Task B, and the two reference baselines.

use std::fs;
use std::path::Path;

use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{AnnotationDataset, LabelSpace};
use crate::error::{DiscoError, Result};
use crate::objective::wasserstein_1d;
use crate::predict::{Aggregation, PredictionSet};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SoftMetric {
    Manhattan,
    Wasserstein,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PerspectivistMetric {
    ErrorRate,
    AbsDistance,
}

impl SoftMetric {
    pub fn as_str(self) -> &'static str {
        match self {
            SoftMetric::Manhattan => "manhattan",
            SoftMetric::Wasserstein => "wasserstein",
        }
    }

    pub fn score(self, p: &[f64], q: &[f64], ls: &LabelSpace) -> Result<f64> {
        match self {
            SoftMetric::Manhattan => manhattan(p, q),
            SoftMetric::Wasserstein => wasserstein_metric(p, q, ls),
        }
    }
}

impl PerspectivistMetric {
    pub fn as_str(self) -> &'static str {
        match self {
            PerspectivistMetric::ErrorRate => "error_rate",
            PerspectivistMetric::AbsDistance => "abs_distance",
        }
    }
}

/// Which metric scores each task.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskConfig {
    pub task_a: SoftMetric,
    pub task_b: PerspectivistMetric,
    pub normalized: bool,
}

impl TaskConfig {
    /// Wasserstein + normalized absolute distance for ordinal spaces,
    /// Manhattan + error rate otherwise.
    pub fn for_label_space(ls: &LabelSpace) -> Self {
        if ls.is_ordinal() {
            TaskConfig {
                task_a: SoftMetric::Wasserstein,
                task_b: PerspectivistMetric::AbsDistance,
                normalized: true,
            }
        } else {
            TaskConfig {
                task_a: SoftMetric::Manhattan,
                task_b: PerspectivistMetric::ErrorRate,
                normalized: true,
            }
        }
    }

    pub fn validate(&self, ls: &LabelSpace) -> Result<()> {
        if self.task_a == SoftMetric::Wasserstein {
            ls.require_ordinal("the wasserstein metric")?;
        }
        if self.task_b == PerspectivistMetric::AbsDistance {
            ls.require_ordinal("the absolute distance metric")?;
        }
        Ok(())
    }
}

fn check_len(p: &[f64], q: &[f64]) -> Result<()> {
    if p.len() != q.len() {
        return Err(DiscoError::Dimension {
            what: "distribution length",
            expected: p.len(),
            got: q.len(),
        });
    }
    Ok(())
}

/// L1 distance between two distributions.
pub fn manhattan(p: &[f64], q: &[f64]) -> Result<f64> {
    check_len(p, q)?;
    Ok(p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum())
}

/// 1-D Wasserstein-1 distance on the label values; same formula as the
/// training loss.
pub fn wasserstein_metric(p: &[f64], q: &[f64], ls: &LabelSpace) -> Result<f64> {
    ls.require_ordinal("the wasserstein metric")?;
    check_len(p, q)?;
    if p.len() != ls.len() {
        return Err(DiscoError::Dimension {
            what: "distribution length",
            expected: ls.len(),
            got: p.len(),
        });
    }
    Ok(wasserstein_1d(p, q, ls.values()))
}

/// A gold (item, annotator, label) triple addressed by ids.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GoldPair {
    pub item: String,
    pub annotator: String,
    pub label: usize,
}

pub fn gold_pairs(ds: &AnnotationDataset) -> Vec<GoldPair> {
    ds.records()
        .iter()
        .map(|r| GoldPair {
            item: ds.items()[r.item].item_id.clone(),
            annotator: ds.annotators()[r.annotator].annotator_id.clone(),
            label: r.label,
        })
        .collect()
}

pub(crate) fn lookup(preds: &PredictionSet, g: &GoldPair) -> Result<usize> {
    preds
        .label_for(&g.item, &g.annotator)
        .ok_or_else(|| DiscoError::MissingPrediction {
            item: g.item.clone(),
            annotator: Some(g.annotator.clone()),
        })
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (mut s, mut n) = (0.0, 0usize);
    for x in xs {
        s += x;
        n += 1;
    }
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

/// Per-pair loss under a perspectivist metric.
pub(crate) fn pair_error(
    metric: PerspectivistMetric,
    pred: usize,
    gold: usize,
    ls: &LabelSpace,
    normalized: bool,
) -> f64 {
    match metric {
        PerspectivistMetric::ErrorRate => f64::from(u8::from(pred != gold)),
        PerspectivistMetric::AbsDistance => {
            let d = (ls.value(pred) - ls.value(gold)).abs();
            if normalized {
                d / ls.value_range()
            } else {
                d
            }
        }
    }
}

/// Fraction of gold pairs whose prediction differs.
pub fn error_rate(preds: &PredictionSet, golds: &[GoldPair]) -> Result<f64> {
    let errs = golds
        .iter()
        .map(|g| Ok(f64::from(u8::from(lookup(preds, g)? != g.label))))
        .collect::<Result<Vec<f64>>>()?;
    Ok(mean(errs.into_iter()))
}

/// Mean |value(pred) − value(gold)|, divided by the value range when `normalized`.
pub fn absolute_distance(
    preds: &PredictionSet,
    golds: &[GoldPair],
    ls: &LabelSpace,
    normalized: bool,
) -> Result<f64> {
    ls.require_ordinal("the absolute distance metric")?;
    let errs = golds
        .iter()
        .map(|g| {
            Ok(pair_error(
                PerspectivistMetric::AbsDistance,
                lookup(preds, g)?,
                g.label,
                ls,
                normalized,
            ))
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(mean(errs.into_iter()))
}

/// Global modal training label (ties to the lower label) predicted everywhere.
pub fn baseline_most_frequent(
    train: &AnnotationDataset,
    eval: &AnnotationDataset,
) -> Result<PredictionSet> {
    if train.records().is_empty() {
        return Err(DiscoError::Empty(
            "training split has no annotations".into(),
        ));
    }
    let ls = eval.label_space();
    let mut counts = vec![0usize; ls.len()];
    for r in train.records() {
        counts[r.label] += 1;
    }
    let mut mode = 0;
    for (k, &c) in counts.iter().enumerate() {
        if c > counts[mode] {
            mode = k;
        }
    }
    let mut one_hot = vec![0.0; ls.len()];
    one_hot[mode] = 1.0;
    let mut out = PredictionSet::new(ls.clone(), Aggregation::MostFrequent);
    for item in eval.items() {
        out.soft.insert(item.item_id.clone(), one_hot.clone());
    }
    for (m, n) in eval.requested_pairs() {
        out.insert_label(
            &eval.items()[m].item_id,
            &eval.annotators()[n].annotator_id,
            mode,
        );
    }
    Ok(out)
}

/// Uniform soft labels and seeded uniform random Task B labels.
pub fn baseline_random(eval: &AnnotationDataset, seed: u64) -> PredictionSet {
    let ls = eval.label_space();
    let c = ls.len();
    let mut out = PredictionSet::new(ls.clone(), Aggregation::Random);
    for item in eval.items() {
        out.soft
            .insert(item.item_id.clone(), vec![1.0 / c as f64; c]);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (m, n) in eval.requested_pairs() {
        let label = rng.random_range(0..c);
        out.insert_label(
            &eval.items()[m].item_id,
            &eval.annotators()[n].annotator_id,
            label,
        );
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskAReport {
    pub metric: SoftMetric,
    pub mean: f64,
    pub per_item: IndexMap<String, f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskBReport {
    pub metric: PerspectivistMetric,
    pub normalized: bool,
    pub mean: f64,
    /// Mean pair error within each item.
    pub per_item: IndexMap<String, f64>,
    pub pairs: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub task_a: TaskAReport,
    pub task_b: TaskBReport,
}

impl ScoreReport {
    pub fn to_json_string(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_json_string()?).map_err(|e| DiscoError::io(path, e))
    }
}

/// Task A against arbitrary gold distributions (e.g. generator posteriors).
pub fn score_soft(
    preds: &PredictionSet,
    gold: &IndexMap<String, Vec<f64>>,
    metric: SoftMetric,
    ls: &LabelSpace,
) -> Result<TaskAReport> {
    let mut per_item = IndexMap::new();
    for (item, g) in gold {
        let p = preds
            .soft
            .get(item)
            .ok_or_else(|| DiscoError::MissingPrediction {
                item: item.clone(),
                annotator: None,
            })?;
        per_item.insert(item.clone(), metric.score(p, g, ls)?);
    }
    Ok(TaskAReport {
        metric,
        mean: mean(per_item.values().copied()),
        per_item,
    })
}

/// Empirical item histograms of `ds`, keyed by item id; unannotated items are skipped.
pub fn gold_soft_labels(ds: &AnnotationDataset) -> IndexMap<String, Vec<f64>> {
    ds.item_histograms()
        .into_iter()
        .zip(ds.items())
        .filter(|(h, _)| h.is_valid())
        .map(|(h, item)| (item.item_id.clone(), h.probs))
        .collect()
}

/// Task B over the gold pairs of `ds`.
pub fn score_perspectivist(
    preds: &PredictionSet,
    ds: &AnnotationDataset,
    metric: PerspectivistMetric,
    normalized: bool,
) -> Result<TaskBReport> {
    let ls = ds.label_space();
    if metric == PerspectivistMetric::AbsDistance {
        ls.require_ordinal("the absolute distance metric")?;
    }
    let mut per_item: IndexMap<String, (f64, usize)> = IndexMap::new();
    let golds = gold_pairs(ds);
    let mut total = 0.0;
    for g in &golds {
        let e = pair_error(metric, lookup(preds, g)?, g.label, ls, normalized);
        total += e;
        let slot = per_item.entry(g.item.clone()).or_insert((0.0, 0));
        slot.0 += e;
        slot.1 += 1;
    }
    Ok(TaskBReport {
        metric,
        normalized,
        mean: if golds.is_empty() {
            0.0
        } else {
            total / golds.len() as f64
        },
        per_item: per_item
            .into_iter()
            .map(|(k, (s, n))| (k, s / n as f64))
            .collect(),
        pairs: golds.len(),
    })
}

/// Score both tasks against the empirical annotations of `eval`.
pub fn evaluate(
    preds: &PredictionSet,
    eval: &AnnotationDataset,
    tc: &TaskConfig,
) -> Result<ScoreReport> {
    let ls = eval.label_space();
    tc.validate(ls)?;
    Ok(ScoreReport {
        task_a: score_soft(preds, &gold_soft_labels(eval), tc.task_a, ls)?,
        task_b: score_perspectivist(preds, eval, tc.task_b, tc.normalized)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::LoadOptions;

    fn ds(src: &str) -> AnnotationDataset {
        AnnotationDataset::from_json_str(src, &LoadOptions::default()).unwrap()
    }

    const CSC: &str = r#"{"label_space": {"labels": ["1","2","3","4","5","6"], "values": [1,2,3,4,5,6], "ordinal": true},
        "items": {"a": {"text": {"t": "x"}, "annotations": {"u": "1", "v": "6"}},
                  "b": {"text": {"t": "y"}, "annotations": {"u": "3"}}}}"#;

    #[test]
    fn manhattan_extremes() {
        assert_eq!(manhattan(&[0.3, 0.7], &[0.3, 0.7]).unwrap(), 0.0);
        assert_eq!(manhattan(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 2.0);
        assert!(manhattan(&[1.0], &[0.5, 0.5]).is_err());
    }

    #[test]
    fn wasserstein_on_par_scale() {
        let par = LabelSpace::integer_scale(-5, 5).unwrap();
        let mut a = vec![0.0; 11];
        a[0] = 1.0;
        let mut b = vec![0.0; 11];
        b[10] = 1.0;
        assert!((wasserstein_metric(&a, &b, &par).unwrap() - 10.0).abs() < 1e-12);
        assert_eq!(wasserstein_metric(&a, &a, &par).unwrap(), 0.0);
        let cat = LabelSpace::categorical(["a", "b"]).unwrap();
        assert!(wasserstein_metric(&[1.0, 0.0], &[0.0, 1.0], &cat).is_err());
    }

    #[test]
    fn error_rate_counts() {
        let d = ds(r#"{"label_space": {"labels": ["0","1"]}, "items": {
            "a": {"text": {"t": "x"}, "annotations": {"u": "0", "v": "1"}},
            "b": {"text": {"t": "y"}, "annotations": {"u": "1", "v": "1"}}}}"#);
        let golds = gold_pairs(&d);
        let mut p = PredictionSet::new(d.label_space().clone(), Aggregation::Expectation);
        for g in &golds {
            p.insert_label(&g.item, &g.annotator, g.label);
        }
        assert_eq!(error_rate(&p, &golds).unwrap(), 0.0);
        p.insert_label("a", "u", 1);
        assert_eq!(error_rate(&p, &golds).unwrap(), 0.25);
        for g in &golds {
            p.insert_label(&g.item, &g.annotator, 1 - g.label);
        }
        assert_eq!(error_rate(&p, &golds).unwrap(), 1.0);
        p.perspectivist.shift_remove("b");
        assert!(matches!(
            error_rate(&p, &golds),
            Err(DiscoError::MissingPrediction { .. })
        ));
    }

    #[test]
    fn normalized_full_range_miss_is_one() {
        let d = ds(CSC);
        let ls = d.label_space();
        let golds = vec![GoldPair {
            item: "a".into(),
            annotator: "v".into(),
            label: 5,
        }];
        let mut p = PredictionSet::new(ls.clone(), Aggregation::Expectation);
        p.insert_label("a", "v", 0);
        assert_eq!(absolute_distance(&p, &golds, ls, true).unwrap(), 1.0);
        assert_eq!(absolute_distance(&p, &golds, ls, false).unwrap(), 5.0);
        let cat = LabelSpace::categorical(["a", "b"]).unwrap();
        assert!(absolute_distance(&p, &golds, &cat, true).is_err());
    }

    #[test]
    fn most_frequent_baseline() {
        let d = ds(r#"{"label_space": {"labels": ["0","1"]}, "items": {
            "a": {"text": {"t": "x"}, "annotations": {"u": "1", "v": "1", "w": "0"}}}}"#);
        let b = baseline_most_frequent(&d, &d).unwrap();
        assert_eq!(b.soft["a"], vec![0.0, 1.0]);
        assert_eq!(b.label_for("a", "w"), Some(1));

        let tie = ds(r#"{"label_space": {"labels": ["0","1"]}, "items": {
            "a": {"text": {"t": "x"}, "annotations": {"u": "1", "v": "0"}}}}"#);
        assert_eq!(
            baseline_most_frequent(&tie, &tie).unwrap().soft["a"],
            vec![1.0, 0.0]
        );
    }

    #[test]
    fn random_baseline_is_uniform_and_seeded() {
        let d = ds(CSC);
        let a = baseline_random(&d, 3);
        assert!(a
            .soft
            .values()
            .flatten()
            .all(|&v| (v - 1.0 / 6.0).abs() < 1e-15));
        assert_eq!(a, baseline_random(&d, 3));
        assert_eq!(a.num_pairs(), 3);
    }

    #[test]
    fn oracle_predictor_scores_zero() {
        let d = ds(CSC);
        let mut p = PredictionSet::new(d.label_space().clone(), Aggregation::Expectation);
        p.soft = gold_soft_labels(&d);
        for g in gold_pairs(&d) {
            p.insert_label(&g.item, &g.annotator, g.label);
        }
        let r = evaluate(&p, &d, &TaskConfig::for_label_space(d.label_space())).unwrap();
        assert_eq!(r.task_a.mean, 0.0);
        assert_eq!(r.task_b.mean, 0.0);
        assert_eq!(r.task_b.pairs, 3);
    }

    #[test]
    fn evaluate_rejects_ordinal_metrics_on_categorical_space() {
        let d = ds(
            r#"{"label_space": {"labels": ["0","1"]}, "items": {"a": {"text": {"t": "x"}, "annotations": {"u": "1"}}}}"#,
        );
        let p = baseline_random(&d, 0);
        let tc = TaskConfig {
            task_a: SoftMetric::Manhattan,
            task_b: PerspectivistMetric::AbsDistance,
            normalized: true,
        };
        assert!(matches!(
            evaluate(&p, &d, &tc),
            Err(DiscoError::NotOrdinal(_))
        ));
    }

    #[test]
    fn task_a_mean_is_mean_of_per_item_scores() {
        let d = ds(CSC);
        let p = baseline_random(&d, 0);
        let r = evaluate(&p, &d, &TaskConfig::for_label_space(d.label_space())).unwrap();
        let by_hand: f64 = r.task_a.per_item.values().sum::<f64>() / r.task_a.per_item.len() as f64;
        assert!((r.task_a.mean - by_hand).abs() < 1e-15);
        // item a: hist at 1 and 6 (0.5 each) vs uniform over 1..6
        let hist_a = [0.5, 0.0, 0.0, 0.0, 0.0, 0.5];
        let w = wasserstein_metric(&hist_a, &[1.0 / 6.0; 6], d.label_space()).unwrap();
        assert!((r.task_a.per_item["a"] - w).abs() < 1e-15);
    }
}
