//! Inference: per-annotator labels for known annotators and item-level soft
//! labels by tiling an item across the annotator pool.

use std::fs;
use std::path::Path;

use indexmap::IndexMap;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{AnnotationDataset, LabelSpace, Split};
use crate::error::{DiscoError, Result};
use crate::features::FeatureMatrix;
use crate::linalg::argmax;
use crate::model::{forward, DiscoConfig, DiscoParams};
use crate::objective::expected_value;

/// How an item-level soft label was produced.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    /// Mean of the per-annotator distributions.
    #[default]
    Expectation,
    /// Normalized histogram of the per-annotator predicted labels.
    MajorityVote,
    /// Produced by the most-frequent-label baseline.
    MostFrequent,
    /// Produced by the random baseline.
    Random,
}

impl Aggregation {
    pub fn as_str(self) -> &'static str {
        match self {
            Aggregation::Expectation => "expectation",
            Aggregation::MajorityVote => "majority_vote",
            Aggregation::MostFrequent => "most_frequent",
            Aggregation::Random => "random",
        }
    }
}

/// Task A soft labels and Task B per-annotator labels, keyed by ids.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionSet {
    pub label_space: LabelSpace,
    pub aggregation: Aggregation,
    pub soft: IndexMap<String, Vec<f64>>,
    /// item id → annotator id → label index
    pub perspectivist: IndexMap<String, IndexMap<String, usize>>,
    /// Pairs answered from the tiled distribution because the annotator
    /// never appeared in training. Not serialized.
    pub fallback_pairs: usize,
}

#[derive(Serialize, Deserialize)]
struct PredictionsFile {
    task_a: IndexMap<String, Vec<f64>>,
    task_b: IndexMap<String, IndexMap<String, String>>,
    aggregation: Aggregation,
    label_space: Vec<String>,
}

impl PredictionSet {
    pub fn new(label_space: LabelSpace, aggregation: Aggregation) -> Self {
        PredictionSet {
            label_space,
            aggregation,
            soft: IndexMap::new(),
            perspectivist: IndexMap::new(),
            fallback_pairs: 0,
        }
    }

    pub fn label_for(&self, item: &str, annotator: &str) -> Option<usize> {
        self.perspectivist.get(item)?.get(annotator).copied()
    }

    pub fn insert_label(&mut self, item: &str, annotator: &str, label: usize) {
        self.perspectivist
            .entry(item.to_string())
            .or_default()
            .insert(annotator.to_string(), label);
    }

    pub fn num_pairs(&self) -> usize {
        self.perspectivist.values().map(IndexMap::len).sum()
    }

    pub fn to_json_string(&self) -> Result<String> {
        let file = PredictionsFile {
            task_a: self.soft.clone(),
            task_b: self
                .perspectivist
                .iter()
                .map(|(item, row)| {
                    let row = row
                        .iter()
                        .map(|(a, &k)| (a.clone(), self.label_space.label(k).to_string()))
                        .collect();
                    (item.clone(), row)
                })
                .collect(),
            aggregation: self.aggregation,
            label_space: self.label_space.labels().to_vec(),
        };
        Ok(serde_json::to_string_pretty(&file)?)
    }

    /// Parse a predictions file. `label_space` supplies label values; its
    /// labels must equal the file's `label_space` list.
    pub fn from_json_str(s: &str, label_space: &LabelSpace) -> Result<Self> {
        let file: PredictionsFile = serde_json::from_str(s)?;
        if file.label_space != label_space.labels() {
            return Err(DiscoError::LabelSpace(format!(
                "predictions use labels {:?} but the dataset declares {:?}",
                file.label_space,
                label_space.labels()
            )));
        }
        let c = label_space.len();
        for (item, dist) in &file.task_a {
            if dist.len() != c || dist.iter().any(|p| !p.is_finite() || *p < 0.0) {
                return Err(DiscoError::Dataset(format!(
                    "soft label for `{item}` is not a length-{c} probability vector"
                )));
            }
        }
        let mut out = PredictionSet::new(label_space.clone(), file.aggregation);
        out.soft = file.task_a;
        for (item, row) in file.task_b {
            for (annotator, label) in row {
                let k = label_space
                    .index_of(&label)
                    .ok_or_else(|| DiscoError::UnknownLabel {
                        item: item.clone(),
                        label: label.clone(),
                    })?;
                out.insert_label(&item, &annotator, k);
            }
        }
        Ok(out)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_json_string()?).map_err(|e| DiscoError::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>, label_space: &LabelSpace) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| DiscoError::io(path, e))?;
        Self::from_json_str(&text, label_space)
    }
}

/// Label decision rule: argmax for categorical spaces (ties to the lower
/// label); for ordinal spaces, the label whose value is nearest the expected
/// value (ties to the lower label).
pub fn decide_label(dist: &[f64], ls: &LabelSpace) -> usize {
    if !ls.is_ordinal() {
        return argmax(dist);
    }
    let e = expected_value(dist, ls);
    let mut best = 0;
    for k in 1..ls.len() {
        if (ls.value(k) - e).abs() < (ls.value(best) - e).abs() {
            best = k;
        }
    }
    best
}

/// `z_y` for one (item, annotator) pair and the decided label.
pub fn predict_pair(
    p: &DiscoParams,
    cfg: &DiscoConfig,
    x: &[f64],
    a: &[f64],
    ls: &LabelSpace,
) -> Result<(Vec<f64>, usize)> {
    let trace = forward(p, cfg, x, a)?;
    let label = decide_label(&trace.z_y, ls);
    Ok((trace.z_y, label))
}

/// Pair `x` with every annotator row in `pool` (all rows when `None`),
/// decode each, and aggregate into one soft label.
pub fn predict_item_tiled(
    p: &DiscoParams,
    cfg: &DiscoConfig,
    x: &[f64],
    annot_feats: &FeatureMatrix,
    pool: Option<&[usize]>,
    ls: &LabelSpace,
    agg: Aggregation,
) -> Result<Vec<f64>> {
    let all: Vec<usize>;
    let pool = match pool {
        Some(pool) => pool,
        None => {
            all = (0..annot_feats.len()).collect();
            &all
        }
    };
    if pool.is_empty() {
        return Err(DiscoError::Empty(
            "annotator pool for tiling is empty".into(),
        ));
    }
    let c = ls.len();
    let mut soft = vec![0.0; c];
    for &n in pool {
        let (dist, label) = predict_pair(p, cfg, x, annot_feats.row(n), ls)?;
        match agg {
            Aggregation::MajorityVote => soft[label] += 1.0,
            _ => soft.iter_mut().zip(&dist).for_each(|(s, d)| *s += d),
        }
    }
    let n = pool.len() as f64;
    soft.iter_mut().for_each(|s| *s /= n);
    Ok(soft)
}

/// Frozen model plus the annotator inputs it was trained with.
#[derive(Clone, Debug)]
pub struct Predictor<'a> {
    pub params: &'a DiscoParams,
    pub config: &'a DiscoConfig,
    /// Rows aligned with the dataset's annotator indices.
    pub annot_feats: &'a FeatureMatrix,
    /// Annotators with training data; the tiling pool and the set whose
    /// identity the model knows.
    pub known: Vec<usize>,
}

impl<'a> Predictor<'a> {
    /// `known` is taken from the annotators that have train-split records in `ds`.
    pub fn new(
        params: &'a DiscoParams,
        config: &'a DiscoConfig,
        annot_feats: &'a FeatureMatrix,
        ds: &AnnotationDataset,
    ) -> Self {
        let train = ds.split_view(Split::Train);
        let mut seen = vec![false; ds.num_annotators()];
        for r in train.records() {
            seen[r.annotator] = true;
        }
        let known: Vec<usize> = (0..ds.num_annotators()).filter(|&n| seen[n]).collect();
        let known = if known.is_empty() {
            (0..ds.num_annotators()).collect()
        } else {
            known
        };
        Predictor {
            params,
            config,
            annot_feats,
            known,
        }
    }
}

/// Task A soft labels for every item of `view` and Task B labels for every
/// requested pair.
pub fn predict_tasks(
    view: &AnnotationDataset,
    item_feats: &FeatureMatrix,
    predictor: &Predictor<'_>,
    agg: Aggregation,
) -> Result<PredictionSet> {
    let ls = view.label_space();
    let ids: Vec<String> = view.items().iter().map(|i| i.item_id.clone()).collect();
    let item_feats = item_feats.select(&ids)?;
    if predictor.annot_feats.len() != view.num_annotators() {
        return Err(DiscoError::Dimension {
            what: "annotator feature rows",
            expected: view.num_annotators(),
            got: predictor.annot_feats.len(),
        });
    }
    let mut known = vec![false; view.num_annotators()];
    for &n in &predictor.known {
        known[n] = true;
    }

    let mut pairs_by_item: Vec<Vec<usize>> = vec![Vec::new(); view.num_items()];
    for (m, n) in view.requested_pairs() {
        pairs_by_item[m].push(n);
    }

    let (p, cfg, af) = (predictor.params, predictor.config, predictor.annot_feats);
    // (soft label, (annotator, label) pairs, fallback count) per item
    type ItemOutput = (Vec<f64>, Vec<(usize, usize)>, usize);
    let per_item: Vec<ItemOutput> = (0..view.num_items())
        .into_par_iter()
        .map(|m| -> Result<_> {
            let x = item_feats.row(m);
            let soft = predict_item_tiled(p, cfg, x, af, Some(&predictor.known), ls, agg)?;
            let mut fallback_dist: Option<Vec<f64>> = None;
            let mut labels = Vec::with_capacity(pairs_by_item[m].len());
            let mut fallbacks = 0;
            for &n in &pairs_by_item[m] {
                let label = if known[n] {
                    predict_pair(p, cfg, x, af.row(n), ls)?.1
                } else {
                    fallbacks += 1;
                    if fallback_dist.is_none() {
                        fallback_dist = Some(if agg == Aggregation::Expectation {
                            soft.clone()
                        } else {
                            predict_item_tiled(
                                p,
                                cfg,
                                x,
                                af,
                                Some(&predictor.known),
                                ls,
                                Aggregation::Expectation,
                            )?
                        });
                    }
                    decide_label(fallback_dist.as_deref().unwrap(), ls)
                };
                labels.push((n, label));
            }
            Ok((soft, labels, fallbacks))
        })
        .collect::<Result<_>>()?;

    let mut out = PredictionSet::new(ls.clone(), agg);
    for (m, (soft, labels, fallbacks)) in per_item.into_iter().enumerate() {
        let item_id = &view.items()[m].item_id;
        out.soft.insert(item_id.clone(), soft);
        for (n, label) in labels {
            out.insert_label(item_id, &view.annotators()[n].annotator_id, label);
        }
        out.fallback_pairs += fallbacks;
    }
    Ok(out)
}
