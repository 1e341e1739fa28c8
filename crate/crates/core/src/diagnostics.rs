//! Error analysis tables: calibration against gold agreement, per-label
//! error, NAD histogram, per-annotator error, error against item length and
//! gold entropy, and token frequencies of the hardest and easiest items.
//!
//! Everything is returned as plain rows and written as CSV; plotting is left
//! to external tools.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use indexmap::IndexMap;
use log::warn;
use serde::Serialize;

use crate::corpus::{AnnotationDataset, Histogram, Item, LabelSpace};
use crate::error::{DiscoError, Result};
use crate::metrics::{
    gold_pairs, gold_soft_labels, lookup, pair_error, score_perspectivist, score_soft, GoldPair,
    PerspectivistMetric, SoftMetric, TaskConfig,
};
use crate::predict::PredictionSet;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CalibrationRow {
    pub bin: usize,
    pub lower: f64,
    pub upper: f64,
    /// Empty when the bin has no items.
    pub mean_modal_prob: Option<f64>,
    pub mean_error: Option<f64>,
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LabelErrorRow {
    pub label: String,
    pub mean_abs_error: Option<f64>,
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct HistogramBin {
    pub bin: usize,
    pub lower: f64,
    pub upper: f64,
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AnnotatorErrorRow {
    pub annotator_id: String,
    pub error: f64,
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CovariateRow {
    pub item_id: String,
    pub token_count: usize,
    pub gold_entropy: f64,
    pub error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TokenCount {
    pub token: String,
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TokenTables {
    pub hard: Vec<TokenCount>,
    pub easy: Vec<TokenCount>,
    pub hard_items: Vec<String>,
    pub easy_items: Vec<String>,
    /// All errors were equal, so both tables cover every item.
    pub degenerate: bool,
}

/// Index of the equal-width bin over `[lo, hi]` holding `x`; values outside
/// are clamped to the end bins.
fn bin_of(x: f64, lo: f64, hi: f64, bins: usize) -> usize {
    if hi <= lo {
        return 0;
    }
    let t = ((x - lo) / (hi - lo) * bins as f64).floor();
    if t < 0.0 {
        0
    } else {
        (t as usize).min(bins - 1)
    }
}

fn bin_edges(lo: f64, hi: f64, bins: usize, b: usize) -> (f64, f64) {
    let w = (hi - lo) / bins as f64;
    let upper = if b + 1 == bins {
        hi
    } else {
        lo + w * (b + 1) as f64
    };
    (lo + w * b as f64, upper)
}

/// Items bucketed by gold modal probability into `bins` equal-width bins over
/// `[1/C, 1]`, with the mean per-item error in each bin. Items without gold
/// are skipped.
pub fn calibration_table(
    per_item: &IndexMap<String, f64>,
    gold: &IndexMap<String, Histogram>,
    num_classes: usize,
    bins: usize,
) -> Result<Vec<CalibrationRow>> {
    if bins < 2 {
        return Err(DiscoError::Config(format!(
            "calibration needs at least 2 bins, got {bins}"
        )));
    }
    let lo = 1.0 / num_classes as f64;
    let mut acc = vec![(0.0, 0.0, 0usize); bins];
    for (item, &err) in per_item {
        let Some(h) = gold.get(item).filter(|h| h.is_valid()) else {
            continue;
        };
        let p = h.modal_probability();
        let slot = &mut acc[bin_of(p, lo, 1.0, bins)];
        slot.0 += p;
        slot.1 += err;
        slot.2 += 1;
    }
    if acc.iter().all(|a| a.2 == 0) {
        return Err(DiscoError::Empty(
            "no evaluated item has a gold histogram".into(),
        ));
    }
    Ok(acc
        .into_iter()
        .enumerate()
        .map(|(b, (p, e, n))| {
            let (lower, upper) = bin_edges(lo, 1.0, bins, b);
            CalibrationRow {
                bin: b,
                lower,
                upper,
                mean_modal_prob: (n > 0).then(|| p / n as f64),
                mean_error: (n > 0).then(|| e / n as f64),
                count: n,
            }
        })
        .collect())
}

/// Mean |value(pred) − value(gold)| grouped by gold label, one row per label.
pub fn per_label_error(
    preds: &PredictionSet,
    golds: &[GoldPair],
    ls: &LabelSpace,
) -> Result<Vec<LabelErrorRow>> {
    ls.require_ordinal("per-label error")?;
    let mut acc = vec![(0.0, 0usize); ls.len()];
    for g in golds {
        let pred = lookup(preds, g)?;
        acc[g.label].0 += (ls.value(pred) - ls.value(g.label)).abs();
        acc[g.label].1 += 1;
    }
    Ok(acc
        .into_iter()
        .enumerate()
        .map(|(k, (s, n))| LabelErrorRow {
            label: ls.label(k).to_string(),
            mean_abs_error: (n > 0).then(|| s / n as f64),
            count: n,
        })
        .collect())
}

/// Counts of `scores` in `bins` equal-width bins over `[0, 1]`.
pub fn nad_distribution(scores: &[f64], bins: usize) -> Result<Vec<HistogramBin>> {
    if bins == 0 {
        return Err(DiscoError::Config(
            "histogram needs at least one bin".into(),
        ));
    }
    if let Some(s) = scores.iter().find(|s| !(0.0..=1.0).contains(*s)) {
        return Err(DiscoError::Config(format!(
            "NAD score {s} is outside [0, 1]"
        )));
    }
    let mut counts = vec![0usize; bins];
    for &s in scores {
        counts[bin_of(s, 0.0, 1.0, bins)] += 1;
    }
    Ok(counts
        .into_iter()
        .enumerate()
        .map(|(b, count)| {
            let (lower, upper) = bin_edges(0.0, 1.0, bins, b);
            HistogramBin {
                bin: b,
                lower,
                upper,
                count,
            }
        })
        .collect())
}

/// Mean pair error per annotator, in order of first appearance in `golds`.
pub fn annotator_error_table(
    preds: &PredictionSet,
    golds: &[GoldPair],
    ls: &LabelSpace,
    metric: PerspectivistMetric,
    normalized: bool,
) -> Result<Vec<AnnotatorErrorRow>> {
    if metric == PerspectivistMetric::AbsDistance {
        ls.require_ordinal("the absolute distance metric")?;
    }
    let mut acc: IndexMap<&str, (f64, usize)> = IndexMap::new();
    for g in golds {
        let e = pair_error(metric, lookup(preds, g)?, g.label, ls, normalized);
        let slot = acc.entry(g.annotator.as_str()).or_insert((0.0, 0));
        slot.0 += e;
        slot.1 += 1;
    }
    Ok(acc
        .into_iter()
        .map(|(a, (s, n))| AnnotatorErrorRow {
            annotator_id: a.to_string(),
            error: s / n as f64,
            count: n,
        })
        .collect())
}

/// Whitespace token count, gold entropy (nats) and error for every item that
/// has both a per-item error and a gold histogram.
pub fn error_vs_covariates(
    ds: &AnnotationDataset,
    per_item: &IndexMap<String, f64>,
) -> Vec<CovariateRow> {
    let hists = ds.item_histograms();
    ds.items()
        .iter()
        .zip(&hists)
        .filter(|(_, h)| h.is_valid())
        .filter_map(|(item, h)| {
            per_item.get(&item.item_id).map(|&error| CovariateRow {
                item_id: item.item_id.clone(),
                token_count: item.joined_text().split_whitespace().count(),
                gold_entropy: h.entropy(),
                error,
            })
        })
        .collect()
}

fn token_table<'a>(items: impl IntoIterator<Item = &'a Item>) -> Vec<TokenCount> {
    let mut counts: HashMap<String, usize> = HashMap::new();
    for item in items {
        for tok in item.joined_text().split_whitespace() {
            *counts.entry(tok.to_lowercase()).or_default() += 1;
        }
    }
    let mut rows: Vec<TokenCount> = counts
        .into_iter()
        .map(|(token, count)| TokenCount { token, count })
        .collect();
    rows.sort_by(|a, b| b.count.cmp(&a.count).then_with(|| a.token.cmp(&b.token)));
    rows
}

/// Token frequencies of the top and bottom `quantile` of items by error.
/// The cut uses the nearest-rank rule: `ceil(quantile * n)` items per side,
/// ranked by error with ties kept in dataset order.
pub fn hard_easy_tokens(
    items: &[Item],
    per_item: &IndexMap<String, f64>,
    quantile: f64,
) -> Result<TokenTables> {
    if !(quantile > 0.0 && quantile <= 0.5) {
        return Err(DiscoError::Config(format!(
            "quantile must be in (0, 0.5], got {quantile}"
        )));
    }
    let mut scored: Vec<(&Item, f64)> = items
        .iter()
        .filter_map(|i| per_item.get(&i.item_id).map(|&e| (i, e)))
        .collect();
    if scored.len() < 4 {
        return Err(DiscoError::Empty(format!(
            "token analysis needs at least 4 scored items, got {}",
            scored.len()
        )));
    }
    let first = scored[0].1;
    if scored.iter().all(|&(_, e)| e == first) {
        warn!("all item errors are equal; hardest and easiest tables both cover every item");
        let ids: Vec<String> = scored.iter().map(|(i, _)| i.item_id.clone()).collect();
        let table = token_table(scored.iter().map(|&(i, _)| i));
        return Ok(TokenTables {
            hard: table.clone(),
            easy: table,
            hard_items: ids.clone(),
            easy_items: ids,
            degenerate: true,
        });
    }
    scored.sort_by(|a, b| a.1.total_cmp(&b.1));
    let k = ((quantile * scored.len() as f64).ceil() as usize).max(1);
    let easy = &scored[..k];
    let hard = &scored[scored.len() - k..];
    Ok(TokenTables {
        hard: token_table(hard.iter().map(|&(i, _)| i)),
        easy: token_table(easy.iter().map(|&(i, _)| i)),
        hard_items: hard.iter().map(|(i, _)| i.item_id.clone()).collect(),
        easy_items: easy.iter().map(|(i, _)| i.item_id.clone()).collect(),
        degenerate: false,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct DiagnosticsConfig {
    pub task: TaskConfig,
    /// Soft metric used to rank items; defaults to `task.task_a`.
    pub error_metric: Option<SoftMetric>,
    pub calibration_bins: usize,
    pub nad_bins: usize,
    pub quantile: f64,
}

impl DiagnosticsConfig {
    pub fn for_label_space(ls: &LabelSpace) -> Self {
        DiagnosticsConfig {
            task: TaskConfig::for_label_space(ls),
            error_metric: None,
            calibration_bins: 10,
            nad_bins: 10,
            quantile: 0.25,
        }
    }
}

/// Every table for one prediction set. Tables that need an ordinal label
/// space are `None` on categorical data.
#[derive(Clone, Debug, PartialEq)]
pub struct Diagnostics {
    pub calibration: Vec<CalibrationRow>,
    pub per_label: Option<Vec<LabelErrorRow>>,
    pub nad_hist: Option<Vec<HistogramBin>>,
    pub annotator_error: Vec<AnnotatorErrorRow>,
    pub covariates: Vec<CovariateRow>,
    pub tokens: TokenTables,
}

pub fn run_diagnostics(
    preds: &PredictionSet,
    eval: &AnnotationDataset,
    cfg: &DiagnosticsConfig,
) -> Result<Diagnostics> {
    let ls = eval.label_space();
    cfg.task.validate(ls)?;
    let metric = cfg.error_metric.unwrap_or(cfg.task.task_a);
    let soft = score_soft(preds, &gold_soft_labels(eval), metric, ls)?;
    let gold_hists: IndexMap<String, Histogram> = eval
        .items()
        .iter()
        .map(|i| i.item_id.clone())
        .zip(eval.item_histograms())
        .collect();
    let golds = gold_pairs(eval);
    let (per_label, nad_hist) = if ls.is_ordinal() {
        let nad = score_perspectivist(preds, eval, PerspectivistMetric::AbsDistance, true)?;
        let scores: Vec<f64> = nad.per_item.values().copied().collect();
        (
            Some(per_label_error(preds, &golds, ls)?),
            Some(nad_distribution(&scores, cfg.nad_bins)?),
        )
    } else {
        warn!("label space is not ordinal; skipping per-label error and NAD histogram");
        (None, None)
    };
    Ok(Diagnostics {
        calibration: calibration_table(
            &soft.per_item,
            &gold_hists,
            ls.len(),
            cfg.calibration_bins,
        )?,
        per_label,
        nad_hist,
        annotator_error: annotator_error_table(
            preds,
            &golds,
            ls,
            cfg.task.task_b,
            cfg.task.normalized,
        )?,
        covariates: error_vs_covariates(eval, &soft.per_item),
        tokens: hard_easy_tokens(eval.items(), &soft.per_item, cfg.quantile)?,
    })
}

fn write_csv<T: Serialize>(dir: &Path, name: &str, rows: &[T], header: &[&str]) -> Result<()> {
    let path = dir.join(name);
    let csv_err = |e: csv::Error| DiscoError::Io {
        path: path.clone(),
        source: e.into(),
    };
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_path(&path)
        .map_err(csv_err)?;
    w.write_record(header).map_err(csv_err)?;
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush().map_err(|e| DiscoError::io(&path, e))
}

impl Diagnostics {
    /// Writes one CSV per table into `dir`, creating it if needed. Returns
    /// the file names written.
    pub fn write_csvs(&self, dir: impl AsRef<Path>) -> Result<Vec<&'static str>> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| DiscoError::io(dir, e))?;
        let mut written = Vec::new();
        write_csv(
            dir,
            "calibration.csv",
            &self.calibration,
            &[
                "bin",
                "lower",
                "upper",
                "mean_modal_prob",
                "mean_error",
                "count",
            ],
        )?;
        written.push("calibration.csv");
        if let Some(rows) = &self.per_label {
            write_csv(
                dir,
                "per_label_error.csv",
                rows,
                &["label", "mean_abs_error", "count"],
            )?;
            written.push("per_label_error.csv");
        }
        if let Some(rows) = &self.nad_hist {
            write_csv(
                dir,
                "nad_hist.csv",
                rows,
                &["bin", "lower", "upper", "count"],
            )?;
            written.push("nad_hist.csv");
        }
        write_csv(
            dir,
            "annotator_error.csv",
            &self.annotator_error,
            &["annotator_id", "error", "count"],
        )?;
        written.push("annotator_error.csv");
        write_csv(
            dir,
            "covariates.csv",
            &self.covariates,
            &["item_id", "token_count", "gold_entropy", "error"],
        )?;
        written.push("covariates.csv");
        write_csv(
            dir,
            "tokens_hard.csv",
            &self.tokens.hard,
            &["token", "count"],
        )?;
        write_csv(
            dir,
            "tokens_easy.csv",
            &self.tokens.easy,
            &["token", "count"],
        )?;
        written.extend(["tokens_hard.csv", "tokens_easy.csv"]);
        Ok(written)
    }
}
