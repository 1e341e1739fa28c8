//! Mini-batch training over observed (item, annotator, label) triples.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::time::Instant;

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Best, Checkpoint, TrainingState};
use crate::corpus::{AnnotationDataset, Histogram, Split};
use crate::error::{DiscoError, Result};
use crate::features::FeatureMatrix;
use crate::metrics::{evaluate, TaskConfig};
use crate::model::{init_params, DiscoConfig, DiscoParams};
use crate::objective::{adam_step, batch_loss, AdamState, Example, LossConfig, Objective};
use crate::predict::{predict_tasks, Aggregation, Predictor};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionMetric {
    #[default]
    Soft,
    Perspectivist,
    Loss,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub loss: LossConfig,
    pub shuffle_seed: u64,
    pub eval_every: usize,
    pub selection_metric: SelectionMetric,
    /// Soft-label aggregation used for dev evaluation.
    pub aggregation: Aggregation,
    /// Dev metrics; chosen from the label space when absent.
    pub task: Option<TaskConfig>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            batch_size: 64,
            lr: 0.001,
            loss: LossConfig::default(),
            shuffle_seed: 0,
            eval_every: 1,
            selection_metric: SelectionMetric::Soft,
            aggregation: Aggregation::Expectation,
            task: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.eval_every == 0 {
            return Err(DiscoError::Config(
                "epochs, batch_size and eval_every must be >= 1".into(),
            ));
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(DiscoError::Config(format!(
                "lr must be finite and >= 0, got {}",
                self.lr
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub objective: Objective,
    pub dev_soft: Option<f64>,
    pub dev_pe: Option<f64>,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    /// Epoch whose parameters were selected (0-based).
    pub best_epoch: Option<usize>,
    pub optimizer_steps: u64,
}

impl TrainReport {
    pub fn losses(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.loss).collect()
    }

    /// `epoch,loss,objective,dev_soft,dev_pe`; empty cells where no dev evaluation ran.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,loss,objective,dev_soft,dev_pe\n");
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for e in &self.epochs {
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                e.epoch,
                e.loss,
                e.objective.as_str(),
                opt(e.dev_soft),
                opt(e.dev_pe)
            );
        }
        out
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_csv()).map_err(|e| DiscoError::io(path, e))
    }
}

/// Item and annotator inputs, each aligned by id when training starts.
#[derive(Clone, Debug)]
pub struct FeaturePair {
    pub items: FeatureMatrix,
    pub annotators: FeatureMatrix,
}

/// One training run. Owns the parameters and optimizer state; the dataset
/// and features are borrowed read-only.
pub struct Trainer<'a> {
    ds: &'a AnnotationDataset,
    dev: AnnotationDataset,
    item_feats: FeatureMatrix,
    annot_feats: FeatureMatrix,
    cfg: DiscoConfig,
    tc: TrainConfig,
    task: TaskConfig,
    /// (global item index, annotator index, label)
    triples: Vec<(usize, usize, usize)>,
    item_hists: Vec<Histogram>,
    annot_hists: Vec<Histogram>,
    params: DiscoParams,
    adam: AdamState,
    report: TrainReport,
    best: Option<Best>,
}

impl<'a> Trainer<'a> {
    pub fn new(
        ds: &'a AnnotationDataset,
        feats: &FeaturePair,
        cfg: DiscoConfig,
        tc: TrainConfig,
    ) -> Result<Self> {
        let params = init_params(&cfg)?;
        let adam = AdamState::for_params(&params, tc.lr);
        Self::assemble(
            ds,
            feats,
            cfg,
            tc,
            params,
            adam,
            TrainReport::default(),
            None,
        )
    }

    pub fn from_checkpoint(
        ckpt: Checkpoint,
        ds: &'a AnnotationDataset,
        feats: &FeaturePair,
        tc: TrainConfig,
    ) -> Result<Self> {
        let state = ckpt.training.ok_or_else(|| {
            DiscoError::Checkpoint("file holds no training state to resume".into())
        })?;
        if !state.current.matches(&ckpt.config)
            || state.adam.m.len() != state.current.num_parameters()
        {
            return Err(DiscoError::Checkpoint(
                "stored shapes do not match the stored config".into(),
            ));
        }
        let mut adam = state.adam;
        adam.lr = tc.lr;
        Self::assemble(
            ds,
            feats,
            ckpt.config,
            tc,
            state.current,
            adam,
            state.report,
            state.best,
        )
    }

    #[allow(clippy::too_many_arguments)]
    fn assemble(
        ds: &'a AnnotationDataset,
        feats: &FeaturePair,
        cfg: DiscoConfig,
        tc: TrainConfig,
        params: DiscoParams,
        adam: AdamState,
        report: TrainReport,
        best: Option<Best>,
    ) -> Result<Self> {
        cfg.validate()?;
        tc.validate()?;
        let ls = ds.label_space();
        tc.loss.validate(ls)?;
        if cfg.num_classes != ls.len() {
            return Err(DiscoError::Dimension {
                what: "num_classes",
                expected: ls.len(),
                got: cfg.num_classes,
            });
        }
        if feats.items.dim() != cfg.item_input_dim {
            return Err(DiscoError::Dimension {
                what: "item feature dim",
                expected: cfg.item_input_dim,
                got: feats.items.dim(),
            });
        }
        if feats.annotators.dim() != cfg.annot_input_dim {
            return Err(DiscoError::Dimension {
                what: "annotator feature dim",
                expected: cfg.annot_input_dim,
                got: feats.annotators.dim(),
            });
        }
        let item_ids: Vec<String> = ds.items().iter().map(|i| i.item_id.clone()).collect();
        let annot_ids: Vec<String> = ds
            .annotators()
            .iter()
            .map(|a| a.annotator_id.clone())
            .collect();
        let item_feats = feats.items.select(&item_ids)?;
        let annot_feats = feats.annotators.select(&annot_ids)?;

        // Histograms come from the training split only.
        let train = ds.split_view(Split::Train);
        if train.records().is_empty() {
            return Err(DiscoError::Empty(
                "training split has no annotations".into(),
            ));
        }
        let train_item_hists = train.item_histograms();
        let mut item_hists = vec![Histogram::from_counts(&vec![0; ls.len()]); ds.num_items()];
        for (view_m, item) in train.items().iter().enumerate() {
            let m = ds
                .item_index(&item.item_id)
                .expect("view item comes from dataset");
            item_hists[m] = train_item_hists[view_m].clone();
        }
        let annot_hists = train.annotator_histograms();
        let triples = ds
            .records()
            .iter()
            .filter(|r| ds.items()[r.item].split == Split::Train)
            .map(|r| (r.item, r.annotator, r.label))
            .collect();

        let task = tc.task.unwrap_or_else(|| TaskConfig::for_label_space(ls));
        task.validate(ls)?;
        Ok(Trainer {
            ds,
            dev: ds.split_view(Split::Dev),
            item_feats,
            annot_feats,
            cfg,
            tc,
            task,
            triples,
            item_hists,
            annot_hists,
            params,
            adam,
            report,
            best,
        })
    }

    pub fn epochs_done(&self) -> usize {
        self.report.epochs.len()
    }

    pub fn params(&self) -> &DiscoParams {
        &self.params
    }

    pub fn report(&self) -> &TrainReport {
        &self.report
    }

    pub fn config(&self) -> &DiscoConfig {
        &self.cfg
    }

    /// Parameters chosen by the selection metric, falling back to the latest.
    pub fn selected_params(&self) -> &DiscoParams {
        self.best
            .as_ref()
            .map(|b| &b.params)
            .unwrap_or(&self.params)
    }

    fn epoch_seed(&self, epoch: usize) -> u64 {
        self.tc
            .shuffle_seed
            .wrapping_mul(0x9e37_79b9_7f4a_7c15)
            .wrapping_add(epoch as u64)
    }

    fn run_epoch(&mut self, epoch: usize) -> Result<f64> {
        let mut order: Vec<usize> = (0..self.triples.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(self.epoch_seed(epoch)));
        let ls = self.ds.label_space();
        let mut total = 0.0;
        for chunk in order.chunks(self.tc.batch_size) {
            let batch: Vec<Example<'_>> = chunk
                .iter()
                .map(|&i| {
                    let (m, n, y) = self.triples[i];
                    Example {
                        x: self.item_feats.row(m),
                        a: self.annot_feats.row(n),
                        y,
                        item_hist: &self.item_hists[m],
                        annot_hist: &self.annot_hists[n],
                    }
                })
                .collect();
            let (loss, grads) =
                batch_loss(&self.params, &self.cfg, &batch, &self.tc.loss, ls, epoch)?;
            total += loss * batch.len() as f64;
            adam_step(&mut self.params, &grads, &mut self.adam);
            self.report.optimizer_steps += 1;
        }
        Ok(total / self.triples.len() as f64)
    }

    fn evaluate_dev(&self) -> Result<Option<(f64, f64)>> {
        if self.dev.num_items() == 0 || self.dev.records().is_empty() {
            return Ok(None);
        }
        let predictor = Predictor::new(&self.params, &self.cfg, &self.annot_feats, self.ds);
        let preds = predict_tasks(&self.dev, &self.item_feats, &predictor, self.tc.aggregation)?;
        let r = evaluate(&preds, &self.dev, &self.task)?;
        Ok(Some((r.task_a.mean, r.task_b.mean)))
    }

    /// Train until `tc.epochs` epochs are complete. A no-op when they already are.
    pub fn run(&mut self) -> Result<()> {
        while self.epochs_done() < self.tc.epochs {
            let epoch = self.epochs_done();
            let started = Instant::now();
            let loss = self.run_epoch(epoch)?;
            if !loss.is_finite() {
                return Err(DiscoError::Config(format!(
                    "training diverged at epoch {epoch} (loss {loss})"
                )));
            }
            let last = epoch + 1 == self.tc.epochs;
            let dev = if (epoch + 1).is_multiple_of(self.tc.eval_every) || last {
                self.evaluate_dev()?
            } else {
                None
            };
            let record = EpochRecord {
                epoch,
                loss,
                objective: self.tc.loss.objective_at(epoch),
                dev_soft: dev.map(|d| d.0),
                dev_pe: dev.map(|d| d.1),
                seconds: started.elapsed().as_secs_f64(),
            };
            debug!("epoch {epoch}: loss {loss:.6} dev {dev:?}");
            let score = match self.tc.selection_metric {
                SelectionMetric::Soft => record.dev_soft,
                SelectionMetric::Perspectivist => record.dev_pe,
                SelectionMetric::Loss => Some(loss),
            };
            if let Some(score) = score {
                if self.best.as_ref().is_none_or(|b| score < b.score) {
                    self.best = Some(Best {
                        params: self.params.clone(),
                        score,
                        epoch,
                    });
                    self.report.best_epoch = Some(epoch);
                }
            }
            self.report.epochs.push(record);
        }
        if self.best.is_none() {
            self.report.best_epoch = self.epochs_done().checked_sub(1);
        }
        info!(
            "trained {} epochs, {} optimizer steps, selected epoch {:?}",
            self.epochs_done(),
            self.report.optimizer_steps,
            self.report.best_epoch
        );
        Ok(())
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.cfg.clone(),
            params: self.selected_params().clone(),
            training: Some(TrainingState {
                current: self.params.clone(),
                adam: self.adam.clone(),
                report: self.report.clone(),
                best: self.best.clone(),
            }),
        }
    }

    pub fn into_result(self) -> (DiscoParams, TrainReport) {
        let params = match self.best {
            Some(b) => b.params,
            None => self.params,
        };
        (params, self.report)
    }
}

/// Train from scratch; returns the selected parameters and the full report.
pub fn train(
    ds: &AnnotationDataset,
    feats: &FeaturePair,
    cfg: &DiscoConfig,
    tc: &TrainConfig,
) -> Result<(DiscoParams, TrainReport)> {
    let mut trainer = Trainer::new(ds, feats, cfg.clone(), tc.clone())?;
    trainer.run()?;
    Ok(trainer.into_result())
}

/// Continue a checkpointed run up to `tc.epochs`.
pub fn resume(
    checkpoint: impl AsRef<Path>,
    ds: &AnnotationDataset,
    feats: &FeaturePair,
    tc: &TrainConfig,
) -> Result<(DiscoParams, TrainReport, Checkpoint)> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let mut trainer = Trainer::from_checkpoint(ckpt, ds, feats, tc.clone())?;
    trainer.run()?;
    let ckpt = trainer.checkpoint();
    let (params, report) = trainer.into_result();
    Ok((params, report, ckpt))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::one_hot_annotators;
    use crate::objective::LossKind;
    use crate::synthgen::{generate, GeneratorSpec};

    fn small() -> (AnnotationDataset, FeaturePair, DiscoConfig) {
        let mut spec = GeneratorSpec::diagonal(30, 6, 3, 3, 0.8, 8, 11);
        spec.ordinal = true;
        let g = generate(&spec).unwrap();
        let annot = one_hot_annotators(6)
            .unwrap()
            .with_ids(
                g.dataset
                    .annotators()
                    .iter()
                    .map(|a| a.annotator_id.clone())
                    .collect(),
            )
            .unwrap();
        let cfg = DiscoConfig::new(8, 6, 6, 3, 3);
        (
            g.dataset,
            FeaturePair {
                items: g.item_features,
                annotators: annot,
            },
            cfg,
        )
    }

    #[test]
    fn one_epoch_step_count() {
        let (ds, feats, cfg) = small();
        let n_train = ds.split_view(Split::Train).records().len();
        let tc = TrainConfig {
            epochs: 1,
            batch_size: 7,
            ..Default::default()
        };
        let (_, report) = train(&ds, &feats, &cfg, &tc).unwrap();
        assert_eq!(report.optimizer_steps as usize, n_train.div_ceil(7));
        assert_eq!(report.epochs.len(), 1);
    }

    #[test]
    fn zero_learning_rate_leaves_parameters_untouched() {
        let (ds, feats, cfg) = small();
        let tc = TrainConfig {
            epochs: 3,
            batch_size: 8,
            lr: 0.0,
            ..Default::default()
        };
        let (params, _) = train(&ds, &feats, &cfg, &tc).unwrap();
        assert_eq!(params, init_params(&cfg).unwrap());
    }

    #[test]
    fn alternating_objective_labels_follow_parity() {
        let (ds, feats, cfg) = small();
        let tc = TrainConfig {
            epochs: 4,
            batch_size: 16,
            loss: LossConfig::of_kind(LossKind::Alternating),
            ..Default::default()
        };
        let (_, report) = train(&ds, &feats, &cfg, &tc).unwrap();
        let objs: Vec<_> = report.epochs.iter().map(|e| e.objective).collect();
        assert_eq!(
            objs,
            vec![
                Objective::Wasserstein,
                Objective::Mae,
                Objective::Wasserstein,
                Objective::Mae
            ]
        );
        assert!(report.to_csv().lines().nth(2).unwrap().contains(",mae,"));
    }

    #[test]
    fn dimension_mismatch_and_bad_config_are_rejected() {
        let (ds, feats, mut cfg) = small();
        cfg.item_input_dim = 9;
        assert!(matches!(
            train(&ds, &feats, &cfg, &TrainConfig::default()),
            Err(DiscoError::Dimension { .. })
        ));
        cfg.item_input_dim = 8;
        let tc = TrainConfig {
            epochs: 0,
            ..Default::default()
        };
        assert!(train(&ds, &feats, &cfg, &tc).is_err());
    }

    #[test]
    fn report_csv_has_header_and_one_row_per_epoch() {
        let (ds, feats, cfg) = small();
        let tc = TrainConfig {
            epochs: 2,
            eval_every: 2,
            ..Default::default()
        };
        let (_, report) = train(&ds, &feats, &cfg, &tc).unwrap();
        let csv = report.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "epoch,loss,objective,dev_soft,dev_pe");
        assert_eq!(lines.len(), 3);
        assert!(
            lines[1].ends_with(",,"),
            "no dev eval on epoch 0: {}",
            lines[1]
        );
        assert!(!lines[2].ends_with(",,"));
    }
}
