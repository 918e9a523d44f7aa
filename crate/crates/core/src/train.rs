//! Training loops: mini-batch Adam with early stopping, block-wise continual
//! fine-tuning, and parameter-delta tracking.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use log::{debug, info};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::{ContinualBlocks, SplitView};
use crate::error::{KanError, Result};
use crate::metrics::{continual_metrics, evaluate, multi_hot, ContinualReport, EvalReport, EvalSet};
use crate::model::CfModel;
use crate::optim::{clip_global_norm, Adam, AdamConfig};
use crate::params::Parameters;
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub max_epochs: usize,
    /// Epochs without a validation improvement before stopping; 0 disables
    /// early stopping.
    pub patience: usize,
    pub seed: u64,
    /// Optional global gradient-norm cap.
    pub clip_norm: Option<f64>,
    /// Cutoff of the validation recall used for model selection.
    pub select_k: usize,
    /// Epoch budget per incremental block; defaults to `max_epochs`.
    pub block_epochs: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 256,
            learning_rate: 1e-3,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            max_epochs: 100,
            patience: 10,
            seed: 0,
            clip_norm: None,
            select_k: 20,
            block_epochs: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(KanError::InvalidConfig(m));
        if self.batch_size == 0 {
            return bad("batch size must be >= 1".into());
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning rate must be non-negative, got {}", self.learning_rate));
        }
        if !(0.0 < self.adam_beta1 && self.adam_beta1 < 1.0 && 0.0 < self.adam_beta2 && self.adam_beta2 < 1.0) {
            return bad("adam betas must lie in (0, 1)".into());
        }
        if !(self.adam_eps > 0.0) {
            return bad("adam eps must be positive".into());
        }
        if self.max_epochs == 0 || self.select_k == 0 {
            return bad("max epochs and selection K must be >= 1".into());
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig { learning_rate: self.learning_rate, beta1: self.adam_beta1, beta2: self.adam_beta2, eps: self.adam_eps }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub recon: f64,
    pub reg: f64,
    pub val_recall: Option<f64>,
    pub val_ndcg: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct History {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
    pub best_val_recall: Option<f64>,
}

impl History {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,loss,recon,reg,val_recall,val_ndcg\n");
        let opt = |v: Option<f64>| v.map(|x| format!("{x:.17e}")).unwrap_or_default();
        for e in &self.epochs {
            out.push_str(&format!(
                "{},{:.17e},{:.17e},{:.17e},{},{}\n",
                e.epoch,
                e.loss,
                e.recon,
                e.reg,
                opt(e.val_recall),
                opt(e.val_ndcg)
            ));
        }
        out
    }
}

/// Which parameters of which layer a [`DeltaTracker`] follows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrackSpec {
    /// Layer index; `None` selects the output layer.
    pub layer: Option<usize>,
    pub rows: usize,
    pub cols: usize,
    pub every: usize,
}

impl Default for TrackSpec {
    fn default() -> Self {
        Self { layer: None, rows: 10, cols: 10, every: 1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeltaSnapshot {
    pub step: u64,
    pub rows: usize,
    pub cols: usize,
    /// `|theta_t - theta_{t-n}|`, row-major.
    pub deltas: Vec<f64>,
}

impl DeltaSnapshot {
    /// Fraction of entries whose delta exceeds `ratio` times the largest delta.
    pub fn active_fraction(&self, ratio: f64) -> f64 {
        let max = self.deltas.iter().copied().fold(0.0, f64::max);
        if max == 0.0 || self.deltas.is_empty() {
            return 0.0;
        }
        self.deltas.iter().filter(|d| **d > ratio * max).count() as f64 / self.deltas.len() as f64
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for r in 0..self.rows {
            let row: Vec<String> = self.deltas[r * self.cols..(r + 1) * self.cols].iter().map(|v| format!("{v:e}")).collect();
            out.push_str(&row.join(","));
            out.push('\n');
        }
        out
    }
}

/// Snapshots of tracked-parameter deltas: the first spline coefficient of
/// each KAN edge or the weight of each dense connection, for the top-left
/// `rows x cols` block of one layer.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct DeltaTrace {
    pub snapshots: Vec<DeltaSnapshot>,
}

impl DeltaTrace {
    /// Mean over snapshots of [`DeltaSnapshot::active_fraction`].
    pub fn locality(&self, ratio: f64) -> f64 {
        if self.snapshots.is_empty() {
            return 0.0;
        }
        self.snapshots.iter().map(|s| s.active_fraction(ratio)).sum::<f64>() / self.snapshots.len() as f64
    }

    /// Writes one CSV per snapshot into `dir`; returns the file paths.
    pub fn export_csv(&self, dir: &Path, prefix: &str) -> Result<Vec<PathBuf>> {
        fs::create_dir_all(dir)?;
        self.snapshots
            .iter()
            .map(|s| {
                let path = dir.join(format!("{prefix}_{:08}.csv", s.step));
                fs::File::create(&path)?.write_all(s.to_csv().as_bytes())?;
                Ok(path)
            })
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct DeltaTracker {
    spec: TrackSpec,
    layer: usize,
    rows: usize,
    cols: usize,
    previous: Vec<f64>,
    steps: u64,
    trace: DeltaTrace,
}

impl DeltaTracker {
    pub fn new(model: &CfModel, spec: TrackSpec) -> Result<Self> {
        if spec.every == 0 {
            return Err(KanError::InvalidArgument("delta tracking interval must be >= 1".into()));
        }
        let layer = spec.layer.unwrap_or(model.layers().len() - 1);
        let l = model
            .layers()
            .get(layer)
            .ok_or_else(|| KanError::InvalidArgument(format!("no layer {layer} to track")))?;
        let rows = spec.rows.min(l.n_out());
        let cols = spec.cols.min(l.n_in());
        let mut t = Self { spec, layer, rows, cols, previous: Vec::new(), steps: 0, trace: DeltaTrace::default() };
        t.previous = t.read(model);
        Ok(t)
    }

    fn read(&self, model: &CfModel) -> Vec<f64> {
        let layer = &model.layers()[self.layer];
        let groups = layer.param_groups();
        let mut out = Vec::with_capacity(self.rows * self.cols);
        for q in 0..self.rows {
            for p in 0..self.cols {
                let (g, i) = layer.tracked_param_index(q, p);
                out.push(groups[g][i]);
            }
        }
        out
    }

    /// Call after every optimizer step.
    pub fn after_step(&mut self, model: &CfModel) {
        self.steps += 1;
        if !self.steps.is_multiple_of(self.spec.every as u64) {
            return;
        }
        let now = self.read(model);
        let deltas = now.iter().zip(&self.previous).map(|(a, b)| (a - b).abs()).collect();
        self.trace.snapshots.push(DeltaSnapshot { step: self.steps, rows: self.rows, cols: self.cols, deltas });
        self.previous = now;
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn trace(&self) -> &DeltaTrace {
        &self.trace
    }

    pub fn into_trace(self) -> DeltaTrace {
        self.trace
    }
}

/// Mini-batch Adam on the training split with per-epoch validation.
///
/// The parameters with the best validation recall are restored on exit. When
/// the split has no validation items the final parameters are kept.
pub fn train(
    model: &mut CfModel,
    view: &SplitView,
    config: &TrainConfig,
    mut tracker: Option<&mut DeltaTracker>,
) -> Result<History> {
    config.validate()?;
    let users = view.train_users();
    let rows: Vec<&[u32]> = (0..view.n_users()).map(|u| view.train(u)).collect();
    let val_set = EvalSet::validation(view);
    let mut adam = Adam::new(config.adam());
    let mut shuffle = rng::stream(config.seed, rng::STREAM_SHUFFLE);
    let mut order = users.clone();
    let mut history = History::default();
    let mut best: Option<(f64, CfModel)> = None;
    let mut stale = 0usize;

    for epoch in 1..=config.max_epochs {
        order.shuffle(&mut shuffle);
        let (mut loss_sum, mut recon_sum, mut reg_sum) = (0.0, 0.0, 0.0);
        for chunk in order.chunks(config.batch_size) {
            let batch_rows: Vec<&[u32]> = chunk.iter().map(|u| rows[*u]).collect();
            let input = multi_hot(&batch_rows, model.item_count());
            let (loss, mut grads) = model.gradients(input.view())?;
            if !loss.total.is_finite() {
                return Err(KanError::Diverged { epoch });
            }
            if let Some(c) = config.clip_norm {
                clip_global_norm(&mut grads, c);
            }
            adam.step_model(model, &grads);
            if !model.is_finite() {
                return Err(KanError::Diverged { epoch });
            }
            if let Some(t) = tracker.as_deref_mut() {
                t.after_step(model);
            }
            let w = chunk.len() as f64;
            loss_sum += loss.total * w;
            recon_sum += loss.recon * w;
            reg_sum += loss.reg * w;
        }
        let n = users.len().max(1) as f64;
        let mut record = EpochRecord {
            epoch,
            loss: loss_sum / n,
            recon: recon_sum / n,
            reg: reg_sum / n,
            val_recall: None,
            val_ndcg: None,
        };
        if !val_set.is_empty() {
            let report = evaluate(model, &val_set, &[config.select_k], config.batch_size, false)?;
            let recall = report.recall(config.select_k).unwrap_or(0.0);
            record.val_recall = Some(recall);
            record.val_ndcg = report.ndcg(config.select_k);
            if best.as_ref().is_none_or(|(b, _)| recall > *b) {
                best = Some((recall, model.clone()));
                history.best_epoch = Some(epoch);
                history.best_val_recall = Some(recall);
                stale = 0;
            } else {
                stale += 1;
            }
        }
        debug!(
            "epoch {epoch}: loss {:.6} recon {:.6} reg {:.6} val R@{} {:?}",
            record.loss, record.recon, record.reg, config.select_k, record.val_recall
        );
        history.epochs.push(record);
        if config.patience > 0 && stale >= config.patience {
            info!("early stop at epoch {epoch}; best epoch {:?}", history.best_epoch);
            break;
        }
    }
    if let Some((_, best_model)) = best {
        *model = best_model;
    }
    Ok(history)
}

/// Evaluates a trained model on a split's test items.
pub fn evaluate_test(model: &CfModel, view: &SplitView, ks: &[usize], batch_size: usize) -> Result<EvalReport> {
    evaluate(model, &EvalSet::test(view), ks, batch_size, false)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContinualOutcome {
    pub report: ContinualReport,
    pub histories: Vec<History>,
    #[serde(skip)]
    pub trace: Option<DeltaTrace>,
}

/// Test set for block `j` after the model has seen blocks `0..=j`: the input
/// and mask are the user's training and validation items across those
/// blocks; the targets are block `j`'s test items.
pub fn block_test_set(blocks: &ContinualBlocks, j: usize) -> EvalSet {
    let target = &blocks.blocks[j];
    let mut set = EvalSet::default();
    for u in 0..target.n_users() {
        if target.test(u).is_empty() {
            continue;
        }
        let mut seen: Vec<u32> = blocks.blocks[..=j]
            .iter()
            .flat_map(|b| b.train(u).iter().chain(b.valid(u)).copied())
            .collect();
        seen.sort_unstable();
        seen.dedup();
        set.users.push(u);
        set.inputs.push(seen.clone());
        set.masks.push(seen);
        set.targets.push(target.test(u).to_vec());
    }
    set
}

/// Trains on the base block, then fine-tunes block by block (warm start,
/// fresh Adam moments). After block `i` the model is scored on the test
/// items of every block `j <= i`, filling `a[i-1][j-1]` with Recall@`k`.
pub fn continual_train(
    model: &mut CfModel,
    blocks: &ContinualBlocks,
    config: &TrainConfig,
    k: usize,
    track: Option<TrackSpec>,
) -> Result<ContinualOutcome> {
    config.validate()?;
    let n = blocks.n_incremental();
    if n == 0 {
        return Err(KanError::InvalidArgument("continual training needs at least one incremental block".into()));
    }
    let mut tracker = track.map(|spec| DeltaTracker::new(model, spec)).transpose()?;
    let mut histories = Vec::with_capacity(n + 1);
    info!("training base block");
    histories.push(train(model, blocks.base(), config, tracker.as_mut())?);

    let block_config = TrainConfig { max_epochs: config.block_epochs.unwrap_or(config.max_epochs), ..config.clone() };
    let mut a: Vec<Vec<f64>> = Vec::with_capacity(n);
    for i in 1..=n {
        info!("fine-tuning on block D{i}");
        let cfg = TrainConfig { seed: config.seed.wrapping_add(i as u64), ..block_config.clone() };
        histories.push(train(model, &blocks.blocks[i], &cfg, tracker.as_mut())?);
        let row = (1..=i)
            .map(|j| {
                let report = evaluate(model, &block_test_set(blocks, j), &[k], config.batch_size, false)?;
                Ok(report.recall(k).unwrap_or(0.0))
            })
            .collect::<Result<Vec<f64>>>()?;
        a.push(row);
    }
    let report = continual_metrics(&a, n)?;
    Ok(ContinualOutcome { report, histories, trace: tracker.map(DeltaTracker::into_trace) })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{split_continual, InteractionDataset, RawInteraction};
    use crate::model::{ModelConfig, ModelKind};

    fn toy_dataset(users: usize, items: usize, seed: u64) -> InteractionDataset {
        use rand::Rng;
        let mut r = rng::stream(seed, "toy");
        let mut rows = Vec::new();
        let mut t = 0;
        for u in 0..users {
            for i in 0..items {
                if r.random_bool(0.3) {
                    t += 1;
                    rows.push(RawInteraction { user: format!("u{u}"), item: format!("i{i}"), timestamp: Some(t) });
                }
            }
        }
        InteractionDataset::from_records(rows).unwrap()
    }

    fn toy_model(kind: ModelKind, items: usize) -> CfModel {
        CfModel::build(ModelConfig { kind, item_count: items, latent_dim: 4, seed: 3, ..ModelConfig::default() }).unwrap()
    }

    #[test]
    fn patience_zero_runs_every_epoch() {
        let d = toy_dataset(30, 12, 1);
        let view = crate::data::split_static(&d, [0.8, 0.1, 0.1], 1).unwrap();
        let mut m = toy_model(ModelKind::Kan, d.n_items());
        let cfg = TrainConfig { max_epochs: 7, patience: 0, batch_size: 8, ..TrainConfig::default() };
        let h = train(&mut m, &view, &cfg, None).unwrap();
        assert_eq!(h.epochs.len(), 7);
    }

    #[test]
    fn restores_best_validation_parameters() {
        let d = toy_dataset(40, 12, 2);
        let view = crate::data::split_static(&d, [0.6, 0.2, 0.2], 2).unwrap();
        let mut m = toy_model(ModelKind::Kan, d.n_items());
        let cfg = TrainConfig { max_epochs: 15, patience: 0, batch_size: 8, learning_rate: 1e-2, ..TrainConfig::default() };
        let h = train(&mut m, &view, &cfg, None).unwrap();
        let best = h.epochs.iter().filter_map(|e| e.val_recall).fold(f64::MIN, f64::max);
        assert_eq!(h.best_val_recall, Some(best));
        let after = evaluate(&m, &EvalSet::validation(&view), &[20], 64, false).unwrap();
        assert_eq!(after.recall(20), Some(best));
    }

    #[test]
    fn history_is_reproducible() {
        let d = toy_dataset(30, 10, 3);
        let view = crate::data::split_static(&d, [0.8, 0.1, 0.1], 3).unwrap();
        let cfg = TrainConfig { max_epochs: 5, patience: 0, batch_size: 8, ..TrainConfig::default() };
        let mut a = toy_model(ModelKind::Kan, d.n_items());
        let mut b = toy_model(ModelKind::Kan, d.n_items());
        let ha = train(&mut a, &view, &cfg, None).unwrap();
        let hb = train(&mut b, &view, &cfg, None).unwrap();
        assert_eq!(ha.to_csv(), hb.to_csv());
        assert_eq!(a, b);
    }

    #[test]
    fn frozen_model_has_zero_deltas_and_expected_snapshot_count() {
        let d = toy_dataset(30, 10, 4);
        let view = crate::data::split_static(&d, [0.8, 0.1, 0.1], 4).unwrap();
        let mut m = toy_model(ModelKind::Kan, d.n_items());
        let spec = TrackSpec { every: 3, ..TrackSpec::default() };
        let mut tracker = DeltaTracker::new(&m, spec).unwrap();
        let cfg = TrainConfig { max_epochs: 4, patience: 0, batch_size: 4, learning_rate: 0.0, ..TrainConfig::default() };
        train(&mut m, &view, &cfg, Some(&mut tracker)).unwrap();
        let steps = tracker.steps();
        let trace = tracker.into_trace();
        assert_eq!(trace.snapshots.len() as u64, steps / 3);
        assert!(trace.snapshots.iter().all(|s| s.deltas.iter().all(|d| *d == 0.0)));
        assert_eq!(trace.locality(0.1), 0.0);
    }

    #[test]
    fn continual_shapes() {
        let d = toy_dataset(40, 12, 5);
        let cfg = TrainConfig { max_epochs: 3, patience: 0, batch_size: 16, ..TrainConfig::default() };

        let blocks = split_continual(&d, 0.5, 3, [0.8, 0.1, 0.1], 5).unwrap();
        let mut m = toy_model(ModelKind::Mlp, d.n_items());
        let out = continual_train(&mut m, &blocks, &cfg, 20, None).unwrap();
        assert_eq!(out.report.a.len(), 3);
        for (i, row) in out.report.a.iter().enumerate() {
            assert_eq!(row.len(), i + 1);
        }
        assert_eq!(out.histories.len(), 4);

        let one = split_continual(&d, 0.5, 1, [0.8, 0.1, 0.1], 5).unwrap();
        let mut m = toy_model(ModelKind::Kan, d.n_items());
        let out = continual_train(&mut m, &one, &cfg, 20, None).unwrap();
        assert_eq!(out.report.a.len(), 1);
        assert_eq!(out.report.la, out.report.a[0][0]);
        assert_eq!(out.report.ra, out.report.a[0][0]);
    }

    #[test]
    fn block_test_inputs_never_contain_targets() {
        let d = toy_dataset(40, 12, 6);
        let blocks = split_continual(&d, 0.5, 3, [0.8, 0.1, 0.1], 6).unwrap();
        for j in 1..=3 {
            let set = block_test_set(&blocks, j);
            for (inp, tgt) in set.inputs.iter().zip(&set.targets) {
                assert!(tgt.iter().all(|t| !inp.contains(t)));
            }
        }
    }
}
