//! SGD with momentum and weight decay under a per-epoch cosine schedule,
//! driving the paired loss. Folds are trained independently from a fresh
//! init and scored by their best validation epoch.

use std::fmt::Write as _;
use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::align::{total_loss, AlignMode, LossBreakdown, DEFAULT_LAMBDA};
use crate::autodiff::Graph;
use crate::data::{augment, crop_bbox, FoldSplit, PairedSample};
use crate::error::{Error, Result};
use crate::model::{AlignConfig, CrossModalModel};
use crate::vit::{argmax, Modality, ModelConfig, ParamStore};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    /// Epochs trained; also the cosine period `T`.
    pub max_epochs: usize,
    pub lambda: f64,
    pub mode: AlignMode,
    pub seed: u64,
    pub model: ModelConfig,
    pub align: AlignConfig,
    /// Random resized crop + flip on training pairs.
    pub augment: bool,
}

pub const DESK_ABLATION_LR: f64 = 0.01;
pub const DESK_ABLATION_EPOCHS: usize = 15;

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            momentum: 0.9,
            weight_decay: 5e-5,
            batch_size: 16,
            max_epochs: 500,
            lambda: DEFAULT_LAMBDA,
            mode: AlignMode::CgaSam,
            seed: 0,
            model: ModelConfig::desk(),
            align: AlignConfig::default(),
            augment: true,
        }
    }
}

impl TrainConfig {
    /// The desk-scale ablation recipe: desk preset, frozen synthetic data,
    /// a short cosine run at a raised learning rate. The default rate is
    /// too slow to move a from-scratch model within a CPU budget.
    pub fn desk_ablation(mode: AlignMode, seed: u64) -> Self {
        Self {
            lr: DESK_ABLATION_LR,
            max_epochs: DESK_ABLATION_EPOCHS,
            mode,
            seed,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.align.resolved_levels(&self.model)?;
        if self.batch_size == 0 || self.max_epochs == 0 {
            return Err(Error::Config("batch_size and max_epochs must be positive".into()));
        }
        if !(self.lr >= 0.0 && self.momentum >= 0.0 && self.weight_decay >= 0.0 && self.lambda >= 0.0) {
            return Err(Error::Config(
                "lr, momentum, weight_decay and lambda must be >= 0".into(),
            ));
        }
        Ok(())
    }
}

/// `lr0 (1 + cos(pi t / T)) / 2`; `t > T` is clamped to `T`.
pub fn cosine_lr(t: usize, total: usize, lr0: f64) -> f64 {
    let total = total.max(1);
    let t = if t > total {
        log::warn!("cosine_lr: epoch {t} past schedule end {total}, clamping");
        total
    } else {
        t
    };
    lr0 * (1.0 + (std::f64::consts::PI * t as f64 / total as f64).cos()) / 2.0
}

/// One velocity buffer per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    velocity: Vec<Vec<Vec<f64>>>,
}

impl OptimizerState {
    pub fn new(stores: &[&ParamStore]) -> Self {
        Self {
            velocity: stores
                .iter()
                .map(|s| s.iter().map(|p| vec![0.0; p.tensor.numel()]).collect())
                .collect(),
        }
    }

    pub fn for_model(model: &CrossModalModel) -> Self {
        Self::new(&model.stores())
    }
}

/// `g += wd p; v = m v + g; p -= lr v` for every tensor. A missing gradient
/// counts as zero.
pub fn sgd_step(
    stores: &mut [&mut ParamStore],
    state: &mut OptimizerState,
    lr: f64,
    momentum: f64,
    wd: f64,
) -> Result<()> {
    if stores.len() != state.velocity.len() {
        return Err(Error::Contract(format!(
            "optimizer tracks {} stores, got {}",
            state.velocity.len(),
            stores.len()
        )));
    }
    for (store, vels) in stores.iter_mut().zip(&mut state.velocity) {
        if store.len() != vels.len() {
            return Err(Error::Contract(format!(
                "optimizer tracks {} tensors, store has {}",
                vels.len(),
                store.len()
            )));
        }
        for (p, v) in store.iter_mut().zip(vels.iter_mut()) {
            if p.tensor.numel() != v.len() {
                return Err(Error::Contract(format!(
                    "velocity of {} has {} values, tensor {}",
                    p.name,
                    v.len(),
                    p.tensor.numel()
                )));
            }
            let grad = p.tensor.grad().map(<[f64]>::to_vec);
            let data = p.tensor.data_mut();
            for i in 0..data.len() {
                let g = grad.as_ref().map_or(0.0, |g| g[i]) + wd * data[i];
                v[i] = momentum * v[i] + g;
                data[i] -= lr * v[i];
            }
        }
    }
    Ok(())
}

/// Extremes of the per-pair loss terms seen during training.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRanges {
    pub global_min: f64,
    pub global_max: f64,
    pub local_min: f64,
    pub local_max: f64,
    /// Largest `|sum of terms - total|`.
    pub max_sum_residual: f64,
    pub pairs: usize,
}

impl Default for LossRanges {
    fn default() -> Self {
        Self {
            global_min: f64::INFINITY,
            global_max: f64::NEG_INFINITY,
            local_min: f64::INFINITY,
            local_max: f64::NEG_INFINITY,
            max_sum_residual: 0.0,
            pairs: 0,
        }
    }
}

impl LossRanges {
    pub fn observe(&mut self, b: &LossBreakdown) {
        self.global_min = self.global_min.min(b.global_align);
        self.global_max = self.global_max.max(b.global_align);
        self.local_min = self.local_min.min(b.local_align);
        self.local_max = self.local_max.max(b.local_align);
        let residual = (b.cls_wl + b.cls_nbi + b.global_align + b.local_align - b.total).abs();
        self.max_sum_residual = self.max_sum_residual.max(residual);
        self.pairs += 1;
    }

    pub fn merge(&mut self, o: &LossRanges) {
        self.global_min = self.global_min.min(o.global_min);
        self.global_max = self.global_max.max(o.global_max);
        self.local_min = self.local_min.min(o.local_min);
        self.local_max = self.local_max.max(o.local_max);
        self.max_sum_residual = self.max_sum_residual.max(o.max_sum_residual);
        self.pairs += o.pairs;
    }

    /// `global in [0, 2]`, `local in [0, lambda]`, terms sum to the total
    /// within `1e-9`.
    pub fn within_bounds(&self, lambda: f64) -> bool {
        self.pairs == 0
            || (self.global_min >= 0.0
                && self.global_max <= 2.0
                && self.local_min >= 0.0
                && self.local_max <= lambda
                && self.max_sum_residual <= 1e-9)
    }
}

/// Forward, backward and one optimizer step on a batch. Returns the mean
/// breakdown over the batch.
pub fn train_step(
    model: &mut CrossModalModel,
    state: &mut OptimizerState,
    batch: &[PairedSample],
    cfg: &TrainConfig,
    lr: f64,
    ranges: &mut LossRanges,
) -> Result<LossBreakdown> {
    if batch.is_empty() {
        return Err(Error::Contract("empty batch".into()));
    }
    model.zero_grad();
    let scale = 1.0 / batch.len() as f64;
    let mut sum = LossBreakdown::default();
    for pair in batch {
        let mut g = Graph::new();
        let bound = model.bind(&mut g);
        let out = model.forward_pair(&mut g, &bound, &pair.wl, &pair.nbi, cfg.mode)?;
        let loss = total_loss(&mut g, &out, pair.label, cfg.mode, cfg.lambda)?;
        let b = loss.breakdown(&g);
        if !b.is_finite() {
            return Err(Error::Numerical(format!("non-finite loss on pair {}", pair.id)));
        }
        ranges.observe(&b);
        sum.add_assign(&b);
        let root = g.scale(loss.total, scale);
        g.backward(root)?;
        model.accumulate_grads(&g, &bound);
    }
    sgd_step(&mut model.stores_mut(), state, lr, cfg.momentum, cfg.weight_decay)?;
    Ok(sum.scaled(scale))
}

/// Crops each pair to its boxes at the model's input size.
pub fn prepare(samples: &[PairedSample], size: usize) -> Result<Vec<PairedSample>> {
    samples
        .iter()
        .map(|s| {
            if s.bbox_wl.is_none()
                && s.bbox_nbi.is_none()
                && s.wl.width() == size
                && s.wl.height() == size
                && s.nbi.width() == size
                && s.nbi.height() == size
            {
                Ok(s.clone())
            } else {
                crop_bbox(s, size)
            }
        })
        .collect()
}

/// WL-only accuracy: the fraction of argmax predictions matching labels.
pub fn evaluate(model: &CrossModalModel, samples: &[PairedSample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Data("cannot evaluate on an empty set".into()));
    }
    let prepared = prepare(samples, model.config().image_size)?;
    let mut correct = 0usize;
    for s in &prepared {
        let inf = model.infer(&s.wl)?;
        correct += (argmax(&inf.logits) == s.label) as usize;
    }
    Ok(correct as f64 / samples.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochReport {
    pub epoch: usize,
    pub loss: LossBreakdown,
    pub val_accuracy: f64,
    pub lr: f64,
}

pub const EPOCH_LOG_HEADER: &str = "mode,seed,fold,epoch,lr,cls_wl,cls_nbi,global_align,local_align,total,val_accuracy";

impl EpochReport {
    pub fn csv_line(&self, mode: AlignMode, seed: u64, fold: usize) -> String {
        let l = &self.loss;
        format!(
            "{mode},{seed},{fold},{},{:e},{:.9},{:.9},{:.9},{:.9},{:.9},{:.6}",
            self.epoch, self.lr, l.cls_wl, l.cls_nbi, l.global_align, l.local_align, l.total, self.val_accuracy
        )
    }
}

#[derive(Debug, Clone)]
pub struct FoldResult {
    pub fold: usize,
    pub best_accuracy: f64,
    pub best_epoch: usize,
    pub epochs: Vec<EpochReport>,
    /// Parameters at the best epoch.
    pub best_model: CrossModalModel,
    pub ranges: LossRanges,
}

fn mix(seed: u64, a: u64, b: u64) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ a.wrapping_mul(0xBF58_476D_1CE4_E5B9)
        ^ b.wrapping_mul(0x94D0_49BB_1331_11EB)
}

/// Trains one fold from a fresh init and keeps the best validation epoch.
/// The init depends on `(seed, fold)` only, so every mode starts from the
/// same weights.
pub fn train_fold(
    cfg: &TrainConfig,
    samples: &[PairedSample],
    split: &FoldSplit,
    fold: usize,
    mut log: Option<&mut dyn Write>,
) -> Result<FoldResult> {
    cfg.validate()?;
    let size = cfg.model.image_size;
    let (train_idx, val_idx) = split.indices(samples, fold);
    let train: Vec<PairedSample> = prepare(&train_idx.iter().map(|&i| samples[i].clone()).collect::<Vec<_>>(), size)?;
    let val: Vec<PairedSample> = val_idx.iter().map(|&i| samples[i].clone()).collect();
    if train.len() < cfg.batch_size {
        return Err(Error::Config(format!(
            "fold {fold}: {} training pairs cannot fill a batch of {}",
            train.len(),
            cfg.batch_size
        )));
    }
    let mut model = CrossModalModel::new(cfg.model.clone(), &cfg.align, mix(cfg.seed, fold as u64, 1))?;
    let mut state = OptimizerState::for_model(&model);
    let mut best: Option<(f64, usize, CrossModalModel)> = None;
    let mut epochs = Vec::with_capacity(cfg.max_epochs);
    let mut ranges = LossRanges::default();
    let mut step = 0usize;
    for epoch in 0..cfg.max_epochs {
        let lr = cosine_lr(epoch, cfg.max_epochs, cfg.lr);
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix(
            cfg.seed,
            fold as u64,
            2 + epoch as u64,
        )));
        let mut sum = LossBreakdown::default();
        let batches = train.len() / cfg.batch_size;
        for chunk in order.chunks_exact(cfg.batch_size) {
            let batch = chunk
                .iter()
                .map(|&i| {
                    if cfg.augment {
                        let mut rng = ChaCha8Rng::seed_from_u64(mix(cfg.seed, epoch as u64, 3 + fold as u64));
                        rng.set_stream(i as u64);
                        augment(&train[i], &mut rng, size).map(|(s, _)| s)
                    } else {
                        Ok(train[i].clone())
                    }
                })
                .collect::<Result<Vec<_>>>()?;
            let b = train_step(&mut model, &mut state, &batch, cfg, lr, &mut ranges).map_err(|e| match e {
                Error::Numerical(m) => Error::Numerical(format!("step {step} (epoch {epoch}): {m}")),
                other => other,
            })?;
            sum.add_assign(&b);
            step += 1;
        }
        if cfg.mode.uses_sam() {
            // response maps must stay valid distributions
            let probe = &train[0];
            model.response_map(&probe.wl, Modality::Wl)?;
            model.response_map(&probe.nbi, Modality::Nbi)?;
        }
        let acc = evaluate(&model, &val)?;
        let report = EpochReport {
            epoch,
            loss: sum.scaled(1.0 / batches as f64),
            val_accuracy: acc,
            lr,
        };
        log::debug!("{}", report.csv_line(cfg.mode, cfg.seed, fold));
        if let Some(w) = log.as_deref_mut() {
            writeln!(w, "{}", report.csv_line(cfg.mode, cfg.seed, fold))
                .map_err(|e| Error::Data(format!("epoch log: {e}")))?;
        }
        if best.as_ref().map_or(true, |b| acc > b.0) {
            best = Some((acc, epoch, model.clone()));
        }
        epochs.push(report);
    }
    let (best_accuracy, best_epoch, best_model) = best.expect("at least one epoch");
    Ok(FoldResult {
        fold,
        best_accuracy,
        best_epoch,
        epochs,
        best_model,
        ranges,
    })
}

/// One row of the cross-validation table.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub method: String,
    pub folds: Vec<f64>,
}

impl ReportRow {
    pub fn mean(&self) -> f64 {
        self.folds.iter().sum::<f64>() / self.folds.len() as f64
    }
}

/// Accuracy per fold and mean, one row per method, as percentages.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ExperimentReport {
    pub rows: Vec<ReportRow>,
}

impl ExperimentReport {
    pub fn row(&self, method: &str) -> Option<&ReportRow> {
        self.rows.iter().find(|r| r.method == method)
    }

    /// `method,fold1,...,foldk,mean` with percentages to two decimals.
    pub fn to_csv(&self) -> String {
        let k = self.rows.first().map_or(0, |r| r.folds.len());
        let mut out = String::from("method");
        for i in 1..=k {
            let _ = write!(out, ",fold{i}");
        }
        out.push_str(",mean\n");
        for r in &self.rows {
            out.push_str(&r.method);
            for a in &r.folds {
                let _ = write!(out, ",{:.2}", 100.0 * a);
            }
            let _ = writeln!(out, ",{:.2}", 100.0 * r.mean());
        }
        out
    }
}

/// Trains every fold for every requested mode.
pub fn run_experiment(
    cfg: &TrainConfig,
    samples: &[PairedSample],
    split: &FoldSplit,
    modes: &[AlignMode],
    mut log: Option<&mut dyn Write>,
) -> Result<(ExperimentReport, Vec<Vec<FoldResult>>)> {
    let mut report = ExperimentReport::default();
    let mut all = Vec::with_capacity(modes.len());
    for &mode in modes {
        let mcfg = TrainConfig { mode, ..cfg.clone() };
        let mut results = Vec::with_capacity(split.k());
        for fold in 0..split.k() {
            let sink: Option<&mut dyn Write> = match log {
                Some(ref mut w) => Some(&mut **w),
                None => None,
            };
            let r = train_fold(&mcfg, samples, split, fold, sink)?;
            log::info!(
                "{mode} fold {}: best accuracy {:.4} at epoch {}",
                fold + 1,
                r.best_accuracy,
                r.best_epoch
            );
            results.push(r);
        }
        report.rows.push(ReportRow {
            method: mode.to_string(),
            folds: results.iter().map(|r| r.best_accuracy).collect(),
        });
        all.push(results);
    }
    Ok((report, all))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_schedule_examples() {
        assert_eq!(cosine_lr(0, 10, 1e-3), 1e-3);
        assert!(cosine_lr(10, 10, 1e-3).abs() < 1e-18);
        assert!((cosine_lr(5, 10, 1e-3) - 5e-4).abs() < 1e-15);
        assert_eq!(cosine_lr(12, 10, 1e-3), cosine_lr(10, 10, 1e-3));
        let lrs: Vec<f64> = (0..=50).map(|t| cosine_lr(t, 50, 0.1)).collect();
        assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
    }

    fn store(values: &[f64]) -> ParamStore {
        let mut s = ParamStore::default();
        s.push(
            "w",
            crate::autodiff::Tensor::new(&[values.len()], values.to_vec()).unwrap(),
        );
        s
    }

    #[test]
    fn sgd_zero_grad_zero_decay_is_noop() {
        let mut s = store(&[1.0, -2.0]);
        let mut st = OptimizerState::new(&[&s]);
        sgd_step(&mut [&mut s], &mut st, 0.1, 0.9, 0.0).unwrap();
        assert_eq!(s.iter().next().unwrap().tensor.data(), &[1.0, -2.0]);
    }

    #[test]
    fn sgd_weight_decay_only() {
        let mut s = store(&[1.0, -2.0]);
        let mut st = OptimizerState::new(&[&s]);
        let (lr, wd) = (0.1, 0.01);
        sgd_step(&mut [&mut s], &mut st, lr, 0.9, wd).unwrap();
        let d = s.iter().next().unwrap().tensor.data().to_vec();
        assert!((d[0] - (1.0 - lr * wd)).abs() < 1e-15);
        assert!((d[1] + 2.0 * (1.0 - lr * wd)).abs() < 1e-15);
    }

    #[test]
    fn sgd_with_gradient_and_momentum() {
        let mut s = store(&[1.0]);
        s.get_mut(crate::vit::ParamId(0)).accumulate_grad(&[0.5]);
        let mut st = OptimizerState::new(&[&s]);
        sgd_step(&mut [&mut s], &mut st, 0.1, 0.9, 0.0).unwrap();
        sgd_step(&mut [&mut s], &mut st, 0.1, 0.9, 0.0).unwrap();
        // v1 = 0.5, v2 = 0.95
        let p = s.iter().next().unwrap().tensor.data()[0];
        assert!((p - (1.0 - 0.05 - 0.095)).abs() < 1e-15);
    }

    #[test]
    fn sgd_shape_mismatch_is_contract_error() {
        let mut s = store(&[1.0]);
        let other = store(&[1.0, 2.0]);
        let mut st = OptimizerState::new(&[&other]);
        assert!(matches!(
            sgd_step(&mut [&mut s], &mut st, 0.1, 0.9, 0.0),
            Err(Error::Contract(_))
        ));
        let mut st = OptimizerState::new(&[]);
        assert!(matches!(
            sgd_step(&mut [&mut s], &mut st, 0.1, 0.9, 0.0),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn report_csv_shape() {
        let r = ExperimentReport {
            rows: vec![ReportRow {
                method: "wl_only".into(),
                folds: vec![0.5, 0.75],
            }],
        };
        assert_eq!(r.to_csv(), "method,fold1,fold2,mean\nwl_only,50.00,75.00,62.50\n");
    }

    #[test]
    fn loss_ranges() {
        let mut r = LossRanges::default();
        assert!(r.within_bounds(0.3));
        r.observe(&LossBreakdown {
            cls_wl: 0.7,
            cls_nbi: 0.6,
            global_align: 0.1,
            local_align: 0.2,
            total: 1.6,
        });
        assert!(r.within_bounds(0.3));
        assert!(!r.within_bounds(0.1));
    }
}
