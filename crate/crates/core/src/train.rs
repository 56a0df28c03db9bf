//! Training loop: weighted cross-entropy on center-pixel targets, Adam with
//! decoupled weight decay, early stopping on validation overall accuracy.

use std::sync::Arc;

use rand::Rng;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::metrics::MetricsReport;
use crate::model::{Model, ModelConfig};
use crate::params::ParamStore;
use crate::rng::{substream, Stream};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ClassWeightMode {
    /// Inverse class frequency on the train split, normalized to mean 1.
    InverseFrequency,
    Uniform,
}

impl ClassWeightMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "inverse-frequency" => Ok(ClassWeightMode::InverseFrequency),
            "uniform" => Ok(ClassWeightMode::Uniform),
            other => Err(Error::Config(format!("unknown class weight mode '{other}'"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DecayMode {
    /// AdamW-style: decay applied directly to the parameter.
    Decoupled,
    /// Classic L2: decay added to the gradient before the moment updates.
    L2InGradient,
}

#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub class_weights: ClassWeightMode,
    pub decay_mode: DecayMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            weight_decay: 1e-4,
            max_epochs: 100,
            patience: 20,
            batch_size: 64,
            seed: 0,
            class_weights: ClassWeightMode::InverseFrequency,
            decay_mode: DecayMode::Decoupled,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        // lr = 0 is allowed (degenerate but well-defined); negatives are not.
        if self.learning_rate < 0.0 || self.weight_decay < 0.0 {
            return Err(Error::Config("learning rate and weight decay must be nonnegative".into()));
        }
        if self.max_epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("max_epochs and batch_size must be positive".into()));
        }
        if self.patience == 0 || self.patience > self.max_epochs {
            return Err(Error::Config(format!(
                "patience {} must lie in [1, max_epochs = {}]",
                self.patience, self.max_epochs
            )));
        }
        Ok(())
    }

    pub fn apply_kv(&mut self, kv: &[(String, String)]) -> Result<()> {
        for (key, value) in kv {
            let Some(field) = key.strip_prefix("train.") else { continue };
            let bad = || Error::Config(format!("bad value '{value}' for {key}"));
            match field {
                "learning_rate" => self.learning_rate = value.parse().map_err(|_| bad())?,
                "weight_decay" => self.weight_decay = value.parse().map_err(|_| bad())?,
                "max_epochs" => self.max_epochs = value.parse().map_err(|_| bad())?,
                "patience" => self.patience = value.parse().map_err(|_| bad())?,
                "batch_size" => self.batch_size = value.parse().map_err(|_| bad())?,
                "seed" => self.seed = value.parse().map_err(|_| bad())?,
                "class_weights" => self.class_weights = ClassWeightMode::parse(value)?,
                "decay_mode" => {
                    self.decay_mode = match value.as_str() {
                        "decoupled" => DecayMode::Decoupled,
                        "l2" => DecayMode::L2InGradient,
                        _ => return Err(bad()),
                    }
                }
                other => return Err(Error::Config(format!("unknown config key train.{other}"))),
            }
        }
        Ok(())
    }

    pub fn to_kv(&self) -> Vec<(String, String)> {
        vec![
            ("train.learning_rate".into(), format!("{}", self.learning_rate)),
            ("train.weight_decay".into(), format!("{}", self.weight_decay)),
            ("train.max_epochs".into(), self.max_epochs.to_string()),
            ("train.patience".into(), self.patience.to_string()),
            ("train.batch_size".into(), self.batch_size.to_string()),
            ("train.seed".into(), self.seed.to_string()),
            (
                "train.class_weights".into(),
                match self.class_weights {
                    ClassWeightMode::InverseFrequency => "inverse-frequency".into(),
                    ClassWeightMode::Uniform => "uniform".into(),
                },
            ),
            (
                "train.decay_mode".into(),
                match self.decay_mode {
                    DecayMode::Decoupled => "decoupled".into(),
                    DecayMode::L2InGradient => "l2".into(),
                },
            ),
        ]
    }
}

// ── Adam ────────────────────────────────────────────────────────────

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// First/second moment buffers per parameter entry, plus the step counter.
pub struct AdamState<S: Scalar> {
    m: Vec<Vec<S>>,
    v: Vec<Vec<S>>,
    pub step: u64,
}

impl<S: Scalar> AdamState<S> {
    pub fn new(store: &ParamStore<S>) -> Self {
        let m = store
            .iter()
            .map(|(_, e)| vec![S::ZERO; if e.trainable { e.data.len() } else { 0 }])
            .collect();
        let v = store
            .iter()
            .map(|(_, e)| vec![S::ZERO; if e.trainable { e.data.len() } else { 0 }])
            .collect();
        AdamState { m, v, step: 0 }
    }
}

/// One Adam update on a single buffer. `t` is the 1-based step count.
#[allow(clippy::too_many_arguments)]
pub fn adam_update<S: Scalar>(
    param: &mut [S],
    grad: &[S],
    m: &mut [S],
    v: &mut [S],
    t: u64,
    lr: f64,
    weight_decay: f64,
    decay_mode: DecayMode,
) {
    let b1 = S::from_f64(ADAM_BETA1);
    let b2 = S::from_f64(ADAM_BETA2);
    let eps = S::from_f64(ADAM_EPS);
    let lr_s = S::from_f64(lr);
    let wd = S::from_f64(weight_decay);
    let bc1 = S::from_f64(1.0 - ADAM_BETA1.powi(t as i32));
    let bc2 = S::from_f64(1.0 - ADAM_BETA2.powi(t as i32));
    for i in 0..param.len() {
        let mut g = grad[i];
        if decay_mode == DecayMode::L2InGradient {
            g += wd * param[i];
        }
        m[i] = b1 * m[i] + (S::ONE - b1) * g;
        v[i] = b2 * v[i] + (S::ONE - b2) * g * g;
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        let mut update = lr_s * m_hat / (v_hat.sqrt() + eps);
        if decay_mode == DecayMode::Decoupled {
            update += lr_s * wd * param[i];
        }
        param[i] -= update;
    }
}

/// Applies one optimizer step over every trainable entry of the store.
pub fn adam_step<S: Scalar>(
    store: &mut ParamStore<S>,
    grads: &[Option<Vec<S>>],
    state: &mut AdamState<S>,
    cfg: &TrainConfig,
) {
    state.step += 1;
    let t = state.step;
    let n = store.len();
    for idx in 0..n {
        let id = crate::params::ParamId(idx);
        if !store.entry(id).trainable {
            continue;
        }
        let Some(grad) = grads[idx].as_ref() else { continue };
        let grad = grad.clone();
        let m = &mut state.m[idx];
        let v = &mut state.v[idx];
        let param = store.data_mut(id);
        adam_update(param, &grad, m, v, t, cfg.learning_rate, cfg.weight_decay, cfg.decay_mode);
    }
}

/// Gradients per store entry (None for states and untouched parameters).
pub fn collect_param_gradients<S: Scalar>(
    store: &ParamStore<S>,
    binding: &crate::params::TapeBinding,
    grads: &crate::tensor::tape::Gradients<S>,
) -> Vec<Option<Vec<S>>> {
    store
        .iter()
        .map(|(pid, e)| {
            if !e.trainable {
                return None;
            }
            binding.node(pid).ok().and_then(|n| grads.get(n).map(|g| g.to_vec()))
        })
        .collect()
}

// ── Class weights & feature statistics ──────────────────────────────

/// Inverse-frequency class weights over the train split, normalized so the
/// mean weight is 1. Classes absent from the split get weight 1 before
/// normalization.
pub fn class_weights(labels: &[u32], indices: &[usize], classes: usize, mode: ClassWeightMode) -> Vec<f64> {
    match mode {
        ClassWeightMode::Uniform => vec![1.0; classes],
        ClassWeightMode::InverseFrequency => {
            let mut counts = vec![0usize; classes];
            for &i in indices {
                counts[labels[i] as usize] += 1;
            }
            let total: usize = counts.iter().sum();
            let present = counts.iter().filter(|&&c| c > 0).count().max(1);
            let mut weights: Vec<f64> = counts
                .iter()
                .map(|&c| if c > 0 { total as f64 / (present as f64 * c as f64) } else { 1.0 })
                .collect();
            let mean: f64 = weights.iter().sum::<f64>() / classes as f64;
            for w in weights.iter_mut() {
                *w /= mean;
            }
            weights
        }
    }
}

/// Per-feature mean and standard deviation of the train split's center
/// vectors (for the RBF graph standardization).
pub fn feature_stats(ds: &Dataset, indices: &[usize]) -> (Vec<f64>, Vec<f64>) {
    let dim = ds.manifest.t * ds.manifest.c0;
    let mut mean = vec![0.0f64; dim];
    let n = indices.len().max(1) as f64;
    for &i in indices {
        for (j, v) in ds.center_vector(i).iter().enumerate() {
            mean[j] += v;
        }
    }
    for m in mean.iter_mut() {
        *m /= n;
    }
    let mut var = vec![0.0f64; dim];
    for &i in indices {
        for (j, v) in ds.center_vector(i).iter().enumerate() {
            let d = v - mean[j];
            var[j] += d * d;
        }
    }
    let std: Vec<f64> = var.iter().map(|&v| (v / n).sqrt().max(1e-8)).collect();
    (mean, std)
}

// ── Batching ────────────────────────────────────────────────────────

/// Copies the cubes of `indices` into one [B, h, w, t, c0] tensor.
pub fn batch_tensor<S: Scalar>(ds: &Dataset, indices: &[usize]) -> Tensor<S> {
    let cube_len = ds.manifest.cube_len();
    let mut data = Vec::with_capacity(indices.len() * cube_len);
    for &i in indices {
        data.extend(ds.cube(i).iter().map(|&v| S::from_f64(v as f64)));
    }
    Tensor::new(
        data,
        vec![indices.len(), ds.manifest.h, ds.manifest.w, ds.manifest.t, ds.manifest.c0],
    )
    .expect("batch shape consistent with manifest")
}

// ── History ─────────────────────────────────────────────────────────

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_oa: f64,
    pub best: bool,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct History {
    pub epochs: Vec<EpochRecord>,
}

impl History {
    /// Line-delimited `key=value` records, one per epoch.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for e in &self.epochs {
            out.push_str(&format!(
                "epoch={} train_loss={:.9e} val_oa={:.6} best={}\n",
                e.epoch,
                e.train_loss,
                e.val_oa,
                if e.best { 1 } else { 0 }
            ));
        }
        out
    }
}

pub struct TrainOutcome {
    pub history: History,
    pub best_epoch: usize,
    pub best_val_oa: f64,
    pub stopped_early: bool,
}

// ── Evaluation ──────────────────────────────────────────────────────

/// Eval-mode predictions over a split, batched.
pub fn predict_split<S: Scalar>(
    model: &mut Model<S>,
    ds: &Dataset,
    indices: &[usize],
    batch_size: usize,
) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(indices.len());
    for chunk in indices.chunks(batch_size.max(1)) {
        let cubes = batch_tensor::<S>(ds, chunk);
        out.extend(model.predict(&cubes)?);
    }
    Ok(out)
}

/// Full metrics over a split.
pub fn evaluate<S: Scalar>(
    model: &mut Model<S>,
    ds: &Dataset,
    indices: &[usize],
    batch_size: usize,
) -> Result<MetricsReport> {
    if indices.is_empty() {
        return Err(Error::Data("empty evaluation split".into()));
    }
    let predicted = predict_split(model, ds, indices, batch_size)?;
    let truth: Vec<usize> = indices.iter().map(|&i| ds.label(i)).collect();
    MetricsReport::from_predictions(model.cfg.classes, &truth, &predicted)
}

fn overall_accuracy(truth: &[usize], predicted: &[usize]) -> f64 {
    let correct = truth.iter().zip(predicted.iter()).filter(|(a, b)| a == b).count();
    correct as f64 / truth.len().max(1) as f64 * 100.0
}

// ── Training loop ───────────────────────────────────────────────────

/// Trains in place. Each epoch shuffles the train split (seeded), builds the
/// batch graph per batch, monitors validation overall accuracy, and finally
/// restores the best-validation snapshot (ties keep the earlier epoch).
pub fn train<S: Scalar>(
    model: &mut Model<S>,
    ds: &Dataset,
    train_idx: &[usize],
    val_idx: &[usize],
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_idx.is_empty() || val_idx.is_empty() {
        return Err(Error::Data("empty train or validation split".into()));
    }
    {
        // Disjoint splits are the caller's contract; monitoring the train
        // split itself (overfit harnesses) is allowed but flagged.
        let set: std::collections::HashSet<_> = train_idx.iter().collect();
        if val_idx.iter().any(|i| set.contains(i)) {
            log::warn!("validation split overlaps the train split");
        }
    }

    let weights_f64 = class_weights(&ds.labels, train_idx, model.cfg.classes, cfg.class_weights);
    let weights: Arc<Vec<S>> = Arc::new(weights_f64.iter().map(|&w| S::from_f64(w)).collect());

    if model.cfg.standardize_features {
        let (mean, std) = feature_stats(ds, train_idx);
        model.set_feature_stats(&mean, &std)?;
    }

    let mut adam = AdamState::new(&model.store);
    let mut history = History::default();
    let mut best_val = f64::NEG_INFINITY;
    let mut best_epoch = 0usize;
    let mut best_snapshot: Option<Vec<Vec<S>>> = None;
    let mut stopped_early = false;

    for epoch in 1..=cfg.max_epochs {
        let mut order: Vec<usize> = train_idx.to_vec();
        let mut rng = substream(cfg.seed, Stream::Shuffle, epoch as u64);
        for i in (1..order.len()).rev() {
            let j = rng.gen_range(0..=i);
            order.swap(i, j);
        }

        let mut loss_sum = 0.0f64;
        let mut loss_count = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            if chunk.len() < 2 {
                // Batch norm (and the batch graph) need at least two samples.
                continue;
            }
            let cubes = batch_tensor::<S>(ds, chunk);
            let targets: Arc<Vec<usize>> = Arc::new(chunk.iter().map(|&i| ds.label(i)).collect());
            let mut pass = model.forward(&cubes, true).map_err(|e| match e {
                Error::Numerical(msg) => Error::Numerical(format!("{msg} at epoch {epoch}")),
                other => other,
            })?;
            let loss = pass.tape.cross_entropy_weighted(pass.logits, targets, Arc::clone(&weights))?;
            let loss_value = pass.tape.value(loss).data()[0].to_f64();
            if !loss_value.is_finite() {
                return Err(Error::Numerical(format!("non-finite training loss at epoch {epoch}")));
            }
            loss_sum += loss_value * chunk.len() as f64;
            loss_count += chunk.len();
            let grads = pass.tape.backward(loss)?;
            let per_param = collect_param_gradients(&model.store, &pass.binding, &grads);
            adam_step(&mut model.store, &per_param, &mut adam, cfg);
        }

        let val_pred = predict_split(model, ds, val_idx, cfg.batch_size)?;
        let val_truth: Vec<usize> = val_idx.iter().map(|&i| ds.label(i)).collect();
        let val_oa = overall_accuracy(&val_truth, &val_pred);

        let improved = val_oa > best_val;
        if improved {
            best_val = val_oa;
            best_epoch = epoch;
            best_snapshot = Some(model.store.iter().map(|(_, e)| e.data.clone()).collect());
        }
        history.epochs.push(EpochRecord {
            epoch,
            train_loss: if loss_count > 0 { loss_sum / loss_count as f64 } else { f64::NAN },
            val_oa,
            best: improved,
        });

        if epoch - best_epoch >= cfg.patience {
            stopped_early = true;
            break;
        }
    }

    if let Some(snapshot) = best_snapshot {
        for (idx, data) in snapshot.into_iter().enumerate() {
            model.store.set_data(crate::params::ParamId(idx), data);
        }
    }

    Ok(TrainOutcome { history, best_epoch, best_val_oa: best_val, stopped_early })
}

// ── Ablation harness ────────────────────────────────────────────────

pub struct AblationRow {
    pub variant: crate::model::Ablation,
    pub params: usize,
    pub best_epoch: usize,
    pub val_oa: f64,
    pub test: MetricsReport,
}

/// Trains and evaluates each variant with identical seed and splits.
pub fn ablate<S: Scalar>(
    base: &ModelConfig,
    variants: &[crate::model::Ablation],
    ds: &Dataset,
    splits: &crate::data::SplitIndices,
    train_cfg: &TrainConfig,
) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::with_capacity(variants.len());
    for &variant in variants {
        let mut cfg = base.clone();
        cfg.ablation = variant;
        let mut model: Model<S> = Model::init(cfg)?;
        let outcome = train(&mut model, ds, &splits.train, &splits.val, train_cfg)?;
        let test = evaluate(&mut model, ds, &splits.test, train_cfg.batch_size)?;
        rows.push(AblationRow {
            variant,
            params: model.param_count(),
            best_epoch: outcome.best_epoch,
            val_oa: outcome.best_val_oa,
            test,
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_trivial_cases() {
        // Zero gradient, zero weight decay: parameters unchanged.
        let mut p = vec![1.5f64, -0.25];
        let mut m = vec![0.0; 2];
        let mut v = vec![0.0; 2];
        adam_update(&mut p, &[0.0, 0.0], &mut m, &mut v, 1, 1e-3, 0.0, DecayMode::Decoupled);
        assert_eq!(p, vec![1.5, -0.25]);

        // First step magnitude is bounded by lr (sign-like behavior).
        let mut p = vec![0.0f64];
        let mut m = vec![0.0];
        let mut v = vec![0.0];
        adam_update(&mut p, &[0.37], &mut m, &mut v, 1, 1e-3, 0.0, DecayMode::Decoupled);
        assert!(p[0] < 0.0 && p[0].abs() <= 1e-3 * (1.0 + 1e-6), "{}", p[0]);
    }

    #[test]
    fn adam_matches_hand_unrolled_two_steps() {
        // Scalar parameter, lr = 0.1, no decay, gradients g1 = 1, g2 = −2.
        let (lr, b1, b2, eps) = (0.1f64, ADAM_BETA1, ADAM_BETA2, ADAM_EPS);
        let mut p_hand = 0.5f64;
        let (mut m_hand, mut v_hand) = (0.0f64, 0.0f64);
        for (t, g) in [(1u64, 1.0f64), (2, -2.0)] {
            m_hand = b1 * m_hand + (1.0 - b1) * g;
            v_hand = b2 * v_hand + (1.0 - b2) * g * g;
            let mh = m_hand / (1.0 - b1.powi(t as i32));
            let vh = v_hand / (1.0 - b2.powi(t as i32));
            p_hand -= lr * mh / (vh.sqrt() + eps);
        }

        let mut p = vec![0.5f64];
        let mut m = vec![0.0];
        let mut v = vec![0.0];
        adam_update(&mut p, &[1.0], &mut m, &mut v, 1, lr, 0.0, DecayMode::Decoupled);
        adam_update(&mut p, &[-2.0], &mut m, &mut v, 2, lr, 0.0, DecayMode::Decoupled);
        assert!((p[0] - p_hand).abs() < 1e-15, "{} vs {p_hand}", p[0]);
    }

    #[test]
    fn decoupled_decay_shrinks_parameters_without_touching_moments() {
        let mut p = vec![2.0f64];
        let mut m = vec![0.0];
        let mut v = vec![0.0];
        adam_update(&mut p, &[0.0], &mut m, &mut v, 1, 0.1, 0.01, DecayMode::Decoupled);
        assert!((p[0] - (2.0 - 0.1 * 0.01 * 2.0)).abs() < 1e-15);
        assert_eq!(m[0], 0.0);
        assert_eq!(v[0], 0.0);
    }

    #[test]
    fn inverse_frequency_weights_normalize_to_mean_one() {
        let labels = vec![0u32, 0, 0, 1, 1, 2];
        let idx: Vec<usize> = (0..labels.len()).collect();
        let w = class_weights(&labels, &idx, 3, ClassWeightMode::InverseFrequency);
        let mean: f64 = w.iter().sum::<f64>() / 3.0;
        assert!((mean - 1.0).abs() < 1e-12);
        assert!(w[2] > w[1] && w[1] > w[0]);

        let u = class_weights(&labels, &idx, 3, ClassWeightMode::Uniform);
        assert_eq!(u, vec![1.0, 1.0, 1.0]);
    }
}
