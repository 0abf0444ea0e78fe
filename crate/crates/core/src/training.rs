//! Training loop, loss, optimizer, and gradient verification.
//!
//! The loss is normalized squared error per sample (all antennas of a
//! sample pooled) averaged over the batch, matching the evaluation
//! metric. Training is deterministic for a fixed seed: shuffling,
//! dropout, and initialization all derive from it.

use crate::autodiff::{Arr, Tape, Var};
use crate::channel::mix_seed;
use crate::layers::{snapshot_params, Phase};
use crate::model::{pack_real_pairs, predict_planes, to_planes, TrainableModel};
use crate::types::CsiDataset;
use crate::{Error, Result};
use ndarray::{Array3, ArrayView3, Axis, IxDyn, Zip};
use num_complex::Complex64;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

/// Mean over samples of `sum |pred - target|^2 / sum |target|^2`, with
/// each sample's `group` consecutive planes pooled into one ratio.
///
/// `target` is packed real parts `(B, P, 2K)`; `B` must be a multiple of
/// `group`.
pub fn nmse_loss(tape: &mut Tape, pred: Var, target: &Arr, group: usize) -> Result<Var> {
    let shape = tape.value(pred).shape().to_vec();
    assert_eq!(shape, target.shape(), "prediction and target shapes");
    let b = shape[0];
    assert_eq!(b % group, 0, "plane count divisible by group");
    let n_samples = b / group;

    let mut weights = Arr::zeros(IxDyn(&[n_samples]));
    for i in 0..n_samples {
        let mut power = 0.0;
        for g in 0..group {
            power += target
                .index_axis(Axis(0), i * group + g)
                .iter()
                .map(|v| v * v)
                .sum::<f64>();
        }
        if power == 0.0 {
            return Err(Error::ZeroTarget);
        }
        weights[[i]] = 1.0 / (n_samples as f64 * power);
    }

    let t = tape.leaf(target.clone());
    let diff = tape.sub(pred, t);
    let sq = tape.mul(diff, diff);
    let per_plane = tape.sum_to_batch(sq);
    let per_sample = tape.reshape(per_plane, &[n_samples, group]);
    let per_sample = tape.sum_to_batch(per_sample);
    let w = tape.leaf(weights);
    let weighted = tape.mul(per_sample, w);
    Ok(tape.sum_all(weighted))
}

/// Plain complex-domain counterpart of [`nmse_loss`] for evaluation.
pub fn nmse_planes(
    pred: ArrayView3<'_, Complex64>,
    target: ArrayView3<'_, Complex64>,
    group: usize,
) -> Result<f64> {
    assert_eq!(pred.dim(), target.dim());
    let b = pred.dim().0;
    assert_eq!(b % group, 0);
    let n_samples = b / group;
    let mut total = 0.0;
    for i in 0..n_samples {
        let mut err = 0.0;
        let mut power = 0.0;
        for g in 0..group {
            let p = pred.index_axis(Axis(0), i * group + g);
            let t = target.index_axis(Axis(0), i * group + g);
            err += p.iter().zip(t.iter()).map(|(a, b)| (a - b).norm_sqr()).sum::<f64>();
            power += t.iter().map(|v| v.norm_sqr()).sum::<f64>();
        }
        if power == 0.0 {
            return Err(Error::ZeroTarget);
        }
        total += err / power;
    }
    Ok(total / n_samples as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Decoupled decay applies directly to weights; otherwise decay is
    /// added to the gradient before the moment updates.
    pub decoupled_decay: bool,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            decoupled_decay: false,
        }
    }
}

/// Adam with optional (optionally decoupled) weight decay.
pub struct Adam {
    pub config: AdamConfig,
    params: Vec<Var>,
    m: Vec<Arr>,
    v: Vec<Arr>,
    t: u64,
}

impl Adam {
    pub fn new(tape: &Tape, params: Vec<Var>, config: AdamConfig) -> Self {
        let m = params.iter().map(|p| Arr::zeros(tape.value(*p).raw_dim())).collect();
        let v = params.iter().map(|p| Arr::zeros(tape.value(*p).raw_dim())).collect();
        Adam { config, params, m, v, t: 0 }
    }

    /// One update from gradients indexed by tape slot. `lr` overrides the
    /// configured rate so a scheduler can drive it.
    pub fn step(&mut self, tape: &mut Tape, grads: &[Option<Arr>], lr: f64) {
        self.t += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        for (i, &p) in self.params.iter().enumerate() {
            let Some(g) = grads[p.index()].as_ref() else { continue };
            let mut theta = tape.value(p).clone();
            let mut g = g.clone();
            if c.weight_decay > 0.0 && !c.decoupled_decay {
                g += &(&theta * c.weight_decay);
            }
            Zip::from(&mut self.m[i]).and(&g).for_each(|m, &gv| {
                *m = c.beta1 * *m + (1.0 - c.beta1) * gv;
            });
            Zip::from(&mut self.v[i]).and(&g).for_each(|v, &gv| {
                *v = c.beta2 * *v + (1.0 - c.beta2) * gv * gv;
            });
            if c.weight_decay > 0.0 && c.decoupled_decay {
                theta.mapv_inplace(|w| w - lr * c.weight_decay * w);
            }
            Zip::from(&mut theta)
                .and(&self.m[i])
                .and(&self.v[i])
                .for_each(|w, &m, &v| {
                    let mhat = m / bc1;
                    let vhat = v / bc2;
                    *w -= lr * mhat / (vhat.sqrt() + c.eps);
                });
            tape.set_value(p, theta);
        }
    }
}

/// Multiplies the learning rate by `factor` after `patience` epochs
/// without relative improvement.
#[derive(Debug, Clone)]
pub struct PlateauScheduler {
    lr: f64,
    pub factor: f64,
    pub patience: usize,
    pub threshold: f64,
    pub min_lr: f64,
    best: f64,
    bad_epochs: usize,
}

impl PlateauScheduler {
    pub fn new(lr: f64, factor: f64, patience: usize, threshold: f64, min_lr: f64) -> Self {
        PlateauScheduler {
            lr,
            factor,
            patience,
            threshold,
            min_lr,
            best: f64::INFINITY,
            bad_epochs: 0,
        }
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    /// Record a validation value; returns true when the rate was reduced.
    pub fn observe(&mut self, val: f64) -> bool {
        if val < self.best * (1.0 - self.threshold) {
            self.best = val;
            self.bad_epochs = 0;
            return false;
        }
        self.bad_epochs += 1;
        if self.bad_epochs > self.patience {
            self.bad_epochs = 0;
            let next = (self.lr * self.factor).max(self.min_lr);
            let reduced = next < self.lr;
            self.lr = next;
            return reduced;
        }
        false
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Micro-batches per optimizer step (gradient accumulation).
    pub grad_accum: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub decoupled_decay: bool,
    pub beta1: f64,
    pub beta2: f64,
    pub plateau_factor: f64,
    pub plateau_patience: usize,
    pub plateau_threshold: f64,
    pub min_lr: f64,
    pub early_stop_patience: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 50,
            batch_size: 32,
            grad_accum: 1,
            lr: 1e-3,
            weight_decay: 0.0,
            decoupled_decay: false,
            beta1: 0.9,
            beta2: 0.999,
            plateau_factor: 0.5,
            plateau_patience: 3,
            plateau_threshold: 1e-4,
            min_lr: 1e-6,
            early_stop_patience: 8,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.grad_accum == 0 {
            return Err(Error::InvalidConfig(
                "epochs, batch_size, and grad_accum must be positive".into(),
            ));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::InvalidConfig("learning rate must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::InvalidConfig("betas must lie in [0, 1)".into()));
        }
        if !(0.0..1.0).contains(&self.plateau_factor) {
            return Err(Error::InvalidConfig("plateau factor must lie in (0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_nmse: f64,
    pub lr: f64,
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub history: Vec<EpochRecord>,
    pub best_val: f64,
    pub best_epoch: usize,
}

fn restore_model_params<M: TrainableModel + ?Sized>(model: &mut M, params: &[Arr]) {
    let vars: Vec<Var> = model.registry().entries().iter().map(|e| e.var).collect();
    assert_eq!(vars.len(), params.len(), "snapshot length");
    let tape = model.tape_mut();
    for (v, val) in vars.into_iter().zip(params) {
        tape.set_value(v, val.clone());
    }
}

/// Deterministic validation membership: every sample whose index hashes
/// to 0 modulo 10 is held out.
pub fn is_validation_index(index: usize) -> bool {
    crate::channel::splitmix64(index as u64) % 10 == 0
}

fn gather_planes(
    dataset: &CsiDataset,
    idxs: &[usize],
) -> (Array3<Complex64>, Array3<Complex64>) {
    let first = &dataset.samples[idxs[0]];
    let (a, t, k) = first.history.data.dim();
    let p = first.target.data.dim().1;
    let mut hist = Array3::zeros((idxs.len() * a, t, k));
    let mut target = Array3::zeros((idxs.len() * a, p, k));
    for (row, &i) in idxs.iter().enumerate() {
        let s = &dataset.samples[i];
        let h = to_planes(s.history.data.view().insert_axis(Axis(0)));
        let g = to_planes(s.target.data.view().insert_axis(Axis(0)));
        hist.slice_axis_mut(Axis(0), ndarray::Slice::from(row * a..(row + 1) * a))
            .assign(&h);
        target
            .slice_axis_mut(Axis(0), ndarray::Slice::from(row * a..(row + 1) * a))
            .assign(&g);
    }
    (hist, target)
}

/// Forward/backward over a batch, optionally split into micro-batches
/// whose gradients are recombined with sample-count weights. Exactly
/// equal to the single-pass gradient for models without batch statistics
/// or dropout. Returns the batch loss and gradients indexed by tape slot.
pub fn batch_gradients<M: TrainableModel + ?Sized>(
    model: &mut M,
    hist: &Array3<Complex64>,
    target: &Array3<Complex64>,
    group: usize,
    micro_batches: usize,
    phase: Phase,
    rng: &mut ChaCha12Rng,
) -> Result<(f64, Vec<Option<Arr>>)> {
    let n_samples = hist.dim().0 / group;
    let k = micro_batches.min(n_samples).max(1);
    let params = model.registry().trainable_vars();
    let n_slots = params.iter().map(|p| p.index()).max().map_or(0, |m| m + 1);
    let mut acc: Vec<Option<Arr>> = (0..n_slots).map(|_| None).collect();
    let mut total_loss = 0.0;

    let base = n_samples / k;
    let rem = n_samples % k;
    let mut start = 0usize;
    for c in 0..k {
        let count = base + usize::from(c < rem);
        if count == 0 {
            continue;
        }
        let rows = start * group..(start + count) * group;
        let h = hist.slice_axis(Axis(0), ndarray::Slice::from(rows.clone()));
        let t = target.slice_axis(Axis(0), ndarray::Slice::from(rows));
        let weight = count as f64 / n_samples as f64;

        let out = model.forward_planes(h, phase, rng);
        let packed = pack_real_pairs(t);
        let loss = nmse_loss(model.tape_mut(), out, &packed, group)?;
        let loss_val = model.tape().scalar_value(loss);
        if !loss_val.is_finite() {
            model.tape_mut().reset();
            return Err(Error::NonFiniteLoss { epoch: 0, batch: c });
        }
        total_loss += weight * loss_val;
        let grads = model.tape().backward(loss);
        for &p in &params {
            if let Some(g) = &grads[p.index()] {
                let scaled = g * weight;
                match &mut acc[p.index()] {
                    Some(a) => *a += &scaled,
                    slot @ None => *slot = Some(scaled),
                }
            }
        }
        model.tape_mut().reset();
        start += count;
    }
    Ok((total_loss, acc))
}

/// Mean validation error in inference mode.
fn validation_nmse<M: TrainableModel + ?Sized>(
    model: &mut M,
    dataset: &CsiDataset,
    idxs: &[usize],
    batch_size: usize,
) -> Result<f64> {
    let group = dataset.config.n_tx;
    let mut total = 0.0;
    for chunk in idxs.chunks(batch_size) {
        let (hist, target) = gather_planes(dataset, chunk);
        let pred = predict_planes(model, hist.view());
        total += nmse_planes(pred.view(), target.view(), group)? * chunk.len() as f64;
    }
    Ok(total / idxs.len() as f64)
}

/// Train a model on a dataset; restores the best-validation parameters
/// before returning.
pub fn train<M: TrainableModel + ?Sized>(
    model: &mut M,
    dataset: &CsiDataset,
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    cfg.validate()?;
    dataset.validate()?;
    let dims = model.dims();
    if dataset.config.hist_len != dims.hist_len
        || dataset.config.pred_len != dims.pred_len
        || dataset.config.n_sc != dims.n_sc
    {
        return Err(Error::dim(
            "train dataset",
            format!("{}x{}x{}", dims.hist_len, dims.pred_len, dims.n_sc),
            format!(
                "{}x{}x{}",
                dataset.config.hist_len, dataset.config.pred_len, dataset.config.n_sc
            ),
        ));
    }

    let group = dataset.config.n_tx;
    let mut train_idx = Vec::new();
    let mut val_idx = Vec::new();
    for i in 0..dataset.samples.len() {
        if is_validation_index(i) {
            val_idx.push(i);
        } else {
            train_idx.push(i);
        }
    }
    if train_idx.is_empty() {
        return Err(Error::EmptySubset("training split"));
    }
    if val_idx.is_empty() {
        return Err(Error::EmptySubset("validation split"));
    }

    let mut opt = Adam::new(
        model.tape(),
        model.registry().trainable_vars(),
        AdamConfig {
            lr: cfg.lr,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: 1e-8,
            weight_decay: cfg.weight_decay,
            decoupled_decay: cfg.decoupled_decay,
        },
    );
    let mut sched = PlateauScheduler::new(
        cfg.lr,
        cfg.plateau_factor,
        cfg.plateau_patience,
        cfg.plateau_threshold,
        cfg.min_lr,
    );

    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best_val = f64::INFINITY;
    let mut best_epoch = 0usize;
    let mut best_params = snapshot_params(model.tape(), model.registry());
    let mut stall_best = f64::INFINITY;
    let mut stall = 0usize;

    for epoch in 0..cfg.epochs {
        let mut order = train_idx.clone();
        let mut shuffle_rng = ChaCha12Rng::seed_from_u64(mix_seed(cfg.seed, 0x5348 + epoch as u64));
        order.shuffle(&mut shuffle_rng);
        let mut dropout_rng = ChaCha12Rng::seed_from_u64(mix_seed(cfg.seed, 0xD509 + epoch as u64));

        let lr = sched.lr();
        let mut epoch_loss = 0.0;
        let mut n_batches = 0usize;
        for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let (hist, target) = gather_planes(dataset, chunk);
            let (loss, grads) = batch_gradients(
                model,
                &hist,
                &target,
                group,
                cfg.grad_accum,
                Phase::Train,
                &mut dropout_rng,
            )
            .map_err(|e| match e {
                Error::NonFiniteLoss { .. } => Error::NonFiniteLoss { epoch, batch: bi },
                other => other,
            })?;
            opt.step(model.tape_mut(), &grads, lr);
            epoch_loss += loss;
            n_batches += 1;
        }
        let train_loss = epoch_loss / n_batches as f64;
        let val = validation_nmse(model, dataset, &val_idx, cfg.batch_size)?;
        history.push(EpochRecord { epoch, train_loss, val_nmse: val, lr });

        if val < best_val {
            best_val = val;
            best_epoch = epoch;
            best_params = snapshot_params(model.tape(), model.registry());
        }
        sched.observe(val);
        if val < stall_best * (1.0 - cfg.plateau_threshold) {
            stall_best = val;
            stall = 0;
        } else {
            stall += 1;
            if stall > cfg.early_stop_patience {
                break;
            }
        }
    }

    restore_model_params(model, &best_params);
    Ok(TrainReport { history, best_val, best_epoch })
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub per_param: Vec<(String, f64)>,
}

/// Compare analytic gradients against central differences for every
/// trainable tensor, using batch statistics but no dropout or buffer
/// updates so the function under test is deterministic and smooth.
pub fn gradient_check<M: TrainableModel + ?Sized>(
    model: &mut M,
    hist: &Array3<Complex64>,
    target: &Array3<Complex64>,
    group: usize,
) -> Result<GradCheckReport> {
    gradient_check_scaled(model, hist, target, group, 1.0)
}

fn gradient_check_scaled<M: TrainableModel + ?Sized>(
    model: &mut M,
    hist: &Array3<Complex64>,
    target: &Array3<Complex64>,
    group: usize,
    corruption: f64,
) -> Result<GradCheckReport> {
    let packed = pack_real_pairs(target.view());

    let eval_loss = |model: &mut M| -> Result<f64> {
        let mut rng = ChaCha12Rng::seed_from_u64(0);
        let out = model.forward_planes(hist.view(), Phase::GradCheck, &mut rng);
        let loss = nmse_loss(model.tape_mut(), out, &packed, group)?;
        let v = model.tape().scalar_value(loss);
        model.tape_mut().reset();
        Ok(v)
    };

    let mut rng = ChaCha12Rng::seed_from_u64(0);
    let out = model.forward_planes(hist.view(), Phase::GradCheck, &mut rng);
    let loss = nmse_loss(model.tape_mut(), out, &packed, group)?;
    let grads = model.tape().backward(loss);
    let entries: Vec<_> = model
        .registry()
        .entries()
        .iter()
        .filter(|e| e.trainable)
        .cloned()
        .collect();
    let analytic: Vec<Arr> = entries
        .iter()
        .map(|e| {
            grads[e.var.index()]
                .clone()
                .unwrap_or_else(|| Arr::zeros(model.tape().value(e.var).raw_dim()))
        })
        .collect();
    model.tape_mut().reset();

    let mut per_param = Vec::with_capacity(entries.len());
    let mut max_rel = 0.0f64;
    for (ei, entry) in entries.iter().enumerate() {
        let theta = model.tape().value(entry.var).clone();
        let mut numeric = Arr::zeros(theta.raw_dim());
        for j in 0..theta.len() {
            let base = theta.as_slice().unwrap()[j];
            let h = 1e-6 * base.abs().max(1.0);

            let mut plus = theta.clone();
            plus.as_slice_mut().unwrap()[j] = base + h;
            model.tape_mut().set_value(entry.var, plus);
            let lp = eval_loss(model)?;

            let mut minus = theta.clone();
            minus.as_slice_mut().unwrap()[j] = base - h;
            model.tape_mut().set_value(entry.var, minus);
            let lm = eval_loss(model)?;

            numeric.as_slice_mut().unwrap()[j] = (lp - lm) / (2.0 * h);
        }
        model.tape_mut().set_value(entry.var, theta);

        let a = &analytic[ei] * corruption;
        let diff = (&a - &numeric).mapv(|v| v * v).sum().sqrt();
        let scale = a.mapv(|v| v * v).sum().sqrt() + numeric.mapv(|v| v * v).sum().sqrt();
        // Parameters whose true gradient vanishes (softmax cancels a uniform
        // key-bias shift, for example) leave both norms at roundoff level;
        // the ratio is meaningless there, so treat the tensor as matching.
        let rel = if scale < 1e-8 { 0.0 } else { diff / scale };
        max_rel = max_rel.max(rel);
        per_param.push((entry.name.clone(), rel));
    }
    Ok(GradCheckReport { max_rel_err: max_rel, per_param })
}
