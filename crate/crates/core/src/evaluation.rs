//! Scoring and accounting: prediction error, spectral efficiency,
//! cross-model scenario ranks, and compute-cost bookkeeping.
//!
//! Cost counting conventions, stated once so every number in the
//! efficiency tables is auditable:
//!
//! * a multiply-accumulate is 2 FLOPs, so a dense map `a -> b` with bias
//!   costs `2ab + b` per input vector and a convolution costs
//!   `2 * (c_in / groups) * k^2 + 1` per output element (the `+1` only
//!   when the layer has a bias);
//! * pointwise work (activations, sums, products, gates, pooling) is
//!   1 FLOP per element; an identity activation is free;
//! * normalization layers cost 4 FLOPs per element at inference;
//! * softmax costs 5 FLOPs per element;
//! * pure layout changes (reshape, transpose, slice, concat) are free;
//! * dropout at inference is free.
//!
//! Counts cover one forward pass over a whole CSI history, i.e. all
//! transmit antennas at once. Parameter totals come from the model's
//! registry: `trainable` counts tensors that receive gradients, `total`
//! additionally includes persistent state such as normalization running
//! statistics.

use std::time::Instant;

use ndarray::{Array3, ArrayView2, ArrayView3, Axis};
use num_complex::Complex64;

use crate::baselines::{CnnConfig, RnnConfig};
use crate::error::{Error, Result};
use crate::layers::Activation;
use crate::model::{cnn_channels, Csi4CastConfig, ModelDims, TrainableModel};
use crate::types::{CsiSample, Duplex, ScenarioDescriptor};

/// Mean per-(model, scenario) scores over one evaluation set.
#[derive(Debug, Clone, PartialEq)]
pub struct EvaluationRecord {
    pub model: String,
    pub scenario: ScenarioDescriptor,
    pub mean_nmse: f64,
    pub mean_se: f64,
    pub n_samples: usize,
}

/// Per-model compute costs.
#[derive(Debug, Clone, PartialEq)]
pub struct EfficiencyRecord {
    pub model: String,
    pub trainable_params: u64,
    pub total_params: u64,
    pub flops: u64,
    pub inference_ms: f64,
}

/// Which way a metric orders models: prediction error rewards small
/// values, spectral efficiency rewards large ones.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RankMetric {
    NmseAscending,
    SeDescending,
}

/// Rank statistics for one model over a scenario subset.
#[derive(Debug, Clone, PartialEq)]
pub struct RankSummary {
    pub model: String,
    pub mean_rank: f64,
    pub rank_score: f64,
    pub p_rank1: f64,
}

/// Squared-error-to-signal ratio of one prediction block, both shaped
/// (antenna, step, subcarrier).
pub fn nmse_metric(pred: ArrayView3<'_, Complex64>, target: ArrayView3<'_, Complex64>) -> Result<f64> {
    if pred.dim() != target.dim() {
        return Err(Error::dim(
            "prediction block",
            format!("{:?}", target.dim()),
            format!("{:?}", pred.dim()),
        ));
    }
    let mut err = 0.0;
    let mut pow = 0.0;
    for (p, t) in pred.iter().zip(target.iter()) {
        err += (p - t).norm_sqr();
        pow += t.norm_sqr();
    }
    if pow == 0.0 {
        return Err(Error::ZeroTarget);
    }
    Ok(err / pow)
}

/// Achievable rate with perfect beamforming on `h` shaped
/// (antenna, subcarrier): the per-subcarrier mean of
/// `log2(1 + ||h_k||^2 / noise_var)`.
pub fn spectral_efficiency(h: ArrayView2<'_, Complex64>, noise_var: f64) -> Result<f64> {
    check_noise_var(noise_var)?;
    let n_sc = h.ncols();
    let mut sum = 0.0;
    for k in 0..n_sc {
        let p: f64 = h.column(k).iter().map(|v| v.norm_sqr()).sum();
        sum += (1.0 + p / noise_var).log2();
    }
    Ok(sum / n_sc as f64)
}

/// Rate achieved when the transmitter beamforms along the predicted
/// channel `pred` while the true channel is `truth`, both shaped
/// (antenna, subcarrier). Subcarriers where the prediction is
/// identically zero carry no signal and contribute nothing.
pub fn predicted_se(
    pred: ArrayView2<'_, Complex64>,
    truth: ArrayView2<'_, Complex64>,
    noise_var: f64,
) -> Result<f64> {
    check_noise_var(noise_var)?;
    if pred.dim() != truth.dim() {
        return Err(Error::dim(
            "predicted channel",
            format!("{:?}", truth.dim()),
            format!("{:?}", pred.dim()),
        ));
    }
    let n_sc = truth.ncols();
    let mut sum = 0.0;
    for k in 0..n_sc {
        let mut inner = Complex64::new(0.0, 0.0);
        let mut pred_pow = 0.0;
        for (p, t) in pred.column(k).iter().zip(truth.column(k).iter()) {
            inner += p.conj() * t;
            pred_pow += p.norm_sqr();
        }
        if pred_pow > 0.0 {
            sum += (1.0 + inner.norm_sqr() / (noise_var * pred_pow)).log2();
        }
    }
    Ok(sum / n_sc as f64)
}

fn check_noise_var(noise_var: f64) -> Result<()> {
    if !noise_var.is_finite() || noise_var <= 0.0 {
        return Err(Error::InvalidNoiseVar(noise_var));
    }
    Ok(())
}

/// Mean over every (time, subcarrier) slot of the squared norm of the
/// per-subcarrier antenna vector, pooled across all given blocks.
pub fn mean_subcarrier_power<'a, I>(blocks: I) -> Result<f64>
where
    I: IntoIterator<Item = ArrayView3<'a, Complex64>>,
{
    let mut power = 0.0;
    let mut slots = 0usize;
    for block in blocks {
        let (_, t, k) = block.dim();
        power += block.iter().map(|v| v.norm_sqr()).sum::<f64>();
        slots += t * k;
    }
    if slots == 0 {
        return Err(Error::EmptySubset("channel blocks"));
    }
    Ok(power / slots as f64)
}

/// Noise variance placing the operating point `snr_db` below the given
/// mean per-subcarrier channel power.
pub fn noise_var_for_snr(mean_power: f64, snr_db: f64) -> Result<f64> {
    if !mean_power.is_finite() || mean_power <= 0.0 {
        return Err(Error::ZeroSignal("mean channel power"));
    }
    Ok(mean_power * 10f64.powf(-snr_db / 10.0))
}

/// Competition ranking over one scenario: each model's rank is one plus
/// the number of strictly better models, so ties share the smallest rank
/// of their group. Returned in input order.
pub fn scenario_rank(entries: &[(&str, f64)], metric: RankMetric) -> Result<Vec<usize>> {
    for (i, (name, value)) in entries.iter().enumerate() {
        if !value.is_finite() {
            return Err(Error::NonFiniteValue("ranking metric"));
        }
        if entries[..i].iter().any(|(other, _)| other == name) {
            return Err(Error::DuplicateModel((*name).to_string()));
        }
    }
    let beats = |a: f64, b: f64| match metric {
        RankMetric::NmseAscending => a < b,
        RankMetric::SeDescending => a > b,
    };
    Ok(entries
        .iter()
        .map(|&(_, v)| 1 + entries.iter().filter(|&&(_, o)| beats(o, v)).count())
        .collect())
}

/// Aggregate per-scenario ranks into mean rank, rank score and the
/// rank-one share. Every model must be ranked on the same scenarios;
/// the score baseline is the number of models in the table.
pub fn rank_summaries(table: &[(&str, Vec<usize>)]) -> Result<Vec<RankSummary>> {
    if table.is_empty() || table[0].1.is_empty() {
        return Err(Error::EmptySubset("rank table"));
    }
    let n_models = table.len();
    let n_scenarios = table[0].1.len();
    for (i, (name, ranks)) in table.iter().enumerate() {
        if ranks.len() != n_scenarios {
            return Err(Error::dim(
                "rank rows",
                n_scenarios.to_string(),
                ranks.len().to_string(),
            ));
        }
        if table[..i].iter().any(|(other, _)| other == name) {
            return Err(Error::DuplicateModel((*name).to_string()));
        }
    }
    Ok(table
        .iter()
        .map(|(name, ranks)| {
            let mean_rank = ranks.iter().sum::<usize>() as f64 / n_scenarios as f64;
            let firsts = ranks.iter().filter(|&&r| r == 1).count();
            RankSummary {
                model: (*name).to_string(),
                mean_rank,
                rank_score: n_models as f64 - mean_rank,
                p_rank1: firsts as f64 / n_scenarios as f64,
            }
        })
        .collect())
}

/// Normalized headroom against the most expensive model: the costliest
/// model scores 0, a free model scores 1. Returned in input order.
pub fn eff_score(costs: &[f64]) -> Result<Vec<f64>> {
    let max = costs.iter().cloned().fold(0.0, f64::max);
    if !(max > 0.0) {
        return Err(Error::AllZeroCosts);
    }
    Ok(costs.iter().map(|c| 1.0 - c / max).collect())
}

/// Element counts of the model's registered tensors as
/// (trainable, total).
pub fn count_params(model: &dyn TrainableModel) -> (u64, u64) {
    let mut trainable = 0u64;
    let mut total = 0u64;
    for entry in model.registry().entries() {
        let n = model.tape().value(entry.var).len() as u64;
        total += n;
        if entry.trainable {
            trainable += n;
        }
    }
    (trainable, total)
}

/// The persistence predictor stores nothing and computes nothing.
pub fn naive_params() -> (u64, u64) {
    (0, 0)
}

/// See [`naive_params`].
pub fn naive_flops() -> u64 {
    0
}

/// Cost of one dense map per input vector.
pub fn dense_flops(input: u64, output: u64, bias: bool) -> u64 {
    2 * input * output + if bias { output } else { 0 }
}

/// Cost of one convolution given its total output element count.
pub fn conv2d_flops(out_elems: u64, cin_per_group: u64, kernel: u64, bias: bool) -> u64 {
    out_elems * (2 * cin_per_group * kernel * kernel + u64::from(bias))
}

fn act_flops(act: Activation) -> u64 {
    if act == Activation::None {
        0
    } else {
        1
    }
}

/// Cost of a multi-layer perceptron applied to `n_vectors` inputs;
/// `dims` lists every width including input and output.
pub fn mlp_flops(dims: &[usize], hidden_act: Activation, out_act: Activation, n_vectors: u64) -> u64 {
    let n_layers = dims.len() - 1;
    let mut per_vec = 0u64;
    for (i, w) in dims.windows(2).enumerate() {
        let (a, b) = (w[0] as u64, w[1] as u64);
        per_vec += dense_flops(a, b, true);
        let act = if i + 1 < n_layers { hidden_act } else { out_act };
        per_vec += act_flops(act) * b;
    }
    n_vectors * per_vec
}

fn acl_mlp_dims(width: usize, hidden_dim: usize, hidden_layers: usize) -> Vec<usize> {
    let mut dims = vec![width];
    dims.extend(std::iter::repeat(hidden_dim).take(hidden_layers));
    dims.push(width);
    dims
}

/// Forward cost of the full prediction network for one history of
/// `n_tx` antennas.
pub fn csi4cast_flops(config: &Csi4CastConfig, dims: ModelDims, n_tx: usize) -> u64 {
    let b = n_tx as u64;
    let t = dims.hist_len as u64;
    let k = dims.n_sc as u64;
    let p = dims.pred_len as u64;
    let kk = 2 * k;
    let mut total = 0u64;

    let chans = cnn_channels(config.cnn_depth);
    let kern = config.cnn_kernel as u64;
    let n_convs = chans.len() - 1;
    for (i, w) in chans.windows(2).enumerate() {
        let (cin, cout) = (w[0] as u64, w[1] as u64);
        let out_elems = b * cout * t * k;
        total += conv2d_flops(out_elems, cin, kern, false);
        total += 4 * out_elems;
        if i + 1 < n_convs {
            total += act_flops(config.cnn_activation) * out_elems;
        }
    }
    if config.cnn_residual {
        total += b * 2 * t * k;
    }

    // Delay-domain view: four real products with the transform matrices
    // plus the two part merges.
    total += 4 * (2 * b * t * k * k) + 2 * b * t * k;

    let fdd = config.duplex == Duplex::Fdd;
    let branch = {
        let sh = &config.shuffle;
        let rho = sh.feature_maps as u64;
        let hw = t * k;
        let mut f = 0u64;

        f += mlp_flops(
            &acl_mlp_dims(dims.hist_len, config.acl_time.hidden_dim, config.acl_time.hidden_layers),
            Activation::Relu,
            config.acl_time.out_activation,
            b * kk,
        );
        f += b * t * kk;
        if fdd {
            f += mlp_flops(
                &acl_mlp_dims(
                    2 * dims.n_sc,
                    config.acl_subcarrier.hidden_dim,
                    config.acl_subcarrier.hidden_layers,
                ),
                Activation::Relu,
                config.acl_subcarrier.out_activation,
                b * t,
            );
            f += b * t * kk;
        }

        f += conv2d_flops(b * rho * hw, 2, 1, true);
        for _ in 0..sh.blocks {
            f += conv2d_flops(b * rho * hw, rho / sh.groups as u64, 1, true);
            f += b * rho * hw;
            f += conv2d_flops(b * rho * hw, 1, sh.dw_kernel as u64, true);
            f += conv2d_flops(b * rho * hw, rho, 1, true);
            f += b * rho * hw;
            f += b * rho * hw;
            f += b * dense_flops(rho, rho / 4, true);
            f += b * (rho / 4);
            f += b * dense_flops(rho / 4, rho, true);
            f += b * rho;
            f += b * rho * hw;
        }
        f += conv2d_flops(b * 2 * hw, rho, 1, true);
        f
    };
    total += 2 * branch;
    total += b * t * kk;

    let gamma = config.transformer.latent_dim as u64;
    total += b * t * dense_flops(kk, gamma, true);
    total += b * t * gamma;

    let heads = config.transformer.heads as u64;
    let ffn = config.transformer.ffn_hidden as u64;
    let mut per_layer = 0u64;
    per_layer += 4 * b * t * dense_flops(gamma, gamma, true);
    per_layer += 2 * b * t * t * gamma;
    per_layer += b * heads * t * t;
    per_layer += 5 * b * heads * t * t;
    per_layer += 2 * b * t * t * gamma;
    per_layer += b * t * gamma + 4 * b * t * gamma;
    per_layer += b * t * dense_flops(gamma, ffn, true);
    per_layer += b * t * ffn;
    per_layer += b * t * dense_flops(ffn, gamma, true);
    per_layer += b * t * gamma + 4 * b * t * gamma;
    total += config.transformer.layers as u64 * per_layer;

    total += b * t * dense_flops(gamma, kk, true);
    total += b * kk * dense_flops(t, p, true);
    total
}

/// Forward cost of the recurrent baseline for one history of `n_tx`
/// antennas.
pub fn rnn_flops(config: &RnnConfig, dims: ModelDims, n_tx: usize) -> u64 {
    let b = n_tx as u64;
    let t = dims.hist_len as u64;
    let kk = 2 * dims.n_sc as u64;
    let h = config.hidden as u64;
    let p = dims.pred_len as u64;
    // Per step: six matrix maps, then elementwise work per hidden unit:
    // each gate costs 4 (two bias adds, the pair sum, the squash), the
    // candidate costs 5 (two bias adds, reset product, sum, tanh) and
    // the state blend costs 4.
    let per_step = 3 * 2 * kk * h + 3 * 2 * h * h + 17 * h;
    b * (t * per_step + dense_flops(h, p * kk, true))
}

/// Forward cost of the convolutional baseline for one history of
/// `n_tx` antennas.
pub fn cnn_flops(config: &CnnConfig, dims: ModelDims, n_tx: usize) -> u64 {
    let b = n_tx as u64;
    let t = dims.hist_len as u64;
    let k = dims.n_sc as u64;
    let feat = config.features as u64;
    let hw = t * k;
    let mut total = 0u64;
    for i in 0..config.depth {
        let cin = if i == 0 { 2 } else { feat };
        total += conv2d_flops(b * feat * hw, cin, config.kernel as u64, true);
        total += b * feat * hw;
    }
    total += conv2d_flops(b * 2 * hw, feat, 1, true);
    total += b * 2 * k * dense_flops(t, dims.pred_len as u64, true);
    total
}

/// Median wall time in milliseconds of a single-history forward pass.
/// The kernels are held on the calling thread for the duration so the
/// number does not depend on worker-pool scheduling.
pub fn measure_inference_time(
    model: &mut dyn TrainableModel,
    history: ArrayView3<'_, Complex64>,
    reps: usize,
) -> Result<f64> {
    if reps == 0 {
        return Err(Error::InvalidConfig("timing needs at least one repetition".into()));
    }
    let _guard = crate::autodiff::sequential_mode_guard();
    for _ in 0..2 {
        crate::model::predict_planes(model, history);
    }
    let mut times = Vec::with_capacity(reps);
    for _ in 0..reps {
        let start = Instant::now();
        crate::model::predict_planes(model, history);
        times.push(start.elapsed().as_secs_f64() * 1e3);
    }
    times.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mid = reps / 2;
    Ok(if reps % 2 == 1 { times[mid] } else { (times[mid - 1] + times[mid]) / 2.0 })
}

/// Mean scores of one predictor over an evaluation set. The prediction
/// callback maps a history block (antenna, time, subcarrier) to the
/// predicted future block; spectral efficiency is averaged over the
/// prediction steps of each sample.
pub struct EvalStats {
    pub mean_nmse: f64,
    pub mean_se: f64,
    pub n_samples: usize,
}

pub fn evaluate_samples<F>(mut predict: F, samples: &[CsiSample], noise_var: f64) -> Result<EvalStats>
where
    F: FnMut(ArrayView3<'_, Complex64>) -> Result<Array3<Complex64>>,
{
    if samples.is_empty() {
        return Err(Error::EmptySubset("evaluation sample set"));
    }
    let mut nmse_sum = 0.0;
    let mut se_sum = 0.0;
    for sample in samples {
        let pred = predict(sample.history.data.view())?;
        let truth = &sample.target.data;
        nmse_sum += nmse_metric(pred.view(), truth.view())?;
        let steps = truth.shape()[1];
        let mut step_se = 0.0;
        for step in 0..steps {
            step_se += predicted_se(
                pred.index_axis(Axis(1), step),
                truth.index_axis(Axis(1), step),
                noise_var,
            )?;
        }
        se_sum += step_se / steps as f64;
    }
    let n = samples.len() as f64;
    Ok(EvalStats { mean_nmse: nmse_sum / n, mean_se: se_sum / n, n_samples: samples.len() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::baselines::{CnnPredictor, NaivePredictor, RnnPredictor};
    use crate::model::{AclConfig, Csi4CastModel, ShuffleConfig, TransformerConfig};
    use approx::assert_abs_diff_eq;
    use ndarray::{Array2, Array3};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    fn random_block(shape: (usize, usize, usize), seed: u64) -> Array3<Complex64> {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        Array3::from_shape_fn(shape, |_| {
            Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))
        })
    }

    fn random_matrix(shape: (usize, usize), seed: u64) -> Array2<Complex64> {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        Array2::from_shape_fn(shape, |_| {
            Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))
        })
    }

    #[test]
    fn nmse_is_zero_for_perfect_and_one_for_zero_prediction() {
        let target = random_block((2, 3, 4), 1);
        assert_abs_diff_eq!(nmse_metric(target.view(), target.view()).unwrap(), 0.0);
        let zeros = Array3::zeros((2, 3, 4));
        assert_abs_diff_eq!(nmse_metric(zeros.view(), target.view()).unwrap(), 1.0);
    }

    #[test]
    fn nmse_matches_hand_ratio() {
        let mut target = Array3::zeros((1, 1, 2));
        target[[0, 0, 0]] = Complex64::new(2.0, 0.0);
        let mut pred = target.clone();
        pred[[0, 0, 1]] = Complex64::new(0.0, 1.0);
        // error 1, signal 4
        assert_abs_diff_eq!(nmse_metric(pred.view(), target.view()).unwrap(), 0.25);
    }

    #[test]
    fn nmse_rejects_zero_target_and_shape_mismatch() {
        let zeros: Array3<Complex64> = Array3::zeros((1, 2, 2));
        assert!(matches!(nmse_metric(zeros.view(), zeros.view()), Err(Error::ZeroTarget)));
        let other: Array3<Complex64> = Array3::zeros((1, 2, 3));
        assert!(nmse_metric(zeros.view(), other.view()).is_err());
    }

    #[test]
    fn spectral_efficiency_known_points() {
        let zeros: Array2<Complex64> = Array2::zeros((2, 4));
        assert_abs_diff_eq!(spectral_efficiency(zeros.view(), 1.0).unwrap(), 0.0);

        // Every subcarrier at power equal to the noise floor: one bit.
        let mut h = Array2::zeros((2, 4));
        for k in 0..4 {
            h[[0, k]] = Complex64::new(3.0, 0.0);
        }
        assert_abs_diff_eq!(spectral_efficiency(h.view(), 9.0).unwrap(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn spectral_efficiency_matches_scalar_loop() {
        let h = random_matrix((3, 4), 7);
        let sigma = 0.37;
        let mut expect = 0.0;
        for k in 0..4 {
            let mut p = 0.0;
            for a in 0..3 {
                p += h[[a, k]].norm_sqr();
            }
            expect += (1.0 + p / sigma).log2();
        }
        expect /= 4.0;
        assert_abs_diff_eq!(spectral_efficiency(h.view(), sigma).unwrap(), expect, epsilon = 1e-12);
    }

    #[test]
    fn spectral_efficiency_rejects_bad_noise_var() {
        let h = random_matrix((2, 2), 3);
        assert!(matches!(spectral_efficiency(h.view(), 0.0), Err(Error::InvalidNoiseVar(_))));
        assert!(matches!(spectral_efficiency(h.view(), -1.0), Err(Error::InvalidNoiseVar(_))));
        assert!(matches!(spectral_efficiency(h.view(), f64::NAN), Err(Error::InvalidNoiseVar(_))));
    }

    #[test]
    fn predicted_se_attains_capacity_on_exact_and_scaled_predictions() {
        let h = random_matrix((3, 5), 11);
        let sigma = 0.8;
        let cap = spectral_efficiency(h.view(), sigma).unwrap();
        assert_abs_diff_eq!(predicted_se(h.view(), h.view(), sigma).unwrap(), cap, epsilon = 1e-12);

        let scaled = h.mapv(|v| v * Complex64::new(-0.3, 1.7));
        assert_abs_diff_eq!(
            predicted_se(scaled.view(), h.view(), sigma).unwrap(),
            cap,
            epsilon = 1e-12
        );
    }

    #[test]
    fn predicted_se_is_zero_for_orthogonal_and_skips_zero_predictions() {
        let mut truth = Array2::zeros((2, 3));
        let mut pred = Array2::zeros((2, 3));
        for k in 0..3 {
            truth[[0, k]] = Complex64::new(1.0, 0.0);
            pred[[1, k]] = Complex64::new(1.0, 0.0);
        }
        assert_abs_diff_eq!(predicted_se(pred.view(), truth.view(), 0.5).unwrap(), 0.0);

        let zeros: Array2<Complex64> = Array2::zeros((2, 3));
        assert_abs_diff_eq!(predicted_se(zeros.view(), truth.view(), 0.5).unwrap(), 0.0);
    }

    #[test]
    fn predicted_se_never_exceeds_capacity() {
        for seed in 0..200 {
            let truth = random_matrix((3, 4), 1000 + seed);
            let pred = random_matrix((3, 4), 2000 + seed);
            let cap = spectral_efficiency(truth.view(), 0.6).unwrap();
            let got = predicted_se(pred.view(), truth.view(), 0.6).unwrap();
            assert!(got <= cap + 1e-12, "seed {seed}: {got} > {cap}");
        }
    }

    #[test]
    fn noise_floor_helpers() {
        let mut block = Array3::zeros((2, 1, 2));
        block[[0, 0, 0]] = Complex64::new(2.0, 0.0);
        block[[1, 0, 1]] = Complex64::new(0.0, 4.0);
        // total power 20 over 2 slots
        assert_abs_diff_eq!(mean_subcarrier_power([block.view()]).unwrap(), 10.0);

        assert_abs_diff_eq!(noise_var_for_snr(10.0, 10.0).unwrap(), 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(noise_var_for_snr(4.0, 0.0).unwrap(), 4.0, epsilon = 1e-12);
        assert!(matches!(noise_var_for_snr(0.0, 10.0), Err(Error::ZeroSignal(_))));
        let empty: [ArrayView3<'_, Complex64>; 0] = [];
        assert!(matches!(mean_subcarrier_power(empty), Err(Error::EmptySubset(_))));
    }

    #[test]
    fn ranks_follow_order_and_share_ties() {
        let ranks =
            scenario_rank(&[("a", 0.1), ("b", 0.2), ("c", 0.3)], RankMetric::NmseAscending).unwrap();
        assert_eq!(ranks, vec![1, 2, 3]);

        let tied =
            scenario_rank(&[("a", 0.1), ("b", 0.1), ("c", 0.3)], RankMetric::NmseAscending).unwrap();
        assert_eq!(tied, vec![1, 1, 3]);

        let by_se = scenario_rank(&[("a", 1.0), ("b", 3.0)], RankMetric::SeDescending).unwrap();
        assert_eq!(by_se, vec![2, 1]);
    }

    #[test]
    fn ranks_reject_duplicates_and_non_finite_values() {
        let err = scenario_rank(&[("a", 0.1), ("a", 0.2)], RankMetric::NmseAscending);
        assert!(matches!(err, Err(Error::DuplicateModel(name)) if name == "a"));
        let err = scenario_rank(&[("a", f64::NAN)], RankMetric::NmseAscending);
        assert!(matches!(err, Err(Error::NonFiniteValue(_))));
    }

    #[test]
    fn ranks_match_sort_based_oracle() {
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let names = ["m0", "m1", "m2", "m3", "m4"];
        for _ in 0..7 {
            let values: Vec<f64> = (0..5).map(|_| (rng.gen_range(0..40) as f64) / 10.0).collect();
            let entries: Vec<(&str, f64)> =
                names.iter().zip(&values).map(|(n, v)| (*n, *v)).collect();
            let got = scenario_rank(&entries, RankMetric::NmseAscending).unwrap();

            // Oracle: sort indices by value, walk the sorted order and
            // give each tie group the rank of its first member.
            let mut order: Vec<usize> = (0..5).collect();
            order.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).unwrap());
            let mut expect = vec![0usize; 5];
            for (pos, &idx) in order.iter().enumerate() {
                expect[idx] = if pos > 0 && values[idx] == values[order[pos - 1]] {
                    expect[order[pos - 1]]
                } else {
                    pos + 1
                };
            }
            assert_eq!(got, expect, "values {values:?}");
        }
    }

    #[test]
    fn rank_summaries_known_cases() {
        let table = vec![("a", vec![1usize, 1]), ("b", vec![2, 3]), ("c", vec![3, 2])];
        let sums = rank_summaries(&table).unwrap();
        assert_abs_diff_eq!(sums[0].mean_rank, 1.0);
        assert_abs_diff_eq!(sums[0].rank_score, 2.0);
        assert_abs_diff_eq!(sums[0].p_rank1, 1.0);
        assert_abs_diff_eq!(sums[1].mean_rank, 2.5);
        assert_abs_diff_eq!(sums[1].p_rank1, 0.0);

        for s in &sums {
            assert_abs_diff_eq!(s.rank_score + s.mean_rank, 3.0);
        }
    }

    #[test]
    fn rank_summaries_reject_bad_tables() {
        assert!(matches!(rank_summaries(&[]), Err(Error::EmptySubset(_))));
        let ragged = vec![("a", vec![1usize]), ("b", vec![1, 2])];
        assert!(rank_summaries(&ragged).is_err());
        let dup = vec![("a", vec![1usize]), ("a", vec![2])];
        assert!(matches!(rank_summaries(&dup), Err(Error::DuplicateModel(_))));
    }

    #[test]
    fn eff_score_endpoints() {
        let scores = eff_score(&[2.0, 4.0]).unwrap();
        assert_abs_diff_eq!(scores[0], 0.5);
        assert_abs_diff_eq!(scores[1], 0.0);
        let with_free = eff_score(&[0.0, 5.0]).unwrap();
        assert_abs_diff_eq!(with_free[0], 1.0);
        assert!(matches!(eff_score(&[0.0, 0.0]), Err(Error::AllZeroCosts)));
    }

    fn tiny_dims() -> ModelDims {
        ModelDims { hist_len: 4, pred_len: 2, n_sc: 4 }
    }

    fn tiny_csi4cast_config() -> Csi4CastConfig {
        Csi4CastConfig {
            duplex: Duplex::Tdd,
            cnn_depth: 1,
            cnn_kernel: 3,
            acl_time: AclConfig { hidden_layers: 1, hidden_dim: 2, ..AclConfig::default() },
            acl_subcarrier: AclConfig { hidden_layers: 1, hidden_dim: 2, ..AclConfig::default() },
            shuffle: ShuffleConfig {
                feature_maps: 4,
                groups: 2,
                dw_kernel: 3,
                blocks: 1,
                dropout: 0.0,
            },
            transformer: TransformerConfig {
                latent_dim: 8,
                layers: 1,
                heads: 2,
                ffn_hidden: 4,
                dropout: 0.0,
            },
            ..Csi4CastConfig::default()
        }
    }

    #[test]
    fn dense_and_naive_counts_are_closed_form() {
        assert_eq!(dense_flops(7, 5, true), 2 * 7 * 5 + 5);
        assert_eq!(dense_flops(7, 5, false), 70);
        assert_eq!(naive_params(), (0, 0));
        assert_eq!(naive_flops(), 0);
    }

    #[test]
    fn mlp_flops_match_hand_count() {
        // [4, 2, 4] with relu inside and sigmoid out, 8 vectors:
        // (2*4*2+2) + 2 + (2*2*4+4) + 4 = 44 per vector.
        assert_eq!(
            mlp_flops(&[4, 2, 4], Activation::Relu, Activation::Sigmoid, 8),
            352
        );
        // Identity output activation is free.
        assert_eq!(mlp_flops(&[3, 3], Activation::Relu, Activation::None, 1), 2 * 3 * 3 + 3);
    }

    #[test]
    fn rnn_counts_match_hand_totals() {
        let dims = tiny_dims();
        let config = RnnConfig { hidden: 4 };
        let model = RnnPredictor::new(dims, config, 0).unwrap();
        // Gate maps 3*(8*4) + 3*(4*4), six bias vectors of 4, then the
        // readout 4*16 + 16.
        assert_eq!(count_params(&model), (248, 248));
        // Per step 3*2*8*4 + 3*2*4*4 + 17*4 = 356 over 4 steps, plus
        // the readout 2*4*16 + 16 = 144.
        assert_eq!(rnn_flops(&config, dims, 1), 1568);
    }

    #[test]
    fn cnn_counts_match_hand_totals() {
        let dims = tiny_dims();
        let config = CnnConfig { features: 2, depth: 2, kernel: 3 };
        let model = CnnPredictor::new(dims, config, 0).unwrap();
        // conv0 2*2*9+2, conv1 2*2*9+2, proj 2*2+2, time map 4*2+2.
        assert_eq!(count_params(&model), (92, 92));
        // conv0 32*37 + 32, conv1 32*37 + 32, proj 32*5, time map 8*18.
        assert_eq!(cnn_flops(&config, dims, 1), 1184 + 32 + 1184 + 32 + 160 + 144);
    }

    #[test]
    fn csi4cast_counts_match_hand_totals() {
        let dims = tiny_dims();
        let config = tiny_csi4cast_config();
        let model = Csi4CastModel::new(dims, config.clone(), 0).unwrap();
        // Denoiser 36 + 4, gates 2*22, mixers 2*107, embedding 72,
        // encoder 288 + 32 + 36 + 40, heads 72 + 10; the four running
        // statistics are the only extra persistent values.
        assert_eq!(count_params(&model), (848, 852));

        // Stage subtotals, hand-evaluated for T=4, K=4, one antenna:
        // denoiser 1312, delay view 544, branches 2*3386, merge 32,
        // embedding 544 + 32, encoder layer 3776, heads 544 + 144.
        let expect = 1312 + 544 + 6772 + 32 + 544 + 32 + 3776 + 544 + 144;
        assert_eq!(csi4cast_flops(&config, dims, 1), expect);
        assert_eq!(expect, 13700);
    }

    #[test]
    fn flops_scale_linearly_with_antennas() {
        let dims = tiny_dims();
        let config = tiny_csi4cast_config();
        assert_eq!(csi4cast_flops(&config, dims, 3), 3 * csi4cast_flops(&config, dims, 1));
        let rnn = RnnConfig { hidden: 4 };
        assert_eq!(rnn_flops(&rnn, dims, 4), 4 * rnn_flops(&rnn, dims, 1));
    }

    #[test]
    fn fdd_variant_counts_the_subcarrier_gate() {
        let dims = tiny_dims();
        let tdd = tiny_csi4cast_config();
        let fdd = Csi4CastConfig { duplex: Duplex::Fdd, ..tdd.clone() };
        let extra = csi4cast_flops(&fdd, dims, 1) as i64 - csi4cast_flops(&tdd, dims, 1) as i64;
        // Two branches each add an [8, 2, 8] gate over 4 vectors plus
        // the combine: (2*8*2+2 + 2) + (2*2*8+8 + 8) + ... = 88 per
        // vector, 4 vectors, plus 32 merge ops.
        let gate = mlp_flops(&[8, 2, 8], Activation::Relu, Activation::Sigmoid, 4) + 32;
        assert_eq!(extra, 2 * gate as i64);
    }

    #[test]
    fn timing_returns_positive_median() {
        let dims = tiny_dims();
        let mut model = RnnPredictor::new(dims, RnnConfig { hidden: 4 }, 0).unwrap();
        let history = random_block((2, dims.hist_len, dims.n_sc), 3);
        let ms = measure_inference_time(&mut model, history.view(), 3).unwrap();
        assert!(ms.is_finite() && ms > 0.0);
        assert!(matches!(
            measure_inference_time(&mut model, history.view(), 0),
            Err(Error::InvalidConfig(_))
        ));
    }

    #[test]
    fn evaluate_samples_scores_the_persistence_predictor() {
        use crate::channel::make_dataset;
        use crate::types::{ChannelProfile, Duplex, NoiseType, SnrMode, SystemConfig};

        let config = SystemConfig {
            n_tx: 2,
            n_sc: 8,
            n_guard: 2,
            hist_len: 6,
            pred_len: 2,
            ..SystemConfig::default()
        };
        let scenario = ScenarioDescriptor {
            velocity_mps: 3.0,
            delay_spread_s: 100e-9,
            profile: ChannelProfile::NlosA,
            noise: NoiseType::None,
            noise_degree: 0.0,
            duplex: Duplex::Tdd,
        };
        let dataset = make_dataset(&config, &scenario, 12, 42, SnrMode::Fixed).unwrap();

        let power = mean_subcarrier_power(dataset.samples.iter().map(|s| s.target.data.view()))
            .unwrap();
        let sigma = noise_var_for_snr(power, 10.0).unwrap();

        let naive = NaivePredictor::new(config.pred_len);
        let stats = evaluate_samples(
            |hist| naive.predict(hist),
            &dataset.samples,
            sigma,
        )
        .unwrap();
        assert_eq!(stats.n_samples, 12);
        assert!(stats.mean_nmse.is_finite() && stats.mean_nmse > 0.0);
        assert!(stats.mean_se.is_finite() && stats.mean_se > 0.0);

        // Beamforming on stale CSI cannot beat beamforming on the truth.
        let mut cap_sum = 0.0;
        for sample in &dataset.samples {
            let mut per_step = 0.0;
            for step in 0..config.pred_len {
                per_step += spectral_efficiency(
                    sample.target.data.index_axis(Axis(1), step),
                    sigma,
                )
                .unwrap();
            }
            cap_sum += per_step / config.pred_len as f64;
        }
        assert!(stats.mean_se <= cap_sum / 12.0 + 1e-12);

        let empty: Vec<CsiSample> = Vec::new();
        assert!(matches!(
            evaluate_samples(|hist| naive.predict(hist), &empty, sigma),
            Err(Error::EmptySubset(_))
        ));
    }
}
