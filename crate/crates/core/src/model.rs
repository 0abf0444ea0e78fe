//! Channel prediction network.
//!
//! The predictor consumes a window of past channel snapshots for one
//! antenna and emits the next few snapshots. All antennas share weights:
//! a batch of samples is flattened into a batch of per-antenna planes
//! before the forward pass.
//!
//! Stages: a small residual CNN denoises the real-stacked input, the
//! result is viewed both in frequency and (via a fixed discrete
//! transform) in delay, each view runs through a calibration MLP stage
//! and a grouped-convolution mixer, the merged views are embedded per
//! time step and refined by a transformer encoder, and two linear heads
//! map latent tokens to output subcarriers and history steps to
//! prediction steps.

use crate::autodiff::{Arr, Tape, Var};
use crate::layers::{
    Activation, BatchNorm2d, Conv2d, Dropout, Linear, Mlp, ParamRegistry,
    Phase, TransformerEncoderLayer,
};
use crate::types::{Duplex, SystemConfig};
use crate::{Error, Result};
use ndarray::{Array3, ArrayView3, IxDyn};
use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use std::fmt;
use std::str::FromStr;

/// How a calibration stage merges its correction into the signal.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Combine {
    Add,
    Multiply,
}

impl fmt::Display for Combine {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Combine::Add => "add",
            Combine::Multiply => "multiply",
        })
    }
}

impl FromStr for Combine {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "add" => Ok(Combine::Add),
            "multiply" => Ok(Combine::Multiply),
            other => Err(Error::InvalidConfig(format!("unknown combine mode '{other}'"))),
        }
    }
}

/// One calibration stage: an MLP along one axis whose output is merged
/// back into its input.
#[derive(Debug, Clone, PartialEq)]
pub struct AclConfig {
    pub hidden_layers: usize,
    pub hidden_dim: usize,
    pub out_activation: Activation,
    pub combine: Combine,
}

impl Default for AclConfig {
    fn default() -> Self {
        AclConfig {
            hidden_layers: 1,
            hidden_dim: 32,
            out_activation: Activation::Sigmoid,
            combine: Combine::Multiply,
        }
    }
}

/// Grouped-convolution mixer configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct ShuffleConfig {
    pub feature_maps: usize,
    pub groups: usize,
    pub dw_kernel: usize,
    pub blocks: usize,
    pub dropout: f64,
}

impl Default for ShuffleConfig {
    fn default() -> Self {
        ShuffleConfig { feature_maps: 8, groups: 2, dw_kernel: 3, blocks: 1, dropout: 0.05 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransformerConfig {
    pub latent_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn_hidden: usize,
    pub dropout: f64,
}

impl Default for TransformerConfig {
    fn default() -> Self {
        TransformerConfig { latent_dim: 64, layers: 2, heads: 4, ffn_hidden: 128, dropout: 0.05 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Csi4CastConfig {
    pub duplex: Duplex,
    pub cnn_depth: usize,
    pub cnn_kernel: usize,
    pub cnn_residual: bool,
    pub cnn_activation: Activation,
    pub acl_time: AclConfig,
    pub acl_subcarrier: AclConfig,
    pub shuffle: ShuffleConfig,
    pub transformer: TransformerConfig,
}

impl Default for Csi4CastConfig {
    fn default() -> Self {
        Csi4CastConfig {
            duplex: Duplex::Tdd,
            cnn_depth: 2,
            cnn_kernel: 3,
            cnn_residual: true,
            cnn_activation: Activation::Relu,
            acl_time: AclConfig::default(),
            acl_subcarrier: AclConfig::default(),
            shuffle: ShuffleConfig::default(),
            transformer: TransformerConfig::default(),
        }
    }
}

impl Csi4CastConfig {
    pub fn validate(&self) -> Result<()> {
        if self.cnn_depth == 0 {
            return Err(Error::InvalidConfig("cnn_depth must be at least 1".into()));
        }
        if self.cnn_kernel % 2 == 0 {
            return Err(Error::InvalidConfig("cnn_kernel must be odd".into()));
        }
        let s = &self.shuffle;
        if s.feature_maps == 0 || s.feature_maps % s.groups != 0 {
            return Err(Error::InvalidConfig(format!(
                "feature_maps {} must be a positive multiple of groups {}",
                s.feature_maps, s.groups
            )));
        }
        if s.feature_maps % 4 != 0 {
            return Err(Error::InvalidConfig(
                "feature_maps must be divisible by 4 for the squeeze bottleneck".into(),
            ));
        }
        if s.dw_kernel % 2 == 0 {
            return Err(Error::InvalidConfig("dw_kernel must be odd".into()));
        }
        if !(0.0..1.0).contains(&s.dropout) {
            return Err(Error::InvalidConfig("shuffle dropout must be in [0, 1)".into()));
        }
        let t = &self.transformer;
        if t.latent_dim == 0 || t.heads == 0 || t.latent_dim % t.heads != 0 {
            return Err(Error::InvalidConfig(format!(
                "latent_dim {} must be a positive multiple of heads {}",
                t.latent_dim, t.heads
            )));
        }
        if t.layers == 0 || t.ffn_hidden == 0 {
            return Err(Error::InvalidConfig("transformer needs layers and ffn_hidden".into()));
        }
        if !(0.0..1.0).contains(&t.dropout) {
            return Err(Error::InvalidConfig("transformer dropout must be in [0, 1)".into()));
        }
        for (name, acl) in [("acl_time", &self.acl_time), ("acl_subcarrier", &self.acl_subcarrier)] {
            if acl.hidden_layers > 0 && acl.hidden_dim == 0 {
                return Err(Error::InvalidConfig(format!("{name}.hidden_dim must be positive")));
            }
        }
        Ok(())
    }
}

/// Shapes every predictor is built for.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelDims {
    pub hist_len: usize,
    pub pred_len: usize,
    pub n_sc: usize,
}

impl ModelDims {
    pub fn from_config(config: &SystemConfig) -> Self {
        ModelDims { hist_len: config.hist_len, pred_len: config.pred_len, n_sc: config.n_sc }
    }
}

/// Common interface for models trained with gradient descent.
pub trait TrainableModel {
    fn tape(&self) -> &Tape;
    fn tape_mut(&mut self) -> &mut Tape;
    fn registry(&self) -> &ParamRegistry;
    fn dims(&self) -> ModelDims;
    /// Per-antenna histories `(B, hist_len, n_sc)` to predictions as
    /// stacked real parts `(B, pred_len, 2 * n_sc)`.
    fn forward_planes(
        &mut self,
        history: ArrayView3<'_, Complex64>,
        phase: Phase,
        rng: &mut ChaCha12Rng,
    ) -> Var;
}

/// Run a model in inference mode and return complex predictions.
pub fn predict_planes<M: TrainableModel + ?Sized>(
    model: &mut M,
    history: ArrayView3<'_, Complex64>,
) -> Array3<Complex64> {
    let mut rng = ChaCha12Rng::seed_from_u64(0);
    let out = model.forward_planes(history, Phase::Eval, &mut rng);
    let arr = model.tape().value(out).clone();
    model.tape_mut().reset();
    unpack_complex(&arr)
}

// ---- plane packing helpers ----

/// Flatten `(N, n_ant, T, K)` complex data into per-antenna planes
/// `(N * n_ant, T, K)`, sample-major.
pub fn to_planes(data: ndarray::ArrayView4<'_, Complex64>) -> Array3<Complex64> {
    let (n, a, t, k) = data.dim();
    let mut out = Array3::zeros((n * a, t, k));
    for i in 0..n {
        for j in 0..a {
            out.index_axis_mut(ndarray::Axis(0), i * a + j)
                .assign(&data.index_axis(ndarray::Axis(0), i).index_axis(ndarray::Axis(0), j));
        }
    }
    out
}

/// Inverse of [`to_planes`].
pub fn from_planes(planes: ArrayView3<'_, Complex64>, n_ant: usize) -> ndarray::Array4<Complex64> {
    let (b, t, k) = planes.dim();
    assert_eq!(b % n_ant, 0, "plane count divisible by antenna count");
    let n = b / n_ant;
    let mut out = ndarray::Array4::zeros((n, n_ant, t, k));
    for i in 0..n {
        for j in 0..n_ant {
            out.index_axis_mut(ndarray::Axis(0), i)
                .index_axis_mut(ndarray::Axis(0), j)
                .assign(&planes.index_axis(ndarray::Axis(0), i * n_ant + j));
        }
    }
    out
}

/// Stack complex planes `(B, T, K)` as a real tensor `(B, 2, T, K)` with
/// the real part in channel 0.
pub fn real_stack(planes: ArrayView3<'_, Complex64>) -> Arr {
    let (b, t, k) = planes.dim();
    let mut out = Arr::zeros(IxDyn(&[b, 2, t, k]));
    for i in 0..b {
        for ti in 0..t {
            for ki in 0..k {
                let z = planes[[i, ti, ki]];
                out[[i, 0, ti, ki]] = z.re;
                out[[i, 1, ti, ki]] = z.im;
            }
        }
    }
    out
}

/// Pack complex planes `(B, P, K)` as `(B, P, 2K)`: real parts in the
/// first K columns, imaginary parts in the rest.
pub fn pack_real_pairs(planes: ArrayView3<'_, Complex64>) -> Arr {
    let (b, p, k) = planes.dim();
    let mut out = Arr::zeros(IxDyn(&[b, p, 2 * k]));
    for i in 0..b {
        for pi in 0..p {
            for ki in 0..k {
                let z = planes[[i, pi, ki]];
                out[[i, pi, ki]] = z.re;
                out[[i, pi, k + ki]] = z.im;
            }
        }
    }
    out
}

/// Inverse of [`pack_real_pairs`].
pub fn unpack_complex(arr: &Arr) -> Array3<Complex64> {
    let shape = arr.shape();
    assert_eq!(shape.len(), 3);
    let (b, p, kk) = (shape[0], shape[1], shape[2]);
    assert_eq!(kk % 2, 0);
    let k = kk / 2;
    Array3::from_shape_fn((b, p, k), |(i, pi, ki)| {
        Complex64::new(arr[[i, pi, ki]], arr[[i, pi, k + ki]])
    })
}

/// Real and imaginary parts of the normalized inverse discrete Fourier
/// matrix: `P[a, b] = cos(2 pi a b / K) / sqrt(K)`, `Q` the sine analog.
pub fn idft_matrices(k: usize) -> (Arr, Arr) {
    let norm = 1.0 / (k as f64).sqrt();
    let mut p = Arr::zeros(IxDyn(&[k, k]));
    let mut q = Arr::zeros(IxDyn(&[k, k]));
    for a in 0..k {
        for b in 0..k {
            let angle = 2.0 * std::f64::consts::PI * (a as f64) * (b as f64) / (k as f64);
            p[[a, b]] = angle.cos() * norm;
            q[[a, b]] = angle.sin() * norm;
        }
    }
    (p, q)
}

/// Sinusoidal position table `(T, dim)` with period scaling by `T`.
pub fn position_encoding(t: usize, dim: usize) -> Arr {
    let mut pe = Arr::zeros(IxDyn(&[t, dim]));
    for v in 0..t {
        for u in 0..dim {
            let exponent = if u % 2 == 0 { u } else { u - 1 } as f64 / dim as f64;
            let arg = v as f64 / (t as f64).powf(exponent);
            pe[[v, u]] = if u % 2 == 0 { arg.sin() } else { arg.cos() };
        }
    }
    pe
}

/// Channel widths of the denoising CNN: doubling up to `2^depth`, then
/// halving back down; depth 1 degenerates to a single 2 -> 2 layer.
pub fn cnn_channels(depth: usize) -> Vec<usize> {
    if depth == 1 {
        return vec![2, 2];
    }
    let mut chans: Vec<usize> = (1..=depth).map(|i| 1usize << i).collect();
    chans.extend((1..depth).rev().map(|i| 1usize << i));
    chans
}

// ---- building blocks ----

struct ShuffleBlock {
    pw1: Conv2d,
    dw: Conv2d,
    pw2: Conv2d,
    se_fc1: Linear,
    se_fc2: Linear,
    groups: usize,
}

impl ShuffleBlock {
    fn new(
        tape: &mut Tape,
        reg: &mut ParamRegistry,
        rng: &mut ChaCha12Rng,
        name: &str,
        cfg: &ShuffleConfig,
    ) -> Self {
        let rho = cfg.feature_maps;
        let pw1 = Conv2d::new(tape, reg, rng, &format!("{name}.pw1"), rho, rho, 1, cfg.groups, true);
        let dw = Conv2d::new(tape, reg, rng, &format!("{name}.dw"), rho, rho, cfg.dw_kernel, rho, true);
        let pw2 = Conv2d::new(tape, reg, rng, &format!("{name}.pw2"), rho, rho, 1, 1, true);
        let se_fc1 = Linear::new(tape, reg, rng, &format!("{name}.se1"), rho, rho / 4, true);
        let se_fc2 = Linear::new(tape, reg, rng, &format!("{name}.se2"), rho / 4, rho, true);
        ShuffleBlock { pw1, dw, pw2, se_fc1, se_fc2, groups: cfg.groups }
    }

    fn forward(&self, tape: &mut Tape, x: Var) -> Var {
        let h = self.pw1.forward(tape, x);
        let h = tape.relu(h);
        let h = channel_shuffle(tape, h, self.groups);
        let h = self.dw.forward(tape, h);
        let h = self.pw2.forward(tape, h);
        let h = tape.relu(h);

        let s = tape.global_avg_pool(h);
        let s = self.se_fc1.forward(tape, s);
        let s = tape.relu(s);
        let s = self.se_fc2.forward(tape, s);
        let s = tape.sigmoid(s);
        tape.mul_chan_gate(h, s)
    }
}

/// Interleave channel groups: `(B, C, H, W)` viewed as `(B, g, C/g, H, W)`
/// transposed to `(B, C/g, g, H, W)` and flattened back.
fn channel_shuffle(tape: &mut Tape, x: Var, groups: usize) -> Var {
    let shape = tape.value(x).shape().to_vec();
    let (b, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    assert_eq!(c % groups, 0);
    let x = tape.reshape(x, &[b, groups, c / groups, h, w]);
    let x = tape.permute(x, &[0, 2, 1, 3, 4]);
    tape.reshape(x, &[b, c, h, w])
}

struct ShuffleStage {
    proj_in: Conv2d,
    blocks: Vec<ShuffleBlock>,
    proj_out: Conv2d,
    dropout: Dropout,
}

impl ShuffleStage {
    fn new(
        tape: &mut Tape,
        reg: &mut ParamRegistry,
        rng: &mut ChaCha12Rng,
        name: &str,
        cfg: &ShuffleConfig,
    ) -> Self {
        let rho = cfg.feature_maps;
        let proj_in = Conv2d::new(tape, reg, rng, &format!("{name}.proj_in"), 2, rho, 1, 1, true);
        let blocks = (0..cfg.blocks)
            .map(|i| ShuffleBlock::new(tape, reg, rng, &format!("{name}.block{i}"), cfg))
            .collect();
        let proj_out = Conv2d::new(tape, reg, rng, &format!("{name}.proj_out"), rho, 2, 1, 1, true);
        ShuffleStage { proj_in, blocks, proj_out, dropout: Dropout::new(cfg.dropout) }
    }

    fn forward(&self, tape: &mut Tape, x: Var, phase: Phase, rng: &mut ChaCha12Rng) -> Var {
        let mut h = self.proj_in.forward(tape, x);
        for block in &self.blocks {
            h = block.forward(tape, h);
            h = self.dropout.forward(tape, h, phase, rng);
        }
        self.proj_out.forward(tape, h)
    }
}

struct AclStage {
    mlp: Mlp,
    combine: Combine,
}

impl AclStage {
    fn new(
        tape: &mut Tape,
        reg: &mut ParamRegistry,
        rng: &mut ChaCha12Rng,
        name: &str,
        width: usize,
        cfg: &AclConfig,
    ) -> Self {
        let mut dims = vec![width];
        dims.extend(std::iter::repeat(cfg.hidden_dim).take(cfg.hidden_layers));
        dims.push(width);
        let mlp = Mlp::new(tape, reg, rng, name, &dims, Activation::Relu, cfg.out_activation);
        if cfg.combine == Combine::Multiply {
            mlp.set_final_bias(tape, cfg.out_activation.near_identity_preimage());
        }
        AclStage { mlp, combine: cfg.combine }
    }

    /// Apply along the last axis of `x` and merge.
    fn forward_last(&self, tape: &mut Tape, x: Var) -> Var {
        let m = self.mlp.forward(tape, x);
        match self.combine {
            Combine::Add => tape.add(x, m),
            Combine::Multiply => tape.mul(x, m),
        }
    }

    /// Apply along the middle axis of a `(B, T, D)` tensor.
    fn forward_middle(&self, tape: &mut Tape, x: Var) -> Var {
        let xt = tape.permute(x, &[0, 2, 1]);
        let m = self.mlp.forward(tape, xt);
        let m = tape.permute(m, &[0, 2, 1]);
        match self.combine {
            Combine::Add => tape.add(x, m),
            Combine::Multiply => tape.mul(x, m),
        }
    }
}

// ---- the model ----

pub struct Csi4CastModel {
    pub config: Csi4CastConfig,
    dims: ModelDims,
    tape: Tape,
    reg: ParamRegistry,
    cnn: Vec<(Conv2d, BatchNorm2d)>,
    freq_acl_time: AclStage,
    freq_acl_sub: Option<AclStage>,
    delay_acl_time: AclStage,
    delay_acl_sub: Option<AclStage>,
    freq_mixer: ShuffleStage,
    delay_mixer: ShuffleStage,
    embed: Linear,
    pos: Arr,
    encoder: Vec<TransformerEncoderLayer>,
    head_token: Linear,
    head_time: Linear,
}

impl Csi4CastModel {
    pub fn new(dims: ModelDims, config: Csi4CastConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut tape = Tape::new();
        let mut reg = ParamRegistry::new();
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let (t, k) = (dims.hist_len, dims.n_sc);

        let chans = cnn_channels(config.cnn_depth);
        let n_convs = chans.len() - 1;
        let cnn = chans
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let conv = Conv2d::new(
                    &mut tape, &mut reg, &mut rng,
                    &format!("cnn.{i}.conv"),
                    w[0], w[1], config.cnn_kernel, 1, false,
                );
                let bn = if i + 1 == n_convs {
                    BatchNorm2d::new_zero_gamma(&mut tape, &mut reg, &format!("cnn.{i}.bn"), w[1])
                } else {
                    BatchNorm2d::new(&mut tape, &mut reg, &format!("cnn.{i}.bn"), w[1])
                };
                (conv, bn)
            })
            .collect();

        let fdd = config.duplex == Duplex::Fdd;
        let freq_acl_time =
            AclStage::new(&mut tape, &mut reg, &mut rng, "freq.acl_time", t, &config.acl_time);
        let freq_acl_sub = fdd.then(|| {
            AclStage::new(&mut tape, &mut reg, &mut rng, "freq.acl_sub", 2 * k, &config.acl_subcarrier)
        });
        let delay_acl_time =
            AclStage::new(&mut tape, &mut reg, &mut rng, "delay.acl_time", t, &config.acl_time);
        let delay_acl_sub = fdd.then(|| {
            AclStage::new(&mut tape, &mut reg, &mut rng, "delay.acl_sub", 2 * k, &config.acl_subcarrier)
        });
        let freq_mixer = ShuffleStage::new(&mut tape, &mut reg, &mut rng, "freq.mixer", &config.shuffle);
        let delay_mixer = ShuffleStage::new(&mut tape, &mut reg, &mut rng, "delay.mixer", &config.shuffle);

        let gamma = config.transformer.latent_dim;
        let embed = Linear::new(&mut tape, &mut reg, &mut rng, "embed", 2 * k, gamma, true);
        let pos = position_encoding(t, gamma);
        let encoder = (0..config.transformer.layers)
            .map(|i| {
                TransformerEncoderLayer::new(
                    &mut tape, &mut reg, &mut rng,
                    &format!("enc.{i}"),
                    gamma,
                    config.transformer.heads,
                    config.transformer.ffn_hidden,
                    config.transformer.dropout,
                )
            })
            .collect();
        let head_token = Linear::new(&mut tape, &mut reg, &mut rng, "head_token", gamma, 2 * k, true);
        let head_time = Linear::new(&mut tape, &mut reg, &mut rng, "head_time", t, dims.pred_len, true);

        Ok(Csi4CastModel {
            config,
            dims,
            tape,
            reg,
            cnn,
            freq_acl_time,
            freq_acl_sub,
            delay_acl_time,
            delay_acl_sub,
            freq_mixer,
            delay_mixer,
            embed,
            pos,
            encoder,
            head_token,
            head_time,
        })
    }

    /// `(B, 2, T, K)` planes to the `(B, T, 2K)` matrix view.
    fn planes_to_matrix(tape: &mut Tape, x: Var) -> Var {
        let shape = tape.value(x).shape().to_vec();
        let (b, t, k) = (shape[0], shape[2], shape[3]);
        let re = tape.slice_axis(x, 1, 0, 1);
        let re = tape.reshape(re, &[b, t, k]);
        let im = tape.slice_axis(x, 1, 1, 1);
        let im = tape.reshape(im, &[b, t, k]);
        tape.concat(re, im, 2)
    }

    /// Inverse view change of [`Self::planes_to_matrix`].
    fn matrix_to_planes(tape: &mut Tape, x: Var) -> Var {
        let shape = tape.value(x).shape().to_vec();
        let (b, t, kk) = (shape[0], shape[1], shape[2]);
        let k = kk / 2;
        let re = tape.slice_axis(x, 2, 0, k);
        let re = tape.reshape(re, &[b, 1, t, k]);
        let im = tape.slice_axis(x, 2, k, k);
        let im = tape.reshape(im, &[b, 1, t, k]);
        tape.concat(re, im, 1)
    }

    /// Complex multiply by the inverse Fourier matrix, on stacked parts.
    fn delay_view(tape: &mut Tape, x: Var, k: usize) -> Var {
        let (p, q) = idft_matrices(k);
        let p = tape.leaf(p);
        let q = tape.leaf(q);
        let re = tape.slice_axis(x, 2, 0, k);
        let im = tape.slice_axis(x, 2, k, k);
        let re_p = tape.matmul_last(re, p);
        let im_q = tape.matmul_last(im, q);
        let yre = tape.sub(re_p, im_q);
        let re_q = tape.matmul_last(re, q);
        let im_p = tape.matmul_last(im, p);
        let yim = tape.add(re_q, im_p);
        tape.concat(yre, yim, 2)
    }

    fn branch(
        tape: &mut Tape,
        x: Var,
        acl_time: &AclStage,
        acl_sub: &Option<AclStage>,
        mixer: &ShuffleStage,
        phase: Phase,
        rng: &mut ChaCha12Rng,
    ) -> Var {
        let mut h = acl_time.forward_middle(tape, x);
        if let Some(sub) = acl_sub {
            h = sub.forward_last(tape, h);
        }
        let h4 = Self::matrix_to_planes(tape, h);
        let mixed = mixer.forward(tape, h4, phase, rng);
        Self::planes_to_matrix(tape, mixed)
    }
}

impl TrainableModel for Csi4CastModel {
    fn tape(&self) -> &Tape {
        &self.tape
    }

    fn tape_mut(&mut self) -> &mut Tape {
        &mut self.tape
    }

    fn registry(&self) -> &ParamRegistry {
        &self.reg
    }

    fn dims(&self) -> ModelDims {
        self.dims
    }

    fn forward_planes(
        &mut self,
        history: ArrayView3<'_, Complex64>,
        phase: Phase,
        rng: &mut ChaCha12Rng,
    ) -> Var {
        let (b, t, k) = history.dim();
        assert_eq!(t, self.dims.hist_len, "history length");
        assert_eq!(k, self.dims.n_sc, "subcarrier count");
        let tape = &mut self.tape;

        let x = tape.leaf(real_stack(history));
        let mut h = x;
        let n_convs = self.cnn.len();
        for (i, (conv, bn)) in self.cnn.iter().enumerate() {
            h = conv.forward(tape, h);
            h = bn.forward(tape, h, phase);
            if i + 1 < n_convs {
                h = self.config.cnn_activation.apply(tape, h);
            }
        }
        let denoised = if self.config.cnn_residual { tape.add(x, h) } else { h };

        let f_mat = Self::planes_to_matrix(tape, denoised);
        let d_mat = Self::delay_view(tape, f_mat, k);

        let f_out = Self::branch(
            tape, f_mat, &self.freq_acl_time, &self.freq_acl_sub, &self.freq_mixer, phase, rng,
        );
        let d_out = Self::branch(
            tape, d_mat, &self.delay_acl_time, &self.delay_acl_sub, &self.delay_mixer, phase, rng,
        );
        let merged = tape.add(f_out, d_out);

        let tok = self.embed.forward(tape, merged);
        let gamma = self.config.transformer.latent_dim;
        let mut pos_b = Arr::zeros(IxDyn(&[b, t, gamma]));
        for i in 0..b {
            pos_b
                .index_axis_mut(ndarray::Axis(0), i)
                .assign(&self.pos);
        }
        let pos = tape.leaf(pos_b);
        let mut z = tape.add(tok, pos);
        for layer in &self.encoder {
            z = layer.forward(tape, z, phase, rng);
        }

        let per_token = self.head_token.forward(tape, z);
        let swapped = tape.permute(per_token, &[0, 2, 1]);
        let mapped = self.head_time.forward(tape, swapped);
        tape.permute(mapped, &[0, 2, 1])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::{Array4, Axis};

    fn complex_planes(b: usize, t: usize, k: usize, seed: u64) -> Array3<Complex64> {
        use rand::Rng;
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        Array3::from_shape_fn((b, t, k), |_| {
            Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))
        })
    }

    fn tiny_dims() -> ModelDims {
        ModelDims { hist_len: 4, pred_len: 2, n_sc: 8 }
    }

    fn tiny_config(duplex: Duplex) -> Csi4CastConfig {
        Csi4CastConfig {
            duplex,
            cnn_depth: 1,
            cnn_kernel: 3,
            acl_time: AclConfig { hidden_layers: 1, hidden_dim: 8, ..AclConfig::default() },
            acl_subcarrier: AclConfig { hidden_layers: 1, hidden_dim: 8, ..AclConfig::default() },
            shuffle: ShuffleConfig { feature_maps: 4, groups: 2, dw_kernel: 3, blocks: 1, dropout: 0.0 },
            transformer: TransformerConfig {
                latent_dim: 16,
                layers: 1,
                heads: 2,
                ffn_hidden: 32,
                dropout: 0.0,
            },
            ..Csi4CastConfig::default()
        }
    }

    #[test]
    fn plane_round_trips_preserve_data() {
        let data = Array4::from_shape_fn((3, 2, 4, 5), |(n, a, t, k)| {
            Complex64::new((n * 100 + a * 10 + t) as f64, k as f64)
        });
        let planes = to_planes(data.view());
        assert_eq!(planes.dim(), (6, 4, 5));
        let back = from_planes(planes.view(), 2);
        assert_eq!(back, data);

        let packed = pack_real_pairs(planes.view());
        let unpacked = unpack_complex(&packed);
        assert_eq!(unpacked, planes);
    }

    #[test]
    fn real_stack_separates_parts() {
        let planes = complex_planes(2, 3, 4, 0);
        let stacked = real_stack(planes.view());
        assert_eq!(stacked.shape(), &[2, 2, 3, 4]);
        assert_eq!(stacked[[1, 0, 2, 3]], planes[[1, 2, 3]].re);
        assert_eq!(stacked[[1, 1, 2, 3]], planes[[1, 2, 3]].im);
    }

    #[test]
    fn fourier_matrix_pair_inverts_with_conjugate() {
        let k = 8;
        let (p, q) = idft_matrices(k);
        // (P + iQ)(P - iQ)^T = I for this normalization.
        let p2 = p.view().into_dimensionality::<ndarray::Ix2>().unwrap();
        let q2 = q.view().into_dimensionality::<ndarray::Ix2>().unwrap();
        let re = p2.dot(&p2.t()) + q2.dot(&q2.t());
        let im = q2.dot(&p2.t()) - p2.dot(&q2.t());
        for a in 0..k {
            for b in 0..k {
                let expect = if a == b { 1.0 } else { 0.0 };
                assert_abs_diff_eq!(re[[a, b]], expect, epsilon = 1e-12);
                assert_abs_diff_eq!(im[[a, b]], 0.0, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn position_encoding_alternates_sin_cos() {
        let pe = position_encoding(16, 8);
        assert_eq!(pe.shape(), &[16, 8]);
        // Row 0: sin(0) = 0 on even columns, cos(0) = 1 on odd columns.
        for u in 0..8 {
            let expect = if u % 2 == 0 { 0.0 } else { 1.0 };
            assert_abs_diff_eq!(pe[[0, u]], expect, epsilon = 1e-12);
        }
        assert_abs_diff_eq!(pe[[3, 0]], (3.0f64).sin(), epsilon = 1e-12);
        assert_abs_diff_eq!(pe[[3, 1]], (3.0f64).cos(), epsilon = 1e-12);
        let scaled = 3.0 / 16.0f64.powf(2.0 / 8.0);
        assert_abs_diff_eq!(pe[[3, 2]], scaled.sin(), epsilon = 1e-12);
    }

    #[test]
    fn channel_schedule_doubles_then_halves() {
        assert_eq!(cnn_channels(1), vec![2, 2]);
        assert_eq!(cnn_channels(2), vec![2, 4, 2]);
        assert_eq!(cnn_channels(3), vec![2, 4, 8, 4, 2]);
    }

    #[test]
    fn forward_emits_prediction_shape() {
        let dims = tiny_dims();
        for duplex in [Duplex::Tdd, Duplex::Fdd] {
            let mut model = Csi4CastModel::new(dims, tiny_config(duplex), 3).unwrap();
            let history = complex_planes(3, dims.hist_len, dims.n_sc, 1);
            let mut rng = ChaCha12Rng::seed_from_u64(0);
            let out = model.forward_planes(history.view(), Phase::Eval, &mut rng);
            assert_eq!(
                model.tape().value(out).shape(),
                &[3, dims.pred_len, 2 * dims.n_sc]
            );
            assert!(model.tape().value(out).iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn cross_band_calibration_only_present_for_paired_bands() {
        let dims = tiny_dims();
        let tdd = Csi4CastModel::new(dims, tiny_config(Duplex::Tdd), 0).unwrap();
        let fdd = Csi4CastModel::new(dims, tiny_config(Duplex::Fdd), 0).unwrap();
        assert!(tdd.freq_acl_sub.is_none());
        assert!(fdd.freq_acl_sub.is_some());
        assert!(fdd.reg.n_trainable(fdd.tape()) > tdd.reg.n_trainable(tdd.tape()));
    }

    #[test]
    fn every_parameter_receives_gradient() {
        let dims = tiny_dims();
        let mut model = Csi4CastModel::new(dims, tiny_config(Duplex::Fdd), 7).unwrap();
        let history = complex_planes(2, dims.hist_len, dims.n_sc, 2);
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let out = model.forward_planes(history.view(), Phase::GradCheck, &mut rng);
        let sq = model.tape.mul(out, out);
        let loss = model.tape.sum_all(sq);
        let grads = model.tape.backward(loss);
        for entry in model.reg.entries() {
            if !entry.trainable {
                continue;
            }
            let g = grads[entry.var.index()].as_ref();
            assert!(g.is_some(), "no gradient for {}", entry.name);
            assert!(
                g.unwrap().iter().all(|v| v.is_finite()),
                "non-finite gradient for {}",
                entry.name
            );
        }
    }

    #[test]
    fn same_seed_same_output() {
        let dims = tiny_dims();
        let history = complex_planes(2, dims.hist_len, dims.n_sc, 5);
        let run = || {
            let mut model = Csi4CastModel::new(dims, tiny_config(Duplex::Tdd), 42).unwrap();
            predict_planes(&mut model, history.view())
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn config_validation_rejects_bad_divisibility() {
        let mut cfg = tiny_config(Duplex::Tdd);
        cfg.shuffle.feature_maps = 6;
        cfg.shuffle.groups = 4;
        assert!(matches!(
            Csi4CastModel::new(tiny_dims(), cfg, 0),
            Err(Error::InvalidConfig(_))
        ));

        let mut cfg = tiny_config(Duplex::Tdd);
        cfg.transformer.heads = 3;
        assert!(matches!(
            Csi4CastModel::new(tiny_dims(), cfg, 0),
            Err(Error::InvalidConfig(_))
        ));

        let mut cfg = tiny_config(Duplex::Tdd);
        cfg.cnn_kernel = 4;
        assert!(Csi4CastModel::new(tiny_dims(), cfg, 0).is_err());
    }

    #[test]
    fn channel_shuffle_interleaves_groups() {
        let mut tape = Tape::new();
        // 4 channels in 2 groups: [0 1 | 2 3] shuffles to [0 2 1 3].
        let x = Arr::from_shape_fn(IxDyn(&[1, 4, 1, 1]), |ix| ix[1] as f64);
        let xv = tape.leaf(x);
        let y = channel_shuffle(&mut tape, xv, 2);
        let got: Vec<f64> = tape.value(y).iter().cloned().collect();
        assert_eq!(got, vec![0.0, 2.0, 1.0, 3.0]);
    }

    #[test]
    fn eval_mode_ignores_dropout_randomness() {
        let dims = tiny_dims();
        let mut cfg = tiny_config(Duplex::Tdd);
        cfg.shuffle.dropout = 0.3;
        cfg.transformer.dropout = 0.3;
        let mut model = Csi4CastModel::new(dims, cfg, 11).unwrap();
        let history = complex_planes(2, dims.hist_len, dims.n_sc, 3);
        let a = predict_planes(&mut model, history.view());
        let b = predict_planes(&mut model, history.view());
        assert_eq!(a, b);
    }

    #[test]
    fn delay_view_round_trip_on_tape() {
        // Transforming and conjugate-transforming restores the matrix.
        let mut tape = Tape::new();
        let k = 8;
        let planes = complex_planes(1, 2, k, 9);
        let packed = pack_real_pairs(planes.view());
        let x = tape.leaf(packed.clone());
        let fwd = Csi4CastModel::delay_view(&mut tape, x, k);
        // Conjugate transform: negate imaginary part, transform, negate again.
        let neg = {
            let re = tape.slice_axis(fwd, 2, 0, k);
            let im = tape.slice_axis(fwd, 2, k, k);
            let nim = tape.scale(im, -1.0);
            tape.concat(re, nim, 2)
        };
        let back = Csi4CastModel::delay_view(&mut tape, neg, k);
        let out = {
            let re = tape.slice_axis(back, 2, 0, k);
            let im = tape.slice_axis(back, 2, k, k);
            let nim = tape.scale(im, -1.0);
            tape.concat(re, nim, 2)
        };
        let got = tape.value(out);
        for (g, w) in got.iter().zip(packed.iter()) {
            assert_abs_diff_eq!(g, w, epsilon = 1e-10);
        }
    }

    #[test]
    fn batch_rows_are_independent_in_eval() {
        // Prediction for a plane must not depend on its batch neighbors.
        let dims = tiny_dims();
        let mut model = Csi4CastModel::new(dims, tiny_config(Duplex::Tdd), 13).unwrap();
        let history = complex_planes(3, dims.hist_len, dims.n_sc, 4);
        let joint = predict_planes(&mut model, history.view());
        let single = predict_planes(
            &mut model,
            history.slice_axis(Axis(0), ndarray::Slice::from(1..2)),
        );
        for p in 0..dims.pred_len {
            for ki in 0..dims.n_sc {
                let d = (joint[[1, p, ki]] - single[[0, p, ki]]).norm();
                assert!(d < 1e-9, "batch leakage at ({p}, {ki}): {d}");
            }
        }
    }
}
