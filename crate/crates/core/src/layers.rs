//! Neural network layers built on the autodiff tape.
//!
//! Layers register their parameters with a [`ParamRegistry`] at
//! construction time; the registry fixes the parameter order used by
//! optimizers and checkpoints. Construction takes a seeded RNG, so a
//! model built twice from the same seed has identical weights.

use crate::autodiff::{Arr, Tape, Var};
use ndarray::IxDyn;
use rand::Rng;
use rand_chacha::ChaCha12Rng;
use std::fmt;
use std::str::FromStr;

/// Execution mode for a forward pass.
///
/// `GradCheck` uses batch statistics like `Train` but freezes running
/// buffers and disables dropout, so repeated passes over the same input
/// are bit-identical (required for finite-difference comparisons).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Train,
    Eval,
    GradCheck,
}

impl Phase {
    pub fn batch_stats(self) -> bool {
        matches!(self, Phase::Train | Phase::GradCheck)
    }

    pub fn update_buffers(self) -> bool {
        matches!(self, Phase::Train)
    }

    pub fn dropout_active(self) -> bool {
        matches!(self, Phase::Train)
    }
}

#[derive(Debug, Clone)]
pub struct ParamEntry {
    pub name: String,
    pub var: Var,
    pub trainable: bool,
}

/// Ordered record of every parameter and buffer a model owns.
#[derive(Debug, Default)]
pub struct ParamRegistry {
    entries: Vec<ParamEntry>,
}

impl ParamRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, tape: &mut Tape, name: impl Into<String>, value: Arr, trainable: bool) -> Var {
        let var = tape.persistent(value, trainable);
        self.entries.push(ParamEntry { name: name.into(), var, trainable });
        var
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn trainable_vars(&self) -> Vec<Var> {
        self.entries.iter().filter(|e| e.trainable).map(|e| e.var).collect()
    }

    /// Total number of trainable scalar parameters.
    pub fn n_trainable(&self, tape: &Tape) -> usize {
        self.entries
            .iter()
            .filter(|e| e.trainable)
            .map(|e| tape.value(e.var).len())
            .sum()
    }
}

/// Copy every registered tensor (buffers included) in registry order.
pub fn snapshot_params(tape: &Tape, reg: &ParamRegistry) -> Vec<Arr> {
    reg.entries().iter().map(|e| tape.value(e.var).clone()).collect()
}

/// Write back tensors captured by [`snapshot_params`].
pub fn restore_params(tape: &mut Tape, reg: &ParamRegistry, params: &[Arr]) {
    assert_eq!(params.len(), reg.entries().len(), "snapshot length");
    for (entry, value) in reg.entries().iter().zip(params) {
        tape.set_value(entry.var, value.clone());
    }
}

/// Uniform init on `(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
pub fn uniform_init(shape: &[usize], fan_in: usize, rng: &mut ChaCha12Rng) -> Arr {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    Arr::from_shape_fn(IxDyn(shape), |_| rng.gen_range(-bound..bound))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Tanh,
    Sigmoid,
    Gelu,
    None,
}

impl Activation {
    pub fn apply(self, tape: &mut Tape, x: Var) -> Var {
        match self {
            Activation::Relu => tape.relu(x),
            Activation::Tanh => tape.tanh(x),
            Activation::Sigmoid => tape.sigmoid(x),
            Activation::Gelu => tape.gelu(x),
            Activation::None => x,
        }
    }

    /// Preimage of 1 under the activation, or of 0.9 where 1 is outside
    /// the range. Used to bias multiplicative gates toward identity.
    pub fn near_identity_preimage(self) -> f64 {
        match self {
            Activation::Relu | Activation::None => 1.0,
            Activation::Sigmoid => 2.1972245773362196,
            Activation::Tanh => 1.4722194895832204,
            Activation::Gelu => 1.1446034954672773,
        }
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Activation::Relu => "relu",
            Activation::Tanh => "tanh",
            Activation::Sigmoid => "sigmoid",
            Activation::Gelu => "gelu",
            Activation::None => "none",
        };
        f.write_str(s)
    }
}

impl FromStr for Activation {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "relu" => Ok(Activation::Relu),
            "tanh" => Ok(Activation::Tanh),
            "sigmoid" => Ok(Activation::Sigmoid),
            "gelu" => Ok(Activation::Gelu),
            "none" => Ok(Activation::None),
            other => Err(crate::Error::InvalidConfig(format!("unknown activation '{other}'"))),
        }
    }
}

/// Affine map along the last axis.
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: Var,
    pub b: Option<Var>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(
        tape: &mut Tape,
        reg: &mut ParamRegistry,
        rng: &mut ChaCha12Rng,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
    ) -> Self {
        let w = reg.register(tape, format!("{name}.w"), uniform_init(&[in_dim, out_dim], in_dim, rng), true);
        let b = bias.then(|| reg.register(tape, format!("{name}.b"), Arr::zeros(IxDyn(&[out_dim])), true));
        Linear { w, b, in_dim, out_dim }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Var {
        let y = tape.matmul_last(x, self.w);
        match self.b {
            Some(b) => tape.add_bias_last(y, b),
            None => y,
        }
    }
}

/// Grouped 2-d convolution with square odd kernels and same padding.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub w: Var,
    pub b: Option<Var>,
    pub groups: usize,
}

impl Conv2d {
    pub fn new(
        tape: &mut Tape,
        reg: &mut ParamRegistry,
        rng: &mut ChaCha12Rng,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        groups: usize,
        bias: bool,
    ) -> Self {
        assert_eq!(kernel % 2, 1, "same padding needs an odd kernel");
        let fan_in = (in_ch / groups) * kernel * kernel;
        let w = reg.register(
            tape,
            format!("{name}.w"),
            uniform_init(&[out_ch, in_ch / groups, kernel, kernel], fan_in, rng),
            true,
        );
        let b = bias.then(|| reg.register(tape, format!("{name}.b"), Arr::zeros(IxDyn(&[out_ch])), true));
        Conv2d { w, b, groups }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Var {
        tape.conv2d(x, self.w, self.b, self.groups)
    }
}

/// Per-channel batch normalization with running statistics.
#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    pub gamma: Var,
    pub beta: Var,
    pub run_mean: Var,
    pub run_var: Var,
    pub momentum: f64,
    pub eps: f64,
    n_ch: usize,
}

impl BatchNorm2d {
    pub fn new(tape: &mut Tape, reg: &mut ParamRegistry, name: &str, n_ch: usize) -> Self {
        Self::with_gamma(tape, reg, name, n_ch, 1.0)
    }

    /// Scale initialized to zero, so the layer starts as a constant map.
    /// Used on the last normalization of a residual block to make the
    /// whole block start near identity.
    pub fn new_zero_gamma(tape: &mut Tape, reg: &mut ParamRegistry, name: &str, n_ch: usize) -> Self {
        Self::with_gamma(tape, reg, name, n_ch, 0.0)
    }

    fn with_gamma(tape: &mut Tape, reg: &mut ParamRegistry, name: &str, n_ch: usize, gamma0: f64) -> Self {
        let gamma = reg.register(tape, format!("{name}.gamma"), Arr::from_elem(IxDyn(&[n_ch]), gamma0), true);
        let beta = reg.register(tape, format!("{name}.beta"), Arr::zeros(IxDyn(&[n_ch])), true);
        let run_mean = reg.register(tape, format!("{name}.run_mean"), Arr::zeros(IxDyn(&[n_ch])), false);
        let run_var = reg.register(tape, format!("{name}.run_var"), Arr::ones(IxDyn(&[n_ch])), false);
        BatchNorm2d { gamma, beta, run_mean, run_var, momentum: 0.1, eps: 1e-5, n_ch }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var, phase: Phase) -> Var {
        if phase.batch_stats() {
            let m = (tape.value(x).len() / self.n_ch) as f64;
            let (y, mean, var) = tape.batch_norm2d(x, self.gamma, self.beta, self.eps);
            if phase.update_buffers() {
                let unbias = if m > 1.0 { m / (m - 1.0) } else { 1.0 };
                let mom = self.momentum;
                let new_mean = tape.value(self.run_mean) * (1.0 - mom) + &mean * mom;
                let new_var = tape.value(self.run_var) * (1.0 - mom) + &(var * unbias) * mom;
                tape.set_value(self.run_mean, new_mean);
                tape.set_value(self.run_var, new_var);
            }
            y
        } else {
            let mean = tape.value(self.run_mean).clone();
            let var = tape.value(self.run_var).clone();
            tape.batch_norm2d_frozen(x, self.gamma, self.beta, &mean, &var, self.eps)
        }
    }
}

/// Layer normalization over the last axis.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: Var,
    pub beta: Var,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(tape: &mut Tape, reg: &mut ParamRegistry, name: &str, dim: usize) -> Self {
        let gamma = reg.register(tape, format!("{name}.gamma"), Arr::ones(IxDyn(&[dim])), true);
        let beta = reg.register(tape, format!("{name}.beta"), Arr::zeros(IxDyn(&[dim])), true);
        LayerNorm { gamma, beta, eps: 1e-5 }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Var {
        tape.layer_norm(x, self.gamma, self.beta, self.eps)
    }
}

/// Inverted dropout; identity outside of training.
#[derive(Debug, Clone, Copy)]
pub struct Dropout {
    pub p: f64,
}

impl Dropout {
    pub fn new(p: f64) -> Self {
        assert!((0.0..1.0).contains(&p), "dropout probability in [0, 1)");
        Dropout { p }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var, phase: Phase, rng: &mut ChaCha12Rng) -> Var {
        if !phase.dropout_active() || self.p == 0.0 {
            return x;
        }
        let keep = 1.0 - self.p;
        let shape: Vec<usize> = tape.value(x).shape().to_vec();
        let mask = Arr::from_shape_fn(IxDyn(&shape), |_| {
            if rng.gen_range(0.0..1.0) < keep {
                1.0 / keep
            } else {
                0.0
            }
        });
        let mask = tape.leaf(mask);
        tape.mul(x, mask)
    }
}

/// Stack of affine layers with a shared hidden activation.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub hidden_act: Activation,
    pub out_act: Activation,
}

impl Mlp {
    /// `dims` lists every width including input and output, so a single
    /// affine map is `dims = [in, out]`.
    pub fn new(
        tape: &mut Tape,
        reg: &mut ParamRegistry,
        rng: &mut ChaCha12Rng,
        name: &str,
        dims: &[usize],
        hidden_act: Activation,
        out_act: Activation,
    ) -> Self {
        assert!(dims.len() >= 2, "need at least input and output widths");
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(tape, reg, rng, &format!("{name}.{i}"), w[0], w[1], true))
            .collect();
        Mlp { layers, hidden_act, out_act }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Var {
        let n = self.layers.len();
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(tape, h);
            h = if i + 1 < n {
                self.hidden_act.apply(tape, h)
            } else {
                self.out_act.apply(tape, h)
            };
        }
        h
    }

    /// Overwrite the final layer's bias with a constant.
    pub fn set_final_bias(&self, tape: &mut Tape, value: f64) {
        let last = self.layers.last().unwrap();
        let b = last.b.expect("final layer has a bias");
        let shape = tape.value(b).raw_dim();
        tape.set_value(b, Arr::from_elem(shape, value));
    }
}

/// Scaled dot-product self-attention with `n_heads` heads.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub n_heads: usize,
    pub d_model: usize,
}

impl MultiHeadAttention {
    pub fn new(
        tape: &mut Tape,
        reg: &mut ParamRegistry,
        rng: &mut ChaCha12Rng,
        name: &str,
        d_model: usize,
        n_heads: usize,
    ) -> Self {
        assert_eq!(d_model % n_heads, 0, "model width divisible by head count");
        let wq = Linear::new(tape, reg, rng, &format!("{name}.wq"), d_model, d_model, true);
        let wk = Linear::new(tape, reg, rng, &format!("{name}.wk"), d_model, d_model, true);
        let wv = Linear::new(tape, reg, rng, &format!("{name}.wv"), d_model, d_model, true);
        let wo = Linear::new(tape, reg, rng, &format!("{name}.wo"), d_model, d_model, true);
        MultiHeadAttention { wq, wk, wv, wo, n_heads, d_model }
    }

    fn split_heads(&self, tape: &mut Tape, x: Var, n: usize, t: usize) -> Var {
        let dh = self.d_model / self.n_heads;
        let x = tape.reshape(x, &[n, t, self.n_heads, dh]);
        let x = tape.permute(x, &[0, 2, 1, 3]);
        tape.reshape(x, &[n * self.n_heads, t, dh])
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        x: Var,
        dropout: Dropout,
        phase: Phase,
        rng: &mut ChaCha12Rng,
    ) -> Var {
        let shape = tape.value(x).shape().to_vec();
        assert_eq!(shape.len(), 3, "attention input is (batch, time, width)");
        let (n, t) = (shape[0], shape[1]);
        let dh = self.d_model / self.n_heads;

        let q = self.wq.forward(tape, x);
        let k = self.wk.forward(tape, x);
        let v = self.wv.forward(tape, x);
        let q = self.split_heads(tape, q, n, t);
        let k = self.split_heads(tape, k, n, t);
        let v = self.split_heads(tape, v, n, t);

        let scores = tape.batch_matmul(q, k, true);
        let scores = tape.scale(scores, 1.0 / (dh as f64).sqrt());
        let attn = tape.softmax_last(scores);
        let attn = dropout.forward(tape, attn, phase, rng);
        let ctx = tape.batch_matmul(attn, v, false);

        let ctx = tape.reshape(ctx, &[n, self.n_heads, t, dh]);
        let ctx = tape.permute(ctx, &[0, 2, 1, 3]);
        let ctx = tape.reshape(ctx, &[n, t, self.d_model]);
        self.wo.forward(tape, ctx)
    }
}

/// Post-norm transformer encoder layer with a relu feed-forward block.
#[derive(Debug, Clone)]
pub struct TransformerEncoderLayer {
    pub mha: MultiHeadAttention,
    pub ln_attn: LayerNorm,
    pub ff1: Linear,
    pub ff2: Linear,
    pub ln_ff: LayerNorm,
    pub dropout: Dropout,
}

impl TransformerEncoderLayer {
    pub fn new(
        tape: &mut Tape,
        reg: &mut ParamRegistry,
        rng: &mut ChaCha12Rng,
        name: &str,
        d_model: usize,
        n_heads: usize,
        ffn_hidden: usize,
        dropout: f64,
    ) -> Self {
        let mha = MultiHeadAttention::new(tape, reg, rng, &format!("{name}.mha"), d_model, n_heads);
        let ln_attn = LayerNorm::new(tape, reg, &format!("{name}.ln_attn"), d_model);
        let ff1 = Linear::new(tape, reg, rng, &format!("{name}.ff1"), d_model, ffn_hidden, true);
        let ff2 = Linear::new(tape, reg, rng, &format!("{name}.ff2"), ffn_hidden, d_model, true);
        let ln_ff = LayerNorm::new(tape, reg, &format!("{name}.ln_ff"), d_model);
        TransformerEncoderLayer { mha, ln_attn, ff1, ff2, ln_ff, dropout: Dropout::new(dropout) }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var, phase: Phase, rng: &mut ChaCha12Rng) -> Var {
        let a = self.mha.forward(tape, x, self.dropout, phase, rng);
        let a = self.dropout.forward(tape, a, phase, rng);
        let x = tape.add(x, a);
        let x = self.ln_attn.forward(tape, x);

        let f = self.ff1.forward(tape, x);
        let f = tape.relu(f);
        let f = self.ff2.forward(tape, f);
        let f = self.dropout.forward(tape, f, phase, rng);
        let x2 = tape.add(x, f);
        self.ln_ff.forward(tape, x2)
    }
}

/// Gated recurrent cell (reset/update/candidate convention).
#[derive(Debug, Clone)]
pub struct GruCell {
    pub w_ir: Var,
    pub w_iz: Var,
    pub w_in: Var,
    pub w_hr: Var,
    pub w_hz: Var,
    pub w_hn: Var,
    pub b_ir: Var,
    pub b_iz: Var,
    pub b_in: Var,
    pub b_hr: Var,
    pub b_hz: Var,
    pub b_hn: Var,
    pub hidden: usize,
}

impl GruCell {
    pub fn new(
        tape: &mut Tape,
        reg: &mut ParamRegistry,
        rng: &mut ChaCha12Rng,
        name: &str,
        input: usize,
        hidden: usize,
    ) -> Self {
        let wm = |reg: &mut ParamRegistry, tape: &mut Tape, rng: &mut ChaCha12Rng, suffix: &str, rows: usize| {
            reg.register(tape, format!("{name}.{suffix}"), uniform_init(&[rows, hidden], hidden, rng), true)
        };
        let w_ir = wm(reg, tape, rng, "w_ir", input);
        let w_iz = wm(reg, tape, rng, "w_iz", input);
        let w_in = wm(reg, tape, rng, "w_in", input);
        let w_hr = wm(reg, tape, rng, "w_hr", hidden);
        let w_hz = wm(reg, tape, rng, "w_hz", hidden);
        let w_hn = wm(reg, tape, rng, "w_hn", hidden);
        let bias = |reg: &mut ParamRegistry, tape: &mut Tape, suffix: &str| {
            reg.register(tape, format!("{name}.{suffix}"), Arr::zeros(IxDyn(&[hidden])), true)
        };
        let b_ir = bias(reg, tape, "b_ir");
        let b_iz = bias(reg, tape, "b_iz");
        let b_in = bias(reg, tape, "b_in");
        let b_hr = bias(reg, tape, "b_hr");
        let b_hz = bias(reg, tape, "b_hz");
        let b_hn = bias(reg, tape, "b_hn");
        GruCell { w_ir, w_iz, w_in, w_hr, w_hz, w_hn, b_ir, b_iz, b_in, b_hr, b_hz, b_hn, hidden }
    }

    /// One step: `x (N, D)`, `h (N, H)` -> next hidden `(N, H)`.
    pub fn step(&self, tape: &mut Tape, x: Var, h: Var) -> Var {
        let gate = |tape: &mut Tape, wi: Var, bi: Var, wh: Var, bh: Var| {
            let xi = tape.matmul_last(x, wi);
            let xi = tape.add_bias_last(xi, bi);
            let hh = tape.matmul_last(h, wh);
            let hh = tape.add_bias_last(hh, bh);
            tape.add(xi, hh)
        };
        let r = gate(tape, self.w_ir, self.b_ir, self.w_hr, self.b_hr);
        let r = tape.sigmoid(r);
        let z = gate(tape, self.w_iz, self.b_iz, self.w_hz, self.b_hz);
        let z = tape.sigmoid(z);

        let xn = tape.matmul_last(x, self.w_in);
        let xn = tape.add_bias_last(xn, self.b_in);
        let hn = tape.matmul_last(h, self.w_hn);
        let hn = tape.add_bias_last(hn, self.b_hn);
        let rhn = tape.mul(r, hn);
        let n = tape.add(xn, rhn);
        let n = tape.tanh(n);

        let one_minus_z = tape.affine(z, -1.0, 1.0);
        let a = tape.mul(one_minus_z, n);
        let b = tape.mul(z, h);
        tape.add(a, b)
    }

    /// Run over a `(N, T, D)` sequence from a zero initial state and
    /// return the final hidden state `(N, H)`.
    pub fn run(&self, tape: &mut Tape, x: Var) -> Var {
        let shape = tape.value(x).shape().to_vec();
        assert_eq!(shape.len(), 3, "sequence input is (batch, time, features)");
        let (n, t, d) = (shape[0], shape[1], shape[2]);
        let mut h = tape.leaf(Arr::zeros(IxDyn(&[n, self.hidden])));
        for step in 0..t {
            let xt = tape.slice_axis(x, 1, step, 1);
            let xt = tape.reshape(xt, &[n, d]);
            h = self.step(tape, xt, h);
        }
        h
    }
}
