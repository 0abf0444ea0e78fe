//! Reference predictors the main model is compared against.
//!
//! `NaivePredictor` repeats the most recent snapshot and needs no
//! training. The recurrent and convolutional predictors are small
//! learned models sharing the plane-batch interface of the main network.

use crate::autodiff::{Tape, Var};
use crate::layers::{Conv2d, GruCell, Linear, ParamRegistry, Phase};
use crate::model::{pack_real_pairs, real_stack, ModelDims, TrainableModel};
use crate::{Error, Result};
use ndarray::{Array3, ArrayView3, Axis};
use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

/// Persistence baseline: tomorrow looks like today.
#[derive(Debug, Clone, Copy)]
pub struct NaivePredictor {
    pub pred_len: usize,
}

impl NaivePredictor {
    pub fn new(pred_len: usize) -> Self {
        NaivePredictor { pred_len }
    }

    /// Repeat the last history snapshot for every prediction step.
    pub fn predict(&self, history: ArrayView3<'_, Complex64>) -> Result<Array3<Complex64>> {
        let (b, t, k) = history.dim();
        if t == 0 {
            return Err(Error::EmptyHistory);
        }
        let last = history.index_axis(Axis(1), t - 1);
        let mut out = Array3::zeros((b, self.pred_len, k));
        for p in 0..self.pred_len {
            out.index_axis_mut(Axis(1), p).assign(&last);
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RnnConfig {
    pub hidden: usize,
}

impl Default for RnnConfig {
    fn default() -> Self {
        RnnConfig { hidden: 64 }
    }
}

/// Gated recurrent baseline: per-step stacked real parts feed a GRU and
/// the final state maps linearly to all prediction steps.
pub struct RnnPredictor {
    pub config: RnnConfig,
    dims: ModelDims,
    tape: Tape,
    reg: ParamRegistry,
    cell: GruCell,
    head: Linear,
}

impl RnnPredictor {
    pub fn new(dims: ModelDims, config: RnnConfig, seed: u64) -> Result<Self> {
        if config.hidden == 0 {
            return Err(Error::InvalidConfig("rnn hidden width must be positive".into()));
        }
        let mut tape = Tape::new();
        let mut reg = ParamRegistry::new();
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let in_dim = 2 * dims.n_sc;
        let cell = GruCell::new(&mut tape, &mut reg, &mut rng, "gru", in_dim, config.hidden);
        let head = Linear::new(
            &mut tape, &mut reg, &mut rng,
            "head",
            config.hidden,
            dims.pred_len * 2 * dims.n_sc,
            true,
        );
        Ok(RnnPredictor { config, dims, tape, reg, cell, head })
    }
}

impl TrainableModel for RnnPredictor {
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
        _phase: Phase,
        _rng: &mut ChaCha12Rng,
    ) -> Var {
        let (b, t, k) = history.dim();
        assert_eq!(t, self.dims.hist_len);
        assert_eq!(k, self.dims.n_sc);
        let tape = &mut self.tape;
        let x = tape.leaf(pack_real_pairs(history));
        let h = self.cell.run(tape, x);
        let y = self.head.forward(tape, h);
        tape.reshape(y, &[b, self.dims.pred_len, 2 * k])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CnnConfig {
    pub features: usize,
    pub depth: usize,
    pub kernel: usize,
}

impl Default for CnnConfig {
    fn default() -> Self {
        CnnConfig { features: 16, depth: 3, kernel: 3 }
    }
}

/// Convolutional baseline: spatial convolutions over the (time,
/// subcarrier) grid, then a linear map from history to prediction steps.
pub struct CnnPredictor {
    pub config: CnnConfig,
    dims: ModelDims,
    tape: Tape,
    reg: ParamRegistry,
    convs: Vec<Conv2d>,
    proj: Conv2d,
    time_map: Linear,
}

impl CnnPredictor {
    pub fn new(dims: ModelDims, config: CnnConfig, seed: u64) -> Result<Self> {
        if config.features == 0 || config.depth == 0 {
            return Err(Error::InvalidConfig("cnn features and depth must be positive".into()));
        }
        if config.kernel % 2 == 0 {
            return Err(Error::InvalidConfig("cnn kernel must be odd".into()));
        }
        let mut tape = Tape::new();
        let mut reg = ParamRegistry::new();
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let f = config.features;
        let mut convs = Vec::with_capacity(config.depth);
        for i in 0..config.depth {
            let in_ch = if i == 0 { 2 } else { f };
            convs.push(Conv2d::new(
                &mut tape, &mut reg, &mut rng,
                &format!("conv{i}"),
                in_ch, f, config.kernel, 1, true,
            ));
        }
        let proj = Conv2d::new(&mut tape, &mut reg, &mut rng, "proj", f, 2, 1, 1, true);
        let time_map = Linear::new(
            &mut tape, &mut reg, &mut rng,
            "time_map",
            dims.hist_len,
            dims.pred_len,
            true,
        );
        Ok(CnnPredictor { config, dims, tape, reg, convs, proj, time_map })
    }
}

impl TrainableModel for CnnPredictor {
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
        _phase: Phase,
        _rng: &mut ChaCha12Rng,
    ) -> Var {
        let (b, t, k) = history.dim();
        assert_eq!(t, self.dims.hist_len);
        assert_eq!(k, self.dims.n_sc);
        let tape = &mut self.tape;
        let mut h = tape.leaf(real_stack(history));
        for conv in &self.convs {
            h = conv.forward(tape, h);
            h = tape.relu(h);
        }
        let h = self.proj.forward(tape, h);
        // (B, 2, T, K) -> (B, 2, K, T) -> map T to P -> (B, P, 2K).
        let swapped = tape.permute(h, &[0, 1, 3, 2]);
        let mapped = self.time_map.forward(tape, swapped);
        let back = tape.permute(mapped, &[0, 3, 1, 2]);
        tape.reshape(back, &[b, self.dims.pred_len, 2 * k])
    }
}
