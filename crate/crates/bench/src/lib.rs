//! Shared fixtures for the benchmark targets: the desk-scale system,
//! one synthesized dataset slice, and small ready-made predictors.

use csi4cast_core::baselines::{CnnConfig, CnnPredictor, RnnConfig, RnnPredictor};
use csi4cast_core::channel::make_dataset;
use csi4cast_core::model::{
    AclConfig, Csi4CastConfig, Csi4CastModel, ModelDims, ShuffleConfig, TransformerConfig,
};
use csi4cast_core::{
    ChannelProfile, CsiDataset, Duplex, NoiseType, ScenarioDescriptor, SnrMode, SystemConfig,
};
use ndarray::Array3;
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

pub fn desk_system() -> SystemConfig {
    SystemConfig::default()
}

pub fn desk_scenario() -> ScenarioDescriptor {
    ScenarioDescriptor {
        velocity_mps: 10.0,
        delay_spread_s: 100e-9,
        profile: ChannelProfile::NlosA,
        noise: NoiseType::None,
        noise_degree: 0.0,
        duplex: Duplex::Tdd,
    }
}

pub fn desk_dataset(samples: usize, seed: u64) -> CsiDataset {
    make_dataset(&desk_system(), &desk_scenario(), samples, seed, SnrMode::Fixed)
        .expect("desk-scale synthesis")
}

/// A random complex history block shaped like one desk-scale sample.
pub fn random_history(seed: u64) -> Array3<Complex64> {
    let system = desk_system();
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    Array3::from_shape_fn((system.n_tx, system.hist_len, system.n_sc), |_| {
        Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))
    })
}

pub fn small_forecaster() -> Csi4CastModel {
    let dims = ModelDims::from_config(&desk_system());
    let config = Csi4CastConfig {
        duplex: Duplex::Tdd,
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
    };
    Csi4CastModel::new(dims, config, 1).expect("forecaster construction")
}

pub fn small_rnn() -> RnnPredictor {
    let dims = ModelDims::from_config(&desk_system());
    RnnPredictor::new(dims, RnnConfig { hidden: 16 }, 1).expect("rnn construction")
}

pub fn small_cnn() -> CnnPredictor {
    let dims = ModelDims::from_config(&desk_system());
    CnnPredictor::new(dims, CnnConfig { features: 4, depth: 2, kernel: 3 }, 1)
        .expect("cnn construction")
}
