//! Flat dotted-key run configuration.
//!
//! A config file is a sequence of `key = value` lines with `#` comments.
//! Every key has a default; unknown and duplicate keys are rejected, so a
//! file round-trips exactly: parse, serialize, parse yields the same map.

use std::collections::BTreeMap;
use std::str::FromStr;

use csi4cast_core::model::{
    AclConfig, Combine, Csi4CastConfig, ShuffleConfig, TransformerConfig,
};
use csi4cast_core::baselines::{CnnConfig, RnnConfig};
use csi4cast_core::dataset_io::Dtype;
use csi4cast_core::layers::Activation;
use csi4cast_core::training::TrainConfig;
use csi4cast_core::{ChannelProfile, Duplex, Error, NoiseType, Result, SystemConfig};
use sha2::{Digest, Sha256};

/// Known keys with their defaults and a one-line description, in the
/// order they serialize.
pub const SCHEMA: &[(&str, &str, &str)] = &[
    ("system.n_tx", "4", "transmit antenna ports"),
    ("system.n_sc", "32", "subcarriers per link band"),
    ("system.n_guard", "8", "guard subcarriers between bands (FDD)"),
    ("system.hist_len", "16", "history snapshots per sample"),
    ("system.pred_len", "4", "future snapshots per sample"),
    ("system.carrier_freq_hz", "2.4e9", "carrier frequency in Hz"),
    ("system.sc_spacing_hz", "30e3", "subcarrier spacing in Hz"),
    ("system.report_interval_s", "2.5e-3", "time between CSI snapshots"),
    ("system.duplex", "tdd", "tdd or fdd"),
    ("data.preset", "none", "none, regular, robustness, or generalization"),
    ("data.mode", "test", "test fixes per-scenario noise, train draws AWGN SNR per sample"),
    ("data.samples", "16", "samples generated per scenario cell"),
    ("data.dtype", "c64", "on-disk element type: c64 or c128"),
    ("data.velocities_mps", "1,10,30", "velocity grid in m/s"),
    ("data.delay_spreads_ns", "30,100,300", "delay-spread grid in ns"),
    ("data.profiles", "nlos-a,nlos-c,los-d", "multipath profile grid"),
    ("data.awgn_snrs_db", "0,5,10,15,20,25", "AWGN SNR grid in dB, empty for none"),
    ("data.phase_snrs_db", "", "phase-noise SNR grid in dB, empty for none"),
    ("data.burst_snrs_db", "", "burst-noise SNR grid in dB, empty for none"),
    ("data.drop_rates", "", "packet-drop probability grid, empty for none"),
    ("data.clean", "false", "include an uncorrupted cell per grid point"),
    ("data.train_snr_lo_db", "0", "lower AWGN SNR bound in train mode"),
    ("data.train_snr_hi_db", "25", "upper AWGN SNR bound in train mode"),
    ("model.kind", "csi4cast", "csi4cast, rnn, or cnn"),
    ("csi4cast.cnn_depth", "2", "front-end conv layers"),
    ("csi4cast.cnn_kernel", "3", "front-end conv kernel, odd"),
    ("csi4cast.cnn_residual", "true", "skip connection around the front-end"),
    ("csi4cast.cnn_activation", "relu", "front-end activation"),
    ("csi4cast.acl_time_hidden_layers", "1", "time-calibration hidden layers"),
    ("csi4cast.acl_time_hidden_dim", "32", "time-calibration hidden width"),
    ("csi4cast.acl_time_activation", "sigmoid", "time-calibration output activation"),
    ("csi4cast.acl_time_combine", "multiply", "add or multiply"),
    ("csi4cast.acl_sub_hidden_layers", "1", "subcarrier-calibration hidden layers (FDD)"),
    ("csi4cast.acl_sub_hidden_dim", "32", "subcarrier-calibration hidden width"),
    ("csi4cast.acl_sub_activation", "sigmoid", "subcarrier-calibration output activation"),
    ("csi4cast.acl_sub_combine", "multiply", "add or multiply"),
    ("csi4cast.shuffle_features", "8", "mixer feature maps, multiple of 4 and of groups"),
    ("csi4cast.shuffle_groups", "2", "mixer convolution groups"),
    ("csi4cast.shuffle_dw_kernel", "3", "mixer depthwise kernel, odd"),
    ("csi4cast.shuffle_blocks", "1", "mixer block count"),
    ("csi4cast.shuffle_dropout", "0.05", "mixer dropout"),
    ("csi4cast.latent_dim", "64", "encoder latent width, multiple of heads"),
    ("csi4cast.layers", "2", "encoder layers"),
    ("csi4cast.heads", "4", "attention heads"),
    ("csi4cast.ffn_hidden", "128", "encoder feed-forward width"),
    ("csi4cast.dropout", "0.05", "encoder dropout"),
    ("rnn.hidden", "64", "recurrent baseline hidden width"),
    ("cnn.features", "16", "convolutional baseline feature maps"),
    ("cnn.depth", "3", "convolutional baseline depth"),
    ("cnn.kernel", "3", "convolutional baseline kernel, odd"),
    ("train.epochs", "50", "maximum training epochs"),
    ("train.batch_size", "32", "samples per micro-batch"),
    ("train.grad_accum", "1", "micro-batches per optimizer step"),
    ("train.lr", "1e-3", "initial learning rate"),
    ("train.weight_decay", "0", "L2 penalty"),
    ("train.decoupled_decay", "false", "apply decay outside the Adam moments"),
    ("train.beta1", "0.9", "Adam first-moment decay"),
    ("train.beta2", "0.999", "Adam second-moment decay"),
    ("train.plateau_factor", "0.5", "LR multiplier on validation plateau"),
    ("train.plateau_patience", "3", "epochs without improvement before decay"),
    ("train.plateau_threshold", "1e-4", "relative improvement that resets patience"),
    ("train.min_lr", "1e-6", "learning-rate floor"),
    ("train.early_stop_patience", "8", "epochs without improvement before stopping"),
    ("eval.snr_db", "10", "SNR assumed when converting CSI to spectral efficiency"),
    ("eval.timing_reps", "5", "timed forward passes per model"),
    ("report.acf_max_lag", "12", "largest time lag in autocorrelation outputs"),
    ("report.interp_max_velocity_mps", "30", "velocities above this count as extrapolation"),
];

/// Parsed run configuration; always holds a value for every schema key.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunConfig {
    values: BTreeMap<&'static str, String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let values = SCHEMA.iter().map(|(k, d, _)| (*k, d.to_string())).collect();
        RunConfig { values }
    }
}

fn schema_key(key: &str) -> Option<&'static str> {
    SCHEMA.iter().map(|(k, _, _)| *k).find(|k| *k == key)
}

impl RunConfig {
    /// Parse `key = value` lines; `#` starts a comment, blank lines are
    /// skipped. Unknown or repeated keys are rejected.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut seen = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = match raw.find('#') {
                Some(pos) => &raw[..pos],
                None => raw,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::InvalidConfig(format!("line {}: expected 'key = value'", lineno + 1))
            })?;
            let key = key.trim();
            let value = value.trim();
            let known = schema_key(key)
                .ok_or_else(|| Error::InvalidConfig(format!("unknown key '{key}'")))?;
            if seen.contains(&known) {
                return Err(Error::InvalidConfig(format!("key '{key}' set twice")));
            }
            seen.push(known);
            cfg.values.insert(known, value.to_string());
        }
        Ok(cfg)
    }

    /// Every key in schema order, one `key = value` line each.
    pub fn serialize(&self) -> String {
        let mut out = String::new();
        for (key, _, _) in SCHEMA {
            out.push_str(key);
            out.push_str(" = ");
            out.push_str(&self.values[key]);
            out.push('\n');
        }
        out
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let known = schema_key(key)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown key '{key}'")))?;
        self.values.insert(known, value.to_string());
        Ok(())
    }

    pub fn get(&self, key: &str) -> &str {
        &self.values[schema_key(key).expect("key is in the schema")]
    }

    /// Hex SHA-256 of the serialized text; stamps outputs so a metric
    /// file can be traced back to the exact configuration.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.serialize().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    fn typed<T: FromStr>(&self, key: &str, what: &str) -> Result<T> {
        self.get(key)
            .parse()
            .map_err(|_| Error::InvalidConfig(format!("{key}: expected {what}, got '{}'", self.get(key))))
    }

    pub fn usize_of(&self, key: &str) -> Result<usize> {
        self.typed(key, "a non-negative integer")
    }

    pub fn u64_of(&self, key: &str) -> Result<u64> {
        self.typed(key, "a non-negative integer")
    }

    pub fn f64_of(&self, key: &str) -> Result<f64> {
        self.typed(key, "a number")
    }

    pub fn bool_of(&self, key: &str) -> Result<bool> {
        match self.get(key) {
            "true" => Ok(true),
            "false" => Ok(false),
            other => Err(Error::InvalidConfig(format!("{key}: expected true or false, got '{other}'"))),
        }
    }

    /// Comma-separated list; the empty string is an empty list.
    pub fn f64_list(&self, key: &str) -> Result<Vec<f64>> {
        let raw = self.get(key).trim();
        if raw.is_empty() {
            return Ok(Vec::new());
        }
        raw.split(',')
            .map(|item| {
                item.trim().parse().map_err(|_| {
                    Error::InvalidConfig(format!("{key}: '{}' is not a number", item.trim()))
                })
            })
            .collect()
    }

    pub fn profile_list(&self, key: &str) -> Result<Vec<ChannelProfile>> {
        let raw = self.get(key).trim();
        if raw.is_empty() {
            return Ok(Vec::new());
        }
        raw.split(',').map(|item| item.trim().parse()).collect()
    }

    pub fn system(&self) -> Result<SystemConfig> {
        let config = SystemConfig {
            n_tx: self.usize_of("system.n_tx")?,
            n_rx: 1,
            n_sc: self.usize_of("system.n_sc")?,
            n_guard: self.usize_of("system.n_guard")?,
            hist_len: self.usize_of("system.hist_len")?,
            pred_len: self.usize_of("system.pred_len")?,
            carrier_freq_hz: self.f64_of("system.carrier_freq_hz")?,
            sc_spacing_hz: self.f64_of("system.sc_spacing_hz")?,
            report_interval_s: self.f64_of("system.report_interval_s")?,
            duplex: self.typed::<Duplex>("system.duplex", "tdd or fdd")?,
        };
        config.validate()?;
        Ok(config)
    }

    pub fn dtype(&self) -> Result<Dtype> {
        match self.get("data.dtype") {
            "c64" => Ok(Dtype::Complex64),
            "c128" => Ok(Dtype::Complex128),
            other => Err(Error::InvalidConfig(format!("data.dtype: expected c64 or c128, got '{other}'"))),
        }
    }

    pub fn csi4cast(&self) -> Result<Csi4CastConfig> {
        let acl = |prefix: &str| -> Result<AclConfig> {
            Ok(AclConfig {
                hidden_layers: self.usize_of(&format!("{prefix}_hidden_layers"))?,
                hidden_dim: self.usize_of(&format!("{prefix}_hidden_dim"))?,
                out_activation: self.typed::<Activation>(
                    &format!("{prefix}_activation"),
                    "an activation name",
                )?,
                combine: self.typed::<Combine>(&format!("{prefix}_combine"), "add or multiply")?,
            })
        };
        let config = Csi4CastConfig {
            duplex: self.typed::<Duplex>("system.duplex", "tdd or fdd")?,
            cnn_depth: self.usize_of("csi4cast.cnn_depth")?,
            cnn_kernel: self.usize_of("csi4cast.cnn_kernel")?,
            cnn_residual: self.bool_of("csi4cast.cnn_residual")?,
            cnn_activation: self.typed::<Activation>("csi4cast.cnn_activation", "an activation name")?,
            acl_time: acl("csi4cast.acl_time")?,
            acl_subcarrier: acl("csi4cast.acl_sub")?,
            shuffle: ShuffleConfig {
                feature_maps: self.usize_of("csi4cast.shuffle_features")?,
                groups: self.usize_of("csi4cast.shuffle_groups")?,
                dw_kernel: self.usize_of("csi4cast.shuffle_dw_kernel")?,
                blocks: self.usize_of("csi4cast.shuffle_blocks")?,
                dropout: self.f64_of("csi4cast.shuffle_dropout")?,
            },
            transformer: TransformerConfig {
                latent_dim: self.usize_of("csi4cast.latent_dim")?,
                layers: self.usize_of("csi4cast.layers")?,
                heads: self.usize_of("csi4cast.heads")?,
                ffn_hidden: self.usize_of("csi4cast.ffn_hidden")?,
                dropout: self.f64_of("csi4cast.dropout")?,
            },
        };
        config.validate()?;
        Ok(config)
    }

    pub fn rnn(&self) -> Result<RnnConfig> {
        Ok(RnnConfig { hidden: self.usize_of("rnn.hidden")? })
    }

    pub fn cnn(&self) -> Result<CnnConfig> {
        Ok(CnnConfig {
            features: self.usize_of("cnn.features")?,
            depth: self.usize_of("cnn.depth")?,
            kernel: self.usize_of("cnn.kernel")?,
        })
    }

    pub fn train(&self, seed: u64) -> Result<TrainConfig> {
        let cfg = TrainConfig {
            epochs: self.usize_of("train.epochs")?,
            batch_size: self.usize_of("train.batch_size")?,
            grad_accum: self.usize_of("train.grad_accum")?,
            lr: self.f64_of("train.lr")?,
            weight_decay: self.f64_of("train.weight_decay")?,
            decoupled_decay: self.bool_of("train.decoupled_decay")?,
            beta1: self.f64_of("train.beta1")?,
            beta2: self.f64_of("train.beta2")?,
            plateau_factor: self.f64_of("train.plateau_factor")?,
            plateau_patience: self.usize_of("train.plateau_patience")?,
            plateau_threshold: self.f64_of("train.plateau_threshold")?,
            min_lr: self.f64_of("train.min_lr")?,
            early_stop_patience: self.usize_of("train.early_stop_patience")?,
            seed,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Noise settings enumerated for grid expansion.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoisePoint {
    pub noise: NoiseType,
    pub degree: f64,
}
