//! Shared configuration, scenario, and CSI container types.
//!
//! A CSI tensor is complex-valued with axes (antenna, time, subcarrier).
//! The receive dimension is fixed at one stream and squeezed out of every
//! tensor, so it appears only as the `n_rx` config field.

use crate::error::{Error, Result};
use ndarray::{ArrayView, Array3, Dimension};
use num_complex::Complex64;
use std::fmt;
use std::str::FromStr;

/// Link direction arrangement: TDD predicts within one band, FDD predicts
/// the downlink band from uplink history.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Duplex {
    Tdd,
    Fdd,
}

impl Duplex {
    pub fn code(self) -> u8 {
        match self {
            Duplex::Tdd => 0,
            Duplex::Fdd => 1,
        }
    }

    pub fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(Duplex::Tdd),
            1 => Ok(Duplex::Fdd),
            other => Err(Error::InvalidEncoding(format!("duplex code {other}"))),
        }
    }
}

impl fmt::Display for Duplex {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Duplex::Tdd => "tdd",
            Duplex::Fdd => "fdd",
        })
    }
}

impl FromStr for Duplex {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tdd" => Ok(Duplex::Tdd),
            "fdd" => Ok(Duplex::Fdd),
            other => Err(Error::InvalidConfig(format!("unknown duplex {other:?}"))),
        }
    }
}

/// Multipath profile family. NLOS profiles differ in scatterer count and
/// angular seed; LOS profiles add a deterministic direct path whose power
/// fraction follows the profile's K-factor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ChannelProfile {
    NlosA,
    NlosB,
    NlosC,
    LosD,
    LosE,
}

impl ChannelProfile {
    pub const ALL: [ChannelProfile; 5] = [
        ChannelProfile::NlosA,
        ChannelProfile::NlosB,
        ChannelProfile::NlosC,
        ChannelProfile::LosD,
        ChannelProfile::LosE,
    ];

    /// Number of scattered paths drawn for this profile.
    pub fn path_count(self) -> usize {
        match self {
            ChannelProfile::NlosA => 12,
            ChannelProfile::NlosB => 16,
            ChannelProfile::NlosC => 12,
            ChannelProfile::LosD => 12,
            ChannelProfile::LosE => 12,
        }
    }

    /// Ricean K-factor of the direct path, if the profile has one.
    pub fn k_factor_db(self) -> Option<f64> {
        match self {
            ChannelProfile::LosD => Some(10.0),
            ChannelProfile::LosE => Some(13.0),
            _ => None,
        }
    }

    pub fn is_los(self) -> bool {
        self.k_factor_db().is_some()
    }

    pub fn code(self) -> u8 {
        match self {
            ChannelProfile::NlosA => 0,
            ChannelProfile::NlosB => 1,
            ChannelProfile::NlosC => 2,
            ChannelProfile::LosD => 3,
            ChannelProfile::LosE => 4,
        }
    }

    pub fn from_code(code: u8) -> Result<Self> {
        ChannelProfile::ALL
            .get(code as usize)
            .copied()
            .ok_or_else(|| Error::InvalidEncoding(format!("channel profile code {code}")))
    }
}

impl fmt::Display for ChannelProfile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ChannelProfile::NlosA => "nlos-a",
            ChannelProfile::NlosB => "nlos-b",
            ChannelProfile::NlosC => "nlos-c",
            ChannelProfile::LosD => "los-d",
            ChannelProfile::LosE => "los-e",
        })
    }
}

impl FromStr for ChannelProfile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "nlos-a" => Ok(ChannelProfile::NlosA),
            "nlos-b" => Ok(ChannelProfile::NlosB),
            "nlos-c" => Ok(ChannelProfile::NlosC),
            "los-d" => Ok(ChannelProfile::LosD),
            "los-e" => Ok(ChannelProfile::LosE),
            other => Err(Error::InvalidConfig(format!("unknown channel profile {other:?}"))),
        }
    }
}

/// Corruption applied to the history half of each sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum NoiseType {
    None,
    Awgn,
    Phase,
    Burst,
    PacketDrop,
}

impl NoiseType {
    /// Whether `noise_degree` is a target SNR in dB (as opposed to a
    /// probability for packet drop, or unused for clean data).
    pub fn degree_is_snr(self) -> bool {
        matches!(self, NoiseType::Awgn | NoiseType::Phase | NoiseType::Burst)
    }

    pub fn code(self) -> u8 {
        match self {
            NoiseType::None => 0,
            NoiseType::Awgn => 1,
            NoiseType::Phase => 2,
            NoiseType::Burst => 3,
            NoiseType::PacketDrop => 4,
        }
    }

    pub fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(NoiseType::None),
            1 => Ok(NoiseType::Awgn),
            2 => Ok(NoiseType::Phase),
            3 => Ok(NoiseType::Burst),
            4 => Ok(NoiseType::PacketDrop),
            other => Err(Error::InvalidEncoding(format!("noise type code {other}"))),
        }
    }
}

impl fmt::Display for NoiseType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            NoiseType::None => "none",
            NoiseType::Awgn => "awgn",
            NoiseType::Phase => "phase",
            NoiseType::Burst => "burst",
            NoiseType::PacketDrop => "packet-drop",
        })
    }
}

impl FromStr for NoiseType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(NoiseType::None),
            "awgn" => Ok(NoiseType::Awgn),
            "phase" => Ok(NoiseType::Phase),
            "burst" => Ok(NoiseType::Burst),
            "packet-drop" => Ok(NoiseType::PacketDrop),
            other => Err(Error::InvalidConfig(format!("unknown noise type {other:?}"))),
        }
    }
}

/// Dimensions and radio constants shared by the simulator, the models,
/// and the file formats.
#[derive(Debug, Clone, PartialEq)]
pub struct SystemConfig {
    /// Transmit antenna ports (UPA elements, dual-polarized when even).
    pub n_tx: usize,
    /// Receive streams; fixed at 1 and squeezed out of all tensors.
    pub n_rx: usize,
    /// Subcarriers per link band.
    pub n_sc: usize,
    /// Guard subcarriers between uplink and downlink bands (FDD only).
    pub n_guard: usize,
    /// History snapshots fed to a predictor.
    pub hist_len: usize,
    /// Future snapshots a predictor must produce.
    pub pred_len: usize,
    pub carrier_freq_hz: f64,
    pub sc_spacing_hz: f64,
    /// Time between consecutive CSI snapshots, in seconds.
    pub report_interval_s: f64,
    pub duplex: Duplex,
}

impl Default for SystemConfig {
    /// Desk-scale dimensions small enough to train on a laptop CPU.
    fn default() -> Self {
        SystemConfig {
            n_tx: 4,
            n_rx: 1,
            n_sc: 32,
            n_guard: 8,
            hist_len: 16,
            pred_len: 4,
            carrier_freq_hz: 2.4e9,
            sc_spacing_hz: 30e3,
            report_interval_s: 2.5e-3,
            duplex: Duplex::Tdd,
        }
    }
}

impl SystemConfig {
    /// Full-size dimensions matching a 32-port, 300-subcarrier deployment.
    pub fn paper_scale() -> Self {
        SystemConfig {
            n_tx: 32,
            n_sc: 300,
            n_guard: 150,
            ..SystemConfig::default()
        }
    }

    /// Subcarriers the simulator must synthesize to cover all bands.
    pub fn total_subcarriers(&self) -> usize {
        match self.duplex {
            Duplex::Tdd => self.n_sc,
            Duplex::Fdd => 2 * self.n_sc + self.n_guard,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_tx == 0 {
            return Err(Error::InvalidConfig("n_tx must be at least 1".into()));
        }
        if self.n_rx != 1 {
            return Err(Error::InvalidConfig(format!(
                "n_rx must be 1 (single squeezed receive stream), got {}",
                self.n_rx
            )));
        }
        if self.n_sc == 0 {
            return Err(Error::InvalidConfig("n_sc must be at least 1".into()));
        }
        if self.hist_len == 0 || self.pred_len == 0 {
            return Err(Error::InvalidConfig(
                "hist_len and pred_len must be at least 1".into(),
            ));
        }
        for (name, v) in [
            ("carrier_freq_hz", self.carrier_freq_hz),
            ("sc_spacing_hz", self.sc_spacing_hz),
            ("report_interval_s", self.report_interval_s),
        ] {
            if !v.is_finite() || v <= 0.0 {
                return Err(Error::InvalidConfig(format!("{name} must be positive, got {v}")));
            }
        }
        Ok(())
    }
}

/// One cell of the evaluation grid: mobility, delay spread, multipath
/// profile, and the corruption applied to the history.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioDescriptor {
    pub velocity_mps: f64,
    pub delay_spread_s: f64,
    pub profile: ChannelProfile,
    pub noise: NoiseType,
    /// Target SNR in dB for AWGN/phase/burst noise, drop probability for
    /// packet drop, ignored for clean data.
    pub noise_degree: f64,
    pub duplex: Duplex,
}

impl ScenarioDescriptor {
    pub fn validate(&self) -> Result<()> {
        if !self.velocity_mps.is_finite() || self.velocity_mps < 0.0 {
            return Err(Error::InvalidScenario(format!(
                "velocity must be finite and non-negative, got {}",
                self.velocity_mps
            )));
        }
        if !self.delay_spread_s.is_finite() || self.delay_spread_s <= 0.0 {
            return Err(Error::InvalidScenario(format!(
                "delay spread must be positive, got {}",
                self.delay_spread_s
            )));
        }
        match self.noise {
            NoiseType::None => {}
            NoiseType::Awgn | NoiseType::Phase | NoiseType::Burst => {
                if !self.noise_degree.is_finite() {
                    return Err(Error::InvalidScenario(format!(
                        "SNR degree must be finite, got {}",
                        self.noise_degree
                    )));
                }
            }
            NoiseType::PacketDrop => {
                if !(0.0..=1.0).contains(&self.noise_degree) {
                    return Err(Error::InvalidScenario(format!(
                        "drop probability must lie in [0, 1], got {}",
                        self.noise_degree
                    )));
                }
            }
        }
        Ok(())
    }
}

/// A run of equally spaced CSI snapshots for one link band.
///
/// `data` has axes (antenna, time, subcarrier); timestamps are implied by
/// `start_time_s + i * dt_s` and are strictly increasing because `dt_s`
/// must be positive.
#[derive(Debug, Clone, PartialEq)]
pub struct CsiSequence {
    pub data: Array3<Complex64>,
    pub start_time_s: f64,
    pub dt_s: f64,
}

impl CsiSequence {
    pub fn new(data: Array3<Complex64>, start_time_s: f64, dt_s: f64) -> Result<Self> {
        if !dt_s.is_finite() || dt_s <= 0.0 {
            return Err(Error::InvalidConfig(format!("dt must be positive, got {dt_s}")));
        }
        if !start_time_s.is_finite() {
            return Err(Error::NonFiniteValue("sequence start time"));
        }
        let seq = CsiSequence { data, start_time_s, dt_s };
        seq.assert_finite()?;
        Ok(seq)
    }

    pub fn n_ant(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn len(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn n_sc(&self) -> usize {
        self.data.shape()[2]
    }

    pub fn timestamps(&self) -> Vec<f64> {
        (0..self.len())
            .map(|i| self.start_time_s + i as f64 * self.dt_s)
            .collect()
    }

    /// Timestamp one step past the last snapshot.
    pub fn end_time_s(&self) -> f64 {
        self.start_time_s + self.len() as f64 * self.dt_s
    }

    pub fn assert_finite(&self) -> Result<()> {
        if self.data.iter().all(|c| c.re.is_finite() && c.im.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFiniteValue("CSI tensor"))
        }
    }

    pub fn frobenius_norm_sq(&self) -> f64 {
        frobenius_norm_sq(self.data.view())
    }
}

/// Sum of squared magnitudes over every element.
pub fn frobenius_norm_sq<D: Dimension>(x: ArrayView<'_, Complex64, D>) -> f64 {
    x.iter().map(|c| c.norm_sqr()).sum()
}

/// One supervised example: a (possibly corrupted) history and the clean
/// future it should predict, plus the scenario and seed that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct CsiSample {
    pub history: CsiSequence,
    pub target: CsiSequence,
    pub scenario: ScenarioDescriptor,
    pub seed: u64,
}

/// How per-sample SNR degrees were assigned when the dataset was built.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SnrMode {
    /// Every sample uses the scenario's `noise_degree`.
    Fixed,
    /// Training mode: each sample drew its SNR uniformly from this range.
    UniformRange { lo_db: f64, hi_db: f64 },
}

/// A homogeneous collection of samples from one scenario cell.
#[derive(Debug, Clone, PartialEq)]
pub struct CsiDataset {
    pub config: SystemConfig,
    pub scenario: ScenarioDescriptor,
    pub snr_mode: SnrMode,
    pub samples: Vec<CsiSample>,
}

impl CsiDataset {
    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        self.scenario.validate()?;
        if let SnrMode::UniformRange { lo_db, hi_db } = self.snr_mode {
            if !lo_db.is_finite() || !hi_db.is_finite() || lo_db > hi_db {
                return Err(Error::InvalidConfig(format!(
                    "SNR range [{lo_db}, {hi_db}] is not an ordered finite interval"
                )));
            }
        }
        for sample in &self.samples {
            validate_shapes(sample, &self.config)?;
        }
        Ok(())
    }
}

/// Check one sample against the config: tensor shapes, matching snapshot
/// spacing, history running directly into the target, finite values, and
/// a scenario consistent with the configured duplex mode.
pub fn validate_shapes(sample: &CsiSample, config: &SystemConfig) -> Result<()> {
    let expect_hist = [config.n_tx, config.hist_len, config.n_sc];
    let expect_pred = [config.n_tx, config.pred_len, config.n_sc];
    if sample.history.data.shape() != expect_hist {
        return Err(Error::dim(
            "history tensor",
            format!("{expect_hist:?}"),
            format!("{:?}", sample.history.data.shape()),
        ));
    }
    if sample.target.data.shape() != expect_pred {
        return Err(Error::dim(
            "target tensor",
            format!("{expect_pred:?}"),
            format!("{:?}", sample.target.data.shape()),
        ));
    }
    let dt = config.report_interval_s;
    if sample.history.dt_s != dt || sample.target.dt_s != dt {
        return Err(Error::dim(
            "snapshot spacing",
            format!("{dt}"),
            format!("{} / {}", sample.history.dt_s, sample.target.dt_s),
        ));
    }
    let expected_start = sample.history.end_time_s();
    if (sample.target.start_time_s - expected_start).abs() > 1e-9 * dt {
        return Err(Error::dim(
            "target start time",
            format!("{expected_start}"),
            format!("{}", sample.target.start_time_s),
        ));
    }
    sample.history.assert_finite()?;
    sample.target.assert_finite()?;
    if sample.scenario.duplex != config.duplex {
        return Err(Error::InvalidScenario(format!(
            "scenario duplex {} does not match config duplex {}",
            sample.scenario.duplex, config.duplex
        )));
    }
    sample.scenario.validate()
}
