//! Tapped-delay-line synthesis of time-varying MIMO-OFDM channels.
//!
//! Each realization draws a set of propagation paths (delay, complex gain,
//! departure angles, Doppler shift) from the scenario's profile. The
//! frequency response over any time and subcarrier grid then follows in
//! closed form:
//!
//! ```text
//! H[m, t, k] = sum_p a_p * exp(j phi(m, p)) * exp(j 2 pi f_p t) * exp(-j 2 pi f_k tau_p)
//! ```
//!
//! with `phi` the planar-array steering phase of antenna `m` toward path
//! `p`, `f_p` the path's Doppler shift, and `f_k = k * sc_spacing` the
//! subcarrier's baseband offset.
//!
//! Path draws fold the profile into the seed but not velocity or delay
//! spread, so sweeps along those axes reuse the same scatterer geometry
//! and act as paired comparisons.

use crate::error::{Error, Result};
use crate::noise::{
    apply_awgn, apply_burst, apply_packet_drop, apply_phase_noise, calibrate_noise_degree,
    impute_dropped, BurstParams,
};
use crate::types::{
    CsiDataset, CsiSample, CsiSequence, Duplex, NoiseType, ScenarioDescriptor, SnrMode,
    SystemConfig,
};
use ndarray::{s, Array2, Array3};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Exp1, Normal};
use rayon::prelude::*;

pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;

/// Clean histories used to calibrate phase and burst noise knobs before a
/// dataset's histories are corrupted.
const CALIBRATION_REF_SAMPLES: usize = 16;

pub(crate) fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub(crate) fn mix_seed(seed: u64, salt: u64) -> u64 {
    splitmix64(seed ^ splitmix64(salt))
}

/// Independent RNG seeds derived for one dataset sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SampleSeeds {
    /// Scatterer geometry draw.
    pub path: u64,
    /// Noise injection draw.
    pub noise: u64,
    /// Per-sample SNR draw in training mode.
    pub degree: u64,
}

/// Seeds for sample `index` of a dataset generated from `base_seed`.
pub fn sample_seeds(base_seed: u64, index: usize) -> SampleSeeds {
    let sample = base_seed.wrapping_add(index as u64);
    SampleSeeds {
        path: sample,
        noise: mix_seed(sample, 0x6E6F_6973),
        degree: mix_seed(sample, 0x6465_6772),
    }
}

/// One propagation path of a channel realization.
#[derive(Debug, Clone, PartialEq)]
pub struct Path {
    pub delay_s: f64,
    pub gain: Complex64,
    pub azimuth_rad: f64,
    pub elevation_rad: f64,
    pub doppler_hz: f64,
}

/// A full multipath realization: unit total power, gain-weighted RMS delay
/// spread matching the scenario exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct PathSet {
    pub paths: Vec<Path>,
}

impl PathSet {
    pub fn total_power(&self) -> f64 {
        self.paths.iter().map(|p| p.gain.norm_sqr()).sum()
    }

    /// Gain-weighted RMS spread of the path delays.
    pub fn rms_delay_spread(&self) -> f64 {
        let total = self.total_power();
        let mean: f64 = self
            .paths
            .iter()
            .map(|p| p.gain.norm_sqr() / total * p.delay_s)
            .sum();
        let second: f64 = self
            .paths
            .iter()
            .map(|p| p.gain.norm_sqr() / total * p.delay_s * p.delay_s)
            .sum();
        (second - mean * mean).max(0.0).sqrt()
    }
}

/// Antenna panel geometry for a given port count: even counts split into
/// two polarization copies of a near-square grid (the second copy offset
/// by a fixed pi/2 phase), odd counts use a single-polarization grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct PanelLayout {
    rows: usize,
    cols: usize,
    dual_pol: bool,
}

fn near_square(count: usize) -> (usize, usize) {
    let mut rows = (count as f64).sqrt().floor() as usize;
    while rows > 1 && count % rows != 0 {
        rows -= 1;
    }
    (rows.max(1), count / rows.max(1))
}

fn panel_layout(n_tx: usize) -> PanelLayout {
    if n_tx % 2 == 0 && n_tx >= 2 {
        let (rows, cols) = near_square(n_tx / 2);
        PanelLayout { rows, cols, dual_pol: true }
    } else {
        let (rows, cols) = near_square(n_tx);
        PanelLayout { rows, cols, dual_pol: false }
    }
}

/// Steering phase of antenna `m` toward (azimuth, elevation), for a
/// half-wavelength-spaced planar panel.
fn steering_phase(layout: PanelLayout, m: usize, azimuth: f64, elevation: f64) -> f64 {
    let per_pol = layout.rows * layout.cols;
    let (pol, idx) = if layout.dual_pol {
        (m / per_pol, m % per_pol)
    } else {
        (0, m)
    };
    let row = idx / layout.cols;
    let col = idx % layout.cols;
    let geometric = std::f64::consts::PI
        * (col as f64 * azimuth.sin() * elevation.cos() + row as f64 * elevation.sin());
    geometric + pol as f64 * std::f64::consts::FRAC_PI_2
}

/// Draw a multipath realization for the scenario. Scattered paths get
/// exponential delays with an exponentially decaying power profile and
/// Rayleigh gains; LOS profiles prepend a direct path at zero delay whose
/// power fraction is `K / (K + 1)`. Delays are rescaled afterwards so the
/// gain-weighted RMS spread equals the scenario's delay spread exactly,
/// and gains are normalized to unit total power.
pub fn generate_path_set(
    config: &SystemConfig,
    scenario: &ScenarioDescriptor,
    seed: u64,
) -> Result<PathSet> {
    config.validate()?;
    scenario.validate()?;
    let mut rng = ChaCha12Rng::seed_from_u64(mix_seed(seed, 0x7061 + scenario.profile.code() as u64));
    let n_scatter = scenario.profile.path_count();
    let k_linear = scenario
        .profile
        .k_factor_db()
        .map(|k_db| 10f64.powf(k_db / 10.0));

    let gain_part = Normal::new(0.0, (0.5f64).sqrt()).expect("finite std");
    let mut paths = Vec::with_capacity(n_scatter + 1);

    if k_linear.is_some() {
        let azimuth = rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI);
        let elevation = rng.gen_range(-std::f64::consts::FRAC_PI_4..std::f64::consts::FRAC_PI_4);
        let phase = rng.gen_range(0.0..std::f64::consts::TAU);
        let heading = rng.gen_range(0.0..std::f64::consts::TAU);
        paths.push(Path {
            delay_s: 0.0,
            gain: Complex64::from_polar(1.0, phase),
            azimuth_rad: azimuth,
            elevation_rad: elevation,
            doppler_hz: doppler_shift(config, scenario.velocity_mps, heading),
        });
    }

    for _ in 0..n_scatter {
        let raw_delay: f64 = Exp1.sample(&mut rng);
        let re: f64 = gain_part.sample(&mut rng);
        let im: f64 = gain_part.sample(&mut rng);
        let azimuth = rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI);
        let elevation = rng.gen_range(-std::f64::consts::FRAC_PI_4..std::f64::consts::FRAC_PI_4);
        let heading = rng.gen_range(0.0..std::f64::consts::TAU);
        let profile_weight = (-raw_delay).exp().sqrt();
        paths.push(Path {
            delay_s: raw_delay,
            gain: Complex64::new(re, im) * profile_weight,
            azimuth_rad: azimuth,
            elevation_rad: elevation,
            doppler_hz: doppler_shift(config, scenario.velocity_mps, heading),
        });
    }

    // Split the unit power budget between the direct path and the
    // scattered cluster, then pin the RMS delay spread.
    let scatter_start = if k_linear.is_some() { 1 } else { 0 };
    let scatter_power: f64 = paths[scatter_start..]
        .iter()
        .map(|p| p.gain.norm_sqr())
        .sum();
    if scatter_power == 0.0 {
        return Err(Error::InvalidParams("degenerate zero-power scatter draw".into()));
    }
    let scatter_target = match k_linear {
        Some(k) => 1.0 / (k + 1.0),
        None => 1.0,
    };
    let scale = (scatter_target / scatter_power).sqrt();
    for p in &mut paths[scatter_start..] {
        p.gain *= scale;
    }
    if let Some(k) = k_linear {
        paths[0].gain = Complex64::from_polar((k / (k + 1.0)).sqrt(), paths[0].gain.arg());
    }

    let mut set = PathSet { paths };
    let raw_spread = set.rms_delay_spread();
    if raw_spread <= 0.0 {
        return Err(Error::InvalidParams("degenerate delay draw with zero spread".into()));
    }
    let stretch = scenario.delay_spread_s / raw_spread;
    for p in &mut set.paths {
        p.delay_s *= stretch;
    }
    Ok(set)
}

fn doppler_shift(config: &SystemConfig, velocity_mps: f64, heading_rad: f64) -> f64 {
    velocity_mps / SPEED_OF_LIGHT * config.carrier_freq_hz * heading_rad.cos()
}

/// Evaluate the path sum over `n_steps` snapshots starting at `t0`,
/// covering the full simulated subcarrier grid (both bands plus guard in
/// FDD mode).
pub fn synthesize_csi_sequence(
    paths: &PathSet,
    config: &SystemConfig,
    n_steps: usize,
    t0: f64,
) -> Result<CsiSequence> {
    config.validate()?;
    if paths.paths.is_empty() {
        return Err(Error::InvalidParams("empty path set".into()));
    }
    let n_paths = paths.paths.len();
    let k_tot = config.total_subcarriers();
    let layout = panel_layout(config.n_tx);
    let dt = config.report_interval_s;

    let mut antenna_factors = Array2::<Complex64>::zeros((config.n_tx, n_paths));
    for m in 0..config.n_tx {
        for (p, path) in paths.paths.iter().enumerate() {
            let phi = steering_phase(layout, m, path.azimuth_rad, path.elevation_rad);
            antenna_factors[[m, p]] = path.gain * Complex64::from_polar(1.0, phi);
        }
    }
    let mut time_factors = Array2::<Complex64>::zeros((n_paths, n_steps));
    for (p, path) in paths.paths.iter().enumerate() {
        for t in 0..n_steps {
            let phase = std::f64::consts::TAU * path.doppler_hz * (t0 + t as f64 * dt);
            time_factors[[p, t]] = Complex64::from_polar(1.0, phase);
        }
    }
    let mut freq_factors = Array2::<Complex64>::zeros((n_paths, k_tot));
    for (p, path) in paths.paths.iter().enumerate() {
        for k in 0..k_tot {
            let phase = -std::f64::consts::TAU * k as f64 * config.sc_spacing_hz * path.delay_s;
            freq_factors[[p, k]] = Complex64::from_polar(1.0, phase);
        }
    }

    let mut data = Array3::<Complex64>::zeros((config.n_tx, n_steps, k_tot));
    for m in 0..config.n_tx {
        for t in 0..n_steps {
            for p in 0..n_paths {
                let mt = antenna_factors[[m, p]] * time_factors[[p, t]];
                for k in 0..k_tot {
                    data[[m, t, k]] += mt * freq_factors[[p, k]];
                }
            }
        }
    }
    CsiSequence::new(data, t0, dt)
}

/// Slice a full-grid sequence into its uplink and downlink bands. In TDD
/// mode both bands are the same `n_sc` subcarriers; in FDD mode the
/// uplink is the first `n_sc` columns and the downlink the last `n_sc`,
/// separated by the guard band.
pub fn split_bands(seq: &CsiSequence, config: &SystemConfig) -> Result<(CsiSequence, CsiSequence)> {
    let expected = config.total_subcarriers();
    if seq.n_sc() != expected {
        return Err(Error::dim(
            "full-grid sequence",
            format!("{expected} subcarriers"),
            format!("{}", seq.n_sc()),
        ));
    }
    let band = |start: usize| CsiSequence {
        data: seq.data.slice(s![.., .., start..start + config.n_sc]).to_owned(),
        start_time_s: seq.start_time_s,
        dt_s: seq.dt_s,
    };
    match config.duplex {
        Duplex::Tdd => Ok((seq.clone(), seq.clone())),
        Duplex::Fdd => Ok((band(0), band(config.n_sc + config.n_guard))),
    }
}

fn time_slice(seq: &CsiSequence, start: usize, len: usize) -> CsiSequence {
    CsiSequence {
        data: seq.data.slice(s![.., start..start + len, ..]).to_owned(),
        start_time_s: seq.start_time_s + start as f64 * seq.dt_s,
        dt_s: seq.dt_s,
    }
}

/// Generate a dataset for one scenario cell: draw a fresh path set per
/// sample, synthesize history plus future, take the history from the
/// uplink band and the target from the downlink band (identical in TDD),
/// and corrupt the history with the scenario's noise.
///
/// Phase and burst noise express their degree as a target SNR, so their
/// knobs are first calibrated against up to 16 clean histories from this
/// same dataset. `SnrMode::UniformRange` draws a per-sample AWGN SNR
/// instead of using the scenario's fixed degree (training mode).
pub fn make_dataset(
    config: &SystemConfig,
    scenario: &ScenarioDescriptor,
    count: usize,
    base_seed: u64,
    snr_mode: SnrMode,
) -> Result<CsiDataset> {
    config.validate()?;
    scenario.validate()?;
    if scenario.duplex != config.duplex {
        return Err(Error::InvalidScenario(format!(
            "scenario duplex {} does not match config duplex {}",
            scenario.duplex, config.duplex
        )));
    }
    if matches!(snr_mode, SnrMode::UniformRange { .. }) && scenario.noise != NoiseType::Awgn {
        return Err(Error::InvalidConfig(format!(
            "per-sample SNR ranges only apply to AWGN noise, not {}",
            scenario.noise
        )));
    }

    let n_steps = config.hist_len + config.pred_len;
    let clean: Vec<(CsiSequence, CsiSequence)> = (0..count)
        .into_par_iter()
        .map(|i| {
            let seeds = sample_seeds(base_seed, i);
            let paths = generate_path_set(config, scenario, seeds.path)?;
            let full = synthesize_csi_sequence(&paths, config, n_steps, 0.0)?;
            let (ul, dl) = split_bands(&full, config)?;
            let history = time_slice(&ul, 0, config.hist_len);
            let target = time_slice(&dl, config.hist_len, config.pred_len);
            Ok((history, target))
        })
        .collect::<Result<_>>()?;

    let knob = match scenario.noise {
        NoiseType::Phase | NoiseType::Burst if count > 0 => {
            let refs: Vec<CsiSequence> = clean
                .iter()
                .take(CALIBRATION_REF_SAMPLES)
                .map(|(h, _)| h.clone())
                .collect();
            Some(calibrate_noise_degree(
                scenario.noise,
                scenario.noise_degree,
                &refs,
                mix_seed(base_seed, 0x6361_6C69),
            )?)
        }
        _ => None,
    };

    let samples: Vec<CsiSample> = clean
        .into_par_iter()
        .enumerate()
        .map(|(i, (history, target))| {
            let seeds = sample_seeds(base_seed, i);
            let degree = match snr_mode {
                SnrMode::Fixed => scenario.noise_degree,
                SnrMode::UniformRange { lo_db, hi_db } => {
                    let mut rng = ChaCha12Rng::seed_from_u64(seeds.degree);
                    if lo_db == hi_db {
                        lo_db
                    } else {
                        rng.gen_range(lo_db..hi_db)
                    }
                }
            };
            let corrupted = match scenario.noise {
                NoiseType::None => history,
                NoiseType::Awgn => apply_awgn(&history, degree, seeds.noise)?,
                NoiseType::Phase => apply_phase_noise(&history, knob.unwrap(), seeds.noise)?,
                NoiseType::Burst => {
                    apply_burst(&history, BurstParams::from_degree(knob.unwrap()), seeds.noise)?
                }
                NoiseType::PacketDrop => {
                    let (dropped, mask) = apply_packet_drop(&history, degree, seeds.noise)?;
                    impute_dropped(&dropped, &mask)?
                }
            };
            let scenario_i = ScenarioDescriptor {
                noise_degree: degree,
                ..scenario.clone()
            };
            Ok(CsiSample {
                history: corrupted,
                target,
                scenario: scenario_i,
                seed: seeds.path,
            })
        })
        .collect::<Result<_>>()?;

    let dataset = CsiDataset {
        config: config.clone(),
        scenario: scenario.clone(),
        snr_mode,
        samples,
    };
    dataset.validate()?;
    Ok(dataset)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::ChannelProfile;

    fn scenario(profile: ChannelProfile, duplex: Duplex) -> ScenarioDescriptor {
        ScenarioDescriptor {
            velocity_mps: 10.0,
            delay_spread_s: 100e-9,
            profile,
            noise: NoiseType::None,
            noise_degree: 0.0,
            duplex,
        }
    }

    #[test]
    fn single_broadside_path_gives_flat_unit_response() {
        let config = SystemConfig {
            n_tx: 3,
            ..SystemConfig::default()
        };
        let paths = PathSet {
            paths: vec![Path {
                delay_s: 0.0,
                gain: Complex64::new(1.0, 0.0),
                azimuth_rad: 0.0,
                elevation_rad: 0.0,
                doppler_hz: 0.0,
            }],
        };
        let seq = synthesize_csi_sequence(&paths, &config, 5, 0.0).unwrap();
        for h in seq.data.iter() {
            assert!((h - Complex64::new(1.0, 0.0)).norm() < 1e-12);
        }
    }

    #[test]
    fn two_path_response_matches_scalar_formula() {
        let config = SystemConfig {
            n_tx: 1,
            ..SystemConfig::default()
        };
        let a0 = Complex64::new(0.8, -0.1);
        let a1 = Complex64::new(-0.3, 0.45);
        let tau = 180e-9;
        let paths = PathSet {
            paths: vec![
                Path {
                    delay_s: 0.0,
                    gain: a0,
                    azimuth_rad: 0.0,
                    elevation_rad: 0.0,
                    doppler_hz: 0.0,
                },
                Path {
                    delay_s: tau,
                    gain: a1,
                    azimuth_rad: 0.0,
                    elevation_rad: 0.0,
                    doppler_hz: 0.0,
                },
            ],
        };
        let seq = synthesize_csi_sequence(&paths, &config, 3, 0.0).unwrap();
        for t in 0..3 {
            for k in 0..config.n_sc {
                let angle = -std::f64::consts::TAU * k as f64 * config.sc_spacing_hz * tau;
                let expected = a0 + a1 * Complex64::new(angle.cos(), angle.sin());
                assert!((seq.data[[0, t, k]] - expected).norm() < 1e-12);
            }
        }
    }

    #[test]
    fn generated_sets_have_unit_power_and_exact_delay_spread() {
        let config = SystemConfig::default();
        for profile in ChannelProfile::ALL {
            for spread in [30e-9, 300e-9] {
                let mut sc = scenario(profile, Duplex::Tdd);
                sc.delay_spread_s = spread;
                let set = generate_path_set(&config, &sc, 42).unwrap();
                assert!((set.total_power() - 1.0).abs() < 1e-9, "{profile}");

                // Recompute the spread with an independent loop.
                let powers: Vec<f64> = set.paths.iter().map(|p| p.gain.norm_sqr()).collect();
                let total: f64 = powers.iter().sum();
                let mut mean = 0.0;
                let mut second = 0.0;
                for (p, w) in set.paths.iter().zip(&powers) {
                    mean += w / total * p.delay_s;
                    second += w / total * p.delay_s * p.delay_s;
                }
                let rms = (second - mean * mean).sqrt();
                assert!(
                    (rms - spread).abs() / spread < 1e-9,
                    "{profile}: rms {rms:e} vs {spread:e}"
                );
            }
        }
    }

    #[test]
    fn los_profiles_place_direct_path_power_by_k_factor() {
        let config = SystemConfig::default();
        for (profile, k_db) in [(ChannelProfile::LosD, 10.0), (ChannelProfile::LosE, 13.0)] {
            let set = generate_path_set(&config, &scenario(profile, Duplex::Tdd), 3).unwrap();
            assert_eq!(set.paths.len(), profile.path_count() + 1);
            assert_eq!(set.paths[0].delay_s, 0.0);
            let k = 10f64.powf(k_db / 10.0);
            let want = k / (k + 1.0);
            assert!((set.paths[0].gain.norm_sqr() - want).abs() < 1e-9);
        }
        let nlos = generate_path_set(&config, &scenario(ChannelProfile::NlosB, Duplex::Tdd), 3).unwrap();
        assert_eq!(nlos.paths.len(), 16);
    }

    #[test]
    fn doppler_shifts_bounded_by_max_doppler() {
        let config = SystemConfig::default();
        let mut sc = scenario(ChannelProfile::NlosA, Duplex::Tdd);
        sc.velocity_mps = 30.0;
        let set = generate_path_set(&config, &sc, 9).unwrap();
        let f_max = 30.0 / SPEED_OF_LIGHT * config.carrier_freq_hz;
        for p in &set.paths {
            assert!(p.doppler_hz.abs() <= f_max + 1e-9);
        }
    }

    #[test]
    fn zero_velocity_freezes_the_channel() {
        let config = SystemConfig::default();
        let mut sc = scenario(ChannelProfile::NlosA, Duplex::Tdd);
        sc.velocity_mps = 0.0;
        let set = generate_path_set(&config, &sc, 11).unwrap();
        let seq = synthesize_csi_sequence(&set, &config, 6, 0.0).unwrap();
        let first = seq.data.slice(s![.., 0, ..]).to_owned();
        for t in 1..6 {
            assert_eq!(seq.data.slice(s![.., t, ..]), first);
        }
    }

    #[test]
    fn same_seed_reproduces_different_seed_varies() {
        let config = SystemConfig::default();
        let sc = scenario(ChannelProfile::NlosC, Duplex::Tdd);
        let a = generate_path_set(&config, &sc, 5).unwrap();
        let b = generate_path_set(&config, &sc, 5).unwrap();
        let c = generate_path_set(&config, &sc, 6).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn band_split_matches_grid_layout() {
        let config = SystemConfig {
            duplex: Duplex::Fdd,
            ..SystemConfig::default()
        };
        let sc = scenario(ChannelProfile::NlosA, Duplex::Fdd);
        let set = generate_path_set(&config, &sc, 8).unwrap();
        let full = synthesize_csi_sequence(&set, &config, 4, 0.0).unwrap();
        let (ul, dl) = split_bands(&full, &config).unwrap();
        assert_eq!(ul.n_sc(), config.n_sc);
        assert_eq!(dl.n_sc(), config.n_sc);
        assert_eq!(ul.data, full.data.slice(s![.., .., 0..config.n_sc]).to_owned());
        let dl_start = config.n_sc + config.n_guard;
        assert_eq!(
            dl.data,
            full.data.slice(s![.., .., dl_start..dl_start + config.n_sc]).to_owned()
        );

        let tdd = SystemConfig::default();
        let sc = scenario(ChannelProfile::NlosA, Duplex::Tdd);
        let set = generate_path_set(&tdd, &sc, 8).unwrap();
        let full = synthesize_csi_sequence(&set, &tdd, 4, 0.0).unwrap();
        let (ul, dl) = split_bands(&full, &tdd).unwrap();
        assert_eq!(ul, dl);
        assert_eq!(ul, full);
    }

    #[test]
    fn wider_delay_spread_decorrelates_fdd_bands() {
        let config = SystemConfig {
            duplex: Duplex::Fdd,
            ..SystemConfig::default()
        };
        let mean_band_corr = |spread: f64| {
            let mut acc = 0.0;
            let n_sets = 40;
            for seed in 0..n_sets {
                let mut sc = scenario(ChannelProfile::NlosA, Duplex::Fdd);
                sc.delay_spread_s = spread;
                let set = generate_path_set(&config, &sc, seed).unwrap();
                let full = synthesize_csi_sequence(&set, &config, 1, 0.0).unwrap();
                let (ul, dl) = split_bands(&full, &config).unwrap();
                let inner: Complex64 = ul
                    .data
                    .iter()
                    .zip(dl.data.iter())
                    .map(|(u, d)| u * d.conj())
                    .sum();
                acc += inner.norm()
                    / (ul.frobenius_norm_sq().sqrt() * dl.frobenius_norm_sq().sqrt());
            }
            acc / n_sets as f64
        };
        let tight = mean_band_corr(30e-9);
        let wide = mean_band_corr(300e-9);
        assert!(
            wide < tight,
            "expected decorrelation: 30ns corr {tight:.3}, 300ns corr {wide:.3}"
        );
    }

    #[test]
    fn dataset_samples_validate_and_reproduce() {
        let config = SystemConfig::default();
        let mut sc = scenario(ChannelProfile::NlosA, Duplex::Tdd);
        sc.noise = NoiseType::Awgn;
        sc.noise_degree = 10.0;
        let a = make_dataset(&config, &sc, 6, 77, SnrMode::Fixed).unwrap();
        let b = make_dataset(&config, &sc, 6, 77, SnrMode::Fixed).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.samples.len(), 6);
        a.validate().unwrap();
        let c = make_dataset(&config, &sc, 6, 78, SnrMode::Fixed).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn fdd_dataset_splits_history_and_target_across_bands() {
        let config = SystemConfig {
            duplex: Duplex::Fdd,
            ..SystemConfig::default()
        };
        let sc = scenario(ChannelProfile::NlosB, Duplex::Fdd);
        let ds = make_dataset(&config, &sc, 2, 5, SnrMode::Fixed).unwrap();
        for (i, sample) in ds.samples.iter().enumerate() {
            let seeds = sample_seeds(5, i);
            assert_eq!(sample.seed, seeds.path);
            let paths = generate_path_set(&config, &sc, seeds.path).unwrap();
            let full = synthesize_csi_sequence(
                &paths,
                &config,
                config.hist_len + config.pred_len,
                0.0,
            )
            .unwrap();
            let (ul, dl) = split_bands(&full, &config).unwrap();
            assert_eq!(sample.history, time_slice(&ul, 0, config.hist_len));
            assert_eq!(sample.target, time_slice(&dl, config.hist_len, config.pred_len));
        }
    }

    #[test]
    fn training_mode_draws_snr_per_sample() {
        let config = SystemConfig::default();
        let mut sc = scenario(ChannelProfile::NlosA, Duplex::Tdd);
        sc.noise = NoiseType::Awgn;
        sc.noise_degree = 0.0;
        let mode = SnrMode::UniformRange { lo_db: 0.0, hi_db: 25.0 };
        let ds = make_dataset(&config, &sc, 12, 3, mode).unwrap();
        let degrees: Vec<f64> = ds.samples.iter().map(|s| s.scenario.noise_degree).collect();
        assert!(degrees.iter().all(|d| (0.0..25.0).contains(d)));
        let spread = degrees.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
            - degrees.iter().cloned().fold(f64::INFINITY, f64::min);
        assert!(spread > 5.0, "SNR draws suspiciously tight: {degrees:?}");

        let err = make_dataset(
            &config,
            &scenario(ChannelProfile::NlosA, Duplex::Tdd),
            2,
            3,
            mode,
        )
        .unwrap_err();
        assert!(matches!(err, Error::InvalidConfig(_)));
    }

    #[test]
    fn packet_drop_dataset_imputes_missing_snapshots() {
        let config = SystemConfig::default();
        let mut sc = scenario(ChannelProfile::NlosA, Duplex::Tdd);
        sc.noise = NoiseType::PacketDrop;
        sc.noise_degree = 0.4;
        let ds = make_dataset(&config, &sc, 8, 21, SnrMode::Fixed).unwrap();
        // Imputation repeats snapshots, so dropped steps must equal some
        // other step rather than being zero.
        for sample in &ds.samples {
            assert!(sample.history.frobenius_norm_sq() > 0.0);
        }
    }

    #[test]
    fn phase_noise_dataset_hits_target_snr() {
        let config = SystemConfig::default();
        let mut sc = scenario(ChannelProfile::NlosA, Duplex::Tdd);
        sc.noise = NoiseType::Phase;
        sc.noise_degree = 10.0;
        let ds = make_dataset(&config, &sc, 24, 9, SnrMode::Fixed).unwrap();
        let mut signal = 0.0;
        let mut noise = 0.0;
        for (i, sample) in ds.samples.iter().enumerate() {
            let seeds = sample_seeds(9, i);
            let paths = generate_path_set(&config, &sc, seeds.path).unwrap();
            let full =
                synthesize_csi_sequence(&paths, &config, config.hist_len + config.pred_len, 0.0)
                    .unwrap();
            let (ul, _) = split_bands(&full, &config).unwrap();
            let clean = time_slice(&ul, 0, config.hist_len);
            signal += clean.frobenius_norm_sq();
            noise += clean
                .data
                .iter()
                .zip(sample.history.data.iter())
                .map(|(c, n)| (n - c).norm_sqr())
                .sum::<f64>();
        }
        let snr = 10.0 * (signal / noise).log10();
        assert!((snr - 10.0).abs() < 0.75, "dataset SNR {snr:.2} dB");
    }

    #[test]
    fn panel_layouts_cover_pol_and_grid_cases() {
        assert_eq!(
            panel_layout(4),
            PanelLayout { rows: 1, cols: 2, dual_pol: true }
        );
        assert_eq!(
            panel_layout(32),
            PanelLayout { rows: 4, cols: 4, dual_pol: true }
        );
        assert_eq!(
            panel_layout(3),
            PanelLayout { rows: 1, cols: 3, dual_pol: false }
        );
        assert_eq!(
            panel_layout(1),
            PanelLayout { rows: 1, cols: 1, dual_pol: false }
        );
    }
}
