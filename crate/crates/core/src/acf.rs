//! Autocorrelation diagnostics over CSI tensors shaped
//! (sample, antenna, time, subcarrier).
//!
//! Each series is handled the same way: subtract its sample mean, form
//! the lag-wise autocovariance with each lag divided by its own term
//! count, and normalize by lag zero. A pure complex rotation therefore
//! keeps unit magnitude at every lag instead of decaying with the
//! window. Magnitudes of the normalized values are averaged across all
//! series; series with no variation after mean removal carry no
//! information and are skipped.

use ndarray::{Array2, ArrayView4};
use num_complex::Complex64;

use crate::error::{Error, Result};

/// Mean `|acf|` per time lag, averaged over every
/// (sample, antenna, subcarrier) series.
pub fn temporal_acf(data: ArrayView4<'_, Complex64>, max_lag: usize) -> Result<Vec<f64>> {
    let (n_samples, n_tx, n_time, n_sc) = data.dim();
    check_len(n_time, max_lag)?;
    let mut sums = vec![0.0; max_lag + 1];
    let mut n_series = 0usize;
    let mut series = Vec::with_capacity(n_time);
    for s in 0..n_samples {
        for a in 0..n_tx {
            for k in 0..n_sc {
                series.clear();
                series.extend((0..n_time).map(|t| data[[s, a, t, k]]));
                accumulate_series(&series, &mut sums, &mut n_series);
            }
        }
    }
    finish(sums, n_series)
}

/// Mean `|acf|` per subcarrier lag, averaged over every
/// (sample, antenna, time) series.
pub fn frequency_acf(data: ArrayView4<'_, Complex64>, max_lag: usize) -> Result<Vec<f64>> {
    let (n_samples, n_tx, n_time, n_sc) = data.dim();
    check_len(n_sc, max_lag)?;
    let mut sums = vec![0.0; max_lag + 1];
    let mut n_series = 0usize;
    let mut series = Vec::with_capacity(n_sc);
    for s in 0..n_samples {
        for a in 0..n_tx {
            for t in 0..n_time {
                series.clear();
                series.extend((0..n_sc).map(|k| data[[s, a, t, k]]));
                accumulate_series(&series, &mut sums, &mut n_series);
            }
        }
    }
    finish(sums, n_series)
}

/// Mean `|acf|` over a (time lag, subcarrier lag) grid, each
/// (sample, antenna) plane treated as one two-dimensional series.
pub fn acf_2d(
    data: ArrayView4<'_, Complex64>,
    max_t_lag: usize,
    max_f_lag: usize,
) -> Result<Array2<f64>> {
    let (n_samples, n_tx, n_time, n_sc) = data.dim();
    check_len(n_time, max_t_lag)?;
    check_len(n_sc, max_f_lag)?;
    let mut sums = Array2::<f64>::zeros((max_t_lag + 1, max_f_lag + 1));
    let mut n_series = 0usize;
    for s in 0..n_samples {
        for a in 0..n_tx {
            let plane = data.index_axis(ndarray::Axis(0), s);
            let plane = plane.index_axis(ndarray::Axis(0), a);

            let mean = plane.iter().sum::<Complex64>() / (n_time * n_sc) as f64;
            let y = plane.map(|v| v - mean);
            let r00: f64 = y.iter().map(|v| v.norm_sqr()).sum::<f64>() / (n_time * n_sc) as f64;
            if r00 == 0.0 {
                continue;
            }
            n_series += 1;
            for lt in 0..=max_t_lag {
                for lf in 0..=max_f_lag {
                    let mut acc = Complex64::new(0.0, 0.0);
                    for t in 0..n_time - lt {
                        for f in 0..n_sc - lf {
                            acc += y[[t, f]].conj() * y[[t + lt, f + lf]];
                        }
                    }
                    let count = ((n_time - lt) * (n_sc - lf)) as f64;
                    sums[[lt, lf]] += (acc / count).norm() / r00;
                }
            }
        }
    }
    if n_series == 0 {
        return Err(Error::ZeroSignal("autocorrelation input"));
    }
    Ok(sums / n_series as f64)
}

fn check_len(len: usize, max_lag: usize) -> Result<()> {
    if len <= max_lag {
        return Err(Error::SeriesTooShort { len, lag: max_lag });
    }
    Ok(())
}

fn accumulate_series(series: &[Complex64], sums: &mut [f64], n_series: &mut usize) {
    let len = series.len();
    let mean = series.iter().sum::<Complex64>() / len as f64;
    let y: Vec<Complex64> = series.iter().map(|v| v - mean).collect();
    let r0: f64 = y.iter().map(|v| v.norm_sqr()).sum::<f64>() / len as f64;
    if r0 == 0.0 {
        return;
    }
    *n_series += 1;
    for (lag, sum) in sums.iter_mut().enumerate() {
        let mut acc = Complex64::new(0.0, 0.0);
        for t in 0..len - lag {
            acc += y[t].conj() * y[t + lag];
        }
        *sum += (acc / (len - lag) as f64).norm() / r0;
    }
}

fn finish(sums: Vec<f64>, n_series: usize) -> Result<Vec<f64>> {
    if n_series == 0 {
        return Err(Error::ZeroSignal("autocorrelation input"));
    }
    Ok(sums.into_iter().map(|s| s / n_series as f64).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::make_dataset;
    use crate::types::{
        ChannelProfile, Duplex, NoiseType, ScenarioDescriptor, SnrMode, SystemConfig,
    };
    use approx::assert_abs_diff_eq;
    use ndarray::Array4;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;
    use std::f64::consts::TAU;

    fn random_data(shape: (usize, usize, usize, usize), seed: u64) -> Array4<Complex64> {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        Array4::from_shape_fn(shape, |_| {
            Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))
        })
    }

    #[test]
    fn lag_zero_is_exactly_one() {
        let data = random_data((2, 2, 10, 3), 1);
        let acf = temporal_acf(data.view(), 4).unwrap();
        assert_eq!(acf.len(), 5);
        assert_abs_diff_eq!(acf[0], 1.0);
        let facf = frequency_acf(data.view(), 2).unwrap();
        assert_abs_diff_eq!(facf[0], 1.0);
        let grid = acf_2d(data.view(), 3, 2).unwrap();
        assert_abs_diff_eq!(grid[[0, 0]], 1.0);
    }

    #[test]
    fn rotating_series_keeps_unit_magnitude_at_every_lag() {
        // A constant offset plus one complex tone whose frequency divides
        // the window length; the offset vanishes with the mean and the
        // tone is a pure rotation.
        let len = 16;
        let data = Array4::from_shape_fn((1, 1, len, 1), |(_, _, t, _)| {
            Complex64::new(0.7, -0.2)
                + 1.3 * Complex64::new(0.0, TAU * 3.0 * t as f64 / len as f64).exp()
        });
        let acf = temporal_acf(data.view(), len - 1).unwrap();
        for (lag, value) in acf.iter().enumerate() {
            assert_abs_diff_eq!(*value, 1.0, epsilon = 1e-9);
            let _ = lag;
        }
    }

    #[test]
    fn white_noise_decorrelates() {
        let data = random_data((1, 1, 10_000, 1), 7);
        let acf = temporal_acf(data.view(), 1).unwrap();
        assert!(acf[1] < 0.05, "lag-1 magnitude {}", acf[1]);
    }

    #[test]
    fn temporal_matches_direct_loop() {
        let data = random_data((1, 1, 6, 1), 3);
        let got = temporal_acf(data.view(), 3).unwrap();

        let series: Vec<Complex64> = (0..6).map(|t| data[[0, 0, t, 0]]).collect();
        let mean = series.iter().sum::<Complex64>() / 6.0;
        let y: Vec<Complex64> = series.iter().map(|v| v - mean).collect();
        let r0 = y.iter().map(|v| v.norm_sqr()).sum::<f64>() / 6.0;
        for lag in 0..=3 {
            let mut acc = Complex64::new(0.0, 0.0);
            for t in 0..6 - lag {
                acc += y[t].conj() * y[t + lag];
            }
            let expect = (acc / (6 - lag) as f64).norm() / r0;
            assert_abs_diff_eq!(got[lag], expect, epsilon = 1e-12);
        }
    }

    #[test]
    fn frequency_tone_keeps_unit_magnitude() {
        let k = 8;
        let data = Array4::from_shape_fn((1, 1, 3, k), |(_, _, _, f)| {
            Complex64::new(0.0, TAU * 2.0 * f as f64 / k as f64).exp()
        });
        let acf = frequency_acf(data.view(), k - 1).unwrap();
        for value in &acf {
            assert_abs_diff_eq!(*value, 1.0, epsilon = 1e-9);
        }
    }

    #[test]
    fn two_tone_grid_matches_double_loop() {
        // Two planewaves over the (time, frequency) grid, like a pair of
        // propagation paths with distinct Doppler and delay.
        let (nt, nf) = (4, 8);
        let data = Array4::from_shape_fn((1, 1, nt, nf), |(_, _, t, f)| {
            0.9 * Complex64::new(0.0, TAU * (t as f64 / 4.0) - 0.8 * f as f64).exp()
                + 0.4 * Complex64::new(0.0, -TAU * (t as f64 / 3.0) + 0.3 * f as f64).exp()
        });
        let got = acf_2d(data.view(), 2, 3).unwrap();

        let mean = data.iter().sum::<Complex64>() / (nt * nf) as f64;
        let y = data.index_axis(ndarray::Axis(0), 0);
        let y = y.index_axis(ndarray::Axis(0), 0);
        let y = y.map(|v| v - mean);
        let r00 = y.iter().map(|v| v.norm_sqr()).sum::<f64>() / (nt * nf) as f64;
        for lt in 0..=2 {
            for lf in 0..=3 {
                let mut acc = Complex64::new(0.0, 0.0);
                for t in 0..nt - lt {
                    for f in 0..nf - lf {
                        acc += y[[t, f]].conj() * y[[t + lt, f + lf]];
                    }
                }
                let expect = (acc / ((nt - lt) * (nf - lf)) as f64).norm() / r00;
                assert_abs_diff_eq!(got[[lt, lf]], expect, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn frequency_flat_rotating_channel_gives_all_ones_grid() {
        let (nt, nf) = (8, 6);
        let data = Array4::from_shape_fn((1, 2, nt, nf), |(_, _, t, _)| {
            Complex64::new(0.0, TAU * 2.0 * t as f64 / nt as f64).exp()
        });
        let grid = acf_2d(data.view(), nt - 1, nf - 1).unwrap();
        for value in grid.iter() {
            assert_abs_diff_eq!(*value, 1.0, epsilon = 1e-9);
        }
    }

    #[test]
    fn short_series_and_dead_input_are_rejected() {
        let data = random_data((1, 1, 4, 3), 9);
        assert!(matches!(
            temporal_acf(data.view(), 4),
            Err(Error::SeriesTooShort { len: 4, lag: 4 })
        ));
        assert!(matches!(frequency_acf(data.view(), 3), Err(Error::SeriesTooShort { .. })));
        assert!(matches!(acf_2d(data.view(), 1, 5), Err(Error::SeriesTooShort { .. })));

        let dead: Array4<Complex64> = Array4::zeros((1, 1, 5, 2));
        assert!(matches!(temporal_acf(dead.view(), 2), Err(Error::ZeroSignal(_))));
        assert!(matches!(acf_2d(dead.view(), 1, 1), Err(Error::ZeroSignal(_))));
    }

    #[test]
    fn faster_motion_decorrelates_sooner() {
        let config = SystemConfig {
            n_tx: 2,
            n_sc: 8,
            n_guard: 2,
            hist_len: 16,
            pred_len: 2,
            ..SystemConfig::default()
        };
        let lag1 = |velocity: f64| {
            let scenario = ScenarioDescriptor {
                velocity_mps: velocity,
                delay_spread_s: 100e-9,
                profile: ChannelProfile::NlosA,
                noise: NoiseType::None,
                noise_degree: 0.0,
                duplex: Duplex::Tdd,
            };
            let dataset = make_dataset(&config, &scenario, 48, 17, SnrMode::Fixed).unwrap();
            let mut stacked = Array4::zeros((48, config.n_tx, config.hist_len, config.n_sc));
            for (i, sample) in dataset.samples.iter().enumerate() {
                stacked
                    .index_axis_mut(ndarray::Axis(0), i)
                    .assign(&sample.history.data);
            }
            temporal_acf(stacked.view(), 1).unwrap()[1]
        };
        let slow = lag1(1.0);
        let medium = lag1(10.0);
        let fast = lag1(30.0);
        assert!(
            slow > medium && medium > fast,
            "expected decorrelation order, got {slow} / {medium} / {fast}"
        );
        // Short windows bias the estimate down (the window mean absorbs
        // much of a slowly varying series), so the bound is loose.
        assert!(slow > 0.8, "walking pace should stay correlated, got {slow}");
    }
}
