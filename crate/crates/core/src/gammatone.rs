//! Gammatone ERB filterbank sampled at STFT bin centers.
//!
//! Band centers are equidistant on the ERB-rate scale with `fmin` as the
//! lowest center and `fmax` as the (exclusive) upper band edge, the spacing
//! convention of the common gammatone toolkits. For the default 20-band
//! 50..2000 Hz bank this puts exactly 10 centers at or below 500 Hz, which is
//! what the low-frequency truncation of the phase features relies on.

use ndarray::Array2;
use rustfft::num_complex::Complex64;
use thiserror::Error;

use crate::dsp::ComplexSpectrogram;

#[derive(Error, Debug)]
pub enum GammatoneError {
    #[error("fmax {fmax} Hz must be below Nyquist {nyquist} Hz")]
    FmaxAboveNyquist { fmax: f64, nyquist: f64 },
    #[error("need fmin < fmax, got {fmin} >= {fmax}")]
    BadBandRange { fmin: f64, fmax: f64 },
    #[error("need at least 2 bands, got {0}")]
    TooFewBands(usize),
    #[error("bank has {bank_bins} bins but spectrogram has {spec_bins}")]
    BinCountMismatch { bank_bins: usize, spec_bins: usize },
}

/// ERB-rate scale: E(f) = 21.4 * log10(4.37 f / 1000 + 1).
pub fn erb_rate(f_hz: f64) -> f64 {
    21.4 * (4.37 * f_hz / 1000.0 + 1.0).log10()
}

/// Inverse of [`erb_rate`].
pub fn erb_rate_inv(e: f64) -> f64 {
    (10f64.powf(e / 21.4) - 1.0) * 1000.0 / 4.37
}

/// Equivalent rectangular bandwidth of the auditory filter at `f_hz`.
pub fn erb_bandwidth_hz(f_hz: f64) -> f64 {
    24.7 * (4.37 * f_hz / 1000.0 + 1.0)
}

#[derive(Debug, Clone)]
pub struct GammatoneBank {
    pub n_bands: usize,
    pub fmin: f64,
    pub fmax: f64,
    pub center_freqs: Vec<f64>,
    /// n_bands x bins; each row is a unit-sum 4th-order gammatone magnitude
    /// response sampled at the one-sided STFT bin frequencies.
    pub weights: Array2<f64>,
}

/// Builds the bank for a given STFT layout.
pub fn build_gammatone_bank(
    n_bands: usize,
    fmin: f64,
    fmax: f64,
    window_size: usize,
    fs: u32,
) -> Result<GammatoneBank, GammatoneError> {
    let nyquist = fs as f64 / 2.0;
    if n_bands < 2 {
        return Err(GammatoneError::TooFewBands(n_bands));
    }
    if fmin >= fmax {
        return Err(GammatoneError::BadBandRange { fmin, fmax });
    }
    if fmax >= nyquist {
        return Err(GammatoneError::FmaxAboveNyquist { fmax, nyquist });
    }

    let e_lo = erb_rate(fmin);
    let e_hi = erb_rate(fmax);
    let step = (e_hi - e_lo) / n_bands as f64;
    let center_freqs: Vec<f64> =
        (0..n_bands).map(|i| erb_rate_inv(e_lo + i as f64 * step)).collect();

    let bins = window_size / 2 + 1;
    let bin_hz = fs as f64 / window_size as f64;
    let mut weights = Array2::zeros((n_bands, bins));
    for (band, &fc) in center_freqs.iter().enumerate() {
        let b = 1.019 * erb_bandwidth_hz(fc);
        let mut row_sum = 0.0;
        for bin in 0..bins {
            let f = bin as f64 * bin_hz;
            // 4th-order gammatone magnitude response.
            let u = (f - fc) / b;
            let w = (1.0 + u * u).powi(-2);
            weights[(band, bin)] = w;
            row_sum += w;
        }
        for bin in 0..bins {
            weights[(band, bin)] /= row_sum;
        }
    }

    Ok(GammatoneBank { n_bands, fmin, fmax, center_freqs, weights })
}

impl GammatoneBank {
    /// Number of bands whose center frequency is at or below `threshold_hz`.
    pub fn low_band_count(&self, threshold_hz: f64) -> usize {
        self.center_freqs.iter().filter(|&&f| f <= threshold_hz).count()
    }
}

/// Projects a complex STFT onto the bank, preserving phase: each band is the
/// weight-row linear combination of the complex bins.
pub fn gammatone_spectrogram(
    spec: &ComplexSpectrogram,
    bank: &GammatoneBank,
) -> Result<Array2<Complex64>, GammatoneError> {
    let bins = bank.weights.ncols();
    if spec.bins != bins {
        return Err(GammatoneError::BinCountMismatch { bank_bins: bins, spec_bins: spec.bins });
    }
    let mut out = Array2::from_elem((bank.n_bands, spec.frames), Complex64::new(0.0, 0.0));
    for band in 0..bank.n_bands {
        for bin in 0..bins {
            let w = bank.weights[(band, bin)];
            if w == 0.0 {
                continue;
            }
            let row = &spec.values[bin * spec.frames..(bin + 1) * spec.frames];
            for (frame, &v) in row.iter().enumerate() {
                out[(band, frame)] += v * w;
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsp::{stft, Signal};
    use approx::assert_abs_diff_eq;

    fn default_bank() -> GammatoneBank {
        build_gammatone_bank(20, 50.0, 2000.0, 64, 16000).unwrap()
    }

    #[test]
    fn erb_rate_reference_points() {
        assert_abs_diff_eq!(erb_rate(50.0), 1.8367, epsilon = 5e-4);
        assert_abs_diff_eq!(erb_rate(500.0), 10.7665, epsilon = 5e-4);
        assert_abs_diff_eq!(erb_rate(2000.0), 21.1552, epsilon = 5e-4);
        assert_abs_diff_eq!(erb_rate_inv(erb_rate(740.0)), 740.0, epsilon = 1e-9);
    }

    #[test]
    fn bank_shape_and_row_normalization() {
        let bank = default_bank();
        assert_eq!(bank.weights.nrows(), 20);
        assert_eq!(bank.weights.ncols(), 33);
        for band in 0..20 {
            let row_sum: f64 = (0..33).map(|bin| bank.weights[(band, bin)]).sum();
            assert_abs_diff_eq!(row_sum, 1.0, epsilon = 1e-12);
            assert!((0..33).all(|bin| bank.weights[(band, bin)] >= 0.0));
        }
    }

    #[test]
    fn centers_start_at_fmin_and_stay_below_fmax() {
        let bank = default_bank();
        assert_abs_diff_eq!(bank.center_freqs[0], 50.0, epsilon = 1e-9);
        assert!(*bank.center_freqs.last().unwrap() < 2000.0);
        // Slaney-style spacing puts the top center one ERB step under fmax.
        assert_abs_diff_eq!(*bank.center_freqs.last().unwrap(), 1779.986, epsilon = 0.01);
        for w in bank.center_freqs.windows(2) {
            assert!(w[1] > w[0]);
        }
        // Equidistance on the ERB-rate scale.
        let steps: Vec<f64> =
            bank.center_freqs.windows(2).map(|w| erb_rate(w[1]) - erb_rate(w[0])).collect();
        for s in &steps {
            assert_abs_diff_eq!(*s, steps[0], epsilon = 1e-9);
        }
    }

    #[test]
    fn ten_bands_at_or_below_500hz() {
        let bank = default_bank();
        assert_eq!(bank.low_band_count(500.0), 10);
        assert!(bank.center_freqs[9] <= 500.0);
        assert!(bank.center_freqs[10] > 500.0);
    }

    #[test]
    fn rejects_fmax_at_nyquist() {
        assert!(matches!(
            build_gammatone_bank(20, 50.0, 8000.0, 64, 16000),
            Err(GammatoneError::FmaxAboveNyquist { .. })
        ));
    }

    #[test]
    fn zero_signal_projects_to_zero() {
        let bank = default_bank();
        let x = Signal { samples: vec![0.0; 256], sample_rate: 16000 };
        let spec = stft(&x, 64, 32).unwrap();
        let g = gammatone_spectrogram(&spec, &bank).unwrap();
        assert!(g.iter().all(|v| v.norm() == 0.0));
    }

    #[test]
    fn projection_is_linear_in_input_scale() {
        let bank = default_bank();
        let x = crate::dsp::white_noise(256, 16000, 3);
        let x2 = Signal { samples: x.samples.iter().map(|v| 2.0 * v).collect(), sample_rate: 16000 };
        let g1 = gammatone_spectrogram(&stft(&x, 64, 32).unwrap(), &bank).unwrap();
        let g2 = gammatone_spectrogram(&stft(&x2, 64, 32).unwrap(), &bank).unwrap();
        for (a, b) in g1.iter().zip(g2.iter()) {
            assert_abs_diff_eq!(2.0 * a.norm(), b.norm(), epsilon = 1e-9 * (1.0 + b.norm()));
            if a.norm() > 1e-12 {
                assert_abs_diff_eq!(a.arg(), b.arg(), epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn tone_at_band_center_wins_its_band() {
        let bank = default_bank();
        // 1000 Hz sits exactly on STFT bin 4; the oracle band is the row with
        // the largest weight at that bin.
        let oracle_band = (0..20)
            .max_by(|&a, &b| bank.weights[(a, 4)].partial_cmp(&bank.weights[(b, 4)]).unwrap())
            .unwrap();
        let x = Signal {
            samples: (0..1024)
                .map(|n| (2.0 * std::f64::consts::PI * 1000.0 * n as f64 / 16000.0).sin())
                .collect(),
            sample_rate: 16000,
        };
        let g = gammatone_spectrogram(&stft(&x, 64, 32).unwrap(), &bank).unwrap();
        let frames = g.ncols();
        for frame in (2..frames - 2).step_by(3) {
            let measured = (0..20)
                .max_by(|&a, &b| {
                    g[(a, frame)].norm().partial_cmp(&g[(b, frame)].norm()).unwrap()
                })
                .unwrap();
            assert_eq!(measured, oracle_band, "frame {frame}");
        }
    }

    #[test]
    fn bin_count_mismatch_is_rejected() {
        let bank = default_bank();
        let x = Signal { samples: vec![0.1; 512], sample_rate: 16000 };
        let spec = stft(&x, 128, 64).unwrap();
        assert!(matches!(
            gammatone_spectrogram(&spec, &bank),
            Err(GammatoneError::BinCountMismatch { .. })
        ));
    }
}
