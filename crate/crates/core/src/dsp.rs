//! Deterministic signal primitives: STFT, convolution, resampling, noise and
//! SNR-controlled mixing.
//!
//! Everything here is a pure function of its inputs. Signals are immutable
//! after construction, so batch callers can parallelize freely.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;
use thiserror::Error;

#[derive(Error, Debug)]
pub enum DspError {
    #[error("signal of {len} samples is shorter than one window ({window})")]
    SignalTooShort { len: usize, window: usize },
    #[error("sample rate mismatch: {a} Hz vs {b} Hz")]
    SampleRateMismatch { a: u32, b: u32 },
    #[error("sample rate must be positive")]
    InvalidSampleRate,
    #[error("window size must be even and nonzero, got {0}")]
    InvalidWindow(usize),
    #[error("hop size must be >= 1")]
    InvalidHop,
    #[error("signal contains non-finite samples")]
    NonFiniteSamples,
    #[error("empty signal")]
    EmptySignal,
    #[error("zero-energy noise cannot be scaled to a finite SNR")]
    ZeroEnergyNoise,
    #[error("zero-energy speech has no defined SNR")]
    ZeroEnergySpeech,
}

/// A mono signal with its sample rate.
#[derive(Debug, Clone, PartialEq)]
pub struct Signal {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl Signal {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self, DspError> {
        if sample_rate == 0 {
            return Err(DspError::InvalidSampleRate);
        }
        if samples.iter().any(|s| !s.is_finite()) {
            return Err(DspError::NonFiniteSamples);
        }
        Ok(Self { samples, sample_rate })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    /// Mean power (mean of squared samples).
    pub fn power(&self) -> f64 {
        if self.samples.is_empty() {
            return 0.0;
        }
        self.samples.iter().map(|s| s * s).sum::<f64>() / self.samples.len() as f64
    }

    pub fn rms(&self) -> f64 {
        self.power().sqrt()
    }
}

/// One-sided complex STFT.
#[derive(Debug, Clone)]
pub struct ComplexSpectrogram {
    /// bins x frames, row-major by bin.
    pub values: Vec<Complex64>,
    pub bins: usize,
    pub frames: usize,
    pub bin_hz: f64,
    pub hop: usize,
    pub window_size: usize,
}

impl ComplexSpectrogram {
    pub fn at(&self, bin: usize, frame: usize) -> Complex64 {
        self.values[bin * self.frames + frame]
    }
}

/// Periodic Hann window of length `n`.
pub fn hann_window(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 * (1.0 - (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos()))
        .collect()
}

/// Frame count for a no-padding STFT: floor((len - window)/hop) + 1.
pub fn stft_frame_count(len: usize, window_size: usize, hop: usize) -> usize {
    (len - window_size) / hop + 1
}

/// Hann-windowed one-sided STFT. Frames start at sample 0, no padding.
pub fn stft(x: &Signal, window_size: usize, hop: usize) -> Result<ComplexSpectrogram, DspError> {
    if window_size == 0 || window_size % 2 != 0 {
        return Err(DspError::InvalidWindow(window_size));
    }
    if hop == 0 {
        return Err(DspError::InvalidHop);
    }
    if x.len() < window_size {
        return Err(DspError::SignalTooShort { len: x.len(), window: window_size });
    }
    let window = hann_window(window_size);
    let frames = stft_frame_count(x.len(), window_size, hop);
    let bins = window_size / 2 + 1;

    let mut planner = FftPlanner::<f64>::new();
    let fft = planner.plan_fft_forward(window_size);
    let mut buf = vec![Complex64::new(0.0, 0.0); window_size];
    let mut values = vec![Complex64::new(0.0, 0.0); bins * frames];

    for frame in 0..frames {
        let start = frame * hop;
        for (i, w) in window.iter().enumerate() {
            buf[i] = Complex64::new(x.samples[start + i] * w, 0.0);
        }
        fft.process(&mut buf);
        for bin in 0..bins {
            values[bin * frames + frame] = buf[bin];
        }
    }

    Ok(ComplexSpectrogram {
        values,
        bins,
        frames,
        bin_hz: x.sample_rate as f64 / window_size as f64,
        hop,
        window_size,
    })
}

fn next_pow2(n: usize) -> usize {
    let mut p = 1;
    while p < n {
        p <<= 1;
    }
    p
}

/// Full linear convolution via FFT, length `len(x) + len(h) - 1`.
pub fn convolve_samples(x: &[f64], h: &[f64]) -> Vec<f64> {
    if x.is_empty() || h.is_empty() {
        return Vec::new();
    }
    let out_len = x.len() + h.len() - 1;
    // Direct sum for tiny inputs; FFT otherwise.
    if x.len().min(h.len()) <= 32 {
        let mut out = vec![0.0; out_len];
        for (i, &xi) in x.iter().enumerate() {
            for (j, &hj) in h.iter().enumerate() {
                out[i + j] += xi * hj;
            }
        }
        return out;
    }
    let n = next_pow2(out_len);
    let mut planner = FftPlanner::<f64>::new();
    let fft = planner.plan_fft_forward(n);
    let ifft = planner.plan_fft_inverse(n);

    let mut a = vec![Complex64::new(0.0, 0.0); n];
    let mut b = vec![Complex64::new(0.0, 0.0); n];
    for (i, &v) in x.iter().enumerate() {
        a[i].re = v;
    }
    for (i, &v) in h.iter().enumerate() {
        b[i].re = v;
    }
    fft.process(&mut a);
    fft.process(&mut b);
    for i in 0..n {
        a[i] *= b[i];
    }
    ifft.process(&mut a);
    let scale = 1.0 / n as f64;
    a.iter().take(out_len).map(|c| c.re * scale).collect()
}

/// Convolves a signal with an impulse response at matching sample rates.
pub fn convolve(x: &Signal, h: &Signal) -> Result<Signal, DspError> {
    if x.sample_rate != h.sample_rate {
        return Err(DspError::SampleRateMismatch { a: x.sample_rate, b: h.sample_rate });
    }
    if x.is_empty() || h.is_empty() {
        return Err(DspError::EmptySignal);
    }
    Ok(Signal {
        samples: convolve_samples(&x.samples, &h.samples),
        sample_rate: x.sample_rate,
    })
}

/// Zeroth-order modified Bessel function of the first kind (series form).
fn bessel_i0(x: f64) -> f64 {
    let mut sum = 1.0;
    let mut term = 1.0;
    let half_sq = x * x / 4.0;
    for k in 1..64 {
        term *= half_sq / ((k * k) as f64);
        sum += term;
        if term < sum * 1e-16 {
            break;
        }
    }
    sum
}

fn sinc(x: f64) -> f64 {
    if x.abs() < 1e-12 {
        1.0
    } else {
        let px = std::f64::consts::PI * x;
        px.sin() / px
    }
}

// Kaiser beta for ~70 dB stopband; comfortably past the 60 dB contract.
const RESAMPLE_KAISER_BETA: f64 = 7.0;
const RESAMPLE_ZERO_CROSSINGS: f64 = 32.0;

/// Band-limited resampling with a Kaiser-windowed sinc kernel.
///
/// Output length is round(len * target/source); content above the output
/// Nyquist is attenuated by at least 60 dB.
pub fn resample(x: &Signal, target_rate: u32) -> Result<Signal, DspError> {
    if target_rate == 0 {
        return Err(DspError::InvalidSampleRate);
    }
    if x.sample_rate == target_rate {
        return Ok(x.clone());
    }
    if x.is_empty() {
        return Err(DspError::EmptySignal);
    }
    let ratio = target_rate as f64 / x.sample_rate as f64;
    let out_len = (x.len() as f64 * ratio).round() as usize;
    // Cutoff in cycles per input sample; half the smaller of the two rates.
    let fc = 0.5 * ratio.min(1.0);
    let half_width = RESAMPLE_ZERO_CROSSINGS / (2.0 * fc);
    let i0_beta = bessel_i0(RESAMPLE_KAISER_BETA);

    let mut out = Vec::with_capacity(out_len);
    for n in 0..out_len {
        let t = n as f64 / ratio;
        let k_lo = ((t - half_width).ceil() as i64).max(0);
        let k_hi = ((t + half_width).floor() as i64).min(x.len() as i64 - 1);
        let mut acc = 0.0;
        for k in k_lo..=k_hi {
            let u = t - k as f64;
            let frac = u / half_width;
            let win = bessel_i0(RESAMPLE_KAISER_BETA * (1.0 - frac * frac).max(0.0).sqrt()) / i0_beta;
            acc += x.samples[k as usize] * 2.0 * fc * sinc(2.0 * fc * u) * win;
        }
        out.push(acc);
    }
    Ok(Signal { samples: out, sample_rate: target_rate })
}

/// Requested SNR for mixing: a finite level in dB, or no noise at all.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Snr {
    Inf,
    Db(f64),
}

impl Snr {
    pub fn is_finite(&self) -> bool {
        matches!(self, Snr::Db(_))
    }
}

impl std::fmt::Display for Snr {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Snr::Inf => write!(f, "inf"),
            Snr::Db(v) => write!(f, "{v}"),
        }
    }
}

// JSON has no Infinity literal, so Inf serializes as the string "inf" and
// finite levels as plain numbers.
impl serde::Serialize for Snr {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        match self {
            Snr::Inf => serializer.serialize_str("inf"),
            Snr::Db(v) => serializer.serialize_f64(*v),
        }
    }
}

impl<'de> serde::Deserialize<'de> for Snr {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        struct SnrVisitor;
        impl serde::de::Visitor<'_> for SnrVisitor {
            type Value = Snr;

            fn expecting(&self, f: &mut std::fmt::Formatter) -> std::fmt::Result {
                f.write_str("a number of dB or the string \"inf\"")
            }

            fn visit_f64<E: serde::de::Error>(self, v: f64) -> Result<Snr, E> {
                Ok(Snr::Db(v))
            }

            fn visit_i64<E: serde::de::Error>(self, v: i64) -> Result<Snr, E> {
                Ok(Snr::Db(v as f64))
            }

            fn visit_u64<E: serde::de::Error>(self, v: u64) -> Result<Snr, E> {
                Ok(Snr::Db(v as f64))
            }

            fn visit_str<E: serde::de::Error>(self, v: &str) -> Result<Snr, E> {
                match v {
                    "inf" | "+inf" | "Inf" => Ok(Snr::Inf),
                    other => other
                        .parse::<f64>()
                        .map(Snr::Db)
                        .map_err(|_| E::custom(format!("bad SNR '{other}'"))),
                }
            }
        }
        deserializer.deserialize_any(SnrVisitor)
    }
}

/// Scales `noise` so that 10*log10(P_speech/P_noise) equals `snr_db` over the
/// full segment, then adds it to `speech`. `Snr::Inf` returns the speech
/// bit-identically.
pub fn mix_at_snr(speech: &Signal, noise: &Signal, snr_db: Snr) -> Result<Signal, DspError> {
    let target = match snr_db {
        Snr::Inf => return Ok(speech.clone()),
        Snr::Db(v) => v,
    };
    if speech.sample_rate != noise.sample_rate {
        return Err(DspError::SampleRateMismatch { a: speech.sample_rate, b: noise.sample_rate });
    }
    if speech.len() != noise.len() {
        return Err(DspError::SignalTooShort { len: noise.len(), window: speech.len() });
    }
    let p_speech = speech.power();
    let p_noise = noise.power();
    if p_speech <= 0.0 {
        return Err(DspError::ZeroEnergySpeech);
    }
    if p_noise <= 0.0 {
        return Err(DspError::ZeroEnergyNoise);
    }
    let gain = (p_speech / (p_noise * 10f64.powf(target / 10.0))).sqrt();
    let samples = speech
        .samples
        .iter()
        .zip(noise.samples.iter())
        .map(|(s, n)| s + gain * n)
        .collect();
    Ok(Signal { samples, sample_rate: speech.sample_rate })
}

/// Zero-mean unit-variance Gaussian noise, deterministic per seed.
pub fn white_noise(length: usize, sample_rate: u32, seed: u64) -> Signal {
    assert!(length > 0, "noise length must be positive");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let samples = (0..length).map(|_| StandardNormal.sample(&mut rng)).collect();
    Signal { samples, sample_rate }
}
