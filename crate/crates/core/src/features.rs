//! Feature planes fed to the CNN: Gammatone log-magnitude plus the
//! phase-domain planes (phase, wrapped phase derivatives, phase continuity),
//! stacked into a fixed-size tensor per 4-second clip.

use ndarray::{s, Array2};
use rustfft::num_complex::Complex64;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::io::{Read, Write};
use std::path::Path;
use thiserror::Error;

use crate::dsp::{stft, Signal};
use crate::gammatone::{build_gammatone_bank, gammatone_spectrogram, GammatoneBank, GammatoneError};

pub const SAMPLE_RATE: u32 = 16000;
pub const CLIP_SAMPLES: usize = 64000;
pub const STFT_WINDOW: usize = 64;
pub const STFT_HOP: usize = 32;
pub const N_BANDS: usize = 20;
pub const FMIN_HZ: f64 = 50.0;
pub const FMAX_HZ: f64 = 2000.0;
/// Phase planes keep only bands centered at or below this frequency.
pub const LOW_BAND_HZ: f64 = 500.0;
/// Fixed frame count of every feature tensor; trailing frames are trimmed.
pub const TARGET_FRAMES: usize = 1997;

const FEATURE_MAGIC: &[u8; 4] = b"RFP1";
const LOG_MAG_FLOOR: f64 = 1e-10;

#[derive(Error, Debug)]
pub enum FeatureError {
    #[error("expected {CLIP_SAMPLES} samples at {SAMPLE_RATE} Hz, got {len} at {rate} Hz")]
    WrongClipShape { len: usize, rate: u32 },
    #[error("axis needs at least 2 elements, found {0}")]
    AxisTooShort(usize),
    #[error(transparent)]
    Gammatone(#[from] GammatoneError),
    #[error(transparent)]
    Dsp(#[from] crate::dsp::DspError),
    #[error("feature file i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad feature file {path}: {reason}")]
    BadFile { path: String, reason: String },
    #[error("missing statistics for plane kind {0:?}")]
    MissingStats(PlaneKind),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlaneKind {
    LogMag,
    Phase,
    DPhaseTime,
    DPhaseFreq,
    Continuity,
}

impl PlaneKind {
    pub fn tag(self) -> u32 {
        match self {
            PlaneKind::LogMag => 0,
            PlaneKind::Phase => 1,
            PlaneKind::DPhaseTime => 2,
            PlaneKind::DPhaseFreq => 3,
            PlaneKind::Continuity => 4,
        }
    }

    pub fn from_tag(tag: u32) -> Option<Self> {
        match tag {
            0 => Some(PlaneKind::LogMag),
            1 => Some(PlaneKind::Phase),
            2 => Some(PlaneKind::DPhaseTime),
            3 => Some(PlaneKind::DPhaseFreq),
            4 => Some(PlaneKind::Continuity),
            _ => None,
        }
    }
}

/// Feature recipes from the experiment matrix: log-magnitude only, plus
/// low-band phase and its time derivative, plus low-band phase continuity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Recipe {
    Baseline,
    PlusPhase,
    PlusContinuity,
}

impl Recipe {
    pub fn name(self) -> &'static str {
        match self {
            Recipe::Baseline => "baseline",
            Recipe::PlusPhase => "plus-phase",
            Recipe::PlusContinuity => "plus-continuity",
        }
    }
}

impl std::str::FromStr for Recipe {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "baseline" => Ok(Recipe::Baseline),
            "plus-phase" | "plusphase" | "phase" => Ok(Recipe::PlusPhase),
            "plus-continuity" | "pluscontinuity" | "continuity" => Ok(Recipe::PlusContinuity),
            other => Err(format!("unknown recipe '{other}'")),
        }
    }
}

impl std::fmt::Display for Recipe {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChannelDesc {
    pub kind: PlaneKind,
    pub bands: usize,
}

/// Stacked feature planes: `values` is (sum of plane band counts) x frames,
/// planes stored consecutively in `channels` order.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTensor {
    pub channels: Vec<ChannelDesc>,
    pub frames: usize,
    pub values: Array2<f64>,
}

impl FeatureTensor {
    pub fn total_rows(&self) -> usize {
        self.channels.iter().map(|c| c.bands).sum()
    }

    /// Row range occupied by channel `idx`.
    pub fn channel_rows(&self, idx: usize) -> std::ops::Range<usize> {
        let start: usize = self.channels[..idx].iter().map(|c| c.bands).sum();
        start..start + self.channels[idx].bands
    }
}

/// Wraps into the principal interval (-pi, pi].
pub fn wrap_phase(d: f64) -> f64 {
    PI - (PI - d).rem_euclid(2.0 * PI)
}

/// 20*log10(|v| + 1e-10).
pub fn log_magnitude(gspec: &Array2<Complex64>) -> Array2<f64> {
    gspec.mapv(|v| 20.0 * (v.norm() + LOG_MAG_FLOOR).log10())
}

/// Principal-value phase in (-pi, pi]; exact zero maps to phase 0.
pub fn phase_plane(gspec: &Array2<Complex64>) -> Array2<f64> {
    gspec.mapv(|v| {
        let theta = v.arg();
        if theta == -PI {
            PI
        } else {
            theta
        }
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DerivativeAxis {
    Time,
    Frequency,
}

/// First-order wrapped phase difference along an axis, last element
/// replicated so the shape is preserved.
pub fn phase_derivative(
    phase: &Array2<f64>,
    axis: DerivativeAxis,
) -> Result<Array2<f64>, FeatureError> {
    let (bands, frames) = phase.dim();
    let mut out = Array2::zeros((bands, frames));
    match axis {
        DerivativeAxis::Time => {
            if frames < 2 {
                return Err(FeatureError::AxisTooShort(frames));
            }
            for b in 0..bands {
                for t in 0..frames - 1 {
                    out[(b, t)] = wrap_phase(phase[(b, t + 1)] - phase[(b, t)]);
                }
                out[(b, frames - 1)] = out[(b, frames - 2)];
            }
        }
        DerivativeAxis::Frequency => {
            if bands < 2 {
                return Err(FeatureError::AxisTooShort(bands));
            }
            for t in 0..frames {
                for b in 0..bands - 1 {
                    out[(b, t)] = wrap_phase(phase[(b + 1, t)] - phase[(b, t)]);
                }
                out[(bands - 1, t)] = out[(bands - 2, t)];
            }
        }
    }
    Ok(out)
}

fn continuity_f(theta: f64) -> f64 {
    theta.cos() + theta.sin()
}

/// Phase continuity: the joint second-degree difference of the phase along
/// frequency and time, realized as a single diagonal (k+1, n+1) difference
///
///   (f(theta[k][n]) - f(theta[k+1][n+1])) / wrap(theta[k][n] - theta[k+1][n+1])
///
/// with f(theta) = cos(theta) + sin(theta). Denominators below 1e-6 take the
/// analytic limit f'(theta) = -sin(theta) + cos(theta). Edges are replicated.
pub fn phase_continuity(phase: &Array2<f64>) -> Result<Array2<f64>, FeatureError> {
    let (bands, frames) = phase.dim();
    if bands < 2 {
        return Err(FeatureError::AxisTooShort(bands));
    }
    if frames < 2 {
        return Err(FeatureError::AxisTooShort(frames));
    }
    let mut out = Array2::zeros((bands, frames));
    for k in 0..bands - 1 {
        for n in 0..frames - 1 {
            let theta = phase[(k, n)];
            let denom = wrap_phase(theta - phase[(k + 1, n + 1)]);
            out[(k, n)] = if denom.abs() < 1e-6 {
                -theta.sin() + theta.cos()
            } else {
                (continuity_f(theta) - continuity_f(phase[(k + 1, n + 1)])) / denom
            };
        }
    }
    for k in 0..bands - 1 {
        out[(k, frames - 1)] = out[(k, frames - 2)];
    }
    for n in 0..frames {
        out[(bands - 1, n)] = out[(bands - 2, n)];
    }
    Ok(out)
}

/// Trims (or edge-pads) columns so the plane has exactly `frames` columns.
fn fit_frames(plane: Array2<f64>, frames: usize) -> Array2<f64> {
    let (bands, have) = plane.dim();
    if have == frames {
        return plane;
    }
    if have > frames {
        return plane.slice(s![.., ..frames]).to_owned();
    }
    let mut out = Array2::zeros((bands, frames));
    out.slice_mut(s![.., ..have]).assign(&plane);
    for t in have..frames {
        for b in 0..bands {
            out[(b, t)] = plane[(b, have - 1)];
        }
    }
    out
}

pub fn default_bank() -> GammatoneBank {
    build_gammatone_bank(N_BANDS, FMIN_HZ, FMAX_HZ, STFT_WINDOW, SAMPLE_RATE)
        .expect("default bank parameters are valid")
}

/// Computes the stacked (unstandardized) feature tensor for a 4 s clip.
pub fn assemble_features(
    signal: &Signal,
    recipe: Recipe,
    bank: &GammatoneBank,
) -> Result<FeatureTensor, FeatureError> {
    if signal.len() != CLIP_SAMPLES || signal.sample_rate != SAMPLE_RATE {
        return Err(FeatureError::WrongClipShape { len: signal.len(), rate: signal.sample_rate });
    }
    let spec = stft(signal, STFT_WINDOW, STFT_HOP)?;
    let gspec = gammatone_spectrogram(&spec, bank)?;
    let n_low = bank.low_band_count(LOW_BAND_HZ);

    let mut planes: Vec<(PlaneKind, Array2<f64>)> =
        vec![(PlaneKind::LogMag, log_magnitude(&gspec))];
    if recipe != Recipe::Baseline {
        let phase = phase_plane(&gspec);
        let dphase_t = phase_derivative(&phase, DerivativeAxis::Time)?;
        planes.push((PlaneKind::Phase, phase.slice(s![..n_low, ..]).to_owned()));
        planes.push((PlaneKind::DPhaseTime, dphase_t.slice(s![..n_low, ..]).to_owned()));
        if recipe == Recipe::PlusContinuity {
            let continuity = phase_continuity(&phase)?;
            planes.push((PlaneKind::Continuity, continuity.slice(s![..n_low, ..]).to_owned()));
        }
    }

    let mut channels = Vec::with_capacity(planes.len());
    let mut rows = Vec::with_capacity(planes.len());
    for (kind, plane) in planes {
        let plane = fit_frames(plane, TARGET_FRAMES);
        channels.push(ChannelDesc { kind, bands: plane.nrows() });
        rows.push(plane);
    }
    let total_rows: usize = channels.iter().map(|c| c.bands).sum();
    let mut values = Array2::zeros((total_rows, TARGET_FRAMES));
    let mut offset = 0;
    for plane in rows {
        let n = plane.nrows();
        values.slice_mut(s![offset..offset + n, ..]).assign(&plane);
        offset += n;
    }

    Ok(FeatureTensor { channels, frames: TARGET_FRAMES, values })
}

/// Per-plane-kind standardization constants estimated on the training split.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Default)]
pub struct FeatureStats {
    pub per_kind: BTreeMap<PlaneKind, PlaneStats>,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct PlaneStats {
    pub mean: f64,
    pub std: f64,
}

/// Streaming accumulator for [`FeatureStats`].
#[derive(Debug, Default, Clone)]
pub struct StatsAccumulator {
    acc: BTreeMap<PlaneKind, (f64, f64, u64)>,
}

impl StatsAccumulator {
    pub fn add(&mut self, tensor: &FeatureTensor) {
        for (idx, ch) in tensor.channels.iter().enumerate() {
            let rows = tensor.channel_rows(idx);
            let entry = self.acc.entry(ch.kind).or_insert((0.0, 0.0, 0));
            for v in tensor.values.slice(s![rows, ..]).iter() {
                entry.0 += v;
                entry.1 += v * v;
                entry.2 += 1;
            }
        }
    }

    pub fn finish(self) -> FeatureStats {
        let per_kind = self
            .acc
            .into_iter()
            .map(|(kind, (sum, sumsq, n))| {
                let n = n as f64;
                let mean = sum / n;
                let var = (sumsq / n - mean * mean).max(0.0);
                // Constant planes standardize to zero rather than dividing by 0.
                let std = if var > 1e-24 { var.sqrt() } else { 1.0 };
                (kind, PlaneStats { mean, std })
            })
            .collect();
        FeatureStats { per_kind }
    }
}

impl FeatureStats {
    /// (x - mean) / std per plane, in place.
    pub fn standardize(&self, tensor: &mut FeatureTensor) -> Result<(), FeatureError> {
        for (idx, ch) in tensor.channels.clone().iter().enumerate() {
            let stats =
                self.per_kind.get(&ch.kind).ok_or(FeatureError::MissingStats(ch.kind))?;
            let rows = tensor.channel_rows(idx);
            tensor
                .values
                .slice_mut(s![rows, ..])
                .mapv_inplace(|v| (v - stats.mean) / stats.std);
        }
        Ok(())
    }
}

fn write_u32<W: Write>(w: &mut W, v: u32) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn read_u32<R: Read>(r: &mut R) -> std::io::Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

/// Writes the feature file format: magic "RFP1", u32 channel count, per
/// channel (u32 kind tag, u32 band count), u32 frames, then float32 LE
/// planes in row-major order.
pub fn write_feature_file(path: &Path, tensor: &FeatureTensor) -> Result<(), FeatureError> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    w.write_all(FEATURE_MAGIC)?;
    write_u32(&mut w, tensor.channels.len() as u32)?;
    for ch in &tensor.channels {
        write_u32(&mut w, ch.kind.tag())?;
        write_u32(&mut w, ch.bands as u32)?;
    }
    write_u32(&mut w, tensor.frames as u32)?;
    for v in tensor.values.iter() {
        w.write_all(&(*v as f32).to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

fn bad_file(path: &Path, reason: impl Into<String>) -> FeatureError {
    FeatureError::BadFile { path: path.display().to_string(), reason: reason.into() }
}

/// Reads a feature file back; values are float32 widened to f64.
pub fn read_feature_file(path: &Path) -> Result<FeatureTensor, FeatureError> {
    let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != FEATURE_MAGIC {
        return Err(bad_file(path, "bad magic"));
    }
    let n_channels = read_u32(&mut r)? as usize;
    if n_channels == 0 || n_channels > 16 {
        return Err(bad_file(path, format!("implausible channel count {n_channels}")));
    }
    let mut channels = Vec::with_capacity(n_channels);
    for _ in 0..n_channels {
        let tag = read_u32(&mut r)?;
        let kind = PlaneKind::from_tag(tag)
            .ok_or_else(|| bad_file(path, format!("unknown plane tag {tag}")))?;
        let bands = read_u32(&mut r)? as usize;
        channels.push(ChannelDesc { kind, bands });
    }
    let frames = read_u32(&mut r)? as usize;
    let total_rows: usize = channels.iter().map(|c| c.bands).sum();
    let mut buf = vec![0u8; total_rows * frames * 4];
    r.read_exact(&mut buf).map_err(|_| bad_file(path, "truncated payload"))?;
    let mut extra = [0u8; 1];
    if r.read(&mut extra)? != 0 {
        return Err(bad_file(path, "trailing bytes"));
    }
    let values = Array2::from_shape_vec(
        (total_rows, frames),
        buf.chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect(),
    )
    .map_err(|e| bad_file(path, e.to_string()))?;
    Ok(FeatureTensor { channels, frames, values })
}

/// Checks that an existing feature file has the expected header layout and
/// payload size, without reading the payload. Used for resumable runs.
pub fn feature_file_matches(path: &Path, channels: &[ChannelDesc], frames: usize) -> bool {
    let Ok(file) = std::fs::File::open(path) else { return false };
    let expected_payload: usize = channels.iter().map(|c| c.bands).sum::<usize>() * frames * 4;
    let header_len = 4 + 4 + channels.len() * 8 + 4;
    let Ok(meta) = file.metadata() else { return false };
    if meta.len() != (header_len + expected_payload) as u64 {
        return false;
    }
    let mut r = std::io::BufReader::new(file);
    let mut magic = [0u8; 4];
    if r.read_exact(&mut magic).is_err() || &magic != FEATURE_MAGIC {
        return false;
    }
    let Ok(n) = read_u32(&mut r) else { return false };
    if n as usize != channels.len() {
        return false;
    }
    for ch in channels {
        match (read_u32(&mut r), read_u32(&mut r)) {
            (Ok(tag), Ok(bands)) if tag == ch.kind.tag() && bands as usize == ch.bands => {}
            _ => return false,
        }
    }
    matches!(read_u32(&mut r), Ok(f) if f as usize == frames)
}

/// Channel layout a recipe produces with the given bank.
pub fn recipe_channels(recipe: Recipe, bank: &GammatoneBank) -> Vec<ChannelDesc> {
    let n_low = bank.low_band_count(LOW_BAND_HZ);
    let mut channels = vec![ChannelDesc { kind: PlaneKind::LogMag, bands: bank.n_bands }];
    if recipe != Recipe::Baseline {
        channels.push(ChannelDesc { kind: PlaneKind::Phase, bands: n_low });
        channels.push(ChannelDesc { kind: PlaneKind::DPhaseTime, bands: n_low });
    }
    if recipe == Recipe::PlusContinuity {
        channels.push(ChannelDesc { kind: PlaneKind::Continuity, bands: n_low });
    }
    channels
}
