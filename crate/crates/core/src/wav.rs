//! WAV read/write: PCM 16-bit and IEEE float32, mono.
//!
//! Multi-channel files are accepted on read; channel 0 is taken with a
//! warning. All pipeline caches are written as float32 mono.

use crate::dsp::Signal;
use hound::{SampleFormat, WavReader, WavSpec, WavWriter};
use std::path::Path;
use thiserror::Error;

#[derive(Error, Debug)]
pub enum WavError {
    #[error("wav i/o failed: {0}")]
    Hound(#[from] hound::Error),
    #[error("unsupported wav encoding: {bits} bit {format:?}")]
    UnsupportedFormat { bits: u16, format: SampleFormat },
    #[error("wav file has no samples: {0}")]
    Empty(String),
}

pub fn read_wav(path: &Path) -> Result<Signal, WavError> {
    let mut reader = WavReader::open(path)?;
    let spec = reader.spec();
    let channels = spec.channels as usize;
    if channels > 1 {
        log::warn!(
            "{}: {} channels, taking channel 0",
            path.display(),
            channels
        );
    }
    let samples: Vec<f64> = match (spec.sample_format, spec.bits_per_sample) {
        (SampleFormat::Int, 16) => reader
            .samples::<i16>()
            .step_by(channels)
            .map(|s| s.map(|v| v as f64 / 32768.0))
            .collect::<Result<_, _>>()?,
        (SampleFormat::Float, 32) => reader
            .samples::<f32>()
            .step_by(channels)
            .map(|s| s.map(|v| v as f64))
            .collect::<Result<_, _>>()?,
        (format, bits) => return Err(WavError::UnsupportedFormat { bits, format }),
    };
    if samples.is_empty() {
        return Err(WavError::Empty(path.display().to_string()));
    }
    Ok(Signal { samples, sample_rate: spec.sample_rate })
}

/// Writes a mono IEEE float32 WAV.
pub fn write_wav_f32(path: &Path, signal: &Signal) -> Result<(), WavError> {
    let spec = WavSpec {
        channels: 1,
        sample_rate: signal.sample_rate,
        bits_per_sample: 32,
        sample_format: SampleFormat::Float,
    };
    let mut writer = WavWriter::create(path, spec)?;
    for &s in &signal.samples {
        writer.write_sample(s as f32)?;
    }
    writer.finalize()?;
    Ok(())
}

/// Writes a mono PCM 16-bit WAV, clipping to full scale.
pub fn write_wav_i16(path: &Path, signal: &Signal) -> Result<(), WavError> {
    let spec = WavSpec {
        channels: 1,
        sample_rate: signal.sample_rate,
        bits_per_sample: 16,
        sample_format: SampleFormat::Int,
    };
    let mut writer = WavWriter::create(path, spec)?;
    for &s in &signal.samples {
        let v = (s * 32768.0).clamp(-32768.0, 32767.0) as i16;
        writer.write_sample(v)?;
    }
    writer.finalize()?;
    Ok(())
}
