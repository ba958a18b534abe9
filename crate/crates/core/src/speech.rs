//! Synthetic dry "speech": filtered glottal pulse trains with moving
//! formants, syllabic gating and a low breath-noise floor. Stands in for an
//! anechoic speech corpus in desk-scale runs; any directory of dry mono WAVs
//! can be used instead.

use crate::dsp::Signal;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Two-pole resonator with unit-ish passband gain, used as a formant filter.
struct Resonator {
    b0: f64,
    a1: f64,
    a2: f64,
    z1: f64,
    z2: f64,
}

impl Resonator {
    fn new() -> Self {
        Self { b0: 0.0, a1: 0.0, a2: 0.0, z1: 0.0, z2: 0.0 }
    }

    fn retune(&mut self, freq: f64, bandwidth: f64, fs: f64) {
        let r = (-std::f64::consts::PI * bandwidth / fs).exp();
        let theta = 2.0 * std::f64::consts::PI * freq / fs;
        self.a1 = -2.0 * r * theta.cos();
        self.a2 = r * r;
        self.b0 = (1.0 - r) * (1.0 - r * theta.cos() * 2.0 + r * r).sqrt();
    }

    fn process(&mut self, x: f64) -> f64 {
        let y = self.b0 * x - self.a1 * self.z1 - self.a2 * self.z2;
        self.z2 = self.z1;
        self.z1 = y;
        y
    }
}

/// Generates `duration_s` seconds of synthetic voiced audio at `fs`.
pub fn synth_speech(duration_s: f64, fs: u32, seed: u64) -> Signal {
    let n = (duration_s * fs as f64) as usize;
    let fsf = fs as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // Speaker-level parameters.
    let f0_base: f64 = rng.gen_range(85.0..220.0);
    let vibrato_rate: f64 = rng.gen_range(4.0..6.5);

    // Vowel-like formant targets, re-drawn per syllable.
    let mut formants = [Resonator::new(), Resonator::new(), Resonator::new()];
    let draw_targets = |rng: &mut ChaCha8Rng| -> [f64; 3] {
        [
            rng.gen_range(300.0..850.0),
            rng.gen_range(900.0..2300.0),
            rng.gen_range(2400.0..3200.0),
        ]
    };
    let mut current = draw_targets(&mut rng);
    let mut target = draw_targets(&mut rng);

    // Syllable gating state machine.
    #[derive(PartialEq)]
    enum Gate {
        Voiced(usize),
        Pause(usize),
    }
    let mut gate = Gate::Voiced((rng.gen_range(0.12..0.28) * fsf) as usize);
    let mut gate_len = match gate {
        Gate::Voiced(len) | Gate::Pause(len) => len,
    };
    let mut gate_pos = 0usize;

    let mut phase = 0.0f64;
    let mut lp1 = 0.0f64;
    let mut lp2 = 0.0f64;
    let mut out = Vec::with_capacity(n);

    for i in 0..n {
        let t = i as f64 / fsf;
        if gate_pos >= gate_len {
            gate_pos = 0;
            gate = match gate {
                Gate::Voiced(_) => {
                    let len = (rng.gen_range(0.06..0.30) * fsf) as usize;
                    Gate::Pause(len)
                }
                Gate::Pause(_) => {
                    current = target;
                    target = draw_targets(&mut rng);
                    let len = (rng.gen_range(0.12..0.30) * fsf) as usize;
                    Gate::Voiced(len)
                }
            };
            gate_len = match gate {
                Gate::Voiced(len) | Gate::Pause(len) => len,
            };
        }
        let progress = gate_pos as f64 / gate_len as f64;
        gate_pos += 1;

        // Raised-cosine syllable envelope.
        let envelope = match gate {
            Gate::Voiced(_) => {
                let edge = 0.15;
                if progress < edge {
                    0.5 * (1.0 - (std::f64::consts::PI * (1.0 - progress / edge)).cos())
                } else if progress > 1.0 - edge {
                    0.5 * (1.0 - (std::f64::consts::PI * ((1.0 - progress) / edge)).cos())
                } else {
                    1.0
                }
            }
            Gate::Pause(_) => 0.0,
        };

        // Glottal pulse train with vibrato and jitter.
        let f0 = f0_base
            * (1.0 + 0.02 * (2.0 * std::f64::consts::PI * vibrato_rate * t).sin())
            * (1.0 + 0.06 * (2.0 * std::f64::consts::PI * 0.7 * t).sin());
        phase += f0 / fsf;
        let mut excitation = 0.0;
        if phase >= 1.0 {
            phase -= 1.0;
            excitation = 1.0 + 0.05 * rng.gen_range(-1.0..1.0);
        }
        // Spectral tilt: two leaky integrators approximate the glottal
        // -12 dB/oct rolloff.
        lp1 += 0.35 * (excitation - lp1);
        lp2 += 0.35 * (lp1 - lp2);

        // Interpolate formant tracks across the syllable.
        let blend = progress.min(1.0);
        let mut voiced = 0.0;
        for (fi, f) in formants.iter_mut().enumerate() {
            let freq = current[fi] * (1.0 - blend) + target[fi] * blend;
            let bw = 70.0 + 45.0 * fi as f64;
            f.retune(freq, bw, fsf);
            voiced += f.process(lp2) * (1.0 / (1.0 + fi as f64));
        }

        // Aspiration plus a faint breath floor so pauses are not digital zero.
        let hiss: f64 = StandardNormal.sample(&mut rng);
        let sample = envelope * (voiced + 0.01 * hiss) + 0.0015 * hiss;
        out.push(sample);
    }

    // Normalize to a fixed peak so every clip has a comparable level.
    let peak = out.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak > 0.0 {
        let g = 0.5 / peak;
        for v in out.iter_mut() {
            *v *= g;
        }
    }
    Signal { samples: out, sample_rate: fs }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_per_seed() {
        let a = synth_speech(1.0, 16000, 5);
        let b = synth_speech(1.0, 16000, 5);
        let c = synth_speech(1.0, 16000, 6);
        assert_eq!(a.samples, b.samples);
        assert_ne!(a.samples, c.samples);
    }

    #[test]
    fn has_energy_and_pauses() {
        let x = synth_speech(6.0, 16000, 7);
        assert_eq!(x.len(), 96000);
        assert!(x.rms() > 0.01, "rms {}", x.rms());
        assert!(x.samples.iter().all(|v| v.abs() <= 0.5 + 1e-12));
        // Frame-level activity should vary (voiced vs pause segments).
        let frame = 1600;
        let rms: Vec<f64> = x
            .samples
            .chunks(frame)
            .map(|c| (c.iter().map(|v| v * v).sum::<f64>() / c.len() as f64).sqrt())
            .collect();
        let max = rms.iter().cloned().fold(0.0f64, f64::max);
        let min = rms.iter().cloned().fold(f64::INFINITY, f64::min);
        assert!(min < 0.2 * max, "no quiet frames: min {min} max {max}");
        assert!(min > 0.0, "digital silence present");
    }
}
