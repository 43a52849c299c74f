//! Speech-like source synthesis: a glottal pulse train and fricative noise
//! shaped by formant resonators, gated into syllables.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

/// Vowel formant frequencies (Hz) for an adult reference vocal tract.
const VOWELS: [[f64; 3]; 6] = [
    [730.0, 1090.0, 2440.0],
    [270.0, 2290.0, 3010.0],
    [300.0, 870.0, 2240.0],
    [530.0, 1840.0, 2480.0],
    [570.0, 840.0, 2410.0],
    [660.0, 1720.0, 2410.0],
];
const FORMANT_BANDWIDTHS: [f64; 3] = [90.0, 110.0, 140.0];

/// Target RMS of a synthesized utterance.
pub const UTTERANCE_RMS: f64 = 0.05;

/// Voice characteristics held fixed across one utterance.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Voice {
    /// Mean fundamental frequency in Hz.
    pub pitch_hz: f64,
    /// Multiplier on the reference formant frequencies.
    pub formant_scale: f64,
}

impl Voice {
    pub fn random<R: Rng>(rng: &mut R) -> Self {
        Self {
            pitch_hz: rng.gen_range(90.0..300.0),
            formant_scale: rng.gen_range(0.85..1.2),
        }
    }
}

/// Two-pole resonator with unity gain at DC scaled by `1 - r`.
#[derive(Default)]
struct Resonator {
    a0: f64,
    b1: f64,
    b2: f64,
    y1: f64,
    y2: f64,
}

impl Resonator {
    fn tune(&mut self, freq: f64, bandwidth: f64, sample_rate: f64) {
        let r = (-PI * bandwidth / sample_rate).exp();
        let theta = 2.0 * PI * freq.min(0.45 * sample_rate) / sample_rate;
        self.b1 = 2.0 * r * theta.cos();
        self.b2 = -r * r;
        self.a0 = 1.0 - r;
    }

    fn step(&mut self, x: f64) -> f64 {
        let y = self.a0 * x + self.b1 * self.y1 + self.b2 * self.y2;
        self.y2 = self.y1;
        self.y1 = y;
        y
    }
}

/// Synthesizes one utterance of `len` samples.
pub fn utterance<R: Rng>(voice: &Voice, len: usize, sample_rate: u32, rng: &mut R) -> Vec<f64> {
    let fs = sample_rate as f64;
    let mut out = vec![0.0; len];
    let mut formants: [Resonator; 3] = Default::default();
    let mut fricative = Resonator::default();
    let mut tilt = 0.0;
    let mut phase = 0.0;
    let vibrato_hz = rng.gen_range(3.0..6.0);

    let mut pos = rng.gen_range(0..(0.05 * fs) as usize);
    while pos < len {
        let syllable = rng.gen_range((0.12 * fs) as usize..(0.3 * fs) as usize);
        let gap = rng.gen_range((0.03 * fs) as usize..(0.15 * fs) as usize);
        let vowel = VOWELS[rng.gen_range(0..VOWELS.len())];
        for (res, (f, bw)) in formants.iter_mut().zip(vowel.iter().zip(FORMANT_BANDWIDTHS)) {
            res.tune(f * voice.formant_scale, bw, fs);
        }
        let inflection = rng.gen_range(0.9..1.1);

        // Optional fricative onset.
        let mut start = pos;
        if rng.gen_bool(0.3) {
            let frication = rng.gen_range((0.04 * fs) as usize..(0.09 * fs) as usize);
            fricative.tune(rng.gen_range(3500.0..6000.0), 1200.0, fs);
            for i in start..(start + frication).min(len) {
                let n: f64 = StandardNormal.sample(rng);
                let env = (PI * (i - start) as f64 / frication as f64).sin();
                out[i] += 0.35 * env * fricative.step(n);
            }
            start += frication;
        }

        for i in start..(start + syllable).min(len) {
            let t = i as f64 / fs;
            let f0 = voice.pitch_hz * inflection * (1.0 + 0.03 * (2.0 * PI * vibrato_hz * t).sin());
            phase += f0 / fs;
            let pulse = if phase >= 1.0 {
                phase -= 1.0;
                1.0
            } else {
                0.0
            };
            // Spectral tilt of the glottal source.
            tilt = 0.9 * tilt + pulse;
            let mut y = 0.0;
            for res in formants.iter_mut() {
                y += res.step(tilt);
            }
            let progress = (i - start) as f64 / syllable as f64;
            out[i] += y * (PI * progress).sin().powf(0.6);
        }
        pos = start + syllable + gap;
    }

    let rms = (out.iter().map(|x| x * x).sum::<f64>() / len.max(1) as f64).sqrt();
    if rms > 0.0 {
        for x in &mut out {
            *x *= UTTERANCE_RMS / rms;
        }
    }
    out
}

/// Additive noise colour.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseKind {
    #[default]
    White,
    Pink,
}

pub fn noise<R: Rng>(kind: NoiseKind, len: usize, rng: &mut R) -> Vec<f64> {
    let mut white = (0..len).map(|_| StandardNormal.sample(&mut *rng));
    match kind {
        NoiseKind::White => white.collect(),
        NoiseKind::Pink => {
            // Paul Kellet's economy pink filter.
            let (mut b0, mut b1, mut b2) = (0.0, 0.0, 0.0);
            white
                .by_ref()
                .map(|w: f64| {
                    b0 = 0.99765 * b0 + w * 0.0990460;
                    b1 = 0.96300 * b1 + w * 0.2965164;
                    b2 = 0.57000 * b2 + w * 1.0526913;
                    b0 + b1 + b2 + w * 0.1848
                })
                .collect()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn utterance_is_normalized_and_deterministic() {
        let voice = Voice {
            pitch_hz: 120.0,
            formant_scale: 1.0,
        };
        let a = utterance(&voice, 16_000, 16_000, &mut ChaCha8Rng::seed_from_u64(1));
        let b = utterance(&voice, 16_000, 16_000, &mut ChaCha8Rng::seed_from_u64(1));
        assert_eq!(a, b);
        let rms = (a.iter().map(|x| x * x).sum::<f64>() / a.len() as f64).sqrt();
        assert!((rms - UTTERANCE_RMS).abs() < 1e-12);
        assert!(a.iter().all(|x| x.is_finite() && x.abs() < 1.0));
        // Syllable gaps leave silent stretches.
        assert!(a.windows(400).any(|w| w.iter().all(|x| x.abs() < 1e-3)));
    }

    #[test]
    fn pink_noise_is_low_frequency_heavy() {
        let n = noise(NoiseKind::Pink, 20_000, &mut ChaCha8Rng::seed_from_u64(2));
        let w = noise(NoiseKind::White, 20_000, &mut ChaCha8Rng::seed_from_u64(2));
        // Lag-1 autocorrelation: near zero for white, strongly positive for pink.
        let lag1 = |x: &[f64]| {
            let num: f64 = x.windows(2).map(|p| p[0] * p[1]).sum();
            num / x.iter().map(|v| v * v).sum::<f64>()
        };
        assert!(lag1(&w).abs() < 0.05);
        assert!(lag1(&n) > 0.5);
    }
}
