//! Deterministic synthesis of labeled and unlabeled overlapped-speech corpora.

mod corpus;
pub mod synth;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::signal::Waveform;

pub use corpus::{
    item_seed, make_corpus, read_corpus, write_corpus, CorpusTemplate, ManifestRecord,
    MixtureKind, MixtureWeights,
};
pub use synth::{NoiseKind, Voice};

/// How two sources are placed relative to each other.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OverlapMode {
    /// Second source starts where the first ends.
    None,
    /// Second source starts at a random point inside the first.
    Partial,
    /// Both sources start together and are trimmed to a common length.
    Full,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixSpec {
    pub source_count: usize,
    pub overlap_mode: OverlapMode,
    /// Energy ratio of the first source over the second, in dB.
    pub gain_db: f64,
    pub noise_snr_db: Option<f64>,
    #[serde(default)]
    pub noise_kind: NoiseKind,
    pub seed: u64,
}

impl MixSpec {
    pub fn single(seed: u64) -> Self {
        Self {
            source_count: 1,
            overlap_mode: OverlapMode::None,
            gain_db: 0.0,
            noise_snr_db: None,
            noise_kind: NoiseKind::White,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=2).contains(&self.source_count) {
            return Err(Error::InvalidInput(format!(
                "source_count must be 1 or 2, got {}",
                self.source_count
            )));
        }
        if !(-5.0..=5.0).contains(&self.gain_db) {
            return Err(Error::InvalidInput(format!(
                "gain_db {} outside [-5, 5]",
                self.gain_db
            )));
        }
        if let Some(snr) = self.noise_snr_db {
            if !(0.0..=10.0).contains(&snr) {
                return Err(Error::InvalidInput(format!(
                    "noise_snr_db {snr} outside [0, 10]"
                )));
            }
        }
        Ok(())
    }
}

/// A mixture with its (optional) time-aligned reference sources.
#[derive(Clone, Debug, PartialEq)]
pub struct MixtureSample {
    pub mixture: Waveform,
    /// Gain-scaled, offset-placed sources; absent for unlabeled samples.
    pub references: Option<Vec<Waveform>>,
    pub spec: MixSpec,
    /// Overlapped samples over mixture length.
    pub overlap_ratio: f64,
}

impl MixtureSample {
    pub fn is_labeled(&self) -> bool {
        self.references.is_some()
    }

    pub fn unlabeled(mut self) -> Self {
        self.references = None;
        self
    }
}

/// Places, rescales and sums up to two single-channel sources, then adds noise.
pub fn mix(sources: &[Waveform], spec: &MixSpec) -> Result<MixtureSample> {
    spec.validate()?;
    let Some(first) = sources.first() else {
        return Err(Error::InvalidInput("no sources to mix".into()));
    };
    if sources.len() != spec.source_count {
        return Err(Error::InvalidInput(format!(
            "spec expects {} sources, got {}",
            spec.source_count,
            sources.len()
        )));
    }
    let rate = first.sample_rate();
    if sources.iter().any(|s| s.sample_rate() != rate) {
        return Err(Error::InvalidInput("sources differ in sample rate".into()));
    }
    if sources.iter().any(|s| s.num_channels() != 1 || s.is_empty()) {
        return Err(Error::InvalidInput(
            "sources must be non-empty and single-channel".into(),
        ));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut signals: Vec<Vec<f64>> = sources.iter().map(|s| s.channel(0).to_vec()).collect();

    let (offsets, total) = match (signals.len(), spec.overlap_mode) {
        (1, _) => (vec![0], signals[0].len()),
        (_, OverlapMode::None) => {
            let l1 = signals[0].len();
            (vec![0, l1], l1 + signals[1].len())
        }
        (_, OverlapMode::Full) => {
            let common = signals[0].len().min(signals[1].len());
            signals.iter_mut().for_each(|s| s.truncate(common));
            (vec![0, 0], common)
        }
        (_, OverlapMode::Partial) => {
            let l1 = signals[0].len();
            let offset = if l1 > 1 { rng.gen_range(1..l1) } else { 0 };
            (vec![0, offset], l1.max(offset + signals[1].len()))
        }
    };

    // The ratio is set after trimming so the stored references carry it exactly.
    if signals.len() == 2 {
        let e1: f64 = signals[0].iter().map(|x| x * x).sum();
        let e2: f64 = signals[1].iter().map(|x| x * x).sum();
        if e1 == 0.0 || e2 == 0.0 {
            return Err(Error::InvalidInput(
                "cannot set an energy ratio with a silent source".into(),
            ));
        }
        let gain = (e1 / e2 * 10f64.powf(-spec.gain_db / 10.0)).sqrt();
        signals[1].iter_mut().for_each(|x| *x *= gain);
    }

    let references: Vec<Vec<f64>> = signals
        .iter()
        .zip(&offsets)
        .map(|(s, &off)| {
            let mut placed = vec![0.0; total];
            placed[off..off + s.len()].copy_from_slice(s);
            placed
        })
        .collect();
    let mut mixture: Vec<f64> = (0..total)
        .map(|i| references.iter().map(|r| r[i]).sum())
        .collect();

    if let Some(snr_db) = spec.noise_snr_db {
        let speech: f64 = mixture.iter().map(|x| x * x).sum();
        let raw = synth::noise(spec.noise_kind, total, &mut rng);
        let raw_energy: f64 = raw.iter().map(|x| x * x).sum();
        let gain = (speech / raw_energy / 10f64.powf(snr_db / 10.0)).sqrt();
        for (m, n) in mixture.iter_mut().zip(&raw) {
            *m += gain * n;
        }
    }

    let overlap = if signals.len() == 2 {
        let end1 = offsets[0] + signals[0].len();
        let end2 = offsets[1] + signals[1].len();
        end1.min(end2).saturating_sub(offsets[0].max(offsets[1]))
    } else {
        0
    };

    Ok(MixtureSample {
        mixture: Waveform::mono(mixture, rate)?,
        references: Some(
            references
                .into_iter()
                .map(|r| Waveform::mono(r, rate))
                .collect::<Result<_>>()?,
        ),
        spec: spec.clone(),
        overlap_ratio: overlap as f64 / total as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tone(len: usize, freq: f64, amp: f64) -> Waveform {
        Waveform::mono(
            (0..len)
                .map(|n| amp * (2.0 * std::f64::consts::PI * freq * n as f64 / 16_000.0).sin())
                .collect(),
            16_000,
        )
        .unwrap()
    }

    fn energy_db_ratio(a: &Waveform, b: &Waveform) -> f64 {
        10.0 * (a.energy() / b.energy()).log10()
    }

    #[test]
    fn single_source_is_passed_through() {
        let src = tone(4000, 440.0, 0.3);
        let out = mix(&[src.clone()], &MixSpec::single(1)).unwrap();
        assert_eq!(out.mixture, src);
        assert_eq!(out.references.unwrap(), vec![src]);
        assert_eq!(out.overlap_ratio, 0.0);
    }

    #[test]
    fn energy_ratio_is_applied() {
        // Unequal lengths, so full overlap has to trim the first source.
        let a = tone(9000, 300.0, 0.2);
        let b = tone(6000, 700.0, 0.3);
        for (mode, gain) in [
            (OverlapMode::Full, 5.0),
            (OverlapMode::Partial, -3.0),
            (OverlapMode::None, 0.0),
        ] {
            let spec = MixSpec {
                source_count: 2,
                overlap_mode: mode,
                gain_db: gain,
                noise_snr_db: None,
                noise_kind: NoiseKind::White,
                seed: 9,
            };
            let out = mix(&[a.clone(), b.clone()], &spec).unwrap();
            let refs = out.references.as_ref().unwrap();
            assert!((energy_db_ratio(&refs[0], &refs[1]) - gain).abs() < 0.01);
            for i in 0..out.mixture.len() {
                let sum = refs[0].channel(0)[i] + refs[1].channel(0)[i];
                assert!((out.mixture.channel(0)[i] - sum).abs() <= 1e-6);
            }
        }
    }

    #[test]
    fn overlap_ratio_per_mode() {
        let a = tone(6000, 300.0, 0.2);
        let b = tone(4000, 700.0, 0.2);
        let spec = |mode| MixSpec {
            source_count: 2,
            overlap_mode: mode,
            gain_db: 0.0,
            noise_snr_db: None,
            noise_kind: NoiseKind::White,
            seed: 4,
        };
        let none = mix(&[a.clone(), b.clone()], &spec(OverlapMode::None)).unwrap();
        assert_eq!(none.overlap_ratio, 0.0);
        assert_eq!(none.mixture.len(), 10_000);
        let full = mix(&[a.clone(), b.clone()], &spec(OverlapMode::Full)).unwrap();
        assert_eq!(full.overlap_ratio, 1.0);
        assert_eq!(full.mixture.len(), 4000);
        let partial = mix(&[a, b], &spec(OverlapMode::Partial)).unwrap();
        assert!(partial.overlap_ratio > 0.0 && partial.overlap_ratio < 1.0);
    }

    #[test]
    fn noise_hits_requested_snr() {
        let a = tone(8000, 300.0, 0.2);
        for (snr, kind) in [(0.0, NoiseKind::White), (7.5, NoiseKind::Pink)] {
            let spec = MixSpec {
                noise_snr_db: Some(snr),
                noise_kind: kind,
                ..MixSpec::single(3)
            };
            let out = mix(&[a.clone()], &spec).unwrap();
            let refs = out.references.unwrap();
            let noise: Vec<f64> = out
                .mixture
                .channel(0)
                .iter()
                .zip(refs[0].channel(0))
                .map(|(m, r)| m - r)
                .collect();
            let e_noise: f64 = noise.iter().map(|x| x * x).sum();
            let measured = 10.0 * (refs[0].energy() / e_noise).log10();
            assert!((measured - snr).abs() < 0.1, "{measured} vs {snr}");
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(mix(&[], &MixSpec::single(0)).is_err());
        let a = tone(100, 300.0, 0.2);
        let b = Waveform::mono(vec![0.1; 100], 8000).unwrap();
        let spec = MixSpec {
            source_count: 2,
            overlap_mode: OverlapMode::Full,
            ..MixSpec::single(0)
        };
        assert!(mix(&[a.clone(), b], &spec).is_err());
        let loud = MixSpec {
            gain_db: 6.0,
            ..MixSpec::single(0)
        };
        assert!(mix(&[a.clone()], &loud).is_err());
        let noisy = MixSpec {
            noise_snr_db: Some(12.0),
            ..MixSpec::single(0)
        };
        assert!(mix(&[a], &noisy).is_err());
    }
}
