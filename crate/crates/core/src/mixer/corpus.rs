use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::synth::{self, NoiseKind, Voice};
use super::{mix, MixSpec, MixtureSample, OverlapMode};
use crate::error::{Error, Result};
use crate::signal::{read_wav, write_wav, SampleFormat, Waveform};

/// The four training mixture types.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MixtureKind {
    Single,
    SingleNoise,
    Partial,
    Full,
}

/// Relative frequency of each mixture type in a labeled corpus.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MixtureWeights {
    pub single: f64,
    pub single_noise: f64,
    pub partial: f64,
    pub full: f64,
}

impl Default for MixtureWeights {
    /// Weighted toward overlapped types so the mean overlap ratio is near 50%.
    fn default() -> Self {
        Self {
            single: 0.125,
            single_noise: 0.125,
            partial: 0.375,
            full: 0.375,
        }
    }
}

impl MixtureWeights {
    pub fn two_speaker() -> Self {
        Self {
            single: 0.0,
            single_noise: 0.0,
            partial: 0.5,
            full: 0.5,
        }
    }
}

/// Distribution the per-item [`MixSpec`]s are drawn from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusTemplate {
    pub sample_rate: u32,
    pub weights: MixtureWeights,
    /// Source utterance duration range in seconds.
    pub min_seconds: f64,
    pub max_seconds: f64,
    pub max_gain_db: f64,
    pub min_snr_db: f64,
    pub max_snr_db: f64,
    pub pink_noise_probability: f64,
}

impl Default for CorpusTemplate {
    fn default() -> Self {
        Self {
            sample_rate: 16_000,
            weights: MixtureWeights::default(),
            min_seconds: 1.0,
            max_seconds: 2.0,
            max_gain_db: 5.0,
            min_snr_db: 0.0,
            max_snr_db: 10.0,
            pink_noise_probability: 0.5,
        }
    }
}

impl CorpusTemplate {
    pub fn validate(&self) -> Result<()> {
        let w = &self.weights;
        let parts = [w.single, w.single_noise, w.partial, w.full];
        if parts.iter().any(|p| *p < 0.0 || !p.is_finite()) || parts.iter().sum::<f64>() <= 0.0 {
            return Err(Error::Config("mixture weights must be non-negative with a positive sum".into()));
        }
        if !(self.min_seconds > 0.0 && self.min_seconds <= self.max_seconds) {
            return Err(Error::Config("need 0 < min_seconds <= max_seconds".into()));
        }
        if !(0.0..=5.0).contains(&self.max_gain_db) {
            return Err(Error::Config("max_gain_db must lie in [0, 5]".into()));
        }
        if !(0.0 <= self.min_snr_db && self.min_snr_db <= self.max_snr_db && self.max_snr_db <= 10.0) {
            return Err(Error::Config("need 0 <= min_snr_db <= max_snr_db <= 10".into()));
        }
        Ok(())
    }

    fn utterance<R: Rng>(&self, rng: &mut R) -> Waveform {
        let voice = Voice::random(rng);
        let seconds = rng.gen_range(self.min_seconds..=self.max_seconds);
        let len = (seconds * self.sample_rate as f64) as usize;
        Waveform::mono(synth::utterance(&voice, len, self.sample_rate, rng), self.sample_rate)
            .expect("synthesized samples are finite")
    }

    fn sample(&self, seed: u64, labeled: bool) -> Result<MixtureSample> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let kind = if labeled {
            let w = &self.weights;
            let kinds = [
                (MixtureKind::Single, w.single),
                (MixtureKind::SingleNoise, w.single_noise),
                (MixtureKind::Partial, w.partial),
                (MixtureKind::Full, w.full),
            ];
            let index = WeightedIndex::new(kinds.iter().map(|k| k.1))
                .map_err(|e| Error::Config(e.to_string()))?;
            kinds[index.sample(&mut rng)].0
        } else {
            // Unlabeled data: two utterances simply mixed together.
            MixtureKind::Full
        };
        let gain_db = if self.max_gain_db > 0.0 {
            rng.gen_range(-self.max_gain_db..=self.max_gain_db)
        } else {
            0.0
        };
        let noise_kind = if rng.gen_bool(self.pink_noise_probability.clamp(0.0, 1.0)) {
            NoiseKind::Pink
        } else {
            NoiseKind::White
        };
        let mix_seed = rng.gen();
        let (sources, spec) = match kind {
            MixtureKind::Single | MixtureKind::SingleNoise => {
                let noise_snr_db = (kind == MixtureKind::SingleNoise)
                    .then(|| rng.gen_range(self.min_snr_db..=self.max_snr_db));
                let spec = MixSpec {
                    noise_snr_db,
                    noise_kind,
                    ..MixSpec::single(mix_seed)
                };
                (vec![self.utterance(&mut rng)], spec)
            }
            MixtureKind::Partial | MixtureKind::Full => {
                let spec = MixSpec {
                    source_count: 2,
                    overlap_mode: if kind == MixtureKind::Full {
                        OverlapMode::Full
                    } else {
                        OverlapMode::Partial
                    },
                    gain_db,
                    noise_snr_db: None,
                    noise_kind,
                    seed: mix_seed,
                };
                (vec![self.utterance(&mut rng), self.utterance(&mut rng)], spec)
            }
        };
        let sample = mix(&sources, &spec)?;
        Ok(if labeled { sample } else { sample.unlabeled() })
    }
}

/// Seed of item `index` in a corpus generated from `master_seed`.
pub fn item_seed(master_seed: u64, index: usize) -> u64 {
    master_seed ^ index as u64
}

/// Generates `n` samples; item `i` depends only on `item_seed(master_seed, i)`.
pub fn make_corpus(
    n: usize,
    template: &CorpusTemplate,
    labeled: bool,
    master_seed: u64,
) -> Result<Vec<MixtureSample>> {
    if n == 0 {
        return Err(Error::InvalidInput("corpus size must be at least 1".into()));
    }
    template.validate()?;
    (0..n)
        .into_par_iter()
        .map(|i| template.sample(item_seed(master_seed, i), labeled))
        .collect()
}

/// One line of a corpus manifest. Paths are relative to the manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub mixture: String,
    pub references: Option<Vec<String>>,
    pub seed: u64,
    pub overlap_ratio: f64,
    pub spec: MixSpec,
}

/// Writes WAV payloads and `manifest.jsonl` into `dir`, returning the manifest path.
pub fn write_corpus(dir: impl AsRef<Path>, samples: &[MixtureSample]) -> Result<PathBuf> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let manifest = dir.join("manifest.jsonl");
    let mut out = BufWriter::new(File::create(&manifest)?);
    for (i, sample) in samples.iter().enumerate() {
        let mixture = format!("{i:06}_mix.wav");
        write_wav(dir.join(&mixture), &sample.mixture, SampleFormat::Float32)?;
        let references = sample
            .references
            .as_ref()
            .map(|refs| {
                refs.iter()
                    .enumerate()
                    .map(|(s, r)| {
                        let name = format!("{i:06}_s{s}.wav");
                        write_wav(dir.join(&name), r, SampleFormat::Float32).map(|_| name)
                    })
                    .collect::<Result<Vec<_>>>()
            })
            .transpose()?;
        let record = ManifestRecord {
            mixture,
            references,
            seed: sample.spec.seed,
            overlap_ratio: sample.overlap_ratio,
            spec: sample.spec.clone(),
        };
        serde_json::to_writer(&mut out, &record)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(manifest)
}

pub fn read_corpus(manifest: impl AsRef<Path>) -> Result<Vec<MixtureSample>> {
    let manifest = manifest.as_ref();
    let dir = manifest.parent().unwrap_or(Path::new("."));
    let reader = BufReader::new(File::open(manifest)?);
    let mut samples = Vec::new();
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: ManifestRecord = serde_json::from_str(&line)?;
        let references = record
            .references
            .map(|refs| refs.iter().map(|r| read_wav(dir.join(r))).collect::<Result<Vec<_>>>())
            .transpose()?;
        samples.push(MixtureSample {
            mixture: read_wav(dir.join(&record.mixture))?,
            references,
            spec: record.spec,
            overlap_ratio: record.overlap_ratio,
        });
    }
    Ok(samples)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_template() -> CorpusTemplate {
        CorpusTemplate {
            min_seconds: 0.2,
            max_seconds: 0.4,
            ..CorpusTemplate::default()
        }
    }

    #[test]
    fn deterministic_given_seed() {
        let a = make_corpus(12, &small_template(), true, 77).unwrap();
        let b = make_corpus(12, &small_template(), true, 77).unwrap();
        assert_eq!(a, b);
        let c = make_corpus(12, &small_template(), true, 78).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn unlabeled_drops_references() {
        let corpus = make_corpus(8, &small_template(), false, 5).unwrap();
        assert!(corpus.iter().all(|s| s.references.is_none()));
        assert!(corpus.iter().all(|s| s.spec.source_count == 2 && s.spec.noise_snr_db.is_none()));
    }

    #[test]
    fn labeled_samples_are_additive_without_noise() {
        for sample in make_corpus(16, &small_template(), true, 3).unwrap() {
            if sample.spec.noise_snr_db.is_some() {
                continue;
            }
            let refs = sample.references.unwrap();
            for i in 0..sample.mixture.len() {
                let sum: f64 = refs.iter().map(|r| r.channel(0)[i]).sum();
                assert!((sample.mixture.channel(0)[i] - sum).abs() <= 1e-6);
            }
        }
    }

    #[test]
    fn manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let corpus = make_corpus(4, &small_template(), true, 1).unwrap();
        let manifest = write_corpus(dir.path(), &corpus).unwrap();
        let back = read_corpus(&manifest).unwrap();
        assert_eq!(back.len(), 4);
        for (a, b) in corpus.iter().zip(&back) {
            assert_eq!(a.spec, b.spec);
            assert_eq!(a.overlap_ratio, b.overlap_ratio);
            // f32 payloads
            for (x, y) in a.mixture.channel(0).iter().zip(b.mixture.channel(0)) {
                assert!((x - y).abs() < 1e-6);
            }
        }
        let text = fs::read_to_string(&manifest).unwrap();
        let first: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
        for key in ["mixture", "references", "seed", "overlap_ratio"] {
            assert!(first.get(key).is_some(), "missing {key}");
        }
    }
}
