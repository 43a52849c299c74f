use ndarray::{s, Array3};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::objective::Example;
use crate::error::{Error, Result};
use crate::mixer::MixtureSample;
use crate::signal::{features, stft, StftConfig};

/// STFT features, mixture power and padded reference magnitudes for a sample.
///
/// Fewer references than `num_outputs` are padded with silent ones.
pub fn prepare_example(sample: &MixtureSample, stft_cfg: &StftConfig, num_outputs: usize) -> Result<Example> {
    let mix = stft(&sample.mixture, stft_cfg)?;
    let feats = features(&mix);
    let mix_power = feats.mapv(|m| m * m);
    let references = match &sample.references {
        None => None,
        Some(refs) => {
            if refs.len() > num_outputs {
                return Err(Error::UnsupportedCardinality(refs.len()));
            }
            let mut mags = Array3::zeros((num_outputs, feats.nrows(), feats.ncols()));
            for (s, r) in refs.iter().enumerate() {
                if r.len() != sample.mixture.len() {
                    return Err(Error::InvalidInput(format!(
                        "reference {s} has {} samples, mixture has {}",
                        r.len(),
                        sample.mixture.len()
                    )));
                }
                let spec = stft(r, stft_cfg)?;
                mags.slice_mut(s![s, .., ..]).assign(&features(&spec));
            }
            Some(mags)
        }
    };
    Ok(Example {
        features: feats,
        mix_power,
        references,
    })
}

pub fn prepare_examples(samples: &[MixtureSample], stft_cfg: &StftConfig, num_outputs: usize) -> Result<Vec<Example>> {
    samples
        .par_iter()
        .map(|s| prepare_example(s, stft_cfg, num_outputs))
        .collect()
}

/// Deterministic train/validation index split. At least one item is held out
/// whenever `fraction > 0` and `n > 1`.
pub fn split_indices(n: usize, fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_5a11));
    let mut held = (n as f64 * fraction).round() as usize;
    if fraction > 0.0 && n > 1 {
        held = held.clamp(1, n - 1);
    }
    let mut val = idx.split_off(n - held);
    idx.sort_unstable();
    val.sort_unstable();
    (idx, val)
}

/// The crops trained on at `step`: a function of `(seed, step)` only.
pub fn sample_batch(examples: &[Example], seed: u64, step: u64, batch_size: usize, crop_frames: usize) -> Vec<Example> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step);
    (0..batch_size)
        .map(|_| {
            let ex = &examples[rng.gen_range(0..examples.len())];
            let len = crop_frames.min(ex.num_frames());
            let start = rng.gen_range(0..=ex.num_frames() - len);
            ex.crop(start, len)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mixer::{make_corpus, CorpusTemplate};

    #[test]
    fn split_is_deterministic_and_disjoint() {
        let (a, b) = split_indices(50, 0.1, 3);
        assert_eq!(b.len(), 5);
        assert_eq!(a.len(), 45);
        assert!(b.iter().all(|i| !a.contains(i)));
        assert_eq!(split_indices(50, 0.1, 3), (a, b));
        assert_ne!(split_indices(50, 0.1, 4).1, split_indices(50, 0.1, 3).1);
        assert_eq!(split_indices(3, 0.1, 0).1.len(), 1);
    }

    #[test]
    fn prepared_examples_have_consistent_shapes() {
        let corpus = make_corpus(4, &CorpusTemplate::default(), true, 9).unwrap();
        let cfg = StftConfig::default();
        let examples = prepare_examples(&corpus, &cfg, 2).unwrap();
        for (ex, sample) in examples.iter().zip(&corpus) {
            let t = cfg.num_frames(sample.mixture.len());
            assert_eq!(ex.features.dim(), (t, 257));
            assert_eq!(ex.references.as_ref().unwrap().dim(), (2, t, 257));
        }
        let unlabeled: Vec<_> = corpus.into_iter().map(|s| s.unlabeled()).collect();
        let ex = prepare_example(&unlabeled[0], &cfg, 2).unwrap();
        assert!(ex.references.is_none());
    }

    #[test]
    fn batches_depend_only_on_seed_and_step() {
        let corpus = make_corpus(5, &CorpusTemplate::default(), true, 1).unwrap();
        let examples = prepare_examples(&corpus, &StftConfig::default(), 2).unwrap();
        let a = sample_batch(&examples, 7, 12, 3, 20);
        let b = sample_batch(&examples, 7, 12, 3, 20);
        let c = sample_batch(&examples, 7, 13, 3, 20);
        assert!(a.iter().zip(&b).all(|(x, y)| x.features == y.features));
        assert!(a.iter().zip(&c).any(|(x, y)| x.features != y.features));
        assert!(a.iter().all(|x| x.num_frames() == 20));
    }
}
