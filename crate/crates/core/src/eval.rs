//! Reference-based separation quality.

use std::fmt;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::css::{separate_continuous, CssConfig};
use crate::error::{shape_mismatch, Error, Result};
use crate::mixer::MixtureSample;
use crate::model::Parameters;
use crate::perm::permutations;
use crate::signal::{StftConfig, Waveform};

/// Magnitude bound on reported SI-SNR values.
pub const SI_SNR_CAP: f64 = 80.0;

/// Scale-invariant SNR of `est` against `reference` in dB, clamped to
/// `±SI_SNR_CAP`. Signals are used as given, without mean removal.
pub fn si_snr_samples(est: &[f64], reference: &[f64]) -> Result<f64> {
    if est.len() != reference.len() {
        return Err(shape_mismatch("si_snr lengths", reference.len(), est.len()));
    }
    let ref_energy: f64 = reference.iter().map(|r| r * r).sum();
    if ref_energy == 0.0 {
        return Err(Error::InvalidInput("si_snr reference is identically zero".into()));
    }
    let dot: f64 = est.iter().zip(reference).map(|(e, r)| e * r).sum();
    let alpha = dot / ref_energy;
    let (mut target, mut residual) = (0.0, 0.0);
    for (e, r) in est.iter().zip(reference) {
        let t = alpha * r;
        target += t * t;
        residual += (e - t) * (e - t);
    }
    let db = if residual == 0.0 {
        if target == 0.0 {
            -SI_SNR_CAP
        } else {
            SI_SNR_CAP
        }
    } else if target == 0.0 {
        -SI_SNR_CAP
    } else {
        10.0 * (target / residual).log10()
    };
    Ok(db.clamp(-SI_SNR_CAP, SI_SNR_CAP))
}

/// [`si_snr_samples`] on the first channel of each waveform.
pub fn si_snr(est: &Waveform, reference: &Waveform) -> Result<f64> {
    si_snr_samples(est.channel(0), reference.channel(0))
}

/// Highest mean SI-SNR over assignments of distinct estimates to references.
///
/// Returns the mean and `assignment[r]`, the estimate matched to reference `r`.
/// With fewer references than estimates the unmatched estimates are ignored.
pub fn best_permutation_si_snr(estimates: &[Waveform], references: &[Waveform]) -> Result<(f64, Vec<usize>)> {
    if references.is_empty() || references.len() > estimates.len() {
        return Err(shape_mismatch("si_snr sources", estimates.len(), references.len()));
    }
    let scores: Vec<Vec<f64>> = references
        .iter()
        .map(|r| estimates.iter().map(|e| si_snr(e, r)).collect::<Result<_>>())
        .collect::<Result<_>>()?;
    let mut best: Option<(f64, Vec<usize>)> = None;
    for perm in permutations(estimates.len()) {
        let assignment = &perm[..references.len()];
        let mean = assignment.iter().enumerate().map(|(r, &e)| scores[r][e]).sum::<f64>() / references.len() as f64;
        if best.as_ref().map_or(true, |(b, _)| mean > *b) {
            best = Some((mean, assignment.to_vec()));
        }
    }
    Ok(best.expect("at least one permutation"))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub index: usize,
    pub overlap_ratio: f64,
    pub si_snr: f64,
    pub assignment: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BucketMean {
    pub label: String,
    pub count: usize,
    pub mean: f64,
}

const BUCKETS: [&str; 4] = ["0", "(0,0.25]", "(0.25,0.5]", ">0.5"];

fn bucket_of(ratio: f64) -> usize {
    if ratio <= 0.0 {
        0
    } else if ratio <= 0.25 {
        1
    } else if ratio <= 0.5 {
        2
    } else {
        3
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub run: String,
    pub samples: Vec<SampleRecord>,
    pub mean: f64,
    pub median: f64,
    /// Overlap-ratio buckets that contain at least one sample.
    pub buckets: Vec<BucketMean>,
}

impl EvalReport {
    pub fn from_records(run: impl Into<String>, samples: Vec<SampleRecord>) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::InvalidInput("no samples to report".into()));
        }
        let n = samples.len() as f64;
        let mean = samples.iter().map(|s| s.si_snr).sum::<f64>() / n;
        let mut sorted: Vec<f64> = samples.iter().map(|s| s.si_snr).collect();
        sorted.sort_by(f64::total_cmp);
        let mid = sorted.len() / 2;
        let median = if sorted.len() % 2 == 0 {
            (sorted[mid - 1] + sorted[mid]) / 2.0
        } else {
            sorted[mid]
        };
        let mut sums = [(0usize, 0.0f64); 4];
        for s in &samples {
            let b = &mut sums[bucket_of(s.overlap_ratio)];
            b.0 += 1;
            b.1 += s.si_snr;
        }
        let buckets = sums
            .iter()
            .zip(BUCKETS)
            .filter(|((count, _), _)| *count > 0)
            .map(|(&(count, sum), label)| BucketMean {
                label: label.to_string(),
                count,
                mean: sum / count as f64,
            })
            .collect();
        Ok(Self {
            run: run.into(),
            samples,
            mean,
            median,
            buckets,
        })
    }

    /// Per-sample table: `index,overlap_ratio,si_snr`.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        #[derive(Serialize)]
        struct Row {
            run: String,
            index: usize,
            overlap_ratio: f64,
            si_snr: f64,
        }
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::Format(e.to_string()))?;
        for s in &self.samples {
            w.serialize(Row {
                run: self.run.clone(),
                index: s.index,
                overlap_ratio: s.overlap_ratio,
                si_snr: s.si_snr,
            })
            .map_err(|e| Error::Format(e.to_string()))?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "run: {}", self.run)?;
        writeln!(f, "samples: {}", self.samples.len())?;
        writeln!(f, "mean_si_snr_db: {:.3}", self.mean)?;
        writeln!(f, "median_si_snr_db: {:.3}", self.median)?;
        for b in &self.buckets {
            writeln!(f, "overlap {}: {:.3} dB over {} samples", b.label, b.mean, b.count)?;
        }
        Ok(())
    }
}

/// Side-by-side means of several reports.
pub fn comparison_table(reports: &[EvalReport]) -> String {
    let mut out = String::from("run,mean_si_snr_db,median_si_snr_db,samples\n");
    for r in reports {
        out.push_str(&format!("{},{:.4},{:.4},{}\n", r.run, r.mean, r.median, r.samples.len()));
    }
    out
}

/// Scores the estimates produced by `separate` on every labeled sample.
pub fn evaluate_with<F>(run: &str, corpus: &[MixtureSample], separate: F) -> Result<EvalReport>
where
    F: Fn(&MixtureSample) -> Result<Vec<Waveform>> + Sync,
{
    let records = corpus
        .par_iter()
        .enumerate()
        .map(|(index, sample)| {
            let refs = sample
                .references
                .as_ref()
                .ok_or_else(|| Error::InvalidInput(format!("sample {index} has no references")))?;
            let estimates = separate(sample)?;
            let (si_snr, assignment) = best_permutation_si_snr(&estimates, refs)?;
            Ok(SampleRecord {
                index,
                overlap_ratio: sample.overlap_ratio,
                si_snr,
                assignment,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    EvalReport::from_records(run, records)
}

/// Continuous separation with `params` followed by SI-SNR scoring.
pub fn evaluate(
    run: &str,
    params: &Parameters,
    corpus: &[MixtureSample],
    css: &CssConfig,
    stft: &StftConfig,
) -> Result<EvalReport> {
    evaluate_with(run, corpus, |s| separate_continuous(params, &s.mixture, css, stft))
}
