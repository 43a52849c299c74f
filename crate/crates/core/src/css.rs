//! Sliding-window separation of long recordings.
//!
//! Each window is separated independently, windows are aligned to their left
//! neighbour by the source permutation that best agrees on the shared frames,
//! and the aligned masks are cross-faded into continuous streams.

use ndarray::{s, Array2, Array3, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{forward, Parameters};
use crate::perm::{displacement, permutations};
use crate::signal::{apply_mask, features, istft, stft, MaskSet, StftConfig, Waveform};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Crossfade {
    /// Weights proportional to the distance from the window edge.
    #[default]
    Linear,
    /// Hard cut at the middle of each overlap.
    None,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CssConfig {
    pub window_seconds: f64,
    pub hop_seconds: f64,
    pub crossfade: Crossfade,
}

impl Default for CssConfig {
    fn default() -> Self {
        Self {
            window_seconds: 2.4,
            hop_seconds: 1.2,
            crossfade: Crossfade::Linear,
        }
    }
}

impl CssConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.hop_seconds > 0.0 && self.hop_seconds <= self.window_seconds) {
            return Err(Error::Config(format!(
                "need 0 < hop_seconds ({}) <= window_seconds ({})",
                self.hop_seconds, self.window_seconds
            )));
        }
        Ok(())
    }

    /// Window length in STFT frames.
    pub fn window_frames(&self, stft: &StftConfig) -> usize {
        ((self.window_seconds / stft.frame_seconds()).round() as usize).max(1)
    }

    /// Window spacing in STFT frames.
    pub fn hop_frames(&self, stft: &StftConfig) -> usize {
        ((self.hop_seconds / stft.frame_seconds()).round() as usize).clamp(1, self.window_frames(stft))
    }
}

/// Frame range `start..start + len` of one window.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct WindowSpan {
    pub index: usize,
    pub start: usize,
    pub len: usize,
}

impl WindowSpan {
    pub fn end(&self) -> usize {
        self.start + self.len
    }
}

/// Windows at hop spacing over `num_frames` frames; the final window is
/// right-aligned to the end. Inputs shorter than a window yield one window.
pub fn split_windows(num_frames: usize, window: usize, hop: usize) -> Vec<WindowSpan> {
    if num_frames <= window {
        return vec![WindowSpan {
            index: 0,
            start: 0,
            len: num_frames,
        }];
    }
    let mut starts: Vec<usize> = (0..).map(|i| i * hop).take_while(|&s| s + window < num_frames).collect();
    starts.push(num_frames - window);
    starts.dedup();
    starts
        .into_iter()
        .enumerate()
        .map(|(index, start)| WindowSpan {
            index,
            start,
            len: window,
        })
        .collect()
}

/// Separation result for one window.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowOutput {
    pub index: usize,
    /// First frame of the window in the full stream.
    pub offset: usize,
    /// `S x T_w x F` masks.
    pub masks: Array3<f64>,
    /// `S x T_w x F` masked mixture magnitudes.
    pub magnitudes: Array3<f64>,
}

impl WindowOutput {
    pub fn new(index: usize, offset: usize, masks: Array3<f64>, mix_magnitude: &Array2<f64>) -> Result<Self> {
        let (_, frames, bins) = masks.dim();
        if mix_magnitude.dim() != (frames, bins) {
            return Err(crate::error::shape_mismatch(
                "window magnitudes",
                (frames, bins),
                mix_magnitude.dim(),
            ));
        }
        let mut magnitudes = masks.clone();
        for mut src in magnitudes.outer_iter_mut() {
            src *= mix_magnitude;
        }
        Ok(Self {
            index,
            offset,
            masks,
            magnitudes,
        })
    }

    pub fn num_sources(&self) -> usize {
        self.masks.dim().0
    }

    pub fn num_frames(&self) -> usize {
        self.masks.dim().1
    }

    pub fn end(&self) -> usize {
        self.offset + self.num_frames()
    }

    /// Sources reordered so that new source `s` is old source `perm[s]`.
    pub fn permuted(&self, perm: &[usize]) -> WindowOutput {
        WindowOutput {
            index: self.index,
            offset: self.offset,
            masks: self.masks.select(Axis(0), perm),
            magnitudes: self.magnitudes.select(Axis(0), perm),
        }
    }
}

/// Outcome of aligning one window to its predecessor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Alignment {
    pub window: usize,
    /// Source `s` of the aligned window is source `permutation[s]` of the raw one.
    pub permutation: Vec<usize>,
    pub best_cost: f64,
    /// Cost of the runner-up permutation, if any.
    pub second_cost: Option<f64>,
    /// Set when the windows share no frames and identity was returned.
    pub zero_overlap: bool,
}

/// Permutation of `cur`'s sources minimizing the summed squared difference of
/// masked magnitudes against `prev` on the shared frames. Ties go to the
/// permutation closest to identity.
pub fn align_adjacent(prev: &WindowOutput, cur: &WindowOutput) -> Result<Alignment> {
    let sources = prev.num_sources();
    if cur.num_sources() != sources {
        return Err(crate::error::shape_mismatch("window sources", sources, cur.num_sources()));
    }
    let lo = prev.offset.max(cur.offset);
    let hi = prev.end().min(cur.end());
    let identity: Vec<usize> = (0..sources).collect();
    if hi <= lo {
        return Ok(Alignment {
            window: cur.index,
            permutation: identity,
            best_cost: 0.0,
            second_cost: None,
            zero_overlap: true,
        });
    }
    let a = prev.magnitudes.slice(s![.., lo - prev.offset..hi - prev.offset, ..]);
    let b = cur.magnitudes.slice(s![.., lo - cur.offset..hi - cur.offset, ..]);
    let norm = ((hi - lo) * a.dim().2) as f64;
    // cost[p][c]: mean squared difference of prev source p and cur source c.
    let cost: Vec<Vec<f64>> = (0..sources)
        .map(|p| {
            (0..sources)
                .map(|c| {
                    let pa = a.index_axis(Axis(0), p);
                    let cb = b.index_axis(Axis(0), c);
                    pa.iter().zip(cb.iter()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / norm
                })
                .collect()
        })
        .collect();
    let mut scored: Vec<(f64, usize, Vec<usize>)> = permutations(sources)
        .into_iter()
        .map(|perm| {
            let total = perm.iter().enumerate().map(|(p, &c)| cost[p][c]).sum::<f64>();
            (total, displacement(&perm), perm)
        })
        .collect();
    scored.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)).then_with(|| x.2.cmp(&y.2)));
    let second_cost = scored.get(1).map(|s| s.0);
    let (best_cost, _, permutation) = scored.swap_remove(0);
    Ok(Alignment {
        window: cur.index,
        permutation,
        best_cost,
        second_cost,
        zero_overlap: false,
    })
}

/// Aligns every window to its already aligned left neighbour.
pub fn align_all(outputs: &[WindowOutput]) -> Result<(Vec<WindowOutput>, Vec<Alignment>)> {
    let mut aligned: Vec<WindowOutput> = Vec::with_capacity(outputs.len());
    let mut trace = Vec::with_capacity(outputs.len());
    for out in outputs {
        match aligned.last() {
            None => {
                trace.push(Alignment {
                    window: out.index,
                    permutation: (0..out.num_sources()).collect(),
                    best_cost: 0.0,
                    second_cost: None,
                    zero_overlap: false,
                });
                aligned.push(out.clone());
            }
            Some(prev) => {
                let a = align_adjacent(prev, out)?;
                aligned.push(out.permuted(&a.permutation));
                trace.push(a);
            }
        }
    }
    Ok((aligned, trace))
}

/// Per-frame weight of each window; columns sum to 1 on every covered frame.
pub fn crossfade_weights(spans: &[(usize, usize)], total: usize, mode: Crossfade) -> Result<Array2<f64>> {
    let mut weights = Array2::zeros((spans.len(), total));
    for (w, &(start, len)) in spans.iter().enumerate() {
        for t in start..start + len {
            // Distance to the nearest window edge, at least 1.
            weights[[w, t]] = (t - start + 1).min(start + len - t) as f64;
        }
    }
    for t in 0..total {
        let column = weights.column(t);
        let sum: f64 = column.sum();
        if sum == 0.0 {
            return Err(Error::InvalidInput(format!("frame {t} is not covered by any window")));
        }
        match mode {
            Crossfade::Linear => weights.column_mut(t).mapv_inplace(|x| x / sum),
            Crossfade::None => {
                let best = column
                    .iter()
                    .enumerate()
                    .fold((0, f64::MIN), |acc, (i, &x)| if x > acc.1 { (i, x) } else { acc })
                    .0;
                weights.column_mut(t).fill(0.0);
                weights[[best, t]] = 1.0;
            }
        }
    }
    Ok(weights)
}

/// Cross-fades aligned window masks into `S x T x F` continuous streams.
pub fn stitch(outputs: &[WindowOutput], cfg: &CssConfig) -> Result<Array3<f64>> {
    let first = outputs
        .first()
        .ok_or_else(|| Error::InvalidInput("no windows to stitch".into()))?;
    if first.offset != 0 {
        return Err(Error::InvalidInput(format!("first window starts at frame {}", first.offset)));
    }
    let (sources, _, bins) = first.masks.dim();
    for pair in outputs.windows(2) {
        if pair[1].offset > pair[0].end() {
            return Err(Error::InvalidInput(format!(
                "gap between windows {} and {}: frames {}..{}",
                pair[0].index,
                pair[1].index,
                pair[0].end(),
                pair[1].offset
            )));
        }
        if pair[1].offset < pair[0].offset {
            return Err(Error::InvalidInput("window offsets must be non-decreasing".into()));
        }
    }
    if let Some(o) = outputs.iter().find(|o| o.masks.dim().0 != sources || o.masks.dim().2 != bins) {
        return Err(crate::error::shape_mismatch("stitched window", (sources, bins), (o.masks.dim().0, o.masks.dim().2)));
    }
    let total = outputs.iter().map(WindowOutput::end).max().unwrap();
    let spans: Vec<(usize, usize)> = outputs.iter().map(|o| (o.offset, o.num_frames())).collect();
    let weights = crossfade_weights(&spans, total, cfg.crossfade)?;
    let mut out = Array3::zeros((sources, total, bins));
    for (w, o) in outputs.iter().enumerate() {
        for t in 0..o.num_frames() {
            let g = weights[[w, o.offset + t]];
            if g == 0.0 {
                continue;
            }
            out.slice_mut(s![.., o.offset + t, ..])
                .scaled_add(g, &o.masks.slice(s![.., t, ..]));
        }
    }
    Ok(out)
}

/// Stitched masks for a `T x F` feature matrix plus the alignment trace.
pub fn separate_masks(
    params: &Parameters,
    feats: &Array2<f64>,
    css: &CssConfig,
    stft_cfg: &StftConfig,
) -> Result<(MaskSet, Vec<Alignment>)> {
    css.validate()?;
    let spans = split_windows(feats.nrows(), css.window_frames(stft_cfg), css.hop_frames(stft_cfg));
    let outputs: Vec<WindowOutput> = spans
        .par_iter()
        .map(|span| {
            let window = feats.slice(s![span.start..span.end(), ..]).to_owned();
            let (masks, _) = forward(params, &window)?;
            WindowOutput::new(span.index, span.start, masks.into_inner(), &window)
        })
        .collect::<Result<_>>()?;
    let (aligned, trace) = align_all(&outputs)?;
    let masks = stitch(&aligned, css)?;
    Ok((MaskSet::new(masks)?, trace))
}

/// Separates a recording into `S` streams, with the per-window alignment trace.
///
/// Masks are estimated from and applied to the first channel.
pub fn separate_continuous_traced(
    params: &Parameters,
    wave: &Waveform,
    css: &CssConfig,
    stft_cfg: &StftConfig,
) -> Result<(Vec<Waveform>, Vec<Alignment>)> {
    let mix = stft(wave, stft_cfg)?;
    let (masks, trace) = separate_masks(params, &features(&mix), css, stft_cfg)?;
    let waves = apply_mask(&masks, &mix)?
        .iter()
        .map(|spec| istft(spec, stft_cfg))
        .collect::<Result<_>>()?;
    Ok((waves, trace))
}

pub fn separate_continuous(
    params: &Parameters,
    wave: &Waveform,
    css: &CssConfig,
    stft_cfg: &StftConfig,
) -> Result<Vec<Waveform>> {
    Ok(separate_continuous_traced(params, wave, css, stft_cfg)?.0)
}

/// Writes an alignment trace as one JSON object per line.
pub fn write_trace(mut out: impl std::io::Write, trace: &[Alignment]) -> Result<()> {
    for a in trace {
        serde_json::to_writer(&mut out, a)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}
