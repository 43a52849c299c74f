//! Time-frequency analysis and synthesis, mask application and the magnitude
//! features consumed by the mask estimator.

mod stft;
mod wav;

use ndarray::{Array2, Array3, Axis};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{shape_mismatch, Error, Result};

pub use stft::{istft, stft};
pub use wav::{read_wav, write_wav, SampleFormat};

/// Analysis window shape.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WindowKind {
    #[default]
    PeriodicHann,
}

impl WindowKind {
    pub fn coefficients(self, len: usize) -> Vec<f64> {
        match self {
            WindowKind::PeriodicHann => (0..len)
                .map(|n| {
                    let phase = 2.0 * std::f64::consts::PI * n as f64 / len as f64;
                    0.5 - 0.5 * phase.cos()
                })
                .collect(),
        }
    }
}

/// STFT framing parameters. Defaults are 32 ms frames with a 16 ms hop at 16 kHz.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StftConfig {
    pub sample_rate: u32,
    pub frame_length: usize,
    pub hop: usize,
    pub fft_size: usize,
    pub window: WindowKind,
}

impl Default for StftConfig {
    fn default() -> Self {
        Self {
            sample_rate: 16_000,
            frame_length: 512,
            hop: 256,
            fft_size: 512,
            window: WindowKind::PeriodicHann,
        }
    }
}

impl StftConfig {
    pub fn validate(&self) -> Result<()> {
        if self.sample_rate == 0 {
            return Err(Error::Config("sample_rate must be positive".into()));
        }
        if self.hop == 0 || self.hop > self.frame_length || self.frame_length > self.fft_size {
            return Err(Error::Config(format!(
                "need 0 < hop <= frame_length <= fft_size, got hop={} frame_length={} fft_size={}",
                self.hop, self.frame_length, self.fft_size
            )));
        }
        // Constant overlap-add: the shifted windows must sum to a constant.
        let w = self.window_coefficients();
        let sums: Vec<f64> = (0..self.hop)
            .map(|n| w.iter().skip(n).step_by(self.hop).sum())
            .collect();
        let reference = sums[0];
        if reference <= 0.0 || sums.iter().any(|s| (s - reference).abs() > 1e-9 * reference) {
            return Err(Error::Config(format!(
                "window/hop pair ({:?}, {}) violates constant overlap-add",
                self.window, self.hop
            )));
        }
        Ok(())
    }

    /// Number of frequency bins, `fft_size / 2 + 1`.
    pub fn num_bins(&self) -> usize {
        self.fft_size / 2 + 1
    }

    pub fn window_coefficients(&self) -> Vec<f64> {
        self.window.coefficients(self.frame_length)
    }

    /// Zero padding applied to each end of the signal before framing.
    pub fn edge_padding(&self) -> usize {
        self.frame_length - self.hop
    }

    /// Frame count for a signal of `len` samples.
    pub fn num_frames(&self, len: usize) -> usize {
        let padded = len + 2 * self.edge_padding();
        if padded <= self.frame_length {
            1
        } else {
            (padded - self.frame_length).div_ceil(self.hop) + 1
        }
    }

    pub fn frame_seconds(&self) -> f64 {
        self.hop as f64 / self.sample_rate as f64
    }
}

/// Real multi-channel audio. Every channel has the same length.
#[derive(Clone, Debug, PartialEq)]
pub struct Waveform {
    channels: Vec<Vec<f64>>,
    sample_rate: u32,
}

impl Waveform {
    pub fn new(channels: Vec<Vec<f64>>, sample_rate: u32) -> Result<Self> {
        let Some(first) = channels.first() else {
            return Err(Error::InvalidInput("waveform needs at least one channel".into()));
        };
        let len = first.len();
        if channels.iter().any(|c| c.len() != len) {
            return Err(Error::InvalidInput("channels differ in length".into()));
        }
        if channels.iter().flatten().any(|x| !x.is_finite()) {
            return Err(Error::InvalidInput("waveform contains non-finite samples".into()));
        }
        Ok(Self {
            channels,
            sample_rate,
        })
    }

    pub fn mono(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        Self::new(vec![samples], sample_rate)
    }

    pub fn silence(len: usize, sample_rate: u32) -> Self {
        Self {
            channels: vec![vec![0.0; len]],
            sample_rate,
        }
    }

    pub fn len(&self) -> usize {
        self.channels[0].len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn num_channels(&self) -> usize {
        self.channels.len()
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn channel(&self, index: usize) -> &[f64] {
        &self.channels[index]
    }

    pub fn channels(&self) -> &[Vec<f64>] {
        &self.channels
    }

    pub fn into_channels(self) -> Vec<Vec<f64>> {
        self.channels
    }

    /// Sum of squared samples over all channels.
    pub fn energy(&self) -> f64 {
        self.channels.iter().flatten().map(|x| x * x).sum()
    }

    pub fn scaled(&self, gain: f64) -> Self {
        Self {
            channels: self
                .channels
                .iter()
                .map(|c| c.iter().map(|x| x * gain).collect())
                .collect(),
            sample_rate: self.sample_rate,
        }
    }
}

/// Complex STFT of shape channels x frames x bins.
#[derive(Clone, Debug, PartialEq)]
pub struct Spectrogram {
    values: Array3<Complex64>,
    config: StftConfig,
    signal_len: usize,
}

impl Spectrogram {
    /// `signal_len` is the sample count the inverse transform trims to.
    pub fn new(values: Array3<Complex64>, config: StftConfig, signal_len: usize) -> Result<Self> {
        let (channels, _, bins) = values.dim();
        if channels == 0 {
            return Err(Error::InvalidInput("spectrogram needs at least one channel".into()));
        }
        if bins != config.num_bins() {
            return Err(shape_mismatch("spectrogram bins", config.num_bins(), bins));
        }
        if values.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
            return Err(Error::InvalidInput("spectrogram contains non-finite bins".into()));
        }
        Ok(Self {
            values,
            config,
            signal_len,
        })
    }

    pub fn values(&self) -> &Array3<Complex64> {
        &self.values
    }

    pub fn config(&self) -> &StftConfig {
        &self.config
    }

    pub fn signal_len(&self) -> usize {
        self.signal_len
    }

    pub fn num_channels(&self) -> usize {
        self.values.dim().0
    }

    pub fn num_frames(&self) -> usize {
        self.values.dim().1
    }

    pub fn num_bins(&self) -> usize {
        self.values.dim().2
    }

    /// The first channel, `T x F`.
    pub fn first_channel(&self) -> Array2<Complex64> {
        self.values.index_axis(Axis(0), 0).to_owned()
    }

    pub fn scaled(&self, gain: f64) -> Self {
        Self {
            values: self.values.mapv(|z| z * gain),
            config: self.config,
            signal_len: self.signal_len,
        }
    }
}

/// Real masks of shape sources x frames x bins, each entry in `[0, 1]`.
///
/// Masks produced by the estimator are strictly inside `(0, 1)`.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskSet {
    masks: Array3<f64>,
}

impl MaskSet {
    pub fn new(masks: Array3<f64>) -> Result<Self> {
        if masks.dim().0 == 0 {
            return Err(Error::InvalidInput("mask set needs at least one source".into()));
        }
        if masks.iter().any(|m| !(0.0..=1.0).contains(m)) {
            return Err(Error::InvalidInput("mask entries must lie in [0, 1]".into()));
        }
        Ok(Self { masks })
    }

    pub(crate) fn from_raw(masks: Array3<f64>) -> Self {
        Self { masks }
    }

    pub fn constant(sources: usize, frames: usize, bins: usize, value: f64) -> Result<Self> {
        Self::new(Array3::from_elem((sources, frames, bins), value))
    }

    pub fn masks(&self) -> &Array3<f64> {
        &self.masks
    }

    pub fn into_inner(self) -> Array3<f64> {
        self.masks
    }

    pub fn num_sources(&self) -> usize {
        self.masks.dim().0
    }

    pub fn num_frames(&self) -> usize {
        self.masks.dim().1
    }

    pub fn num_bins(&self) -> usize {
        self.masks.dim().2
    }
}

/// Direct masking of the first mixture channel: `X_s = M_s * Y¹`.
pub fn apply_mask(masks: &MaskSet, mix: &Spectrogram) -> Result<Vec<Spectrogram>> {
    let (_, frames, bins) = masks.masks.dim();
    if (frames, bins) != (mix.num_frames(), mix.num_bins()) {
        return Err(shape_mismatch(
            "apply_mask",
            (mix.num_frames(), mix.num_bins()),
            (frames, bins),
        ));
    }
    let reference = mix.values.index_axis(Axis(0), 0);
    masks
        .masks
        .outer_iter()
        .map(|mask| {
            let masked = ndarray::Zip::from(&mask)
                .and(&reference)
                .map_collect(|&m, &y| y * m);
            Ok(Spectrogram {
                values: masked.insert_axis(Axis(0)),
                config: mix.config,
                signal_len: mix.signal_len,
            })
        })
        .collect()
}

/// Magnitude of the first channel, `T x F`.
pub fn features(mix: &Spectrogram) -> Array2<f64> {
    mix.values.index_axis(Axis(0), 0).mapv(|z| z.norm())
}
