use ndarray::Array3;
use num_complex::Complex64;
use rustfft::FftPlanner;

use super::{Spectrogram, StftConfig, Waveform};
use crate::error::{shape_mismatch, Error, Result};

/// Short-time Fourier transform of every channel.
///
/// The signal is zero padded by `frame_length - hop` samples on both ends and
/// at the tail until the last frame is complete. Bins are unnormalized DFT
/// coefficients of the windowed frame.
pub fn stft(wave: &Waveform, cfg: &StftConfig) -> Result<Spectrogram> {
    cfg.validate()?;
    let len = wave.len();
    if len < cfg.frame_length {
        return Err(Error::InvalidInput(format!(
            "waveform of {len} samples is shorter than one frame ({})",
            cfg.frame_length
        )));
    }
    let pad = cfg.edge_padding();
    let frames = cfg.num_frames(len);
    let bins = cfg.num_bins();
    let window = cfg.window_coefficients();
    let fft = FftPlanner::<f64>::new().plan_fft_forward(cfg.fft_size);

    let mut values = Array3::zeros((wave.num_channels(), frames, bins));
    let mut buffer = vec![Complex64::new(0.0, 0.0); cfg.fft_size];
    for (c, samples) in wave.channels().iter().enumerate() {
        for t in 0..frames {
            buffer.fill(Complex64::new(0.0, 0.0));
            let start = (t * cfg.hop) as isize - pad as isize;
            for (n, (slot, w)) in buffer.iter_mut().zip(&window).enumerate() {
                let idx = start + n as isize;
                if idx >= 0 && (idx as usize) < len {
                    slot.re = samples[idx as usize] * w;
                }
            }
            fft.process(&mut buffer);
            for (f, z) in buffer[..bins].iter().enumerate() {
                values[[c, t, f]] = *z;
            }
        }
    }
    Spectrogram::new(values, *cfg, len)
}

/// Inverse STFT by weighted overlap-add, trimmed to the original signal length.
pub fn istft(spec: &Spectrogram, cfg: &StftConfig) -> Result<Waveform> {
    cfg.validate()?;
    if spec.num_bins() != cfg.num_bins() || spec.config().frame_length != cfg.frame_length {
        return Err(shape_mismatch(
            "istft config",
            (cfg.frame_length, cfg.num_bins()),
            (spec.config().frame_length, spec.num_bins()),
        ));
    }
    let frames = spec.num_frames();
    let len = spec.signal_len();
    if cfg.num_frames(len) != frames {
        return Err(shape_mismatch(
            "istft frame count",
            cfg.num_frames(len),
            frames,
        ));
    }
    let pad = cfg.edge_padding();
    let n_fft = cfg.fft_size;
    let bins = cfg.num_bins();
    let window = cfg.window_coefficients();
    let ifft = FftPlanner::<f64>::new().plan_fft_inverse(n_fft);
    let total = (frames - 1) * cfg.hop + cfg.frame_length;

    let mut weight = vec![0.0; total];
    for t in 0..frames {
        for (n, w) in window.iter().enumerate() {
            weight[t * cfg.hop + n] += w * w;
        }
    }

    let mut channels = Vec::with_capacity(spec.num_channels());
    let mut buffer = vec![Complex64::new(0.0, 0.0); n_fft];
    for c in 0..spec.num_channels() {
        let mut acc = vec![0.0; total];
        for t in 0..frames {
            for f in 0..bins {
                buffer[f] = spec.values()[[c, t, f]];
            }
            // Hermitian completion; DC and Nyquist imaginary parts are dropped.
            buffer[0].im = 0.0;
            if n_fft % 2 == 0 {
                buffer[n_fft / 2].im = 0.0;
            }
            for f in bins..n_fft {
                buffer[f] = buffer[n_fft - f].conj();
            }
            ifft.process(&mut buffer);
            let base = t * cfg.hop;
            for (n, w) in window.iter().enumerate() {
                acc[base + n] += buffer[n].re / n_fft as f64 * w;
            }
        }
        let samples = (pad..pad + len)
            .map(|i| {
                if weight[i] > 1e-10 {
                    acc[i] / weight[i]
                } else {
                    0.0
                }
            })
            .collect();
        channels.push(samples);
    }
    Waveform::new(channels, cfg.sample_rate)
}
