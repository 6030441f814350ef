use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use super::fft::Fft;
use super::{FrontendError, Waveform};
use crate::tensor::Tensor;

/// Minimum overlap-added window energy accepted by [`Stft::istft`].
pub const MIN_WINDOW_SUM: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WindowKind {
    HannPeriodic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FrontendConfig {
    pub fft_size: usize,
    pub hop: usize,
    pub window: WindowKind,
}

impl Default for FrontendConfig {
    fn default() -> Self {
        Self {
            fft_size: 512,
            hop: 128,
            window: WindowKind::HannPeriodic,
        }
    }
}

impl FrontendConfig {
    pub fn bins(&self) -> usize {
        self.fft_size / 2 + 1
    }
}

/// Complex STFT grid, stored frame-major (`frame * bins + bin`).
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexSpectrogram {
    bins: usize,
    frames: usize,
    data: Vec<Complex64>,
    pub fft_size: usize,
    pub hop: usize,
    /// Length of the waveform this grid was computed from.
    pub n_samples: usize,
    /// Peak-normalisation factor applied to the source waveform (1.0 if none).
    pub norm_scale: f64,
}

impl ComplexSpectrogram {
    pub fn new(
        bins: usize,
        frames: usize,
        data: Vec<Complex64>,
        fft_size: usize,
        hop: usize,
        n_samples: usize,
    ) -> Result<Self, FrontendError> {
        if bins != fft_size / 2 + 1 {
            return Err(FrontendError::Shape(format!(
                "{bins} bins for fft size {fft_size}"
            )));
        }
        if data.len() != bins * frames {
            return Err(FrontendError::Shape(format!(
                "{} values for {bins}x{frames} grid",
                data.len()
            )));
        }
        Ok(Self {
            bins,
            frames,
            data,
            fft_size,
            hop,
            n_samples,
            norm_scale: 1.0,
        })
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn data(&self) -> &[Complex64] {
        &self.data
    }

    pub fn frame(&self, t: usize) -> &[Complex64] {
        &self.data[t * self.bins..(t + 1) * self.bins]
    }

    pub fn get(&self, bin: usize, frame: usize) -> Complex64 {
        self.data[frame * self.bins + bin]
    }

    pub fn map(&self, f: impl Fn(Complex64) -> Complex64) -> Self {
        Self {
            data: self.data.iter().map(|&z| f(z)).collect(),
            ..self.clone()
        }
    }

    /// `[frames, 2 * bins]` with interleaved `(re, im)` per bin.
    pub fn to_tensor(&self) -> Tensor {
        let data = self.data.iter().flat_map(|z| [z.re, z.im]).collect();
        Tensor::new(vec![self.frames, 2 * self.bins], data).expect("grid size is consistent")
    }

    /// Same framing metadata, frames replaced by the rows of `t`.
    pub fn with_tensor(&self, t: &Tensor) -> Result<Self, FrontendError> {
        if t.shape() != [self.frames, 2 * self.bins] {
            return Err(FrontendError::Shape(format!(
                "tensor {:?} does not match {}x{} grid",
                t.shape(),
                self.frames,
                self.bins
            )));
        }
        let data = t
            .data()
            .chunks_exact(2)
            .map(|p| Complex64::new(p[0], p[1]))
            .collect();
        Ok(Self {
            data,
            ..self.clone()
        })
    }
}

fn reflect(i: isize, len: usize) -> usize {
    if len == 1 {
        return 0;
    }
    let period = 2 * (len as isize - 1);
    let m = i.rem_euclid(period);
    if m >= len as isize {
        (period - m) as usize
    } else {
        m as usize
    }
}

/// Framing, windowing and transforms for one configuration.
#[derive(Debug, Clone)]
pub struct Stft {
    cfg: FrontendConfig,
    window: Vec<f64>,
    fft: Fft,
}

impl Stft {
    pub fn new(cfg: &FrontendConfig) -> Result<Self, FrontendError> {
        if cfg.hop == 0 || cfg.hop > cfg.fft_size {
            return Err(FrontendError::Hop {
                hop: cfg.hop,
                fft_size: cfg.fft_size,
            });
        }
        let fft = Fft::new(cfg.fft_size)?;
        let n = cfg.fft_size;
        let window = match cfg.window {
            WindowKind::HannPeriodic => (0..n)
                .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos())
                .collect(),
        };
        Ok(Self {
            cfg: cfg.clone(),
            window,
            fft,
        })
    }

    pub fn config(&self) -> &FrontendConfig {
        &self.cfg
    }

    pub fn frame_count(&self, n_samples: usize) -> usize {
        1 + n_samples / self.cfg.hop
    }

    /// Spectrum of one centred frame (`bins` values written to `out`).
    pub fn analyze_frame(&self, samples: &[f64], frame: usize, out: &mut [Complex64]) {
        let n = self.cfg.fft_size;
        let pad = (n / 2) as isize;
        let mut buf: Vec<Complex64> = (0..n)
            .map(|j| {
                let idx = reflect((frame * self.cfg.hop + j) as isize - pad, samples.len());
                Complex64::new(samples[idx] * self.window[j], 0.0)
            })
            .collect();
        self.fft.forward(&mut buf);
        out.copy_from_slice(&buf[..self.cfg.bins()]);
    }

    pub fn stft(&self, w: &Waveform) -> Result<ComplexSpectrogram, FrontendError> {
        let samples = w.samples();
        if samples.is_empty() {
            return Err(FrontendError::EmptyWaveform);
        }
        let bins = self.cfg.bins();
        let frames = self.frame_count(samples.len());
        let mut data = vec![Complex64::new(0.0, 0.0); bins * frames];
        for (t, chunk) in data.chunks_exact_mut(bins).enumerate() {
            self.analyze_frame(samples, t, chunk);
        }
        ComplexSpectrogram::new(
            bins,
            frames,
            data,
            self.cfg.fft_size,
            self.cfg.hop,
            samples.len(),
        )
    }

    /// Weighted overlap-add synthesis, normalised by the summed squared window.
    pub fn istft(&self, s: &ComplexSpectrogram) -> Result<Waveform, FrontendError> {
        let n = self.cfg.fft_size;
        if s.fft_size != n || s.hop != self.cfg.hop || s.bins() != self.cfg.bins() {
            return Err(FrontendError::Shape(format!(
                "spectrogram framed with fft {} hop {}, synthesis configured for fft {} hop {}",
                s.fft_size, s.hop, n, self.cfg.hop
            )));
        }
        let hop = self.cfg.hop;
        let pad = n / 2;
        let padded_len = (s.frames() - 1) * hop + n;
        let mut acc = vec![0.0; padded_len];
        let mut wsum = vec![0.0; padded_len];
        let mut buf = vec![Complex64::new(0.0, 0.0); n];
        for t in 0..s.frames() {
            let frame = s.frame(t);
            buf[..frame.len()].copy_from_slice(frame);
            for k in 1..n / 2 {
                buf[n - k] = frame[k].conj();
            }
            // Imaginary parts of DC and Nyquist cannot survive a real signal.
            buf[0].im = 0.0;
            buf[n / 2].im = 0.0;
            self.fft.inverse(&mut buf);
            let base = t * hop;
            for j in 0..n {
                acc[base + j] += buf[j].re * self.window[j];
                wsum[base + j] += self.window[j] * self.window[j];
            }
        }
        let mut out = Vec::with_capacity(s.n_samples);
        for i in 0..s.n_samples {
            let p = i + pad;
            let ws = wsum.get(p).copied().unwrap_or(0.0);
            if ws < MIN_WINDOW_SUM {
                return Err(FrontendError::WindowSum { sample: i, sum: ws });
            }
            out.push(acc[p] / ws);
        }
        Waveform::new(out, super::SAMPLE_RATE)
    }
}
