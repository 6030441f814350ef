//! Waveform ⇄ compressed complex spectrogram.
//!
//! The chain is: peak normalisation by the noisy signal, centred Hann STFT, then
//! magnitude compression `0.15·|z|^0.5·e^{j∠z}`. Each stage is a separate function
//! so the inverse path can be checked stage by stage.

mod dump;
mod fft;
mod stft;
mod wav;

pub use dump::{read_spectrogram, write_spectrogram, DUMP_MAGIC, DUMP_VERSION};
pub use fft::Fft;
pub use stft::{ComplexSpectrogram, FrontendConfig, Stft, WindowKind, MIN_WINDOW_SUM};
pub use wav::{read_wav, write_wav, WavFormat};

use num_complex::Complex64;
use thiserror::Error;

pub const SAMPLE_RATE: u32 = 16_000;

/// Exponent applied to spectral magnitudes.
pub const COMPRESS_EXPONENT: f64 = 0.5;
/// Global factor applied after magnitude compression.
pub const COMPRESS_SCALE: f64 = 0.15;

#[derive(Debug, Error)]
pub enum FrontendError {
    #[error("waveform is empty")]
    EmptyWaveform,
    #[error("sample rate {0} Hz is not supported (expected 16000)")]
    SampleRate(u32),
    #[error("non-finite sample at index {0}")]
    NonFinite(usize),
    #[error("noisy waveform is silent; cannot peak-normalise")]
    SilentInput,
    #[error("fft size {0} is not a power of two")]
    FftSize(usize),
    #[error("hop {hop} invalid for fft size {fft_size}")]
    Hop { hop: usize, fft_size: usize },
    #[error("overlap-add window sum {sum:e} below threshold at sample {sample}")]
    WindowSum { sample: usize, sum: f64 },
    #[error("shape: {0}")]
    Shape(String),
    #[error("{0} channels; only mono audio is supported")]
    Channels(u16),
    #[error("unsupported wav sample format: {0}")]
    WavFormat(String),
    #[error("bad spectrogram dump: {0}")]
    Dump(String),
    #[error(transparent)]
    Wav(#[from] hound::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Mono 16 kHz audio.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    samples: Vec<f64>,
    sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self, FrontendError> {
        if sample_rate != SAMPLE_RATE {
            return Err(FrontendError::SampleRate(sample_rate));
        }
        if let Some(i) = samples.iter().position(|v| !v.is_finite()) {
            return Err(FrontendError::NonFinite(i));
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<f64> {
        self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn peak(&self) -> f64 {
        self.samples.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn scaled(&self, c: f64) -> Waveform {
        Waveform {
            samples: self.samples.iter().map(|v| v * c).collect(),
            sample_rate: self.sample_rate,
        }
    }
}

/// Divides both signals by the noisy peak. Returns `(noisy, clean, peak)`.
pub fn peak_normalize(
    noisy: &Waveform,
    clean: &Waveform,
) -> Result<(Waveform, Waveform, f64), FrontendError> {
    let peak = noisy.peak();
    if peak <= 0.0 {
        return Err(FrontendError::SilentInput);
    }
    let inv = 1.0 / peak;
    Ok((noisy.scaled(inv), clean.scaled(inv), peak))
}

/// Undoes [`peak_normalize`] on an enhanced signal.
pub fn denormalize(w: &Waveform, norm_scale: f64) -> Waveform {
    w.scaled(norm_scale)
}

pub fn compress(z: Complex64) -> Complex64 {
    let mag = z.norm();
    if mag == 0.0 {
        return Complex64::new(0.0, 0.0);
    }
    z * (COMPRESS_SCALE * mag.powf(COMPRESS_EXPONENT) / mag)
}

pub fn decompress(z: Complex64) -> Complex64 {
    let mag = z.norm();
    if mag == 0.0 {
        return Complex64::new(0.0, 0.0);
    }
    let orig = (mag / COMPRESS_SCALE).powf(1.0 / COMPRESS_EXPONENT);
    z * (orig / mag)
}

pub fn compress_spec(s: &ComplexSpectrogram) -> ComplexSpectrogram {
    s.map(compress)
}

pub fn decompress_spec(s: &ComplexSpectrogram) -> ComplexSpectrogram {
    s.map(decompress)
}

/// The full analysis chain for an enhancement input.
#[derive(Debug, Clone)]
pub struct Frontend {
    stft: Stft,
}

impl Frontend {
    pub fn new(cfg: &FrontendConfig) -> Result<Self, FrontendError> {
        Ok(Self {
            stft: Stft::new(cfg)?,
        })
    }

    pub fn stft(&self) -> &Stft {
        &self.stft
    }

    /// Normalise by the peak of `noisy`, transform and compress.
    pub fn analyze(&self, noisy: &Waveform) -> Result<ComplexSpectrogram, FrontendError> {
        let (norm, _, scale) = peak_normalize(noisy, noisy)?;
        let mut spec = compress_spec(&self.stft.stft(&norm)?);
        spec.norm_scale = scale;
        Ok(spec)
    }

    /// Like [`Frontend::analyze`] for a pair, both normalised by the noisy peak.
    pub fn analyze_pair(
        &self,
        noisy: &Waveform,
        clean: &Waveform,
    ) -> Result<(ComplexSpectrogram, ComplexSpectrogram), FrontendError> {
        let (n, c, scale) = peak_normalize(noisy, clean)?;
        let mut ns = compress_spec(&self.stft.stft(&n)?);
        let mut cs = compress_spec(&self.stft.stft(&c)?);
        ns.norm_scale = scale;
        cs.norm_scale = scale;
        Ok((ns, cs))
    }

    /// Decompress, invert the STFT and restore the original amplitude.
    pub fn synthesize(&self, spec: &ComplexSpectrogram) -> Result<Waveform, FrontendError> {
        let w = self.stft.istft(&decompress_spec(spec))?;
        Ok(denormalize(&w, spec.norm_scale))
    }
}
