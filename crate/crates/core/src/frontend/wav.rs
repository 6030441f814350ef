use std::path::Path;

use super::{FrontendError, Waveform, SAMPLE_RATE};

/// On-disk sample encoding.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WavFormat {
    Pcm16,
    Float32,
}

pub fn read_wav(path: impl AsRef<Path>) -> Result<Waveform, FrontendError> {
    let mut reader = hound::WavReader::open(path)?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(FrontendError::Channels(spec.channels));
    }
    if spec.sample_rate != SAMPLE_RATE {
        return Err(FrontendError::SampleRate(spec.sample_rate));
    }
    let samples = match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Int, 16) => reader
            .samples::<i16>()
            .map(|s| s.map(|v| v as f64 / 32768.0))
            .collect::<Result<Vec<_>, _>>()?,
        (hound::SampleFormat::Float, 32) => reader
            .samples::<f32>()
            .map(|s| s.map(|v| v as f64))
            .collect::<Result<Vec<_>, _>>()?,
        (fmt, bits) => return Err(FrontendError::WavFormat(format!("{fmt:?} {bits}-bit"))),
    };
    Waveform::new(samples, spec.sample_rate)
}

pub fn write_wav(
    path: impl AsRef<Path>,
    w: &Waveform,
    format: WavFormat,
) -> Result<(), FrontendError> {
    let (sample_format, bits) = match format {
        WavFormat::Pcm16 => (hound::SampleFormat::Int, 16),
        WavFormat::Float32 => (hound::SampleFormat::Float, 32),
    };
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: w.sample_rate(),
        bits_per_sample: bits,
        sample_format,
    };
    let mut writer = hound::WavWriter::create(path, spec)?;
    for &s in w.samples() {
        match format {
            WavFormat::Pcm16 => {
                let v = (s * 32768.0)
                    .round()
                    .clamp(i16::MIN as f64, i16::MAX as f64) as i16;
                writer.write_sample(v)?;
            }
            WavFormat::Float32 => writer.write_sample(s as f32)?,
        }
    }
    writer.finalize()?;
    Ok(())
}
