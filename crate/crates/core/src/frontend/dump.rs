//! Binary spectrogram dump.
//!
//! Layout (little-endian): `b"MFSE"`, version `u32`, then `F`, `T`, `fft_size`, `hop`
//! as `u32`, followed by the `F×T` grid in row-major order (bin-major, frame
//! fastest) as interleaved `f32` `(re, im)` pairs.

use num_complex::Complex64;
use std::io::{Read, Write};

use super::{ComplexSpectrogram, FrontendError};

pub const DUMP_MAGIC: &[u8; 4] = b"MFSE";
pub const DUMP_VERSION: u32 = 1;

pub fn write_spectrogram<W: Write>(
    mut out: W,
    s: &ComplexSpectrogram,
) -> Result<(), FrontendError> {
    out.write_all(DUMP_MAGIC)?;
    for v in [
        DUMP_VERSION,
        s.bins() as u32,
        s.frames() as u32,
        s.fft_size as u32,
        s.hop as u32,
    ] {
        out.write_all(&v.to_le_bytes())?;
    }
    let mut buf = Vec::with_capacity(s.bins() * s.frames() * 8);
    for f in 0..s.bins() {
        for t in 0..s.frames() {
            let z = s.get(f, t);
            buf.extend_from_slice(&(z.re as f32).to_le_bytes());
            buf.extend_from_slice(&(z.im as f32).to_le_bytes());
        }
    }
    out.write_all(&buf)?;
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32, FrontendError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

/// Reads a dump. The original waveform length is not stored, so `n_samples` is
/// reconstructed as `(T - 1) * hop`.
pub fn read_spectrogram<R: Read>(mut r: R) -> Result<ComplexSpectrogram, FrontendError> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != DUMP_MAGIC {
        return Err(FrontendError::Dump(format!("magic {magic:?}")));
    }
    let version = read_u32(&mut r)?;
    if version != DUMP_VERSION {
        return Err(FrontendError::Dump(format!("version {version}")));
    }
    let bins = read_u32(&mut r)? as usize;
    let frames = read_u32(&mut r)? as usize;
    let fft_size = read_u32(&mut r)? as usize;
    let hop = read_u32(&mut r)? as usize;
    let mut payload = vec![0u8; bins * frames * 8];
    r.read_exact(&mut payload)?;
    let mut data = vec![Complex64::new(0.0, 0.0); bins * frames];
    for (i, chunk) in payload.chunks_exact(8).enumerate() {
        let (f, t) = (i / frames, i % frames);
        let re = f32::from_le_bytes(chunk[..4].try_into().unwrap());
        let im = f32::from_le_bytes(chunk[4..].try_into().unwrap());
        data[t * bins + f] = Complex64::new(re as f64, im as f64);
    }
    ComplexSpectrogram::new(
        bins,
        frames,
        data,
        fft_size,
        hop,
        frames.saturating_sub(1) * hop,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_layout_and_roundtrip() {
        let bins = 5;
        let frames = 3;
        let data: Vec<Complex64> = (0..bins * frames)
            .map(|i| Complex64::new(i as f64 * 0.5, -(i as f64)))
            .collect();
        let s = ComplexSpectrogram::new(bins, frames, data, 8, 2, 4).unwrap();
        let mut bytes = Vec::new();
        write_spectrogram(&mut bytes, &s).unwrap();
        assert_eq!(&bytes[..4], b"MFSE");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 5);
        assert_eq!(u32::from_le_bytes(bytes[12..16].try_into().unwrap()), 3);
        assert_eq!(bytes.len(), 24 + bins * frames * 8);
        // First payload value is bin 0 frame 0, second is bin 0 frame 1.
        let second_re = f32::from_le_bytes(bytes[32..36].try_into().unwrap());
        assert_eq!(second_re as f64, s.get(0, 1).re);

        let back = read_spectrogram(bytes.as_slice()).unwrap();
        assert_eq!(back.data(), s.data());
        assert_eq!((back.fft_size, back.hop), (8, 2));
    }

    #[test]
    fn bad_magic_rejected() {
        let bytes = b"NOPE\x01\x00\x00\x00".to_vec();
        assert!(matches!(
            read_spectrogram(bytes.as_slice()),
            Err(FrontendError::Dump(_))
        ));
    }
}
