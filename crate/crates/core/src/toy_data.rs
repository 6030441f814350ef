//! Deterministic synthetic speech-enhancement corpus.
//!
//! Clean signals are harmonic stacks with a gently modulated pitch and a smooth
//! amplitude envelope. Noise is white, pink or a resonant AR(2) process, scaled to
//! an exact SNR. Every utterance is a pure function of `(seed, split, index)`.

use std::f64::consts::PI;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::frontend::{read_wav, write_wav, FrontendError, WavFormat, Waveform, SAMPLE_RATE};
use crate::rng::{stream, Domain};
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("invalid corpus spec: {0}")]
    Spec(String),
    #[error("index {index} out of range for {split} split of size {size}")]
    Index {
        split: Split,
        index: usize,
        size: usize,
    },
    #[error("manifest {path}:{line}: {msg}")]
    Manifest {
        path: PathBuf,
        line: usize,
        msg: String,
    },
    #[error("utterance {id}: {source}")]
    Audio {
        id: String,
        #[source]
        source: FrontendError,
    },
    #[error(transparent)]
    Frontend(#[from] FrontendError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, CorpusError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseColor {
    White,
    Pink,
    /// Resonant second-order autoregressive noise.
    Ar2,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    fn domain(self) -> Domain {
        match self {
            Split::Train => Domain::TrainCorpus,
            Split::Val => Domain::ValCorpus,
            Split::Test => Domain::TestCorpus,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusSpec {
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub duration_s: f64,
    pub f0_min: f64,
    pub f0_max: f64,
    pub harmonics_min: usize,
    pub harmonics_max: usize,
    pub noise_colors: Vec<NoiseColor>,
    /// SNRs for the train and validation splits.
    pub train_snr_db: Vec<f64>,
    /// SNRs for the test split; disjoint from the training set by default.
    pub test_snr_db: Vec<f64>,
    pub seed: u64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            n_train: 160,
            n_val: 16,
            n_test: 24,
            duration_s: 2.0,
            f0_min: 100.0,
            f0_max: 300.0,
            harmonics_min: 3,
            harmonics_max: 8,
            noise_colors: vec![NoiseColor::White, NoiseColor::Pink, NoiseColor::Ar2],
            train_snr_db: vec![0.0, 5.0, 10.0, 15.0],
            test_snr_db: vec![2.5, 7.5, 12.5],
            seed: 0,
        }
    }
}

impl CorpusSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CorpusError::Spec(m));
        if !(self.duration_s > 0.0) {
            return bad(format!("duration_s must be > 0, got {}", self.duration_s));
        }
        if !(0.0 < self.f0_min && self.f0_min <= self.f0_max) {
            return bad(format!("bad f0 range [{}, {}]", self.f0_min, self.f0_max));
        }
        if self.harmonics_min == 0
            || self.harmonics_min > self.harmonics_max
            || self.harmonics_max > 8
        {
            return bad(format!(
                "harmonic count range [{}, {}] must lie within [1, 8]",
                self.harmonics_min, self.harmonics_max
            ));
        }
        if self.noise_colors.is_empty() {
            return bad("noise_colors is empty".into());
        }
        if self.train_snr_db.is_empty() || self.test_snr_db.is_empty() {
            return bad("SNR lists must be non-empty".into());
        }
        if self
            .train_snr_db
            .iter()
            .chain(&self.test_snr_db)
            .any(|s| s.is_nan())
        {
            return bad("SNR values must not be NaN".into());
        }
        Ok(())
    }

    pub fn size(&self, split: Split) -> usize {
        match split {
            Split::Train => self.n_train,
            Split::Val => self.n_val,
            Split::Test => self.n_test,
        }
    }

    pub fn snrs(&self, split: Split) -> &[f64] {
        match split {
            Split::Test => &self.test_snr_db,
            _ => &self.train_snr_db,
        }
    }

    pub fn n_samples(&self) -> usize {
        (self.duration_s * SAMPLE_RATE as f64).round() as usize
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairedUtterance {
    pub id: String,
    pub clean: Waveform,
    pub noisy: Waveform,
    /// `None` when the noisy signal equals the clean one.
    pub snr_db: Option<f64>,
    pub noise: NoiseColor,
}

fn power(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>() / x.len().max(1) as f64
}

/// `10·log10(P_clean / P_residual)` with residual `noisy − clean`.
pub fn measured_snr_db(clean: &[f64], noisy: &[f64]) -> f64 {
    let residual: Vec<f64> = noisy.iter().zip(clean).map(|(n, c)| n - c).collect();
    10.0 * (power(clean) / power(&residual)).log10()
}

fn harmonic_stack<R: Rng>(spec: &CorpusSpec, n: usize, rng: &mut R) -> Vec<f64> {
    let fs = SAMPLE_RATE as f64;
    let f0 = rng.gen_range(spec.f0_min..=spec.f0_max);
    let k = rng.gen_range(spec.harmonics_min..=spec.harmonics_max);
    let amps: Vec<f64> = (1..=k)
        .map(|h| rng.gen_range(0.4..1.0) / h as f64)
        .collect();
    let phases: Vec<f64> = (0..k).map(|_| rng.gen_range(0.0..2.0 * PI)).collect();
    let (vib_rate, vib_depth, vib_phase) = (
        rng.gen_range(2.0..6.0),
        rng.gen_range(0.0..0.04),
        rng.gen_range(0.0..2.0 * PI),
    );
    let env: Vec<(f64, f64, f64)> = (0..2)
        .map(|_| {
            (
                rng.gen_range(0.5..4.0),
                rng.gen_range(0.0..2.0 * PI),
                rng.gen_range(0.2..0.45),
            )
        })
        .collect();
    let fade = (0.01 * fs) as usize;
    let mut phase = 0.0;
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let t = i as f64 / fs;
        let f = f0 * (1.0 + vib_depth * (2.0 * PI * vib_rate * t + vib_phase).sin());
        phase += 2.0 * PI * f / fs;
        let mut s = 0.0;
        for (h, (&a, &p)) in amps.iter().zip(&phases).enumerate() {
            let hf = (h + 1) as f64;
            if hf * f < 0.45 * fs {
                s += a * (hf * phase + p).sin();
            }
        }
        let mut e = 1.0;
        for &(rate, ph, depth) in &env {
            e *= 1.0 - depth + depth * (2.0 * PI * rate * t + ph).sin();
        }
        let ramp = (i.min(n - 1 - i) as f64 / fade as f64).min(1.0);
        out.push(s * e * ramp);
    }
    out
}

fn noise<R: Rng>(color: NoiseColor, n: usize, rng: &mut R) -> Vec<f64> {
    let mut white = || -> f64 { StandardNormal.sample(&mut *rng) };
    match color {
        NoiseColor::White => (0..n).map(|_| white()).collect(),
        NoiseColor::Pink => {
            // Kellet's economy pink filter.
            let (mut b0, mut b1, mut b2) = (0.0, 0.0, 0.0);
            (0..n)
                .map(|_| {
                    let w = white();
                    b0 = 0.99765 * b0 + w * 0.0990460;
                    b1 = 0.96300 * b1 + w * 0.2965164;
                    b2 = 0.57000 * b2 + w * 1.0526913;
                    b0 + b1 + b2 + w * 0.1848
                })
                .collect()
        }
        NoiseColor::Ar2 => {
            let (rho, fc) = (rng.gen_range(0.85..0.97), rng.gen_range(300.0..3000.0));
            let a1 = 2.0 * rho * (2.0 * PI * fc / SAMPLE_RATE as f64).cos();
            let a2 = -rho * rho;
            let (mut y1, mut y2) = (0.0, 0.0);
            let mut white = || -> f64 { StandardNormal.sample(&mut *rng) };
            let burn = 256;
            let mut out = Vec::with_capacity(n);
            for i in 0..n + burn {
                let y = a1 * y1 + a2 * y2 + white();
                y2 = y1;
                y1 = y;
                if i >= burn {
                    out.push(y);
                }
            }
            out
        }
    }
}

fn utterance_id(split: Split, index: usize) -> String {
    format!("{}-{index:05}", split.name())
}

/// Pair `index` of `split`, using the split's SNR list cyclically.
pub fn generate_pair(spec: &CorpusSpec, split: Split, index: usize) -> Result<PairedUtterance> {
    let size = spec.size(split);
    if index >= size {
        return Err(CorpusError::Index { split, index, size });
    }
    let snrs = spec.snrs(split);
    generate_pair_with_snr(spec, split, index, snrs[index % snrs.len()])
}

/// Pair `index` at an explicit SNR; `f64::INFINITY` yields `noisy == clean`.
pub fn generate_pair_with_snr(
    spec: &CorpusSpec,
    split: Split,
    index: usize,
    snr_db: f64,
) -> Result<PairedUtterance> {
    spec.validate()?;
    let n = spec.n_samples();
    let mut rng = stream(spec.seed, split.domain(), index as u64);
    let mut clean = harmonic_stack(spec, n, &mut rng);
    let peak = clean.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let level = rng.gen_range(0.3..0.7) / peak.max(1e-12);
    clean.iter_mut().for_each(|v| *v *= level);
    let color = spec.noise_colors[rng.gen_range(0..spec.noise_colors.len())];
    let raw = noise(color, n, &mut rng);
    let (noisy, snr) = if snr_db == f64::INFINITY {
        (clean.clone(), None)
    } else {
        let gain = (power(&clean) / (power(&raw) * 10f64.powf(snr_db / 10.0))).sqrt();
        let mut noisy: Vec<f64> = clean.iter().zip(&raw).map(|(c, w)| c + gain * w).collect();
        let npeak = noisy.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if npeak > 0.99 {
            let s = 0.99 / npeak;
            clean.iter_mut().for_each(|v| *v *= s);
            noisy.iter_mut().for_each(|v| *v *= s);
        }
        (noisy, Some(snr_db))
    };
    Ok(PairedUtterance {
        id: utterance_id(split, index),
        clean: Waveform::new(clean, SAMPLE_RATE)?,
        noisy: Waveform::new(noisy, SAMPLE_RATE)?,
        snr_db: snr,
        noise: color,
    })
}

pub fn generate_split(spec: &CorpusSpec, split: Split) -> Result<Vec<PairedUtterance>> {
    (0..spec.size(split))
        .map(|i| generate_pair(spec, split, i))
        .collect()
}

/// Small vector problem: clean points `x1` and noisy observations `y = x1 + s·ε`.
pub fn toy_pairs_2d(n: usize, noise_scale: f64, seed: u64) -> (Tensor, Tensor) {
    let mut rng = stream(seed, Domain::TrainCorpus, u64::from(u32::MAX));
    let mut x1 = Vec::with_capacity(2 * n);
    let mut y = Vec::with_capacity(2 * n);
    for _ in 0..n {
        let angle = rng.gen_range(0.0..2.0 * PI);
        let p = [angle.cos(), angle.sin()];
        for v in p {
            let e: f64 = StandardNormal.sample(&mut rng);
            x1.push(v);
            y.push(v + noise_scale * e);
        }
    }
    (
        Tensor::new(vec![n, 2], x1).expect("2n values"),
        Tensor::new(vec![n, 2], y).expect("2n values"),
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    /// Relative to the manifest's directory unless absolute.
    pub clean_path: String,
    pub noisy_path: String,
    pub snr_db: Option<f64>,
}

pub fn manifest_path(root: &Path, split: Split) -> PathBuf {
    root.join(format!("{}.jsonl", split.name()))
}

/// Writes every split as WAV pairs plus one JSON-lines manifest per split.
pub fn write_corpus(spec: &CorpusSpec, root: &Path) -> Result<Vec<PathBuf>> {
    spec.validate()?;
    let mut manifests = Vec::new();
    for split in Split::ALL {
        let dir = root.join(split.name());
        fs::create_dir_all(&dir)?;
        let path = manifest_path(root, split);
        let mut out = fs::File::create(&path)?;
        for i in 0..spec.size(split) {
            let pair = generate_pair(spec, split, i)?;
            let clean = format!("{}/{}_clean.wav", split.name(), pair.id);
            let noisy = format!("{}/{}_noisy.wav", split.name(), pair.id);
            write_wav(root.join(&clean), &pair.clean, WavFormat::Float32)?;
            write_wav(root.join(&noisy), &pair.noisy, WavFormat::Float32)?;
            let entry = ManifestEntry {
                id: pair.id,
                clean_path: clean,
                noisy_path: noisy,
                snr_db: pair.snr_db,
            };
            writeln!(out, "{}", serde_json::to_string(&entry)?)?;
        }
        manifests.push(path);
    }
    Ok(manifests)
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let file = fs::File::open(path)?;
    let mut entries = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let e = serde_json::from_str(&line).map_err(|e| CorpusError::Manifest {
            path: path.to_path_buf(),
            line: i + 1,
            msg: e.to_string(),
        })?;
        entries.push(e);
    }
    Ok(entries)
}

/// Loads `(clean, noisy)` for one manifest entry.
pub fn load_pair(manifest_dir: &Path, entry: &ManifestEntry) -> Result<(Waveform, Waveform)> {
    let load = |p: &str| {
        read_wav(manifest_dir.join(p)).map_err(|source| CorpusError::Audio {
            id: entry.id.clone(),
            source,
        })
    };
    Ok((load(&entry.clean_path)?, load(&entry.noisy_path)?))
}
