//! Waveform and spectral quality measures plus corpus-level reports.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::frontend::{FrontendConfig, FrontendError, Stft, Waveform};
use crate::toy_data::{load_pair, CorpusError, ManifestEntry};

/// Upper bound reported for SI-SDR and SNR when the error signal vanishes.
pub const METRIC_CAP_DB: f64 = 100.0;
const LOG_POWER_FLOOR: f64 = 1e-10;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("length mismatch: estimate {estimate} vs reference {reference}")]
    Length { estimate: usize, reference: usize },
    #[error("reference signal is all zeros")]
    ZeroReference,
    #[error("manifest has no entries")]
    EmptyManifest,
    #[error("utterance {id}: {msg}")]
    Utterance { id: String, msg: String },
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Frontend(#[from] FrontendError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, MetricsError>;

fn check(est: &[f64], reference: &[f64]) -> Result<f64> {
    if est.len() != reference.len() {
        return Err(MetricsError::Length {
            estimate: est.len(),
            reference: reference.len(),
        });
    }
    let rr: f64 = reference.iter().map(|v| v * v).sum();
    if rr == 0.0 {
        return Err(MetricsError::ZeroReference);
    }
    Ok(rr)
}

fn ratio_db(signal: f64, error: f64) -> f64 {
    if error <= 0.0 {
        return METRIC_CAP_DB;
    }
    (10.0 * (signal / error).log10()).min(METRIC_CAP_DB)
}

/// Scale-invariant SDR in dB, capped at [`METRIC_CAP_DB`].
pub fn si_sdr_samples(estimate: &[f64], reference: &[f64]) -> Result<f64> {
    let rr = check(estimate, reference)?;
    let alpha = estimate
        .iter()
        .zip(reference)
        .map(|(e, r)| e * r)
        .sum::<f64>()
        / rr;
    let (mut sig, mut err) = (0.0, 0.0);
    for (&e, &r) in estimate.iter().zip(reference) {
        let s = alpha * r;
        sig += s * s;
        err += (e - s) * (e - s);
    }
    Ok(ratio_db(sig, err))
}

pub fn si_sdr(estimate: &Waveform, reference: &Waveform) -> Result<f64> {
    si_sdr_samples(estimate.samples(), reference.samples())
}

/// Plain SNR of `estimate` against `reference`, capped at [`METRIC_CAP_DB`].
pub fn snr_db(estimate: &Waveform, reference: &Waveform) -> Result<f64> {
    let (e, r) = (estimate.samples(), reference.samples());
    let rr = check(e, r)?;
    let err: f64 = e.iter().zip(r).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(ratio_db(rr, err))
}

/// Mean squared difference of log10 power spectra over all STFT cells.
pub fn spectral_log_mse(
    estimate: &Waveform,
    reference: &Waveform,
    cfg: &FrontendConfig,
) -> Result<f64> {
    check(estimate.samples(), reference.samples())?;
    let stft = Stft::new(cfg)?;
    let (e, r) = (stft.stft(estimate)?, stft.stft(reference)?);
    let n = e.data().len();
    let sum: f64 = e
        .data()
        .iter()
        .zip(r.data())
        .map(|(a, b)| {
            let d =
                (a.norm_sqr() + LOG_POWER_FLOOR).log10() - (b.norm_sqr() + LOG_POWER_FLOOR).log10();
            d * d
        })
        .sum();
    Ok(sum / n as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UtteranceMetrics {
    pub id: String,
    pub si_sdr_db: f64,
    pub noisy_si_sdr_db: f64,
    pub spectral_log_mse: f64,
    pub snr_db: f64,
    pub nfe: usize,
    pub rtf: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeanMetrics {
    pub si_sdr_db: f64,
    pub noisy_si_sdr_db: f64,
    pub spectral_log_mse: f64,
    pub snr_db: f64,
    pub nfe: f64,
    pub rtf: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub system: String,
    pub utterances: Vec<UtteranceMetrics>,
    pub mean: MeanMetrics,
}

fn mean_of(u: &[UtteranceMetrics], f: impl Fn(&UtteranceMetrics) -> f64) -> f64 {
    u.iter().map(f).sum::<f64>() / u.len() as f64
}

impl MetricsReport {
    pub fn new(system: impl Into<String>, utterances: Vec<UtteranceMetrics>) -> Result<Self> {
        if utterances.is_empty() {
            return Err(MetricsError::EmptyManifest);
        }
        let mean = MeanMetrics {
            si_sdr_db: mean_of(&utterances, |u| u.si_sdr_db),
            noisy_si_sdr_db: mean_of(&utterances, |u| u.noisy_si_sdr_db),
            spectral_log_mse: mean_of(&utterances, |u| u.spectral_log_mse),
            snr_db: mean_of(&utterances, |u| u.snr_db),
            nfe: mean_of(&utterances, |u| u.nfe as f64),
            rtf: mean_of(&utterances, |u| u.rtf),
        };
        Ok(Self {
            system: system.into(),
            utterances,
            mean,
        })
    }

    /// Mean SI-SDR improvement over the unprocessed input.
    pub fn si_sdr_gain_db(&self) -> f64 {
        self.mean.si_sdr_db - self.mean.noisy_si_sdr_db
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Aligned table with a leading `Noisy` row taken from the first report.
pub fn render_table(reports: &[MetricsReport]) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<24} {:>6} {:>10} {:>10} {:>8}",
        "System", "NFE", "SI-SDR", "LogSpecMSE", "RTF"
    );
    if let Some(first) = reports.first() {
        let _ = writeln!(
            out,
            "{:<24} {:>6} {:>10.3} {:>10} {:>8}",
            "Noisy", "-", first.mean.noisy_si_sdr_db, "-", "-"
        );
    }
    for r in reports {
        let _ = writeln!(
            out,
            "{:<24} {:>6} {:>10.3} {:>10.4} {:>8.4}",
            r.system,
            format_nfe(r.mean.nfe),
            r.mean.si_sdr_db,
            r.mean.spectral_log_mse,
            r.mean.rtf
        );
    }
    out
}

fn format_nfe(nfe: f64) -> String {
    if nfe.fract() == 0.0 {
        format!("{}", nfe as usize)
    } else {
        format!("{nfe:.2}")
    }
}

/// Output of one enhancement call inside [`evaluate_corpus`].
#[derive(Debug, Clone)]
pub struct Enhanced {
    pub waveform: Waveform,
    pub nfe: usize,
    pub rtf: f64,
}

/// Runs `enhance` on every noisy file of a manifest and scores it against the clean file.
pub fn evaluate_corpus<E: std::fmt::Display>(
    entries: &[ManifestEntry],
    manifest_dir: &Path,
    system: &str,
    frontend: &FrontendConfig,
    mut enhance: impl FnMut(&ManifestEntry, &Waveform) -> std::result::Result<Enhanced, E>,
) -> Result<MetricsReport> {
    if entries.is_empty() {
        return Err(MetricsError::EmptyManifest);
    }
    let mut rows = Vec::with_capacity(entries.len());
    for entry in entries {
        let (clean, noisy) = load_pair(manifest_dir, entry)?;
        let wrap = |msg: String| MetricsError::Utterance {
            id: entry.id.clone(),
            msg,
        };
        let out = enhance(entry, &noisy).map_err(|e| wrap(e.to_string()))?;
        let score = || -> Result<UtteranceMetrics> {
            Ok(UtteranceMetrics {
                id: entry.id.clone(),
                si_sdr_db: si_sdr(&out.waveform, &clean)?,
                noisy_si_sdr_db: si_sdr(&noisy, &clean)?,
                spectral_log_mse: spectral_log_mse(&out.waveform, &clean, frontend)?,
                snr_db: snr_db(&out.waveform, &clean)?,
                nfe: out.nfe,
                rtf: out.rtf,
            })
        };
        rows.push(score().map_err(|e| wrap(e.to_string()))?);
    }
    MetricsReport::new(system, rows)
}
