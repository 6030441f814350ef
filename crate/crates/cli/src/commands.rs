use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use anyhow::{bail, Context, Result};
use mfse_core::field::{Checkpoint, CheckpointDtype, DifferentiableField, FieldNetwork};
use mfse_core::frontend::{read_wav, write_wav, Frontend, WavFormat, Waveform};
use mfse_core::metrics::{evaluate_corpus, render_table, Enhanced, MetricsReport};
use mfse_core::objective::TargetMutation;
use mfse_core::rng::{stream, Domain};
use mfse_core::sampler::{measure_rtf, Pipeline, RunRecord, SamplerMode};
use mfse_core::toy_data::{
    load_pair, manifest_path, measured_snr_db, read_manifest, write_corpus, ManifestEntry, Split,
};
use mfse_core::trainer::{fit, FitOptions, TrainState, TrainingSet, LATEST_CHECKPOINT};
use mfse_core::verify::{run_suite, VerifyOptions};
use serde::Serialize;

use crate::config::{resolve, usage, worker_count, RunConfig};
use crate::{
    BenchArgs, Cli, Command, EnhanceArgs, GenCorpusArgs, ModeArg, MutationArg, TrainArgs,
    VerifyArgs,
};

/// Runs one subcommand; `Ok(false)` signals a failed verification.
pub fn run(cli: Cli) -> Result<bool> {
    let workdir = cli.workdir.clone();
    let cfg = RunConfig::load(cli.config.as_ref().map(|p| resolve(&workdir, p)).as_deref())?;
    match cli.command {
        Command::GenCorpus(a) => gen_corpus(&workdir, cfg, a).map(|_| true),
        Command::Train(a) => train(&workdir, cfg, a).map(|_| true),
        Command::Enhance(a) => enhance(&workdir, cfg, a).map(|_| true),
        Command::Verify(a) => verify(&workdir, cfg, a),
        Command::Bench(a) => bench(&workdir, cfg, a).map(|_| true),
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, serde_json::to_string_pretty(value)?)
        .with_context(|| format!("writing {}", path.display()))
}

fn gen_corpus(workdir: &Path, mut cfg: RunConfig, a: GenCorpusArgs) -> Result<()> {
    let spec = &mut cfg.corpus;
    if let Some(s) = a.seed {
        spec.seed = s;
    }
    if let Some(n) = a.n_train {
        spec.n_train = n;
    }
    if let Some(n) = a.n_val {
        spec.n_val = n;
    }
    if let Some(n) = a.n_test {
        spec.n_test = n;
    }
    if let Some(d) = a.duration {
        spec.duration_s = d;
    }
    cfg.validate()?;
    let out = resolve(workdir, &a.out);
    if out.exists() && fs::read_dir(&out)?.next().is_some() {
        if !a.force {
            return Err(usage(format!(
                "{} exists and is not empty; pass --force to replace it",
                out.display()
            )));
        }
        fs::remove_dir_all(&out)?;
    }
    fs::create_dir_all(&out)?;
    let manifests = write_corpus(&cfg.corpus, &out)?;
    cfg.write_resolved(&out)?;
    let mut worst: f64 = 0.0;
    for split in Split::ALL {
        for e in read_manifest(&manifest_path(&out, split))? {
            if let Some(target) = e.snr_db {
                let (clean, noisy) = load_pair(&out, &e)?;
                worst =
                    worst.max((measured_snr_db(clean.samples(), noisy.samples()) - target).abs());
            }
        }
    }
    if worst >= 0.1 {
        bail!("generated SNR deviates from its target by {worst:.3} dB");
    }
    for m in manifests {
        println!("{}", m.display());
    }
    println!("max SNR deviation {worst:.2e} dB");
    Ok(())
}

fn load_split(corpus: &Path, split: Split) -> Result<Vec<(Waveform, Waveform)>> {
    let manifest = manifest_path(corpus, split);
    let entries = read_manifest(&manifest).with_context(|| {
        format!(
            "reading {}; run `mfse gen-corpus` first",
            manifest.display()
        )
    })?;
    entries
        .iter()
        .map(|e| load_pair(corpus, e).map_err(Into::into))
        .collect()
}

#[derive(Serialize)]
struct TrainSummary<'a> {
    steps: u64,
    checkpoint: &'a Path,
    model: &'a Path,
    final_loss: Option<f64>,
    val_si_sdr_db: Option<f64>,
    val_noisy_si_sdr_db: Option<f64>,
    /// Step whose EMA weights were exported.
    exported_step: Option<u64>,
    exported_val_si_sdr_db: Option<f64>,
}

fn train(workdir: &Path, mut cfg: RunConfig, a: TrainArgs) -> Result<()> {
    let t = &mut cfg.train;
    if let Some(v) = a.steps {
        t.steps = v;
    }
    if let Some(v) = a.seed {
        t.seed = v;
    }
    if let Some(v) = a.batch_size {
        t.batch_size = v;
    }
    if let Some(v) = a.lr {
        t.lr = v;
    }
    cfg.validate()?;
    let corpus = resolve(workdir, &a.corpus);
    let out = resolve(workdir, &a.out);
    let train_pairs = load_split(&corpus, Split::Train)?;
    let val_pairs = load_split(&corpus, Split::Val)?;
    let data = TrainingSet::new(&train_pairs, &cfg.frontend)?;
    let state = match &a.resume {
        Some(p) => {
            let s = TrainState::load(&resolve(workdir, p))?;
            if s.seed != cfg.train.seed {
                return Err(usage(format!(
                    "checkpoint was trained with seed {}, config says {}",
                    s.seed, cfg.train.seed
                )));
            }
            s
        }
        None => TrainState::new(
            FieldNetwork::new(&cfg.network, data.dim(), cfg.train.seed)?,
            cfg.train.seed,
        ),
    };
    cfg.write_resolved(&out)?;
    let ck_dir = out.join("checkpoints");
    fs::create_dir_all(&ck_dir)?;
    let mut log = fs::OpenOptions::new()
        .create(true)
        .append(a.resume.is_some())
        .write(true)
        .truncate(a.resume.is_none())
        .open(out.join("train_log.jsonl"))?;
    let setup = cfg.setup();
    let outcome = fit(
        state,
        &setup,
        &data,
        FitOptions {
            validation: (!val_pairs.is_empty()).then_some(&val_pairs[..]),
            checkpoint_dir: Some(&ck_dir),
            log: Some(&mut log),
            stop_after: a.stop_after,
        },
    )?;
    log.flush()?;
    let latest = ck_dir.join(LATEST_CHECKPOINT);
    outcome.state.save(&latest)?;
    let model = out.join("model.mfnn");
    Checkpoint::from_network(&outcome.state.field, Some(outcome.state.selected_weights()))
        .save(&model, CheckpointDtype::F32)?;
    let last_val = outcome.validations.last();
    let summary = TrainSummary {
        steps: outcome.state.step,
        checkpoint: &latest,
        model: &model,
        final_loss: outcome.last_step.as_ref().map(|r| r.loss.total),
        val_si_sdr_db: last_val.map(|v| v.si_sdr_db),
        val_noisy_si_sdr_db: last_val.map(|v| v.noisy_si_sdr_db),
        exported_step: outcome.state.best.as_ref().map(|b| b.report.step),
        exported_val_si_sdr_db: outcome.state.best.as_ref().map(|b| b.report.si_sdr_db),
    };
    println!("{}", serde_json::to_string_pretty(&summary)?);
    Ok(())
}

fn load_network(path: &Path, cfg: &RunConfig) -> Result<FieldNetwork> {
    let net = Checkpoint::load(path)
        .with_context(|| format!("loading {}", path.display()))?
        .inference_network()?;
    let bins = cfg.frontend.fft_size / 2 + 1;
    if DifferentiableField::dim(&net) != 2 * bins {
        return Err(usage(format!(
            "checkpoint expects {} features but fft_size {} gives {}",
            DifferentiableField::dim(&net),
            cfg.frontend.fft_size,
            2 * bins
        )));
    }
    Ok(net)
}

fn pipeline(cfg: &RunConfig) -> Result<Pipeline> {
    Ok(Pipeline {
        frontend: Frontend::new(&cfg.frontend)?,
        path: cfg.path.clone(),
        sampler: cfg.sampler.clone(),
    })
}

fn enhance(workdir: &Path, mut cfg: RunConfig, a: EnhanceArgs) -> Result<()> {
    if let Some(n) = a.nfe {
        cfg.sampler.nfe = n;
    }
    if let Some(m) = a.mode {
        cfg.sampler.mode = match m {
            ModeArg::Displacement => SamplerMode::Displacement,
            ModeArg::Euler => SamplerMode::Euler,
        };
    }
    cfg.validate()?;
    let seed = a.seed.unwrap_or(cfg.train.seed);
    let net = load_network(&resolve(workdir, &a.checkpoint), &cfg)?;
    let pipe = pipeline(&cfg)?;
    let output = resolve(workdir, &a.output);
    if let Some(input) = &a.input {
        let noisy = read_wav(resolve(workdir, input))?;
        let res = pipe.enhance(&net, &noisy, &mut stream(seed, Domain::Enhance, 0))?;
        if let Some(dir) = output.parent() {
            fs::create_dir_all(dir)?;
        }
        write_wav(&output, &res.enhanced, WavFormat::Float32)?;
        let record = RunRecord {
            utterance_id: input
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default(),
            mode: cfg.sampler.mode,
            nfe: res.nfe,
            rtf: res.rtf,
            si_sdr_db: None,
            noisy_si_sdr_db: None,
        };
        let report = output.with_extension("jsonl");
        fs::write(&report, format!("{}\n", serde_json::to_string(&record)?))?;
        cfg.write_resolved(output.parent().unwrap_or(workdir))?;
        println!("{}", serde_json::to_string(&record)?);
        return Ok(());
    }
    let manifest = resolve(
        workdir,
        a.manifest
            .as_ref()
            .expect("clap enforces input or manifest"),
    );
    let root = manifest
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."));
    let entries = read_manifest(&manifest)?;
    if entries.is_empty() {
        return Err(usage(format!("{} has no entries", manifest.display())));
    }
    fs::create_dir_all(&output)?;
    let results = enhance_parallel(&pipe, &net, &entries, &root, seed, worker_count()?)?;
    let mut records = String::new();
    let report = evaluate_corpus(
        &entries,
        &root,
        &format!("{} NFE={}", cfg.sampler.mode, cfg.sampler.nfe),
        &cfg.frontend,
        |e, _| {
            let idx = entries
                .iter()
                .position(|x| x.id == e.id)
                .expect("entry from the same list");
            let (wave, nfe, rtf) = results[idx].clone();
            write_wav(
                output.join(format!("{}.wav", e.id)),
                &wave,
                WavFormat::Float32,
            )
            .map_err(|err| err.to_string())?;
            Ok::<_, String>(Enhanced {
                waveform: wave,
                nfe,
                rtf,
            })
        },
    )?;
    for u in &report.utterances {
        let rec = RunRecord {
            utterance_id: u.id.clone(),
            mode: cfg.sampler.mode,
            nfe: u.nfe,
            rtf: u.rtf,
            si_sdr_db: Some(u.si_sdr_db),
            noisy_si_sdr_db: Some(u.noisy_si_sdr_db),
        };
        records.push_str(&serde_json::to_string(&rec)?);
        records.push('\n');
    }
    fs::write(output.join("records.jsonl"), records)?;
    write_report(&output, "metrics", std::slice::from_ref(&report))?;
    cfg.write_resolved(&output)?;
    print!("{}", render_table(std::slice::from_ref(&report)));
    Ok(())
}

/// Enhances every entry on up to `workers` threads; each utterance has its own RNG stream.
fn enhance_parallel(
    pipe: &Pipeline,
    net: &FieldNetwork,
    entries: &[ManifestEntry],
    root: &Path,
    seed: u64,
    workers: usize,
) -> Result<Vec<(Waveform, usize, f64)>> {
    let slots: Vec<Mutex<Option<Result<(Waveform, usize, f64)>>>> =
        entries.iter().map(|_| Mutex::new(None)).collect();
    let next = Mutex::new(0usize);
    std::thread::scope(|s| {
        for _ in 0..workers.min(entries.len()).max(1) {
            s.spawn(|| loop {
                let i = {
                    let mut n = next.lock().expect("no poisoned lock");
                    let i = *n;
                    *n += 1;
                    i
                };
                if i >= entries.len() {
                    break;
                }
                let e = &entries[i];
                let res = (|| -> Result<_> {
                    let noisy = read_wav(root.join(&e.noisy_path))
                        .with_context(|| format!("utterance {}", e.id))?;
                    let r =
                        pipe.enhance(net, &noisy, &mut stream(seed, Domain::Enhance, i as u64))?;
                    Ok((r.enhanced, r.nfe, r.rtf))
                })();
                *slots[i].lock().expect("no poisoned lock") = Some(res);
            });
        }
    });
    slots
        .into_iter()
        .map(|m| {
            m.into_inner()
                .expect("no poisoned lock")
                .expect("every slot filled")
        })
        .collect()
}

fn write_report(dir: &Path, stem: &str, reports: &[MetricsReport]) -> Result<()> {
    write_json(&dir.join(format!("{stem}.json")), &reports)?;
    fs::write(dir.join(format!("{stem}.txt")), render_table(reports))?;
    Ok(())
}

fn verify(workdir: &Path, cfg: RunConfig, a: VerifyArgs) -> Result<bool> {
    cfg.validate()?;
    let opts = VerifyOptions {
        quick: a.quick,
        mutation: match a.mutate {
            MutationArg::None => TargetMutation::None,
            MutationArg::FlipSign => TargetMutation::FlipSign,
        },
        seed: cfg.train.seed,
        network: cfg.network.clone(),
        dim: cfg.frontend.fft_size + 2,
    };
    let report = run_suite(&opts)?;
    print!("{}", report.render());
    let out = resolve(workdir, &a.out);
    write_json(&out, &report)?;
    println!(
        "{}",
        if report.passed() {
            "all checks passed"
        } else {
            "verification FAILED"
        }
    );
    Ok(report.passed())
}

#[derive(Debug, Serialize)]
struct BenchRow {
    nfe: usize,
    si_sdr_db: f64,
    noisy_si_sdr_db: f64,
    rtf: f64,
}

#[derive(Debug, Serialize)]
struct BenchReport {
    rows: Vec<BenchRow>,
    rtf_monotone: bool,
}

fn bench(workdir: &Path, mut cfg: RunConfig, a: BenchArgs) -> Result<()> {
    if a.nfe.is_empty() || a.nfe.contains(&0) {
        return Err(usage("--nfe needs positive values"));
    }
    cfg.sampler.mode = SamplerMode::Displacement;
    cfg.validate()?;
    let net = load_network(&resolve(workdir, &a.checkpoint), &cfg)?;
    let manifest = resolve(workdir, &a.manifest);
    let root = manifest
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."));
    let entries: Vec<ManifestEntry> = read_manifest(&manifest)?
        .into_iter()
        .take(a.utterances.max(1))
        .collect();
    if entries.is_empty() {
        return Err(usage(format!("{} has no entries", manifest.display())));
    }
    let seed = cfg.train.seed;
    let mut rows = Vec::new();
    let mut reports = Vec::new();
    for &nfe in &a.nfe {
        cfg.sampler.nfe = nfe;
        let pipe = pipeline(&cfg)?;
        let (_, timing_input) = load_pair(&root, &entries[0])?;
        let timed = measure_rtf(&pipe, &net, &timing_input, a.runs, |_| {
            stream(seed, Domain::Enhance, 0)
        })?;
        let mut idx = 0u64;
        let report = evaluate_corpus(
            &entries,
            &root,
            &format!("displacement NFE={nfe}"),
            &cfg.frontend,
            |_, noisy| {
                let r = pipe.run(&net, noisy, &mut stream(seed, Domain::Enhance, idx));
                idx += 1;
                r.map(|(waveform, nfe)| Enhanced {
                    waveform,
                    nfe,
                    rtf: timed.rtf,
                })
            },
        )?;
        rows.push(BenchRow {
            nfe,
            si_sdr_db: report.mean.si_sdr_db,
            noisy_si_sdr_db: report.mean.noisy_si_sdr_db,
            rtf: timed.rtf,
        });
        reports.push(report);
    }
    let rtf_monotone = rows
        .windows(2)
        .all(|w| w[0].nfe >= w[1].nfe || w[0].rtf < w[1].rtf);
    let out = resolve(workdir, &a.out);
    write_json(&out.join("bench.json"), &BenchReport { rows, rtf_monotone })?;
    let table = render_table(&reports);
    fs::write(out.join("bench.txt"), &table)?;
    cfg.write_resolved(&out)?;
    print!("{table}");
    if !rtf_monotone {
        eprintln!("warning: RTF is not monotone in NFE on this machine");
    }
    Ok(())
}
