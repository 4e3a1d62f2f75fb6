use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use candle_core::DType;
use diffdec_core::config::{resolve_model_size, EncoderSpec, Stage};
use diffdec_core::data::{load_latents, save_batch, save_latents, write_synthetic_corpus, ResizePolicy};
use diffdec_core::decoder::{describe as describe_decoder, Decoder};
use diffdec_core::distill::{distill_run, DistillPair};
use diffdec_core::encoder::KlEncoder;
use diffdec_core::features::{FeatureExtractor, ToyExtractor};
use diffdec_core::manifest::{unix_now, ExperimentManifest, RunDir, RunStage};
use diffdec_core::metrics::{evaluate, MetricReport};
use diffdec_core::params::ParamStore;
use diffdec_core::rng::{normal_tensor, stream};
use diffdec_core::sampler::{make_schedule, write_sweep_csv, SweepRow};
use diffdec_core::tradeoff::{run_toy_experiment, KlStatus};
use diffdec_core::train::{Trainer, LOG_HEADER};

use crate::store::{config_or_default, corpus, corpus_tensor, stamp_checkpoints, Checkpoint, CONFIG_FILE, WEIGHTS_FILE};
use crate::{
    DescribeArgs, DistillArgs, EncodeArgs, EvalArgs, FinetuneArgs, SampleArgs, SweepArgs, ToyDataArgs, TradeoffArgs, TrainArgs,
};

/// Drop log rows past `step`, so a resumed run appends cleanly.
fn truncate_log(path: &Path, step: u64) -> Result<()> {
    if !path.exists() {
        return Ok(());
    }
    let text = std::fs::read_to_string(path)?;
    let mut kept = vec![LOG_HEADER.to_string()];
    for line in text.lines().skip(1) {
        let row_step: u64 = line.split(',').next().and_then(|s| s.parse().ok()).unwrap_or(u64::MAX);
        if row_step <= step {
            kept.push(line.to_string());
        }
    }
    std::fs::write(path, kept.join("\n") + "\n")?;
    Ok(())
}

fn run_dir_of_checkpoint(ckpt: &Path) -> Result<PathBuf> {
    ckpt.parent()
        .and_then(Path::parent)
        .map(Path::to_path_buf)
        .with_context(|| format!("{} is not inside <run>/ckpt/", ckpt.display()))
}

fn drive(mut trainer: Trainer, run: RunDir, mut manifest: ExperimentManifest, target: Option<u64>) -> Result<()> {
    manifest.write(&run.root)?;
    truncate_log(&run.logs(), trainer.step)?;
    trainer.log_to(run.logs())?;
    let target = target.unwrap_or(trainer.config.train.steps);
    log::info!("training {} from step {} to {target}", trainer.config.name, trainer.step);
    trainer.run_until(target, Some(&run.root))?;
    let ckpt = trainer.save_checkpoint(&run.root)?;
    manifest.finished_unix = Some(unix_now());
    manifest.write(&run.root)?;
    stamp_checkpoints(&run, &manifest)?;
    println!("{}", ckpt.display());
    Ok(())
}

fn resume_run(ckpt: &Path, data: &Path, steps: Option<u64>) -> Result<()> {
    let images = corpus(data, ResizePolicy::Train)?.images()?;
    let trainer = Trainer::resume(ckpt, images).context("resume")?;
    let run = RunDir::create(run_dir_of_checkpoint(ckpt)?)?;
    let manifest = ExperimentManifest::read(&run.root).context("resume: run manifest")?;
    drive(trainer, run, manifest, steps)
}

pub fn train(a: TrainArgs) -> Result<()> {
    if let Some(ckpt) = &a.resume {
        return resume_run(ckpt, &a.data, a.steps);
    }
    let config = config_or_default(a.config.as_deref())?;
    let images = corpus(&a.data, ResizePolicy::Train)?.images()?;
    let trainer = Trainer::new(config.clone(), images).context("train")?;
    let run = RunDir::create(a.out.unwrap_or_else(|| PathBuf::from("runs").join(&config.name)))?;
    let manifest = ExperimentManifest::new(&config, RunStage::Train, trainer.extractor.identity());
    drive(trainer, run, manifest, a.steps)
}

pub fn finetune(a: FinetuneArgs) -> Result<()> {
    let t = a.train;
    if let Some(ckpt) = &t.resume {
        return resume_run(ckpt, &t.data, t.steps);
    }
    let parent = Checkpoint::load(a.parent.as_deref().context("finetune: --parent is required")?, false)?;
    let mut config = match &t.config {
        Some(p) => config_or_default(Some(p))?,
        None => parent.config.clone(),
    };
    config.train.train_encoder = false;
    config.train.stage = Stage::FinetuneFixed;
    let images = corpus(&t.data, ResizePolicy::Train)?.images()?;
    let mut manifest = ExperimentManifest::new(&config, RunStage::Finetune, parent.extractor.identity());
    manifest.parent = Some(parent.as_parent()?);
    let extractor = ToyExtractor::new(config.extractor_seed);
    let trainer = Trainer::from_model(config.clone(), parent.model, extractor, images).context("finetune")?;
    let run = RunDir::create(t.out.unwrap_or_else(|| PathBuf::from("runs").join(format!("{}-finetune", config.name))))?;
    drive(trainer, run, manifest, t.steps)
}

pub fn distill(a: DistillArgs) -> Result<()> {
    let teacher = Checkpoint::load(&a.teacher, a.ema)?;
    let mut config = match &a.config {
        Some(p) => config_or_default(Some(p))?,
        None => teacher.config.clone(),
    };
    config.distill.teacher_steps = a.teacher_steps;
    config.distill.teacher_rho = a.rho;
    config.distill.lpips_target = a.lpips_target.into();
    if let Some(s) = a.steps {
        config.distill.steps = s;
    }
    config.validate()?;
    let images = corpus_tensor(&a.data, config.train.target_resolution)?;
    let extractor = ToyExtractor::new(config.extractor_seed);
    let mut manifest = ExperimentManifest::new(&config, RunStage::Distill, extractor.identity());
    manifest.parent = Some(teacher.as_parent()?);
    let run = RunDir::create(a.out.unwrap_or_else(|| PathBuf::from("runs").join(format!("{}-distill", config.name))))?;
    manifest.write(&run.root)?;

    let mut pair = DistillPair::new(teacher.model, &config, &extractor).context("distill")?;
    let mut log = std::io::BufWriter::new(std::fs::File::create(run.logs())?);
    writeln!(log, "{LOG_HEADER}")?;
    let mut write_err = None;
    let report = distill_run(&mut pair, &images, &config, &extractor, |row| {
        if let Err(e) = writeln!(log, "{}", row.csv()) {
            write_err.get_or_insert(e);
        }
        if row.step % 50 == 0 {
            log::info!("distill step {} total {:.5}", row.step, row.losses.total);
        }
    })
    .context("distill")?;
    log.flush()?;
    if let Some(e) = write_err {
        return Err(e.into());
    }

    let ckpt = run.checkpoint(report.steps);
    std::fs::create_dir_all(&ckpt)?;
    pair.student.save(ckpt.join(WEIGHTS_FILE))?;
    std::fs::write(ckpt.join(CONFIG_FILE), config.to_json())?;
    let state = serde_json::json!({ "step": report.steps, "weights_hash": report.student_hash });
    std::fs::write(ckpt.join("state.json"), serde_json::to_string_pretty(&state)?)?;
    let summary = serde_json::json!({
        "steps": report.steps,
        "heldout_mse_before": report.heldout_mse_before,
        "heldout_mse_after": report.heldout_mse_after,
        "teacher_hash": report.teacher_hash,
        "student_hash": report.student_hash,
        "noise_sync_checks": report.noise_sync_checks,
    });
    std::fs::write(run.reports().join("distill.json"), serde_json::to_string_pretty(&summary)?)?;
    manifest.finished_unix = Some(unix_now());
    manifest.write(&run.root)?;
    stamp_checkpoints(&run, &manifest)?;
    println!("held-out mse {:.6} -> {:.6}", report.heldout_mse_before, report.heldout_mse_after);
    println!("{}", ckpt.display());
    Ok(())
}

pub fn encode(a: EncodeArgs) -> Result<()> {
    let ck = Checkpoint::load(&a.checkpoint, a.ema)?;
    let x = corpus_tensor(&a.data, ck.config.train.target_resolution)?;
    let z = ck.model.encode_mean(&x).context("encode")?;
    if let Some(dir) = a.out.parent() {
        std::fs::create_dir_all(dir)?;
    }
    save_latents(&z, &a.out)?;
    println!("{} latents {:?} -> {}", z.dim(0)?, z.dims(), a.out.display());
    Ok(())
}

pub fn sample(a: SampleArgs) -> Result<()> {
    let ck = Checkpoint::load(&a.checkpoint, a.ema)?;
    let z = load_latents(&a.latents)?.to_dtype(DType::F32)?;
    let f = ck.config.encoder.f;
    let (b, _, h, w) = z.dims4().context("sample: latents must be (B, C, h, w)")?;
    let eps = normal_tensor(&mut stream(a.seed), (b, 3, h * f, w * f), DType::F32)?;
    let images = ck.model.decode(&eps, &z, &make_schedule(a.steps, a.rho)?).context("sample")?;
    let run = RunDir::create(&a.out)?;
    let written = save_batch(&images, &run.root, "sample_")?;
    let mut manifest = ExperimentManifest::new(&ck.config, RunStage::Sample, ck.extractor.identity());
    manifest.parent = Some(ck.as_parent()?);
    manifest.finished_unix = Some(unix_now());
    manifest.write(&run.root)?;
    println!("wrote {} images to {}", written.len(), run.root.display());
    Ok(())
}

fn write_report(out: &Path, manifest: &mut ExperimentManifest, report: &MetricReport) -> Result<PathBuf> {
    let run = RunDir::create(out)?;
    let path = run.reports().join("metrics.json");
    std::fs::write(&path, serde_json::to_string_pretty(report)?)?;
    manifest.finished_unix = Some(unix_now());
    manifest.write(&run.root)?;
    Ok(path)
}

pub fn eval(a: EvalArgs) -> Result<()> {
    let (report, mut manifest) = match (&a.reference, &a.candidate, &a.checkpoint, &a.data) {
        (Some(r), Some(c), None, None) => {
            let x = corpus_tensor(r, a.resolution)?;
            let y = corpus_tensor(c, a.resolution)?;
            if x.dims() != y.dims() {
                bail!("eval: {} has {} images but {} has {}", r.display(), x.dim(0)?, c.display(), y.dim(0)?);
            }
            let mut config = diffdec_core::config::ExperimentConfig::default();
            config.extractor_seed = a.extractor_seed;
            config.train.target_resolution = a.resolution;
            let ex = ToyExtractor::new(a.extractor_seed);
            let report = evaluate(&x, &y, &ex, &config.hash()).context("eval")?;
            (report, ExperimentManifest::new(&config, RunStage::Eval, ex.identity()))
        }
        (None, None, Some(ck), Some(data)) => {
            let ck = Checkpoint::load(ck, a.ema)?;
            let x = corpus_tensor(data, ck.config.train.target_resolution)?;
            let z = ck.model.encode_mean(&x)?;
            let eps = normal_tensor(&mut stream(a.seed), x.dims(), DType::F32)?;
            let recon = ck.model.decode(&eps, &z, &make_schedule(a.steps, a.rho)?)?;
            save_batch(&recon, a.out.join("recon"), "recon_")?;
            let report = evaluate(&x, &recon, &ck.extractor, &ck.config.hash()).context("eval")?;
            let mut m = ExperimentManifest::new(&ck.config, RunStage::Eval, ck.extractor.identity());
            m.parent = Some(ck.as_parent()?);
            (report, m)
        }
        _ => bail!("eval: give either --reference and --candidate, or --checkpoint and --data"),
    };
    let path = write_report(&a.out, &mut manifest, &report)?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    log::info!("report written to {}", path.display());
    Ok(())
}

pub fn sweep(a: SweepArgs) -> Result<()> {
    let ck = Checkpoint::load(&a.checkpoint, a.ema)?;
    let x = corpus_tensor(&a.data, ck.config.train.target_resolution)?;
    let z = ck.model.encode_mean(&x)?;
    let eps = normal_tensor(&mut stream(a.seed), x.dims(), DType::F32)?;
    let mut rows = Vec::new();
    for &n in &a.steps {
        for &rho in &a.rhos {
            let recon = ck.model.decode(&eps, &z, &make_schedule(n, rho)?).context("sweep")?;
            let r = evaluate(&x, &recon, &ck.extractor, &ck.config.hash())?;
            log::info!("N={n} rho={rho} psnr {:.2}", r.psnr);
            rows.push(SweepRow { n, rho, psnr: r.psnr, ssim: r.ssim, perceptual: r.perceptual, frechet: r.frechet });
        }
    }
    let run = RunDir::create(&a.out)?;
    let path = run.reports().join("sweep.csv");
    write_sweep_csv(&rows, &path)?;
    let mut manifest = ExperimentManifest::new(&ck.config, RunStage::Sweep, ck.extractor.identity());
    manifest.parent = Some(ck.as_parent()?);
    manifest.finished_unix = Some(unix_now());
    manifest.write(&run.root)?;
    println!("{}", path.display());
    Ok(())
}

pub fn demo_tradeoff(a: TradeoffArgs) -> Result<()> {
    let r = run_toy_experiment(a.samples, a.seed)?;
    let json = serde_json::to_string_pretty(&r)?;
    println!("{json}");
    let det_kl = match r.kl_deterministic {
        KlStatus::Degenerate => "unbounded".to_string(),
        KlStatus::Finite(v) => format!("{v:.5}"),
    };
    println!();
    println!("{:<14} {:>8} {:>10}", "decoder", "mse", "kl");
    println!("{:<14} {:>8.4} {:>10}", "deterministic", r.mse_deterministic, det_kl);
    println!("{:<14} {:>8.4} {:>10.5}", "generative", r.mse_generative, r.kl_generative);
    if let Some(p) = a.out {
        std::fs::write(p, json)?;
    }
    Ok(())
}

pub fn describe(a: DescribeArgs) -> Result<()> {
    let size = resolve_model_size(&a.size)?;
    let enc: EncoderSpec = a.encoder.parse()?;
    let mut store = ParamStore::new(DType::F32, 0);
    KlEncoder::new(&mut store, &size, enc)?;
    Decoder::new(&mut store, &size, enc, a.resolution)?;
    println!("preset {} ({enc}, {}x{}), level widths {:?}", size.name, a.resolution, a.resolution, size.level_widths());
    let mut total = 0;
    for (name, count) in describe_decoder(&store) {
        println!("  decoder/{name:<20} {count:>12}");
        total += count;
    }
    println!("  {:<28} {total:>12}", "decoder total");
    println!("  {:<28} {:>12}", "encoder total", store.param_count("encoder/"));
    Ok(())
}

pub fn toy_data(a: ToyDataArgs) -> Result<()> {
    let paths = write_synthetic_corpus(&a.out, a.count, a.side, a.seed)?;
    println!("wrote {} images to {}", paths.len(), a.out.display());
    Ok(())
}
