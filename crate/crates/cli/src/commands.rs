//! Subcommand implementations.

use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use crg_core::crg::{train_encoder, CrgMode, CrgTrainConfig};
use crg_core::evaluation::evaluate_reconstructions;
use crg_core::gan::{train_gan, GanTrainConfig};
use crg_core::gbt::{invert_hybrid, invert_latent_gbt, trajectory_jsonl, GbtConfig, GbtInit, GbtStatus, ImageLoss};
use crg_core::image::ImageTensor;
use crg_core::models::{GeneratorModel, LatentVector};
use crg_core::synthdata::{generate_dataset, AttributeSampler, DatasetManifest};
use crg_core::experiment::eyewear_sampler;
use serde_json::json;
use tracing::info;

use crate::cli::{
    AnalyzeArgs, Command, DirectionArgs, EditArgs, EvalArgs, InvertArgs, LossArg, ModeArg, SynthGenArgs,
    TrainEncoderArgs, TrainGanArgs,
};
use crate::ops::{load_direction, load_workspace_dataset, read_latent, read_png, save_direction, LoadedPair};
use crate::workspace::{artifact_stem, sha256_hex, write_new, ArtifactRecord, Workspace, Written};

fn record(kind: &str, path: &Path, digest: String) -> ArtifactRecord {
    ArtifactRecord { kind: kind.into(), path: path.display().to_string(), digest }
}

fn file_record(kind: &str, path: &Path) -> Result<ArtifactRecord> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(record(kind, path, sha256_hex(&bytes)))
}

/// Run one subcommand; returns the artifacts it produced or reused.
pub fn execute(command: &Command, ws: &Workspace, seed: u64) -> Result<Vec<ArtifactRecord>> {
    match command {
        Command::SynthGen(a) => synth_gen(a, ws, seed),
        Command::TrainGan(a) => train_gan_cmd(a, ws, seed),
        Command::TrainEncoder(a) => train_encoder_cmd(a, ws, seed),
        Command::Invert(a) => invert(a, ws, seed),
        Command::Direction(a) => direction(a, ws),
        Command::Edit(a) => edit(a, ws),
        Command::Analyze(a) => analyze(a, ws),
        Command::Eval(a) => eval(a, ws),
        Command::Serve(a) => {
            crate::server::serve_blocking(ws.clone(), &a.bind, a.dataset.clone())?;
            Ok(Vec::new())
        }
    }
}

fn synth_gen(a: &SynthGenArgs, ws: &Workspace, seed: u64) -> Result<Vec<ArtifactRecord>> {
    let sampler = match a.attributed_fraction {
        Some(f) => eyewear_sampler(f),
        None => AttributeSampler::default(),
    };
    // Same seed, size, resolution and sampler means the same content; reuse it.
    for entry in fs::read_dir(ws.datasets())? {
        let dir = entry?.path();
        let Ok(bytes) = fs::read(dir.join("manifest.json")) else { continue };
        let Ok(m) = serde_json::from_slice::<DatasetManifest>(&bytes) else { continue };
        if m.seed == seed && m.sample_count == a.n && m.resolution == a.resolution && m.sampler == sampler {
            println!("dataset already present: {} (digest {})", dir.display(), m.digest);
            return Ok(vec![record("dataset", &dir, m.digest)]);
        }
    }
    let partial = ws.datasets().join(format!(".{}-partial-{seed}", a.name));
    if partial.exists() {
        fs::remove_dir_all(&partial)?;
    }
    let ds = generate_dataset(a.n, seed, &sampler, a.resolution, &partial)?;
    let dir = ws.datasets().join(artifact_stem(&a.name, &ds.manifest.digest));
    if dir.exists() {
        fs::remove_dir_all(&partial)?;
    } else {
        fs::rename(&partial, &dir)?;
    }
    let attributed = ds.labels().iter().filter(|l| **l).count();
    println!("dataset {} : {} images at {}px, {attributed} attributed", dir.display(), a.n, a.resolution);
    Ok(vec![record("dataset", &dir, ds.manifest.digest)])
}

fn gan_config(a: &TrainGanArgs, seed: u64) -> GanTrainConfig {
    let mut c = GanTrainConfig { seed, ..Default::default() };
    if let Some(v) = a.steps {
        c.total_steps = v;
    }
    if let Some(v) = a.batch_size {
        c.batch_size = v;
    }
    if let Some(v) = a.latent_dim {
        c.latent_dim = v;
    }
    if let Some(v) = &a.generator_widths {
        c.generator_widths = v.clone();
    }
    if let Some(v) = &a.discriminator_widths {
        c.discriminator_widths = v.clone();
    }
    if let Some(v) = a.feature_dim {
        c.feature_dim = v;
    }
    if let Some(v) = a.generator_lr {
        c.generator_lr = v;
    }
    if let Some(v) = a.discriminator_lr {
        c.discriminator_lr = v;
    }
    if let Some(v) = a.d_steps_per_g_step {
        c.d_steps_per_g_step = v;
    }
    if let Some(v) = a.monitor_every {
        c.monitor_every = v;
    }
    if let Some(v) = a.monitor_samples {
        c.monitor_samples = v;
    }
    c
}

fn jsonl<T: serde::Serialize>(rows: &[T]) -> Result<String> {
    let mut out = String::new();
    for r in rows {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    Ok(out)
}

fn write_log(ws: &Workspace, stem: &str, suffix: &str, text: &str) -> Result<ArtifactRecord> {
    let path = ws.logs().join(format!("{stem}.{suffix}"));
    write_new(&path, text.as_bytes())?;
    Ok(record("log", &path, sha256_hex(text.as_bytes())))
}

fn train_gan_cmd(a: &TrainGanArgs, ws: &Workspace, seed: u64) -> Result<Vec<ArtifactRecord>> {
    let config = gan_config(a, seed);
    config.validate()?;
    let (ds_stem, ds) = load_workspace_dataset(ws, &a.dataset)?;
    let images = ImageTensor::stack(&ds.images)?;
    let snapshot = ws.logs().join(format!("{}-nonfinite-{}", a.name, crate::workspace::unix_time() as u64));
    let out = train_gan(&images, &config, Some(&snapshot), |r| {
        info!(step = r.step, g_loss = r.g_loss, d_loss = r.d_loss, proxy = r.proxy, d_accuracy = r.d_accuracy, "gan");
    })?;
    let training = json!({
        "trainer": "gan",
        "config": config,
        "dataset": ds_stem,
        "dataset_digest": ds.manifest.digest,
        "g_steps": out.g_steps,
        "d_steps": out.d_steps,
    });
    let rng = sha256_hex(format!("chacha8:{seed}").as_bytes());
    let (g_stem, g_digest) = ws.save_model(&a.name, &out.generator, &training, &rng)?;
    let (d_stem, d_digest) = ws.save_model(&format!("{}-disc", a.name), &out.discriminator, &training, &rng)?;
    let log = write_log(ws, &g_stem, "train.jsonl", &jsonl(&out.log)?)?;
    if let Some(last) = out.log.last() {
        println!("final proxy {:.4}, discriminator accuracy {:.3}", last.proxy, last.d_accuracy);
    }
    println!("generator {g_stem}\ndiscriminator {d_stem}");
    Ok(vec![
        record("generator", &ws.checkpoints().join(format!("{g_stem}.crgc")), g_digest),
        record("discriminator", &ws.checkpoints().join(format!("{d_stem}.crgc")), d_digest),
        log,
    ])
}

fn crg_config(a: &TrainEncoderArgs, seed: u64) -> CrgTrainConfig {
    let mut c = CrgTrainConfig { seed, ..Default::default() };
    if let Some(v) = a.lr {
        c.lr = v;
    }
    if let Some(v) = a.batch_size {
        c.batch_size = v;
    }
    if let Some(v) = a.max_epochs {
        c.max_epochs = v;
    }
    if let Some(v) = a.lr_patience {
        c.lr_patience = v;
    }
    if let Some(v) = a.early_stop_patience {
        c.early_stop_patience = v;
    }
    if let Some(v) = a.dropout {
        c.dropout = v;
    }
    if let Some(v) = a.max_rotation {
        c.augmentation.max_rotation_deg = v;
    }
    c.augmentation.horizontal_flip &= !a.no_hflip;
    c.augmentation.vertical_flip &= !a.no_vflip;
    c.mode = match a.mode {
        ModeArg::Fixed => CrgMode::Fixed,
        ModeArg::CoTrained => CrgMode::CoTrained,
    };
    if let Some(v) = &a.encoder_widths {
        c.encoder_widths = v.clone();
    }
    if let Some(v) = a.val_fraction {
        c.val_fraction = v;
    }
    c
}

fn train_encoder_cmd(a: &TrainEncoderArgs, ws: &Workspace, seed: u64) -> Result<Vec<ArtifactRecord>> {
    let config = crg_config(a, seed);
    config.validate()?;
    let gen_path = ws.checkpoint_path(&a.generator)?;
    let gen_stem = gen_path.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string();
    let gen_digest = sha256_hex(&fs::read(&gen_path)?);
    let generator: GeneratorModel<f32> = ws.load_model(&gen_stem)?;
    let (ds_stem, ds) = load_workspace_dataset(ws, &a.dataset)?;
    let images = ImageTensor::stack(&ds.images)?;
    let out = train_encoder(generator, &images, &config, None, |r| {
        info!(epoch = r.epoch, val_z = r.val_loss_z, val_x = r.val_loss_x, lr = r.lr, "encoder");
    })?;
    let rng = sha256_hex(format!("chacha8:{seed}").as_bytes());
    let mut artifacts = Vec::new();
    let (pair_gen_stem, pair_gen_digest) = if config.mode == CrgMode::CoTrained {
        let training = json!({
            "trainer": "crg-co-trained",
            "config": config,
            "initial_generator": gen_stem,
            "initial_generator_digest": gen_digest,
            "dataset": ds_stem,
            "dataset_digest": ds.manifest.digest,
        });
        let (stem, digest) = ws.save_model(&format!("{}-generator", a.name), &out.generator, &training, &rng)?;
        artifacts.push(record("generator", &ws.checkpoints().join(format!("{stem}.crgc")), digest.clone()));
        (stem, digest)
    } else {
        (gen_stem, gen_digest)
    };
    let training = json!({
        "trainer": "crg",
        "config": config,
        "generator": pair_gen_stem,
        "generator_digest": pair_gen_digest,
        "dataset": ds_stem,
        "dataset_digest": ds.manifest.digest,
        "best_epoch": out.best_epoch,
        "epochs_run": out.epochs_run,
    });
    let (stem, digest) = ws.save_model(&a.name, &out.encoder, &training, &rng)?;
    artifacts.push(record("encoder", &ws.checkpoints().join(format!("{stem}.crgc")), digest));
    artifacts.push(write_log(ws, &stem, "train.jsonl", &jsonl(&out.log)?)?);
    println!("encoder {stem} (generator {pair_gen_stem}), best epoch {} of {}", out.best_epoch, out.epochs_run);
    Ok(artifacts)
}

fn invert(a: &InvertArgs, ws: &Workspace, seed: u64) -> Result<Vec<ArtifactRecord>> {
    let target_img = read_png(&a.image)?;
    let init = match &a.init_z {
        Some(p) => GbtInit::Provided(read_latent(p)?),
        None => GbtInit::Seed(seed),
    };
    let loss = match a.loss {
        LossArg::Mse => ImageLoss::Mse,
        LossArg::Mae => ImageLoss::Mae,
    };
    let config = GbtConfig { steps: a.steps, step_size: a.step_size, init, loss, early_exit: a.early_exit };
    let target = ImageTensor::stack(std::slice::from_ref(&target_img))?;
    let result = if a.hybrid {
        let pair = LoadedPair::load(ws, ws.model_pair(a.model.as_deref())?)?;
        let h = invert_hybrid(&pair.generator, &pair.encoder, &target, &config)?;
        println!("encoder estimate loss {:.6}", h.encoder_loss);
        h.refined
    } else {
        let generator: GeneratorModel<f32> = match (&a.generator, &a.model) {
            (Some(g), _) => ws.load_model(g)?,
            (None, m) => ws.load_model(&ws.model_pair(m.as_deref())?.generator)?,
        };
        config.validate()?;
        invert_latent_gbt(&generator, &target, &config)?
    };
    let trajectory = trajectory_jsonl(&result.trajectory)?;
    let stem = format!("invert-{}", &sha256_hex(trajectory.as_bytes())[..12]);
    let mut artifacts = vec![write_log(ws, &stem, "jsonl", &trajectory)?];
    match result.status {
        GbtStatus::NonFinite { step } => bail!("inversion diverged at step {step}; trajectory in logs/{stem}.jsonl"),
        status => println!("{status:?}: best loss {:.6} at step {}", result.loss_best, result.best_step),
    }
    let z_json = serde_json::to_string(result.z_best.as_slice())?;
    match &a.out_z {
        Some(p) => {
            fs::write(p, &z_json).with_context(|| format!("writing {}", p.display()))?;
            artifacts.push(file_record("latent", p)?);
        }
        None => println!("{z_json}"),
    }
    if let Some(out) = &a.out {
        let generator: GeneratorModel<f32> = match (&a.generator, &a.model) {
            (Some(g), _) => ws.load_model(g)?,
            (None, m) => ws.load_model(&ws.model_pair(m.as_deref())?.generator)?,
        };
        let x = crg_core::models::LatentGenerator::generate(
            &generator,
            &LatentVector::batch::<f32>(std::slice::from_ref(&result.z_best))?,
        )?;
        ImageTensor::unstack(&x)?.remove(0).save_png(out)?;
        artifacts.push(file_record("image", out)?);
    }
    Ok(artifacts)
}

fn direction(a: &DirectionArgs, ws: &Workspace) -> Result<Vec<ArtifactRecord>> {
    if a.ref_neutral.len() != a.ref_attr.len() {
        bail!("{} --ref-neutral but {} --ref-attr images", a.ref_neutral.len(), a.ref_attr.len());
    }
    let pair = LoadedPair::load(ws, ws.model_pair(a.model.as_deref())?)?;
    let neutral = a.ref_neutral.iter().map(|p| read_png(p)).collect::<Result<Vec<_>>>()?;
    let attributed = a.ref_attr.iter().map(|p| read_png(p)).collect::<Result<Vec<_>>>()?;
    let labels: Vec<String> = a
        .ref_neutral
        .iter()
        .zip(&a.ref_attr)
        .map(|(n, t)| format!("{}|{}", file_name(n), file_name(t)))
        .collect();
    let d = pair.direction(&neutral, &attributed, &a.name, &labels)?;
    let (id, written) = save_direction(ws, &d)?;
    let path = ws.directions().join(format!("{id}.json"));
    match written {
        Written::Created => println!("direction {id} ({} dims, raw norm {:.4})", d.dimension, d.raw_norm()),
        Written::Unchanged => println!("direction {id} already stored"),
    }
    Ok(vec![file_record("direction", &path)?])
}

fn file_name(p: &Path) -> String {
    p.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

fn edit(a: &EditArgs, ws: &Workspace) -> Result<Vec<ArtifactRecord>> {
    if a.direction.len() != a.k.len() {
        bail!("{} --direction values but {} --k values", a.direction.len(), a.k.len());
    }
    let pair = LoadedPair::load(ws, ws.model_pair(a.model.as_deref())?)?;
    let z = match (&a.z_from_image, &a.z) {
        (Some(img), _) => pair.encode(&read_png(img)?)?,
        (None, Some(p)) => read_latent(p)?,
        (None, None) => bail!("one of --z-from-image or --z is required"),
    };
    let directions = a.direction.iter().map(|r| load_direction(ws, r)).collect::<Result<Vec<_>>>()?;
    let edits: Vec<_> = directions.iter().map(|(_, d)| d).zip(a.k.iter().copied()).collect();
    let z_edit = pair.apply_edits(&z, &edits, a.unit_direction)?;
    let png = pair.render(&z_edit)?.to_png()?;
    fs::write(&a.out, &png).with_context(|| format!("writing {}", a.out.display()))?;
    println!("wrote {}", a.out.display());
    let mut artifacts: Vec<ArtifactRecord> = directions
        .iter()
        .map(|(id, _)| file_record("direction", &ws.direction_path(id)?))
        .collect::<Result<_>>()?;
    artifacts.push(record("image", &a.out, sha256_hex(&png)));
    Ok(artifacts)
}

fn analyze(a: &AnalyzeArgs, ws: &Workspace) -> Result<Vec<ArtifactRecord>> {
    let pair = LoadedPair::load(ws, ws.model_pair(a.model.as_deref())?)?;
    let (dir_id, d) = load_direction(ws, &a.direction)?;
    let (ds_stem, ds) = load_workspace_dataset(ws, &a.dataset)?;
    let analysis = pair.analyze(&ds, &d, a.bins)?;
    let report = json!({
        "model": pair.info.id,
        "direction": dir_id,
        "dataset": ds_stem,
        "dataset_digest": ds.manifest.digest,
        "stats": analysis.stats,
        "band": analysis.stats.band(),
        "histogram": analysis.histogram,
    });
    let text = serde_json::to_string_pretty(&report)?;
    let stem = format!("analysis-{dir_id}-{}", &sha256_hex(text.as_bytes())[..12]);
    let json_path = ws.reports().join(format!("{stem}.json"));
    let csv_path = ws.reports().join(format!("{stem}.csv"));
    let csv = crg_core::editing::histogram_csv(&analysis.histogram)?;
    write_new(&json_path, text.as_bytes())?;
    write_new(&csv_path, csv.as_bytes())?;
    let s = &analysis.stats;
    println!(
        "neutral {:.4} +/- {:.4} (n={}), attributed {:.4} +/- {:.4} (n={}), separation {:.3}",
        s.mu_n, s.sigma_n, s.count_neutral, s.mu_a, s.sigma_a, s.count_attributed, s.separation
    );
    println!("report {}", json_path.display());
    Ok(vec![file_record("report", &json_path)?, file_record("report", &csv_path)?])
}

fn eval(a: &EvalArgs, ws: &Workspace) -> Result<Vec<ArtifactRecord>> {
    let pair = LoadedPair::load(ws, ws.model_pair(a.model.as_deref())?)?;
    let (ds_stem, ds) = load_workspace_dataset(ws, &a.dataset)?;
    let reference = match &a.mean_reference {
        Some(r) => load_workspace_dataset(ws, r)?.1.images,
        None => ds.images.clone(),
    };
    let report =
        evaluate_reconstructions(&pair.info.id, &pair.encoder, &pair.generator, &ds.manifest.digest, &ds.images, &reference)?;
    let text = serde_json::to_string_pretty(&report)?;
    let table = report.to_table();
    let stem = format!("eval-{ds_stem}-{}", &sha256_hex(text.as_bytes())[..12]);
    let json_path = ws.reports().join(format!("{stem}.json"));
    let txt_path = ws.reports().join(format!("{stem}.txt"));
    write_new(&json_path, text.as_bytes())?;
    write_new(&txt_path, table.as_bytes())?;
    print!("{table}");
    Ok(vec![file_record("report", &json_path)?, file_record("report", &txt_path)?])
}
