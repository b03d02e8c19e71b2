use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::Instant;

use ctnet::arch::{block_breakdown, ModelConfig, ModelParams};
use ctnet::data::{
    add_awgn, load_image, save_image, stream_rng, synth_image, ImageBuffer, Manifest, NoiseSpec, PatchDataset, Stream,
};
use ctnet::metrics::{cka_profile, denoise as run_model, evaluate, format_db, psnr};
use ctnet::train::{load_checkpoint, metrics_csv, model_gradcheck, save_checkpoint, Checkpoint, EpochLog, Trainer};

use crate::config::{resolve, RunConfig};
use crate::error::{CliError, CliResult, EXIT_NUMERIC};
use crate::{CkaArgs, DenoiseArgs, EvalArgs, GradcheckArgs, InspectArgs, SynthArgs, TrainArgs};

const REFERENCE_PARAMS: f64 = 49.03e6;
const EXIT_INTERRUPTED: i32 = 130;

fn open_manifest(path: &Path) -> CliResult<Manifest> {
    if !path.exists() {
        return Err(CliError::data(format!("{} does not exist", path.display())));
    }
    let m = Manifest::open(path)?;
    for (p, why) in &m.unreadable {
        eprintln!("warning: skipping {}: {why}", p.display());
    }
    if m.is_empty() {
        return Err(CliError::data(format!("no readable images in {}", path.display())));
    }
    Ok(m)
}

fn load_images(path: &Path) -> CliResult<Vec<(String, ImageBuffer)>> {
    let m = open_manifest(path)?;
    m.entries
        .iter()
        .map(|e| {
            let name = e.path.file_name().map_or_else(|| e.path.display().to_string(), |n| n.to_string_lossy().into_owned());
            Ok((name, load_image(&e.path)?))
        })
        .collect()
}

fn check_channels(cfg: &ModelConfig, img: &ImageBuffer, what: &str) -> CliResult {
    if img.channels != cfg.image_channels {
        return Err(CliError::config(format!(
            "model takes {}-channel images but {what} has {} channels",
            cfg.image_channels, img.channels
        )));
    }
    Ok(())
}

fn write(path: &Path, contents: &str) -> CliResult {
    std::fs::write(path, contents).map_err(|e| CliError::failure(format!("cannot write {}: {e}", path.display())))
}

fn apply_overrides(cfg: &mut RunConfig, a: &TrainArgs) {
    if let Some(d) = &a.data {
        cfg.data = Some(d.clone());
    }
    if let Some(v) = &a.val {
        cfg.val = Some(v.clone());
    }
    if let Some(o) = &a.out {
        cfg.out = Some(o.clone());
    }
    if let Some(s) = a.seed {
        cfg.train.seed = s;
        cfg.train.noise.seed = s;
        cfg.init_seed = s;
    }
    if let Some(sigma) = a.sigma {
        cfg.train.noise = NoiseSpec { clip: cfg.train.noise.clip, ..NoiseSpec::fixed(sigma, cfg.train.noise.seed) };
    }
    if let Some(b) = &a.blind {
        cfg.train.noise = NoiseSpec { clip: cfg.train.noise.clip, ..NoiseSpec::blind(b[0], b[1], cfg.train.noise.seed) };
    }
    if let Some(m) = a.max_steps {
        cfg.train.max_steps = Some(m);
    }
}

pub fn train(a: TrainArgs) -> CliResult {
    let mut cfg = resolve(a.config.as_deref(), a.tiny)?;
    apply_overrides(&mut cfg, &a);
    cfg.validate()?;
    let data_path = cfg.data.clone().ok_or_else(|| CliError::data("no training data: pass --data or set `data`"))?;
    let out = cfg.out.clone().unwrap_or_else(|| PathBuf::from("run"));

    let manifest = open_manifest(&data_path)?;
    let data = PatchDataset::from_manifest(&manifest, cfg.train.patch.clone(), cfg.train.seed)?;
    let val: Vec<ImageBuffer> = match &cfg.val {
        Some(p) => load_images(p)?.into_iter().map(|(_, i)| i).collect(),
        None => Vec::new(),
    };
    std::fs::create_dir_all(&out).map_err(|e| CliError::failure(format!("cannot create {}: {e}", out.display())))?;
    write(&out.join("run.json"), &(serde_json::to_string_pretty(&cfg).expect("config serializes") + "\n"))?;

    let mut trainer = match &a.resume {
        Some(p) => {
            let ckpt = load_checkpoint(p)?;
            ckpt.check_config(&cfg.model).map_err(ctnet::Error::from)?;
            Trainer::resume(ckpt, cfg.train.clone(), &data, &val)?
        }
        None => Trainer::new(cfg.model.clone(), ModelParams::init(&cfg.model, cfg.init_seed), cfg.train.clone(), &data, &val)?,
    };
    eprintln!(
        "training on {} patches ({} steps per epoch, {} steps total)",
        data.len(),
        trainer.steps_per_epoch(),
        trainer.total_steps()
    );

    let stop = Arc::new(AtomicBool::new(false));
    {
        let stop = stop.clone();
        // a second handler install (e.g. in tests) is not an error worth failing on
        let _ = ctrlc::set_handler(move || stop.store(true, Ordering::SeqCst));
    }
    let ckpt_path = out.join("checkpoint.ckpt");
    let metrics_path = out.join("metrics.csv");
    let mut logs: Vec<EpochLog> = Vec::new();
    let started = Instant::now();
    let mut io_error = None;
    let result = trainer.run(&|| stop.load(Ordering::SeqCst), &mut |tr, log| {
        logs.push(log.clone());
        eprintln!(
            "epoch {:>3}  step {:>6}  lr {:.3e}  loss {:.6}  val psnr {}  ({:.0}s)",
            log.epoch,
            log.step,
            log.lr,
            log.loss,
            log.val_psnr.map_or_else(|| "-".into(), format_db),
            started.elapsed().as_secs_f64()
        );
        let saved = std::fs::write(&metrics_path, metrics_csv(&logs))
            .map_err(ctnet::Error::from)
            .and_then(|_| save_checkpoint(&tr.checkpoint(), &ckpt_path));
        if let Err(e) = saved {
            io_error.get_or_insert(e);
        }
    });
    if let Some(e) = io_error {
        return Err(e.into());
    }
    // parameters are only updated by completed steps, so this is the last good state
    save_checkpoint(&trainer.checkpoint(), &ckpt_path)?;
    write(&metrics_path, &metrics_csv(&logs))?;
    match result {
        Err(e) => {
            let mut err = CliError::from(e);
            if err.code == EXIT_NUMERIC {
                err.message = format!("{}; last good checkpoint kept at {}", err.message, ckpt_path.display());
            }
            Err(err)
        }
        Ok(_) if stop.load(Ordering::SeqCst) => {
            eprintln!("interrupted after step {}; checkpoint saved to {}", trainer.step_count(), ckpt_path.display());
            std::process::exit(EXIT_INTERRUPTED);
        }
        Ok(_) => {
            eprintln!("done: {} steps, checkpoint {}", trainer.step_count(), ckpt_path.display());
            Ok(())
        }
    }
}

fn load_model(path: &Path) -> CliResult<Checkpoint> {
    if !path.exists() {
        return Err(CliError::config(format!("checkpoint {} does not exist", path.display())));
    }
    Ok(load_checkpoint(path)?)
}

pub fn denoise(a: DenoiseArgs) -> CliResult {
    let ckpt = load_model(&a.ckpt)?;
    let input = load_image(&a.input)?;
    check_channels(&ckpt.config, &input, "the input")?;
    let noisy = match a.sigma {
        Some(sigma) => {
            let spec = NoiseSpec::fixed(sigma, a.seed);
            spec.validate()?;
            add_awgn(&input, &spec, &mut stream_rng(a.seed, Stream::Eval, 0, 0)).0
        }
        None => input.clone(),
    };
    if let Some(p) = &a.noisy_out {
        save_image(&noisy, p)?;
    }
    let out = run_model(&ckpt.params, &ckpt.config, &noisy)?.quantized();
    save_image(&out, &a.out)?;
    if a.sigma.is_some() {
        println!("noisy psnr    {} dB", format_db(psnr(&noisy.quantized(), &input, 1.0)?));
        println!("denoised psnr {} dB", format_db(psnr(&out, &input, 1.0)?));
    }
    Ok(())
}

pub fn eval(a: EvalArgs) -> CliResult {
    let ckpt = load_model(&a.ckpt)?;
    let images = load_images(&a.dataset)?;
    for (name, img) in &images {
        check_channels(&ckpt.config, img, name)?;
    }
    if a.sigmas.is_empty() {
        return Err(CliError::config("no noise levels given"));
    }
    let name = a.name.clone().unwrap_or_else(|| {
        a.dataset.file_stem().map_or_else(|| "dataset".into(), |s| s.to_string_lossy().into_owned())
    });
    let table = evaluate(&ckpt.params, &ckpt.config, &name, &images, &a.sigmas, a.seed)?;
    match &a.out {
        Some(p) => write(p, &table.to_csv())?,
        None => print!("{}", table.to_csv()),
    }
    for (d, s, p, q) in table.averages() {
        eprintln!("{d} sigma {s}: mean psnr {} dB (noisy input {} dB)", format_db(p), format_db(q));
    }
    Ok(())
}

pub fn inspect(a: InspectArgs) -> CliResult {
    let cfg = resolve(Some(a.config.as_deref().unwrap_or(if a.tiny { "tiny" } else { "paper-color" })), false)?.model;
    cfg.validate()?;
    let (h, w) = (a.size[0], a.size[1]);
    let blocks = block_breakdown(&cfg, h, w);
    let total: u64 = blocks.iter().map(|b| b.params).sum();
    let flops: u64 = blocks.iter().map(|b| b.flops).sum();
    if a.json {
        let v = serde_json::json!({
            "config": cfg, "height": h, "width": w, "blocks": blocks,
            "total_params": total, "total_flops": flops, "reference_params": REFERENCE_PARAMS,
        });
        println!("{}", serde_json::to_string_pretty(&v).expect("json"));
        return Ok(());
    }
    println!("{:<10} {:>14} {:>16}", "block", "params", format!("GFLOPs@{h}x{w}"));
    for b in &blocks {
        println!("{:<10} {:>14} {:>16.4}", b.block, b.params, b.flops as f64 / 1e9);
    }
    println!("{:<10} {:>14} {:>16.4}", "total", total, flops as f64 / 1e9);
    println!(
        "reference  {:>14} ({:.2}M here vs 49.03M, {:+.1}%)",
        REFERENCE_PARAMS as u64,
        total as f64 / 1e6,
        (total as f64 / REFERENCE_PARAMS - 1.0) * 100.0
    );
    Ok(())
}

pub fn gradcheck(a: GradcheckArgs) -> CliResult {
    let cfg = resolve(Some(&a.config), false)?.model;
    let started = Instant::now();
    let r = model_gradcheck(&cfg, a.seed, a.coords, a.step, a.tol)?;
    let rep = &r.report;
    for c in rep.failures() {
        println!(
            "FAIL {}[{}]: analytic {:e} numeric {:e} rel err {:.3e}",
            r.name_of(c.input),
            c.index,
            c.analytic,
            c.numeric,
            c.rel_err
        );
    }
    println!(
        "{} coordinates checked, {} skipped at ReLU kinks, max rel err {:.3e} (tolerance {:e}), {:.1}s",
        rep.num_checked(),
        rep.num_skipped(),
        rep.max_rel_err(),
        a.tol,
        started.elapsed().as_secs_f64()
    );
    if rep.passed() {
        Ok(())
    } else {
        Err(CliError::failure(format!("{} coordinates above tolerance", rep.failures().count())))
    }
}

pub fn cka(a: CkaArgs) -> CliResult {
    let ckpt = load_model(&a.ckpt)?;
    let probes: Vec<ImageBuffer> = load_images(&a.images)?.into_iter().map(|(_, i)| i).collect();
    for p in &probes {
        check_channels(&ckpt.config, p, "a probe image")?;
    }
    let profile = cka_profile(&ckpt.params, &ckpt.config, &probes)?;
    std::fs::create_dir_all(&a.out).map_err(|e| CliError::failure(format!("cannot create {}: {e}", a.out.display())))?;
    write(&a.out.join("cka_matrix.csv"), &profile.matrix_csv())?;
    write(&a.out.join("cka_ratios.csv"), &profile.ratios_csv())?;
    profile.save_heatmap(&a.out.join("cka_heatmap.pgm"), a.cell.max(1))?;
    let l = profile.layers.len();
    let mean = profile.ratios.iter().sum::<f64>() / l as f64;
    println!("{l} layers, mean share of layers with CKA < 0.6: {mean:.4}");
    if !profile.zero_variance.is_empty() {
        println!("constant layers left out: {}", profile.zero_variance.join(", "));
    }
    Ok(())
}

pub fn synth(a: SynthArgs) -> CliResult {
    if !matches!(a.channels, 1 | 3) || a.size == 0 {
        return Err(CliError::config("synth needs --channels 1 or 3 and a positive --size"));
    }
    std::fs::create_dir_all(&a.out).map_err(|e| CliError::failure(format!("cannot create {}: {e}", a.out.display())))?;
    let ext = if a.channels == 1 { "pgm" } else { "ppm" };
    for i in 0..a.count {
        let img = synth_image(a.size, a.size, a.channels, a.seed.wrapping_add(i as u64));
        save_image(&img, &a.out.join(format!("img_{i:03}.{ext}")))?;
    }
    Ok(())
}
