//! Command implementations behind the CLI verbs.

use ndarray::Array4;
use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use inkdiff_core::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, ScheduleConfig};
use inkdiff_core::denoiser::{Denoiser, TrainBatch};
use inkdiff_core::eval::{
    zero_shot_experiment, ClassifierConfig, ExperimentConfig, GeneratorSource, SynthWriterMode,
    ZeroShotReport,
};
use inkdiff_core::glyphs::{
    build_universe, export_dataset, printed_glyph_for, render_manifest, DatasetManifest,
    GlyphImage,
};
use inkdiff_core::guidance::{slerp, GuidanceScales, WriterCond};
use inkdiff_core::optim::AdamW;
use inkdiff_core::rng;
use inkdiff_core::schedule::NoiseSchedule;

use crate::config::{
    persist_resolved, EvalConfig, GenDatasetConfig, InterpolateConfig, SampleConfig, TrainConfig,
    WriterModeParam, TOOL_VERSION,
};
use crate::grid::save_grid;
use crate::CliError;

fn runtime(e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

fn load_universe(dataset_dir: &Path) -> Result<DatasetManifest, CliError> {
    let path = dataset_dir.join("universe.json");
    let text = std::fs::read_to_string(&path).map_err(|e| {
        CliError::Config(format!("cannot read universe file {}: {e}", path.display()))
    })?;
    serde_json::from_str(&text)
        .map_err(|e| CliError::Config(format!("universe file {}: {e}", path.display())))
}

/// Generate the dataset directory: universe file, printed glyphs, handwritten
/// sample PNGs, and the TSV manifest.
pub fn cmd_gen_dataset(cfg: &GenDatasetConfig) -> Result<(), CliError> {
    let manifest = build_universe(&cfg.universe).map_err(|e| CliError::Config(e.to_string()))?;
    let rendered = render_manifest(&manifest).map_err(runtime)?;
    std::fs::create_dir_all(&cfg.out_dir)
        .map_err(|e| CliError::Runtime(format!("create {}: {e}", cfg.out_dir.display())))?;
    export_dataset(&cfg.out_dir, &manifest, &rendered).map_err(runtime)?;
    persist_resolved(&cfg.out_dir, cfg)?;
    println!(
        "dataset: {} categories ({} seen / {} unseen), {} writers, {} images -> {}",
        manifest.categories.len(),
        manifest.seen_categories().len(),
        manifest.unseen_categories().len(),
        manifest.writers.len(),
        rendered.images.dim().0,
        cfg.out_dir.display()
    );
    Ok(())
}

struct TrainData {
    images: Array4<f32>,
    categories: Vec<usize>,
    writers: Vec<usize>,
    glyphs: HashMap<usize, GlyphImage>,
}

/// Seen-category train-split images plus per-category condition glyphs.
fn load_train_data(manifest: &DatasetManifest, train_fraction: f64) -> Result<TrainData, CliError> {
    let splits =
        inkdiff_core::eval::render_and_split(manifest, train_fraction).map_err(runtime)?;
    let seen: std::collections::HashSet<usize> =
        manifest.seen_categories().into_iter().collect();
    let rows: Vec<usize> = (0..splits.train.len())
        .filter(|&i| seen.contains(&splits.train.labels[i]))
        .collect();
    let size = manifest.image_size;
    let mut images = Array4::<f32>::zeros((rows.len(), 1, size, size));
    let mut categories = Vec::with_capacity(rows.len());
    let mut writers = Vec::with_capacity(rows.len());
    for (i, &row) in rows.iter().enumerate() {
        images
            .slice_mut(ndarray::s![i, .., .., ..])
            .assign(&splits.train.images.slice(ndarray::s![row, .., .., ..]));
        categories.push(splits.train.labels[row]);
        writers.push(splits.train.writers[row]);
    }
    let mut glyphs = HashMap::new();
    for cat in &manifest.categories {
        glyphs.insert(cat.id, printed_glyph_for(manifest, cat.id).map_err(runtime)?);
    }
    Ok(TrainData { images, categories, writers, glyphs })
}

fn assemble_batch(
    data: &TrainData,
    writer_conditional: bool,
    batch_size: usize,
    size: usize,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> TrainBatch {
    use rand::Rng;
    let n = data.categories.len();
    let mut x0 = Array4::<f32>::zeros((batch_size, 1, size, size));
    let mut glyph = Array4::<f32>::zeros((batch_size, 1, size, size));
    let mut writer = Vec::with_capacity(batch_size);
    for b in 0..batch_size {
        let row = rng.gen_range(0..n);
        x0.slice_mut(ndarray::s![b, 0, .., ..])
            .assign(&data.images.slice(ndarray::s![row, 0, .., ..]));
        glyph
            .slice_mut(ndarray::s![b, 0, .., ..])
            .assign(&data.glyphs[&data.categories[row]]);
        writer.push(writer_conditional.then_some(data.writers[row]));
    }
    TrainBatch { x0, glyph, writer }
}

/// Train the denoiser; writes periodic checkpoints, a CSV loss log, and the
/// resolved config. Resumable from a checkpoint.
pub fn cmd_train(cfg: &TrainConfig) -> Result<(), CliError> {
    let manifest = load_universe(&cfg.dataset_dir)?;
    let tp = &cfg.training;
    let schedule_cfg = ScheduleConfig::default_for(tp.num_diffusion_steps);
    let sched = schedule_cfg.build().map_err(|e| CliError::Config(e.to_string()))?;

    let model_cfg = cfg
        .model
        .to_model_config(manifest.image_size, manifest.writers.len());
    model_cfg.validate().map_err(|e| CliError::Config(e.to_string()))?;

    let (mut model, mut opt) = match &cfg.resume {
        Some(path) => {
            if !path.is_file() {
                return Err(CliError::Config(format!(
                    "resume checkpoint {} does not exist",
                    path.display()
                )));
            }
            let ckpt = load_checkpoint(path).map_err(runtime)?;
            inkdiff_core::checkpoint::require_matching_config(&ckpt.model, &model_cfg)
                .map_err(|e| CliError::Config(e.to_string()))?;
            ckpt.restore(tp.lr, tp.weight_decay).map_err(runtime)?
        }
        None => {
            let model =
                Denoiser::new(model_cfg, tp.seed).map_err(|e| CliError::Config(e.to_string()))?;
            let opt = AdamW::new(model.store(), tp.lr, tp.weight_decay);
            (model, opt)
        }
    };

    let data = load_train_data(&manifest, tp.train_fraction)?;
    if data.categories.is_empty() {
        return Err(CliError::Config("no seen-category training rows".into()));
    }
    std::fs::create_dir_all(&cfg.out_dir)
        .map_err(|e| CliError::Runtime(format!("create {}: {e}", cfg.out_dir.display())))?;
    persist_resolved(&cfg.out_dir, cfg)?;

    let loss_path = cfg.out_dir.join("loss.csv");
    let mut loss_file = if model.step > 0 && loss_path.is_file() {
        std::fs::OpenOptions::new()
            .append(true)
            .open(&loss_path)
            .map_err(|e| CliError::Runtime(format!("open {}: {e}", loss_path.display())))?
    } else {
        let mut f = std::fs::File::create(&loss_path)
            .map_err(|e| CliError::Runtime(format!("create {}: {e}", loss_path.display())))?;
        writeln!(f, "step,loss,simple,vlb,grad_norm").map_err(runtime)?;
        f
    };

    let start = model.step;
    let writer_conditional = model.config().writer_count > 0;
    while model.step < tp.steps {
        let step = model.step;
        let mut step_rng = rng::stream(tp.seed, "train-step", &[step]);
        let batch = assemble_batch(
            &data,
            writer_conditional,
            tp.batch_size,
            manifest.image_size,
            &mut step_rng,
        );
        let rec = model
            .train_step(&batch, &mut opt, &mut step_rng, tp.dropout_prob, &sched)
            .map_err(runtime)?;
        writeln!(
            loss_file,
            "{},{:.6},{:.6},{:.6},{:.6}",
            rec.step, rec.loss, rec.simple, rec.vlb, rec.grad_norm
        )
        .map_err(runtime)?;
        if rec.step % tp.log_every == 0 || rec.step == tp.steps {
            println!(
                "step {}/{}: loss {:.4} (simple {:.4}, vlb {:.4})",
                rec.step, tp.steps, rec.loss, rec.simple, rec.vlb
            );
        }
        if rec.step % tp.checkpoint_every == 0 || rec.step == tp.steps {
            let path = cfg.out_dir.join(format!("ckpt_{:07}.ckpt", rec.step));
            save_checkpoint(&path, &model, schedule_cfg, Some(&opt)).map_err(runtime)?;
        }
    }
    let final_path = cfg.out_dir.join("checkpoint.ckpt");
    save_checkpoint(&final_path, &model, schedule_cfg, Some(&opt)).map_err(runtime)?;
    println!(
        "trained steps {}..{} -> {}",
        start,
        model.step,
        final_path.display()
    );
    Ok(())
}

fn load_model(path: &Path) -> Result<(Denoiser<f32>, NoiseSchedule, Checkpoint), CliError> {
    if !path.is_file() {
        return Err(CliError::Config(format!(
            "checkpoint {} does not exist",
            path.display()
        )));
    }
    let ckpt = load_checkpoint(path).map_err(runtime)?;
    let (model, _) = ckpt.restore(0.0, 0.0).map_err(runtime)?;
    let sched = ckpt.schedule.build().map_err(runtime)?;
    Ok((model, sched, ckpt))
}

fn model_passes_per_step(scales: GuidanceScales) -> usize {
    if scales.gamma == 0.0 && scales.eta == 0.0 {
        1
    } else {
        2 + usize::from(scales.gamma != 0.0) + usize::from(scales.eta != 0.0)
    }
}

/// Sample images for the configured categories; writes per-sample PNGs and a
/// category × sample grid.
pub fn cmd_sample(cfg: &SampleConfig) -> Result<(), CliError> {
    let (model, sched, _) = load_model(&cfg.checkpoint)?;
    let manifest = load_universe(&cfg.dataset_dir)?;
    let scales =
        GuidanceScales::new(cfg.gamma, cfg.eta).map_err(|e| CliError::Config(e.to_string()))?;
    let writer_cond = match cfg.writer {
        Some(w) => WriterCond::Index(w),
        None => WriterCond::Null,
    };
    std::fs::create_dir_all(cfg.out_dir.join("samples"))
        .map_err(|e| CliError::Runtime(format!("create {}: {e}", cfg.out_dir.display())))?;
    persist_resolved(&cfg.out_dir, cfg)?;

    let passes = model_passes_per_step(scales);
    if passes == 1 {
        println!("single-pass sampling (no guidance overhead)");
    } else {
        println!("guided sampling: {passes} model passes per step");
    }

    let mut grid_rows = Vec::new();
    for &cat in &cfg.categories {
        let glyph = printed_glyph_for(&manifest, cat).map_err(runtime)?;
        let conds = vec![writer_cond.clone(); cfg.count];
        let batch = inkdiff_core::eval::synthesize_category(
            &model,
            &sched,
            &glyph,
            &conds,
            scales,
            cfg.inference_steps,
            cfg.seed,
            cat,
            0,
        )
        .map_err(runtime)?;
        let mut row = Vec::new();
        for i in 0..cfg.count {
            let img = batch.slice(ndarray::s![i, 0, .., ..]).to_owned();
            let path = cfg.out_dir.join(format!("samples/c{cat:04}_s{i:03}.png"));
            inkdiff_core::glyphs::export_png(&path, &img).map_err(runtime)?;
            row.push(img);
        }
        grid_rows.push(row);
    }
    save_grid(&grid_rows, &cfg.out_dir.join("grid.png"))?;

    let run = serde_json::json!({
        "tool_version": TOOL_VERSION,
        "seed": cfg.seed,
        "sampling_passes_per_step": passes,
        "inference_steps": cfg.inference_steps,
        "categories": cfg.categories,
    });
    std::fs::write(
        cfg.out_dir.join("run.json"),
        serde_json::to_string_pretty(&run).unwrap(),
    )
    .map_err(runtime)?;
    Ok(())
}

/// Writer-interpolation grid: rows are categories, columns the interpolation
/// factors; each row reuses one initial noise draw.
pub fn cmd_interpolate(cfg: &InterpolateConfig) -> Result<(), CliError> {
    let (model, sched, _) = load_model(&cfg.checkpoint)?;
    let manifest = load_universe(&cfg.dataset_dir)?;
    let scales =
        GuidanceScales::new(cfg.gamma, cfg.eta).map_err(|e| CliError::Config(e.to_string()))?;
    for &l in &cfg.lambdas {
        if !(0.0..=1.0).contains(&l) {
            return Err(CliError::Config(format!("lambda {l} outside [0, 1]")));
        }
    }
    let z_i = model
        .normalized_writer_embedding(&WriterCond::Index(cfg.writer_i))
        .map_err(|e| CliError::Config(e.to_string()))?;
    let z_j = model
        .normalized_writer_embedding(&WriterCond::Index(cfg.writer_j))
        .map_err(|e| CliError::Config(e.to_string()))?;

    std::fs::create_dir_all(cfg.out_dir.join("cells"))
        .map_err(|e| CliError::Runtime(format!("create {}: {e}", cfg.out_dir.display())))?;
    persist_resolved(&cfg.out_dir, cfg)?;

    let mut grid_rows = Vec::new();
    for &cat in &cfg.categories {
        let glyph = printed_glyph_for(&manifest, cat).map_err(runtime)?;
        let mut row = Vec::new();
        for &lambda in &cfg.lambdas {
            let z = slerp(&z_i, &z_j, lambda).map_err(runtime)?;
            let batch = inkdiff_core::eval::synthesize_category(
                &model,
                &sched,
                &glyph,
                &[WriterCond::Vector(z)],
                scales,
                cfg.inference_steps,
                cfg.seed,
                cat,
                0,
            )
            .map_err(runtime)?;
            let img = batch.slice(ndarray::s![0, 0, .., ..]).to_owned();
            let path = cfg
                .out_dir
                .join(format!("cells/c{cat:04}_l{:03}.png", (lambda * 100.0).round() as usize));
            inkdiff_core::glyphs::export_png(&path, &img).map_err(runtime)?;
            row.push(img);
        }
        grid_rows.push(row);
    }
    save_grid(&grid_rows, &cfg.out_dir.join("grid.png"))?;
    println!(
        "interpolation grid: {} categories x {} factors -> {}",
        cfg.categories.len(),
        cfg.lambdas.len(),
        cfg.out_dir.join("grid.png").display()
    );
    Ok(())
}

/// Run the evaluation pipeline and write the metrics report.
pub fn cmd_eval(cfg: &EvalConfig) -> Result<ZeroShotReport, CliError> {
    // Validate inputs before any compute.
    if !cfg.self_check {
        match &cfg.checkpoint {
            None => {
                return Err(CliError::Config(
                    "eval needs a checkpoint path (or self_check = true)".into(),
                ))
            }
            Some(p) if !p.is_file() => {
                return Err(CliError::Config(format!(
                    "checkpoint {} does not exist",
                    p.display()
                )))
            }
            _ => {}
        }
    }
    let manifest = load_universe(&cfg.dataset_dir)?;
    let scales =
        GuidanceScales::new(cfg.gamma, cfg.eta).map_err(|e| CliError::Config(e.to_string()))?;

    let classifier = cfg.classifier.clone().unwrap_or_else(|| {
        ClassifierConfig::desk_default(manifest.image_size, manifest.categories.len())
    });
    let exp = ExperimentConfig {
        train_fraction: cfg.train_fraction,
        samples_per_unseen: cfg.samples_per_unseen,
        classifier,
        seed: cfg.seed,
    };

    let report = if cfg.self_check {
        zero_shot_experiment(GeneratorSource::OracleReal, &manifest, &exp).map_err(runtime)?
    } else {
        let (model, sched, _) = load_model(cfg.checkpoint.as_ref().unwrap())?;
        let writer_mode = match cfg.writer_mode {
            WriterModeParam::Null => SynthWriterMode::Null,
            WriterModeParam::PerWriter => SynthWriterMode::PerWriter,
            WriterModeParam::Interpolated => SynthWriterMode::Interpolated {
                lambda: cfg.interpolation_lambda,
            },
        };
        zero_shot_experiment(
            GeneratorSource::Model {
                model: &model,
                schedule: &sched,
                scales,
                inference_steps: cfg.inference_steps,
                writer_mode,
            },
            &manifest,
            &exp,
        )
        .map_err(runtime)?
    };

    std::fs::create_dir_all(&cfg.out_dir)
        .map_err(|e| CliError::Runtime(format!("create {}: {e}", cfg.out_dir.display())))?;
    persist_resolved(&cfg.out_dir, cfg)?;
    std::fs::write(
        cfg.out_dir.join("report.json"),
        serde_json::to_string_pretty(&report).unwrap(),
    )
    .map_err(runtime)?;
    std::fs::write(cfg.out_dir.join("summary.txt"), report.summary_table()).map_err(runtime)?;
    print!("{}", report.summary_table());
    Ok(report)
}
