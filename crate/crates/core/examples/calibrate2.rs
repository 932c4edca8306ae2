// Second calibration pass: track correctness score against training steps.
// Run: cargo run --release -p inkdiff-core --example calibrate2 [total_steps] [base] [ddim]

use inkdiff_core::denoiser::{Denoiser, ModelConfig, TrainBatch};
use inkdiff_core::eval::{
    pool_metrics, render_and_split, train_classifier, ClassifierConfig, ClassifierDataset,
    SynthWriterMode,
};
use inkdiff_core::glyphs::{build_universe, export_png, UniverseParams};
use inkdiff_core::guidance::GuidanceScales;
use inkdiff_core::optim::AdamW;
use inkdiff_core::rng;
use inkdiff_core::schedule::default_linear_schedule;
use ndarray::Array4;
use rand::Rng;
use std::time::Instant;

fn main() {
    let total_steps: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(3000);
    let base: usize = std::env::args().nth(2).and_then(|s| s.parse().ok()).unwrap_or(16);
    let ddim: usize = std::env::args().nth(3).and_then(|s| s.parse().ok()).unwrap_or(32);

    let manifest = build_universe(&UniverseParams {
        samples_per_pair: 32,
        ..Default::default()
    })
    .unwrap();
    let t0 = Instant::now();
    let splits = render_and_split(&manifest, 0.75).unwrap();
    println!("rendered {} train in {:.1}s", splits.train.len(), t0.elapsed().as_secs_f64());

    // Small oracle.
    let ccfg = ClassifierConfig {
        image_size: 32,
        class_count: 40,
        base_channels: 8,
        stage_multipliers: vec![1, 2, 4, 8],
        epochs: 6,
        batch_size: 64,
        lr: 0.05,
        momentum: 0.9,
        lr_decay_epochs: vec![5],
        require_all_classes: true,
        seed: 3,
    };
    let t = Instant::now();
    let (oracle, hist) = train_classifier(&splits.train, &ccfg, Some(&splits.test)).unwrap();
    println!(
        "oracle in {:.0}s: train {:.3} val {:.3}",
        t.elapsed().as_secs_f64(),
        hist.train_accuracy.last().unwrap(),
        hist.val_accuracy.last().unwrap()
    );

    let cfg = ModelConfig {
        image_size: 32,
        num_stages: 3,
        base_channels: base,
        channel_multipliers: vec![1, 2, 2],
        blocks_per_stage: 1,
        attention_resolutions: vec![8, 4],
        num_heads: 2,
        writer_count: 8,
        writer_embed_dim: 16,
        timestep_embed_dim: 64,
        null_writer_index: 8,
    };
    let sched = default_linear_schedule(1000).unwrap();
    let seen_set: std::collections::HashSet<usize> =
        manifest.seen_categories().into_iter().collect();
    let glyphs: std::collections::HashMap<usize, ndarray::Array2<f32>> = manifest
        .categories
        .iter()
        .map(|c| (c.id, inkdiff_core::glyphs::printed_glyph_for(&manifest, c.id).unwrap()))
        .collect();
    let train_rows: Vec<usize> = (0..splits.train.len())
        .filter(|&i| seen_set.contains(&splits.train.labels[i]))
        .collect();

    let mut model: Denoiser<f32> = Denoiser::new(cfg, 1).unwrap();
    println!("model params: {}", model.param_count());
    let mut opt = AdamW::new(model.store(), 3e-4, 1e-4);
    let batch_size = 16;

    let sample_cats: Vec<usize> = manifest.seen_categories().into_iter().take(12).collect();
    let eval_cs = |model: &Denoiser<f32>, tag: &str| {
        let per_cat = 8;
        let mut images = Array4::<f32>::zeros((sample_cats.len() * per_cat, 1, 32, 32));
        let mut labels = Vec::new();
        let mut row = 0;
        for &cat in &sample_cats {
            let conds = inkdiff_core::eval::writer_conditions(
                model, SynthWriterMode::PerWriter, per_cat, 9, cat).unwrap();
            let batch = inkdiff_core::eval::synthesize_category(
                model, &sched, &glyphs[&cat], &conds,
                GuidanceScales::unguided(), ddim, 9, cat, 0,
            )
            .unwrap();
            for i in 0..per_cat {
                images.slice_mut(ndarray::s![row, .., .., ..])
                    .assign(&batch.slice(ndarray::s![i, .., .., ..]));
                labels.push(cat);
                row += 1;
            }
        }
        // Dump a visual strip of the first 8 samples.
        for i in 0..8 {
            let img = images.slice(ndarray::s![i, 0, .., ..]).to_owned();
            export_png(std::path::Path::new(&format!("/tmp/calib2_{tag}_{i}.png")), &img).unwrap();
        }
        let writers = vec![0; labels.len()];
        let pool = ClassifierDataset { images, labels: labels.clone(), writers };
        let rows: Vec<usize> = (0..splits.test.len())
            .filter(|&i| sample_cats.contains(&splits.test.labels[i]))
            .collect();
        let mut rimages = Array4::<f32>::zeros((rows.len(), 1, 32, 32));
        let mut rlabels = Vec::new();
        for (i, &r) in rows.iter().enumerate() {
            rimages.slice_mut(ndarray::s![i, .., .., ..])
                .assign(&splits.test.images.slice(ndarray::s![r, .., .., ..]));
            rlabels.push(splits.test.labels[r]);
        }
        let rwriters = vec![0; rlabels.len()];
        let reference = ClassifierDataset { images: rimages, labels: rlabels, writers: rwriters };
        let m = pool_metrics(&oracle, &pool, &reference).unwrap();
        println!("[{tag}] CS {:.3} FID {:.2} IS {:.3}", m.correctness_score, m.frechet, m.inception_score);
    };

    let t = Instant::now();
    for s in 0..total_steps {
        let mut r = rng::stream(1, "calib2", &[s as u64]);
        let mut x0 = Array4::<f32>::zeros((batch_size, 1, 32, 32));
        let mut glyph = Array4::<f32>::zeros((batch_size, 1, 32, 32));
        let mut writer = Vec::new();
        for b in 0..batch_size {
            let row = train_rows[r.gen_range(0..train_rows.len())];
            x0.slice_mut(ndarray::s![b, 0, .., ..])
                .assign(&splits.train.images.slice(ndarray::s![row, 0, .., ..]));
            let cat = splits.train.labels[row];
            glyph.slice_mut(ndarray::s![b, 0, .., ..]).assign(&glyphs[&cat]);
            writer.push(Some(splits.train.writers[row]));
        }
        let batch = TrainBatch { x0, glyph, writer };
        let rec = model.train_step(&batch, &mut opt, &mut r, 0.1, &sched).unwrap();
        if s % 200 == 0 {
            println!(
                "step {s}: loss {:.4} ({:.2} s/step)",
                rec.loss,
                t.elapsed().as_secs_f64() / (s + 1) as f64
            );
        }
        if (s + 1) % 1000 == 0 {
            eval_cs(&model, &format!("s{}", s + 1));
        }
    }
    println!("total train time {:.0}s", t.elapsed().as_secs_f64());
}
