//! The zero-shot recognition experiment: synthesize handwriting for unseen
//! categories from a trained generator, train a recognizer on real seen data
//! plus the synthetic pool, and measure the benefit on real held-out data.

use ndarray::Array4;
use rand::Rng;
use serde::Serialize;

use crate::denoiser::Denoiser;
use crate::diffusion::{ddim_sample_loop, NoisePrediction};
use crate::error::{CoreError, CoreResult};
use crate::glyphs::{printed_glyph_for, render_manifest, DatasetManifest};
use crate::guidance::{compose_guided_eps, GuidanceScales, WriterCond};
use crate::rng;
use crate::schedule::NoiseSchedule;

use super::classifier::{train_classifier, ClassifierConfig, ClassifierDataset, ClassifierModel};
use super::metrics::{correctness_score, frechet_distance, inception_style_score, FeatureStats};

/// How the writer condition is chosen during synthesis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum SynthWriterMode {
    /// Null writer embedding: writer-independent synthesis.
    Null,
    /// Round-robin over the training writers, one per sample.
    PerWriter,
    /// Spherical midpoint of a random writer pair per sample.
    Interpolated { lambda: f64 },
}

/// Batched guided prediction with per-sample writer conditions.
///
/// Generalizes the single-condition guided composition to a batch; the
/// variance head comes from the fully conditional pass, and branch passes are
/// skipped when their scale is zero.
pub fn guided_predict_batch(
    model: &Denoiser<f32>,
    x_t: &Array4<f32>,
    t: usize,
    glyph: &Array4<f32>,
    writers: &[WriterCond],
    scales: GuidanceScales,
) -> CoreResult<NoisePrediction> {
    let n = x_t.dim().0;
    let ts = vec![t; n];
    let full = model.forward(x_t, &ts, Some(glyph), writers)?;
    if scales.gamma == 0.0 && scales.eta == 0.0 {
        return Ok(full);
    }
    let nulls = vec![WriterCond::Null; n];
    let glyph_only = if scales.gamma != 0.0 {
        Some(model.forward(x_t, &ts, Some(glyph), &nulls)?)
    } else {
        None
    };
    let writer_only = if scales.eta != 0.0 {
        Some(model.forward(x_t, &ts, None, writers)?)
    } else {
        None
    };
    let uncond = model.forward(x_t, &ts, None, &nulls)?;
    let eps = compose_guided_eps(
        &full.epsilon,
        glyph_only.as_ref().map_or(&full.epsilon, |p| &p.epsilon),
        writer_only.as_ref().map_or(&full.epsilon, |p| &p.epsilon),
        &uncond.epsilon,
        scales,
    )?;
    NoisePrediction::new(eps, full.nu)
}

/// Sample a batch of images for one category via guided DDIM.
///
/// The initial noise for sample `i` comes from `(seed, category, i)` only, so
/// matched seeds reproduce the same chain regardless of writer condition.
pub fn synthesize_category(
    model: &Denoiser<f32>,
    sched: &NoiseSchedule,
    glyph: &ndarray::Array2<f32>,
    writers: &[WriterCond],
    scales: GuidanceScales,
    inference_steps: usize,
    seed: u64,
    category: usize,
    sample_offset: usize,
) -> CoreResult<Array4<f32>> {
    let n = writers.len();
    let size = glyph.dim().0;
    let mut x_big_t = Array4::<f32>::zeros((n, 1, size, size));
    for i in 0..n {
        let mut r = rng::stream(seed, "synth-noise", &[category as u64, (sample_offset + i) as u64]);
        for y in 0..size {
            for x in 0..size {
                let v: f64 = r.sample(rand_distr::StandardNormal);
                x_big_t[[i, 0, y, x]] = v as f32;
            }
        }
    }
    let mut glyph_batch = Array4::<f32>::zeros((n, 1, size, size));
    for i in 0..n {
        glyph_batch.slice_mut(ndarray::s![i, 0, .., ..]).assign(glyph);
    }
    let out = ddim_sample_loop(
        |x, t| {
            let x4 = x.view().into_dimensionality::<ndarray::Ix4>().unwrap().to_owned();
            guided_predict_batch(model, &x4, t, &glyph_batch, writers, scales)
                .map(|p| NoisePrediction {
                    epsilon: p.epsilon,
                    nu: p.nu,
                })
        },
        sched,
        inference_steps,
        x_big_t.into_dyn(),
    )?;
    Ok(out.into_dimensionality::<ndarray::Ix4>().unwrap())
}

/// Build per-sample writer conditions for a synthesis pool.
pub fn writer_conditions(
    model: &Denoiser<f32>,
    mode: SynthWriterMode,
    count: usize,
    seed: u64,
    category: usize,
) -> CoreResult<Vec<WriterCond>> {
    let writer_count = model.config().writer_count;
    match mode {
        SynthWriterMode::Null => Ok(vec![WriterCond::Null; count]),
        SynthWriterMode::PerWriter => {
            if writer_count == 0 {
                return Err(CoreError::InvalidConfig(
                    "per-writer synthesis needs a writer-conditional model".into(),
                ));
            }
            Ok((0..count).map(|i| WriterCond::Index(i % writer_count)).collect())
        }
        SynthWriterMode::Interpolated { lambda } => {
            if writer_count < 2 {
                return Err(CoreError::InvalidConfig(
                    "interpolated synthesis needs at least 2 writers".into(),
                ));
            }
            (0..count)
                .map(|i| {
                    let mut r =
                        rng::stream(seed, "interp-pair", &[category as u64, i as u64]);
                    let a = r.gen_range(0..writer_count);
                    let mut b = r.gen_range(0..writer_count - 1);
                    if b >= a {
                        b += 1;
                    }
                    let za = model.normalized_writer_embedding(&WriterCond::Index(a))?;
                    let zb = model.normalized_writer_embedding(&WriterCond::Index(b))?;
                    let z = crate::guidance::slerp(&za, &zb, lambda)?;
                    Ok(WriterCond::Vector(z))
                })
                .collect()
        }
    }
}

/// Where synthetic unseen-category samples come from.
pub enum GeneratorSource<'a> {
    /// A trained denoiser sampled with DDIM and guidance.
    Model {
        model: &'a Denoiser<f32>,
        schedule: &'a NoiseSchedule,
        scales: GuidanceScales,
        inference_steps: usize,
        writer_mode: SynthWriterMode,
    },
    /// Harness self-check: real held-out unseen images stand in for the
    /// generator.
    OracleReal,
}

#[derive(Debug, Clone, Serialize)]
pub struct ExperimentConfig {
    /// Per-(category, writer) fraction of samples used for training.
    pub train_fraction: f64,
    pub samples_per_unseen: usize,
    /// Classifier settings template (class count, image size, seed, and the
    /// missing-class policy are overridden per role).
    pub classifier: ClassifierConfig,
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize)]
pub struct ZeroShotReport {
    pub acc_seen: f64,
    pub acc_unseen: f64,
    pub acc_unseen_baseline: f64,
    pub acc_unseen_oracle: f64,
    pub correctness_score: f64,
    pub frechet: f64,
    pub inception_score: f64,
    pub chance_rate: f64,
    pub class_count: usize,
    pub pool_size: usize,
    pub real_train_size: usize,
    pub real_test_size: usize,
    pub train_loss_first: Option<f64>,
    pub train_loss_last: Option<f64>,
    pub harness_valid: Option<bool>,
    pub seed: u64,
    pub notes: Vec<String>,
}

impl ZeroShotReport {
    pub fn summary_table(&self) -> String {
        let mut s = String::new();
        s.push_str("metric                 value\n");
        s.push_str("---------------------  --------\n");
        let mut put = |k: &str, v: f64| s.push_str(&format!("{k:<22} {v:>8.4}\n"));
        put("acc_seen", self.acc_seen);
        put("acc_unseen", self.acc_unseen);
        put("acc_unseen_baseline", self.acc_unseen_baseline);
        put("acc_unseen_oracle", self.acc_unseen_oracle);
        put("correctness_score", self.correctness_score);
        put("frechet", self.frechet);
        put("inception_score", self.inception_score);
        put("chance_rate", self.chance_rate);
        if let Some(h) = self.harness_valid {
            s.push_str(&format!("{:<22} {:>8}\n", "harness_valid", h));
        }
        s
    }
}

/// Subsets of the rendered real data.
pub struct RealSplits {
    pub train: ClassifierDataset,
    pub test: ClassifierDataset,
    pub train_seen: ClassifierDataset,
    pub test_seen: ClassifierDataset,
    pub test_unseen: ClassifierDataset,
    pub train_unseen: ClassifierDataset,
}

/// Render the manifest and split per (category, writer): the first
/// `ceil(train_fraction · samples_per_pair)` sample indices train, the rest
/// test.
pub fn render_and_split(
    manifest: &DatasetManifest,
    train_fraction: f64,
) -> CoreResult<RealSplits> {
    let rendered = render_manifest(manifest)?;
    let n_train =
        ((manifest.samples_per_pair as f64) * train_fraction).ceil() as usize;
    let seen: std::collections::HashSet<usize> =
        manifest.seen_categories().into_iter().collect();

    let size = manifest.image_size;
    let mut buckets: [Vec<usize>; 6] = Default::default();
    for row in 0..rendered.images.dim().0 {
        let cat = rendered.categories[row];
        let is_train = rendered.samples[row] < n_train;
        let is_seen = seen.contains(&cat);
        if is_train {
            buckets[0].push(row);
            if is_seen {
                buckets[2].push(row);
            } else {
                buckets[5].push(row);
            }
        } else {
            buckets[1].push(row);
            if is_seen {
                buckets[3].push(row);
            } else {
                buckets[4].push(row);
            }
        }
    }
    let subset = |rows: &[usize]| {
        let mut images = Array4::<f32>::zeros((rows.len(), 1, size, size));
        let mut labels = Vec::with_capacity(rows.len());
        let mut writers = Vec::with_capacity(rows.len());
        for (i, &row) in rows.iter().enumerate() {
            images
                .slice_mut(ndarray::s![i, .., .., ..])
                .assign(&rendered.images.slice(ndarray::s![row, .., .., ..]));
            labels.push(rendered.categories[row]);
            writers.push(rendered.writers[row]);
        }
        ClassifierDataset { images, labels, writers }
    };
    Ok(RealSplits {
        train: subset(&buckets[0]),
        test: subset(&buckets[1]),
        train_seen: subset(&buckets[2]),
        test_seen: subset(&buckets[3]),
        test_unseen: subset(&buckets[4]),
        train_unseen: subset(&buckets[5]),
    })
}

fn classifier_for(
    template: &ClassifierConfig,
    manifest: &DatasetManifest,
    class_count: usize,
    require_all: bool,
    seed: u64,
) -> ClassifierConfig {
    let mut cfg = template.clone();
    cfg.image_size = manifest.image_size;
    cfg.class_count = class_count;
    cfg.require_all_classes = require_all;
    cfg.seed = seed;
    cfg
}

fn accuracy_on(model: &ClassifierModel, data: &ClassifierDataset) -> f64 {
    model.accuracy(data)
}

/// Build the synthetic pool for the unseen categories.
pub fn build_synthetic_pool(
    gen: &GeneratorSource<'_>,
    manifest: &DatasetManifest,
    splits: &RealSplits,
    samples_per_unseen: usize,
    seed: u64,
) -> CoreResult<ClassifierDataset> {
    let unseen = manifest.unseen_categories();
    let size = manifest.image_size;
    let total = unseen.len() * samples_per_unseen;
    let mut images = Array4::<f32>::zeros((total, 1, size, size));
    let mut labels = Vec::with_capacity(total);
    let mut row = 0usize;
    match gen {
        GeneratorSource::OracleReal => {
            for &cat in &unseen {
                let rows: Vec<usize> = splits
                    .train_unseen
                    .labels
                    .iter()
                    .enumerate()
                    .filter(|(_, &l)| l == cat)
                    .map(|(i, _)| i)
                    .collect();
                if rows.is_empty() {
                    return Err(CoreError::InvalidConfig(format!(
                        "no real unseen samples for category {cat}"
                    )));
                }
                for i in 0..samples_per_unseen {
                    let src = rows[i % rows.len()];
                    images.slice_mut(ndarray::s![row, .., .., ..]).assign(
                        &splits.train_unseen.images.slice(ndarray::s![src, .., .., ..]),
                    );
                    labels.push(cat);
                    row += 1;
                }
            }
        }
        GeneratorSource::Model {
            model,
            schedule,
            scales,
            inference_steps,
            writer_mode,
        } => {
            const CHUNK: usize = 32;
            for &cat in &unseen {
                let glyph = printed_glyph_for(manifest, cat)?;
                let conds = writer_conditions(model, *writer_mode, samples_per_unseen, seed, cat)?;
                let mut offset = 0usize;
                while offset < samples_per_unseen {
                    let hi = (offset + CHUNK).min(samples_per_unseen);
                    let batch = synthesize_category(
                        model,
                        schedule,
                        &glyph,
                        &conds[offset..hi],
                        *scales,
                        *inference_steps,
                        seed,
                        cat,
                        offset,
                    )?;
                    for i in 0..(hi - offset) {
                        images
                            .slice_mut(ndarray::s![row, .., .., ..])
                            .assign(&batch.slice(ndarray::s![i, .., .., ..]));
                        labels.push(cat);
                        row += 1;
                    }
                    offset = hi;
                }
            }
        }
    }
    let writers = vec![0; labels.len()];
    Ok(ClassifierDataset { images, labels, writers })
}

/// Quality metrics of one synthetic pool against a real reference set.
#[derive(Debug, Clone, Serialize)]
pub struct PoolMetrics {
    pub correctness_score: f64,
    pub frechet: f64,
    pub inception_score: f64,
    pub pool_size: usize,
}

pub fn pool_metrics(
    oracle: &ClassifierModel,
    pool: &ClassifierDataset,
    reference: &ClassifierDataset,
) -> CoreResult<PoolMetrics> {
    let cs = correctness_score(oracle, &pool.images, &pool.labels)?;
    let probs = oracle.predict_probs(&pool.images);
    let is = inception_style_score(&probs)?;
    let fa = FeatureStats::from_rows(&oracle.features(&pool.images))?;
    let fb = FeatureStats::from_rows(&oracle.features(&reference.images))?;
    let fid = frechet_distance(&fa, &fb)?;
    Ok(PoolMetrics {
        correctness_score: cs,
        frechet: fid,
        inception_score: is,
        pool_size: pool.len(),
    })
}

/// Run the full zero-shot experiment.
///
/// Trains the oracle (all real categories) and baseline (real seen only)
/// recognizers, synthesizes the unseen-category pool, trains the augmented
/// recognizer on real-seen ∪ synthetic-unseen, and reports accuracies plus
/// pool quality metrics. With the oracle-real generator the report carries a
/// `harness_valid` flag comparing against the real-data-trained oracle.
pub fn zero_shot_experiment(
    gen: GeneratorSource<'_>,
    manifest: &DatasetManifest,
    cfg: &ExperimentConfig,
) -> CoreResult<ZeroShotReport> {
    let class_count = manifest.categories.len();
    let splits = render_and_split(manifest, cfg.train_fraction)?;
    let mut notes = Vec::new();

    let oracle_cfg = classifier_for(
        &cfg.classifier,
        manifest,
        class_count,
        true,
        rng::mix(cfg.seed, "oracle-classifier", &[]),
    );
    let (oracle, _) = train_classifier(&splits.train, &oracle_cfg, None)?;

    let baseline_cfg = classifier_for(
        &cfg.classifier,
        manifest,
        class_count,
        false,
        rng::mix(cfg.seed, "baseline-classifier", &[]),
    );
    let (baseline, _) = train_classifier(&splits.train_seen, &baseline_cfg, None)?;

    let pool = build_synthetic_pool(&gen, manifest, &splits, cfg.samples_per_unseen, cfg.seed)?;

    let augmented_train = if pool.is_empty() {
        notes.push("empty synthetic pool: augmented set equals real seen data".into());
        splits.train_seen.concat(&ClassifierDataset {
            images: Array4::zeros((0, 1, manifest.image_size, manifest.image_size)),
            labels: vec![],
            writers: vec![],
        })
    } else {
        splits.train_seen.concat(&pool)
    };
    let augmented_cfg = classifier_for(
        &cfg.classifier,
        manifest,
        class_count,
        false,
        rng::mix(cfg.seed, "augmented-classifier", &[]),
    );
    let (augmented, _) = train_classifier(&augmented_train, &augmented_cfg, None)?;

    let acc_seen = accuracy_on(&augmented, &splits.test_seen);
    let acc_unseen = accuracy_on(&augmented, &splits.test_unseen);
    let acc_unseen_baseline = accuracy_on(&baseline, &splits.test_unseen);
    let acc_unseen_oracle = accuracy_on(&oracle, &splits.test_unseen);

    let (cs, fid, is) = if pool.is_empty() {
        (0.0, f64::NAN, f64::NAN)
    } else {
        let m = pool_metrics(&oracle, &pool, &splits.test_unseen)?;
        (m.correctness_score, m.frechet, m.inception_score)
    };

    let harness_valid = match gen {
        GeneratorSource::OracleReal => {
            Some((acc_unseen - acc_unseen_oracle).abs() <= 0.02)
        }
        _ => None,
    };

    Ok(ZeroShotReport {
        acc_seen,
        acc_unseen,
        acc_unseen_baseline,
        acc_unseen_oracle,
        correctness_score: cs,
        frechet: fid,
        inception_score: is,
        chance_rate: 1.0 / class_count as f64,
        class_count,
        pool_size: pool.len(),
        real_train_size: splits.train.len(),
        real_test_size: splits.test.len(),
        train_loss_first: None,
        train_loss_last: None,
        harness_valid,
        seed: cfg.seed,
        notes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::ModelConfig;
    use crate::glyphs::{build_universe, UniverseParams};
    use crate::guidance::guided_denoise_fn;

    fn tiny_manifest() -> DatasetManifest {
        build_universe(&UniverseParams {
            num_radicals: 3,
            num_categories: 8,
            seen_fraction: 0.5,
            num_writers: 2,
            samples_per_pair: 16,
            image_size: 16,
            seed: 3,
        })
        .unwrap()
    }

    fn tiny_classifier() -> ClassifierConfig {
        ClassifierConfig {
            image_size: 16,
            class_count: 8,
            base_channels: 8,
            stage_multipliers: vec![1, 2],
            epochs: 16,
            batch_size: 16,
            lr: 0.1,
            momentum: 0.9,
            lr_decay_epochs: vec![12],
            require_all_classes: true,
            seed: 0,
        }
    }

    #[test]
    fn oracle_real_harness_check() {
        let manifest = tiny_manifest();
        let cfg = ExperimentConfig {
            train_fraction: 0.75,
            samples_per_unseen: 24,
            classifier: tiny_classifier(),
            seed: 5,
        };
        let report =
            zero_shot_experiment(GeneratorSource::OracleReal, &manifest, &cfg).unwrap();
        // The 2-point harness criterion itself needs converged classifiers and
        // belongs to the full-scale acceptance run; here the flag must merely
        // be computed for the oracle-real source.
        assert!(report.harness_valid.is_some(), "report: {report:?}");
        assert!(
            report.acc_unseen > report.chance_rate,
            "acc_unseen {} vs chance {} (report {report:?})",
            report.acc_unseen,
            report.chance_rate
        );
        assert_eq!(report.pool_size, 4 * 24);
        assert!(report.acc_seen > 0.5);
        assert!(report.correctness_score > 0.5);
    }

    #[test]
    fn untrained_model_pipeline_runs() {
        let manifest = tiny_manifest();
        let mc = ModelConfig {
            image_size: 16,
            num_stages: 2,
            base_channels: 8,
            channel_multipliers: vec![1, 2],
            blocks_per_stage: 1,
            attention_resolutions: vec![4],
            num_heads: 2,
            writer_count: 2,
            writer_embed_dim: 8,
            timestep_embed_dim: 16,
            null_writer_index: 2,
        };
        let model: Denoiser<f32> = Denoiser::new(mc, 1).unwrap();
        let sched = crate::schedule::default_linear_schedule(100).unwrap();
        let cfg = ExperimentConfig {
            train_fraction: 0.75,
            samples_per_unseen: 4,
            classifier: tiny_classifier(),
            seed: 5,
        };
        let report = zero_shot_experiment(
            GeneratorSource::Model {
                model: &model,
                schedule: &sched,
                scales: GuidanceScales::unguided(),
                inference_steps: 4,
                writer_mode: SynthWriterMode::PerWriter,
            },
            &manifest,
            &cfg,
        )
        .unwrap();
        assert_eq!(report.pool_size, 16);
        assert!(report.harness_valid.is_none());
        assert!(report.frechet.is_finite());
        assert!(report.inception_score >= 1.0);
    }

    #[test]
    fn batched_guided_prediction_matches_single_condition_path() {
        let mc = ModelConfig::toy(3);
        let model: Denoiser<f32> = Denoiser::new(mc, 9).unwrap();
        let mut r = rng::stream(2, "guided-batch", &[]);
        let x = Array4::from_shape_fn((2, 1, 8, 8), |_| r.gen::<f32>() - 0.5);
        let glyph = Array4::from_elem((2, 1, 8, 8), -1.0f32);
        let scales = GuidanceScales::new(1.5, 0.5).unwrap();
        let writers = vec![WriterCond::Index(1), WriterCond::Index(1)];
        let batched = guided_predict_batch(&model, &x, 7, &glyph, &writers, scales).unwrap();
        let single = guided_denoise_fn(
            &model,
            &x.clone().into_dyn(),
            7,
            Some(&glyph.clone().into_dyn()),
            &WriterCond::Index(1),
            scales,
        )
        .unwrap();
        let max_diff = batched
            .epsilon
            .iter()
            .zip(single.epsilon.iter())
            .map(|(&a, &b)| (a - b).abs())
            .fold(0.0f32, f32::max);
        assert!(max_diff < 1e-6, "max diff {max_diff}");
    }

    #[test]
    fn interpolated_conditions_are_unit_vectors() {
        let mc = ModelConfig::toy(4);
        let model: Denoiser<f32> = Denoiser::new(mc, 9).unwrap();
        let conds =
            writer_conditions(&model, SynthWriterMode::Interpolated { lambda: 0.5 }, 6, 3, 0)
                .unwrap();
        for c in conds {
            match c {
                WriterCond::Vector(v) => {
                    let norm: f64 =
                        v.iter().map(|&x| f64::from(x) * f64::from(x)).sum::<f64>().sqrt();
                    assert!((norm - 1.0).abs() < 1e-5);
                }
                other => panic!("expected vector condition, got {other:?}"),
            }
        }
    }
}
