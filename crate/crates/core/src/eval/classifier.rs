//! Small residual convolutional classifier used as recognizer and feature
//! extractor. Trained with plain SGD + momentum and a step-decay schedule;
//! no data augmentation.

use ndarray::{Array2, Array4};
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{CoreError, CoreResult};
use crate::nn::{Conv2d, GroupNorm, Init, Linear};
use crate::optim::SgdMomentum;
use crate::params::ParamStore;
use crate::rng;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassifierConfig {
    pub image_size: usize,
    pub class_count: usize,
    pub base_channels: usize,
    /// Per-stage width multipliers; depth-4 desk default (1, 2, 4, 8).
    pub stage_multipliers: Vec<usize>,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    /// Epochs at which the learning rate decays by 10×.
    pub lr_decay_epochs: Vec<usize>,
    /// When set, every class in 0..class_count must have training samples.
    pub require_all_classes: bool,
    pub seed: u64,
}

impl ClassifierConfig {
    pub fn desk_default(image_size: usize, class_count: usize) -> Self {
        Self {
            image_size,
            class_count,
            base_channels: 16,
            stage_multipliers: vec![1, 2, 4, 8],
            epochs: 30,
            batch_size: 64,
            lr: 0.03,
            momentum: 0.9,
            lr_decay_epochs: vec![20, 27],
            require_all_classes: true,
            seed: 0,
        }
    }

    fn validate(&self) -> CoreResult<()> {
        if self.class_count < 2 {
            return Err(CoreError::InvalidConfig(
                "classifier needs at least 2 categories".into(),
            ));
        }
        if self.stage_multipliers.is_empty() {
            return Err(CoreError::InvalidConfig("no classifier stages".into()));
        }
        let div = 1usize << (self.stage_multipliers.len() - 1);
        if self.image_size % div != 0 || self.image_size / div < 2 {
            return Err(CoreError::InvalidConfig(format!(
                "image size {} incompatible with {} stages",
                self.image_size,
                self.stage_multipliers.len()
            )));
        }
        Ok(())
    }
}

/// Labeled image set for classifier training/evaluation. Writer identities
/// ride along for consumers that need them (generator training, style
/// checks); the classifier itself ignores them.
pub struct ClassifierDataset {
    pub images: Array4<f32>,
    pub labels: Vec<usize>,
    pub writers: Vec<usize>,
}

impl ClassifierDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Row-concatenate two datasets.
    pub fn concat(&self, other: &ClassifierDataset) -> ClassifierDataset {
        let images = ndarray::concatenate(
            ndarray::Axis(0),
            &[self.images.view(), other.images.view()],
        )
        .expect("image shape mismatch");
        let mut labels = self.labels.clone();
        labels.extend_from_slice(&other.labels);
        let mut writers = self.writers.clone();
        writers.extend_from_slice(&other.writers);
        ClassifierDataset { images, labels, writers }
    }

    /// The same images labeled by writer id instead of category.
    pub fn relabel_by_writer(&self) -> ClassifierDataset {
        ClassifierDataset {
            images: self.images.clone(),
            labels: self.writers.clone(),
            writers: self.writers.clone(),
        }
    }
}

struct PlainResBlock {
    norm1: GroupNorm,
    conv1: Conv2d,
    norm2: GroupNorm,
    conv2: Conv2d,
    skip: Option<Conv2d>,
}

impl PlainResBlock {
    fn build(
        store: &mut ParamStore<f32>,
        r: &mut ChaCha8Rng,
        name: &str,
        c_in: usize,
        c_out: usize,
    ) -> Self {
        let norm1 = GroupNorm::build(store, &format!("{name}.norm1"), c_in);
        let conv1 = Conv2d::build(store, r, &format!("{name}.conv1"), c_in, c_out, 3, Init::Standard);
        let norm2 = GroupNorm::build(store, &format!("{name}.norm2"), c_out);
        let conv2 = Conv2d::build(store, r, &format!("{name}.conv2"), c_out, c_out, 3, Init::NearZero);
        let skip = (c_in != c_out)
            .then(|| Conv2d::build(store, r, &format!("{name}.skip"), c_in, c_out, 1, Init::Standard));
        Self { norm1, conv1, norm2, conv2, skip }
    }

    fn forward(&self, tape: &mut Tape<f32>, store: &ParamStore<f32>, x: Var) -> Var {
        let mut h = self.norm1.forward(tape, store, x);
        h = tape.silu(h);
        h = self.conv1.forward(tape, store, h);
        h = self.norm2.forward(tape, store, h);
        h = tape.silu(h);
        h = self.conv2.forward(tape, store, h);
        let sk = match &self.skip {
            Some(conv) => conv.forward(tape, store, x),
            None => x,
        };
        tape.add(sk, h)
    }
}

struct Layout {
    conv_in: Conv2d,
    stages: Vec<PlainResBlock>,
    head: Linear,
}

/// Residual CNN with softmax head; the penultimate (pooled) layer doubles as
/// the feature extractor for distribution metrics.
pub struct ClassifierModel {
    pub config: ClassifierConfig,
    store: ParamStore<f32>,
    layout: Layout,
    /// Classes that had at least one training sample.
    pub covered: Vec<bool>,
}

/// Argmax with NaN treated as smallest, so corrupt logits cannot panic.
fn argmax_row(row: ndarray::ArrayView1<'_, f32>) -> usize {
    let mut best = 0usize;
    let mut best_v = f32::NEG_INFINITY;
    for (i, &v) in row.iter().enumerate() {
        if v > best_v {
            best_v = v;
            best = i;
        }
    }
    best
}

fn build_layout(store: &mut ParamStore<f32>, cfg: &ClassifierConfig, seed: u64) -> Layout {
    let mut r = rng::stream(seed, "classifier-init", &[]);
    let c0 = cfg.base_channels;
    let conv_in = Conv2d::build(store, &mut r, "cls.conv_in", 1, c0, 3, Init::Standard);
    let mut stages = Vec::new();
    let mut ch = c0;
    for (i, &m) in cfg.stage_multipliers.iter().enumerate() {
        let c_out = c0 * m;
        stages.push(PlainResBlock::build(store, &mut r, &format!("cls.stage{i}"), ch, c_out));
        ch = c_out;
    }
    let head = Linear::build(store, &mut r, "cls.head", ch, cfg.class_count, Init::Standard);
    Layout { conv_in, stages, head }
}

impl ClassifierModel {
    pub fn feature_dim(&self) -> usize {
        self.config.base_channels * self.config.stage_multipliers.last().unwrap()
    }

    /// Build the graph to pooled features and logits.
    fn graph(&self, tape: &mut Tape<f32>, images: &Array4<f32>) -> (Var, Var) {
        let x = tape.constant(images.clone().into_dyn());
        let mut h = self.layout.conv_in.forward(tape, &self.store, x);
        for (i, stage) in self.layout.stages.iter().enumerate() {
            h = stage.forward(tape, &self.store, h);
            if i + 1 < self.layout.stages.len() {
                h = tape.avg_pool2(h);
            }
        }
        let feat = tape.global_avg_pool(h);
        let logits = self.layout.head.forward(tape, &self.store, feat);
        (feat, logits)
    }

    fn batched<Fw: FnMut(&Array4<f32>) -> Array2<f32>>(
        images: &Array4<f32>,
        batch: usize,
        mut f: Fw,
    ) -> Array2<f32> {
        let n = images.dim().0;
        let mut out: Option<Array2<f32>> = None;
        let mut row = 0;
        while row < n {
            let hi = (row + batch).min(n);
            let chunk = images.slice(ndarray::s![row..hi, .., .., ..]).to_owned();
            let res = f(&chunk);
            let o = out.get_or_insert_with(|| Array2::zeros((n, res.ncols())));
            o.slice_mut(ndarray::s![row..hi, ..]).assign(&res);
            row = hi;
        }
        out.unwrap_or_else(|| Array2::zeros((0, 0)))
    }

    /// Softmax class probabilities, rows summing to 1.
    pub fn predict_probs(&self, images: &Array4<f32>) -> Array2<f32> {
        Self::batched(images, 256, |chunk| {
            let mut tape = Tape::new();
            let (_, logits) = self.graph(&mut tape, chunk);
            let lv = tape
                .value(logits)
                .view()
                .into_dimensionality::<ndarray::Ix2>()
                .unwrap()
                .to_owned();
            let mut probs = lv;
            for mut row in probs.rows_mut() {
                let mx = row.iter().fold(f32::NEG_INFINITY, |a, &v| a.max(v));
                row.mapv_inplace(|v| (v - mx).exp());
                let sum: f32 = row.iter().sum();
                row.mapv_inplace(|v| v / sum);
            }
            probs
        })
    }

    /// Penultimate-layer features.
    pub fn features(&self, images: &Array4<f32>) -> Array2<f32> {
        Self::batched(images, 256, |chunk| {
            let mut tape = Tape::new();
            let (feat, _) = self.graph(&mut tape, chunk);
            tape.value(feat)
                .view()
                .into_dimensionality::<ndarray::Ix2>()
                .unwrap()
                .to_owned()
        })
    }

    pub fn predict(&self, images: &Array4<f32>) -> Vec<usize> {
        let probs = self.predict_probs(images);
        probs.rows().into_iter().map(argmax_row).collect()
    }

    pub fn accuracy(&self, data: &ClassifierDataset) -> f64 {
        if data.is_empty() {
            return 0.0;
        }
        let preds = self.predict(&data.images);
        let correct = preds
            .iter()
            .zip(data.labels.iter())
            .filter(|(p, l)| p == l)
            .count();
        correct as f64 / data.len() as f64
    }
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct TrainHistory {
    pub epoch_loss: Vec<f64>,
    pub train_accuracy: Vec<f64>,
    pub val_accuracy: Vec<f64>,
}

/// Train a classifier from scratch on the given dataset.
pub fn train_classifier(
    dataset: &ClassifierDataset,
    config: &ClassifierConfig,
    val: Option<&ClassifierDataset>,
) -> CoreResult<(ClassifierModel, TrainHistory)> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(CoreError::InvalidConfig("empty training set".into()));
    }
    let mut counts = vec![0usize; config.class_count];
    for &l in &dataset.labels {
        if l >= config.class_count {
            return Err(CoreError::InvalidConfig(format!(
                "label {} out of range for {} classes",
                l, config.class_count
            )));
        }
        counts[l] += 1;
    }
    if config.require_all_classes {
        if let Some(empty) = counts.iter().position(|&c| c == 0) {
            return Err(CoreError::EmptyCategory(empty));
        }
    }
    if counts.iter().filter(|&&c| c > 0).count() < 2 {
        return Err(CoreError::InvalidConfig(
            "training set covers fewer than 2 categories".into(),
        ));
    }

    let mut store = ParamStore::new();
    let layout = build_layout(&mut store, config, config.seed);
    let covered = counts.iter().map(|&c| c > 0).collect();
    let mut model = ClassifierModel { config: config.clone(), store, layout, covered };

    let mut opt = SgdMomentum::new(&model.store, config.lr, config.momentum);
    let mut history = TrainHistory::default();
    let n = dataset.len();
    let mut order: Vec<usize> = (0..n).collect();

    for epoch in 0..config.epochs {
        if config.lr_decay_epochs.contains(&epoch) {
            opt.lr *= 0.1;
        }
        let mut shuffle_rng = rng::stream(config.seed, "classifier-epoch", &[epoch as u64]);
        order.shuffle(&mut shuffle_rng);
        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        for chunk in order.chunks(config.batch_size) {
            let mut images = Array4::<f32>::zeros((
                chunk.len(),
                1,
                config.image_size,
                config.image_size,
            ));
            let mut labels = Vec::with_capacity(chunk.len());
            for (i, &idx) in chunk.iter().enumerate() {
                images
                    .slice_mut(ndarray::s![i, .., .., ..])
                    .assign(&dataset.images.slice(ndarray::s![idx, .., .., ..]));
                labels.push(dataset.labels[idx]);
            }
            let mut tape = Tape::new();
            let (_, logits) = model.graph(&mut tape, &images);
            let loss = tape.cross_entropy_logits(logits, &labels);
            let loss_v = tape.scalar_value(loss);
            if !loss_v.is_finite() {
                return Err(CoreError::NonFiniteLoss {
                    step: epoch as u64,
                    detail: format!("classifier loss {loss_v}"),
                });
            }
            loss_sum += loss_v * chunk.len() as f64;
            // Pre-update predictions for the running accuracy.
            let lv = tape
                .value(logits)
                .view()
                .into_dimensionality::<ndarray::Ix2>()
                .unwrap()
                .to_owned();
            if lv.iter().any(|v| !v.is_finite()) {
                return Err(CoreError::NonFiniteLoss {
                    step: epoch as u64,
                    detail: "non-finite classifier logits".into(),
                });
            }
            for (row, &label) in lv.rows().into_iter().zip(labels.iter()) {
                correct += usize::from(argmax_row(row) == label);
            }
            let grads = tape.backward(loss);
            opt.step(&mut model.store, &grads);
        }
        history.epoch_loss.push(loss_sum / n as f64);
        history.train_accuracy.push(correct as f64 / n as f64);
        if let Some(v) = val {
            history.val_accuracy.push(model.accuracy(v));
        }
    }
    Ok((model, history))
}
