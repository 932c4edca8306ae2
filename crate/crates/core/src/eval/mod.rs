//! Evaluation stack: reference classifier, sample-quality metrics, and the
//! zero-shot recognition experiment.

mod classifier;
mod experiment;
mod metrics;

pub use classifier::{
    train_classifier, ClassifierConfig, ClassifierDataset, ClassifierModel, TrainHistory,
};
pub use experiment::{
    build_synthetic_pool, guided_predict_batch, pool_metrics, render_and_split,
    synthesize_category, writer_conditions, zero_shot_experiment, ExperimentConfig,
    GeneratorSource, PoolMetrics, RealSplits, SynthWriterMode, ZeroShotReport,
};
pub use metrics::{
    correctness_score, frechet_distance, inception_style_score, FeatureStats, COVARIANCE_RIDGE,
};
