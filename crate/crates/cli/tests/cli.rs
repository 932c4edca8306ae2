//! CLI-level contracts on a miniature dataset: reproducible generation,
//! config rejection, resumable training, and sampling metadata.

use std::path::{Path, PathBuf};

use inkdiff_cli::commands::{cmd_eval, cmd_gen_dataset, cmd_sample, cmd_train};
use inkdiff_cli::config::{
    load_config, EvalConfig, GenDatasetConfig, ModelParams, SampleConfig, TrainConfig,
    TrainingParams,
};
use inkdiff_cli::CliError;
use inkdiff_core::glyphs::UniverseParams;

fn workdir(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join("inkdiff-cli-tests").join(name);
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn tiny_universe() -> UniverseParams {
    UniverseParams {
        num_radicals: 3,
        num_categories: 8,
        seen_fraction: 0.5,
        num_writers: 2,
        samples_per_pair: 8,
        image_size: 16,
        seed: 11,
    }
}

fn tiny_model() -> ModelParams {
    ModelParams {
        num_stages: 2,
        base_channels: 8,
        channel_multipliers: vec![1, 2],
        blocks_per_stage: 1,
        attention_resolutions: vec![4],
        num_heads: 2,
        writer_embed_dim: 8,
        timestep_embed_dim: 16,
        writer_conditional: true,
    }
}

fn tiny_training(steps: u64, out_hint: u64) -> TrainingParams {
    TrainingParams {
        steps,
        batch_size: 4,
        lr: 1e-3,
        weight_decay: 0.0,
        dropout_prob: 0.1,
        num_diffusion_steps: 100,
        checkpoint_every: 5,
        log_every: 1000,
        train_fraction: 0.75,
        seed: 100 + out_hint,
    }
}

fn gen_dataset(dir: &Path) {
    cmd_gen_dataset(&GenDatasetConfig {
        out_dir: dir.to_path_buf(),
        universe: tiny_universe(),
    })
    .unwrap();
}

#[test]
fn gen_dataset_is_byte_reproducible() {
    let a = workdir("gen-a");
    let b = workdir("gen-b");
    gen_dataset(&a);
    gen_dataset(&b);
    let manifest_a = std::fs::read(a.join("manifest.tsv")).unwrap();
    let manifest_b = std::fs::read(b.join("manifest.tsv")).unwrap();
    assert_eq!(manifest_a, manifest_b);
    let universe_a = std::fs::read(a.join("universe.json")).unwrap();
    let universe_b = std::fs::read(b.join("universe.json")).unwrap();
    assert_eq!(universe_a, universe_b);
    // A couple of image files byte-identical too.
    for entry in ["glyphs/c0000.png", "images/c0000_w000_s0000.png"] {
        assert_eq!(
            std::fs::read(a.join(entry)).unwrap(),
            std::fs::read(b.join(entry)).unwrap(),
            "{entry}"
        );
    }
    // Resolved config and version recorded.
    let resolved: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(a.join("resolved_config.json")).unwrap())
            .unwrap();
    assert!(resolved["tool_version"].is_string());
}

#[test]
fn unknown_config_key_is_rejected_by_name() {
    let dir = workdir("badcfg");
    let path = dir.join("train.json");
    std::fs::write(
        &path,
        r#"{"dataset_dir": "x", "out_dir": "y", "training": {"not_a_real_knob": 5}}"#,
    )
    .unwrap();
    let err = load_config::<TrainConfig>(&path, &[]).unwrap_err();
    let msg = format!("{err}");
    assert!(msg.contains("not_a_real_knob"), "{msg}");
    assert_eq!(err.exit_code(), 2);
}

#[test]
fn train_resume_continues_step_counter_and_matches_uninterrupted_run() {
    let data = workdir("train-data");
    gen_dataset(&data);

    // Uninterrupted 10-step run.
    let full_out = workdir("train-full");
    cmd_train(&TrainConfig {
        dataset_dir: data.clone(),
        out_dir: full_out.clone(),
        model: tiny_model(),
        training: tiny_training(10, 1),
        resume: None,
    })
    .unwrap();

    // 5 steps, then resume for 5 more.
    let half_out = workdir("train-half");
    cmd_train(&TrainConfig {
        dataset_dir: data.clone(),
        out_dir: half_out.clone(),
        model: tiny_model(),
        training: tiny_training(5, 1),
        resume: None,
    })
    .unwrap();
    cmd_train(&TrainConfig {
        dataset_dir: data.clone(),
        out_dir: half_out.clone(),
        model: tiny_model(),
        training: tiny_training(10, 1),
        resume: Some(half_out.join("checkpoint.ckpt")),
    })
    .unwrap();

    // Loss log continues at the saved step counter without restarting.
    let log = std::fs::read_to_string(half_out.join("loss.csv")).unwrap();
    let steps: Vec<u64> = log
        .lines()
        .skip(1)
        .map(|l| l.split(',').next().unwrap().parse().unwrap())
        .collect();
    assert_eq!(steps, (1..=10).collect::<Vec<u64>>());

    // Identical final checkpoints (resume is step-addressed).
    let full_ckpt = std::fs::read(full_out.join("checkpoint.ckpt")).unwrap();
    let half_ckpt = std::fs::read(half_out.join("checkpoint.ckpt")).unwrap();
    assert_eq!(full_ckpt, half_ckpt);
}

#[test]
fn identical_seeds_identical_checkpoints() {
    let data = workdir("twin-data");
    gen_dataset(&data);
    let out_a = workdir("twin-a");
    let out_b = workdir("twin-b");
    for out in [&out_a, &out_b] {
        cmd_train(&TrainConfig {
            dataset_dir: data.clone(),
            out_dir: out.clone(),
            model: tiny_model(),
            training: tiny_training(8, 2),
            resume: None,
        })
        .unwrap();
    }
    assert_eq!(
        std::fs::read(out_a.join("checkpoint.ckpt")).unwrap(),
        std::fs::read(out_b.join("checkpoint.ckpt")).unwrap()
    );
}

#[test]
fn sample_writes_identical_pngs_and_single_pass_metadata() {
    let data = workdir("sample-data");
    gen_dataset(&data);
    let train_out = workdir("sample-train");
    cmd_train(&TrainConfig {
        dataset_dir: data.clone(),
        out_dir: train_out.clone(),
        model: tiny_model(),
        training: tiny_training(6, 3),
        resume: None,
    })
    .unwrap();

    let sample = |out: PathBuf, gamma: f64| {
        cmd_sample(&SampleConfig {
            checkpoint: train_out.join("checkpoint.ckpt"),
            dataset_dir: data.clone(),
            out_dir: out.clone(),
            categories: vec![0, 6],
            writer: Some(1),
            gamma,
            eta: 0.0,
            count: 2,
            inference_steps: 5,
            seed: 9,
        })
        .unwrap();
        out
    };
    let a = sample(workdir("sample-a"), 0.0);
    let b = sample(workdir("sample-b"), 0.0);
    assert_eq!(
        std::fs::read(a.join("samples/c0000_s000.png")).unwrap(),
        std::fs::read(b.join("samples/c0000_s000.png")).unwrap()
    );
    assert_eq!(
        std::fs::read(a.join("grid.png")).unwrap(),
        std::fs::read(b.join("grid.png")).unwrap()
    );
    let run: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(a.join("run.json")).unwrap()).unwrap();
    assert_eq!(run["sampling_passes_per_step"], 1);

    // Unseen category ids are accepted (category 6 is in the unseen half).
    assert!(a.join("samples/c0006_s000.png").is_file());

    // Guided sampling reports the extra passes.
    let g = sample(workdir("sample-g"), 2.0);
    let run: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(g.join("run.json")).unwrap()).unwrap();
    assert_eq!(run["sampling_passes_per_step"], 3);
}

#[test]
fn eval_missing_checkpoint_fails_before_compute() {
    let data = workdir("eval-data");
    // No dataset generated: the checkpoint check must fire first.
    let err = cmd_eval(&EvalConfig {
        checkpoint: Some(data.join("nope.ckpt")),
        dataset_dir: data.clone(),
        out_dir: data.join("out"),
        gamma: 0.0,
        eta: 0.0,
        writer_mode: inkdiff_cli::config::WriterModeParam::PerWriter,
        interpolation_lambda: 0.5,
        samples_per_unseen: 4,
        inference_steps: 4,
        train_fraction: 0.75,
        classifier: None,
        seed: 1,
        self_check: false,
    })
    .unwrap_err();
    match err {
        CliError::Config(msg) => assert!(msg.contains("checkpoint"), "{msg}"),
        other => panic!("expected config error, got {other}"),
    }
}
