//! Finite-difference validation of the full training-loss gradient on a tiny
//! model covering every block type (residual, attention, up/down resampling,
//! normalization, FiLM conditioning, embedding paths).

use inkdiff_core::autodiff::Tape;
use inkdiff_core::denoiser::{Denoiser, ModelConfig};
use inkdiff_core::guidance::WriterCond;
use inkdiff_core::params::ParamId;
use inkdiff_core::rng;
use inkdiff_core::schedule::default_linear_schedule;
use ndarray::Array4;
use rand::Rng;

fn toy_inputs(seed: u64) -> (Array4<f64>, Array4<f64>, Array4<f64>) {
    let mut r = rng::stream(seed, "gradcheck-inputs", &[]);
    let x0 = Array4::from_shape_fn((2, 1, 8, 8), |_| r.gen::<f64>() * 1.6 - 0.8);
    let glyph = Array4::from_shape_fn((2, 1, 8, 8), |_| if r.gen::<f64>() > 0.7 { 1.0 } else { -1.0 });
    let eps = Array4::from_shape_fn((2, 1, 8, 8), |_| {
        let v: f64 = r.sample(rand_distr::StandardNormal);
        v
    });
    (x0, glyph, eps)
}

fn loss_at(
    model: &Denoiser<f64>,
    ts: &[usize],
    x0: &Array4<f64>,
    glyph: &Array4<f64>,
    eps: &Array4<f64>,
) -> f64 {
    let sched = default_linear_schedule(100).unwrap();
    let writers = vec![WriterCond::Index(0), WriterCond::Null];
    let mut tape = Tape::new();
    let (loss, _, _) = model
        .build_loss_graph(&mut tape, x0, ts, glyph, &writers, eps, &sched)
        .unwrap();
    tape.scalar_value(loss)
}

fn simple_at(
    model: &Denoiser<f64>,
    ts: &[usize],
    x0: &Array4<f64>,
    glyph: &Array4<f64>,
    eps: &Array4<f64>,
) -> f64 {
    let sched = default_linear_schedule(100).unwrap();
    let writers = vec![WriterCond::Index(1), WriterCond::Index(0)];
    let mut tape = Tape::new();
    let (_, simple, _) = model
        .build_loss_graph(&mut tape, x0, ts, glyph, &writers, eps, &sched)
        .unwrap();
    tape.scalar_value(simple)
}

/// Directional derivative of the hybrid loss along a random parameter
/// direction vs central finite differences, relative error <= 1e-3.
#[test]
fn hybrid_loss_directional_derivative_matches_finite_differences() {
    // t values cover the NLL row (t = 1) and KL rows.
    for (case, ts) in [(0u64, vec![1usize, 37]), (1, vec![50, 2])] {
        let model: Denoiser<f64> = Denoiser::new(ModelConfig::toy(2), 123 + case).unwrap();
        let (x0, glyph, eps) = toy_inputs(9 + case);
        let sched = default_linear_schedule(100).unwrap();
        let writers = vec![WriterCond::Index(0), WriterCond::Null];

        let mut tape = Tape::new();
        let (loss, _, _) = model
            .build_loss_graph(&mut tape, &x0, &ts, &glyph, &writers, &eps, &sched)
            .unwrap();
        let grads = tape.backward(loss);

        // Random unit direction over the whole parameter vector.
        let mut dir_rng = rng::stream(77, "gradcheck-dir", &[case]);
        let mut direction: Vec<(ParamId, ndarray::ArrayD<f64>)> = Vec::new();
        let mut norm2 = 0.0;
        for (id, entry) in model.store().iter() {
            let d = entry.value.mapv(|_| dir_rng.gen::<f64>() * 2.0 - 1.0);
            norm2 += d.iter().map(|v| v * v).sum::<f64>();
            direction.push((id, d));
        }
        let norm = norm2.sqrt();
        for (_, d) in direction.iter_mut() {
            d.mapv_inplace(|v| v / norm);
        }

        let analytic: f64 = direction
            .iter()
            .map(|(id, d)| {
                grads
                    .get(*id)
                    .map(|g| g.iter().zip(d.iter()).map(|(a, b)| a * b).sum::<f64>())
                    .unwrap_or(0.0)
            })
            .sum();

        let h = 1e-4;
        let mut shift = |sign: f64| {
            let mut m = Denoiser::<f64>::new(ModelConfig::toy(2), 123 + case).unwrap();
            for (id, d) in &direction {
                let v = m.store_mut().value_mut(*id);
                ndarray::Zip::from(v).and(d).for_each(|p, &dv| *p += sign * h * dv);
            }
            loss_at(&m, &ts, &x0, &glyph, &eps)
        };
        let fd = (shift(1.0) - shift(-1.0)) / (2.0 * h);

        let denom = fd.abs().max(analytic.abs()).max(1e-10);
        let rel = (fd - analytic).abs() / denom;
        assert!(
            rel <= 1e-3,
            "case {case}: directional derivative {analytic} vs FD {fd} (rel {rel})"
        );
    }
}

/// Per-parameter spot checks on coordinates drawn from every layer of the
/// model, so each block type's backward is exercised in composition.
///
/// Uses the mean-squared noise term: unlike the full hybrid loss (whose
/// variational part deliberately stops gradients at the model mean, which
/// finite differences would still see), it is differentiable end to end.
#[test]
fn per_layer_coordinates_match_finite_differences() {
    let model: Denoiser<f64> = Denoiser::new(ModelConfig::toy(2), 5).unwrap();
    let (x0, glyph, eps) = toy_inputs(21);
    let ts = vec![13usize, 1];
    let sched = default_linear_schedule(100).unwrap();
    let writers = vec![WriterCond::Index(1), WriterCond::Index(0)];

    let mut tape = Tape::new();
    let (_, simple, _) = model
        .build_loss_graph(&mut tape, &x0, &ts, &glyph, &writers, &eps, &sched)
        .unwrap();
    let grads = tape.backward(simple);

    let entries: Vec<(ParamId, String, usize)> = model
        .store()
        .iter()
        .map(|(id, e)| (id, e.name.clone(), e.value.len()))
        .collect();
    let h = 1e-4;
    let mut checked = 0usize;
    for (id, name, len) in entries {
        // One coordinate per parameter array, deterministic choice.
        let flat = rng::mix(3, "coord", &[id.0 as u64]) as usize % len;
        let analytic = grads.get(id).map(|g| g.as_slice().unwrap()[flat]).unwrap_or(0.0);
        let mut eval = |delta: f64| {
            let mut m = Denoiser::<f64>::new(ModelConfig::toy(2), 5).unwrap();
            m.store_mut().value_mut(id).as_slice_mut().unwrap()[flat] += delta;
            simple_at(&m, &ts, &x0, &glyph, &eps)
        };
        let fd = (eval(h) - eval(-h)) / (2.0 * h);
        // Gradients below FD noise compare absolutely, the rest relatively.
        if fd.abs().max(analytic.abs()) > 1e-5 {
            let denom = fd.abs().max(analytic.abs());
            assert!(
                (fd - analytic).abs() / denom <= 1e-3,
                "{name}[{flat}]: tape {analytic} vs fd {fd}"
            );
        } else {
            assert!(
                (fd - analytic).abs() <= 1e-6,
                "{name}[{flat}]: tape {analytic} vs fd {fd} (absolute)"
            );
        }
        checked += 1;
    }
    // The toy model must actually cover all block types.
    assert!(checked > 40, "only {checked} parameters checked");
    let names: Vec<String> = model.store().iter().map(|(_, e)| e.name.clone()).collect();
    for needle in ["attn", "down", "up", "conv", "norm", "emb_scale", "writer.table", "time.ffn1"] {
        assert!(
            names.iter().any(|n| n.contains(needle)),
            "toy model lacks a {needle} layer"
        );
    }
}
