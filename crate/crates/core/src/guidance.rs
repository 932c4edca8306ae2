//! Multi-conditional classifier-free guidance, training-time condition
//! dropout, and spherical interpolation between writer embeddings.

use ndarray::ArrayD;
use rand::Rng;

use crate::diffusion::NoisePrediction;
use crate::error::{CoreError, CoreResult};

/// Content (gamma) and writer (eta) guidance scales.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GuidanceScales {
    pub gamma: f64,
    pub eta: f64,
}

impl GuidanceScales {
    pub fn new(gamma: f64, eta: f64) -> CoreResult<Self> {
        if !(gamma.is_finite() && eta.is_finite() && gamma >= 0.0 && eta >= 0.0) {
            return Err(CoreError::InvalidRange(format!(
                "guidance scales must be finite and non-negative, got ({}, {})",
                gamma, eta
            )));
        }
        Ok(Self { gamma, eta })
    }

    pub fn unguided() -> Self {
        Self { gamma: 0.0, eta: 0.0 }
    }
}

/// Writer condition fed to the denoiser: an index into the embedding table,
/// an explicit (already normalized) embedding vector, or the null embedding.
#[derive(Debug, Clone, PartialEq)]
pub enum WriterCond {
    Null,
    Index(usize),
    Vector(Vec<f32>),
}

impl WriterCond {
    pub fn is_null(&self) -> bool {
        matches!(self, WriterCond::Null)
    }
}

/// Per-sample conditioning; `None` marks the empty condition.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionPair<G> {
    pub glyph: Option<G>,
    pub writer: Option<usize>,
}

/// Independently replace each condition by the empty one with probability `p`.
///
/// Always draws exactly two uniforms (glyph first, writer second), so caller
/// RNG streams advance identically regardless of outcome.
pub fn dropout_conditions<G, R: Rng>(
    pair: ConditionPair<G>,
    p: f64,
    rng: &mut R,
) -> CoreResult<ConditionPair<G>> {
    if !(0.0..=1.0).contains(&p) {
        return Err(CoreError::InvalidRange(format!(
            "dropout probability {} outside [0, 1]",
            p
        )));
    }
    let drop_glyph = rng.gen::<f64>() < p;
    let drop_writer = rng.gen::<f64>() < p;
    Ok(ConditionPair {
        glyph: if drop_glyph { None } else { pair.glyph },
        writer: if drop_writer { None } else { pair.writer },
    })
}

/// Guided noise composition:
/// ε̃ = ε_full + γ·ε_glyph_only + η·ε_writer_only − (γ+η)·ε_uncond.
pub fn compose_guided_eps(
    eps_full: &ArrayD<f32>,
    eps_glyph_only: &ArrayD<f32>,
    eps_writer_only: &ArrayD<f32>,
    eps_uncond: &ArrayD<f32>,
    scales: GuidanceScales,
) -> CoreResult<ArrayD<f32>> {
    for (other, name) in [
        (eps_glyph_only, "glyph-only"),
        (eps_writer_only, "writer-only"),
        (eps_uncond, "unconditional"),
    ] {
        if other.shape() != eps_full.shape() {
            return Err(CoreError::ShapeMismatch {
                expected: eps_full.shape().to_vec(),
                got: other.shape().to_vec(),
                context: format!("compose_guided_eps {} branch", name),
            });
        }
    }
    let g = scales.gamma;
    let e = scales.eta;
    let mut out = eps_full.clone();
    ndarray::Zip::from(&mut out)
        .and(eps_glyph_only)
        .and(eps_writer_only)
        .and(eps_uncond)
        .for_each(|o, &cg, &cw, &u| {
            let v = f64::from(*o) + g * f64::from(cg) + e * f64::from(cw)
                - (g + e) * f64::from(u);
            *o = v as f32;
        });
    Ok(out)
}

/// A denoiser that supports all four condition combinations.
///
/// `glyph = None` means the empty glyph (the model substitutes an
/// all-background image); `WriterCond::Null` selects the null embedding.
pub trait GlyphConditionalModel {
    fn predict(
        &self,
        x_t: &ArrayD<f32>,
        t: usize,
        glyph: Option<&ArrayD<f32>>,
        writer: &WriterCond,
    ) -> CoreResult<NoisePrediction>;
}

/// Evaluate the model under the condition combinations required by the
/// guidance scales and compose the guided ε. The variance head is taken from
/// the fully conditional pass. Redundant passes are skipped: one evaluation
/// when γ = η = 0, and branches that collapse onto each other (null writer or
/// null glyph) are evaluated once.
pub fn guided_denoise_fn<M: GlyphConditionalModel>(
    model: &M,
    x_t: &ArrayD<f32>,
    t: usize,
    glyph: Option<&ArrayD<f32>>,
    writer: &WriterCond,
    scales: GuidanceScales,
) -> CoreResult<NoisePrediction> {
    let full = model.predict(x_t, t, glyph, writer)?;
    if scales.gamma == 0.0 && scales.eta == 0.0 {
        return Ok(full);
    }

    let writer_is_null = writer.is_null();
    let glyph_is_null = glyph.is_none();

    // (g, ∅): equals the full pass when the writer is already null.
    let glyph_only = if scales.gamma == 0.0 {
        None
    } else if writer_is_null {
        Some(full.clone())
    } else {
        Some(model.predict(x_t, t, glyph, &WriterCond::Null)?)
    };

    // (∅, w): equals the full pass when the glyph is already null.
    let writer_only = if scales.eta == 0.0 {
        None
    } else if glyph_is_null {
        Some(full.clone())
    } else {
        Some(model.predict(x_t, t, None, writer)?)
    };

    // (∅, ∅): collapses onto an already computed branch when possible.
    let uncond = if glyph_is_null && writer_is_null {
        full.clone()
    } else if glyph_is_null {
        match &glyph_only {
            Some(p) => p.clone(),
            None => model.predict(x_t, t, None, &WriterCond::Null)?,
        }
    } else if writer_is_null {
        match &writer_only {
            Some(p) => p.clone(),
            None => model.predict(x_t, t, None, &WriterCond::Null)?,
        }
    } else {
        model.predict(x_t, t, None, &WriterCond::Null)?
    };

    // Branches with a zero coefficient never contribute; reuse the full pass
    // as a shape-compatible placeholder.
    let glyph_branch = glyph_only.as_ref().map_or(&full.epsilon, |p| &p.epsilon);
    let writer_branch = writer_only.as_ref().map_or(&full.epsilon, |p| &p.epsilon);
    let eps = compose_guided_eps(
        &full.epsilon,
        glyph_branch,
        writer_branch,
        &uncond.epsilon,
        scales,
    )?;
    NoisePrediction::new(eps, full.nu)
}

/// Raw spherical combination z_i·cos(λπ/2) + z_j·sin(λπ/2), no renormalization.
///
/// Preserves unit norm exactly only for orthogonal inputs; kept separate so
/// the formula itself stays testable.
pub fn slerp_raw(z_i: &[f32], z_j: &[f32], lambda: f64) -> CoreResult<Vec<f32>> {
    if z_i.len() != z_j.len() {
        return Err(CoreError::DimensionMismatch(format!(
            "slerp inputs of length {} and {}",
            z_i.len(),
            z_j.len()
        )));
    }
    if !(0.0..=1.0).contains(&lambda) {
        return Err(CoreError::InvalidRange(format!(
            "interpolation factor {} outside [0, 1]",
            lambda
        )));
    }
    let angle = lambda * std::f64::consts::FRAC_PI_2;
    let (c, s) = (angle.cos(), angle.sin());
    Ok(z_i
        .iter()
        .zip(z_j.iter())
        .map(|(&a, &b)| (c * f64::from(a) + s * f64::from(b)) as f32)
        .collect())
}

/// Spherical interpolation between unit-norm embeddings, renormalized to unit
/// norm. λ = 0 and λ = 1 return the inputs bit-exactly.
pub fn slerp(z_i: &[f32], z_j: &[f32], lambda: f64) -> CoreResult<Vec<f32>> {
    const MIN_NORM: f64 = 1e-8;
    if z_i.len() != z_j.len() {
        return Err(CoreError::DimensionMismatch(format!(
            "slerp inputs of length {} and {}",
            z_i.len(),
            z_j.len()
        )));
    }
    // Exact endpoints: inputs are unit-norm by precondition, so no
    // renormalization may perturb them.
    if lambda == 0.0 {
        return Ok(z_i.to_vec());
    }
    if lambda == 1.0 {
        return Ok(z_j.to_vec());
    }
    let raw = slerp_raw(z_i, z_j, lambda)?;
    let norm = raw.iter().map(|&v| f64::from(v) * f64::from(v)).sum::<f64>().sqrt();
    if norm < MIN_NORM {
        return Err(CoreError::ZeroVector {
            norm,
            min: MIN_NORM,
        });
    }
    Ok(raw.iter().map(|&v| (f64::from(v) / norm) as f32).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use ndarray::arr1;
    use std::cell::Cell;

    fn scalar(v: f32) -> ArrayD<f32> {
        arr1(&[v]).into_dyn()
    }

    #[test]
    fn compose_matches_direct_arithmetic_oracle() {
        let scales = GuidanceScales::new(1.0, 2.0).unwrap();
        let out = compose_guided_eps(&scalar(1.0), &scalar(2.0), &scalar(3.0), &scalar(4.0), scales)
            .unwrap();
        // 1 + 1·2 + 2·3 − 3·4 = −3
        assert!((f64::from(out[[0]]) + 3.0).abs() < 1e-6);
    }

    #[test]
    fn compose_collapses_at_zero_scales() {
        let out = compose_guided_eps(
            &scalar(0.7),
            &scalar(9.0),
            &scalar(-9.0),
            &scalar(5.0),
            GuidanceScales::unguided(),
        )
        .unwrap();
        assert_eq!(out[[0]], 0.7);
    }

    #[test]
    fn compose_is_affine_identity_on_equal_inputs() {
        let e = scalar(0.37);
        for &(g, n) in &[(0.0, 0.0), (1.0, 2.0), (3.5, 0.25), (7.0, 7.0)] {
            let out = compose_guided_eps(&e, &e, &e, &e, GuidanceScales::new(g, n).unwrap())
                .unwrap();
            assert!((f64::from(out[[0]]) - 0.37).abs() < 1e-6, "γ={} η={}", g, n);
        }
    }

    #[test]
    fn compose_rejects_shape_mismatch() {
        let a = scalar(1.0);
        let b = arr1(&[1.0f32, 2.0]).into_dyn();
        assert!(matches!(
            compose_guided_eps(&a, &b, &a, &a, GuidanceScales::unguided()),
            Err(CoreError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn scales_validate() {
        assert!(GuidanceScales::new(-1.0, 0.0).is_err());
        assert!(GuidanceScales::new(0.0, f64::NAN).is_err());
        assert!(GuidanceScales::new(0.0, f64::INFINITY).is_err());
    }

    /// Mock model returning a distinct constant per condition pair and
    /// counting evaluations.
    struct MockModel {
        calls: Cell<usize>,
    }

    impl MockModel {
        fn value(glyph: Option<&ArrayD<f32>>, writer: &WriterCond) -> f32 {
            match (glyph.is_some(), !writer.is_null()) {
                (true, true) => 1.0,
                (true, false) => 2.0,
                (false, true) => 3.0,
                (false, false) => 4.0,
            }
        }
    }

    impl GlyphConditionalModel for MockModel {
        fn predict(
            &self,
            x_t: &ArrayD<f32>,
            _t: usize,
            glyph: Option<&ArrayD<f32>>,
            writer: &WriterCond,
        ) -> CoreResult<NoisePrediction> {
            self.calls.set(self.calls.get() + 1);
            let v = Self::value(glyph, writer);
            NoisePrediction::new(x_t.mapv(|_| v), x_t.mapv(|_| 0.25 * v))
        }
    }

    #[test]
    fn guided_unguided_is_single_pass() {
        let m = MockModel { calls: Cell::new(0) };
        let x = scalar(0.0);
        let g = scalar(1.0);
        let out = guided_denoise_fn(
            &m,
            &x,
            5,
            Some(&g),
            &WriterCond::Index(0),
            GuidanceScales::unguided(),
        )
        .unwrap();
        assert_eq!(m.calls.get(), 1);
        assert_eq!(out.epsilon[[0]], 1.0);
    }

    #[test]
    fn guided_content_only_uses_three_passes() {
        let m = MockModel { calls: Cell::new(0) };
        let x = scalar(0.0);
        let g = scalar(1.0);
        let scales = GuidanceScales::new(1.0, 0.0).unwrap();
        let out =
            guided_denoise_fn(&m, &x, 5, Some(&g), &WriterCond::Index(0), scales).unwrap();
        assert_eq!(m.calls.get(), 3);
        // ε̃ = 1 + 1·2 + 0·3 − 1·4 = −1; ν from the full pass.
        assert_eq!(out.epsilon[[0]], -1.0);
        assert_eq!(out.nu[[0]], 0.25);
    }

    #[test]
    fn guided_composition_matches_compose_oracle() {
        let m = MockModel { calls: Cell::new(0) };
        let x = scalar(0.0);
        let g = scalar(1.0);
        let scales = GuidanceScales::new(2.0, 1.0).unwrap();
        let out =
            guided_denoise_fn(&m, &x, 5, Some(&g), &WriterCond::Index(0), scales).unwrap();
        assert_eq!(m.calls.get(), 4);
        let oracle = compose_guided_eps(
            &scalar(1.0),
            &scalar(2.0),
            &scalar(3.0),
            &scalar(4.0),
            scales,
        )
        .unwrap();
        assert_eq!(out.epsilon[[0]], oracle[[0]]);
    }

    #[test]
    fn guided_null_writer_reuses_branches() {
        let m = MockModel { calls: Cell::new(0) };
        let x = scalar(0.0);
        let g = scalar(1.0);
        let scales = GuidanceScales::new(1.0, 0.5).unwrap();
        let out = guided_denoise_fn(&m, &x, 5, Some(&g), &WriterCond::Null, scales).unwrap();
        // (g,∅) equals full; (∅,∅) equals (∅,w): two distinct evaluations.
        assert_eq!(m.calls.get(), 2);
        // ε̃ = 2 + 1·2 + 0.5·4 − 1.5·4 = 0
        assert_eq!(out.epsilon[[0]], 0.0);
    }

    #[test]
    fn dropout_endpoints() {
        let mut r = rng::stream(1, "dropout", &[]);
        let pair = ConditionPair { glyph: Some(7u8), writer: Some(3) };
        let kept = dropout_conditions(pair.clone(), 0.0, &mut r).unwrap();
        assert_eq!(kept, pair);
        let dropped = dropout_conditions(pair, 1.0, &mut r).unwrap();
        assert_eq!(dropped.glyph, None);
        assert_eq!(dropped.writer, None);
        assert!(dropout_conditions(ConditionPair::<u8> { glyph: None, writer: None }, 1.5, &mut r)
            .is_err());
    }

    #[test]
    fn dropout_monte_carlo_binomial_bounds() {
        let mut r = rng::stream(42, "dropout-mc", &[]);
        let n = 100_000usize;
        let (mut g_drop, mut w_drop, mut both) = (0usize, 0usize, 0usize);
        for _ in 0..n {
            let out = dropout_conditions(
                ConditionPair { glyph: Some(0u8), writer: Some(0) },
                0.1,
                &mut r,
            )
            .unwrap();
            let gd = out.glyph.is_none();
            let wd = out.writer.is_none();
            g_drop += usize::from(gd);
            w_drop += usize::from(wd);
            both += usize::from(gd && wd);
        }
        let nf = n as f64;
        // 3σ binomial bounds from the spec: 0.1 ± 0.003 and 0.01 ± 0.001.
        assert!((g_drop as f64 / nf - 0.1).abs() < 0.003, "glyph {}", g_drop);
        assert!((w_drop as f64 / nf - 0.1).abs() < 0.003, "writer {}", w_drop);
        assert!((both as f64 / nf - 0.01).abs() < 0.001, "both {}", both);
    }

    #[test]
    fn dropout_events_are_independent_chi_square() {
        let mut r = rng::stream(7, "dropout-chi2", &[]);
        let n = 100_000usize;
        // 2x2 contingency table over (glyph dropped, writer dropped).
        let mut table = [[0f64; 2]; 2];
        for _ in 0..n {
            let out = dropout_conditions(
                ConditionPair { glyph: Some(0u8), writer: Some(0) },
                0.1,
                &mut r,
            )
            .unwrap();
            table[usize::from(out.glyph.is_none())][usize::from(out.writer.is_none())] += 1.0;
        }
        let row: Vec<f64> = (0..2).map(|i| table[i][0] + table[i][1]).collect();
        let col: Vec<f64> = (0..2).map(|j| table[0][j] + table[1][j]).collect();
        let mut chi2 = 0.0;
        for i in 0..2 {
            for j in 0..2 {
                let expect = row[i] * col[j] / n as f64;
                chi2 += (table[i][j] - expect).powi(2) / expect;
            }
        }
        // χ² critical value at α = 0.01, df = 1.
        assert!(chi2 < 6.635, "chi2 = {}", chi2);
    }

    #[test]
    fn slerp_endpoints_are_bit_exact() {
        let zi = vec![0.6f32, 0.8];
        let zj = vec![-0.8f32, 0.6];
        assert_eq!(slerp(&zi, &zj, 0.0).unwrap(), zi);
        assert_eq!(slerp(&zi, &zj, 1.0).unwrap(), zj);
    }

    #[test]
    fn slerp_orthonormal_midpoint() {
        let out = slerp_raw(&[1.0, 0.0], &[0.0, 1.0], 0.5).unwrap();
        let h = (0.5f64).sqrt();
        assert!((f64::from(out[0]) - h).abs() < 1e-7);
        assert!((f64::from(out[1]) - h).abs() < 1e-7);
        let norm: f64 = out.iter().map(|&v| f64::from(v).powi(2)).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-7);
    }

    #[test]
    fn slerp_renormalizes_nonorthogonal_inputs() {
        // 60° apart: raw midpoint norm is not 1; output must still be unit.
        let zi = [1.0f32, 0.0];
        let zj = [0.5f32, 0.75f32.sqrt() as f32];
        let out = slerp(&zi, &zj, 0.5).unwrap();
        let norm: f64 = out.iter().map(|&v| f64::from(v).powi(2)).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-6);
    }

    #[test]
    fn slerp_antipodal_errors() {
        let zi = [1.0f32, 0.0];
        let zj = [-1.0f32, 0.0];
        assert!(matches!(
            slerp(&zi, &zj, 0.5),
            Err(CoreError::ZeroVector { .. })
        ));
    }

    #[test]
    fn slerp_rejects_dimension_mismatch_and_bad_lambda() {
        assert!(slerp(&[1.0], &[1.0, 0.0], 0.5).is_err());
        assert!(slerp_raw(&[1.0, 0.0], &[0.0, 1.0], 1.5).is_err());
    }
}
