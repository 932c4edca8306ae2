//! Stochastic handwritten-style rendering.
//!
//! A [`WriterStyle`] carries writer-level biases (slant, stroke thickness,
//! and seeded per-radical "habit" deformations that stay fixed across that
//! writer's samples); the sample RNG adds per-sample variation on top. With
//! all perturbation amplitudes at zero the output equals the printed render.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, CoreResult};
use crate::rng;

use super::raster::{place_radical, rasterize_segments, BASE_STROKE_THICKNESS};
use super::{CharacterSpec, GlyphImage, Radical, Segment};

/// Per-writer rendering style. All fields must stay inside the documented
/// safe ranges so deformed strokes remain on the canvas.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WriterStyle {
    pub id: usize,
    /// Shear factor in radians, |slant| ≤ 0.35.
    pub slant: f64,
    /// Stroke thickness multiplier in [0.5, 2.0].
    pub thickness_scale: f64,
    /// Endpoint jitter amplitude in pixels (at the configured raster size), ≤ 1.5.
    pub jitter_px: f64,
    /// Per-component displacement scale in canvas units, ≤ 0.08.
    pub component_shift: f64,
    /// Stroke curvature noise scale, ≤ 0.15.
    pub curvature: f64,
    /// Seed of the writer-level habit stream.
    pub seed: u64,
}

impl WriterStyle {
    /// Neutral style: renders identically to the printed glyph.
    pub fn neutral(id: usize) -> Self {
        Self {
            id,
            slant: 0.0,
            thickness_scale: 1.0,
            jitter_px: 0.0,
            component_shift: 0.0,
            curvature: 0.0,
            seed: 0,
        }
    }

    pub fn validate(&self) -> CoreResult<()> {
        let bad = |what: &str, v: f64| {
            Err(CoreError::StyleOutOfRange(format!(
                "writer {}: {} = {}",
                self.id, what, v
            )))
        };
        if !(-0.35..=0.35).contains(&self.slant) {
            return bad("slant", self.slant);
        }
        if !(0.5..=2.0).contains(&self.thickness_scale) {
            return bad("thickness_scale", self.thickness_scale);
        }
        if !(0.0..=1.5).contains(&self.jitter_px) {
            return bad("jitter_px", self.jitter_px);
        }
        if !(0.0..=0.08).contains(&self.component_shift) {
            return bad("component_shift", self.component_shift);
        }
        if !(0.0..=0.15).contains(&self.curvature) {
            return bad("curvature", self.curvature);
        }
        Ok(())
    }
}

fn shear(p: [f64; 2], slant: f64) -> [f64; 2] {
    [p[0] + slant * (p[1] - 0.5), p[1]]
}

fn clamp_canvas(p: [f64; 2]) -> [f64; 2] {
    [p[0].clamp(0.02, 0.98), p[1].clamp(0.02, 0.98)]
}

/// Subdivide a (possibly bowed) line into straight pieces along a quadratic
/// with control point offset perpendicular to the chord.
fn bowed_line(a: [f64; 2], b: [f64; 2], bow: f64, out: &mut Vec<Segment>) {
    const PIECES: usize = 8;
    let mid = [(a[0] + b[0]) / 2.0, (a[1] + b[1]) / 2.0];
    let d = [b[0] - a[0], b[1] - a[1]];
    let len = (d[0] * d[0] + d[1] * d[1]).sqrt();
    let perp = if len > 1e-12 {
        [-d[1] / len, d[0] / len]
    } else {
        [0.0, 0.0]
    };
    let ctrl = [mid[0] + perp[0] * bow * len, mid[1] + perp[1] * bow * len];
    let point = |t: f64| {
        let u = 1.0 - t;
        [
            u * u * a[0] + 2.0 * u * t * ctrl[0] + t * t * b[0],
            u * u * a[1] + 2.0 * u * t * ctrl[1] + t * t * b[1],
        ]
    };
    let mut prev = a;
    for i in 1..=PIECES {
        let next = point(i as f64 / PIECES as f64);
        out.push(Segment::Line { a: prev, b: next });
        prev = next;
    }
}

/// Render one handwritten sample.
///
/// Writer-level habits come from `style.seed` (stable per radical/segment);
/// sample-level variation comes from `sample_rng` with a fixed draw order
/// (one pair per component, six values per segment).
pub fn render_handwritten(
    spec: &CharacterSpec,
    radicals: &[Radical],
    style: &WriterStyle,
    size: usize,
    sample_rng: &mut ChaCha8Rng,
) -> CoreResult<GlyphImage> {
    style.validate()?;
    let jitter_unit = style.jitter_px / size as f64;
    let mut segments: Vec<Segment> = Vec::new();

    for (rid, placement) in &spec.components {
        let mut comp_rng = rng::stream(style.seed, "component", &[*rid as u64]);
        let bias_dx = (comp_rng.gen::<f64>() * 2.0 - 1.0) * style.component_shift;
        let bias_dy = (comp_rng.gen::<f64>() * 2.0 - 1.0) * style.component_shift;
        let s_dx = (sample_rng.gen::<f64>() * 2.0 - 1.0) * style.component_shift * 0.5;
        let s_dy = (sample_rng.gen::<f64>() * 2.0 - 1.0) * style.component_shift * 0.5;
        let offset = [bias_dx + s_dx, bias_dy + s_dy];

        let placed = place_radical(&radicals[*rid], placement);
        for (sidx, seg) in placed.into_iter().enumerate() {
            let mut habit = rng::stream(style.seed, "habit", &[*rid as u64, sidx as u64]);
            let hb: [f64; 4] = std::array::from_fn(|_| habit.gen::<f64>() * 2.0 - 1.0);
            let sv: [f64; 6] = std::array::from_fn(|_| sample_rng.gen::<f64>() * 2.0 - 1.0);
            match seg {
                Segment::Line { a, b } => {
                    let jit = |p: [f64; 2], h: (f64, f64), s: (f64, f64)| {
                        [
                            p[0] + offset[0] + (0.6 * h.0 + 0.4 * s.0) * jitter_unit,
                            p[1] + offset[1] + (0.6 * h.1 + 0.4 * s.1) * jitter_unit,
                        ]
                    };
                    let a2 = jit(a, (hb[0], hb[1]), (sv[0], sv[1]));
                    let b2 = jit(b, (hb[2], hb[3]), (sv[2], sv[3]));
                    let a2 = clamp_canvas(shear(a2, style.slant));
                    let b2 = clamp_canvas(shear(b2, style.slant));
                    let bow = (0.5 * hb[0] + 0.5 * sv[4]) * style.curvature;
                    bowed_line(a2, b2, bow, &mut segments);
                }
                Segment::Arc { center, radius, start, sweep } => {
                    let c2 = clamp_canvas(shear(
                        [
                            center[0] + offset[0] + 0.5 * hb[0] * jitter_unit,
                            center[1] + offset[1] + 0.5 * hb[1] * jitter_unit,
                        ],
                        style.slant,
                    ));
                    let r2 = (radius * (1.0 + 0.5 * (0.5 * hb[2] + 0.5 * sv[0]) * style.curvature))
                        .max(0.01);
                    let start2 = start + 0.4 * sv[1] * style.curvature;
                    let sweep2 = sweep * (1.0 + 0.2 * sv[2] * style.curvature);
                    segments.push(Segment::Arc {
                        center: c2,
                        radius: r2,
                        start: start2,
                        sweep: sweep2,
                    });
                }
            }
        }
    }

    let thickness = BASE_STROKE_THICKNESS * style.thickness_scale;
    Ok(rasterize_segments(&segments, size, thickness))
}
