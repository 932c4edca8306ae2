//! Compositional pseudo-character universe: radicals with stroke programs,
//! layout-composed character specs, deterministic printed rendering,
//! stochastic per-writer handwritten rendering, seen/unseen splits, and
//! external corpus ingestion.

mod corpus;
mod handwriting;
mod raster;
mod universe;

pub use corpus::{export_dataset, export_png, load_external_corpus, LoadedCorpus};
pub use handwriting::{render_handwritten, WriterStyle};
pub use raster::{render_printed, rasterize_segments, to_unit_range, GLYPH_SUPERSAMPLE};
pub use universe::{
    build_universe, printed_glyph_for, render_manifest, CategoryEntry, DatasetManifest,
    RenderedDataset, UniverseParams,
};

use serde::{Deserialize, Serialize};

/// Single-channel image in [−1, 1]; background −1, ink +1.
pub type GlyphImage = ndarray::Array2<f32>;

/// One stroke of a radical, in unit-box coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Segment {
    Line {
        a: [f64; 2],
        b: [f64; 2],
    },
    /// Circular arc: center, radius, start angle and sweep in radians
    /// (counter-clockwise).
    Arc {
        center: [f64; 2],
        radius: f64,
        start: f64,
        sweep: f64,
    },
}

/// Reusable stroke component; composed into characters by a layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Radical {
    pub id: usize,
    pub segments: Vec<Segment>,
}

/// Spatial arrangement rule for composing radicals into a character.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LayoutKind {
    Single,
    LeftRight,
    TopBottom,
    Enclosure,
}

impl LayoutKind {
    pub const ALL: [LayoutKind; 4] = [
        LayoutKind::Single,
        LayoutKind::LeftRight,
        LayoutKind::TopBottom,
        LayoutKind::Enclosure,
    ];
}

/// Placement box within the unit square.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Placement {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl Placement {
    /// Map a unit-box point into this box.
    pub fn map(&self, p: [f64; 2]) -> [f64; 2] {
        [self.x + p[0] * self.w, self.y + p[1] * self.h]
    }

    fn intersection_area(&self, other: &Placement) -> f64 {
        let w = (self.x + self.w).min(other.x + other.w) - self.x.max(other.x);
        let h = (self.y + self.h).min(other.y + other.h) - self.y.max(other.y);
        if w > 0.0 && h > 0.0 {
            w * h
        } else {
            0.0
        }
    }
}

/// Compositional identity of one character category.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CharacterSpec {
    pub layout: LayoutKind,
    /// (radical id, placement box); 1–3 components, empty only for the
    /// null-glyph sentinel.
    pub components: Vec<(usize, Placement)>,
}

/// Maximum allowed pairwise placement overlap for non-enclosure layouts.
pub const MAX_PLACEMENT_OVERLAP: f64 = 0.05;

impl CharacterSpec {
    /// Sentinel whose rendering is the all-background null glyph.
    pub fn empty() -> Self {
        Self { layout: LayoutKind::Single, components: Vec::new() }
    }

    pub fn is_empty(&self) -> bool {
        self.components.is_empty()
    }

    pub fn radical_ids(&self) -> impl Iterator<Item = usize> + '_ {
        self.components.iter().map(|(r, _)| *r)
    }

    /// Structural invariants: component count, boxes inside the unit square,
    /// bounded overlap for non-enclosure layouts.
    pub fn validate(&self) -> Result<(), String> {
        if self.is_empty() {
            return Ok(());
        }
        if self.components.len() > 3 {
            return Err(format!("{} components (max 3)", self.components.len()));
        }
        for (_, p) in &self.components {
            if p.x < 0.0 || p.y < 0.0 || p.x + p.w > 1.0 + 1e-12 || p.y + p.h > 1.0 + 1e-12 {
                return Err(format!("placement {:?} outside unit square", p));
            }
            if p.w <= 0.0 || p.h <= 0.0 {
                return Err(format!("degenerate placement {:?}", p));
            }
        }
        if self.layout != LayoutKind::Enclosure {
            for i in 0..self.components.len() {
                for j in i + 1..self.components.len() {
                    let overlap =
                        self.components[i].1.intersection_area(&self.components[j].1);
                    if overlap > MAX_PLACEMENT_OVERLAP {
                        return Err(format!(
                            "components {i} and {j} overlap by {overlap:.3}"
                        ));
                    }
                }
            }
        }
        Ok(())
    }
}

/// Seen/unseen tag for the zero-shot split.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Seen,
    Unseen,
}
