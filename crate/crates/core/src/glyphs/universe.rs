//! Universe construction: procedural radicals, layout-composed categories,
//! seen/unseen splits satisfying the zero-shot coverage premise, writer
//! styles, and manifest materialization into image tensors.

use ndarray::Array4;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashSet;

use crate::error::{CoreError, CoreResult};
use crate::rng;

use super::handwriting::{render_handwritten, WriterStyle};
use super::raster::render_printed;
use super::{CharacterSpec, GlyphImage, LayoutKind, Placement, Radical, Segment, Split};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryEntry {
    pub id: usize,
    pub split: Split,
    pub spec: CharacterSpec,
}

/// Complete dataset description; serialized as the universe JSON document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub radicals: Vec<Radical>,
    pub categories: Vec<CategoryEntry>,
    pub writers: Vec<WriterStyle>,
    pub samples_per_pair: usize,
    pub image_size: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct UniverseParams {
    pub num_radicals: usize,
    pub num_categories: usize,
    pub seen_fraction: f64,
    pub num_writers: usize,
    pub samples_per_pair: usize,
    pub image_size: usize,
    pub seed: u64,
}

impl Default for UniverseParams {
    /// Desk defaults: 8 radicals, 40 categories (24 seen / 16 unseen),
    /// 8 writers, 64 samples per (category, writer), 32×32 rasters.
    fn default() -> Self {
        Self {
            num_radicals: 8,
            num_categories: 40,
            seen_fraction: 0.6,
            num_writers: 8,
            samples_per_pair: 64,
            image_size: 32,
            seed: 7,
        }
    }
}

/// Snap to a coarse grid so strokes stay crisp and radicals stay comparable.
fn snap(v: f64) -> f64 {
    (v * 10.0).round() / 10.0
}

fn random_radical(id: usize, rng: &mut rand_chacha::ChaCha8Rng) -> Radical {
    let n_segments = rng.gen_range(2..=4usize);
    let mut segments = Vec::with_capacity(n_segments);
    for _ in 0..n_segments {
        if rng.gen::<f64>() < 0.25 {
            let cx = snap(rng.gen_range(0.3..0.7));
            let cy = snap(rng.gen_range(0.3..0.7));
            let radius = snap(rng.gen_range(0.2..0.4)).max(0.1);
            let start = rng.gen_range(0..8) as f64 * std::f64::consts::FRAC_PI_4;
            let sweep = rng.gen_range(2..=6) as f64 * std::f64::consts::FRAC_PI_4;
            segments.push(Segment::Arc { center: [cx, cy], radius, start, sweep });
        } else {
            // Endpoints on the coarse grid, distinct.
            loop {
                let a = [snap(rng.gen_range(0.1..0.9)), snap(rng.gen_range(0.1..0.9))];
                let b = [snap(rng.gen_range(0.1..0.9)), snap(rng.gen_range(0.1..0.9))];
                let len2 = (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2);
                if len2 > 0.15 {
                    segments.push(Segment::Line { a, b });
                    break;
                }
            }
        }
    }
    Radical { id, segments }
}

fn layout_placements(layout: LayoutKind, arity: usize) -> Vec<Placement> {
    match (layout, arity) {
        (LayoutKind::Single, 1) => vec![Placement { x: 0.1, y: 0.1, w: 0.8, h: 0.8 }],
        (LayoutKind::LeftRight, 2) => vec![
            Placement { x: 0.05, y: 0.15, w: 0.43, h: 0.7 },
            Placement { x: 0.52, y: 0.15, w: 0.43, h: 0.7 },
        ],
        (LayoutKind::LeftRight, 3) => vec![
            Placement { x: 0.03, y: 0.2, w: 0.29, h: 0.6 },
            Placement { x: 0.355, y: 0.2, w: 0.29, h: 0.6 },
            Placement { x: 0.68, y: 0.2, w: 0.29, h: 0.6 },
        ],
        (LayoutKind::TopBottom, 2) => vec![
            Placement { x: 0.15, y: 0.05, w: 0.7, h: 0.43 },
            Placement { x: 0.15, y: 0.52, w: 0.7, h: 0.43 },
        ],
        (LayoutKind::Enclosure, 2) => vec![
            Placement { x: 0.06, y: 0.06, w: 0.88, h: 0.88 },
            Placement { x: 0.33, y: 0.33, w: 0.34, h: 0.34 },
        ],
        _ => panic!("unsupported layout arity ({layout:?}, {arity})"),
    }
}

/// All candidate specs over the radical set, in a fixed enumeration order.
fn enumerate_specs(num_radicals: usize) -> Vec<CharacterSpec> {
    let mut specs = Vec::new();
    let make = |layout: LayoutKind, rads: &[usize]| CharacterSpec {
        layout,
        components: rads
            .iter()
            .copied()
            .zip(layout_placements(layout, rads.len()))
            .collect(),
    };
    for r in 0..num_radicals {
        specs.push(make(LayoutKind::Single, &[r]));
    }
    for a in 0..num_radicals {
        for b in 0..num_radicals {
            specs.push(make(LayoutKind::LeftRight, &[a, b]));
            specs.push(make(LayoutKind::TopBottom, &[a, b]));
            if a != b {
                specs.push(make(LayoutKind::Enclosure, &[a, b]));
            }
        }
    }
    // A slice of 3-component columns widens the combinatorial pool.
    for a in 0..num_radicals {
        for b in 0..num_radicals.min(a + 3) {
            if a != b {
                specs.push(make(LayoutKind::LeftRight, &[a, b, a]));
            }
        }
    }
    specs
}

fn coverage_violations(categories: &[CategoryEntry]) -> usize {
    let mut seen_radicals = HashSet::new();
    let mut seen_layouts = HashSet::new();
    for c in categories.iter().filter(|c| c.split == Split::Seen) {
        seen_layouts.insert(c.spec.layout);
        seen_radicals.extend(c.spec.radical_ids());
    }
    categories
        .iter()
        .filter(|c| c.split == Split::Unseen)
        .map(|c| {
            let mut v = usize::from(!seen_layouts.contains(&c.spec.layout));
            v += c
                .spec
                .radical_ids()
                .filter(|r| !seen_radicals.contains(r))
                .count();
            v
        })
        .sum()
}

/// Build a deterministic universe: distinct specs, a seen/unseen split whose
/// unseen categories are fully covered (every radical and layout they use
/// appears in some seen category), and writer styles.
pub fn build_universe(params: &UniverseParams) -> CoreResult<DatasetManifest> {
    if params.num_radicals < 2 {
        return Err(CoreError::InfeasibleUniverse(
            "need at least 2 radicals".into(),
        ));
    }
    if !(0.0..=1.0).contains(&params.seen_fraction) {
        return Err(CoreError::InvalidRange(format!(
            "seen_fraction {} outside [0, 1]",
            params.seen_fraction
        )));
    }
    let mut r = rng::stream(params.seed, "universe", &[]);

    // Radicals, resampled on (unlikely) duplicates.
    let mut radicals: Vec<Radical> = Vec::new();
    for id in 0..params.num_radicals {
        loop {
            let cand = random_radical(id, &mut r);
            if !radicals.iter().any(|x| x.segments == cand.segments) {
                radicals.push(cand);
                break;
            }
        }
    }

    let mut pool = enumerate_specs(params.num_radicals);
    if pool.len() < params.num_categories {
        return Err(CoreError::InfeasibleUniverse(format!(
            "{} candidate specs for {} categories",
            pool.len(),
            params.num_categories
        )));
    }
    pool.shuffle(&mut r);
    pool.truncate(params.num_categories);
    for spec in &pool {
        spec.validate().map_err(CoreError::InfeasibleUniverse)?;
    }

    let n = params.num_categories;
    let k = (params.seen_fraction * n as f64).round() as usize;
    let mut categories: Vec<CategoryEntry> = pool
        .into_iter()
        .enumerate()
        .map(|(id, spec)| CategoryEntry {
            id,
            split: if id < k { Split::Seen } else { Split::Unseen },
            spec,
        })
        .collect();

    // Deterministic repair: swap seen/unseen pairs while the swap strictly
    // reduces the number of uncovered unseen ingredients.
    let mut budget = 10 * n + 10;
    while coverage_violations(&categories) > 0 {
        if budget == 0 || k == 0 {
            return Err(CoreError::InfeasibleUniverse(
                "could not satisfy the unseen-coverage premise".into(),
            ));
        }
        budget -= 1;
        let before = coverage_violations(&categories);
        let mut improved = false;
        'outer: for u in 0..n {
            if categories[u].split != Split::Unseen {
                continue;
            }
            for s in 0..n {
                if categories[s].split != Split::Seen {
                    continue;
                }
                categories[u].split = Split::Seen;
                categories[s].split = Split::Unseen;
                if coverage_violations(&categories) < before {
                    improved = true;
                    break 'outer;
                }
                categories[u].split = Split::Unseen;
                categories[s].split = Split::Seen;
            }
        }
        if !improved {
            return Err(CoreError::InfeasibleUniverse(
                "no seen/unseen swap improves coverage".into(),
            ));
        }
    }

    // Writer styles spread across the safe parameter ranges.
    let writers: Vec<WriterStyle> = (0..params.num_writers)
        .map(|id| {
            let mut wr = rng::stream(params.seed, "writer-style", &[id as u64]);
            WriterStyle {
                id,
                slant: wr.gen_range(-0.28..0.28),
                thickness_scale: wr.gen_range(0.7..1.6),
                jitter_px: wr.gen_range(0.4..1.2),
                component_shift: wr.gen_range(0.01..0.05),
                curvature: wr.gen_range(0.03..0.13),
                seed: rng::mix(params.seed, "writer-habits", &[id as u64]),
            }
        })
        .collect();
    for w in &writers {
        w.validate()?;
    }

    Ok(DatasetManifest {
        radicals,
        categories,
        writers,
        samples_per_pair: params.samples_per_pair,
        image_size: params.image_size,
        seed: params.seed,
    })
}

impl DatasetManifest {
    pub fn seen_categories(&self) -> Vec<usize> {
        self.categories
            .iter()
            .filter(|c| c.split == Split::Seen)
            .map(|c| c.id)
            .collect()
    }

    pub fn unseen_categories(&self) -> Vec<usize> {
        self.categories
            .iter()
            .filter(|c| c.split == Split::Unseen)
            .map(|c| c.id)
            .collect()
    }

    pub fn category(&self, id: usize) -> CoreResult<&CategoryEntry> {
        self.categories
            .get(id)
            .filter(|c| c.id == id)
            .ok_or_else(|| CoreError::InvalidConfig(format!("unknown category {id}")))
    }

    /// The sample RNG stream for (category, writer, sample); materialization
    /// may run in any order without changing output.
    pub fn sample_stream(&self, category: usize, writer: usize, sample: usize) -> rand_chacha::ChaCha8Rng {
        rng::stream(
            self.seed,
            "sample",
            &[category as u64, writer as u64, sample as u64],
        )
    }
}

/// Printed condition glyph for a category.
pub fn printed_glyph_for(manifest: &DatasetManifest, category: usize) -> CoreResult<GlyphImage> {
    let entry = manifest.category(category)?;
    Ok(render_printed(&entry.spec, &manifest.radicals, manifest.image_size))
}

/// A fully materialized labeled image set.
pub struct RenderedDataset {
    /// (N, 1, S, S) handwritten images in [−1, 1].
    pub images: Array4<f32>,
    pub categories: Vec<usize>,
    pub writers: Vec<usize>,
    pub samples: Vec<usize>,
}

/// Render every (category, writer, sample) triple of the manifest.
pub fn render_manifest(manifest: &DatasetManifest) -> CoreResult<RenderedDataset> {
    let size = manifest.image_size;
    let total = manifest.categories.len() * manifest.writers.len() * manifest.samples_per_pair;
    let mut images = Array4::<f32>::zeros((total, 1, size, size));
    let mut categories = Vec::with_capacity(total);
    let mut writers = Vec::with_capacity(total);
    let mut samples = Vec::with_capacity(total);
    let mut row = 0usize;
    for cat in &manifest.categories {
        for writer in &manifest.writers {
            for s in 0..manifest.samples_per_pair {
                let mut rng = manifest.sample_stream(cat.id, writer.id, s);
                let img =
                    render_handwritten(&cat.spec, &manifest.radicals, writer, size, &mut rng)?;
                images
                    .slice_mut(ndarray::s![row, 0, .., ..])
                    .assign(&img);
                categories.push(cat.id);
                writers.push(writer.id);
                samples.push(s);
                row += 1;
            }
        }
    }
    Ok(RenderedDataset { images, categories, writers, samples })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn universe_is_deterministic() {
        let p = UniverseParams { samples_per_pair: 2, ..Default::default() };
        let a = build_universe(&p).unwrap();
        let b = build_universe(&p).unwrap();
        assert_eq!(a, b);
        assert_eq!(
            serde_json::to_string(&a).unwrap(),
            serde_json::to_string(&b).unwrap()
        );
    }

    #[test]
    fn desk_default_split_counts() {
        let m = build_universe(&UniverseParams { samples_per_pair: 1, ..Default::default() })
            .unwrap();
        assert_eq!(m.categories.len(), 40);
        assert_eq!(m.seen_categories().len(), 24);
        assert_eq!(m.unseen_categories().len(), 16);
        assert_eq!(m.writers.len(), 8);
    }

    #[test]
    fn coverage_premise_brute_force() {
        // Exhaustive scan over several seeds: every unseen category's radicals
        // and layout each appear in at least one seen category.
        for seed in [1u64, 7, 42, 1234] {
            let m = build_universe(&UniverseParams {
                samples_per_pair: 1,
                seed,
                ..Default::default()
            })
            .unwrap();
            let seen: Vec<_> = m
                .categories
                .iter()
                .filter(|c| c.split == Split::Seen)
                .collect();
            for u in m.categories.iter().filter(|c| c.split == Split::Unseen) {
                assert!(
                    seen.iter().any(|s| s.spec.layout == u.spec.layout),
                    "seed {seed}: layout {:?} uncovered",
                    u.spec.layout
                );
                for rid in u.spec.radical_ids() {
                    assert!(
                        seen.iter().any(|s| s.spec.radical_ids().any(|r| r == rid)),
                        "seed {seed}: radical {rid} uncovered"
                    );
                }
            }
        }
    }

    #[test]
    fn full_seen_fraction_gives_empty_unseen() {
        let m = build_universe(&UniverseParams {
            seen_fraction: 1.0,
            samples_per_pair: 1,
            ..Default::default()
        })
        .unwrap();
        assert!(m.unseen_categories().is_empty());
    }

    #[test]
    fn infeasible_universe_is_rejected() {
        let err = build_universe(&UniverseParams {
            num_radicals: 2,
            num_categories: 500,
            samples_per_pair: 1,
            ..Default::default()
        });
        assert!(matches!(err, Err(CoreError::InfeasibleUniverse(_))));
    }

    #[test]
    fn specs_are_distinct() {
        let m = build_universe(&UniverseParams { samples_per_pair: 1, ..Default::default() })
            .unwrap();
        for i in 0..m.categories.len() {
            for j in i + 1..m.categories.len() {
                assert_ne!(m.categories[i].spec, m.categories[j].spec);
            }
        }
    }

    #[test]
    fn rendered_dataset_is_normalized_and_sized() {
        let m = build_universe(&UniverseParams {
            num_radicals: 3,
            num_categories: 6,
            num_writers: 2,
            samples_per_pair: 3,
            ..Default::default()
        })
        .unwrap();
        let d = render_manifest(&m).unwrap();
        assert_eq!(d.images.dim(), (36, 1, 32, 32));
        assert!(d.images.iter().all(|&v| (-1.0..=1.0).contains(&v)));
        // Background-dominated but with ink present.
        assert!(d.images.iter().any(|&v| v > 0.5));
    }
}
