//! Dataset export and external-corpus ingestion.
//!
//! Exported layout:
//!
//! ```text
//! <dir>/universe.json     manifest (radicals, specs, splits, writers, seed)
//! <dir>/glyphs/cNNN.png   printed condition glyph per category
//! <dir>/images/*.png      handwritten samples, 8-bit grayscale
//! <dir>/manifest.tsv      one record per line: path<TAB>category<TAB>writer
//! ```
//!
//! Rendered tensors quantize to 8-bit levels, so export → reload reproduces
//! them bit-exactly. `load_external_corpus` accepts the same manifest format
//! for real image corpora; labels are interned to dense indices in first-use
//! order.

use image::GrayImage;
use ndarray::{Array2, Array4};
use std::collections::HashMap;
use std::path::Path;

use crate::error::{CoreError, CoreResult};

use super::raster::{to_byte, to_unit_range};
use super::universe::{printed_glyph_for, DatasetManifest, RenderedDataset};
use super::GlyphImage;

fn image_to_gray(img: &Array2<f32>) -> GrayImage {
    let (h, w) = img.dim();
    let mut out = GrayImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            out.put_pixel(x as u32, y as u32, image::Luma([to_byte(img[[y, x]])]));
        }
    }
    out
}

fn save_png(img: &GrayImage, path: &Path) -> CoreResult<()> {
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| CoreError::ImageCodec {
            path: path.display().to_string(),
            detail: e.to_string(),
        })
}

/// Export a rendered dataset: PNGs, the TSV manifest, and the universe file.
pub fn export_dataset(
    dir: &Path,
    manifest: &DatasetManifest,
    rendered: &RenderedDataset,
) -> CoreResult<()> {
    let io = |p: &Path, e: std::io::Error| CoreError::io(p.display().to_string(), e);
    std::fs::create_dir_all(dir.join("images")).map_err(|e| io(dir, e))?;
    std::fs::create_dir_all(dir.join("glyphs")).map_err(|e| io(dir, e))?;

    let universe_path = dir.join("universe.json");
    let json = serde_json::to_string_pretty(manifest)
        .map_err(|e| CoreError::InvalidConfig(format!("universe serialization: {e}")))?;
    std::fs::write(&universe_path, json).map_err(|e| io(&universe_path, e))?;

    for cat in &manifest.categories {
        let glyph = printed_glyph_for(manifest, cat.id)?;
        save_png(
            &image_to_gray(&glyph),
            &dir.join(format!("glyphs/c{:04}.png", cat.id)),
        )?;
    }

    let mut lines = String::new();
    let n = rendered.images.dim().0;
    for row in 0..n {
        let (cat, writer, sample) = (
            rendered.categories[row],
            rendered.writers[row],
            rendered.samples[row],
        );
        let rel = format!("images/c{cat:04}_w{writer:03}_s{sample:04}.png");
        let img = rendered.images.slice(ndarray::s![row, 0, .., ..]).to_owned();
        save_png(&image_to_gray(&img), &dir.join(&rel))?;
        lines.push_str(&format!("{rel}\t{cat}\t{writer}\n"));
    }
    let manifest_path = dir.join("manifest.tsv");
    std::fs::write(&manifest_path, lines).map_err(|e| io(&manifest_path, e))?;
    Ok(())
}

/// An ingested image corpus with labels interned to dense indices.
#[derive(Debug)]
pub struct LoadedCorpus {
    /// (N, 1, S, S) in [−1, 1].
    pub images: Array4<f32>,
    pub categories: Vec<usize>,
    pub writers: Vec<usize>,
    /// Original label strings in index order.
    pub category_labels: Vec<String>,
    pub writer_labels: Vec<String>,
}

/// Load a corpus described by a TSV manifest of (relative path, category
/// label, writer label) records. Images are decoded, converted to a single
/// channel, resized to `target_size` when needed, and mapped to [−1, 1].
pub fn load_external_corpus(
    root: &Path,
    manifest_file: &Path,
    target_size: usize,
) -> CoreResult<LoadedCorpus> {
    let text = std::fs::read_to_string(manifest_file)
        .map_err(|e| CoreError::io(manifest_file.display().to_string(), e))?;

    struct Record {
        line: usize,
        rel: String,
        cat: String,
        writer: String,
    }
    let mut records = Vec::new();
    let mut seen_paths: HashMap<String, usize> = HashMap::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = raw.split('\t').collect();
        if fields.len() != 3 {
            return Err(CoreError::MalformedRecord {
                line,
                detail: format!("expected 3 tab-separated fields, got {}", fields.len()),
            });
        }
        let rel = fields[0].to_string();
        if let Some(prev) = seen_paths.insert(rel.clone(), line) {
            let _ = prev;
            return Err(CoreError::DuplicatePath { line, path: rel });
        }
        records.push(Record {
            line,
            rel,
            cat: fields[1].to_string(),
            writer: fields[2].to_string(),
        });
    }

    let mut cat_index: HashMap<String, usize> = HashMap::new();
    let mut writer_index: HashMap<String, usize> = HashMap::new();
    let mut category_labels = Vec::new();
    let mut writer_labels = Vec::new();
    let mut images = Array4::<f32>::zeros((records.len(), 1, target_size, target_size));
    let mut categories = Vec::with_capacity(records.len());
    let mut writers = Vec::with_capacity(records.len());

    for (row, rec) in records.iter().enumerate() {
        let path = root.join(&rec.rel);
        if !path.is_file() {
            return Err(CoreError::MissingFile {
                line: rec.line,
                path: rec.rel.clone(),
            });
        }
        let img = image::open(&path).map_err(|e| CoreError::UndecodableImage {
            line: rec.line,
            path: rec.rel.clone(),
            detail: e.to_string(),
        })?;
        let mut gray = img.to_luma8();
        if gray.width() as usize != target_size || gray.height() as usize != target_size {
            gray = image::imageops::resize(
                &gray,
                target_size as u32,
                target_size as u32,
                image::imageops::FilterType::Triangle,
            );
        }
        for y in 0..target_size {
            for x in 0..target_size {
                images[[row, 0, y, x]] = to_unit_range(gray.get_pixel(x as u32, y as u32)[0]);
            }
        }
        let cat = *cat_index.entry(rec.cat.clone()).or_insert_with(|| {
            category_labels.push(rec.cat.clone());
            category_labels.len() - 1
        });
        let writer = *writer_index.entry(rec.writer.clone()).or_insert_with(|| {
            writer_labels.push(rec.writer.clone());
            writer_labels.len() - 1
        });
        categories.push(cat);
        writers.push(writer);
    }

    Ok(LoadedCorpus {
        images,
        categories,
        writers,
        category_labels,
        writer_labels,
    })
}

/// Write a single image in [−1, 1] as an 8-bit grayscale PNG.
pub fn export_png(path: &Path, img: &GlyphImage) -> CoreResult<()> {
    save_png(&image_to_gray(img), path)
}
