//! PNG grid assembly: rows are categories, columns are samples or
//! interpolation factors, mirroring the figure layout used throughout.

use image::GrayImage;
use ndarray::Array2;
use std::path::Path;

use crate::CliError;

fn to_byte(v: f32) -> u8 {
    ((v + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8
}

/// Assemble cells[row][col] (all S×S, values in [−1, 1]) into one image.
pub fn assemble_grid(cells: &[Vec<Array2<f32>>]) -> GrayImage {
    let rows = cells.len();
    let cols = cells.first().map_or(0, |r| r.len());
    if rows == 0 || cols == 0 {
        return GrayImage::new(0, 0);
    }
    let size = cells[0][0].dim().0;
    let mut out = GrayImage::new((cols * size) as u32, (rows * size) as u32);
    for (r, row) in cells.iter().enumerate() {
        assert_eq!(row.len(), cols, "ragged grid");
        for (c, cell) in row.iter().enumerate() {
            assert_eq!(cell.dim(), (size, size), "inconsistent cell size");
            for y in 0..size {
                for x in 0..size {
                    out.put_pixel(
                        (c * size + x) as u32,
                        (r * size + y) as u32,
                        image::Luma([to_byte(cell[[y, x]])]),
                    );
                }
            }
        }
    }
    out
}

pub fn save_grid(cells: &[Vec<Array2<f32>>], path: &Path) -> Result<(), CliError> {
    assemble_grid(cells)
        .save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| CliError::Runtime(format!("write {}: {e}", path.display())))
}

/// Extract cell (row, col) from a grid image written by [`save_grid`].
pub fn grid_cell(grid: &GrayImage, row: usize, col: usize, size: usize) -> Array2<f32> {
    let mut out = Array2::<f32>::zeros((size, size));
    for y in 0..size {
        for x in 0..size {
            let p = grid.get_pixel((col * size + x) as u32, (row * size + y) as u32)[0];
            out[[y, x]] = f32::from(p) / 127.5 - 1.0;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_roundtrip_preserves_cells() {
        let a = Array2::from_shape_fn((4, 4), |(y, x)| ((y * 4 + x) as f32) / 8.0 - 1.0);
        let b = a.mapv(|v| -v);
        let grid = assemble_grid(&[vec![a.clone(), b.clone()], vec![b.clone(), a.clone()]]);
        assert_eq!(grid.dimensions(), (8, 8));
        let cell_a = grid_cell(&grid, 0, 0, 4);
        let cell_b = grid_cell(&grid, 1, 0, 4);
        // Quantization maps through the same byte levels both ways.
        for (x, y) in a.iter().zip(cell_a.iter()) {
            assert!((x - y).abs() < 1.0 / 127.5);
        }
        for (x, y) in b.iter().zip(cell_b.iter()) {
            assert!((x - y).abs() < 1.0 / 127.5);
        }
    }
}
