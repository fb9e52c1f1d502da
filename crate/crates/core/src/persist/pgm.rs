use std::path::Path;

use crate::error::{Error, Result};

/// Binary `P5` encoding of one grayscale image with values in `[0, 1]`.
pub fn encode_pgm(width: usize, height: usize, values: &[f64]) -> Result<Vec<u8>> {
    if values.len() != width * height {
        return Err(Error::dim("pgm image", &[height, width], &[values.len()]));
    }
    let mut out = format!("P5 {width} {height} 255\n").into_bytes();
    out.extend(values.iter().map(|&p| (255.0 * p.clamp(0.0, 1.0)).round() as u8));
    Ok(out)
}

/// Tiles equally sized images into `rows x cols` with one-pixel white
/// separators; returns `(width, height, values)`.
pub fn mosaic(
    images: &[Vec<f64>],
    width: usize,
    height: usize,
    rows: usize,
    cols: usize,
) -> Result<(usize, usize, Vec<f64>)> {
    if images.len() > rows * cols || images.is_empty() {
        return Err(Error::usage(format!(
            "{} images do not fit a {rows}x{cols} grid",
            images.len()
        )));
    }
    if let Some(bad) = images.iter().find(|im| im.len() != width * height) {
        return Err(Error::dim("mosaic tile", &[height, width], &[bad.len()]));
    }
    let w = cols * width + cols - 1;
    let h = rows * height + rows - 1;
    let mut out = vec![1.0; w * h];
    for (i, im) in images.iter().enumerate() {
        let (r0, c0) = ((i / cols) * (height + 1), (i % cols) * (width + 1));
        for r in 0..height {
            out[(r0 + r) * w + c0..(r0 + r) * w + c0 + width].copy_from_slice(&im[r * width..(r + 1) * width]);
        }
    }
    Ok((w, h, out))
}

/// Writes `images` as a PGM mosaic of `rows x cols` tiles.
pub fn write_pgm(path: &Path, images: &[Vec<f64>], side: (usize, usize), grid: (usize, usize)) -> Result<()> {
    let (w, h, values) = mosaic(images, side.0, side.1, grid.0, grid.1)?;
    std::fs::write(path, encode_pgm(w, h, &values)?)?;
    Ok(())
}
