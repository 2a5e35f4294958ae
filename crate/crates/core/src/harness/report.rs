//! Visual reports: tile sampled frames into one PNG contact sheet.

use crate::dataset::image_to_png_bytes;
use ageview_autograd::Scalar;
use ndarray::{ArrayD, IxDyn};
use std::path::Path;

/// Tile `[3, h, w]` images row-major into a `[3, rows·h, cols·w]` sheet.
/// Missing cells in the last row stay at -1 (black).
pub fn image_grid<S: Scalar>(images: &[ArrayD<S>], cols: usize) -> ArrayD<S> {
    assert!(!images.is_empty() && cols >= 1);
    let sh = images[0].shape().to_vec();
    assert_eq!(sh.len(), 3, "expected [3, h, w] tiles");
    let (h, w) = (sh[1], sh[2]);
    for im in images {
        assert_eq!(im.shape(), &sh[..], "all tiles must share one shape");
    }
    let rows = images.len().div_ceil(cols);
    let mut grid =
        ArrayD::<S>::from_elem(IxDyn(&[sh[0], rows * h, cols * w]), S::from_f64(-1.0));
    for (i, im) in images.iter().enumerate() {
        let (r, c) = (i / cols, i % cols);
        for ch in 0..sh[0] {
            for y in 0..h {
                for x in 0..w {
                    grid[[ch, r * h + y, c * w + x]] = im[[ch, y, x]];
                }
            }
        }
    }
    grid
}

pub fn save_image_png<S: Scalar>(path: &Path, image: &ArrayD<S>) -> std::io::Result<()> {
    std::fs::write(path, image_to_png_bytes(image))
}

pub fn save_grid_png<S: Scalar>(
    path: &Path,
    images: &[ArrayD<S>],
    cols: usize,
) -> std::io::Result<()> {
    save_image_png(path, &image_grid(images, cols))
}
