//! Block geometry and the flattening order shared by the cipher and the ViT
//! engine. The block-wise cipher only cancels against the encrypted patch
//! embedding if both flatten a `p × p × c` block identically, so both go
//! through [`patch_matrix`].

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::tensorio::{ImageTensor, RangeTag};

/// How a `p × p × c` block is laid out as a length-`p²c` vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FlattenOrder {
    /// `(row, col, ch) → row·p·c + col·c + ch`.
    ChannelLastRaster,
}

pub const FLATTEN_ORDER: FlattenOrder = FlattenOrder::ChannelLastRaster;

#[inline]
pub fn flat_index(row: usize, col: usize, ch: usize, p: usize, c: usize) -> usize {
    match FLATTEN_ORDER {
        FlattenOrder::ChannelLastRaster => (row * p + col) * c + ch,
    }
}

/// Blocks per row and per column for an `h × w` image, or an error if `p`
/// does not divide both. No padding is ever applied.
pub fn block_grid(height: usize, width: usize, p: usize) -> Result<(usize, usize)> {
    if p == 0 {
        return Err(Error::param("block size must be at least 1"));
    }
    if !height.is_multiple_of(p) || !width.is_multiple_of(p) {
        return Err(Error::dim(format!(
            "{height}x{width} image is not divisible into {p}x{p} blocks"
        )));
    }
    Ok((height / p, width / p))
}

/// `N = hw / p²`.
pub fn num_blocks(height: usize, width: usize, p: usize) -> Result<usize> {
    let (r, c) = block_grid(height, width, p)?;
    Ok(r * c)
}

/// The `N × L` matrix whose row `i` is block `i` (raster order) flattened.
pub fn patch_matrix(img: &ImageTensor, p: usize) -> Result<Array2<f64>> {
    let (grid_rows, grid_cols) = block_grid(img.height(), img.width(), p)?;
    let c = img.channels();
    let l = p * p * c;
    let mut out = Array2::zeros((grid_rows * grid_cols, l));
    for (b, mut dst) in out.rows_mut().into_iter().enumerate() {
        let (top, left) = ((b / grid_cols) * p, (b % grid_cols) * p);
        for r in 0..p {
            for col in 0..p {
                for ch in 0..c {
                    dst[flat_index(r, col, ch, p, c)] = img.get(top + r, left + col, ch);
                }
            }
        }
    }
    Ok(out)
}

/// Inverse of [`patch_matrix`].
pub fn image_from_patches(
    patches: &Array2<f64>,
    height: usize,
    width: usize,
    channels: usize,
    p: usize,
    range: RangeTag,
) -> Result<ImageTensor> {
    let (grid_rows, grid_cols) = block_grid(height, width, p)?;
    let l = p * p * channels;
    if patches.dim() != (grid_rows * grid_cols, l) {
        return Err(Error::dim(format!(
            "patch matrix is {:?}, expected {}x{l}",
            patches.dim(),
            grid_rows * grid_cols
        )));
    }
    let mut data = vec![0.0; height * width * channels];
    for (b, src) in patches.rows().into_iter().enumerate() {
        let (top, left) = ((b / grid_cols) * p, (b % grid_cols) * p);
        for r in 0..p {
            for col in 0..p {
                for ch in 0..channels {
                    data[((top + r) * width + left + col) * channels + ch] =
                        src[flat_index(r, col, ch, p, channels)];
                }
            }
        }
    }
    ImageTensor::new(height, width, channels, data, range)
}
