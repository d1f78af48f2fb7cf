use ndarray::{Array2, ArrayView1, ArrayViewMut1};

use super::rng::SplitMix64;
use crate::error::{Error, Result};

/// Residual norm below which the source matrix is treated as singular.
pub const SINGULAR_RESIDUAL: f64 = 1e-8;

/// Regeneration budget before giving up on a singular source matrix.
pub const MAX_ATTEMPTS: usize = 16;

/// Random `l × l` orthogonal matrix for `seed`.
///
/// Fills a matrix with standard normals, then orthonormalizes its rows with
/// modified Gram–Schmidt. A row whose residual after projection falls under
/// [`SINGULAR_RESIDUAL`] means the source was singular; the matrix is then
/// redrawn from the continuing stream.
pub fn gram_schmidt_orthogonal(seed: u64, l: usize) -> Result<Array2<f64>> {
    orthogonal_from_stream(&mut SplitMix64::new(seed), l)
}

pub fn orthogonal_from_stream(rng: &mut SplitMix64, l: usize) -> Result<Array2<f64>> {
    if l == 0 {
        return Err(Error::param("orthogonal matrix size must be at least 1"));
    }
    for _ in 0..MAX_ATTEMPTS {
        let source = Array2::from_shape_simple_fn((l, l), || rng.next_normal());
        if let Some(q) = orthonormalize_rows(source) {
            return Ok(q);
        }
    }
    Err(Error::Verification(format!(
        "random {l}x{l} matrix was singular {MAX_ATTEMPTS} times in a row"
    )))
}

/// Row-wise modified Gram–Schmidt. Returns `None` if any residual is below
/// [`SINGULAR_RESIDUAL`].
///
/// Each row is projected twice against the rows before it; the second sweep
/// removes the rounding error left by the first so that orthogonality holds
/// to near machine precision even for large `l`.
pub fn orthonormalize_rows(mut m: Array2<f64>) -> Option<Array2<f64>> {
    let rows = m.nrows();
    for i in 0..rows {
        let (done, mut rest) = m.view_mut().split_at(ndarray::Axis(0), i);
        let mut row = rest.row_mut(0);
        for sweep in 0..2 {
            for j in 0..i {
                subtract_projection(&mut row, done.row(j));
            }
            if sweep == 0 && norm(row.view()) < SINGULAR_RESIDUAL {
                return None;
            }
        }
        let n = norm(row.view());
        if n < SINGULAR_RESIDUAL {
            return None;
        }
        row.mapv_inplace(|v| v / n);
    }
    Some(m)
}

fn subtract_projection(v: &mut ArrayViewMut1<f64>, q: ArrayView1<f64>) {
    let coeff = v.dot(&q);
    v.scaled_add(-coeff, &q);
}

fn norm(v: ArrayView1<f64>) -> f64 {
    v.dot(&v).sqrt()
}

/// `max |M Mᵀ - I|`.
pub fn orthogonality_error(m: &Array2<f64>) -> f64 {
    let prod = m.dot(&m.t());
    prod.indexed_iter()
        .map(|((i, j), &v)| (v - if i == j { 1.0 } else { 0.0 }).abs())
        .fold(0.0, f64::max)
}
