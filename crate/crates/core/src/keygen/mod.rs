//! Secret key material: the within-block mixing matrix `E_a` and the block
//! permutation `lt` (from which `E_b` is built), both derived from one seed.

mod orthogonal;
mod permutation;
mod rng;

use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

pub use orthogonal::{
    gram_schmidt_orthogonal, orthogonal_from_stream, orthogonality_error, orthonormalize_rows,
    MAX_ATTEMPTS, SINGULAR_RESIDUAL,
};
pub use permutation::{
    build_eb, make_permutation, shuffle_from_stream, Permutation, PermutationMatrix,
};
pub use rng::{derive_rng_stream, SplitMix64};

use crate::error::{Error, Result};
use crate::tensorio::write_atomic;

/// XOR'd into the key seed to get the `E_a` stream.
pub const EA_STREAM_XOR: u64 = 0x9E37_79B9_7F4A_7C15;
/// XOR'd into the key seed to get the `lt` stream.
pub const LT_STREAM_XOR: u64 = 0xC2B2_AE3D_27D4_EB4F;

pub const MANIFEST_VERSION: u32 = 1;

/// Tolerance for `E_a · E_aᵀ = I` on keys built here.
pub const ORTHOGONALITY_TOL: f64 = 1e-10;
/// Looser check applied by [`invert_ea`], which also accepts keys that came
/// from elsewhere.
pub const INVERSE_CHECK_TOL: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MatrixMode {
    /// Dense random orthogonal `E_a` from Gram–Schmidt.
    Orthogonal,
    /// `E_a` is a random pixel permutation matrix.
    Permutation,
}

impl std::str::FromStr for MatrixMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "orthogonal" => Ok(MatrixMode::Orthogonal),
            "permutation" => Ok(MatrixMode::Permutation),
            other => Err(Error::param(format!("unknown matrix mode {other:?}"))),
        }
    }
}

/// Block size and image geometry a key is bound to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct KeyGeometry {
    pub block_size: usize,
    pub channels: usize,
    pub num_blocks: usize,
}

impl KeyGeometry {
    pub fn new(block_size: usize, channels: usize, num_blocks: usize) -> Result<Self> {
        if block_size == 0 || channels == 0 || num_blocks == 0 {
            return Err(Error::param(format!(
                "key geometry needs p, c, N >= 1 (got p={block_size}, c={channels}, N={num_blocks})"
            )));
        }
        Ok(KeyGeometry {
            block_size,
            channels,
            num_blocks,
        })
    }

    /// Flattened block length `p² c`.
    pub fn block_len(&self) -> usize {
        self.block_size * self.block_size * self.channels
    }
}

/// An immutable secret key.
#[derive(Debug, Clone, PartialEq)]
pub struct KeyMaterial {
    seed: Option<u64>,
    geometry: KeyGeometry,
    mode: MatrixMode,
    ea: Array2<f64>,
    ea_inv: Array2<f64>,
    lt: Permutation,
}

impl KeyMaterial {
    /// Builds a key from explicit parts after checking every invariant.
    /// Keys built this way have no seed and cannot be written as a manifest.
    pub fn from_parts(
        geometry: KeyGeometry,
        mode: MatrixMode,
        ea: Array2<f64>,
        lt: Permutation,
    ) -> Result<Self> {
        Self::assemble(None, geometry, mode, ea, lt)
    }

    /// `E_a = I` and identity `lt`: encryption becomes the identity map.
    pub fn null(geometry: KeyGeometry) -> Self {
        let l = geometry.block_len();
        Self::assemble(
            None,
            geometry,
            MatrixMode::Permutation,
            Array2::eye(l),
            Permutation::identity(geometry.num_blocks),
        )
        .expect("identity key is valid")
    }

    fn assemble(
        seed: Option<u64>,
        geometry: KeyGeometry,
        mode: MatrixMode,
        ea: Array2<f64>,
        lt: Permutation,
    ) -> Result<Self> {
        let l = geometry.block_len();
        if ea.dim() != (l, l) {
            return Err(Error::dim(format!(
                "E_a is {:?}, expected {l}x{l}",
                ea.dim()
            )));
        }
        if lt.len() != geometry.num_blocks {
            return Err(Error::dim(format!(
                "lt has {} entries, expected N = {}",
                lt.len(),
                geometry.num_blocks
            )));
        }
        match mode {
            MatrixMode::Orthogonal => {
                let err = orthogonality_error(&ea);
                if err.is_nan() || err >= ORTHOGONALITY_TOL {
                    return Err(Error::Verification(format!(
                        "E_a is not orthogonal (max |E_a E_aᵀ - I| = {err:e})"
                    )));
                }
            }
            MatrixMode::Permutation => {
                if !is_permutation_matrix(&ea) {
                    return Err(Error::Verification(
                        "E_a is not a permutation matrix".into(),
                    ));
                }
            }
        }
        let ea_inv = ea.t().to_owned();
        Ok(KeyMaterial {
            seed,
            geometry,
            mode,
            ea,
            ea_inv,
            lt,
        })
    }

    pub fn seed(&self) -> Option<u64> {
        self.seed
    }

    pub fn geometry(&self) -> KeyGeometry {
        self.geometry
    }

    pub fn block_size(&self) -> usize {
        self.geometry.block_size
    }

    pub fn channels(&self) -> usize {
        self.geometry.channels
    }

    pub fn num_blocks(&self) -> usize {
        self.geometry.num_blocks
    }

    /// `L = p² c`.
    pub fn block_len(&self) -> usize {
        self.geometry.block_len()
    }

    pub fn mode(&self) -> MatrixMode {
        self.mode
    }

    pub fn ea(&self) -> &Array2<f64> {
        &self.ea
    }

    /// `E_a⁻¹`, checked at construction.
    pub fn ea_inverse(&self) -> &Array2<f64> {
        &self.ea_inv
    }

    pub fn lt(&self) -> &Permutation {
        &self.lt
    }

    pub fn eb(&self) -> PermutationMatrix {
        build_eb(&self.lt)
    }

    pub fn manifest(&self) -> Option<KeyManifest> {
        self.seed.map(|seed| KeyManifest {
            version: MANIFEST_VERSION,
            seed,
            p: self.geometry.block_size as u32,
            c: self.geometry.channels as u32,
            n: self.geometry.num_blocks as u32,
            matrix_mode: self.mode,
        })
    }
}

fn is_permutation_matrix(m: &Array2<f64>) -> bool {
    let n = m.nrows();
    if m.ncols() != n {
        return false;
    }
    if m.iter().any(|&v| v != 0.0 && v != 1.0) {
        return false;
    }
    let rows_ok = m.rows().into_iter().all(|r| r.sum() == 1.0);
    let cols_ok = m.columns().into_iter().all(|c| c.sum() == 1.0);
    rows_ok && cols_ok
}

/// Derives a complete key from `seed`. `E_a` and `lt` use independent
/// streams seeded with `seed ^ EA_STREAM_XOR` and `seed ^ LT_STREAM_XOR`.
pub fn generate_key(seed: u64, geometry: KeyGeometry, mode: MatrixMode) -> Result<KeyMaterial> {
    let l = geometry.block_len();
    let mut ea_rng = SplitMix64::new(seed ^ EA_STREAM_XOR);
    let ea = match mode {
        MatrixMode::Orthogonal => orthogonal_from_stream(&mut ea_rng, l)?,
        MatrixMode::Permutation => shuffle_from_stream(&mut ea_rng, l).to_matrix(),
    };
    let lt = make_permutation(seed ^ LT_STREAM_XOR, geometry.num_blocks)?;
    KeyMaterial::assemble(Some(seed), geometry, mode, ea, lt)
}

/// Recomputes `E_a⁻¹ = E_aᵀ`, refusing keys whose `E_a` is not orthogonal.
pub fn invert_ea(key: &KeyMaterial) -> Result<Array2<f64>> {
    let err = orthogonality_error(key.ea());
    if err.is_nan() || err >= INVERSE_CHECK_TOL {
        return Err(Error::Verification(format!(
            "E_a fails the inverse check (max |E_a E_aᵀ - I| = {err:e})"
        )));
    }
    Ok(key.ea().t().to_owned())
}

/// On-disk key manifest. The matrices are regenerated from the seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KeyManifest {
    pub version: u32,
    pub seed: u64,
    pub p: u32,
    pub c: u32,
    pub n: u32,
    pub matrix_mode: MatrixMode,
}

impl KeyManifest {
    pub fn to_key(&self) -> Result<KeyMaterial> {
        if self.version != MANIFEST_VERSION {
            return Err(Error::Format(format!(
                "unsupported key manifest version {}",
                self.version
            )));
        }
        let geometry = KeyGeometry::new(self.p as usize, self.c as usize, self.n as usize)?;
        generate_key(self.seed, geometry, self.matrix_mode)
    }
}

pub fn key_to_json(key: &KeyMaterial) -> Result<String> {
    let manifest = key
        .manifest()
        .ok_or_else(|| Error::param("only seed-derived keys can be saved"))?;
    Ok(serde_json::to_string(&manifest)?)
}

pub fn key_from_json(text: &str) -> Result<KeyMaterial> {
    serde_json::from_str::<KeyManifest>(text)?.to_key()
}

pub fn save_key(key: &KeyMaterial, path: &Path) -> Result<()> {
    let mut text = key_to_json(key)?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

pub fn load_key(path: &Path) -> Result<KeyMaterial> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    key_from_json(&text)
}
