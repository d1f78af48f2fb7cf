//! Block-wise encryption of test images and the matching transform of a
//! model's patch and position embeddings.
//!
//! An image is cut into `p × p` blocks, the blocks are reordered by the key's
//! permutation `lt`, and each flattened block `x̄` becomes `x̄ · E_a⁻¹`. On the
//! model side the patch embedding becomes `E_a · E` and the position
//! embedding becomes `E_b · E_pos`. Feeding an encrypted image to the
//! encrypted model then yields `E_b · z₀`, the plain token sequence with its
//! patch rows reordered and the class-token row untouched.

use ndarray::{Array2, ArrayView1};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::keygen::{KeyMaterial, Permutation};
use crate::layout::{block_grid, image_from_patches, patch_matrix};
use crate::tensorio::{ImageTensor, RangeTag};
use crate::vit::ViTModel;

/// Slack allowed when deciding whether a decrypted image is a valid plain
/// image; values inside it are clamped to `[0, 1]`.
pub const PLAIN_RANGE_SLACK: f64 = 1e-9;

/// The `N` blocks of an image in raster order, each stored flattened as one
/// row of an `N × p²c` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockSequence {
    block_size: usize,
    channels: usize,
    height: usize,
    width: usize,
    blocks: Array2<f64>,
}

impl BlockSequence {
    pub fn block_size(&self) -> usize {
        self.block_size
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn len(&self) -> usize {
        self.blocks.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.nrows() == 0
    }

    /// Block `i` flattened in the shared channel-last order.
    pub fn block(&self, i: usize) -> ArrayView1<'_, f64> {
        self.blocks.row(i)
    }

    pub fn as_matrix(&self) -> &Array2<f64> {
        &self.blocks
    }

    fn with_blocks(&self, blocks: Array2<f64>) -> Self {
        BlockSequence {
            blocks,
            ..self.clone()
        }
    }

    fn check_key(&self, key: &KeyMaterial) -> Result<()> {
        if self.block_size != key.block_size() || self.channels != key.channels() {
            return Err(Error::dim(format!(
                "blocks are {0}x{0}x{1} but the key expects {2}x{2}x{3}",
                self.block_size,
                self.channels,
                key.block_size(),
                key.channels()
            )));
        }
        if self.len() != key.num_blocks() {
            return Err(Error::dim(format!(
                "image has {} blocks but the key expects N = {}",
                self.len(),
                key.num_blocks()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Encrypt,
    Decrypt,
}

pub fn split_blocks(img: &ImageTensor, p: usize) -> Result<BlockSequence> {
    block_grid(img.height(), img.width(), p)?;
    Ok(BlockSequence {
        block_size: p,
        channels: img.channels(),
        height: img.height(),
        width: img.width(),
        blocks: patch_matrix(img, p)?,
    })
}

pub fn merge_blocks(bs: &BlockSequence, range: RangeTag) -> Result<ImageTensor> {
    image_from_patches(
        &bs.blocks,
        bs.height,
        bs.width,
        bs.channels,
        bs.block_size,
        range,
    )
}

/// Slot `i` of the output receives block `lt[i]` of the input.
pub fn permute_blocks(bs: &BlockSequence, key: &KeyMaterial) -> Result<BlockSequence> {
    bs.check_key(key)?;
    Ok(gather_blocks(bs, key.lt()))
}

pub fn gather_blocks(bs: &BlockSequence, perm: &Permutation) -> BlockSequence {
    bs.with_blocks(bs.blocks.select(ndarray::Axis(0), perm.as_slice()))
}

/// Right-multiplies every flattened block by `E_a⁻¹` (encrypt) or `E_a`
/// (decrypt).
pub fn transform_blocks(
    bs: &BlockSequence,
    key: &KeyMaterial,
    direction: Direction,
) -> Result<BlockSequence> {
    bs.check_key(key)?;
    let m = match direction {
        Direction::Encrypt => key.ea_inverse(),
        Direction::Decrypt => key.ea(),
    };
    Ok(bs.with_blocks(bs.blocks.dot(m)))
}

pub fn encrypt_image(img: &ImageTensor, key: &KeyMaterial) -> Result<ImageTensor> {
    if img.range() != RangeTag::Plain {
        return Err(Error::param("image is already encrypted"));
    }
    let blocks = split_blocks(img, key.block_size())?;
    let permuted = permute_blocks(&blocks, key)?;
    let mixed = transform_blocks(&permuted, key, Direction::Encrypt)?;
    merge_blocks(&mixed, RangeTag::Encrypted)
}

/// Inverts [`encrypt_image`].
///
/// The result is tagged plain when every value lies in `[0, 1]` up to
/// [`PLAIN_RANGE_SLACK`] (such values are clamped). Decrypting with the
/// wrong key generally leaves values outside that range; the result then
/// keeps the encrypted tag.
pub fn decrypt_image(enc: &ImageTensor, key: &KeyMaterial) -> Result<ImageTensor> {
    if enc.range() != RangeTag::Encrypted {
        return Err(Error::param("image is not encrypted"));
    }
    let blocks = split_blocks(enc, key.block_size())?;
    let unmixed = transform_blocks(&blocks, key, Direction::Decrypt)?;
    let restored = gather_blocks(&unmixed, &key.lt().inverse());
    let in_range = restored
        .blocks
        .iter()
        .all(|&v| (-PLAIN_RANGE_SLACK..=1.0 + PLAIN_RANGE_SLACK).contains(&v));
    if in_range {
        let clamped = restored.with_blocks(restored.blocks.mapv(|v| v.clamp(0.0, 1.0)));
        merge_blocks(&clamped, RangeTag::Plain)
    } else {
        merge_blocks(&restored, RangeTag::Encrypted)
    }
}

/// Encrypts a batch in parallel. Output order matches input order.
pub fn encrypt_images(images: &[ImageTensor], key: &KeyMaterial) -> Result<Vec<ImageTensor>> {
    images
        .par_iter()
        .map(|img| encrypt_image(img, key))
        .collect()
}

/// `Ê = E_a · E`.
pub fn encrypt_patch_embedding(e: &Array2<f64>, key: &KeyMaterial) -> Result<Array2<f64>> {
    if e.nrows() != key.block_len() {
        return Err(Error::dim(format!(
            "patch embedding has {} rows, key has L = {}",
            e.nrows(),
            key.block_len()
        )));
    }
    Ok(key.ea().dot(e))
}

/// `Ê_pos = E_b · E_pos`. Row 0 (class token) is left in place.
pub fn encrypt_position_embedding(e_pos: &Array2<f64>, key: &KeyMaterial) -> Result<Array2<f64>> {
    key.eb().apply_rows(e_pos)
}

/// Replaces the patch and position embeddings; everything else is copied.
pub fn encrypt_model(model: &ViTModel, key: &KeyMaterial) -> Result<ViTModel> {
    let hp = model.hyperparams();
    if hp.block_size != key.block_size()
        || hp.channels != key.channels()
        || hp.num_patches != key.num_blocks()
    {
        return Err(Error::dim(format!(
            "model geometry p={} c={} N={} does not match key p={} c={} N={}",
            hp.block_size,
            hp.channels,
            hp.num_patches,
            key.block_size(),
            key.channels(),
            key.num_blocks()
        )));
    }
    let mut out = model.clone();
    out.patch_embed = encrypt_patch_embedding(&model.patch_embed, key)?;
    out.pos_embed = encrypt_position_embedding(&model.pos_embed, key)?;
    Ok(out)
}
