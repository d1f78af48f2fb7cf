use ndarray::{Array1, Array2};
use rayon::prelude::*;
use serde::Serialize;

use super::forward::{embed, encoder_forward};
use super::ViTModel;
use crate::cipher::{encrypt_image, encrypt_model};
use crate::error::{Error, Result};
use crate::keygen::KeyMaterial;
use crate::tensorio::ImageTensor;

/// Relative tolerance on `z̃₀ = E_b · z₀`.
pub const TOKEN_TOLERANCE: f64 = 1e-9;
/// Relative tolerance on encrypted-vs-plain logits.
pub const LOGIT_TOLERANCE: f64 = 1e-8;

/// Worst-case disagreement between the encrypted and plain pipelines.
///
/// Errors are absolute; each is judged against its tolerance times the
/// largest magnitude seen in the corresponding plain quantity.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EquivalenceReport {
    pub images: usize,
    pub max_z0_error: f64,
    pub z0_scale: f64,
    pub max_logit_error: f64,
    pub logit_scale: f64,
    pub token_tolerance: f64,
    pub logit_tolerance: f64,
    pub passed: bool,
}

impl EquivalenceReport {
    pub fn z0_relative_error(&self) -> f64 {
        relative_error(self.max_z0_error, self.z0_scale)
    }

    pub fn logit_relative_error(&self) -> f64 {
        relative_error(self.max_logit_error, self.logit_scale)
    }
}

/// `error / scale`, with `0 / 0 = 0`.
pub fn relative_error(error: f64, scale: f64) -> f64 {
    if error == 0.0 {
        0.0
    } else {
        error / scale
    }
}

struct Sample {
    z0_err: f64,
    z0_scale: f64,
    logit_err: f64,
    logit_scale: f64,
}

fn max_abs(a: &Array2<f64>) -> f64 {
    a.iter().fold(0.0, |m, v| m.max(v.abs()))
}

fn max_abs_diff<D: ndarray::Dimension>(
    a: &ndarray::Array<f64, D>,
    b: &ndarray::Array<f64, D>,
) -> f64 {
    a.iter()
        .zip(b.iter())
        .fold(0.0, |m, (x, y)| m.max((x - y).abs()))
}

fn compare_one(
    plain_model: &ViTModel,
    enc_model: &ViTModel,
    key: &KeyMaterial,
    plain: &ImageTensor,
    encrypted: &ImageTensor,
) -> Result<Sample> {
    let eb = key.eb();
    let z0 = embed(plain_model, plain)?;
    let expected = eb.apply_rows(&z0)?;
    let z0_enc = embed(enc_model, encrypted)?;

    let logits = head_of(plain_model, &encoder_forward(plain_model, &z0)?);
    let logits_enc = head_of(enc_model, &encoder_forward(enc_model, &z0_enc)?);

    Ok(Sample {
        z0_err: max_abs_diff(&z0_enc, &expected),
        z0_scale: max_abs(&expected),
        logit_err: max_abs_diff(&logits_enc, &logits),
        logit_scale: logits.iter().fold(0.0, |m, v| m.max(v.abs())),
    })
}

fn head_of(model: &ViTModel, z: &Array2<f64>) -> Array1<f64> {
    super::forward::head_logits(model, z.row(0))
}

/// Checks the encrypted pipeline against the plain one on each image pair.
///
/// `enc_model` and `encrypted` are taken as given, so a model or image that
/// was encrypted incorrectly shows up as a failed report.
pub fn verify_encrypted_pipeline(
    plain_model: &ViTModel,
    enc_model: &ViTModel,
    key: &KeyMaterial,
    plain: &[ImageTensor],
    encrypted: &[ImageTensor],
) -> Result<EquivalenceReport> {
    if plain.is_empty() {
        return Err(Error::param("image set is empty"));
    }
    if plain.len() != encrypted.len() {
        return Err(Error::dim(format!(
            "{} plain images but {} encrypted images",
            plain.len(),
            encrypted.len()
        )));
    }
    let samples = plain
        .par_iter()
        .zip(encrypted)
        .map(|(x, x_enc)| compare_one(plain_model, enc_model, key, x, x_enc))
        .collect::<Result<Vec<_>>>()?;
    let fold = |f: fn(&Sample) -> f64| samples.iter().map(f).fold(0.0, f64::max);
    let mut report = EquivalenceReport {
        images: samples.len(),
        max_z0_error: fold(|s| s.z0_err),
        z0_scale: fold(|s| s.z0_scale),
        max_logit_error: fold(|s| s.logit_err),
        logit_scale: fold(|s| s.logit_scale),
        token_tolerance: TOKEN_TOLERANCE,
        logit_tolerance: LOGIT_TOLERANCE,
        passed: false,
    };
    report.passed = report.z0_relative_error() < TOKEN_TOLERANCE
        && report.logit_relative_error() < LOGIT_TOLERANCE;
    Ok(report)
}

/// Encrypts `model` and every image with `key`, then runs
/// [`verify_encrypted_pipeline`].
pub fn verify_equivalence(
    model: &ViTModel,
    key: &KeyMaterial,
    images: &[ImageTensor],
) -> Result<EquivalenceReport> {
    let enc_model = encrypt_model(model, key)?;
    let encrypted = images
        .iter()
        .map(|x| encrypt_image(x, key))
        .collect::<Result<Vec<_>>>()?;
    verify_encrypted_pipeline(model, &enc_model, key, images, &encrypted)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::keygen::{generate_key, KeyGeometry, MatrixMode};
    use crate::synth::natural_image;
    use crate::vit::{init_random_model, Hyperparams};

    fn setup() -> (ViTModel, KeyMaterial, Vec<ImageTensor>) {
        let hp = Hyperparams::new(4, 1, 16, 8, 2, 2, 3).unwrap();
        let model = init_random_model(10, hp).unwrap();
        let key = generate_key(
            3,
            KeyGeometry::new(4, 1, 16).unwrap(),
            MatrixMode::Orthogonal,
        )
        .unwrap();
        let images = (0..20).map(|s| natural_image(s, 16, 16, 1)).collect();
        (model, key, images)
    }

    #[test]
    fn random_key_passes() {
        let (model, key, images) = setup();
        let report = verify_equivalence(&model, &key, &images).unwrap();
        assert!(report.passed, "{report:?}");
        assert_eq!(report.images, 20);
    }

    #[test]
    fn null_cipher_is_exact() {
        let (model, _, images) = setup();
        let key = KeyMaterial::null(KeyGeometry::new(4, 1, 16).unwrap());
        let report = verify_equivalence(&model, &key, &images).unwrap();
        assert_eq!(report.max_z0_error, 0.0);
        assert_eq!(report.max_logit_error, 0.0);
        assert!(report.passed);
    }

    #[test]
    fn transposed_ea_fails() {
        let (model, key, images) = setup();
        let mut bad = model.clone();
        bad.patch_embed = key.ea().t().dot(&model.patch_embed);
        bad.pos_embed = key.eb().apply_rows(&model.pos_embed).unwrap();
        let encrypted: Vec<_> = images
            .iter()
            .map(|x| encrypt_image(x, &key).unwrap())
            .collect();
        let report = verify_encrypted_pipeline(&model, &bad, &key, &images, &encrypted).unwrap();
        assert!(!report.passed);
    }

    #[test]
    fn empty_set_rejected() {
        let (model, key, _) = setup();
        assert!(verify_equivalence(&model, &key, &[]).is_err());
    }
}
