//! A small vision transformer: patch + position embedding, pre-norm encoder
//! blocks, and a linear head on the class token.
//!
//! Nothing here trains the encoder. Random weights are enough to exercise
//! the embedding identity, and [`train_linear_head`] fits only the head.

mod forward;
mod io;
mod train;
mod verify;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

pub use forward::{
    classify, classify_batch, embed, encoder_forward, features, gelu, layer_norm, TokenSequence,
    LAYER_NORM_EPS,
};
pub use io::{load_model, model_from_blobs, model_to_blobs, save_model, sidecar_path};
pub use train::{
    accuracy, argmax, class_token_features, head_loss_and_gradient, predict,
    train_head_on_features, train_linear_head, Dataset,
};
pub use verify::{
    relative_error, verify_encrypted_pipeline, verify_equivalence, EquivalenceReport,
    LOGIT_TOLERANCE, TOKEN_TOLERANCE,
};

use crate::error::{Error, Result};
use crate::keygen::SplitMix64;

/// Model geometry. `mlp_dim` defaults to `4 · dim`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Hyperparams {
    pub block_size: usize,
    pub channels: usize,
    pub num_patches: usize,
    pub dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_dim: usize,
    pub num_classes: usize,
}

impl Hyperparams {
    pub fn new(
        block_size: usize,
        channels: usize,
        num_patches: usize,
        dim: usize,
        depth: usize,
        heads: usize,
        num_classes: usize,
    ) -> Result<Self> {
        let hp = Hyperparams {
            block_size,
            channels,
            num_patches,
            dim,
            depth,
            heads,
            mlp_dim: 4 * dim,
            num_classes,
        };
        hp.validate()?;
        Ok(hp)
    }

    /// Desk-scale geometry: 32×32×3 images, 4×4 patches, D = 32, two
    /// layers, four heads.
    pub fn desk_scale(num_classes: usize) -> Self {
        Self::new(4, 3, 64, 32, 2, 4, num_classes).expect("valid defaults")
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("block_size", self.block_size),
            ("channels", self.channels),
            ("num_patches", self.num_patches),
            ("dim", self.dim),
            ("heads", self.heads),
            ("mlp_dim", self.mlp_dim),
            ("num_classes", self.num_classes),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::param(format!("{name} must be at least 1")));
        }
        if !self.dim.is_multiple_of(self.heads) {
            return Err(Error::param(format!(
                "heads ({}) must divide dim ({})",
                self.heads, self.dim
            )));
        }
        Ok(())
    }

    /// `L = p² c`.
    pub fn patch_len(&self) -> usize {
        self.block_size * self.block_size * self.channels
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    pub scale: Array1<f64>,
    pub shift: Array1<f64>,
}

impl LayerNorm {
    pub fn identity(dim: usize) -> Self {
        LayerNorm {
            scale: Array1::ones(dim),
            shift: Array1::zeros(dim),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderLayer {
    pub ln1: LayerNorm,
    pub wq: Array2<f64>,
    pub wk: Array2<f64>,
    pub wv: Array2<f64>,
    pub wo: Array2<f64>,
    pub ln2: LayerNorm,
    pub mlp_w1: Array2<f64>,
    pub mlp_b1: Array1<f64>,
    pub mlp_w2: Array2<f64>,
    pub mlp_b2: Array1<f64>,
}

impl EncoderLayer {
    pub fn zeros(dim: usize, mlp_dim: usize) -> Self {
        EncoderLayer {
            ln1: LayerNorm::identity(dim),
            wq: Array2::zeros((dim, dim)),
            wk: Array2::zeros((dim, dim)),
            wv: Array2::zeros((dim, dim)),
            wo: Array2::zeros((dim, dim)),
            ln2: LayerNorm::identity(dim),
            mlp_w1: Array2::zeros((dim, mlp_dim)),
            mlp_b1: Array1::zeros(mlp_dim),
            mlp_w2: Array2::zeros((mlp_dim, dim)),
            mlp_b2: Array1::zeros(dim),
        }
    }
}

/// Linear classifier `logits = features · weight + bias`.
#[derive(Debug, Clone, PartialEq)]
pub struct Head {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ViTModel {
    hyperparams: Hyperparams,
    /// `E`, `L × D`.
    pub patch_embed: Array2<f64>,
    /// `E_pos`, `(N + 1) × D`; row 0 belongs to the class token.
    pub pos_embed: Array2<f64>,
    pub class_token: Array1<f64>,
    pub layers: Vec<EncoderLayer>,
    pub head: Head,
}

impl ViTModel {
    /// All weights zero, layer norms at identity.
    pub fn zeros(hyperparams: Hyperparams) -> Result<Self> {
        hyperparams.validate()?;
        let Hyperparams {
            num_patches,
            dim,
            depth,
            mlp_dim,
            num_classes,
            ..
        } = hyperparams;
        Ok(ViTModel {
            hyperparams,
            patch_embed: Array2::zeros((hyperparams.patch_len(), dim)),
            pos_embed: Array2::zeros((num_patches + 1, dim)),
            class_token: Array1::zeros(dim),
            layers: (0..depth)
                .map(|_| EncoderLayer::zeros(dim, mlp_dim))
                .collect(),
            head: Head {
                weight: Array2::zeros((dim, num_classes)),
                bias: Array1::zeros(num_classes),
            },
        })
    }

    pub fn hyperparams(&self) -> &Hyperparams {
        &self.hyperparams
    }

    /// Checks every tensor against the hyperparameters.
    pub fn validate(&self) -> Result<()> {
        let hp = &self.hyperparams;
        hp.validate()?;
        let (d, f, k) = (hp.dim, hp.mlp_dim, hp.num_classes);
        let mut problems = Vec::new();
        let mut check2 = |name: &str, m: &Array2<f64>, shape: (usize, usize)| {
            if m.dim() != shape {
                problems.push(format!("{name} is {:?}, expected {shape:?}", m.dim()));
            }
        };
        check2("patch_embed", &self.patch_embed, (hp.patch_len(), d));
        check2("pos_embed", &self.pos_embed, (hp.num_patches + 1, d));
        check2("head.weight", &self.head.weight, (d, k));
        for (i, layer) in self.layers.iter().enumerate() {
            for (name, m) in [
                ("wq", &layer.wq),
                ("wk", &layer.wk),
                ("wv", &layer.wv),
                ("wo", &layer.wo),
            ] {
                check2(&format!("encoder.{i}.attn.{name}"), m, (d, d));
            }
            check2(&format!("encoder.{i}.mlp.w1"), &layer.mlp_w1, (d, f));
            check2(&format!("encoder.{i}.mlp.w2"), &layer.mlp_w2, (f, d));
        }
        let mut check1 = |name: String, v: &Array1<f64>, len: usize| {
            if v.len() != len {
                problems.push(format!("{name} has length {}, expected {len}", v.len()));
            }
        };
        check1("class_token".into(), &self.class_token, d);
        check1("head.bias".into(), &self.head.bias, k);
        for (i, layer) in self.layers.iter().enumerate() {
            check1(format!("encoder.{i}.ln1.scale"), &layer.ln1.scale, d);
            check1(format!("encoder.{i}.ln1.shift"), &layer.ln1.shift, d);
            check1(format!("encoder.{i}.ln2.scale"), &layer.ln2.scale, d);
            check1(format!("encoder.{i}.ln2.shift"), &layer.ln2.shift, d);
            check1(format!("encoder.{i}.mlp.b1"), &layer.mlp_b1, f);
            check1(format!("encoder.{i}.mlp.b2"), &layer.mlp_b2, d);
        }
        if self.layers.len() != hp.depth {
            problems.push(format!(
                "model has {} layers, expected depth {}",
                self.layers.len(),
                hp.depth
            ));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::dim(problems.join("; ")))
        }
    }
}

/// Random weights drawn from the seeded value stream.
///
/// Every matrix, the class token, the embeddings and all biases are
/// standard normals scaled by `1/√D`; layer norms start at identity.
pub fn init_random_model(seed: u64, hyperparams: Hyperparams) -> Result<ViTModel> {
    let mut model = ViTModel::zeros(hyperparams)?;
    let mut rng = SplitMix64::new(seed);
    let scale = 1.0 / (hyperparams.dim as f64).sqrt();
    let mut fill2 = |m: &mut Array2<f64>| m.mapv_inplace(|_| rng.next_normal() * scale);
    fill2(&mut model.patch_embed);
    fill2(&mut model.pos_embed);
    for layer in &mut model.layers {
        fill2(&mut layer.wq);
        fill2(&mut layer.wk);
        fill2(&mut layer.wv);
        fill2(&mut layer.wo);
        fill2(&mut layer.mlp_w1);
        fill2(&mut layer.mlp_w2);
    }
    fill2(&mut model.head.weight);
    let mut fill1 = |v: &mut Array1<f64>| v.mapv_inplace(|_| rng.next_normal() * scale);
    fill1(&mut model.class_token);
    for layer in &mut model.layers {
        fill1(&mut layer.mlp_b1);
        fill1(&mut layer.mlp_b2);
    }
    fill1(&mut model.head.bias);
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn heads_must_divide_dim() {
        assert!(Hyperparams::new(4, 3, 64, 30, 2, 4, 2).is_err());
        assert!(Hyperparams::new(0, 3, 64, 32, 2, 4, 2).is_err());
        assert!(Hyperparams::new(4, 3, 64, 32, 0, 4, 2).is_ok());
    }

    #[test]
    fn random_model_is_deterministic() {
        let hp = Hyperparams::desk_scale(3);
        assert_eq!(
            init_random_model(1, hp).unwrap(),
            init_random_model(1, hp).unwrap()
        );
        assert_ne!(
            init_random_model(1, hp).unwrap(),
            init_random_model(2, hp).unwrap()
        );
    }

    #[test]
    fn random_model_shapes() {
        let hp = Hyperparams::new(2, 1, 16, 8, 3, 2, 5).unwrap();
        let m = init_random_model(4, hp).unwrap();
        m.validate().unwrap();
        assert_eq!(m.patch_embed.dim(), (4, 8));
        assert_eq!(m.pos_embed.dim(), (17, 8));
        assert_eq!(m.layers.len(), 3);
        assert_eq!(m.layers[0].mlp_w1.dim(), (8, 32));
        assert_eq!(m.head.weight.dim(), (8, 5));
    }

    #[test]
    fn validate_reports_bad_shapes() {
        let hp = Hyperparams::new(2, 1, 4, 8, 1, 2, 2).unwrap();
        let mut m = ViTModel::zeros(hp).unwrap();
        m.pos_embed = Array2::zeros((4, 8));
        let err = m.validate().unwrap_err().to_string();
        assert!(err.contains("pos_embed"), "{err}");
    }
}
