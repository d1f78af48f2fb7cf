//! Block-wise image encryption for vision transformers.
//!
//! A secret key holds a random orthogonal matrix `E_a` that mixes the pixels
//! inside each `p × p` block and a permutation `lt` that shuffles the
//! blocks. The same key transforms a trained model's patch and position
//! embeddings. An encrypted model fed encrypted images produces exactly the
//! plain model's logits, while plain images or wrongly keyed images give
//! chance-level predictions.
//!
//! ```
//! use vitcrypt::cipher::{encrypt_image, encrypt_model};
//! use vitcrypt::keygen::{generate_key, KeyGeometry, MatrixMode};
//! use vitcrypt::synth::natural_image;
//! use vitcrypt::vit::{classify, init_random_model, Hyperparams};
//!
//! let hp = Hyperparams::new(4, 3, 16, 16, 1, 2, 10)?;
//! let model = init_random_model(1, hp)?;
//! let key = generate_key(42, KeyGeometry::new(4, 3, 16)?, MatrixMode::Orthogonal)?;
//!
//! let image = natural_image(7, 16, 16, 3);
//! let plain_logits = classify(&model, &image)?;
//! let enc_logits = classify(&encrypt_model(&model, &key)?, &encrypt_image(&image, &key)?)?;
//!
//! for (a, b) in plain_logits.iter().zip(&enc_logits) {
//!     assert!((a - b).abs() < 1e-10);
//! }
//! # Ok::<(), vitcrypt::Error>(())
//! ```

pub mod cipher;
mod error;
pub mod flsim;
pub mod harness;
pub mod keygen;
pub mod layout;
pub mod synth;
pub mod tensorio;
pub mod vit;

pub use error::{Error, Result};

#[cfg(doctest)]
mod guide {
    #[doc = include_str!("../../../book/src/intro.md")]
    mod intro {}
    #[doc = include_str!("../../../book/src/keys.md")]
    mod keys {}
    #[doc = include_str!("../../../book/src/cipher.md")]
    mod cipher {}
    #[doc = include_str!("../../../book/src/equivalence.md")]
    mod equivalence {}
    #[doc = include_str!("../../../book/src/access-control.md")]
    mod access_control {}
    #[doc = include_str!("../../../book/src/federated.md")]
    mod federated {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
