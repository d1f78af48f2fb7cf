//! Access-control and visual-protection measurements.
//!
//! Accuracy against synthetic labels is replaced by top-1 agreement with the
//! plain baseline model: the fraction of inputs on which a setup predicts
//! the same class the baseline predicts on the plain image.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::Serialize;

use crate::cipher::encrypt_image;
use crate::error::{Error, Result};
use crate::keygen::{generate_key, KeyMaterial, SplitMix64};
use crate::tensorio::ImageTensor;
use crate::vit::{predict, ViTModel};

/// PSNR reported for identical images.
pub const PSNR_CAP_DB: f64 = 99.0;

/// Fraction of positions where two prediction lists agree.
pub fn agreement(a: &[usize], b: &[usize]) -> f64 {
    assert_eq!(a.len(), b.len(), "prediction lists differ in length");
    if a.is_empty() {
        return 0.0;
    }
    a.iter().zip(b).filter(|(x, y)| x == y).count() as f64 / a.len() as f64
}

/// Agreement between the encrypted model fed plain images and the baseline
/// fed the same plain images.
pub fn plain_image_attack(
    enc_model: &ViTModel,
    plain_test_set: &[ImageTensor],
    baseline_model: &ViTModel,
) -> Result<f64> {
    if plain_test_set.is_empty() {
        return Err(Error::param("test set is empty"));
    }
    let attacked = predict(enc_model, plain_test_set)?;
    let baseline = predict(baseline_model, plain_test_set)?;
    Ok(agreement(&attacked, &baseline))
}

/// Agreement with `baseline_preds` when every test image is encrypted with
/// `key` before being fed to `enc_model`.
pub fn key_agreement(
    enc_model: &ViTModel,
    key: &KeyMaterial,
    test_set: &[ImageTensor],
    baseline_preds: &[usize],
) -> Result<f64> {
    let encrypted = test_set
        .iter()
        .map(|x| encrypt_image(x, key))
        .collect::<Result<Vec<_>>>()?;
    Ok(agreement(&predict(enc_model, &encrypted)?, baseline_preds))
}

/// Box-plot statistics. Quartiles use inclusive linear interpolation
/// (position `(n - 1)·q` in the sorted data). Whiskers end at the most
/// extreme data points inside `[Q1 - 1.5·IQR, Q3 + 1.5·IQR]`; anything
/// beyond is an outlier.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BoxStats {
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub whisker_low: f64,
    pub whisker_high: f64,
    pub outliers: Vec<f64>,
}

/// Inclusive linear-interpolation quantile of sorted data.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let pos = (sorted.len() - 1) as f64 * q;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

impl BoxStats {
    pub fn from_values(values: &[f64]) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::param("box statistics need at least one value"));
        }
        let mut sorted = values.to_vec();
        sorted.sort_by(f64::total_cmp);
        let q1 = quantile_sorted(&sorted, 0.25);
        let median = quantile_sorted(&sorted, 0.5);
        let q3 = quantile_sorted(&sorted, 0.75);
        let iqr = q3 - q1;
        let (lo_fence, hi_fence) = (q1 - 1.5 * iqr, q3 + 1.5 * iqr);
        let inside = sorted.iter().filter(|&&v| v >= lo_fence && v <= hi_fence);
        let whisker_low = inside.clone().copied().fold(f64::INFINITY, f64::min);
        let whisker_high = inside.copied().fold(f64::NEG_INFINITY, f64::max);
        let outliers = sorted
            .iter()
            .copied()
            .filter(|&v| v < lo_fence || v > hi_fence)
            .collect();
        Ok(BoxStats {
            q1,
            median,
            q3,
            whisker_low,
            whisker_high,
            outliers,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct KeyTrial {
    pub seed: u64,
    pub agreement: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AttackReport {
    pub num_keys: usize,
    pub num_images: usize,
    /// Wrong-key trials in seed-generation order.
    pub trials: Vec<KeyTrial>,
    pub stats: BoxStats,
    /// Agreement for the correct key (positive control).
    pub true_key_agreement: f64,
}

impl AttackReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn to_table(&self) -> String {
        let s = &self.stats;
        let mut out = String::new();
        let _ = writeln!(out, "keys tried        {}", self.num_keys);
        let _ = writeln!(out, "test images       {}", self.num_images);
        let _ = writeln!(out, "true key          {:.4}", self.true_key_agreement);
        let _ = writeln!(out, "whisker low       {:.4}", s.whisker_low);
        let _ = writeln!(out, "Q1                {:.4}", s.q1);
        let _ = writeln!(out, "median            {:.4}", s.median);
        let _ = writeln!(out, "Q3                {:.4}", s.q3);
        let _ = writeln!(out, "whisker high      {:.4}", s.whisker_high);
        let _ = writeln!(out, "outliers          {}", s.outliers.len());
        out
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("seed,agreement\n");
        for t in &self.trials {
            let _ = writeln!(out, "{},{}", t.seed, t.agreement);
        }
        out
    }
}

/// `count` key seeds drawn from `attack_seed`, never equal to `exclude`.
pub fn wrong_key_seeds(attack_seed: u64, count: usize, exclude: Option<u64>) -> Vec<u64> {
    let mut rng = SplitMix64::new(attack_seed);
    let mut seeds: Vec<u64> = Vec::with_capacity(count);
    while seeds.len() < count {
        let s = rng.next_u64();
        if Some(s) != exclude && !seeds.contains(&s) {
            seeds.push(s);
        }
    }
    seeds
}

/// Queries `enc_model` with test images encrypted under `num_keys` random
/// keys of the same geometry and mode as `key_true`, and under `key_true`
/// itself as a positive control.
pub fn random_key_attack(
    enc_model: &ViTModel,
    baseline_model: &ViTModel,
    key_true: &KeyMaterial,
    num_keys: usize,
    test_set: &[ImageTensor],
    attack_seed: u64,
) -> Result<AttackReport> {
    if num_keys == 0 {
        return Err(Error::param("num_keys must be at least 1"));
    }
    if test_set.is_empty() {
        return Err(Error::param("test set is empty"));
    }
    let baseline = predict(baseline_model, test_set)?;
    let seeds = wrong_key_seeds(attack_seed, num_keys, key_true.seed());
    let trials = seeds
        .par_iter()
        .map(|&seed| {
            let key = generate_key(seed, key_true.geometry(), key_true.mode())?;
            Ok(KeyTrial {
                seed,
                agreement: key_agreement(enc_model, &key, test_set, &baseline)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let rates: Vec<f64> = trials.iter().map(|t| t.agreement).collect();
    Ok(AttackReport {
        num_keys,
        num_images: test_set.len(),
        stats: BoxStats::from_values(&rates)?,
        trials,
        true_key_agreement: key_agreement(enc_model, key_true, test_set, &baseline)?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct VisualMetrics {
    pub pearson_corr: f64,
    pub psnr: f64,
    /// Set when either image has zero variance; the correlation is then 0.
    pub zero_variance: bool,
}

fn normalize_range(v: &[f64]) -> Vec<f64> {
    let (lo, hi) = v
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &x| {
            (a.min(x), b.max(x))
        });
    if hi > lo {
        v.iter().map(|x| (x - lo) / (hi - lo)).collect()
    } else {
        vec![0.5; v.len()]
    }
}

/// Pixel correlation and PSNR between a plain image and its encryption.
/// Both images are affinely rescaled to `[0, 1]` before the PSNR.
pub fn visual_protection_metrics(
    plain: &ImageTensor,
    encrypted: &ImageTensor,
) -> Result<VisualMetrics> {
    let dims = |x: &ImageTensor| (x.height(), x.width(), x.channels());
    if dims(plain) != dims(encrypted) {
        return Err(Error::dim(format!(
            "images differ in shape: {:?} vs {:?}",
            dims(plain),
            dims(encrypted)
        )));
    }
    let (a, b) = (plain.data(), encrypted.data());
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut cov, mut va, mut vb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        cov += (x - ma) * (y - mb);
        va += (x - ma).powi(2);
        vb += (y - mb).powi(2);
    }
    let zero_variance = va == 0.0 || vb == 0.0;
    let pearson_corr = if zero_variance {
        0.0
    } else {
        (cov / (va.sqrt() * vb.sqrt())).clamp(-1.0, 1.0)
    };
    let (na, nb) = (normalize_range(a), normalize_range(b));
    let mse = na
        .iter()
        .zip(&nb)
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        / n;
    let psnr = if mse == 0.0 {
        PSNR_CAP_DB
    } else {
        (10.0 * (1.0 / mse).log10()).min(PSNR_CAP_DB)
    };
    Ok(VisualMetrics {
        pearson_corr,
        psnr,
        zero_variance,
    })
}
