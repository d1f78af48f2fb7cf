//! Deterministic synthetic images for tests, demos, and desk-scale
//! experiments.
//!
//! [`natural_image`] produces a smooth, mostly low-frequency picture whose
//! neighbouring pixels are strongly correlated, which is the property the
//! visual-protection metrics care about. [`class_dataset`] draws labeled
//! images around one smooth prototype per class.

use crate::keygen::SplitMix64;
use crate::tensorio::ImageTensor;
use crate::vit::Dataset;

/// Seed offset separating class prototypes from per-sample noise.
const PROTOTYPE_STREAM: u64 = 0x05EE_D0FC_1A55;

/// A smooth image in `[0, 1]`: a sum of random low-frequency cosines with
/// `1/f` amplitudes, tinted per channel, then rescaled to `[0.05, 0.95]`.
pub fn natural_image(seed: u64, height: usize, width: usize, channels: usize) -> ImageTensor {
    let field = smooth_field(&mut SplitMix64::new(seed), height, width, channels, 6);
    let (lo, hi) = field
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| {
            (a.min(v), b.max(v))
        });
    let span = if hi > lo { hi - lo } else { 1.0 };
    let data = field.iter().map(|v| 0.05 + 0.9 * (v - lo) / span).collect();
    ImageTensor::plain(height, width, channels, data).expect("generated image is valid")
}

/// Zero-mean smooth field, row-major `(h, w, c)`.
fn smooth_field(
    rng: &mut SplitMix64,
    height: usize,
    width: usize,
    channels: usize,
    waves: usize,
) -> Vec<f64> {
    use std::f64::consts::TAU;
    let comps: Vec<(f64, f64, f64, f64, Vec<f64>)> = (0..waves)
        .map(|k| {
            let freq = 1.0 + k as f64 * 0.5;
            let angle = rng.next_uniform() * TAU;
            let phase = rng.next_uniform() * TAU;
            let amp = rng.next_normal() / freq;
            let tint = (0..channels)
                .map(|_| 0.7 + 0.6 * rng.next_uniform())
                .collect();
            (freq * angle.cos(), freq * angle.sin(), phase, amp, tint)
        })
        .collect();
    let mut data = Vec::with_capacity(height * width * channels);
    for r in 0..height {
        for c in 0..width {
            let (y, x) = (r as f64 / height as f64, c as f64 / width as f64);
            for ch in 0..channels {
                let v: f64 = comps
                    .iter()
                    .map(|(fx, fy, ph, amp, tint)| {
                        amp * tint[ch] * (TAU * (fx * x + fy * y) + ph).cos()
                    })
                    .sum();
                data.push(v);
            }
        }
    }
    let mean = data.iter().sum::<f64>() / data.len() as f64;
    data.iter_mut().for_each(|v| *v -= mean);
    data
}

/// Geometry and contrast for [`class_dataset`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SyntheticSpec {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    /// Peak deviation of a class prototype from mid-gray.
    pub signal: f64,
    /// Standard deviation of per-pixel Gaussian noise.
    pub noise: f64,
    /// Seed of the class prototypes; datasets sharing it share classes.
    pub prototype_seed: u64,
}

impl SyntheticSpec {
    pub fn new(height: usize, width: usize, channels: usize) -> Self {
        SyntheticSpec {
            height,
            width,
            channels,
            signal: 0.25,
            noise: 0.1,
            prototype_seed: 0,
        }
    }

    /// 32×32 RGB, matching the desk-scale model.
    pub fn desk_scale() -> Self {
        Self::new(32, 32, 3)
    }

    fn prototype(&self, class: usize) -> Vec<f64> {
        let mut rng =
            SplitMix64::new(self.prototype_seed ^ PROTOTYPE_STREAM ^ ((class as u64 + 1) * 0x9E37));
        let field = smooth_field(&mut rng, self.height, self.width, self.channels, 4);
        let peak = field
            .iter()
            .fold(0.0f64, |m, v| m.max(v.abs()))
            .max(f64::MIN_POSITIVE);
        field.iter().map(|v| v / peak * self.signal).collect()
    }
}

/// `n` labeled images with labels cycling `0, 1, …, num_classes - 1`.
///
/// Each image is mid-gray plus its class prototype plus Gaussian noise,
/// clamped to `[0, 1]`. The same `(spec, seed)` always gives the same set.
pub fn class_dataset(spec: &SyntheticSpec, num_classes: usize, n: usize, seed: u64) -> Dataset {
    let prototypes: Vec<Vec<f64>> = (0..num_classes).map(|k| spec.prototype(k)).collect();
    let mut rng = SplitMix64::new(seed);
    let mut images = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let label = i % num_classes;
        let data = prototypes[label]
            .iter()
            .map(|p| (0.5 + p + spec.noise * rng.next_normal()).clamp(0.0, 1.0))
            .collect();
        images.push(
            ImageTensor::plain(spec.height, spec.width, spec.channels, data)
                .expect("generated image is valid"),
        );
        labels.push(label);
    }
    Dataset { images, labels }
}

pub fn two_class_dataset(spec: &SyntheticSpec, n: usize, seed: u64) -> Dataset {
    class_dataset(spec, 2, n, seed)
}

/// Unlabeled random images with independent uniform pixels.
pub fn uniform_images(
    seed: u64,
    count: usize,
    height: usize,
    width: usize,
    channels: usize,
) -> Vec<ImageTensor> {
    let mut rng = SplitMix64::new(seed);
    (0..count)
        .map(|_| {
            let data = (0..height * width * channels)
                .map(|_| rng.next_uniform())
                .collect();
            ImageTensor::plain(height, width, channels, data).expect("uniform image is valid")
        })
        .collect()
}
