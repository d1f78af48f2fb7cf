use ndarray::{Array1, Array2, ArrayView1, Axis};
use rayon::prelude::*;

use super::forward::{classify_batch, features};
use super::{Head, ViTModel};
use crate::error::{Error, Result};
use crate::tensorio::ImageTensor;

/// Labeled images, in a fixed order.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub images: Vec<ImageTensor>,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn new(images: Vec<ImageTensor>, labels: Vec<usize>) -> Result<Self> {
        if images.len() != labels.len() {
            return Err(Error::dim(format!(
                "{} images but {} labels",
                images.len(),
                labels.len()
            )));
        }
        Ok(Dataset { images, labels })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn concat(parts: &[Dataset]) -> Dataset {
        Dataset {
            images: parts
                .iter()
                .flat_map(|d| d.images.iter().cloned())
                .collect(),
            labels: parts
                .iter()
                .flat_map(|d| d.labels.iter().copied())
                .collect(),
        }
    }
}

/// Index of the largest value; the first one wins ties.
pub fn argmax(v: ArrayView1<f64>) -> usize {
    v.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &x)| {
            if x > bv {
                (i, x)
            } else {
                (bi, bv)
            }
        })
        .0
}

pub fn predict(model: &ViTModel, images: &[ImageTensor]) -> Result<Vec<usize>> {
    let logits = classify_batch(model, images)?;
    Ok(logits.rows().into_iter().map(argmax).collect())
}

pub fn accuracy(model: &ViTModel, data: &Dataset) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::param("empty dataset"));
    }
    let preds = predict(model, &data.images)?;
    let hits = preds
        .iter()
        .zip(&data.labels)
        .filter(|(p, l)| p == l)
        .count();
    Ok(hits as f64 / data.len() as f64)
}

/// Class-token encoder outputs, one row per image.
pub fn class_token_features(model: &ViTModel, images: &[ImageTensor]) -> Result<Array2<f64>> {
    let rows = images
        .par_iter()
        .map(|img| features(model, img))
        .collect::<Result<Vec<_>>>()?;
    let mut out = Array2::zeros((images.len(), model.hyperparams().dim));
    for (mut dst, row) in out.axis_iter_mut(Axis(0)).zip(rows) {
        dst.assign(&row);
    }
    Ok(out)
}

/// Mean softmax cross-entropy of a linear head and its gradient.
///
/// Returns `(loss, ∂loss/∂weight, ∂loss/∂bias)`.
pub fn head_loss_and_gradient(
    features: &Array2<f64>,
    labels: &[usize],
    head: &Head,
) -> Result<(f64, Array2<f64>, Array1<f64>)> {
    let n = features.nrows();
    let k = head.bias.len();
    if n == 0 {
        return Err(Error::param("empty dataset"));
    }
    if labels.len() != n {
        return Err(Error::dim(format!(
            "{n} feature rows but {} labels",
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::param(format!("label {bad} outside 0..{k}")));
    }
    let mut probs = features.dot(&head.weight) + &head.bias;
    let mut loss = 0.0;
    for (mut row, &label) in probs.rows_mut().into_iter().zip(labels) {
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let log_sum = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
        loss += log_sum - row[label];
        row.mapv_inplace(|v| (v - log_sum).exp());
        row[label] -= 1.0;
    }
    let inv_n = 1.0 / n as f64;
    // probs now holds (softmax - onehot)
    let grad_w = features.t().dot(&probs) * inv_n;
    let grad_b = probs.sum_axis(Axis(0)) * inv_n;
    Ok((loss * inv_n, grad_w, grad_b))
}

/// Full-batch gradient descent on the head only.
///
/// Steps are taken in per-feature standardized coordinates and the result is
/// mapped back, so the returned head applies to the raw `features`. The class
/// token carries a large offset shared by every image; without the rescaling
/// a usable step size would be tiny.
pub fn train_head_on_features(
    features: &Array2<f64>,
    labels: &[usize],
    head: &Head,
    epochs: usize,
    lr: f64,
) -> Result<Head> {
    if features.nrows() == 0 {
        return Err(Error::param("empty dataset"));
    }
    let mean = features.mean_axis(Axis(0)).expect("nonempty");
    let scale = features
        .std_axis(Axis(0), 0.0)
        .mapv(|s| if s > 1e-12 { s } else { 1.0 });
    let z = (features - &mean) / &scale;
    // logits = f·w + b = z·(diag(scale)·w) + (b + mean·w)
    let mut h = Head {
        weight: &head.weight * &scale.view().insert_axis(Axis(1)),
        bias: &head.bias + &mean.dot(&head.weight),
    };
    for _ in 0..epochs {
        let (_, gw, gb) = head_loss_and_gradient(&z, labels, &h)?;
        h.weight.scaled_add(-lr, &gw);
        h.bias.scaled_add(-lr, &gb);
    }
    let weight = &h.weight / &scale.view().insert_axis(Axis(1));
    let bias = &h.bias - &mean.dot(&weight);
    Ok(Head { weight, bias })
}

/// Fits the classification head on frozen class-token features. The
/// encoder and both embeddings are left untouched.
pub fn train_linear_head(
    model: &ViTModel,
    data: &Dataset,
    epochs: usize,
    lr: f64,
) -> Result<ViTModel> {
    if data.is_empty() {
        return Err(Error::param("empty dataset"));
    }
    let k = model.hyperparams().num_classes;
    if let Some(&bad) = data.labels.iter().find(|&&l| l >= k) {
        return Err(Error::param(format!("label {bad} outside 0..{k}")));
    }
    let mut out = model.clone();
    if epochs == 0 {
        return Ok(out);
    }
    let feats = class_token_features(model, &data.images)?;
    out.head = train_head_on_features(&feats, &data.labels, &model.head, epochs, lr)?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::keygen::SplitMix64;
    use crate::synth::{two_class_dataset, SyntheticSpec};
    use crate::vit::{init_random_model, Hyperparams};

    fn separable(n: usize, seed: u64) -> (Array2<f64>, Vec<usize>) {
        let mut rng = SplitMix64::new(seed);
        let mut f = Array2::zeros((n, 4));
        let mut labels = Vec::new();
        for i in 0..n {
            let label = i % 2;
            let offset = if label == 0 { -1.0 } else { 1.0 };
            for j in 0..4 {
                f[[i, j]] = rng.next_normal() * 0.5 + if j == 0 { offset * 2.0 } else { 0.0 };
            }
            labels.push(label);
        }
        (f, labels)
    }

    fn zero_head(d: usize, k: usize) -> Head {
        Head {
            weight: Array2::zeros((d, k)),
            bias: Array1::zeros(k),
        }
    }

    #[test]
    fn separable_features_are_learned() {
        let (f, labels) = separable(200, 1);
        let head = train_head_on_features(&f, &labels, &zero_head(4, 2), 200, 0.1).unwrap();
        let logits = f.dot(&head.weight) + &head.bias;
        let hits = logits
            .rows()
            .into_iter()
            .zip(&labels)
            .filter(|(r, &l)| argmax(r.view()) == l)
            .count();
        assert!(hits as f64 / 200.0 >= 0.95);
    }

    #[test]
    fn rescaling_round_trips_the_start_head() {
        let (mut f, labels) = separable(40, 3);
        f.column_mut(1).mapv_inplace(|v| v * 30.0 + 100.0);
        let mut rng = SplitMix64::new(5);
        let head = Head {
            weight: Array2::from_shape_simple_fn((4, 2), || rng.next_normal()),
            bias: Array1::from_shape_simple_fn(2, || rng.next_normal()),
        };
        let back = train_head_on_features(&f, &labels, &head, 0, 0.1).unwrap();
        let diff = (f.dot(&back.weight) + &back.bias) - (f.dot(&head.weight) + &head.bias);
        assert!(diff.iter().all(|d| d.abs() < 1e-9));
    }

    #[test]
    fn large_shared_offset_is_learned() {
        let (mut f, labels) = separable(200, 2);
        f.mapv_inplace(|v| v * 0.05 + 10.0);
        let head = train_head_on_features(&f, &labels, &zero_head(4, 2), 200, 0.5).unwrap();
        let logits = f.dot(&head.weight) + &head.bias;
        let hits = logits
            .rows()
            .into_iter()
            .zip(&labels)
            .filter(|(r, &l)| argmax(r.view()) == l)
            .count();
        assert!(hits >= 190, "{hits}");
    }

    #[test]
    fn zero_epochs_leaves_head() {
        let hp = Hyperparams::new(2, 1, 4, 8, 1, 2, 2).unwrap();
        let m = init_random_model(1, hp).unwrap();
        let data = two_class_dataset(&SyntheticSpec::new(4, 4, 1), 6, 2);
        assert_eq!(train_linear_head(&m, &data, 0, 0.1).unwrap(), m);
    }

    #[test]
    fn only_head_changes() {
        let hp = Hyperparams::new(2, 1, 4, 8, 1, 2, 2).unwrap();
        let m = init_random_model(1, hp).unwrap();
        let data = two_class_dataset(&SyntheticSpec::new(4, 4, 1), 6, 2);
        let t = train_linear_head(&m, &data, 5, 0.1).unwrap();
        assert_ne!(t.head, m.head);
        assert_eq!(t.patch_embed, m.patch_embed);
        assert_eq!(t.pos_embed, m.pos_embed);
        assert_eq!(t.layers, m.layers);
    }

    #[test]
    fn single_class_labels() {
        let hp = Hyperparams::new(2, 1, 4, 8, 1, 2, 2).unwrap();
        let m = init_random_model(1, hp).unwrap();
        let mut data = two_class_dataset(&SyntheticSpec::new(4, 4, 1), 10, 3);
        data.labels.iter_mut().for_each(|l| *l = 1);
        let t = train_linear_head(&m, &data, 50, 0.5).unwrap();
        assert_eq!(accuracy(&t, &data).unwrap(), 1.0);
    }

    #[test]
    fn errors() {
        let hp = Hyperparams::new(2, 1, 4, 8, 1, 2, 2).unwrap();
        let m = init_random_model(1, hp).unwrap();
        let empty = Dataset::new(vec![], vec![]).unwrap();
        assert!(train_linear_head(&m, &empty, 1, 0.1).is_err());
        let mut data = two_class_dataset(&SyntheticSpec::new(4, 4, 1), 2, 3);
        data.labels[0] = 2;
        assert!(train_linear_head(&m, &data, 1, 0.1).is_err());
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let (f, _) = separable(3, 7);
        let labels = [0, 1, 1];
        let mut rng = SplitMix64::new(8);
        let head = Head {
            weight: Array2::from_shape_simple_fn((4, 3), || rng.next_normal()),
            bias: Array1::from_shape_simple_fn(3, || rng.next_normal()),
        };
        let (_, gw, gb) = head_loss_and_gradient(&f, &labels, &head).unwrap();
        let h = 1e-6;
        let loss = |hd: &Head| head_loss_and_gradient(&f, &labels, hd).unwrap().0;
        for idx in ndarray::indices((4, 3)) {
            let (mut plus, mut minus) = (head.clone(), head.clone());
            plus.weight[idx] += h;
            minus.weight[idx] -= h;
            let numeric = (loss(&plus) - loss(&minus)) / (2.0 * h);
            let rel = (numeric - gw[idx]).abs() / gw[idx].abs().max(1e-8);
            assert!(rel < 1e-5, "{idx:?}: {numeric} vs {}", gw[idx]);
        }
        for j in 0..3 {
            let (mut plus, mut minus) = (head.clone(), head.clone());
            plus.bias[j] += h;
            minus.bias[j] -= h;
            let numeric = (loss(&plus) - loss(&minus)) / (2.0 * h);
            assert!((numeric - gb[j]).abs() / gb[j].abs().max(1e-8) < 1e-5);
        }
    }
}
