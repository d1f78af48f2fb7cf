//! In-process federated learning: clients fit the classification head on
//! their own shard, the server averages the models every round, and the
//! integrated model is encrypted per client only after training ends.

use rayon::prelude::*;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::cipher::encrypt_model;
use crate::error::{Error, Result};
use crate::keygen::{generate_key, KeyGeometry, KeyMaterial, MatrixMode};
use crate::tensorio::encode_blobs;
use crate::vit::{
    head_loss_and_gradient, model_from_blobs, model_to_blobs, train_head_on_features, Dataset,
    ViTModel,
};

#[derive(Debug, Clone)]
pub struct ClientState {
    pub id: usize,
    pub model: ViTModel,
    pub shard: Dataset,
    /// Assigned by [`finalize_with_encryption`]; `None` while training.
    pub key: Option<KeyMaterial>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RoundLog {
    pub round: usize,
    /// Training loss of each client after its local update, by client id.
    pub client_losses: Vec<f64>,
    /// SHA-256 of the integrated model's `VTBT` encoding.
    pub checksum: String,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FederationConfig {
    pub rounds: usize,
    pub local_epochs: usize,
    pub lr: f64,
}

/// Element-wise mean of every weight tensor, reduced in slice order.
///
/// The mean is taken as `x₀ + Σ(xᵢ - x₀) / n`, so a tensor that is the same
/// on every client (the frozen encoder) comes back bit-identical.
pub fn fedavg(models: &[ViTModel]) -> Result<ViTModel> {
    let first = models
        .first()
        .ok_or_else(|| Error::param("fedavg needs at least one model"))?;
    let hp = *first.hyperparams();
    if let Some(bad) = models.iter().position(|m| *m.hyperparams() != hp) {
        return Err(Error::dim(format!(
            "model {bad} has different hyperparameters from model 0"
        )));
    }
    let all: Vec<_> = models.iter().map(model_to_blobs).collect();
    let n = models.len() as f64;
    let mut avg = all[0].clone();
    for (k, blob) in avg.iter_mut().enumerate() {
        for (j, v) in blob.data.iter_mut().enumerate() {
            let base = *v;
            let dev: f64 = all[1..].iter().map(|m| m[k].data[j] - base).sum();
            *v = base + dev / n;
        }
    }
    model_from_blobs(hp, avg)
}

pub fn model_checksum(model: &ViTModel) -> String {
    let bytes = encode_blobs(&model_to_blobs(model)).expect("model blobs are valid");
    format!("{:x}", Sha256::digest(&bytes))
}

/// Runs `config.rounds` rounds starting from `global`.
///
/// Each round every client copies the global model, fits its head on its
/// shard for `local_epochs` full-batch steps, and the server replaces the
/// global model with [`fedavg`] of the client models in id order. Clients
/// train in parallel; the result does not depend on scheduling.
pub fn run_federation(
    global: &ViTModel,
    clients: &mut [ClientState],
    config: FederationConfig,
) -> Result<(ViTModel, Vec<RoundLog>)> {
    if clients.is_empty() {
        return Err(Error::param("federation needs at least one client"));
    }
    if clients.iter().any(|c| c.shard.is_empty()) {
        return Err(Error::param("every client needs a non-empty shard"));
    }
    clients.sort_by_key(|c| c.id);
    // The encoder is frozen and shared, so each shard's class-token
    // features are computed once.
    let feats = clients
        .par_iter()
        .map(|c| crate::vit::class_token_features(global, &c.shard.images))
        .collect::<Result<Vec<_>>>()?;

    let mut global = global.clone();
    let mut logs = Vec::with_capacity(config.rounds);
    for round in 0..config.rounds {
        let updates = clients
            .par_iter()
            .zip(&feats)
            .map(|(client, f)| {
                let head = train_head_on_features(
                    f,
                    &client.shard.labels,
                    &global.head,
                    config.local_epochs,
                    config.lr,
                )?;
                let (loss, _, _) = head_loss_and_gradient(f, &client.shard.labels, &head)?;
                let mut local = global.clone();
                local.head = head;
                Ok((local, loss))
            })
            .collect::<Result<Vec<_>>>()?;
        let (locals, losses): (Vec<_>, Vec<_>) = updates.into_iter().unzip();
        global = fedavg(&locals)?;
        for (client, local) in clients.iter_mut().zip(locals) {
            client.model = local;
        }
        logs.push(RoundLog {
            round,
            client_losses: losses,
            checksum: model_checksum(&global),
        });
    }
    Ok((global, logs))
}

/// One fresh key per seed and a copy of `global` encrypted with it.
/// Training is not repeated, so keys can be rotated at any time.
pub fn finalize_with_encryption(
    global: &ViTModel,
    client_seeds: &[u64],
    mode: MatrixMode,
) -> Result<Vec<(ViTModel, KeyMaterial)>> {
    let mut sorted = client_seeds.to_vec();
    sorted.sort_unstable();
    if sorted.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::param("client key seeds must be distinct"));
    }
    let hp = global.hyperparams();
    let geometry = KeyGeometry::new(hp.block_size, hp.channels, hp.num_patches)?;
    client_seeds
        .iter()
        .map(|&seed| {
            let key = generate_key(seed, geometry, mode)?;
            Ok((encrypt_model(global, &key)?, key))
        })
        .collect()
}

/// Line-delimited JSON, one object per round.
pub fn round_logs_to_jsonl(logs: &[RoundLog]) -> Result<String> {
    let mut out = String::new();
    for log in logs {
        out.push_str(&serde_json::to_string(log)?);
        out.push('\n');
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::keygen::SplitMix64;
    use crate::synth::{two_class_dataset, SyntheticSpec};
    use crate::vit::{init_random_model, train_linear_head, Hyperparams};

    fn hp() -> Hyperparams {
        Hyperparams::new(2, 1, 4, 8, 1, 2, 2).unwrap()
    }

    fn random_heads(seed: u64, count: usize) -> Vec<ViTModel> {
        let base = init_random_model(1, hp()).unwrap();
        let mut rng = SplitMix64::new(seed);
        (0..count)
            .map(|_| {
                let mut m = base.clone();
                m.head.weight.mapv_inplace(|_| rng.next_normal());
                m.head.bias.mapv_inplace(|_| rng.next_normal());
                m
            })
            .collect()
    }

    #[test]
    fn single_model_unchanged() {
        let m = random_heads(1, 1);
        assert_eq!(fedavg(&m).unwrap(), m[0]);
    }

    #[test]
    fn opposite_heads_cancel() {
        let mut m = random_heads(2, 2);
        m[1].head.weight = -&m[0].head.weight;
        m[1].head.bias = -&m[0].head.bias;
        let avg = fedavg(&m).unwrap();
        assert!(avg.head.weight.iter().all(|&v| v == 0.0));
        assert!(avg.head.bias.iter().all(|&v| v == 0.0));
        assert_eq!(avg.layers, m[0].layers);
    }

    #[test]
    fn three_way_mean() {
        let m = random_heads(3, 3);
        let avg = fedavg(&m).unwrap();
        for idx in ndarray::indices(avg.head.weight.dim()) {
            let want =
                (m[0].head.weight[idx] + m[1].head.weight[idx] + m[2].head.weight[idx]) / 3.0;
            assert!((avg.head.weight[idx] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn errors() {
        assert!(fedavg(&[]).is_err());
        let a = init_random_model(1, hp()).unwrap();
        let b = init_random_model(1, Hyperparams::new(2, 1, 4, 8, 1, 2, 3).unwrap()).unwrap();
        assert!(fedavg(&[a, b]).is_err());
    }

    #[test]
    fn identical_shards_match_single_client() {
        let global = init_random_model(4, hp()).unwrap();
        let shard = two_class_dataset(&SyntheticSpec::new(4, 4, 1), 20, 5);
        let mut clients: Vec<_> = (0..3)
            .map(|id| ClientState {
                id,
                model: global.clone(),
                shard: shard.clone(),
                key: None,
            })
            .collect();
        let cfg = FederationConfig {
            rounds: 1,
            local_epochs: 10,
            lr: 0.1,
        };
        let (fed, logs) = run_federation(&global, &mut clients, cfg).unwrap();
        let single = train_linear_head(&global, &shard, 10, 0.1).unwrap();
        let diff = (&fed.head.weight - &single.head.weight)
            .iter()
            .fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(diff < 1e-10);
        assert_eq!(logs.len(), 1);
        assert_eq!(logs[0].client_losses.len(), 3);
    }

    #[test]
    fn zero_rounds_returns_initial() {
        let global = init_random_model(4, hp()).unwrap();
        let mut clients = vec![ClientState {
            id: 0,
            model: global.clone(),
            shard: two_class_dataset(&SyntheticSpec::new(4, 4, 1), 4, 5),
            key: None,
        }];
        let cfg = FederationConfig {
            rounds: 0,
            local_epochs: 1,
            lr: 0.1,
        };
        let (fed, logs) = run_federation(&global, &mut clients, cfg).unwrap();
        assert_eq!(fed, global);
        assert!(logs.is_empty());
    }

    #[test]
    fn finalize_gives_distinct_keys() {
        let global = init_random_model(4, hp()).unwrap();
        let out = finalize_with_encryption(&global, &[1, 2, 3], MatrixMode::Orthogonal).unwrap();
        assert_eq!(out.len(), 3);
        assert_ne!(out[0].1, out[1].1);
        assert!(
            finalize_with_encryption(&global, &[], MatrixMode::Orthogonal)
                .unwrap()
                .is_empty()
        );
        assert!(finalize_with_encryption(&global, &[1, 1], MatrixMode::Orthogonal).is_err());
    }

    #[test]
    fn jsonl_lines() {
        let logs = vec![
            RoundLog {
                round: 0,
                client_losses: vec![0.5],
                checksum: "ab".into(),
            };
            2
        ];
        let text = round_logs_to_jsonl(&logs).unwrap();
        assert_eq!(text.lines().count(), 2);
        assert_eq!(
            text.lines().next().unwrap(),
            r#"{"round":0,"client_losses":[0.5],"checksum":"ab"}"#
        );
    }
}
