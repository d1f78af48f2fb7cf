use std::collections::HashMap;
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2};

use super::{Hyperparams, ViTModel};
use crate::error::{Error, Result};
use crate::tensorio::{load_blobs, save_blobs, write_atomic, TensorBlob};

fn blob2(name: String, m: &Array2<f64>) -> TensorBlob {
    TensorBlob {
        name,
        dims: vec![m.nrows(), m.ncols()],
        data: m.iter().copied().collect(),
    }
}

fn blob1(name: String, v: &Array1<f64>) -> TensorBlob {
    TensorBlob {
        name,
        dims: vec![v.len()],
        data: v.to_vec(),
    }
}

/// Named blobs in a fixed order: `patch_embed`, `pos_embed`, `class_token`,
/// `encoder.<i>.<name>`, `head.weight`, `head.bias`.
pub fn model_to_blobs(model: &ViTModel) -> Vec<TensorBlob> {
    let mut out = vec![
        blob2("patch_embed".into(), &model.patch_embed),
        blob2("pos_embed".into(), &model.pos_embed),
        blob1("class_token".into(), &model.class_token),
    ];
    for (i, l) in model.layers.iter().enumerate() {
        let p = |name: &str| format!("encoder.{i}.{name}");
        out.extend([
            blob1(p("ln1.scale"), &l.ln1.scale),
            blob1(p("ln1.shift"), &l.ln1.shift),
            blob2(p("attn.wq"), &l.wq),
            blob2(p("attn.wk"), &l.wk),
            blob2(p("attn.wv"), &l.wv),
            blob2(p("attn.wo"), &l.wo),
            blob1(p("ln2.scale"), &l.ln2.scale),
            blob1(p("ln2.shift"), &l.ln2.shift),
            blob2(p("mlp.w1"), &l.mlp_w1),
            blob1(p("mlp.b1"), &l.mlp_b1),
            blob2(p("mlp.w2"), &l.mlp_w2),
            blob1(p("mlp.b2"), &l.mlp_b2),
        ]);
    }
    out.push(blob2("head.weight".into(), &model.head.weight));
    out.push(blob1("head.bias".into(), &model.head.bias));
    out
}

pub fn model_from_blobs(hyperparams: Hyperparams, blobs: Vec<TensorBlob>) -> Result<ViTModel> {
    let mut model = ViTModel::zeros(hyperparams)?;
    let mut by_name: HashMap<String, TensorBlob> = HashMap::new();
    for b in blobs {
        if by_name.contains_key(&b.name) {
            return Err(Error::Format(format!("duplicate blob {:?}", b.name)));
        }
        by_name.insert(b.name.clone(), b);
    }
    let mut take = |name: &str, dims: &[usize]| -> Result<Vec<f64>> {
        let b = by_name
            .remove(name)
            .ok_or_else(|| Error::Format(format!("model container lacks blob {name:?}")))?;
        if b.dims != dims {
            return Err(Error::dim(format!(
                "blob {name:?} has dims {:?}, expected {dims:?}",
                b.dims
            )));
        }
        Ok(b.data)
    };
    let mut fill2 = |name: String, m: &mut Array2<f64>| -> Result<()> {
        let (r, c) = m.dim();
        *m = Array2::from_shape_vec((r, c), take(&name, &[r, c])?).unwrap();
        Ok(())
    };
    fill2("patch_embed".into(), &mut model.patch_embed)?;
    fill2("pos_embed".into(), &mut model.pos_embed)?;
    for (i, l) in model.layers.iter_mut().enumerate() {
        fill2(format!("encoder.{i}.attn.wq"), &mut l.wq)?;
        fill2(format!("encoder.{i}.attn.wk"), &mut l.wk)?;
        fill2(format!("encoder.{i}.attn.wv"), &mut l.wv)?;
        fill2(format!("encoder.{i}.attn.wo"), &mut l.wo)?;
        fill2(format!("encoder.{i}.mlp.w1"), &mut l.mlp_w1)?;
        fill2(format!("encoder.{i}.mlp.w2"), &mut l.mlp_w2)?;
    }
    fill2("head.weight".into(), &mut model.head.weight)?;

    let mut fill1 = |name: String, v: &mut Array1<f64>| -> Result<()> {
        *v = Array1::from(take(&name, &[v.len()])?);
        Ok(())
    };
    fill1("class_token".into(), &mut model.class_token)?;
    for (i, l) in model.layers.iter_mut().enumerate() {
        fill1(format!("encoder.{i}.ln1.scale"), &mut l.ln1.scale)?;
        fill1(format!("encoder.{i}.ln1.shift"), &mut l.ln1.shift)?;
        fill1(format!("encoder.{i}.ln2.scale"), &mut l.ln2.scale)?;
        fill1(format!("encoder.{i}.ln2.shift"), &mut l.ln2.shift)?;
        fill1(format!("encoder.{i}.mlp.b1"), &mut l.mlp_b1)?;
        fill1(format!("encoder.{i}.mlp.b2"), &mut l.mlp_b2)?;
    }
    fill1("head.bias".into(), &mut model.head.bias)?;

    if let Some(extra) = by_name.keys().min() {
        return Err(Error::Format(format!("unexpected blob {extra:?}")));
    }
    Ok(model)
}

/// `model.vtbt` → `model.vtbt.json`.
pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

/// Writes the weight container and its hyperparameter sidecar.
pub fn save_model(model: &ViTModel, path: &Path) -> Result<()> {
    model.validate()?;
    save_blobs(&model_to_blobs(model), path)?;
    let mut json = serde_json::to_string_pretty(model.hyperparams())?;
    json.push('\n');
    write_atomic(&sidecar_path(path), json.as_bytes())
}

pub fn load_model(path: &Path) -> Result<ViTModel> {
    let side = sidecar_path(path);
    let text = std::fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
    let hp: Hyperparams = serde_json::from_str(&text)?;
    hp.validate()?;
    model_from_blobs(hp, load_blobs(path)?)
}
