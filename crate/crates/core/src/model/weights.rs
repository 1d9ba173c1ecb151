//! Parameter naming, initialization and validation for the denoiser,
//! extractor and fusion stores.

use crate::error::{Error, Result};
use crate::tensor::{ParameterStore, Scalar, SeededRng, Tensor};

use super::config::DenoiserConfig;

pub const DENOISER_TAG: &str = "denoiser";
pub const EXTRACTOR_TAG: &str = "extractor";
pub const FUSION_TAG: &str = "fusion";

pub fn block_key(i: usize, leaf: &str) -> String {
    format!("blocks.{i:02}.{leaf}")
}

pub fn fusion_key(i: usize, leaf: &str) -> String {
    format!("fusion.{i:02}.{leaf}")
}

/// Expected `(name, shape)` of every denoiser parameter.
pub fn denoiser_layout(cfg: &DenoiserConfig) -> Vec<(String, Vec<usize>)> {
    let d = cfg.model_dim;
    let f = cfg.ffn_mult * d;
    let mut out: Vec<(String, Vec<usize>)> = vec![
        ("patch.w".into(), vec![cfg.patch_features(), d]),
        ("patch.b".into(), vec![d]),
        ("pos".into(), vec![cfg.tokens_at(0), d]),
        ("time.w1".into(), vec![cfg.time_dim, d]),
        ("time.b1".into(), vec![d]),
        ("time.w2".into(), vec![d, d]),
        ("time.b2".into(), vec![d]),
        ("text.embed".into(), vec![cfg.text_vocab_size, d]),
        ("head.ln.g".into(), vec![d]),
        ("head.ln.b".into(), vec![d]),
        ("head.w".into(), vec![d, cfg.patch_features()]),
        ("head.b".into(), vec![cfg.patch_features()]),
    ];
    for b in 0..cfg.block_count() {
        let mut add = |leaf: &str, shape: Vec<usize>| out.push((block_key(b, leaf), shape));
        add("time.w", vec![d, d]);
        add("time.b", vec![d]);
        for ln in ["ln1", "ln2", "ln3"] {
            add(&format!("{ln}.g"), vec![d]);
            add(&format!("{ln}.b"), vec![d]);
        }
        for part in ["attn", "cross"] {
            for w in ["w_q", "w_k", "w_v", "w_o"] {
                add(&format!("{part}.{w}"), vec![d, d]);
            }
            add(&format!("{part}.b_o"), vec![d]);
        }
        add("ffn.w1", vec![d, f]);
        add("ffn.b1", vec![f]);
        add("ffn.w2", vec![f, d]);
        add("ffn.b2", vec![d]);
    }
    for level in 0..cfg.levels - 1 {
        out.push((format!("merge.{level:02}.w"), vec![4 * d, d]));
        out.push((format!("merge.{level:02}.b"), vec![d]));
        out.push((format!("split.{level:02}.w"), vec![d, 4 * d]));
        out.push((format!("split.{level:02}.b"), vec![4 * d]));
    }
    out
}

pub fn fusion_layout(cfg: &DenoiserConfig) -> Vec<(String, Vec<usize>)> {
    let d = cfg.model_dim;
    (0..cfg.block_count())
        .flat_map(|b| [(fusion_key(b, "w_kg"), vec![d, d]), (fusion_key(b, "w_vg"), vec![d, d])])
        .collect()
}

fn leaf_of(name: &str) -> &str {
    name.rsplit('.').next().unwrap_or(name)
}

/// Fresh denoiser weights. Linear maps get `N(0, 1/fan_in)`, residual output
/// projections are scaled down by the block count, norms start at identity.
pub fn init_denoiser<S: Scalar>(cfg: &DenoiserConfig, rng: &mut SeededRng) -> Result<ParameterStore<S>> {
    cfg.validate()?;
    let mut store = ParameterStore::new(DENOISER_TAG);
    let residual = (2.0 * cfg.block_count() as f64).sqrt();
    for (name, shape) in denoiser_layout(cfg) {
        let leaf = leaf_of(&name);
        let value = if name.ends_with(".g") {
            Tensor::full(&shape, S::one())
        } else if shape.len() == 1 || name == "head.w" {
            Tensor::zeros(&shape)
        } else if name == "pos" {
            rng.normal_tensor_scaled(&shape, 0.02)
        } else if name == "text.embed" {
            rng.normal_tensor_scaled(&shape, 1.0)
        } else {
            let std = 1.0 / (shape[0] as f64).sqrt();
            let std = if leaf == "w_o" || (leaf == "w2" && name.contains("ffn")) {
                std / residual
            } else {
                std
            };
            rng.normal_tensor_scaled(&shape, std)
        };
        store.insert(name, value)?;
    }
    Ok(store)
}

/// Garment extractor as a deep copy of the denoiser, and fusion weights with
/// `W_KG = W_K`, `W_VG = 0`.
pub fn init_extractor_from_denoiser<S: Scalar>(
    cfg: &DenoiserConfig,
    denoiser: &ParameterStore<S>,
) -> Result<(ParameterStore<S>, ParameterStore<S>)> {
    validate_denoiser(cfg, denoiser)?;
    let mut extractor = ParameterStore::new(EXTRACTOR_TAG);
    for (name, p) in denoiser.iter() {
        // Tensor buffers are immutable and replaced wholesale on update, so
        // sharing them here is a deep copy in effect.
        extractor.insert(name, p.value.clone())?;
    }
    let mut fusion = ParameterStore::new(FUSION_TAG);
    for b in 0..cfg.block_count() {
        let w_k = denoiser.value(&block_key(b, "attn.w_k"))?;
        fusion.insert(fusion_key(b, "w_kg"), w_k.detach())?;
        fusion.insert(fusion_key(b, "w_vg"), Tensor::zeros(w_k.shape()))?;
    }
    Ok((extractor, fusion))
}

fn check_layout<S: Scalar>(what: &str, layout: Vec<(String, Vec<usize>)>, store: &ParameterStore<S>) -> Result<()> {
    if store.len() != layout.len() {
        return Err(Error::Architecture(format!(
            "{what} has {} parameters, config expects {}",
            store.len(),
            layout.len()
        )));
    }
    for (name, shape) in layout {
        let v = store
            .value(&name)
            .map_err(|_| Error::Architecture(format!("{what} lacks parameter {name}")))?;
        if v.shape() != shape.as_slice() {
            return Err(Error::Architecture(format!(
                "{what} parameter {name} has shape {:?}, config expects {shape:?}",
                v.shape()
            )));
        }
    }
    Ok(())
}

pub fn validate_denoiser<S: Scalar>(cfg: &DenoiserConfig, store: &ParameterStore<S>) -> Result<()> {
    check_layout("denoiser", denoiser_layout(cfg), store)
}

pub fn validate_fusion<S: Scalar>(cfg: &DenoiserConfig, store: &ParameterStore<S>) -> Result<()> {
    check_layout("fusion", fusion_layout(cfg), store)
}

/// Extractor and fusion weights in one store, as saved in the plug-in
/// checkpoint.
pub fn pack_plugin<S: Scalar>(extractor: &ParameterStore<S>, fusion: &ParameterStore<S>) -> Result<ParameterStore<S>> {
    let mut out = ParameterStore::new("plugin");
    out.absorb("extractor.", extractor)?;
    out.absorb("", fusion)?;
    Ok(out)
}

pub fn unpack_plugin<S: Scalar>(
    cfg: &DenoiserConfig,
    plugin: &ParameterStore<S>,
) -> Result<(ParameterStore<S>, ParameterStore<S>)> {
    let extractor = plugin.strip_prefix("extractor.", EXTRACTOR_TAG);
    let mut fusion = ParameterStore::new(FUSION_TAG);
    for (name, p) in plugin.iter().filter(|(n, _)| n.starts_with("fusion.")) {
        fusion.insert(name, p.value.clone())?;
    }
    check_layout("extractor", denoiser_layout(cfg), &extractor)?;
    validate_fusion(cfg, &fusion)?;
    Ok((extractor, fusion))
}
