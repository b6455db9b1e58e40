//! Checkpoint layout, little-endian throughout:
//!
//! ```text
//! magic "RECSE-CKPT-1"
//! config_len: u64, config: UTF-8 `key=value` lines
//! param_count: u64
//! per param: name_len: u64, name, ndim: u64, dims: [u64; ndim], values: [f64]
//! checksum: u64   (hash of everything after the magic)
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use crate::encoder::EncoderConfig;
use crate::tensor::{SeededRng, Tensor};
use crate::text::Vocab;

use super::{hash64, io_error, Model, PipelineError, Reader, Result};

pub const CHECKPOINT_MAGIC: &[u8; 12] = b"RECSE-CKPT-1";

fn config_block(model: &Model) -> String {
    let c = &model.config;
    format!(
        "d_model={}\nn_layers={}\nn_heads={}\nd_ff={}\nl_max={}\ndropout_rate={}\nnormalize_ids={}\nvocab={}\n",
        c.d_model,
        c.n_layers,
        c.n_heads,
        c.d_ff,
        c.l_max,
        c.dropout_rate,
        model.normalize_ids,
        model.vocab.tokens().join(" ")
    )
}

pub fn checkpoint_bytes(model: &Model) -> Vec<u8> {
    let mut body = Vec::new();
    let config = config_block(model);
    body.extend_from_slice(&(config.len() as u64).to_le_bytes());
    body.extend_from_slice(config.as_bytes());
    let params = model.params();
    body.extend_from_slice(&(params.len() as u64).to_le_bytes());
    for (_, p) in params {
        body.extend_from_slice(&(p.name().len() as u64).to_le_bytes());
        body.extend_from_slice(p.name().as_bytes());
        body.extend_from_slice(&(p.shape().len() as u64).to_le_bytes());
        for d in p.shape() {
            body.extend_from_slice(&(*d as u64).to_le_bytes());
        }
        for v in p.value().data() {
            body.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut out = CHECKPOINT_MAGIC.to_vec();
    out.extend_from_slice(&body);
    out.extend_from_slice(&hash64(&body).to_le_bytes());
    out
}

pub fn save_checkpoint(model: &Model, path: &Path) -> Result<()> {
    std::fs::write(path, checkpoint_bytes(model)).map_err(io_error(path))
}

pub fn load_checkpoint(path: &Path) -> Result<Model> {
    let bytes = std::fs::read(path).map_err(io_error(path))?;
    checkpoint_from_bytes(&bytes, path)
}

pub fn checkpoint_from_bytes(bytes: &[u8], path: &Path) -> Result<Model> {
    let corrupt = |detail: String| PipelineError::Corruption {
        path: path.to_path_buf(),
        detail,
    };
    if bytes.get(..CHECKPOINT_MAGIC.len()) != Some(CHECKPOINT_MAGIC.as_slice()) {
        return Err(PipelineError::Format {
            path: path.to_path_buf(),
            expected: "checkpoint",
        });
    }
    let rest = &bytes[CHECKPOINT_MAGIC.len()..];
    if rest.len() < 8 {
        return Err(corrupt("truncated before checksum".into()));
    }
    let (body, tail) = rest.split_at(rest.len() - 8);
    let stored = u64::from_le_bytes(tail.try_into().expect("8 bytes"));
    if hash64(body) != stored {
        return Err(corrupt("checksum mismatch".into()));
    }

    let mut r = Reader::new(body);
    let truncated = |r: &Reader| corrupt(format!("truncated at byte {}", r.position()));
    let config_len = r.u64().ok_or_else(|| truncated(&r))? as usize;
    let config = r.take(config_len).ok_or_else(|| truncated(&r))?;
    let config = std::str::from_utf8(config).map_err(|e| corrupt(format!("config block: {e}")))?;
    let mut model = model_from_config(config).map_err(corrupt)?;

    let count = r.u64().ok_or_else(|| truncated(&r))? as usize;
    let mut blobs = BTreeMap::new();
    for _ in 0..count {
        let name_len = r.u64().ok_or_else(|| truncated(&r))? as usize;
        let name = r.take(name_len).ok_or_else(|| truncated(&r))?;
        let name = String::from_utf8(name.to_vec()).map_err(|e| corrupt(format!("param name: {e}")))?;
        let ndim = r.u64().ok_or_else(|| truncated(&r))? as usize;
        let shape = (0..ndim)
            .map(|_| r.u64().map(|d| d as usize).ok_or_else(|| truncated(&r)))
            .collect::<Result<Vec<_>>>()?;
        let numel = shape
            .iter()
            .try_fold(1usize, |a, d| a.checked_mul(*d))
            .filter(|n| n.checked_mul(8).is_some_and(|b| b <= r.remaining()))
            .ok_or_else(|| truncated(&r))?;
        let values = (0..numel)
            .map(|_| r.f64().ok_or_else(|| truncated(&r)))
            .collect::<Result<Vec<_>>>()?;
        blobs.insert(name, (shape, values));
    }
    if r.remaining() != 0 {
        return Err(corrupt(format!("{} trailing bytes", r.remaining())));
    }

    for (_, p) in model.params_mut() {
        let (shape, values) = blobs
            .remove(p.name())
            .ok_or_else(|| corrupt(format!("missing parameter {}", p.name())))?;
        if shape != p.shape() {
            return Err(corrupt(format!(
                "parameter {} has shape {shape:?}, expected {:?}",
                p.name(),
                p.shape()
            )));
        }
        *p = crate::tensor::Param::new(p.name().to_string(), Tensor::new(shape, values)?);
    }
    if let Some(extra) = blobs.keys().next() {
        return Err(corrupt(format!("unexpected parameter {extra}")));
    }
    Ok(model)
}

fn model_from_config(text: &str) -> Result<Model, String> {
    let mut kv = BTreeMap::new();
    for line in text.lines().filter(|l| !l.is_empty()) {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| format!("config line without '=': {line:?}"))?;
        kv.insert(k, v);
    }
    fn get<T: std::str::FromStr>(kv: &BTreeMap<&str, &str>, key: &str) -> Result<T, String> {
        kv.get(key)
            .ok_or_else(|| format!("config missing {key}"))?
            .parse()
            .map_err(|_| format!("config value for {key} does not parse"))
    }
    let config = EncoderConfig {
        d_model: get(&kv, "d_model")?,
        n_layers: get(&kv, "n_layers")?,
        n_heads: get(&kv, "n_heads")?,
        d_ff: get(&kv, "d_ff")?,
        l_max: get(&kv, "l_max")?,
        dropout_rate: get(&kv, "dropout_rate")?,
    };
    config.validate().map_err(|e| e.to_string())?;
    let normalize_ids: bool = get(&kv, "normalize_ids")?;
    let tokens = kv
        .get("vocab")
        .ok_or("config missing vocab")?
        .split(' ')
        .map(str::to_string)
        .collect();
    let vocab = Vocab::from_token_list(tokens)?;
    Model::init(config, vocab, normalize_ids, &SeededRng::new(0)).map_err(|e| e.to_string())
}
