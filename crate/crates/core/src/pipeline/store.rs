use std::collections::HashMap;
use std::path::Path;

use crate::reshape::reshape_feature;
use crate::tensor::Tensor;
use crate::text::PromptVariant;

use super::{hash64, io_error, Model, PipelineError, Reader, Result};

pub const STORE_MAGIC: &[u8; 12] = b"RECSE-FEAT-1";

#[derive(Debug, Clone, PartialEq)]
pub struct StoreRecord {
    pub source_hash: u64,
    pub mask_pos: usize,
    pub x_star: Vec<f64>,
}

/// Reshaped features keyed by the content hash of the prompted sequence.
///
/// Layout: magic, `l_max: u64`, `count: u64`, then per record
/// `hash: u64, mask_pos: u64, x_star: [f64; l_max]`, all little-endian.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureStore {
    l_max: usize,
    records: Vec<StoreRecord>,
    index: HashMap<u64, usize>,
}

impl FeatureStore {
    pub fn new(l_max: usize) -> Self {
        FeatureStore {
            l_max,
            records: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn l_max(&self) -> usize {
        self.l_max
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> &[StoreRecord] {
        &self.records
    }

    /// Adds a record. The same hash twice is a collision even when the
    /// payloads agree, since the writer should deduplicate first.
    pub fn insert(&mut self, record: StoreRecord) -> Result<()> {
        if record.x_star.len() != self.l_max {
            return Err(PipelineError::Input(format!(
                "feature length {} does not match store l_max {}",
                record.x_star.len(),
                self.l_max
            )));
        }
        if self.index.contains_key(&record.source_hash) {
            return Err(PipelineError::Collision(record.source_hash));
        }
        self.index.insert(record.source_hash, self.records.len());
        self.records.push(record);
        Ok(())
    }

    pub fn lookup(&self, hash: u64) -> Option<&StoreRecord> {
        self.index.get(&hash).map(|&i| &self.records[i])
    }

    /// Reshapes every distinct sentence of `corpus` under prompt A with the
    /// model's current projection.
    pub fn build<S: AsRef<str>>(corpus: &[S], model: &Model) -> Result<Self> {
        let scale = model.id_scale();
        let mut store = FeatureStore::new(model.config.l_max);
        for s in corpus {
            let seq = model.prompt_sequence(s.as_ref(), PromptVariant::A)?;
            let hash = seq.content_hash();
            if store.lookup(hash).is_some() {
                continue;
            }
            let feature = reshape_feature(&seq, &model.projection, scale)?;
            store.insert(StoreRecord {
                source_hash: hash,
                mask_pos: seq.mask_pos.unwrap_or(0),
                x_star: feature.x_star.to_vec(),
            })?;
        }
        Ok(store)
    }

    /// Stacks the features for `hashes` into a `[B × l_max]` tensor.
    /// `sentences` is only used to name a missing entry.
    pub fn batch_tensor(&self, hashes: &[u64], sentences: &[&str]) -> Result<Tensor> {
        let mut data = Vec::with_capacity(hashes.len() * self.l_max);
        for (i, &h) in hashes.iter().enumerate() {
            let rec = self.lookup(h).ok_or_else(|| PipelineError::Staging {
                hash: h,
                sentence: sentences.get(i).map(|s| s.to_string()).unwrap_or_default(),
            })?;
            data.extend_from_slice(&rec.x_star);
        }
        Ok(Tensor::matrix(hashes.len(), self.l_max, data)?)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(28 + self.records.len() * (16 + 8 * self.l_max));
        out.extend_from_slice(STORE_MAGIC);
        out.extend_from_slice(&(self.l_max as u64).to_le_bytes());
        out.extend_from_slice(&(self.records.len() as u64).to_le_bytes());
        for r in &self.records {
            out.extend_from_slice(&r.source_hash.to_le_bytes());
            out.extend_from_slice(&(r.mask_pos as u64).to_le_bytes());
            for v in &r.x_star {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let corrupt = |detail: String| PipelineError::Corruption {
            path: path.to_path_buf(),
            detail,
        };
        let mut r = Reader::new(bytes);
        if r.take(STORE_MAGIC.len()) != Some(STORE_MAGIC.as_slice()) {
            return Err(PipelineError::Format {
                path: path.to_path_buf(),
                expected: "feature store",
            });
        }
        let truncated = |r: &Reader| corrupt(format!("truncated at byte {}", r.position()));
        let l_max = r.u64().ok_or_else(|| truncated(&r))? as usize;
        let count = r.u64().ok_or_else(|| truncated(&r))? as usize;
        let record_bytes = l_max
            .checked_mul(8)
            .and_then(|n| n.checked_add(16))
            .ok_or_else(|| corrupt(format!("implausible l_max {l_max}")))?;
        if count.checked_mul(record_bytes) != Some(r.remaining()) {
            return Err(corrupt(format!(
                "{} payload bytes for {count} records of length {l_max}",
                r.remaining()
            )));
        }
        let mut store = FeatureStore::new(l_max);
        for _ in 0..count {
            let source_hash = r.u64().ok_or_else(|| truncated(&r))?;
            let mask_pos = r.u64().ok_or_else(|| truncated(&r))? as usize;
            let x_star = (0..l_max)
                .map(|_| r.f64().ok_or_else(|| truncated(&r)))
                .collect::<Result<Vec<_>>>()?;
            store.insert(StoreRecord {
                source_hash,
                mask_pos,
                x_star,
            })?;
        }
        Ok(store)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(io_error(path))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(io_error(path))?;
        Self::from_bytes(&bytes, path)
    }

    /// Checksum of the serialized store.
    pub fn checksum(&self) -> u64 {
        hash64(&self.to_bytes())
    }
}

/// Stage 1: reshape the corpus and write the store to `path`.
pub fn stage1_build_store<S: AsRef<str>>(corpus: &[S], model: &Model, path: &Path) -> Result<FeatureStore> {
    let store = FeatureStore::build(corpus, model)?;
    store.write(path)?;
    log::info!("wrote {} reshaped features to {}", store.len(), path.display());
    Ok(store)
}
