//! Two-stage training.
//!
//! Stage 1 reshapes every corpus sentence once and writes the results to a
//! [`FeatureStore`]. Stage 2 trains the encoder; in staged mode each step
//! runs four phases (pair forward, reshaped forward, pair backward,
//! reshaped backward) so that at most one branch's graph is alive at a
//! time. Joint mode keeps all graphs alive for a single backward pass and
//! exists for comparison.

mod checkpoint;
mod model;
mod optim;
mod store;
mod train;

use std::path::PathBuf;

use thiserror::Error;

use crate::encoder::EncoderError;
use crate::eval::EvalError;
use crate::tensor::TensorError;
use crate::text::TextError;

pub use checkpoint::{
    checkpoint_bytes, checkpoint_from_bytes, load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC,
};
pub use model::{training_vocab, Model};
pub use optim::{Optimizer, OptimizerKind};
pub use store::{stage1_build_store, FeatureStore, StoreRecord, STORE_MAGIC};
pub use train::{
    accumulate_gradients, prepare_corpus, train, train_step, PhasePeaks, PreparedSentence, StepMode,
    StepSeeds, StepTrace,
    TrainConfig, TrainOutcome, METRICS_HEADER,
};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{}: not a {expected} file", path.display())]
    Format { path: PathBuf, expected: &'static str },
    #[error("{}: corrupt: {detail}", path.display())]
    Corruption { path: PathBuf, detail: String },
    #[error("feature store hash collision on {0:016x}")]
    Collision(u64),
    #[error("no stored feature for sentence {hash:016x} ({sentence:?}); rebuild the store")]
    Staging { hash: u64, sentence: String },
    #[error("non-finite loss at step {step}: {detail}")]
    NonFinite { step: usize, detail: String },
    #[error("invalid input: {0}")]
    Input(String),
    #[error(transparent)]
    Text(#[from] TextError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Eval(#[from] Box<EvalError>),
}

impl From<EvalError> for PipelineError {
    fn from(e: EvalError) -> Self {
        PipelineError::Eval(Box::new(e))
    }
}

pub type Result<T, E = PipelineError> = std::result::Result<T, E>;

pub(crate) fn io_error(path: &std::path::Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// First eight bytes of SHA-256, little-endian.
pub(crate) fn hash64(bytes: &[u8]) -> u64 {
    use sha2::{Digest, Sha256};
    let d = Sha256::digest(bytes);
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

/// Little-endian cursor over a byte slice; short reads are `None`.
pub(crate) struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        Reader { bytes, pos: 0 }
    }

    pub(crate) fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let end = self.pos.checked_add(n)?;
        let out = self.bytes.get(self.pos..end)?;
        self.pos = end;
        Some(out)
    }

    pub(crate) fn u64(&mut self) -> Option<u64> {
        self.take(8).map(|b| u64::from_le_bytes(b.try_into().expect("8 bytes")))
    }

    pub(crate) fn f64(&mut self) -> Option<f64> {
        self.u64().map(f64::from_bits)
    }

    pub(crate) fn position(&self) -> usize {
        self.pos
    }

    pub(crate) fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }
}
