//! Contrastive sentence embeddings with reshaped input features, trained in
//! stages so the extra reshaped view costs almost no extra memory.

pub mod cli;
pub mod encoder;
pub mod eval;
pub mod objective;
pub mod pipeline;
pub mod reshape;
pub mod tensor;
pub mod text;
