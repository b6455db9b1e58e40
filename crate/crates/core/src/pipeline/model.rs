use crate::encoder::{self, EncoderConfig, EncoderParams, ParamGroup};
use crate::reshape::{IdScale, ProjectionParams};
use crate::tensor::{Param, SeededRng, Tape, Tensor};
use crate::text::{apply_prompt, split_tokens, tokenize, PromptVariant, TokenSequence, Vocab};

use super::Result;

/// Tokens the prompt templates add around a sentence.
const PROMPT_OVERHEAD: usize = 8;

/// Everything a checkpoint carries: encoder, projection, vocabulary and
/// the settings needed to rebuild inputs.
#[derive(Debug, Clone)]
pub struct Model {
    pub config: EncoderConfig,
    pub normalize_ids: bool,
    pub vocab: Vocab,
    pub encoder: EncoderParams,
    pub projection: ProjectionParams,
}

impl Model {
    /// Fresh parameters. The encoder and the projection draw from the
    /// `encoder` and `projection` children of `seed`, so a store built with
    /// the same seed matches the model's initial projection.
    pub fn init(
        config: EncoderConfig,
        vocab: Vocab,
        normalize_ids: bool,
        seed: &SeededRng,
    ) -> Result<Self> {
        let encoder = EncoderParams::init(&config, vocab.len(), &seed.split("encoder"))?;
        let projection = ProjectionParams::init(config.l_max, &seed.split("projection"));
        Ok(Model {
            config,
            normalize_ids,
            vocab,
            encoder,
            projection,
        })
    }

    pub fn id_scale(&self) -> IdScale {
        IdScale::new(self.normalize_ids, self.vocab.len())
    }

    pub fn params(&self) -> Vec<(ParamGroup, &Param)> {
        let mut out = self.encoder.params();
        out.extend(self.projection.params().map(|p| (ParamGroup::Projection, p)));
        out
    }

    pub fn params_mut(&mut self) -> Vec<(ParamGroup, &mut Param)> {
        let mut out = self.encoder.params_mut();
        out.extend(
            self.projection
                .params_mut()
                .into_iter()
                .map(|p| (ParamGroup::Projection, p)),
        );
        out
    }

    pub fn zero_grads(&mut self) {
        for (_, p) in self.params_mut() {
            p.zero_grad();
        }
    }

    /// One gradient-descent update over every parameter. Returns whether
    /// any parameter moved.
    pub fn sgd_step(&mut self, lr: f64) -> bool {
        let mut moved = false;
        for (_, p) in self.params_mut() {
            moved |= p.sgd_step(lr);
        }
        moved
    }

    /// Prompted token sequence. Long sentences are cut so the template,
    /// including `[MASK]`, always fits in `l_max`.
    pub fn prompt_sequence(&self, sentence: &str, variant: PromptVariant) -> Result<TokenSequence> {
        let budget = self.config.l_max.saturating_sub(PROMPT_OVERHEAD).max(1);
        let tokens = split_tokens(sentence);
        let text = if tokens.len() > budget {
            tokens[..budget].join(" ")
        } else {
            sentence.to_string()
        };
        let prompted = apply_prompt(&text, variant)?;
        Ok(tokenize(&prompted, &self.vocab, self.config.l_max))
    }

    /// Dropout-free prompt-A embeddings, `[n × d_model]`, encoded in chunks.
    pub fn embed(&self, sentences: &[&str]) -> Result<Tensor> {
        const CHUNK: usize = 64;
        let d = self.config.d_model;
        let mut out = Vec::with_capacity(sentences.len() * d);
        for chunk in sentences.chunks(CHUNK) {
            let seqs = chunk
                .iter()
                .map(|s| self.prompt_sequence(s, PromptVariant::A))
                .collect::<Result<Vec<_>>>()?;
            let refs: Vec<&TokenSequence> = seqs.iter().collect();
            let tape = Tape::no_grad();
            let bound = self.encoder.bind(&tape);
            let h = encoder::encode_token_batch(&tape, &bound, &self.config, &refs, None)?;
            out.extend_from_slice(h.data());
        }
        Ok(Tensor::matrix(sentences.len(), d, out)?)
    }
}

/// Vocabulary over the corpus as the encoder sees it: every sentence under
/// both prompt templates, so template words get their own ids.
pub fn training_vocab<S: AsRef<str>>(corpus: &[S], min_count: usize) -> Result<Vocab> {
    let mut prompted = Vec::with_capacity(corpus.len() * 2);
    for s in corpus {
        prompted.push(apply_prompt(s.as_ref(), PromptVariant::A)?);
        prompted.push(apply_prompt(s.as_ref(), PromptVariant::B)?);
    }
    Ok(crate::text::build_vocab(&prompted, min_count)?)
}
