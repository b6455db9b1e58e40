//! Small post-layer-norm transformer encoder with `[MASK]` pooling.
//!
//! The same layer stack serves two inputs: token ids through the embedding
//! table, and reshaped features (one real per position) through a scalar
//! lift `x -> x * lift + lift_bias`. Dropout sits on attention
//! probabilities and on feed-forward activations, and draws its masks from
//! the pass's seed so a pass can be replayed exactly.

use std::rc::Rc;

use thiserror::Error;

use crate::tensor::{Param, SeededRng, Tape, Tensor, TensorError, Var};
use crate::text::TokenSequence;

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Error)]
pub enum EncoderError {
    #[error("prompted input required: sequence {0} has no [MASK] token")]
    PromptRequired(usize),
    #[error("invalid encoder config: {0}")]
    Config(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T, E = EncoderError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub l_max: usize,
    pub dropout_rate: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            d_ff: 128,
            l_max: 32,
            dropout_rate: 0.1,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(EncoderError::Config(m.to_string()));
        if self.d_model == 0 || self.n_heads == 0 || self.d_ff == 0 || self.n_layers == 0 {
            return bad("dimensions must be positive");
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return bad("d_model must be divisible by n_heads");
        }
        if self.l_max < 4 {
            return bad("l_max must be at least 4");
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return bad("dropout_rate must be in [0, 1)");
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

#[derive(Debug, Clone)]
pub struct LayerParams {
    pub wq: Param,
    pub bq: Param,
    pub wk: Param,
    pub bk: Param,
    pub wv: Param,
    pub bv: Param,
    pub wo: Param,
    pub bo: Param,
    pub ln1_gain: Param,
    pub ln1_bias: Param,
    pub w1: Param,
    pub b1: Param,
    pub w2: Param,
    pub b2: Param,
    pub ln2_gain: Param,
    pub ln2_bias: Param,
}

impl LayerParams {
    fn params(&self) -> Vec<&Param> {
        vec![
            &self.wq, &self.bq, &self.wk, &self.bk, &self.wv, &self.bv, &self.wo, &self.bo,
            &self.ln1_gain, &self.ln1_bias, &self.w1, &self.b1, &self.w2, &self.b2,
            &self.ln2_gain, &self.ln2_bias,
        ]
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![
            &mut self.wq, &mut self.bq, &mut self.wk, &mut self.bk, &mut self.wv, &mut self.bv,
            &mut self.wo, &mut self.bo, &mut self.ln1_gain, &mut self.ln1_bias, &mut self.w1,
            &mut self.b1, &mut self.w2, &mut self.b2, &mut self.ln2_gain, &mut self.ln2_bias,
        ]
    }
}

/// Which part of the model a parameter belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ParamGroup {
    /// Embeddings and transformer layers.
    Encoder,
    /// `[MASK]` pooling head.
    Head,
    /// Scalar lift for reshaped inputs.
    ScalarLift,
    /// Reshape projection.
    Projection,
}

#[derive(Debug, Clone)]
pub struct EncoderParams {
    pub token_embedding: Param,
    pub scalar_lift: Param,
    pub scalar_lift_bias: Param,
    pub position_embedding: Param,
    pub layers: Vec<LayerParams>,
    pub head_w: Param,
    pub head_b: Param,
}

fn xavier(name: String, rows: usize, cols: usize, rng: &SeededRng) -> Param {
    let mut r = rng.split(&name);
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols).map(|_| r.uniform(-bound, bound)).collect();
    Param::new(name, Tensor::matrix(rows, cols, data).expect("shape"))
}

fn filled(name: String, n: usize, value: f64) -> Param {
    Param::new(name, Tensor::vector(vec![value; n]))
}

impl EncoderParams {
    /// Xavier-uniform weights, zero biases, unit layer-norm gains. Each
    /// tensor draws from its own stream keyed by its name.
    pub fn init(config: &EncoderConfig, vocab_size: usize, rng: &SeededRng) -> Result<Self> {
        config.validate()?;
        let (d, f) = (config.d_model, config.d_ff);
        let layers = (0..config.n_layers)
            .map(|l| {
                let n = |s: &str| format!("layers.{l}.{s}");
                LayerParams {
                    wq: xavier(n("attn.wq"), d, d, rng),
                    bq: filled(n("attn.bq"), d, 0.0),
                    wk: xavier(n("attn.wk"), d, d, rng),
                    bk: filled(n("attn.bk"), d, 0.0),
                    wv: xavier(n("attn.wv"), d, d, rng),
                    bv: filled(n("attn.bv"), d, 0.0),
                    wo: xavier(n("attn.wo"), d, d, rng),
                    bo: filled(n("attn.bo"), d, 0.0),
                    ln1_gain: filled(n("ln1.gain"), d, 1.0),
                    ln1_bias: filled(n("ln1.bias"), d, 0.0),
                    w1: xavier(n("ffn.w1"), d, f, rng),
                    b1: filled(n("ffn.b1"), f, 0.0),
                    w2: xavier(n("ffn.w2"), f, d, rng),
                    b2: filled(n("ffn.b2"), d, 0.0),
                    ln2_gain: filled(n("ln2.gain"), d, 1.0),
                    ln2_bias: filled(n("ln2.bias"), d, 0.0),
                }
            })
            .collect();
        Ok(EncoderParams {
            token_embedding: xavier("token_embedding".into(), vocab_size, d, rng),
            scalar_lift: xavier("scalar_lift.w".into(), 1, d, rng),
            scalar_lift_bias: filled("scalar_lift.b".into(), d, 0.0),
            position_embedding: xavier("position_embedding".into(), config.l_max, d, rng),
            layers,
            head_w: xavier("head.w".into(), d, d, rng),
            head_b: filled("head.b".into(), d, 0.0),
        })
    }

    /// Every parameter with its group, in a fixed order.
    pub fn params(&self) -> Vec<(ParamGroup, &Param)> {
        let mut out = vec![
            (ParamGroup::Encoder, &self.token_embedding),
            (ParamGroup::ScalarLift, &self.scalar_lift),
            (ParamGroup::ScalarLift, &self.scalar_lift_bias),
            (ParamGroup::Encoder, &self.position_embedding),
        ];
        for layer in &self.layers {
            out.extend(layer.params().into_iter().map(|p| (ParamGroup::Encoder, p)));
        }
        out.push((ParamGroup::Head, &self.head_w));
        out.push((ParamGroup::Head, &self.head_b));
        out
    }

    pub fn params_mut(&mut self) -> Vec<(ParamGroup, &mut Param)> {
        let mut out = vec![
            (ParamGroup::Encoder, &mut self.token_embedding),
            (ParamGroup::ScalarLift, &mut self.scalar_lift),
            (ParamGroup::ScalarLift, &mut self.scalar_lift_bias),
            (ParamGroup::Encoder, &mut self.position_embedding),
        ];
        for layer in &mut self.layers {
            out.extend(layer.params_mut().into_iter().map(|p| (ParamGroup::Encoder, p)));
        }
        out.push((ParamGroup::Head, &mut self.head_w));
        out.push((ParamGroup::Head, &mut self.head_b));
        out
    }

    pub fn bind(&self, tape: &Tape) -> BoundEncoder {
        BoundEncoder {
            vars: self.params().into_iter().map(|(_, p)| p.bind(tape)).collect(),
            n_layers: self.layers.len(),
        }
    }

    pub fn absorb(&mut self, bound: &BoundEncoder, scale: f64) {
        for ((_, p), v) in self.params_mut().into_iter().zip(&bound.vars) {
            p.absorb(v, scale);
        }
    }
}

/// Encoder parameters bound as leaves of one tape, in [`EncoderParams::params`] order.
pub struct BoundEncoder {
    vars: Vec<Var>,
    n_layers: usize,
}

const PER_LAYER: usize = 16;
const LAYER_START: usize = 4;

impl BoundEncoder {
    fn token_embedding(&self) -> &Var {
        &self.vars[0]
    }
    fn scalar_lift(&self) -> (&Var, &Var) {
        (&self.vars[1], &self.vars[2])
    }
    fn position_embedding(&self) -> &Var {
        &self.vars[3]
    }
    fn layer(&self, l: usize) -> &[Var] {
        let s = LAYER_START + l * PER_LAYER;
        &self.vars[s..s + PER_LAYER]
    }
    fn head(&self) -> (&Var, &Var) {
        let s = LAYER_START + self.n_layers * PER_LAYER;
        (&self.vars[s], &self.vars[s + 1])
    }
}

/// Padding and pooling layout of one batch.
#[derive(Debug, Clone)]
pub struct BatchLayout {
    pub batch: usize,
    pub l_max: usize,
    /// `key_mask[b * l_max + j]`: position `j` of item `b` is a real token.
    pub key_mask: Rc<[bool]>,
    pub mask_pos: Vec<usize>,
}

impl BatchLayout {
    pub fn from_sequences(seqs: &[&TokenSequence]) -> Result<Self> {
        let l_max = seqs.first().map(|s| s.l_max()).unwrap_or(0);
        let mut key_mask = Vec::with_capacity(seqs.len() * l_max);
        let mut mask_pos = Vec::with_capacity(seqs.len());
        for (i, s) in seqs.iter().enumerate() {
            if s.l_max() != l_max {
                return Err(TensorError::Shape {
                    op: "batch_layout",
                    lhs: vec![l_max],
                    rhs: vec![s.l_max()],
                }
                .into());
            }
            key_mask.extend_from_slice(&s.pad_mask);
            mask_pos.push(s.mask_pos.ok_or(EncoderError::PromptRequired(i))?);
        }
        Ok(BatchLayout {
            batch: seqs.len(),
            l_max,
            key_mask: key_mask.into(),
            mask_pos,
        })
    }
}

/// Token-id batch → `[B × d_model]` sentence embeddings.
///
/// `dropout` is the pass's mask seed; `None` runs without dropout.
pub fn encode_token_batch(
    tape: &Tape,
    params: &BoundEncoder,
    config: &EncoderConfig,
    seqs: &[&TokenSequence],
    dropout: Option<&SeededRng>,
) -> Result<Var> {
    let layout = BatchLayout::from_sequences(seqs)?;
    check_l_max(config, &layout)?;
    let ids: Vec<usize> = seqs
        .iter()
        .flat_map(|s| s.ids.iter().map(|&i| i as usize))
        .collect();
    let emb = tape.gather_rows(params.token_embedding(), &ids)?;
    encode_embedded(tape, params, config, emb, &layout, dropout)
}

/// Reshaped-feature batch (`x_star: [B × L_max]`) → `[B × d_model]`.
pub fn encode_reshaped_batch(
    tape: &Tape,
    params: &BoundEncoder,
    config: &EncoderConfig,
    x_star: &Var,
    layout: &BatchLayout,
    dropout: Option<&SeededRng>,
) -> Result<Var> {
    check_l_max(config, layout)?;
    if x_star.shape() != [layout.batch, layout.l_max] {
        return Err(TensorError::Shape {
            op: "encode_reshaped",
            lhs: x_star.shape().to_vec(),
            rhs: vec![layout.batch, layout.l_max],
        }
        .into());
    }
    let (lift, lift_bias) = params.scalar_lift();
    let column = tape.reshape(x_star, vec![layout.batch * layout.l_max, 1])?;
    let emb = tape.add_row(&tape.matmul(&column, lift)?, lift_bias)?;
    encode_embedded(tape, params, config, emb, layout, dropout)
}

fn check_l_max(config: &EncoderConfig, layout: &BatchLayout) -> Result<()> {
    if layout.l_max != config.l_max || layout.batch == 0 {
        return Err(TensorError::Shape {
            op: "encode",
            lhs: vec![layout.batch, layout.l_max],
            rhs: vec![config.l_max],
        }
        .into());
    }
    Ok(())
}

fn encode_embedded(
    tape: &Tape,
    params: &BoundEncoder,
    config: &EncoderConfig,
    emb: Var,
    layout: &BatchLayout,
    dropout: Option<&SeededRng>,
) -> Result<Var> {
    let positions: Vec<usize> = (0..layout.batch).flat_map(|_| 0..layout.l_max).collect();
    let pos = tape.gather_rows(params.position_embedding(), &positions)?;
    let mut x = tape.add(&emb, &pos)?;
    drop((emb, pos));
    for l in 0..config.n_layers {
        x = encoder_layer(tape, params.layer(l), config, &x, layout, dropout, l)?;
    }
    pool_rows(tape, params, &x, layout)
}

fn linear(tape: &Tape, x: &Var, w: &Var, b: &Var) -> Result<Var> {
    Ok(tape.add_row(&tape.matmul(x, w)?, b)?)
}

fn encoder_layer(
    tape: &Tape,
    p: &[Var],
    config: &EncoderConfig,
    x: &Var,
    layout: &BatchLayout,
    dropout: Option<&SeededRng>,
    layer: usize,
) -> Result<Var> {
    let (b, l, h) = (layout.batch, layout.l_max, config.n_heads);
    let dh = config.head_dim();
    let rate = if dropout.is_some() { config.dropout_rate } else { 0.0 };

    let attended = {
        let q = split_heads(tape, &linear(tape, x, &p[0], &p[1])?, b, l, h, dh)?;
        let k = split_heads(tape, &linear(tape, x, &p[2], &p[3])?, b, l, h, dh)?;
        let v = split_heads(tape, &linear(tape, x, &p[4], &p[5])?, b, l, h, dh)?;
        let scores = tape.scale(&tape.bmm_nt(&q, &k)?, 1.0 / (dh as f64).sqrt());
        let mut probs = tape.masked_softmax(&scores, layout.key_mask.clone(), h * l)?;
        if let Some(seed) = dropout {
            let mut rng = seed.split(&format!("layer{layer}.attn"));
            probs = tape.dropout(&probs, rate, &mut rng)?;
        }
        let ctx = merge_heads(tape, &tape.bmm(&probs, &v)?, b, l, h, dh)?;
        linear(tape, &ctx, &p[6], &p[7])?
    };
    let x = tape.layer_norm(&tape.add(x, &attended)?, &p[8], &p[9], LN_EPS)?;

    let ff = {
        let mut hidden = tape.gelu(&linear(tape, &x, &p[10], &p[11])?);
        if let Some(seed) = dropout {
            let mut rng = seed.split(&format!("layer{layer}.ffn"));
            hidden = tape.dropout(&hidden, rate, &mut rng)?;
        }
        linear(tape, &hidden, &p[12], &p[13])?
    };
    Ok(tape.layer_norm(&tape.add(&x, &ff)?, &p[14], &p[15], LN_EPS)?)
}

/// `[B·L × H·dh]` → `[B·H × L × dh]`
fn split_heads(tape: &Tape, x: &Var, b: usize, l: usize, h: usize, dh: usize) -> Result<Var> {
    let d = h * dh;
    let mut map = Vec::with_capacity(b * l * d);
    for bi in 0..b {
        for hi in 0..h {
            for i in 0..l {
                let base = (bi * l + i) * d + hi * dh;
                map.extend(base..base + dh);
            }
        }
    }
    Ok(tape.permute(x, vec![b * h, l, dh], Rc::new(map))?)
}

/// `[B·H × L × dh]` → `[B·L × H·dh]`
fn merge_heads(tape: &Tape, x: &Var, b: usize, l: usize, h: usize, dh: usize) -> Result<Var> {
    let mut map = Vec::with_capacity(b * l * h * dh);
    for bi in 0..b {
        for i in 0..l {
            for hi in 0..h {
                let base = ((bi * h + hi) * l + i) * dh;
                map.extend(base..base + dh);
            }
        }
    }
    Ok(tape.permute(x, vec![b * l, h * dh], Rc::new(map))?)
}

fn pool_rows(tape: &Tape, params: &BoundEncoder, hidden: &Var, layout: &BatchLayout) -> Result<Var> {
    let rows: Vec<usize> = layout
        .mask_pos
        .iter()
        .enumerate()
        .map(|(b, &p)| b * layout.l_max + p)
        .collect();
    let picked = tape.gather_rows(hidden, &rows)?;
    let (w, bias) = params.head();
    Ok(tape.tanh(&linear(tape, &picked, w, bias)?))
}

/// `tanh(W · hidden[mask_pos] + b)` for one sequence's hidden states.
pub fn pool_mask_head(hidden: &Tensor, mask_pos: usize, params: &EncoderParams) -> Result<Tensor> {
    let l_max = hidden.shape()[0];
    if mask_pos >= l_max {
        return Err(TensorError::Index {
            op: "pool_mask_head",
            index: mask_pos,
            len: l_max,
        }
        .into());
    }
    let tape = Tape::no_grad();
    let bound = params.bind(&tape);
    let layout = BatchLayout {
        batch: 1,
        l_max,
        key_mask: vec![true; l_max].into(),
        mask_pos: vec![mask_pos],
    };
    let h = pool_rows(&tape, &bound, &tape.constant(hidden.clone()), &layout)?;
    Ok(h.value().reshaped(vec![h.value().numel()])?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EmbeddingPath {
    Token,
    Reshaped,
}

#[derive(Debug, Clone)]
pub struct SentenceEmbedding {
    pub h: Tensor,
    pub mask_seed_used: u64,
    pub path: EmbeddingPath,
}

fn single(out: &Var) -> Result<Tensor> {
    let d = out.shape()[1];
    Ok(out.value().reshaped(vec![d])?)
}

/// Encodes one prompted sequence. `train` enables dropout with `mask_seed`.
pub fn encode_tokens(
    seq: &TokenSequence,
    params: &EncoderParams,
    config: &EncoderConfig,
    mask_seed: &SeededRng,
    train: bool,
) -> Result<SentenceEmbedding> {
    let tape = Tape::no_grad();
    let bound = params.bind(&tape);
    let out = encode_token_batch(&tape, &bound, config, &[seq], train.then_some(mask_seed))?;
    Ok(SentenceEmbedding {
        h: single(&out)?,
        mask_seed_used: mask_seed.seed(),
        path: EmbeddingPath::Token,
    })
}

/// Encodes one reshaped feature vector; `pad_mask` marks real positions.
pub fn encode_reshaped(
    x_star: &Tensor,
    mask_pos: usize,
    pad_mask: &[bool],
    params: &EncoderParams,
    config: &EncoderConfig,
    mask_seed: &SeededRng,
    train: bool,
) -> Result<SentenceEmbedding> {
    if !x_star.is_finite() {
        return Err(TensorError::Domain {
            op: "encode_reshaped",
            index: x_star.data().iter().position(|v| !v.is_finite()).unwrap_or(0),
            value: f64::NAN,
        }
        .into());
    }
    let l_max = x_star.numel();
    if mask_pos >= l_max {
        return Err(TensorError::Index {
            op: "encode_reshaped",
            index: mask_pos,
            len: l_max,
        }
        .into());
    }
    let tape = Tape::no_grad();
    let bound = params.bind(&tape);
    let layout = BatchLayout {
        batch: 1,
        l_max,
        key_mask: pad_mask.to_vec().into(),
        mask_pos: vec![mask_pos],
    };
    let x = tape.constant(x_star.reshaped(vec![1, l_max])?);
    let out = encode_reshaped_batch(&tape, &bound, config, &x, &layout, train.then_some(mask_seed))?;
    Ok(SentenceEmbedding {
        h: single(&out)?,
        mask_seed_used: mask_seed.seed(),
        path: EmbeddingPath::Reshaped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::text::{apply_prompt, build_vocab, tokenize, PromptVariant, Vocab, MASK};

    fn small() -> (EncoderConfig, Vocab, EncoderParams) {
        let cfg = EncoderConfig {
            d_model: 16,
            n_layers: 2,
            n_heads: 4,
            d_ff: 32,
            l_max: 16,
            dropout_rate: 0.1,
        };
        let vocab = build_vocab(&[apply_prompt("the cat sat on the mat", PromptVariant::A).unwrap()], 1)
            .unwrap();
        let params = EncoderParams::init(&cfg, vocab.len(), &SeededRng::new(3)).unwrap();
        (cfg, vocab, params)
    }

    fn prompted(vocab: &Vocab, s: &str, l_max: usize) -> TokenSequence {
        tokenize(&apply_prompt(s, PromptVariant::A).unwrap(), vocab, l_max)
    }

    #[test]
    fn config_validation() {
        let mut c = EncoderConfig::default();
        assert!(c.validate().is_ok());
        c.n_heads = 5;
        assert!(c.validate().is_err());
        c = EncoderConfig { dropout_rate: 1.0, ..Default::default() };
        assert!(c.validate().is_err());
    }

    #[test]
    fn init_is_deterministic_and_shaped() {
        let (cfg, vocab, p) = small();
        let q = EncoderParams::init(&cfg, vocab.len(), &SeededRng::new(3)).unwrap();
        for ((_, a), (_, b)) in p.params().iter().zip(q.params()) {
            assert_eq!(a.value(), b.value());
        }
        assert_eq!(p.token_embedding.shape(), [vocab.len(), 16]);
        assert_eq!(p.position_embedding.shape(), [16, 16]);
        assert_eq!(p.layers[0].w1.shape(), [16, 32]);
        assert_eq!(p.layers.len(), 2);
        assert!(p.layers[1].ln2_gain.value().data().iter().all(|v| *v == 1.0));
    }

    #[test]
    fn token_encoding_determinism_and_dropout() {
        let (cfg, vocab, p) = small();
        let seq = prompted(&vocab, "the cat sat", cfg.l_max);
        let z = SeededRng::new(10);
        let a = encode_tokens(&seq, &p, &cfg, &z, true).unwrap();
        let b = encode_tokens(&seq, &p, &cfg, &z, true).unwrap();
        assert_eq!(a.h, b.h);
        assert!(a.h.is_finite());

        let zp = SeededRng::new(11);
        let c = encode_tokens(&seq, &p, &cfg, &zp, true).unwrap();
        let dist: f64 = a.h.data().iter().zip(c.h.data()).map(|(x, y)| (x - y).powi(2)).sum();
        assert!(dist > 0.0);

        let off1 = encode_tokens(&seq, &p, &cfg, &z, false).unwrap();
        let off2 = encode_tokens(&seq, &p, &cfg, &zp, false).unwrap();
        assert_eq!(off1.h, off2.h);
    }

    #[test]
    fn unprompted_input_rejected() {
        let (cfg, vocab, p) = small();
        let seq = tokenize("the cat", &vocab, cfg.l_max);
        assert!(matches!(
            encode_tokens(&seq, &p, &cfg, &SeededRng::new(1), false),
            Err(EncoderError::PromptRequired(0))
        ));
    }

    #[test]
    fn padding_ids_do_not_leak() {
        let (cfg, vocab, p) = small();
        let seq = prompted(&vocab, "the cat", cfg.l_max);
        let mut noisy = seq.clone();
        for (id, m) in noisy.ids.iter_mut().zip(&noisy.pad_mask) {
            if !m {
                *id = 7;
            }
        }
        let z = SeededRng::new(4);
        let a = encode_tokens(&seq, &p, &cfg, &z, false).unwrap();
        let b = encode_tokens(&noisy, &p, &cfg, &z, false).unwrap();
        assert_eq!(a.h, b.h);
    }

    #[test]
    fn reshaped_zero_input_is_finite_and_deterministic() {
        let (cfg, _, p) = small();
        let x = Tensor::vector(vec![0.0; cfg.l_max]);
        let mask = vec![true; cfg.l_max];
        let z = SeededRng::new(1);
        let a = encode_reshaped(&x, 3, &mask, &p, &cfg, &z, false).unwrap();
        let b = encode_reshaped(&x, 3, &mask, &p, &cfg, &SeededRng::new(2), false).unwrap();
        assert_eq!(a.h, b.h);
        assert!(a.h.is_finite());
        assert_eq!(a.path, EmbeddingPath::Reshaped);
    }

    #[test]
    fn pool_head_cases() {
        let (cfg, _, p) = small();
        let mut zero_bias = p.clone();
        zero_bias.head_b = filled("head.b".into(), cfg.d_model, 0.0);
        let hidden = Tensor::zeros(vec![cfg.l_max, cfg.d_model]);
        let h = pool_mask_head(&hidden, 2, &zero_bias).unwrap();
        assert!(h.data().iter().all(|v| *v == 0.0));

        let mut r = SeededRng::new(8);
        let hidden = Tensor::matrix(
            cfg.l_max,
            cfg.d_model,
            (0..cfg.l_max * cfg.d_model).map(|_| r.uniform(-3.0, 3.0)).collect(),
        )
        .unwrap();
        let h = pool_mask_head(&hidden, 5, &p).unwrap();
        assert!(h.data().iter().all(|v| v.abs() < 1.0));
        assert!(matches!(
            pool_mask_head(&hidden, cfg.l_max, &p),
            Err(EncoderError::Tensor(TensorError::Index { .. }))
        ));
    }

    #[test]
    fn mask_token_is_reserved() {
        let (_, vocab, _) = small();
        assert_eq!(vocab.id("[MASK]"), Some(MASK));
    }
}
