//! Independent oracles shared by the integration tests.

#![allow(dead_code)]

use recse::encoder::{encode_reshaped_batch, encode_token_batch, BatchLayout, EncoderConfig, ParamGroup};
use recse::objective::{loss_cl_on, loss_re_on};
use recse::pipeline::{
    accumulate_gradients, prepare_corpus, training_vocab, FeatureStore, Model, PreparedSentence,
    StepMode, StepSeeds, TrainConfig,
};
use recse::reshape::reshape_batch_on;
use recse::tensor::{SeededRng, Tape, Tensor};
use recse::text::TokenSequence;

// ---------------------------------------------------------------- ranks

/// Average ranks by counting: rank = 1 + #smaller + (#equal - 1) / 2.
pub fn brute_ranks(xs: &[f64]) -> Vec<f64> {
    xs.iter()
        .map(|&x| {
            let less = xs.iter().filter(|&&y| y < x).count() as f64;
            let equal = xs.iter().filter(|&&y| y == x).count() as f64;
            1.0 + less + (equal - 1.0) / 2.0
        })
        .collect()
}

/// Spearman as Pearson correlation of brute-force ranks.
pub fn brute_spearman(a: &[f64], b: &[f64]) -> f64 {
    let (ra, rb) = (brute_ranks(a), brute_ranks(b));
    let n = ra.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = ra.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = rb.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

/// Rank formula on brute-force ranks, `1 - 6 Σd² / (n³ - n)`.
pub fn brute_spearman_d2(a: &[f64], b: &[f64]) -> f64 {
    let (ra, rb) = (brute_ranks(a), brute_ranks(b));
    let n = ra.len() as f64;
    let d2: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - y).powi(2)).sum();
    1.0 - d2 / ((n * n * n - n) / 6.0)
}

pub fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for pos in 0..=p.len() {
            let mut q = p.clone();
            q.insert(pos, n - 1);
            out.push(q);
        }
    }
    out
}

// ---------------------------------------------------------------- models

pub fn tiny_encoder() -> EncoderConfig {
    EncoderConfig {
        d_model: 8,
        n_layers: 1,
        n_heads: 2,
        d_ff: 16,
        l_max: 20,
        dropout_rate: 0.1,
    }
}

pub fn tiny_model(corpus: &[&str], seed: u64) -> Model {
    let vocab = training_vocab(corpus, 1).unwrap();
    Model::init(tiny_encoder(), vocab, true, &SeededRng::new(seed)).unwrap()
}

pub fn prepared(corpus: &[&str], model: &Model) -> Vec<PreparedSentence> {
    prepare_corpus(corpus, model).unwrap()
}

// ---------------------------------------------------------------- gradients

/// Forward-only value of the combined loss with `ℓ_re`'s targets frozen at
/// `targets`. The reshaped input is recomputed from the live projection so
/// perturbing it is visible.
pub fn surrogate_loss(model: &Model, batch: &[&PreparedSentence], cfg: &TrainConfig, step: usize, targets: &(Tensor, Tensor)) -> (f64, f64, f64) {
    let seeds = StepSeeds::new(cfg, step);
    let a: Vec<&TokenSequence> = batch.iter().map(|s| &s.prompt_a).collect();
    let b: Vec<&TokenSequence> = batch.iter().map(|s| &s.prompt_b).collect();
    let tape = Tape::no_grad();
    let enc = model.encoder.bind(&tape);
    let proj = model.projection.bind(&tape);
    let hz = encode_token_batch(&tape, &enc, &model.config, &a, Some(&seeds.z)).unwrap();
    let hzp = encode_token_batch(&tape, &enc, &model.config, &b, Some(&seeds.zp)).unwrap();
    let l_cl = loss_cl_on(&tape, &hz, &hzp, cfg.loss.tau).unwrap().item();
    let x = reshape_batch_on(&tape, &a, &proj, model.id_scale()).unwrap();
    let layout = BatchLayout::from_sequences(&a).unwrap();
    let hs = encode_reshaped_batch(&tape, &enc, &model.config, &x, &layout, Some(&seeds.re)).unwrap();
    let l_re = loss_re_on(
        &tape,
        &tape.constant(targets.0.clone()),
        &tape.constant(targets.1.clone()),
        &hs,
        cfg.loss.tau_prime,
    )
    .unwrap()
    .item();
    let lambda = cfg.loss.lambda;
    (lambda * l_cl + (1.0 - lambda) * l_cl.max(l_re), l_cl, l_re)
}

pub fn pair_targets(model: &Model, batch: &[&PreparedSentence], cfg: &TrainConfig, step: usize) -> (Tensor, Tensor) {
    let seeds = StepSeeds::new(cfg, step);
    let a: Vec<&TokenSequence> = batch.iter().map(|s| &s.prompt_a).collect();
    let b: Vec<&TokenSequence> = batch.iter().map(|s| &s.prompt_b).collect();
    let tape = Tape::no_grad();
    let enc = model.encoder.bind(&tape);
    let hz = encode_token_batch(&tape, &enc, &model.config, &a, Some(&seeds.z)).unwrap();
    let hzp = encode_token_batch(&tape, &enc, &model.config, &b, Some(&seeds.zp)).unwrap();
    (hz.value().clone(), hzp.value().clone())
}

#[derive(Debug, Clone)]
pub struct GroupCheck {
    pub group: ParamGroup,
    pub analytic_norm: f64,
    pub numeric_norm: f64,
    pub rel_err: f64,
}

impl GroupCheck {
    pub fn passes(&self, tol: f64) -> bool {
        if self.analytic_norm.max(self.numeric_norm) < 1e-9 {
            return true;
        }
        self.rel_err < tol
    }
}

#[derive(Debug, Clone)]
pub struct GradReport {
    pub l_cl: f64,
    pub l_re: f64,
    pub gate_active: bool,
    pub groups: Vec<GroupCheck>,
}

/// Central differences (step `h`) against the gradients the training code
/// accumulates, on the largest-magnitude entries of each parameter plus a
/// few random ones. Errors are norm-wise per parameter group.
pub fn grad_check(model: &Model, batch: &[&PreparedSentence], cfg: &TrainConfig, h: f64) -> GradReport {
    let step = 1;
    let store = FeatureStore::build(&batch.iter().map(|s| s.text.as_str()).collect::<Vec<_>>(), model).unwrap();
    let mut analytic = model.clone();
    analytic.zero_grads();
    accumulate_gradients(&mut analytic, Some(&store), batch, cfg, step).unwrap();
    let targets = pair_targets(model, batch, cfg, step);
    let (_, l_cl, l_re) = surrogate_loss(model, batch, cfg, step, &targets);

    let mut pick = SeededRng::new(99);
    let mut sums: Vec<(ParamGroup, f64, f64, f64)> = Vec::new();
    let grads: Vec<(ParamGroup, Vec<f64>)> = analytic
        .params()
        .iter()
        .map(|(g, p)| (*g, p.grad().map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; p.value().numel()])))
        .collect();
    for (k, (group, grad)) in grads.iter().enumerate() {
        let mut idx: Vec<usize> = (0..grad.len()).collect();
        idx.sort_by(|&i, &j| grad[j].abs().total_cmp(&grad[i].abs()));
        idx.truncate(6);
        for _ in 0..3 {
            idx.push(pick.below(grad.len()));
        }
        idx.sort_unstable();
        idx.dedup();
        let entry = match sums.iter_mut().find(|s| s.0 == *group) {
            Some(e) => e,
            None => {
                sums.push((*group, 0.0, 0.0, 0.0));
                sums.last_mut().unwrap()
            }
        };
        for i in idx {
            let eval = |delta: f64| {
                let mut m = model.clone();
                m.params_mut()[k].1.value_mut()[i] += delta;
                surrogate_loss(&m, batch, cfg, step, &targets).0
            };
            let numeric = (eval(h) - eval(-h)) / (2.0 * h);
            let a = grad[i];
            entry.1 += a * a;
            entry.2 += numeric * numeric;
            entry.3 += (a - numeric).powi(2);
        }
    }
    GradReport {
        l_cl,
        l_re,
        gate_active: l_re > l_cl,
        groups: sums
            .into_iter()
            .map(|(group, a2, n2, d2)| GroupCheck {
                group,
                analytic_norm: a2.sqrt(),
                numeric_norm: n2.sqrt(),
                rel_err: d2.sqrt() / a2.sqrt().max(n2.sqrt()).max(1e-300),
            })
            .collect(),
    }
}

pub const GRAD_CORPUS: [&str; 2] = [
    "the quick fox jumps over the lazy dog",
    "a slow cat sleeps near the warm fire",
];

pub const GRAD_SEED: u64 = 7;

/// Configurations whose gate is on and off respectively for the tiny model
/// with `GRAD_SEED` on `GRAD_CORPUS`.
pub fn grad_configs(mode: StepMode) -> [(TrainConfig, bool); 2] {
    let mut active = TrainConfig { mode, batch_size: 2, ..TrainConfig::default() };
    active.loss.tau = 0.05;
    active.loss.tau_prime = 0.01;
    let mut inactive = active.clone();
    inactive.loss.tau = 0.02;
    inactive.loss.tau_prime = 0.05;
    [(active, true), (inactive, false)]
}
