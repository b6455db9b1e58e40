use crate::encoder::{encode_reshaped_batch, encode_token_batch, BatchLayout, BoundEncoder};
use crate::eval;
use crate::objective::{
    gate_coefficients, info_nce_on, loss_cl_on, loss_re_on, LossBreakdown, LossConfig,
};
use crate::reshape::reshape_batch_on;
use crate::tensor::{mem_scope, SeededRng, Tape, Tensor, Var};
use crate::text::{PromptVariant, StsPair, TokenSequence};

use super::{FeatureStore, Model, Optimizer, OptimizerKind, PipelineError, Result};

/// How a training step lays out its passes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepMode {
    /// Four phases, one branch's graph alive at a time.
    Staged,
    /// Both views and the reshaped pass alive together, one backward.
    Joint,
    /// Contrastive pair only, plus `extra_passes` more dropout views of the
    /// anchor held alongside it. Used to measure memory growth.
    Augmented { extra_passes: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub eval_every_steps: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub loss: LossConfig,
    pub mode: StepMode,
    pub optimizer: OptimizerKind,
    /// Rebuild the feature store from the current projection every this
    /// many epochs; 0 keeps the initial store.
    pub refresh_every_epochs: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 16,
            epochs: 3,
            eval_every_steps: 250,
            learning_rate: 1e-3,
            seed: 0,
            loss: LossConfig::default(),
            mode: StepMode::Staged,
            optimizer: OptimizerKind::Sgd,
            refresh_every_epochs: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(PipelineError::Input(m));
        if self.batch_size == 0 || self.epochs == 0 || self.eval_every_steps == 0 {
            return bad("batch_size, epochs and eval_every_steps must be positive".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        self.loss.validate()?;
        Ok(())
    }

    pub fn optimizer(&self) -> Optimizer {
        Optimizer::new(self.optimizer, self.learning_rate)
    }

    fn stream(&self) -> SeededRng {
        SeededRng::new(self.seed).split("train")
    }
}

/// A corpus sentence tokenized under both prompts.
#[derive(Debug, Clone)]
pub struct PreparedSentence {
    pub text: String,
    pub prompt_a: TokenSequence,
    pub prompt_b: TokenSequence,
    /// Store key: content hash of `prompt_a`.
    pub hash: u64,
}

pub fn prepare_corpus<S: AsRef<str>>(corpus: &[S], model: &Model) -> Result<Vec<PreparedSentence>> {
    corpus
        .iter()
        .map(|s| {
            let s = s.as_ref();
            let prompt_a = model.prompt_sequence(s, PromptVariant::A)?;
            let prompt_b = model.prompt_sequence(s, PromptVariant::B)?;
            Ok(PreparedSentence {
                text: s.to_string(),
                hash: prompt_a.content_hash(),
                prompt_a,
                prompt_b,
            })
        })
        .collect()
}

/// Peak live tensor bytes per phase. A phase that did not run reports 0.
///
/// Joint and augmented steps have no reshaped phases; their forward peak
/// goes in `pair_forward` and the backward peak in `pair_backward`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct PhasePeaks {
    pub pair_forward: u64,
    pub reshaped_forward: u64,
    pub pair_backward: u64,
    pub reshaped_backward: u64,
}

impl PhasePeaks {
    pub fn max(&self) -> u64 {
        self.pair_forward
            .max(self.reshaped_forward)
            .max(self.pair_backward)
            .max(self.reshaped_backward)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepTrace {
    pub step: usize,
    pub losses: LossBreakdown,
    pub peaks: PhasePeaks,
    pub moved: bool,
}

pub const METRICS_HEADER: &str =
    "step\tl_cl\tl_re\tcombined\tgate\tpeak_pair_fwd\tpeak_pair_bwd\tpeak_re_fwd\tpeak_re_bwd";

impl StepTrace {
    /// One tab-separated metrics line; reals keep 17 significant digits.
    pub fn to_log_line(&self) -> String {
        let l = &self.losses;
        let p = &self.peaks;
        format!(
            "{}\t{:.16e}\t{:.16e}\t{:.16e}\t{}\t{}\t{}\t{}\t{}",
            self.step,
            l.l_cl,
            l.l_re,
            l.combined,
            l.gate_re_active as u8,
            p.pair_forward,
            p.pair_backward,
            p.reshaped_forward,
            p.reshaped_backward
        )
    }

    pub fn from_log_line(line: &str) -> Result<Self, String> {
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 9 {
            return Err(format!("expected 9 fields, got {}", f.len()));
        }
        let real = |s: &str| s.parse::<f64>().map_err(|e| format!("{s:?}: {e}"));
        let int = |s: &str| s.parse::<u64>().map_err(|e| format!("{s:?}: {e}"));
        Ok(StepTrace {
            step: int(f[0])? as usize,
            losses: LossBreakdown {
                l_cl: real(f[1])?,
                l_re: real(f[2])?,
                combined: real(f[3])?,
                gate_re_active: int(f[4])? != 0,
            },
            peaks: PhasePeaks {
                pair_forward: int(f[5])?,
                pair_backward: int(f[6])?,
                reshaped_forward: int(f[7])?,
                reshaped_backward: int(f[8])?,
            },
            moved: true,
        })
    }
}

/// Dropout streams of one training step.
#[derive(Debug, Clone)]
pub struct StepSeeds {
    pub z: SeededRng,
    pub zp: SeededRng,
    pub re: SeededRng,
    base: SeededRng,
    step: usize,
}

impl StepSeeds {
    pub fn new(cfg: &TrainConfig, step: usize) -> Self {
        let base = cfg.stream();
        StepSeeds {
            z: base.split(&format!("step{step}/z")),
            zp: base.split(&format!("step{step}/zp")),
            re: base.split(&format!("step{step}/re")),
            base,
            step,
        }
    }

    pub fn extra(&self, k: usize) -> SeededRng {
        self.base.split(&format!("step{}/extra{k}", self.step))
    }
}

struct Views<'a> {
    a: Vec<&'a TokenSequence>,
    b: Vec<&'a TokenSequence>,
    hashes: Vec<u64>,
    texts: Vec<&'a str>,
}

impl<'a> Views<'a> {
    fn new(batch: &[&'a PreparedSentence]) -> Self {
        Views {
            a: batch.iter().map(|s| &s.prompt_a).collect(),
            b: batch.iter().map(|s| &s.prompt_b).collect(),
            hashes: batch.iter().map(|s| s.hash).collect(),
            texts: batch.iter().map(|s| s.text.as_str()).collect(),
        }
    }
}

fn pair_views(tape: &Tape, enc: &BoundEncoder, model: &Model, v: &Views, seeds: &StepSeeds) -> Result<(Var, Var)> {
    let hz = encode_token_batch(tape, enc, &model.config, &v.a, Some(&seeds.z))?;
    let hzp = encode_token_batch(tape, enc, &model.config, &v.b, Some(&seeds.zp))?;
    Ok((hz, hzp))
}

fn check_finite(step: usize, losses: &LossBreakdown) -> Result<()> {
    if [losses.l_cl, losses.l_re, losses.combined].iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(PipelineError::NonFinite {
            step,
            detail: format!("l_cl={} l_re={} combined={}", losses.l_cl, losses.l_re, losses.combined),
        })
    }
}

/// Runs the forward and backward passes of one step and adds the gradients
/// of the combined loss to the model's parameters without updating them.
pub fn accumulate_gradients(
    model: &mut Model,
    store: Option<&FeatureStore>,
    batch: &[&PreparedSentence],
    cfg: &TrainConfig,
    step: usize,
) -> Result<(LossBreakdown, PhasePeaks)> {
    if batch.is_empty() {
        return Err(PipelineError::Input("empty batch".into()));
    }
    let views = Views::new(batch);
    let seeds = StepSeeds::new(cfg, step);
    let store_or_err = || {
        store.ok_or_else(|| PipelineError::Input("this step mode needs a feature store".into()))
    };
    match cfg.mode {
        StepMode::Staged => staged(model, store_or_err()?, &views, &seeds, cfg),
        StepMode::Joint => joint(model, store_or_err()?, &views, &seeds, cfg),
        StepMode::Augmented { extra_passes } => augmented(model, &views, &seeds, cfg, extra_passes),
    }
}

/// One optimisation step on `batch`; `step` numbers the step from 1 and
/// keys its dropout masks.
pub fn train_step(
    model: &mut Model,
    store: Option<&FeatureStore>,
    batch: &[&PreparedSentence],
    optimizer: &mut Optimizer,
    cfg: &TrainConfig,
    step: usize,
) -> Result<StepTrace> {
    let (losses, peaks) = accumulate_gradients(model, store, batch, cfg, step)?;
    if let Err(e) = check_finite(step, &losses) {
        model.zero_grads();
        return Err(e);
    }
    let moved = optimizer.step(model);
    Ok(StepTrace {
        step,
        losses,
        peaks,
        moved,
    })
}

fn staged(
    model: &mut Model,
    store: &FeatureStore,
    v: &Views,
    seeds: &StepSeeds,
    cfg: &TrainConfig,
) -> Result<(LossBreakdown, PhasePeaks)> {
    let LossConfig { tau, tau_prime, lambda } = cfg.loss;
    let layout = BatchLayout::from_sequences(&v.a)?;

    let (pair, pair_fwd) = mem_scope("pair_forward", || -> Result<(Tensor, Tensor, f64)> {
        let tape = Tape::no_grad();
        let enc = model.encoder.bind(&tape);
        let (hz, hzp) = pair_views(&tape, &enc, model, v, seeds)?;
        let l = loss_cl_on(&tape, &hz, &hzp, tau)?.item();
        Ok((hz.value().clone(), hzp.value().clone(), l))
    });
    let (hz, hzp, l_cl) = pair?;

    let (l_re, re_fwd) = mem_scope("reshaped_forward", || -> Result<f64> {
        let tape = Tape::no_grad();
        let enc = model.encoder.bind(&tape);
        let x = tape.constant(store.batch_tensor(&v.hashes, &v.texts)?);
        let hs = encode_reshaped_batch(&tape, &enc, &model.config, &x, &layout, Some(&seeds.re))?;
        let l = loss_re_on(&tape, &tape.constant(hz.clone()), &tape.constant(hzp.clone()), &hs, tau_prime)?;
        Ok(l.item())
    });
    let l_re = l_re?;

    let (c_cl, c_re) = gate_coefficients(l_cl, l_re, lambda);

    let (r, pair_bwd) = mem_scope("pair_backward", || -> Result<()> {
        let tape = Tape::new();
        let enc = model.encoder.bind(&tape);
        let (hz, hzp) = pair_views(&tape, &enc, model, v, seeds)?;
        let l = loss_cl_on(&tape, &hz, &hzp, tau)?;
        tape.backward(&l)?;
        model.encoder.absorb(&enc, c_cl);
        Ok(())
    });
    r?;

    let mut re_bwd = crate::tensor::ScopeReport::default();
    if c_re > 0.0 {
        let (r, report) = mem_scope("reshaped_backward", || -> Result<()> {
            let tape = Tape::new();
            let enc = model.encoder.bind(&tape);
            let proj = model.projection.bind(&tape);
            let live = reshape_batch_on(&tape, &v.a, &proj, model.id_scale())?;
            let x = tape.straight_through(&live, store.batch_tensor(&v.hashes, &v.texts)?)?;
            let hs = encode_reshaped_batch(&tape, &enc, &model.config, &x, &layout, Some(&seeds.re))?;
            let l = loss_re_on(&tape, &tape.constant(hz.clone()), &tape.constant(hzp.clone()), &hs, tau_prime)?;
            tape.backward(&l)?;
            model.encoder.absorb(&enc, c_re);
            model.projection.absorb(&proj, c_re);
            Ok(())
        });
        r?;
        re_bwd = report;
    }

    Ok((
        LossBreakdown::new(l_cl, l_re, lambda),
        PhasePeaks {
            pair_forward: pair_fwd.peak_bytes,
            reshaped_forward: re_fwd.peak_bytes,
            pair_backward: pair_bwd.peak_bytes,
            reshaped_backward: re_bwd.peak_bytes,
        },
    ))
}

fn joint(
    model: &mut Model,
    store: &FeatureStore,
    v: &Views,
    seeds: &StepSeeds,
    cfg: &TrainConfig,
) -> Result<(LossBreakdown, PhasePeaks)> {
    let LossConfig { tau, tau_prime, lambda } = cfg.loss;
    let layout = BatchLayout::from_sequences(&v.a)?;
    let tape = Tape::new();
    let enc = model.encoder.bind(&tape);
    let proj = model.projection.bind(&tape);

    let (fwd, fwd_report) = mem_scope("joint_forward", || -> Result<(Var, f64, f64)> {
        let (hz, hzp) = pair_views(&tape, &enc, model, v, seeds)?;
        let live = reshape_batch_on(&tape, &v.a, &proj, model.id_scale())?;
        let x = tape.straight_through(&live, store.batch_tensor(&v.hashes, &v.texts)?)?;
        let hs = encode_reshaped_batch(&tape, &enc, &model.config, &x, &layout, Some(&seeds.re))?;
        let l_cl = loss_cl_on(&tape, &hz, &hzp, tau)?;
        let l_re = loss_re_on(&tape, &hz, &hzp, &hs, tau_prime)?;
        let (c_cl, c_re) = gate_coefficients(l_cl.item(), l_re.item(), lambda);
        let total = tape.add(&tape.scale(&l_cl, c_cl), &tape.scale(&l_re, c_re))?;
        Ok((total, l_cl.item(), l_re.item()))
    });
    let (total, l_cl, l_re) = fwd?;

    let (r, bwd_report) = mem_scope("joint_backward", || -> Result<()> {
        tape.backward(&total)?;
        model.encoder.absorb(&enc, 1.0);
        model.projection.absorb(&proj, 1.0);
        Ok(())
    });
    r?;

    Ok((
        LossBreakdown::new(l_cl, l_re, lambda),
        PhasePeaks {
            pair_forward: fwd_report.peak_bytes,
            pair_backward: bwd_report.peak_bytes,
            ..PhasePeaks::default()
        },
    ))
}

fn augmented(
    model: &mut Model,
    v: &Views,
    seeds: &StepSeeds,
    cfg: &TrainConfig,
    extra_passes: usize,
) -> Result<(LossBreakdown, PhasePeaks)> {
    let tau = cfg.loss.tau;
    let tape = Tape::new();
    let enc = model.encoder.bind(&tape);

    let (fwd, fwd_report) = mem_scope("augmented_forward", || -> Result<(Var, f64)> {
        let (hz, hzp) = pair_views(&tape, &enc, model, v, seeds)?;
        let l_cl = loss_cl_on(&tape, &hz, &hzp, tau)?;
        let mut total = l_cl.clone();
        for k in 0..extra_passes {
            let he = encode_token_batch(&tape, &enc, &model.config, &v.a, Some(&seeds.extra(k)))?;
            total = tape.add(&total, &info_nce_on(&tape, &hz, &he, tau)?)?;
        }
        Ok((total, l_cl.item()))
    });
    let (total, l_cl) = fwd?;

    let (r, bwd_report) = mem_scope("augmented_backward", || -> Result<()> {
        tape.backward(&total)?;
        model.encoder.absorb(&enc, 1.0);
        Ok(())
    });
    r?;

    Ok((
        LossBreakdown {
            l_cl,
            l_re: 0.0,
            combined: total.item(),
            gate_re_active: false,
        },
        PhasePeaks {
            pair_forward: fwd_report.peak_bytes,
            pair_backward: bwd_report.peak_bytes,
            ..PhasePeaks::default()
        },
    ))
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Model with the best dev correlation (the final model without dev data).
    pub best: Model,
    pub best_step: usize,
    pub final_model: Model,
    /// `(step, dev ρ)` at every evaluation, starting with step 0.
    pub dev_history: Vec<(usize, f64)>,
    pub traces: Vec<StepTrace>,
}

impl TrainOutcome {
    pub fn best_dev_rho(&self) -> Option<f64> {
        self.dev_history
            .iter()
            .find(|(s, _)| *s == self.best_step)
            .map(|(_, r)| *r)
    }

    pub fn initial_dev_rho(&self) -> Option<f64> {
        self.dev_history.first().map(|(_, r)| *r)
    }
}

/// Stage 2. Shuffles per epoch, drops the ragged final batch, evaluates on
/// `dev` at step 0, every `eval_every_steps` steps and after the last step,
/// and keeps the best model. `on_step` sees every step trace as it happens.
///
/// Staged and joint modes need a store; without one it is built in memory
/// from the model's current projection.
pub fn train<S: AsRef<str>>(
    mut model: Model,
    corpus: &[S],
    dev: &[StsPair],
    store: Option<FeatureStore>,
    cfg: &TrainConfig,
    mut on_step: impl FnMut(&StepTrace),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if corpus.len() < cfg.batch_size {
        return Err(PipelineError::Input(format!(
            "corpus has {} sentences, fewer than one batch of {}",
            corpus.len(),
            cfg.batch_size
        )));
    }
    let needs_store = matches!(cfg.mode, StepMode::Staged | StepMode::Joint);
    let mut store = match store {
        Some(s) if s.l_max() != model.config.l_max => {
            return Err(PipelineError::Input(format!(
                "store l_max {} does not match model l_max {}",
                s.l_max(),
                model.config.l_max
            )))
        }
        Some(s) => Some(s),
        None if needs_store => Some(FeatureStore::build(corpus, &model)?),
        None => None,
    };

    let prepared = prepare_corpus(corpus, &model)?;
    if let Some(s) = &store {
        if let Some(missing) = prepared.iter().find(|p| s.lookup(p.hash).is_none()) {
            return Err(PipelineError::Staging {
                hash: missing.hash,
                sentence: missing.text.clone(),
            });
        }
    }
    let steps_per_epoch = prepared.len() / cfg.batch_size;
    let total_steps = steps_per_epoch * cfg.epochs;
    let stream = cfg.stream();
    let mut optimizer = cfg.optimizer();

    let mut dev_history = Vec::new();
    let mut best = (model.clone(), 0usize, f64::NEG_INFINITY);
    let mut evaluate = |model: &Model, step: usize, hist: &mut Vec<(usize, f64)>| -> Result<()> {
        if dev.is_empty() {
            return Ok(());
        }
        let rho = eval::dev_spearman(model, dev)?;
        log::info!("step {step}: dev spearman {rho:.4}");
        hist.push((step, rho));
        if rho > best.2 {
            best = (model.clone(), step, rho);
        }
        Ok(())
    };
    evaluate(&model, 0, &mut dev_history)?;

    let mut traces = Vec::with_capacity(total_steps);
    let mut step = 0;
    for epoch in 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..prepared.len()).collect();
        stream.split(&format!("epoch{epoch}")).shuffle(&mut order);
        for chunk in order.chunks_exact(cfg.batch_size) {
            step += 1;
            let batch: Vec<&PreparedSentence> = chunk.iter().map(|&i| &prepared[i]).collect();
            let trace = train_step(&mut model, store.as_ref(), &batch, &mut optimizer, cfg, step)?;
            log::debug!("{}", trace.to_log_line());
            on_step(&trace);
            traces.push(trace);
            if step % cfg.eval_every_steps == 0 || step == total_steps {
                evaluate(&model, step, &mut dev_history)?;
            }
        }
        let refresh = cfg.refresh_every_epochs;
        if needs_store && refresh > 0 && epoch % refresh == 0 && epoch < cfg.epochs {
            store = Some(FeatureStore::build(corpus, &model)?);
            log::info!("epoch {epoch}: refreshed feature store");
        }
    }

    let (best_model, best_step) = if dev.is_empty() {
        (model.clone(), step)
    } else {
        (best.0, best.1)
    };
    Ok(TrainOutcome {
        best: best_model,
        best_step,
        final_model: model,
        dev_history,
        traces,
    })
}
