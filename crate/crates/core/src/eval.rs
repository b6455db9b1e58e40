//! Similarity scoring, rank correlation, polarity histograms and the
//! memory comparison across training layouts.

use std::fmt::Write as _;

use thiserror::Error;

use crate::encoder::EncoderConfig;
use crate::pipeline::{
    prepare_corpus, train_step, training_vocab, FeatureStore, Model, PipelineError,
    PreparedSentence, StepMode, TrainConfig,
};
use crate::tensor::{cosine_sim, mem_scope, SeededRng};
use crate::text::StsPair;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("need at least 2 values, got {0}")]
    TooFew(usize),
    #[error("length mismatch: {0} estimated vs {1} gold")]
    LengthMismatch(usize, usize),
    #[error("ranks are undefined: the {0} list is constant")]
    ConstantRanks(&'static str),
    #[error("bin count must be a positive multiple of 3, got {0}")]
    Bins(usize),
    #[error("score {value} at index {index} is outside [0, 1]")]
    ScoreRange { index: usize, value: f64 },
    #[error("no scores")]
    Empty,
    #[error(transparent)]
    Pipeline(#[from] Box<PipelineError>),
}

impl From<PipelineError> for EvalError {
    fn from(e: PipelineError) -> Self {
        EvalError::Pipeline(Box::new(e))
    }
}

pub type Result<T, E = EvalError> = std::result::Result<T, E>;

/// 1-based ranks; tied values share the mean of the ranks they span.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = rank;
        }
        i = j + 1;
    }
    ranks
}

/// `1 - Σ(R_E - R_G)² / ((n³ - n) / 6)` over average ranks.
pub fn spearman_rho(estimated: &[f64], gold: &[f64]) -> Result<f64> {
    if estimated.len() != gold.len() {
        return Err(EvalError::LengthMismatch(estimated.len(), gold.len()));
    }
    let n = estimated.len();
    if n < 2 {
        return Err(EvalError::TooFew(n));
    }
    let constant = |v: &[f64]| v.iter().all(|x| *x == v[0]);
    if constant(estimated) {
        return Err(EvalError::ConstantRanks("estimated"));
    }
    if constant(gold) {
        return Err(EvalError::ConstantRanks("gold"));
    }
    let re = average_ranks(estimated);
    let rg = average_ranks(gold);
    let d2: f64 = re.iter().zip(&rg).map(|(a, b)| (a - b) * (a - b)).sum();
    let n = n as f64;
    Ok(1.0 - d2 / ((n * n * n - n) / 6.0))
}

/// `(cos + 1) / 2`
pub fn normalized_score(cos: f64) -> f64 {
    (cos + 1.0) / 2.0
}

/// Raw cosine between the dropout-free prompt-A embeddings of both sides.
pub fn predict_similarity(model: &Model, pair: &StsPair) -> Result<f64> {
    Ok(score_pairs(model, std::slice::from_ref(pair))?[0])
}

/// Raw cosines for every pair, encoding sentences in batches.
pub fn score_pairs(model: &Model, pairs: &[StsPair]) -> Result<Vec<f64>> {
    let sentences: Vec<&str> = pairs
        .iter()
        .flat_map(|p| [p.sentence_a.as_str(), p.sentence_b.as_str()])
        .collect();
    let h = model.embed(&sentences).map_err(EvalError::from)?;
    (0..pairs.len())
        .map(|i| Ok(cosine_sim(h.row(2 * i), h.row(2 * i + 1)).map_err(PipelineError::from)?))
        .collect()
}

pub fn dev_spearman(model: &Model, pairs: &[StsPair]) -> Result<f64> {
    let est = score_pairs(model, pairs)?;
    let gold: Vec<f64> = pairs.iter().map(|p| p.gold).collect();
    spearman_rho(&est, &gold)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalRow {
    pub name: String,
    pub n_pairs: usize,
    pub rho: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    pub average: f64,
}

impl EvalReport {
    pub fn rho(&self, name: &str) -> Option<f64> {
        self.rows.iter().find(|r| r.name == name).map(|r| r.rho)
    }

    /// Aligned table, ρ × 100.
    pub fn to_table(&self) -> String {
        let width = self
            .rows
            .iter()
            .map(|r| r.name.chars().count())
            .chain(["average".len(), "dataset".len()])
            .max()
            .unwrap_or(0);
        let mut out = format!("{:<width$}  {:>7}  {:>7}\n", "dataset", "pairs", "rho");
        for r in &self.rows {
            let _ = writeln!(out, "{:<width$}  {:>7}  {:>7.2}", r.name, r.n_pairs, r.rho * 100.0);
        }
        let _ = writeln!(out, "{:<width$}  {:>7}  {:>7.2}", "average", "", self.average * 100.0);
        out
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::from("dataset\tn_pairs\trho\n");
        for r in &self.rows {
            let _ = writeln!(out, "{}\t{}\t{:.16e}", r.name, r.n_pairs, r.rho);
        }
        let _ = writeln!(out, "average\t\t{:.16e}", self.average);
        out
    }
}

pub fn evaluate<S: AsRef<str>>(model: &Model, datasets: &[(S, Vec<StsPair>)]) -> Result<EvalReport> {
    if datasets.is_empty() {
        return Err(EvalError::Empty);
    }
    let rows = datasets
        .iter()
        .map(|(name, pairs)| {
            Ok(EvalRow {
                name: name.as_ref().to_string(),
                n_pairs: pairs.len(),
                rho: dev_spearman(model, pairs)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let average = rows.iter().map(|r| r.rho).sum::<f64>() / rows.len() as f64;
    Ok(EvalReport { rows, average })
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolarityReport {
    pub histogram: Vec<usize>,
    pub polarity_index: f64,
    pub n_pairs: usize,
}

impl PolarityReport {
    pub fn bins(&self) -> usize {
        self.histogram.len()
    }

    /// Mass fractions of the low, middle and high thirds of the bins.
    pub fn tertiles(&self) -> (f64, f64, f64) {
        let third = self.bins() / 3;
        let n = self.n_pairs as f64;
        let mass = |r: std::ops::Range<usize>| self.histogram[r].iter().sum::<usize>() as f64 / n;
        (
            mass(0..third),
            mass(third..2 * third),
            mass(2 * third..self.bins()),
        )
    }

    pub fn to_table(&self) -> String {
        let (lo, mid, hi) = self.tertiles();
        let mut out = format!(
            "pairs           {}\npolarity_index  {:.6}\ntertiles        {:.4} {:.4} {:.4}\n\n{:>6}  {:>6}  {:>7}\n",
            self.n_pairs, self.polarity_index, lo, mid, hi, "lo", "hi", "count"
        );
        for (i, c) in self.histogram.iter().enumerate() {
            let (a, b) = self.edges(i);
            let _ = writeln!(out, "{a:>6.3}  {b:>6.3}  {c:>7}");
        }
        out
    }

    pub fn to_tsv(&self) -> String {
        let (lo, mid, hi) = self.tertiles();
        format!(
            "n_pairs\tpolarity_index\tf_low\tf_mid\tf_high\n{}\t{:.16e}\t{:.16e}\t{:.16e}\t{:.16e}\n",
            self.n_pairs, self.polarity_index, lo, mid, hi
        )
    }

    pub fn histogram_tsv(&self) -> String {
        let mut out = String::from("bin_lo\tbin_hi\tcount\n");
        for (i, c) in self.histogram.iter().enumerate() {
            let (a, b) = self.edges(i);
            let _ = writeln!(out, "{a}\t{b}\t{c}");
        }
        out
    }

    fn edges(&self, i: usize) -> (f64, f64) {
        let k = self.bins() as f64;
        (i as f64 / k, (i + 1) as f64 / k)
    }
}

/// Equal-width histogram of scores in `[0, 1]` over `k` bins (the last bin
/// is closed) and `index = (f_low + f_high) / 2 - f_mid`.
pub fn polarity_analysis(scores: &[f64], k: usize) -> Result<PolarityReport> {
    if k < 3 || !k.is_multiple_of(3) {
        return Err(EvalError::Bins(k));
    }
    if scores.is_empty() {
        return Err(EvalError::Empty);
    }
    let mut histogram = vec![0usize; k];
    for (index, &s) in scores.iter().enumerate() {
        if !(0.0..=1.0).contains(&s) {
            return Err(EvalError::ScoreRange { index, value: s });
        }
        histogram[((s * k as f64) as usize).min(k - 1)] += 1;
    }
    let mut report = PolarityReport {
        histogram,
        polarity_index: 0.0,
        n_pairs: scores.len(),
    };
    let (lo, mid, hi) = report.tertiles();
    report.polarity_index = (lo + hi) / 2.0 - mid;
    Ok(report)
}

#[derive(Debug, Clone)]
pub struct MembenchConfig {
    pub encoder: EncoderConfig,
    pub train: TrainConfig,
    pub normalize_ids: bool,
    pub vocab_min_count: usize,
    /// Cap on steps per variant; `None` runs a full epoch.
    pub max_steps: Option<usize>,
}

impl Default for MembenchConfig {
    fn default() -> Self {
        MembenchConfig {
            encoder: EncoderConfig::default(),
            train: TrainConfig::default(),
            normalize_ids: false,
            vocab_min_count: 1,
            max_steps: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MembenchRow {
    pub variant: &'static str,
    /// Token-encoder passes alive together at the peak.
    pub passes: usize,
    pub peak_bytes: u64,
    pub ratio: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MembenchReport {
    pub rows: Vec<MembenchRow>,
}

impl MembenchReport {
    pub fn row(&self, variant: &str) -> Option<&MembenchRow> {
        self.rows.iter().find(|r| r.variant == variant)
    }

    pub fn to_table(&self) -> String {
        let mut out = format!("{:<20}  {:>6}  {:>12}  {:>6}\n", "variant", "passes", "peak_bytes", "ratio");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{:<20}  {:>6}  {:>12}  {:>6.3}",
                r.variant, r.passes, r.peak_bytes, r.ratio
            );
        }
        out
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::from("variant\tpasses\tpeak_bytes\tratio\n");
        for r in &self.rows {
            let _ = writeln!(out, "{}\t{}\t{}\t{:.16e}", r.variant, r.passes, r.peak_bytes, r.ratio);
        }
        out
    }
}

pub const MEMBENCH_VARIANTS: [(&str, StepMode, usize); 5] = [
    ("baseline-pair", StepMode::Augmented { extra_passes: 0 }, 2),
    ("staged-recse", StepMode::Staged, 2),
    ("joint-recse", StepMode::Joint, 3),
    ("joint-plus-1-extra", StepMode::Augmented { extra_passes: 1 }, 3),
    ("joint-plus-2-extra", StepMode::Augmented { extra_passes: 2 }, 4),
];

/// Peak live tensor bytes of one epoch per variant, everything (model,
/// store, graphs) allocated inside the measured scope.
pub fn membench<S: AsRef<str>>(corpus: &[S], cfg: &MembenchConfig) -> Result<MembenchReport> {
    cfg.train.validate()?;
    let vocab = training_vocab(corpus, cfg.vocab_min_count)?;
    let mut rows: Vec<MembenchRow> = Vec::new();
    for (variant, mode, passes) in MEMBENCH_VARIANTS {
        let train = TrainConfig { mode, ..cfg.train.clone() };
        let (r, report) = mem_scope(variant, || -> Result<()> {
            let mut model = Model::init(
                cfg.encoder.clone(),
                vocab.clone(),
                cfg.normalize_ids,
                &SeededRng::new(train.seed),
            )?;
            let store = match mode {
                StepMode::Augmented { .. } => None,
                _ => Some(FeatureStore::build(corpus, &model)?),
            };
            let prepared = prepare_corpus(corpus, &model)?;
            let mut order: Vec<usize> = (0..prepared.len()).collect();
            SeededRng::new(train.seed).split("train").split("epoch1").shuffle(&mut order);
            let steps = order.len() / train.batch_size;
            let steps = cfg.max_steps.map_or(steps, |m| m.min(steps));
            if steps == 0 {
                return Err(PipelineError::Input(format!(
                    "corpus has {} sentences, fewer than one batch of {}",
                    prepared.len(),
                    train.batch_size
                ))
                .into());
            }
            let mut optimizer = train.optimizer();
            for (i, chunk) in order.chunks_exact(train.batch_size).take(steps).enumerate() {
                let batch: Vec<&PreparedSentence> = chunk.iter().map(|&j| &prepared[j]).collect();
                train_step(&mut model, store.as_ref(), &batch, &mut optimizer, &train, i + 1)?;
            }
            Ok(())
        });
        r?;
        rows.push(MembenchRow {
            variant,
            passes,
            peak_bytes: report.peak_bytes,
            ratio: 0.0,
        });
        log::info!("membench {variant}: peak {} bytes", report.peak_bytes);
    }
    let base = rows[0].peak_bytes as f64;
    for r in &mut rows {
        r.ratio = r.peak_bytes as f64 / base;
    }
    Ok(MembenchReport { rows })
}
