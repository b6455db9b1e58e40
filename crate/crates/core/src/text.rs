//! Corpus handling: vocabulary, tokenizer, prompt templates, synthetic
//! corpus and similarity pairs, and their on-disk formats.

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::tensor::SeededRng;

pub const PAD: u32 = 0;
pub const UNK: u32 = 1;
pub const MASK: u32 = 2;
pub const BOS: u32 = 3;
pub const EOS: u32 = 4;

const RESERVED: [&str; 5] = ["[PAD]", "[UNK]", "[MASK]", "[BOS]", "[EOS]"];
const MASK_LITERAL: &str = "[MASK]";
const VOCAB_MAGIC: &str = "RECSE-VOCAB-1";
const STS_HEADER: &str = "sentence_a\tsentence_b\tgold";

pub const DEFAULT_L_MAX: usize = 32;

#[derive(Debug, Error)]
pub enum TextError {
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("sentence is empty")]
    EmptySentence,
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {detail}")]
    Format {
        path: PathBuf,
        line: usize,
        detail: String,
    },
}

impl TextError {
    fn io(path: &Path, source: std::io::Error) -> Self {
        TextError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

/// Token ↔ id map. Ids 0..5 are reserved (`[PAD] [UNK] [MASK] [BOS] [EOS]`),
/// the rest follow frequency order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    token_to_id: HashMap<String, u32>,
    id_to_token: Vec<String>,
}

impl Vocab {
    fn from_tokens(id_to_token: Vec<String>) -> Self {
        let token_to_id = id_to_token
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Vocab {
            token_to_id,
            id_to_token,
        }
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        self.id_to_token.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.token_to_id.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.id_to_token.get(id as usize).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.id_to_token
    }

    /// Rebuilds from an id-ordered token list, checking the reserved prefix
    /// and uniqueness.
    pub fn from_token_list(tokens: Vec<String>) -> Result<Self, String> {
        if tokens.len() < RESERVED.len()
            || tokens.iter().zip(RESERVED).any(|(t, r)| t != r)
        {
            return Err("reserved tokens missing or out of order".into());
        }
        let unique: BTreeSet<&String> = tokens.iter().collect();
        if unique.len() != tokens.len() {
            return Err("duplicate token".into());
        }
        Ok(Self::from_tokens(tokens))
    }

    pub fn write(&self, path: &Path) -> Result<(), TextError> {
        let mut out = format!("{VOCAB_MAGIC}\n{}\n", self.len());
        for t in &self.id_to_token {
            out.push_str(t);
            out.push('\n');
        }
        fs::write(path, out).map_err(|e| TextError::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self, TextError> {
        let text = fs::read_to_string(path).map_err(|e| TextError::io(path, e))?;
        let fmt = |line: usize, detail: &str| TextError::Format {
            path: path.to_path_buf(),
            line,
            detail: detail.to_string(),
        };
        let mut lines = text.lines();
        if lines.next() != Some(VOCAB_MAGIC) {
            return Err(fmt(1, "bad vocab magic"));
        }
        let count: usize = lines
            .next()
            .and_then(|l| l.trim().parse().ok())
            .ok_or_else(|| fmt(2, "bad token count"))?;
        let tokens: Vec<String> = lines.map(str::to_string).collect();
        if tokens.len() != count {
            return Err(fmt(3, "token count does not match header"));
        }
        Self::from_token_list(tokens).map_err(|d| fmt(3, &d))
    }
}

/// Splits text into lowercased word tokens and single-character punctuation
/// tokens. The literal `[MASK]` survives as one token.
pub fn split_tokens(s: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    let mut word = String::new();
    let mut rest = s;
    while let Some(c) = rest.chars().next() {
        if rest.starts_with(MASK_LITERAL) {
            flush_word(&mut word, &mut tokens);
            tokens.push(MASK_LITERAL.to_string());
            rest = &rest[MASK_LITERAL.len()..];
            continue;
        }
        if c.is_alphanumeric() {
            word.extend(c.to_lowercase());
        } else {
            flush_word(&mut word, &mut tokens);
            if !c.is_whitespace() {
                tokens.push(c.to_lowercase().collect());
            }
        }
        rest = &rest[c.len_utf8()..];
    }
    flush_word(&mut word, &mut tokens);
    tokens
}

fn flush_word(word: &mut String, tokens: &mut Vec<String>) {
    if !word.is_empty() {
        tokens.push(std::mem::take(word));
    }
}

/// Builds a vocabulary from every token seen at least `min_count` times.
/// Ordering is frequency descending, ties lexicographic.
pub fn build_vocab<S: AsRef<str>>(corpus: &[S], min_count: usize) -> Result<Vocab, TextError> {
    if corpus.is_empty() {
        return Err(TextError::EmptyCorpus);
    }
    let mut counts: HashMap<String, usize> = HashMap::new();
    for line in corpus {
        for tok in split_tokens(line.as_ref()) {
            if !RESERVED.contains(&tok.as_str()) {
                *counts.entry(tok).or_insert(0) += 1;
            }
        }
    }
    let mut kept: Vec<(String, usize)> = counts
        .into_iter()
        .filter(|(_, c)| *c >= min_count.max(1))
        .collect();
    kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    let tokens = RESERVED
        .iter()
        .map(|s| s.to_string())
        .chain(kept.into_iter().map(|(t, _)| t))
        .collect();
    Ok(Vocab::from_tokens(tokens))
}

/// Padded token ids for one sentence.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TokenSequence {
    pub ids: Vec<u32>,
    /// `true` at real-token positions.
    pub pad_mask: Vec<bool>,
    pub mask_pos: Option<usize>,
}

impl TokenSequence {
    /// Number of real tokens.
    pub fn len_real(&self) -> usize {
        self.pad_mask.iter().filter(|m| **m).count()
    }

    pub fn l_max(&self) -> usize {
        self.ids.len()
    }

    /// Empty input: nothing but padding.
    pub fn is_degenerate(&self) -> bool {
        self.len_real() == 0
    }

    /// Content hash over ids, pad mask and mask position.
    pub fn content_hash(&self) -> u64 {
        let mut h = Sha256::new();
        h.update((self.ids.len() as u64).to_le_bytes());
        for id in &self.ids {
            h.update(id.to_le_bytes());
        }
        for m in &self.pad_mask {
            h.update([*m as u8]);
        }
        h.update(
            self.mask_pos
                .map(|p| p as u64)
                .unwrap_or(u64::MAX)
                .to_le_bytes(),
        );
        let d = h.finalize();
        u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
    }
}

/// Lowercases, splits on whitespace and punctuation, maps unknown tokens to
/// `[UNK]`, truncates to `l_max` and pads with `[PAD]`.
///
/// # Panics
/// If `l_max < 4`.
pub fn tokenize(s: &str, vocab: &Vocab, l_max: usize) -> TokenSequence {
    assert!(l_max >= 4, "l_max must be at least 4");
    let mut ids: Vec<u32> = split_tokens(s)
        .iter()
        .take(l_max)
        .map(|t| vocab.id(t).unwrap_or(UNK))
        .collect();
    let n = ids.len();
    let mask_pos = ids.iter().position(|&id| id == MASK);
    ids.resize(l_max, PAD);
    let pad_mask = (0..l_max).map(|i| i < n).collect();
    TokenSequence {
        ids,
        pad_mask,
        mask_pos,
    }
}

/// Space-joined tokens of the real positions.
pub fn detokenize(seq: &TokenSequence, vocab: &Vocab) -> String {
    seq.ids
        .iter()
        .zip(&seq.pad_mask)
        .filter(|(_, m)| **m)
        .map(|(id, _)| vocab.token(*id).unwrap_or("[UNK]"))
        .collect::<Vec<_>>()
        .join(" ")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PromptVariant {
    A,
    B,
}

/// Wraps a sentence in one of the two prompt templates.
pub fn apply_prompt(s: &str, variant: PromptVariant) -> Result<String, TextError> {
    if s.trim().is_empty() {
        return Err(TextError::EmptySentence);
    }
    Ok(match variant {
        PromptVariant::A => format!("The sentence : \" {s} \" mean [MASK]."),
        PromptVariant::B => format!("The sentence of \" {s} \" means [MASK]."),
    })
}

/// Sentence pair with a graded similarity score in `[0, 3]`.
#[derive(Debug, Clone, PartialEq)]
pub struct StsPair {
    pub sentence_a: String,
    pub sentence_b: String,
    pub gold: f64,
}

pub fn write_corpus<S: AsRef<str>>(path: &Path, corpus: &[S]) -> Result<(), TextError> {
    let mut f = fs::File::create(path).map_err(|e| TextError::io(path, e))?;
    for line in corpus {
        writeln!(f, "{}", line.as_ref()).map_err(|e| TextError::io(path, e))?;
    }
    Ok(())
}

/// One sentence per line; blank lines are skipped.
pub fn read_corpus(path: &Path) -> Result<Vec<String>, TextError> {
    let text = fs::read_to_string(path).map_err(|e| TextError::io(path, e))?;
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(str::to_string)
        .collect())
}

pub fn write_pairs(path: &Path, pairs: &[StsPair]) -> Result<(), TextError> {
    let mut out = format!("{STS_HEADER}\n");
    for p in pairs {
        out.push_str(&format!("{}\t{}\t{}\n", p.sentence_a, p.sentence_b, p.gold));
    }
    fs::write(path, out).map_err(|e| TextError::io(path, e))
}

/// Reads a pair TSV. The header line is optional.
pub fn read_pairs(path: &Path) -> Result<Vec<StsPair>, TextError> {
    let text = fs::read_to_string(path).map_err(|e| TextError::io(path, e))?;
    let mut pairs = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() || (i == 0 && line == STS_HEADER) {
            continue;
        }
        let fmt = |detail: &str| TextError::Format {
            path: path.to_path_buf(),
            line: i + 1,
            detail: detail.to_string(),
        };
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 3 {
            return Err(fmt("expected 3 tab-separated columns"));
        }
        let gold: f64 = cols[2].trim().parse().map_err(|_| fmt("gold is not a number"))?;
        if !gold.is_finite() {
            return Err(fmt("gold is not finite"));
        }
        pairs.push(StsPair {
            sentence_a: cols[0].to_string(),
            sentence_b: cols[1].to_string(),
            gold,
        });
    }
    Ok(pairs)
}

// ---- synthetic data -----------------------------------------------------

const SUBJECTS: [&str; 20] = [
    "cat", "dog", "bird", "horse", "child", "farmer", "teacher", "doctor", "sailor", "pilot",
    "king", "queen", "baker", "painter", "student", "soldier", "fox", "rabbit", "lawyer", "monk",
];
const VERBS: [&str; 16] = [
    "chased", "watched", "helped", "found", "painted", "visited", "followed", "carried",
    "greeted", "pushed", "cleaned", "dropped", "bought", "opened", "repaired", "lifted",
];
const OBJECTS: [&str; 20] = [
    "ball", "box", "tree", "car", "book", "lamp", "boat", "cake", "hat", "chair", "door",
    "letter", "basket", "bottle", "clock", "drum", "kite", "map", "rope", "window",
];
/// Adjective synonym pairs; a paraphrase swaps to the partner.
const ADJECTIVES: [(&str, &str); 8] = [
    ("small", "little"),
    ("big", "large"),
    ("happy", "glad"),
    ("quick", "fast"),
    ("quiet", "silent"),
    ("angry", "mad"),
    ("clever", "smart"),
    ("tired", "weary"),
];
/// Every filler is three tokens and every frame seven, so all corpus
/// sentences have the same length and `[MASK]` sits at the same position.
const FILLERS: [&str; 4] = ["in the morning", "near the river", "at the market", "after the rain"];
/// Determiner pairs; frames keep content words in place.
const FRAMES: [(&str, &str); 4] = [("the", "the"), ("a", "a"), ("one", "some"), ("that", "this")];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
struct Slots {
    subject: usize,
    verb: usize,
    object: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
struct Surface {
    frame: usize,
    adjective: usize,
    synonym: bool,
    filler: usize,
}

fn render(slots: Slots, surface: Surface) -> String {
    let (a, b) = ADJECTIVES[surface.adjective];
    let adj = if surface.synonym { b } else { a };
    let (d1, d2) = FRAMES[surface.frame];
    format!(
        "{d1} {adj} {} {} {d2} {} {}",
        SUBJECTS[slots.subject],
        VERBS[slots.verb],
        OBJECTS[slots.object],
        FILLERS[surface.filler]
    )
}

fn random_slots(rng: &mut SeededRng) -> Slots {
    Slots {
        subject: rng.below(SUBJECTS.len()),
        verb: rng.below(VERBS.len()),
        object: rng.below(OBJECTS.len()),
    }
}

fn random_surface(rng: &mut SeededRng) -> Surface {
    Surface {
        frame: rng.below(FRAMES.len()),
        adjective: rng.below(ADJECTIVES.len()),
        synonym: rng.below(2) == 1,
        filler: rng.below(FILLERS.len()),
    }
}

fn other_index(rng: &mut SeededRng, current: usize, n: usize) -> usize {
    (current + 1 + rng.below(n - 1)) % n
}

/// Changes `count` distinct content slots.
fn change_slots(rng: &mut SeededRng, mut slots: Slots, count: usize) -> Slots {
    let mut which = [0usize, 1, 2];
    rng.shuffle(&mut which);
    for &w in &which[..count] {
        match w {
            0 => slots.subject = other_index(rng, slots.subject, SUBJECTS.len()),
            1 => slots.verb = other_index(rng, slots.verb, VERBS.len()),
            _ => slots.object = other_index(rng, slots.object, OBJECTS.len()),
        }
    }
    slots
}

/// Same meaning, different wording: another frame and filler, and the
/// adjective's synonym.
fn paraphrase(rng: &mut SeededRng, surface: Surface) -> Surface {
    Surface {
        frame: other_index(rng, surface.frame, FRAMES.len()),
        filler: other_index(rng, surface.filler, FILLERS.len()),
        synonym: !surface.synonym,
        ..surface
    }
}

/// Deterministic synthetic corpus and graded pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthData {
    pub corpus: Vec<String>,
    pub pairs: Vec<StsPair>,
}

/// Generates `size` distinct corpus sentences and `size` graded pairs.
///
/// Each sentence carries three content slots (subject, verb, object) and a
/// surface form (frame, adjective, filler). The second sentence of every
/// pair is a paraphrase of the first (new frame and filler, adjective
/// synonym) with `3 - gold` content slots replaced; gold 0 also draws a new
/// adjective, so the two sides share nothing but function words. Gold
/// labels are stratified so each grade appears `size / 4` times, up to
/// rounding.
pub fn gen_synth_corpus(rng: &SeededRng, size: usize) -> SynthData {
    let mut corpus_rng = rng.split("corpus");
    let mut seen = BTreeSet::new();
    let mut corpus = Vec::with_capacity(size);
    while corpus.len() < size {
        let s = render(random_slots(&mut corpus_rng), random_surface(&mut corpus_rng));
        if seen.insert(s.clone()) {
            corpus.push(s);
        }
    }

    let mut pair_rng = rng.split("pairs");
    let mut golds: Vec<u8> = (0..size).map(|i| (i % 4) as u8).collect();
    pair_rng.shuffle(&mut golds);
    let pairs = golds
        .into_iter()
        .map(|gold| {
            let slots = random_slots(&mut pair_rng);
            let surface = random_surface(&mut pair_rng);
            let slots_b = change_slots(&mut pair_rng, slots, 3 - gold as usize);
            let mut surface_b = paraphrase(&mut pair_rng, surface);
            if gold == 0 {
                surface_b.adjective = other_index(&mut pair_rng, surface.adjective, ADJECTIVES.len());
            }
            StsPair {
                sentence_a: render(slots, surface),
                sentence_b: render(slots_b, surface_b),
                gold: gold as f64,
            }
        })
        .collect();
    SynthData { corpus, pairs }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_vocab() -> Vocab {
        build_vocab(&["hello world", "hello"], 1).unwrap()
    }

    #[test]
    fn vocab_reserved_and_counts() {
        let v = build_vocab(&["a b", "a"], 1).unwrap();
        assert_eq!(v.len(), 7);
        assert_eq!(v.id("[MASK]"), Some(MASK));
        assert_eq!(v.id("a"), Some(5));
        assert_eq!(v.id("b"), Some(6));

        let v2 = build_vocab(&["a b", "a"], 2).unwrap();
        assert_eq!(v2.len(), 6);
        assert_eq!(tokenize("b", &v2, 4).ids[0], UNK);
        assert_eq!(build_vocab(&["a b", "a"], 1).unwrap(), v);
    }

    #[test]
    fn empty_corpus_rejected() {
        let empty: [&str; 0] = [];
        assert!(matches!(build_vocab(&empty, 1), Err(TextError::EmptyCorpus)));
    }

    #[test]
    fn tokenize_pads_and_counts() {
        let v = small_vocab();
        let seq = tokenize("Hello world", &v, 5);
        assert_eq!(seq.ids, vec![v.id("hello").unwrap(), v.id("world").unwrap(), 0, 0, 0]);
        assert_eq!(seq.len_real(), 2);
        assert_eq!(seq.mask_pos, None);

        let empty = tokenize("", &v, 5);
        assert!(empty.is_degenerate());
        assert!(empty.ids.iter().all(|&i| i == PAD));

        let long = tokenize("hello hello hello hello hello hello hello", &v, 4);
        assert_eq!(long.len_real(), 4);
    }

    #[test]
    fn punctuation_and_mask_split() {
        assert_eq!(
            split_tokens("The sentence : \" a cat \" mean [MASK]."),
            vec!["the", "sentence", ":", "\"", "a", "cat", "\"", "mean", "[MASK]", "."]
        );
        assert_eq!(split_tokens("Don't"), vec!["don", "'", "t"]);
    }

    #[test]
    fn prompts_render_literally() {
        assert_eq!(
            apply_prompt("a cat", PromptVariant::A).unwrap(),
            "The sentence : \" a cat \" mean [MASK]."
        );
        assert_eq!(
            apply_prompt("a cat", PromptVariant::B).unwrap(),
            "The sentence of \" a cat \" means [MASK]."
        );
        assert!(matches!(apply_prompt("", PromptVariant::A), Err(TextError::EmptySentence)));
        let v = small_vocab();
        let seq = tokenize(&apply_prompt("a cat", PromptVariant::A).unwrap(), &v, 16);
        let pos = seq.mask_pos.unwrap();
        assert_eq!(seq.ids[pos], MASK);
    }

    #[test]
    fn synth_is_deterministic_and_graded() {
        let rng = SeededRng::new(11);
        let a = gen_synth_corpus(&rng, 200);
        assert_eq!(a, gen_synth_corpus(&rng, 200));
        assert_eq!(a.corpus.len(), 200);
        let distinct: BTreeSet<_> = a.corpus.iter().collect();
        assert_eq!(distinct.len(), 200);
        assert!(a.pairs.iter().all(|p| (0.0..=3.0).contains(&p.gold)));
    }

    #[test]
    fn gold_three_shares_content_slots() {
        let data = gen_synth_corpus(&SeededRng::new(5), 80);
        for p in data.pairs.iter().filter(|p| p.gold == 3.0) {
            let a: BTreeSet<String> = split_tokens(&p.sentence_a).into_iter().collect();
            let b: BTreeSet<String> = split_tokens(&p.sentence_b).into_iter().collect();
            let content = |set: &BTreeSet<String>| -> Vec<String> {
                set.iter()
                    .filter(|t| {
                        SUBJECTS.contains(&t.as_str())
                            || VERBS.contains(&t.as_str())
                            || OBJECTS.contains(&t.as_str())
                    })
                    .cloned()
                    .collect()
            };
            assert_eq!(content(&a), content(&b), "{p:?}");
            assert_ne!(p.sentence_a, p.sentence_b);
        }
    }

    #[test]
    fn vocab_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.txt");
        let v = small_vocab();
        v.write(&path).unwrap();
        assert_eq!(Vocab::read(&path).unwrap(), v);
        std::fs::write(&path, "NOPE\n0\n").unwrap();
        assert!(Vocab::read(&path).is_err());
    }

    #[test]
    fn pairs_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.tsv");
        let pairs = gen_synth_corpus(&SeededRng::new(1), 12).pairs;
        write_pairs(&path, &pairs).unwrap();
        assert_eq!(read_pairs(&path).unwrap(), pairs);
    }
}
