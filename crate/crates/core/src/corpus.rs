//! Synthetic corpora, word-level vocabulary and fixed-length token sequences.

use std::collections::{HashMap, HashSet};
use std::io::{BufRead, Write};
use std::path::Path;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::grammar::{self, Category, Slot, CLAUSES, FIXED_SENTENCES, FULL_STOP, NAMES, PRONOUNS};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const MASK: usize = 3;
pub const UNK: usize = 4;
pub const NUM_SPECIAL: usize = 5;

const SPECIAL_TOKENS: [&str; NUM_SPECIAL] = ["<pad>", "<bos>", "<eos>", "<mask>", "<unk>"];

/// Token ↔ id bijection. Ids `0..5` are the special tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    pub fn from_words<'a>(words: impl IntoIterator<Item = &'a str>) -> Self {
        let mut tokens: Vec<String> = SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
        let mut index: HashMap<String, usize> =
            tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        for w in words {
            if !index.contains_key(w) {
                index.insert(w.to_string(), tokens.len());
                tokens.push(w.to_string());
            }
        }
        Self { tokens, index }
    }

    /// Vocabulary covering both synthetic grammars.
    pub fn synthetic() -> Self {
        Self::from_words(grammar::all_words())
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Id of `word`, or [`UNK`].
    pub fn id(&self, word: &str) -> usize {
        self.index.get(word).copied().unwrap_or(UNK)
    }

    pub fn contains(&self, word: &str) -> bool {
        self.index.contains_key(word)
    }

    pub fn token(&self, id: usize) -> &str {
        self.tokens.get(id).map_or(SPECIAL_TOKENS[UNK], String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }
}

/// Ids that mark sequence structure and are stripped from text.
pub fn is_structural(id: usize) -> bool {
    matches!(id, PAD | BOS | EOS)
}

/// Whether a word is the text form of a structural token.
pub fn is_structural_word(word: &str) -> bool {
    [PAD, BOS, EOS].iter().any(|&i| SPECIAL_TOKENS[i] == word)
}

/// A fixed-length sequence `BOS w₁ … wₙ EOS PAD …`.
///
/// Sequences built by [`tokenize`] satisfy the layout invariants. Sequences
/// produced by decoders come from [`TokenSeq::from_ids`] and may not; see
/// [`TokenSeq::is_well_formed`].
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct TokenSeq {
    pub ids: Vec<usize>,
    /// Count of non-pad positions (BOS and EOS included).
    pub true_length: usize,
}

impl TokenSeq {
    /// Wraps arbitrary ids. `true_length` runs through the first EOS, or
    /// covers every non-PAD position when there is none.
    pub fn from_ids(ids: Vec<usize>) -> Self {
        let true_length = match ids.iter().position(|&i| i == EOS) {
            Some(p) => p + 1,
            None => ids.iter().rposition(|&i| i != PAD).map_or(0, |p| p + 1),
        };
        Self { ids, true_length }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn is_special(&self, pos: usize) -> bool {
        is_structural(self.ids[pos])
    }

    /// Per-position PAD/BOS/EOS flags.
    pub fn special_mask(&self) -> Vec<bool> {
        self.ids.iter().map(|&i| is_structural(i)).collect()
    }

    /// Number of content (non-structural) positions.
    pub fn content_len(&self) -> usize {
        self.ids.iter().filter(|&&i| !is_structural(i)).count()
    }

    pub fn is_well_formed(&self) -> bool {
        let n = self.true_length;
        n >= 2
            && n <= self.ids.len()
            && self.ids[0] == BOS
            && self.ids[n - 1] == EOS
            && self.ids[1..n - 1].iter().all(|&i| !is_structural(i))
            && self.ids[n..].iter().all(|&i| i == PAD)
    }
}

/// Source/target pair for conditional generation.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PairExample {
    pub source: TokenSeq,
    pub target: TokenSeq,
}

/// Encodes space-separated text into a length-`m` sequence.
pub fn tokenize(text: &str, m: usize, vocab: &Vocab) -> Result<TokenSeq> {
    let words: Vec<&str> = text.split_whitespace().collect();
    if m < 2 || words.len() > m - 2 {
        return Err(Error::TooLong {
            tokens: words.len(),
            max: m.saturating_sub(2),
        });
    }
    let mut ids = Vec::with_capacity(m);
    ids.push(BOS);
    ids.extend(words.iter().map(|w| vocab.id(w)));
    ids.push(EOS);
    let true_length = ids.len();
    ids.resize(m, PAD);
    Ok(TokenSeq { ids, true_length })
}

/// Text of the content tokens before the first EOS; structural and MASK
/// tokens are dropped.
pub fn detokenize(seq: &TokenSeq, vocab: &Vocab) -> String {
    let end = seq.ids.iter().position(|&i| i == EOS).unwrap_or(seq.ids.len());
    seq.ids[..end]
        .iter()
        .filter(|&&i| !is_structural(i) && i != MASK)
        .map(|&i| vocab.token(i))
        .collect::<Vec<_>>()
        .join(" ")
}

pub fn tokenize_all(texts: &[String], m: usize, vocab: &Vocab) -> Result<Vec<TokenSeq>> {
    texts.iter().map(|t| tokenize(t, m, vocab)).collect()
}

fn fill(slot: Slot, rng: &mut impl Rng) -> &'static str {
    match slot {
        Slot::Word(w) => w,
        Slot::Fill(Category::Subject) => {
            // names and pronouns equally likely as a group
            if rng.random_bool(0.5) {
                NAMES.choose(rng).unwrap()
            } else {
                PRONOUNS.choose(rng).unwrap()
            }
        }
        Slot::Fill(cat) => cat.words().choose(rng).unwrap(),
    }
}

fn clause(rng: &mut impl Rng, out: &mut Vec<&'static str>) {
    let pattern = CLAUSES.choose(rng).unwrap();
    out.extend(pattern.iter().map(|&s| fill(s, rng)));
}

fn sentence(rng: &mut impl Rng, out: &mut Vec<&'static str>) {
    // one in five sentences is a fixed form
    if rng.random_range(0..5) == 0 {
        let pattern = FIXED_SENTENCES.choose(rng).unwrap();
        out.extend(pattern.iter().map(|&s| fill(s, rng)));
    } else {
        out.push(fill(Slot::Fill(Category::Subject), rng));
        clause(rng, out);
    }
    out.push(FULL_STOP);
}

fn story(rng: &mut impl Rng) -> String {
    let mut words = vec![*NAMES.choose(rng).unwrap()];
    clause(rng, &mut words);
    words.push(FULL_STOP);
    let extra = rng.random_range(1..=2);
    for _ in 0..extra {
        sentence(rng, &mut words);
    }
    words.join(" ")
}

/// `count` mini-stories drawn from the grammar in [`crate::grammar`].
/// Duplicates are kept; see [`duplicate_rate`] and [`split_corpus`].
pub fn generate_story_corpus(seed: u64, count: usize) -> Vec<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count).map(|_| story(&mut rng)).collect()
}

/// Fraction of entries that repeat an earlier entry.
pub fn duplicate_rate(texts: &[String]) -> f64 {
    if texts.is_empty() {
        return 0.0;
    }
    let mut seen = HashSet::new();
    let dups = texts.iter().filter(|t| !seen.insert(t.as_str())).count();
    dups as f64 / texts.len() as f64
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParaphraseOptions {
    /// Keep sources that no rewrite rule changes (target = source).
    pub allow_identity: bool,
}

/// Sentence pairs `(source, paraphrase(source))`.
pub fn generate_paraphrase_pairs(seed: u64, count: usize, opts: ParaphraseOptions) -> Vec<(String, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let mut words = Vec::new();
        sentence(&mut rng, &mut words);
        let source = words.join(" ");
        let target = grammar::paraphrase(&source);
        if opts.allow_identity || target != source {
            out.push((source, target));
        }
    }
    out
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Splits<T> {
    pub train: Vec<T>,
    pub val: Vec<T>,
    pub test: Vec<T>,
}

/// Removes exact duplicates (keeping first occurrences) and cuts the rest
/// into train / val / test, val and test taken from the end.
pub fn split_corpus<T: Clone + Eq + std::hash::Hash>(items: &[T], val: usize, test: usize) -> Result<Splits<T>> {
    let mut seen = HashSet::new();
    let unique: Vec<T> = items.iter().filter(|t| seen.insert(*t)).cloned().collect();
    if unique.len() <= val + test {
        return Err(Error::Corpus(format!(
            "{} unique items cannot fill val {val} + test {test} and leave training data",
            unique.len()
        )));
    }
    let train_end = unique.len() - val - test;
    Ok(Splits {
        train: unique[..train_end].to_vec(),
        val: unique[train_end..train_end + val].to_vec(),
        test: unique[train_end + val..].to_vec(),
    })
}

pub fn write_lines(path: &Path, lines: &[String]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for l in lines {
        writeln!(f, "{l}")?;
    }
    f.flush()?;
    Ok(())
}

pub fn read_lines(path: &Path) -> Result<Vec<String>> {
    let f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for line in f.lines() {
        out.push(line?);
    }
    Ok(out)
}

pub fn write_pairs(path: &Path, pairs: &[(String, String)]) -> Result<()> {
    let lines: Vec<String> = pairs.iter().map(|(s, t)| format!("{s}\t{t}")).collect();
    write_lines(path, &lines)
}

pub fn read_pairs(path: &Path) -> Result<Vec<(String, String)>> {
    read_lines(path)?
        .into_iter()
        .map(|l| {
            let (s, t) = l
                .split_once('\t')
                .ok_or_else(|| Error::Corpus(format!("pair line without a tab: {l:?}")))?;
            Ok((s.to_string(), t.to_string()))
        })
        .collect()
}
