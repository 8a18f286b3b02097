//! Synthetic multi-step arithmetic word problems, the fixed vocabulary and
//! JSONL ingestion.
//!
//! Questions chain operations left to right, e.g. `"7 plus 5 times 3 ?"`
//! means `(7 + 5) * 3`. Numbers are split into digit tokens.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MIN_STEPS: usize = 1;
pub const MAX_STEPS: usize = 6;
pub const VALUE_RANGE: (i64, i64) = (0, 999);

pub const PAD: &str = "<pad>";
pub const ANSWER_SEP: &str = "<ans>";
pub const EOS: &str = "<eos>";

const WORDS: [&str; 14] = [
    "plus", "minus", "times", "what", "is", "?", "then", "add", "subtract", "multiply", "by", "to", "get", ".",
];

/// Fixed symbol table. Ids: pad, words, answer separator, eos, digits 0-9.
/// Everything after the answer separator is the answer alphabet.
#[derive(Clone, Debug)]
pub struct Vocabulary {
    symbols: Vec<&'static str>,
}

const DIGITS: [&str; 10] = ["0", "1", "2", "3", "4", "5", "6", "7", "8", "9"];

impl Default for Vocabulary {
    fn default() -> Self {
        Self::new()
    }
}

impl Vocabulary {
    pub fn new() -> Self {
        let mut symbols = vec![PAD];
        symbols.extend(WORDS);
        symbols.push(ANSWER_SEP);
        symbols.push(EOS);
        symbols.extend(DIGITS);
        Vocabulary { symbols }
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    pub fn id(&self, symbol: &str) -> Option<usize> {
        self.symbols.iter().position(|&s| s == symbol)
    }

    pub fn symbol(&self, id: usize) -> Option<&'static str> {
        self.symbols.get(id).copied()
    }

    pub fn pad_id(&self) -> usize {
        0
    }

    pub fn answer_sep_id(&self) -> usize {
        WORDS.len() + 1
    }

    pub fn eos_id(&self) -> usize {
        WORDS.len() + 2
    }

    pub fn digit_id(&self, d: u32) -> usize {
        WORDS.len() + 3 + d as usize
    }

    fn is_digit_id(&self, id: usize) -> bool {
        (self.digit_id(0)..=self.digit_id(9)).contains(&id)
    }

    /// Ids of the answer alphabet: digits and eos.
    pub fn answer_ids(&self) -> Vec<usize> {
        (self.eos_id()..self.len()).collect()
    }

    /// Whitespace-separated words; numbers become one token per digit.
    pub fn tokenize(&self, text: &str) -> Result<Vec<usize>> {
        let mut out = Vec::new();
        for word in text.split_whitespace() {
            if word.bytes().all(|b| b.is_ascii_digit()) {
                out.extend(word.chars().map(|c| self.digit_id(c.to_digit(10).expect("ascii digit"))));
            } else {
                match self.id(word) {
                    Some(id) if !self.is_special(id) => out.push(id),
                    _ => return Err(Error::UnknownSymbol(word.to_string())),
                }
            }
        }
        Ok(out)
    }

    fn is_special(&self, id: usize) -> bool {
        id == self.pad_id() || id == self.answer_sep_id() || id == self.eos_id()
    }

    /// Inverse of [`Vocabulary::tokenize`]: adjacent digits join into one
    /// number, everything else is separated by single spaces.
    pub fn detokenize(&self, ids: &[usize]) -> Result<String> {
        let mut out = String::new();
        let mut prev_digit = false;
        for &id in ids {
            let sym = self.symbol(id).ok_or(Error::TokenOutOfRange {
                id,
                vocab_size: self.len(),
            })?;
            let digit = self.is_digit_id(id);
            if !out.is_empty() && !(digit && prev_digit) {
                out.push(' ');
            }
            out.push_str(sym);
            prev_digit = digit;
        }
        Ok(out)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Operation {
    Add,
    Subtract,
    Multiply,
}

impl Operation {
    pub fn apply(self, v: i64, k: i64) -> i64 {
        match self {
            Operation::Add => v + k,
            Operation::Subtract => v - k,
            Operation::Multiply => v * k,
        }
    }

    fn question_word(self) -> &'static str {
        match self {
            Operation::Add => "plus",
            Operation::Subtract => "minus",
            Operation::Multiply => "times",
        }
    }

    fn rationale_phrase(self) -> &'static str {
        match self {
            Operation::Add => "add",
            Operation::Subtract => "subtract",
            Operation::Multiply => "multiply by",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ProblemInstance {
    pub question: String,
    pub question_tokens: Vec<usize>,
    pub answer: String,
    pub answer_tokens: Vec<usize>,
    pub rationale_chunks: Vec<String>,
    pub difficulty: usize,
}

/// On-disk JSONL record.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ProblemRecord {
    pub question: String,
    pub answer: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub rationale: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub difficulty: Option<usize>,
}

impl ProblemInstance {
    pub fn from_record(record: ProblemRecord, vocab: &Vocabulary) -> Result<Self> {
        let question_tokens = vocab.tokenize(&record.question)?;
        let answer = canonical_answer(&record.answer);
        let answer_tokens = vocab.tokenize(&answer)?;
        if question_tokens.is_empty() {
            return Err(Error::DegenerateInput("empty question"));
        }
        for chunk in &record.rationale {
            vocab.tokenize(chunk)?;
        }
        Ok(ProblemInstance {
            question: record.question,
            question_tokens,
            answer,
            answer_tokens,
            rationale_chunks: record.rationale,
            difficulty: record.difficulty.unwrap_or(1),
        })
    }

    pub fn to_record(&self) -> ProblemRecord {
        ProblemRecord {
            question: self.question.clone(),
            answer: self.answer.clone(),
            rationale: self.rationale_chunks.clone(),
            difficulty: Some(self.difficulty),
        }
    }

    /// Tokens of every rationale chunk, in order.
    pub fn rationale_tokens(&self, vocab: &Vocabulary) -> Result<Vec<Vec<usize>>> {
        self.rationale_chunks.iter().map(|c| vocab.tokenize(c)).collect()
    }
}

/// Trims whitespace and leading zeros; `"007"` and `" 7 "` become `"7"`.
pub fn canonical_answer(s: &str) -> String {
    let t = s.trim();
    let (neg, digits) = match t.strip_prefix('-') {
        Some(rest) => (true, rest),
        None => (false, t),
    };
    if digits.is_empty() || !digits.bytes().all(|b| b.is_ascii_digit()) {
        return t.to_string();
    }
    let stripped = digits.trim_start_matches('0');
    let body = if stripped.is_empty() { "0" } else { stripped };
    if neg && body != "0" {
        format!("-{body}")
    } else {
        body.to_string()
    }
}

pub fn generate_problem(n_steps: usize, seed: u64, vocab: &Vocabulary) -> Result<ProblemInstance> {
    if !(MIN_STEPS..=MAX_STEPS).contains(&n_steps) {
        return Err(Error::Range(format!("n_steps {n_steps} (allowed {MIN_STEPS}..={MAX_STEPS})")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let start: i64 = rng.random_range(2..=20);
    let mut value = start;
    let mut parts = Vec::with_capacity(n_steps);
    let mut chunks = Vec::with_capacity(n_steps);
    let ops = [Operation::Add, Operation::Subtract, Operation::Multiply];
    for _ in 0..n_steps {
        let (op, k, next) = loop {
            let op = ops[rng.random_range(0..3)];
            let k: i64 = rng.random_range(2..=9);
            let next = op.apply(value, k);
            if (VALUE_RANGE.0..=VALUE_RANGE.1).contains(&next) {
                break (op, k, next);
            }
        };
        parts.push(format!("{} {k}", op.question_word()));
        chunks.push(format!("then {} {k} to get {next}", op.rationale_phrase()));
        value = next;
    }
    let chain = format!("{start} {}", parts.join(" "));
    let question = if rng.random_bool(0.5) {
        format!("{chain} ?")
    } else {
        format!("what is {chain} ?")
    };
    let answer = value.to_string();
    Ok(ProblemInstance {
        question_tokens: vocab.tokenize(&question)?,
        answer_tokens: vocab.tokenize(&answer)?,
        question,
        answer,
        rationale_chunks: chunks,
        difficulty: n_steps,
    })
}

/// `count` problems with difficulties cycling through `min..=max`; instance
/// `i` is generated from a seed derived from `(seed, i)`.
pub fn generate_dataset(
    count: usize,
    difficulties: (usize, usize),
    seed: u64,
    vocab: &Vocabulary,
) -> Result<Vec<ProblemInstance>> {
    let (lo, hi) = difficulties;
    if lo > hi {
        return Err(Error::Range(format!("difficulty range {lo}..={hi}")));
    }
    let span = hi - lo + 1;
    (0..count)
        .map(|i| {
            let s = seed
                .wrapping_mul(0x9E37_79B9_7F4A_7C15)
                .wrapping_add(i as u64)
                .rotate_left(17);
            generate_problem(lo + i % span, s, vocab)
        })
        .collect()
}

/// Result of reading a JSONL file.
#[derive(Clone, Debug)]
pub struct LoadedDataset {
    pub instances: Vec<ProblemInstance>,
    pub skipped_out_of_vocabulary: usize,
}

pub fn load_jsonl(path: &Path, vocab: &Vocabulary) -> Result<LoadedDataset> {
    let reader = BufReader::new(File::open(path)?);
    let mut instances = Vec::new();
    let mut skipped = 0;
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let value: serde_json::Value = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        for field in ["question", "answer"] {
            if value.get(field).is_none() {
                return Err(Error::Schema {
                    line: line_no,
                    field,
                });
            }
        }
        let record: ProblemRecord = serde_json::from_value(value).map_err(|e| Error::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        match ProblemInstance::from_record(record, vocab) {
            Ok(inst) => instances.push(inst),
            Err(Error::UnknownSymbol(_)) => skipped += 1,
            Err(e) => {
                return Err(Error::Parse {
                    line: line_no,
                    message: e.to_string(),
                })
            }
        }
    }
    Ok(LoadedDataset {
        instances,
        skipped_out_of_vocabulary: skipped,
    })
}

pub fn write_jsonl(path: &Path, instances: &[ProblemInstance]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for inst in instances {
        let line = serde_json::to_string(&inst.to_record()).expect("record serializes");
        writeln!(w, "{line}")?;
    }
    w.flush()?;
    Ok(())
}

/// Train / validation / test partition.
#[derive(Clone, Debug, Default)]
pub struct Splits {
    pub train: Vec<ProblemInstance>,
    pub validation: Vec<ProblemInstance>,
    pub test: Vec<ProblemInstance>,
}

/// Seeded shuffle, then contiguous split by `fractions` (train, validation,
/// test), which must sum to one.
pub fn split_dataset(instances: Vec<ProblemInstance>, fractions: [f64; 3], seed: u64) -> Result<Splits> {
    if instances.is_empty() {
        return Err(Error::DegenerateInput("cannot split an empty dataset"));
    }
    if fractions.iter().any(|&f| !(0.0..=1.0).contains(&f)) || (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("split fractions {fractions:?} must sum to 1")));
    }
    let n = instances.len();
    let mut all = instances;
    all.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = ((n as f64) * fractions[0]).round() as usize;
    let n_val = (((n as f64) * fractions[1]).round() as usize).min(n - n_train);
    let test = all.split_off(n_train + n_val);
    let validation = all.split_off(n_train);
    Ok(Splits {
        train: all,
        validation,
        test,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn digit_round_trip() {
        let v = Vocabulary::new();
        let ids = v.tokenize("42").unwrap();
        assert_eq!(ids, vec![v.digit_id(4), v.digit_id(2)]);
        assert_eq!(v.detokenize(&ids).unwrap(), "42");
        assert!(v.tokenize("").unwrap().is_empty());
        assert!(matches!(v.tokenize("7 plus x ?"), Err(Error::UnknownSymbol(s)) if s == "x"));
        assert!(v.tokenize("<eos>").is_err());
    }

    #[test]
    fn answer_alphabet_sits_after_separator() {
        let v = Vocabulary::new();
        assert!(v.answer_ids().iter().all(|&id| id > v.answer_sep_id()));
        assert_eq!(v.answer_ids().len(), 11);
        assert_eq!(v.symbol(v.eos_id()), Some(EOS));
    }

    #[test]
    fn generation_is_deterministic_and_validated() {
        let v = Vocabulary::new();
        let a = generate_problem(1, 11, &v).unwrap();
        assert_eq!(a, generate_problem(1, 11, &v).unwrap());
        assert_eq!(a.rationale_chunks.len(), 1);
        assert!(generate_problem(0, 1, &v).is_err());
        assert!(generate_problem(7, 1, &v).is_err());
    }

    #[test]
    fn canonicalization() {
        assert_eq!(canonical_answer(" 007 "), "7");
        assert_eq!(canonical_answer("0"), "0");
        assert_eq!(canonical_answer("000"), "0");
        assert_eq!(canonical_answer("-05"), "-5");
    }

    #[test]
    fn split_sizes_and_partition() {
        let v = Vocabulary::new();
        let data = generate_dataset(100, (1, 5), 3, &v).unwrap();
        let s = split_dataset(data.clone(), [0.8, 0.1, 0.1], 5).unwrap();
        assert_eq!((s.train.len(), s.validation.len(), s.test.len()), (80, 10, 10));
        let again = split_dataset(data.clone(), [0.8, 0.1, 0.1], 5).unwrap();
        assert_eq!(s.test, again.test);
        let mut union: Vec<String> = s
            .train
            .iter()
            .chain(&s.validation)
            .chain(&s.test)
            .map(|i| format!("{}|{}", i.question, i.answer))
            .collect();
        let mut orig: Vec<String> = data.iter().map(|i| format!("{}|{}", i.question, i.answer)).collect();
        union.sort();
        orig.sort();
        assert_eq!(union, orig);
        assert!(split_dataset(Vec::new(), [0.8, 0.1, 0.1], 0).is_err());
        assert!(split_dataset(data, [0.8, 0.1, 0.2], 0).is_err());
    }
}
