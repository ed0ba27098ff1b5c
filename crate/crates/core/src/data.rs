//! Byte tokenizer, synthetic dual-regime corpora, JSONL ingestion, splits
//! and the model-facing sequence encoding.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::expert::train::TrainItem;
use crate::expert::SeqTargets;
use crate::rng::SeededRng;

/// Separator between question and answer slots.
pub const SEP: usize = 0x1E;
/// Answer slot ids occupy `1..=SLOT_IDS`, reused cyclically.
pub const SLOT_IDS: usize = 29;
pub const VOCAB: usize = 256;

pub fn slot_token(j: usize) -> usize {
    1 + j % SLOT_IDS
}

pub fn tokenize(bytes: &[u8]) -> Vec<usize> {
    bytes.iter().map(|&b| b as usize).collect()
}

pub fn detokenize(ids: &[usize]) -> Result<Vec<u8>> {
    ids.iter()
        .map(|&id| u8::try_from(id).map_err(|_| Error::Index { what: "token", index: id, len: VOCAB }))
        .collect()
}

/// Lossy text view of token ids, for display.
pub fn detokenize_lossy(ids: &[usize]) -> String {
    let bytes: Vec<u8> = ids.iter().map(|&i| i.min(255) as u8).collect();
    String::from_utf8_lossy(&bytes).into_owned()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QAPair {
    pub question: String,
    pub answer: String,
    pub domain: String,
}

/// Maps domain names to the binary router feature `d`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DomainMap(pub BTreeMap<String, usize>);

impl Default for DomainMap {
    fn default() -> Self {
        Self([("pubmed".to_string(), 0), ("dental".to_string(), 1)].into_iter().collect())
    }
}

impl DomainMap {
    pub fn resolve(&self, name: &str) -> Result<usize> {
        self.0.get(name).copied().ok_or_else(|| {
            Error::config(
                "domain",
                format!("unknown domain `{name}` (known: {})", self.known().join(", ")),
            )
        })
    }

    pub fn known(&self) -> Vec<String> {
        self.0.keys().cloned().collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.0.is_empty() {
            return Err(Error::config("domain_map", "must name at least one domain"));
        }
        if let Some((k, v)) = self.0.iter().find(|(_, v)| **v > 1) {
            return Err(Error::config("domain_map", format!("`{k}` maps to {v}; the domain feature is binary")));
        }
        Ok(())
    }
}

/// Task used for the short regime.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskFamily {
    /// Answer is a fixed letter substitution of the key closing the
    /// question, repeated.
    CopyWithLookup,
    /// Answer is the opening characters of the question.
    PatternQa,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub long_frac: f64,
    pub long_range: (usize, usize),
    pub short_range: (usize, usize),
    pub vocab: usize,
    /// Task of the short regime; long items always use copy-with-lookup.
    pub short_task: TaskFamily,
    /// Replaces every answer with random letters, removing all signal.
    pub random_answers: bool,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            long_frac: 0.95,
            long_range: (256, 1024),
            short_range: (8, 64),
            vocab: VOCAB,
            short_task: TaskFamily::PatternQa,
            random_answers: false,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.long_frac) {
            return Err(Error::config("long_frac", "must lie in [0, 1]"));
        }
        for (name, (lo, hi)) in [("long_range", self.long_range), ("short_range", self.short_range)] {
            if lo < 4 || lo >= hi {
                return Err(Error::config(name, format!("need 4 ≤ lo < hi, got {lo}..{hi}")));
            }
        }
        if self.vocab != VOCAB {
            return Err(Error::config("vocab", "the byte tokenizer fixes the vocabulary at 256"));
        }
        Ok(())
    }
}

const LONG_DOMAIN: &str = "pubmed";
const SHORT_DOMAIN: &str = "dental";
const LOOKUP_SHIFT: u8 = 7;

/// Fixed substitution used by the lookup task.
pub fn lookup(key: u8) -> u8 {
    b'a' + (key.to_ascii_uppercase() - b'A' + LOOKUP_SHIFT) % 26
}

fn random_letters(rng: &mut SeededRng, n: usize, base: u8) -> Vec<u8> {
    (0..n).map(|_| base + rng.int_range(0, 25) as u8).collect()
}

fn lookup_item(rng: &mut SeededRng, len: usize) -> (Vec<u8>, Vec<u8>) {
    let mut q = Vec::with_capacity(len);
    while q.len() + 1 < len {
        let word = rng.int_range(2, 8).min(len - 1 - q.len());
        q.extend(random_letters(rng, word, b'a'));
        if q.len() + 1 < len {
            q.push(b' ');
        }
    }
    let key = b'A' + rng.int_range(0, 25) as u8;
    q.push(key);
    let reps = rng.int_range(1, 3);
    (q, vec![lookup(key); reps])
}

fn pattern_item(rng: &mut SeededRng, len: usize) -> (Vec<u8>, Vec<u8>) {
    let q = random_letters(rng, len, b'A');
    let k = rng.int_range(2, 4).min(len);
    let a = q[..k].to_vec();
    (q, a)
}

/// Seeded dual-regime corpus: a `long_frac` share of long lookup items in
/// the `pubmed` domain, the rest short items in the `dental` domain.
pub fn gen_synthetic(spec: &SyntheticSpec, n: usize) -> Result<Vec<QAPair>> {
    spec.validate()?;
    if n == 0 {
        return Err(Error::contract("gen_synthetic needs n ≥ 1"));
    }
    let mut rng = SeededRng::new(spec.seed).fork(0xDA7A);
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let long = rng.bernoulli(spec.long_frac);
        let (q, mut a, domain) = if long {
            let len = rng.int_range(spec.long_range.0, spec.long_range.1);
            let (q, a) = lookup_item(&mut rng, len);
            (q, a, LONG_DOMAIN)
        } else {
            let len = rng.int_range(spec.short_range.0, spec.short_range.1);
            let (q, a) = match spec.short_task {
                TaskFamily::PatternQa => pattern_item(&mut rng, len),
                TaskFamily::CopyWithLookup => lookup_item(&mut rng, len),
            };
            (q, a, SHORT_DOMAIN)
        };
        if spec.random_answers {
            let k = a.len();
            a = random_letters(&mut rng, k, b'a');
        }
        out.push(QAPair {
            question: String::from_utf8(q).expect("ascii"),
            answer: String::from_utf8(a).expect("ascii"),
            domain: domain.to_string(),
        });
    }
    Ok(out)
}

/// Reads `{"question", "answer", "domain"}` records, one per line.
pub fn load_jsonl(path: impl AsRef<Path>, domains: &DomainMap) -> Result<Vec<QAPair>> {
    let reader = BufReader::new(File::open(path.as_ref())?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let pair: QAPair = serde_json::from_str(&line).map_err(|e| Error::Parse { line: line_no, reason: e.to_string() })?;
        if pair.question.is_empty() || pair.answer.is_empty() {
            return Err(Error::Parse { line: line_no, reason: "question and answer must be nonempty".into() });
        }
        domains.resolve(&pair.domain).map_err(|e| Error::Parse { line: line_no, reason: e.to_string() })?;
        out.push(pair);
    }
    Ok(out)
}

pub fn write_jsonl(path: impl AsRef<Path>, pairs: &[QAPair]) -> Result<()> {
    std::fs::write(path, to_jsonl(pairs)?)?;
    Ok(())
}

pub fn to_jsonl(pairs: &[QAPair]) -> Result<String> {
    let mut s = String::new();
    for p in pairs {
        s.push_str(&serde_json::to_string(p)?);
        s.push('\n');
    }
    Ok(s)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSplits {
    pub train: Vec<usize>,
    pub valid: Vec<usize>,
    pub test: Vec<usize>,
}

/// Seeded shuffle, then an 80/10/10 partition of `0..n`.
pub fn split_dataset(n: usize, seed: u64) -> Result<DatasetSplits> {
    if n < 10 {
        return Err(Error::contract(format!("split needs at least 10 pairs, got {n}")));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    SeededRng::new(seed).fork(0x5917).shuffle(&mut idx);
    let n_train = (n as f64 * 0.8).round() as usize;
    let n_valid = (n as f64 * 0.1).round() as usize;
    let test = idx.split_off(n_train + n_valid);
    let valid = idx.split_off(n_train);
    Ok(DatasetSplits { train: idx, valid, test })
}

/// `min(L, L_max) / L_max`.
pub fn length_feature(len: usize, l_max: usize) -> f64 {
    assert!(l_max > 0, "l_max must be positive");
    len.min(l_max) as f64 / l_max as f64
}

/// Model-facing view of one pair: `question ++ SEP ++ slots`, truncated
/// from the front to at most `l_max` tokens.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Encoded {
    pub tokens: Vec<usize>,
    pub domain: usize,
    /// Row of each answer slot.
    pub answer_rows: Vec<usize>,
    /// Reference answer tokens, one per slot.
    pub answer: Vec<usize>,
    /// Row of the separator.
    pub sep: usize,
}

impl Encoded {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Full-sequence supervision.
    pub fn targets(&self) -> SeqTargets {
        let answer = self.answer_rows.iter().copied().zip(self.answer.iter().copied()).collect();
        let lm = (0..self.sep.saturating_sub(1)).map(|i| (i, self.tokens[i + 1])).collect();
        SeqTargets { answer, lm }
    }

    /// Trailing window of at most `crop` tokens that keeps absolute
    /// positions.
    pub fn tail_window(&self, crop: usize) -> TrainItem {
        let start = self.len().saturating_sub(crop.max(self.answer.len() + 2));
        let tokens = self.tokens[start..].to_vec();
        let full = self.targets();
        let shift = |v: Vec<(usize, usize)>| -> Vec<(usize, usize)> {
            v.into_iter().filter(|(r, _)| *r >= start).map(|(r, t)| (r - start, t)).collect()
        };
        TrainItem {
            tokens,
            start,
            domain: self.domain,
            targets: SeqTargets { answer: shift(full.answer), lm: shift(full.lm) },
        }
    }
}

pub fn encode(pair: &QAPair, domains: &DomainMap, l_max: usize) -> Result<Encoded> {
    let domain = domains.resolve(&pair.domain)?;
    let q = tokenize(pair.question.as_bytes());
    let mut a = tokenize(pair.answer.as_bytes());
    if q.is_empty() || a.is_empty() {
        return Err(Error::contract("question and answer must be nonempty"));
    }
    if a.len() + 2 > l_max {
        a.truncate(l_max - 2);
    }
    let keep = (l_max - a.len() - 1).min(q.len());
    let mut tokens = q[q.len() - keep..].to_vec();
    let sep = tokens.len();
    tokens.push(SEP);
    let answer_rows = (0..a.len()).map(|j| sep + 1 + j).collect();
    tokens.extend((0..a.len()).map(slot_token));
    Ok(Encoded { tokens, domain, answer_rows, answer: a, sep })
}

/// Dataset manifest: provenance and a content hash of the JSONL form.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub source: String,
    pub spec: Option<SyntheticSpec>,
    pub count: usize,
    pub per_domain: BTreeMap<String, usize>,
    pub sha256: String,
}

pub fn manifest(pairs: &[QAPair], seed: u64, source: &str, spec: Option<&SyntheticSpec>) -> Result<Manifest> {
    let mut per_domain = BTreeMap::new();
    for p in pairs {
        *per_domain.entry(p.domain.clone()).or_insert(0) += 1;
    }
    let digest = Sha256::digest(to_jsonl(pairs)?.as_bytes());
    Ok(Manifest {
        seed,
        source: source.to_string(),
        spec: spec.cloned(),
        count: pairs.len(),
        per_domain,
        sha256: hex::encode(digest),
    })
}
