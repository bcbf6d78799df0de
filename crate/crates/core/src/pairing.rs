//! Positive-pair labeling across sentence pairs and minibatch assembly.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, BufReader, Write};
use std::process::{Child, ChildStdin, ChildStdout, Command, Stdio};
use std::sync::Mutex;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::alignment::BinaryMask;
use crate::error::{Error, Result};
use crate::loss::Positives;
use crate::tokenizer::{is_punctuation_token, normalize_token, tokenize, TokenizedText};

/// A proposition in both of its forms: text and token mask over its sentence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Proposition {
    pub text: String,
    pub mask: BinaryMask,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SentencePair {
    pub sent_a: TokenizedText,
    pub sent_b: TokenizedText,
    pub props_a: Vec<Proposition>,
    pub props_b: Vec<Proposition>,
}

impl SentencePair {
    pub fn new(
        sent_a: TokenizedText,
        sent_b: TokenizedText,
        props_a: Vec<Proposition>,
        props_b: Vec<Proposition>,
    ) -> Result<Self> {
        for p in &props_a {
            p.mask.validate_for(sent_a.len())?;
        }
        for p in &props_b {
            p.mask.validate_for(sent_b.len())?;
        }
        Ok(Self {
            sent_a,
            sent_b,
            props_a,
            props_b,
        })
    }
}

/// Positive `(index into props_a, index into props_b)` pairs.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PositivePairSet(pub BTreeSet<(usize, usize)>);

impl PositivePairSet {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn contains(&self, a: usize, b: usize) -> bool {
        self.0.contains(&(a, b))
    }

    pub fn iter(&self) -> impl Iterator<Item = &(usize, usize)> {
        self.0.iter()
    }
}

impl FromIterator<(usize, usize)> for PositivePairSet {
    fn from_iter<I: IntoIterator<Item = (usize, usize)>>(iter: I) -> Self {
        Self(iter.into_iter().collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Entailment {
    Entail,
    NotEntail,
}

/// Anything that can judge whether a premise entails a hypothesis.
pub trait EntailmentOracle {
    fn judge(&self, premise: &str, hypothesis: &str) -> std::result::Result<Entailment, String>;
}

/// `(a_i, b_j)` is positive iff each side entails the other.
pub fn label_positive_pairs(
    pair: &SentencePair,
    oracle: &dyn EntailmentOracle,
) -> Result<PositivePairSet> {
    let mut out = BTreeSet::new();
    for (i, a) in pair.props_a.iter().enumerate() {
        for (j, b) in pair.props_b.iter().enumerate() {
            let err = |message| Error::Oracle { a: i, b: j, message };
            let forward = oracle.judge(&a.text, &b.text).map_err(err)?;
            if forward != Entailment::Entail {
                continue;
            }
            if oracle.judge(&b.text, &a.text).map_err(err)? == Entailment::Entail {
                out.insert((i, j));
            }
        }
    }
    Ok(PositivePairSet(out))
}

/// Normalized-token multiset of a text, punctuation removed.
pub fn token_bag(text: &str) -> BTreeMap<String, usize> {
    let mut bag = BTreeMap::new();
    for t in tokenize(text).tokens {
        if !is_punctuation_token(&t) {
            *bag.entry(normalize_token(&t)).or_default() += 1;
        }
    }
    bag
}

/// Multiset Jaccard: Σ min(counts) / Σ max(counts).
pub fn multiset_jaccard(a: &BTreeMap<String, usize>, b: &BTreeMap<String, usize>) -> f64 {
    let keys: BTreeSet<&String> = a.keys().chain(b.keys()).collect();
    let (mut inter, mut union) = (0usize, 0usize);
    for k in keys {
        let (x, y) = (a.get(k).copied().unwrap_or(0), b.get(k).copied().unwrap_or(0));
        inter += x.min(y);
        union += x.max(y);
    }
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// Offline stand-in for an NLI model: the premise entails the hypothesis
/// when every hypothesis token (as a multiset) occurs in the premise and
/// the two bags have Jaccard similarity of at least `threshold`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LexicalOracle {
    pub threshold: f64,
}

impl Default for LexicalOracle {
    fn default() -> Self {
        Self { threshold: 0.8 }
    }
}

pub fn lexical_equivalence_oracle(threshold: f64) -> LexicalOracle {
    LexicalOracle { threshold }
}

impl EntailmentOracle for LexicalOracle {
    fn judge(&self, premise: &str, hypothesis: &str) -> std::result::Result<Entailment, String> {
        let p = token_bag(premise);
        let h = token_bag(hypothesis);
        if h.is_empty() {
            return Ok(Entailment::NotEntail);
        }
        let covered = h
            .iter()
            .all(|(tok, &n)| p.get(tok).is_some_and(|&m| m >= n));
        if covered && multiset_jaccard(&p, &h) >= self.threshold {
            Ok(Entailment::Entail)
        } else {
            Ok(Entailment::NotEntail)
        }
    }
}

#[derive(Serialize)]
struct OracleRequest<'a> {
    premise: &'a str,
    hypothesis: &'a str,
}

#[derive(Deserialize)]
struct OracleResponse {
    label: String,
}

/// Talks to an external NLI process over stdin/stdout, one JSON object per
/// line in each direction: `{"premise": .., "hypothesis": ..}` out,
/// `{"label": "entailment" | "neutral" | "contradiction"}` back. Only
/// `entailment` (or `entail`) counts as entailment.
pub struct SubprocessOracle {
    child: Mutex<(Child, ChildStdin, BufReader<ChildStdout>)>,
}

impl SubprocessOracle {
    pub fn spawn(program: &str, args: &[String]) -> Result<Self> {
        let mut child = Command::new(program)
            .args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .spawn()?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = BufReader::new(child.stdout.take().expect("piped stdout"));
        Ok(Self {
            child: Mutex::new((child, stdin, stdout)),
        })
    }
}

impl EntailmentOracle for SubprocessOracle {
    fn judge(&self, premise: &str, hypothesis: &str) -> std::result::Result<Entailment, String> {
        let mut guard = self.child.lock().map_err(|_| "oracle lock poisoned".to_string())?;
        let (_, stdin, stdout) = &mut *guard;
        let req = serde_json::to_string(&OracleRequest { premise, hypothesis })
            .map_err(|e| e.to_string())?;
        writeln!(stdin, "{req}").map_err(|e| format!("write to oracle: {e}"))?;
        stdin.flush().map_err(|e| format!("flush oracle: {e}"))?;
        let mut line = String::new();
        let n = stdout
            .read_line(&mut line)
            .map_err(|e| format!("read from oracle: {e}"))?;
        if n == 0 {
            return Err("oracle closed its output".into());
        }
        let resp: OracleResponse =
            serde_json::from_str(line.trim()).map_err(|e| format!("bad oracle reply: {e}"))?;
        match resp.label.as_str() {
            "entailment" | "entail" => Ok(Entailment::Entail),
            "neutral" | "contradiction" | "not_entail" => Ok(Entailment::NotEntail),
            other => Err(format!("unknown label {other:?}")),
        }
    }
}

impl Drop for SubprocessOracle {
    fn drop(&mut self) {
        if let Ok(mut guard) = self.child.lock() {
            let _ = guard.0.kill();
            let _ = guard.0.wait();
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    A,
    B,
}

/// Where a batch sentence came from in the corpus.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct SentenceRef {
    pub pair: usize,
    pub side: Side,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchProposition {
    /// Index into [`Minibatch::sentences`].
    pub sentence: usize,
    pub mask: BinaryMask,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Minibatch {
    pub sentences: Vec<TokenizedText>,
    pub sources: Vec<SentenceRef>,
    pub propositions: Vec<BatchProposition>,
    pub positives: Positives,
}

impl Minibatch {
    pub fn num_sentences(&self) -> usize {
        self.sentences.len()
    }

    pub fn num_propositions(&self) -> usize {
        self.propositions.len()
    }

    /// Propositions grouped by sentence, as batch indices.
    pub fn props_by_sentence(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.sentences.len()];
        for (i, p) in self.propositions.iter().enumerate() {
            out[p.sentence].push(i);
        }
        out
    }
}

/// A sentence pair together with its labeled positives.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledPair {
    pub pair: SentencePair,
    pub positives: PositivePairSet,
}

/// Shuffles pairs with `seed` and packs them into batches of at most
/// `batch_size_sentences` sentences. Both sentences of a pair, and all of
/// their propositions, always land in the same batch. The last batch may be
/// short.
pub fn build_minibatches(
    corpus: &[LabeledPair],
    batch_size_sentences: usize,
    seed: u64,
) -> Result<Vec<Minibatch>> {
    if corpus.is_empty() {
        return Err(Error::InvalidArgument("empty corpus".into()));
    }
    if batch_size_sentences < 2 {
        return Err(Error::InvalidArgument(format!(
            "batch size must be at least 2 sentences, got {batch_size_sentences}"
        )));
    }
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let pairs_per_batch = batch_size_sentences / 2;
    Ok(order
        .chunks(pairs_per_batch)
        .map(|chunk| assemble_batch(corpus, chunk))
        .collect())
}

fn assemble_batch(corpus: &[LabeledPair], pair_ids: &[usize]) -> Minibatch {
    let mut sentences = Vec::with_capacity(pair_ids.len() * 2);
    let mut sources = Vec::with_capacity(pair_ids.len() * 2);
    let mut propositions = Vec::new();
    let mut sets: Vec<BTreeSet<usize>> = Vec::new();

    for &pid in pair_ids {
        let lp = &corpus[pid];
        let base_a = propositions.len();
        for (side, sent, props) in [
            (Side::A, &lp.pair.sent_a, &lp.pair.props_a),
            (Side::B, &lp.pair.sent_b, &lp.pair.props_b),
        ] {
            let s = sentences.len();
            sentences.push(sent.clone());
            sources.push(SentenceRef { pair: pid, side });
            for p in props {
                propositions.push(BatchProposition {
                    sentence: s,
                    mask: p.mask.clone(),
                });
                sets.push(BTreeSet::new());
            }
        }
        let base_b = base_a + lp.pair.props_a.len();
        for &(a, b) in lp.positives.iter() {
            sets[base_a + a].insert(base_b + b);
            sets[base_b + b].insert(base_a + a);
        }
    }

    Minibatch {
        sentences,
        sources,
        propositions,
        positives: Positives::from_sets(sets.into_iter().map(|s| s.into_iter().collect()).collect())
            .expect("cross-sentence labels are symmetric and irreflexive"),
    }
}
