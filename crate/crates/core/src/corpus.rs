//! JSONL corpus records shared by every pipeline stage, and the conversions
//! between them and the in-memory pairing types.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::alignment::{proposition_to_mask, AlignConfig, BinaryMask};
use crate::error::{Error, Result};
use crate::pairing::{
    label_positive_pairs, EntailmentOracle, LabeledPair, PositivePairSet, Proposition, Side,
    SentencePair,
};
use crate::tokenizer::tokenize;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PropRecord {
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<BinaryMask>,
}

impl PropRecord {
    pub fn text(text: impl Into<String>) -> Self {
        Self {
            text: text.into(),
            mask: None,
        }
    }
}

/// One sentence pair as it moves through align → pair → train.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairRecord {
    pub id: u64,
    pub sent_a: String,
    pub sent_b: String,
    pub props_a: Vec<PropRecord>,
    pub props_b: Vec<PropRecord>,
    /// Labeled `(props_a index, props_b index)` positives.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub positives: Option<Vec<(usize, usize)>>,
    /// Positives known by construction (synthetic data only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub planted: Option<Vec<(usize, usize)>>,
}

impl PairRecord {
    pub fn sentence(&self, side: Side) -> &str {
        match side {
            Side::A => &self.sent_a,
            Side::B => &self.sent_b,
        }
    }

    pub fn props(&self, side: Side) -> &[PropRecord] {
        match side {
            Side::A => &self.props_a,
            Side::B => &self.props_b,
        }
    }
}

pub fn read_jsonl<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<Vec<T>> {
    let path = path.as_ref();
    let file = fs::File::open(path)
        .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?;
    parse_jsonl(BufReader::new(file))
}

pub fn parse_jsonl<T: DeserializeOwned, R: BufRead>(reader: R) -> Result<Vec<T>> {
    let mut out = Vec::new();
    for (n, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|e| Error::Format(format!("line {}: {e}", n + 1)))?,
        );
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(path: impl AsRef<Path>, rows: &[T]) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for r in rows {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// A proposition removed during alignment.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct DroppedProposition {
    pub id: u64,
    pub side: Side,
    pub text: String,
    pub reason: String,
}

/// Adds masks to every proposition; ones that cannot be aligned are dropped
/// and reported. Planted and labeled positives are re-indexed accordingly.
pub fn align_record(
    record: &PairRecord,
    config: &AlignConfig,
) -> Result<(PairRecord, Vec<DroppedProposition>)> {
    let mut dropped = Vec::new();
    let mut kept_sides: Vec<(Vec<PropRecord>, Vec<Option<usize>>)> = Vec::new();
    for side in [Side::A, Side::B] {
        let sent = tokenize(record.sentence(side));
        let mut kept = Vec::new();
        let mut remap = Vec::new();
        for p in record.props(side) {
            match proposition_to_mask(&p.text, &sent, config) {
                Ok(mask) => {
                    remap.push(Some(kept.len()));
                    kept.push(PropRecord {
                        text: p.text.clone(),
                        mask: Some(mask),
                    });
                }
                Err(e @ (Error::UnalignableProposition(_) | Error::EmptyProposition)) => {
                    remap.push(None);
                    dropped.push(DroppedProposition {
                        id: record.id,
                        side,
                        text: p.text.clone(),
                        reason: e.to_string(),
                    });
                }
                Err(e) => return Err(e),
            }
        }
        kept_sides.push((kept, remap));
    }
    let (props_b, remap_b) = kept_sides.pop().unwrap();
    let (props_a, remap_a) = kept_sides.pop().unwrap();
    let reindex = |pairs: &Option<Vec<(usize, usize)>>| {
        pairs.as_ref().map(|ps| {
            ps.iter()
                .filter_map(|&(a, b)| Some((remap_a.get(a).copied()??, remap_b.get(b).copied()??)))
                .collect()
        })
    };
    Ok((
        PairRecord {
            id: record.id,
            sent_a: record.sent_a.clone(),
            sent_b: record.sent_b.clone(),
            props_a,
            props_b,
            positives: reindex(&record.positives),
            planted: reindex(&record.planted),
        },
        dropped,
    ))
}

/// Builds the validated in-memory pair; every proposition must carry a mask.
pub fn sentence_pair(record: &PairRecord) -> Result<SentencePair> {
    let props = |ps: &[PropRecord], side: &str| -> Result<Vec<Proposition>> {
        ps.iter()
            .map(|p| {
                Ok(Proposition {
                    text: p.text.clone(),
                    mask: p.mask.clone().ok_or_else(|| {
                        Error::Format(format!(
                            "record {}: side {side} proposition {:?} has no mask",
                            record.id, p.text
                        ))
                    })?,
                })
            })
            .collect()
    };
    SentencePair::new(
        tokenize(&record.sent_a),
        tokenize(&record.sent_b),
        props(&record.props_a, "a")?,
        props(&record.props_b, "b")?,
    )
}

pub fn label_record(record: &PairRecord, oracle: &dyn EntailmentOracle) -> Result<PairRecord> {
    let pair = sentence_pair(record)?;
    let set = label_positive_pairs(&pair, oracle)?;
    Ok(PairRecord {
        positives: Some(set.0.into_iter().collect()),
        ..record.clone()
    })
}

pub fn labeled_pair(record: &PairRecord) -> Result<LabeledPair> {
    let pair = sentence_pair(record)?;
    let positives = record
        .positives
        .as_ref()
        .ok_or_else(|| Error::Format(format!("record {} has no positives field", record.id)))?;
    for &(a, b) in positives {
        if a >= pair.props_a.len() || b >= pair.props_b.len() {
            return Err(Error::Format(format!(
                "record {}: positive ({a}, {b}) out of range",
                record.id
            )));
        }
    }
    Ok(LabeledPair {
        pair,
        positives: PositivePairSet(positives.iter().copied().collect()),
    })
}

pub fn labeled_pairs(records: &[PairRecord]) -> Result<Vec<LabeledPair>> {
    records.iter().map(labeled_pair).collect()
}

/// Deterministic train/validation/test split by shuffled record order.
pub fn split_records(
    records: &[PairRecord],
    val_fraction: f64,
    test_fraction: f64,
    seed: u64,
) -> Result<(Vec<PairRecord>, Vec<PairRecord>, Vec<PairRecord>)> {
    if !(0.0..1.0).contains(&val_fraction)
        || !(0.0..1.0).contains(&test_fraction)
        || val_fraction + test_fraction >= 1.0
    {
        return Err(Error::InvalidArgument(format!(
            "bad split fractions {val_fraction}, {test_fraction}"
        )));
    }
    let mut order: Vec<usize> = (0..records.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n = records.len() as f64;
    let n_val = (n * val_fraction).round() as usize;
    let n_test = (n * test_fraction).round() as usize;
    let take = |ids: &[usize]| -> Vec<PairRecord> {
        let mut ids = ids.to_vec();
        ids.sort_unstable();
        ids.iter().map(|&i| records[i].clone()).collect()
    };
    let val = take(&order[..n_val]);
    let test = take(&order[n_val..n_val + n_test]);
    let train = take(&order[n_val + n_test..]);
    Ok((train, val, test))
}
