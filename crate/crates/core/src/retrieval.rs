//! Held-out proposition retrieval: embed one side of each pair, index it,
//! query with the other side, and score against labeled positives.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::alignment::BinaryMask;
use crate::corpus::{sentence_pair, PairRecord};
use crate::encoder::Model;
use crate::error::{Error, Result};
use crate::eval::{retrieval_metrics, GroundTruth, Metrics, Rankings};
use crate::index::{GroupHit, GroupKey, Level, PropEntry, PropIndex, PropKey, DEFAULT_OVER_RETRIEVAL};
use crate::pairing::Side;

/// `sentence_id` of each side within its pair's document.
pub fn sentence_id(side: Side) -> u64 {
    match side {
        Side::A => 0,
        Side::B => 1,
    }
}

/// One line of an embeddings file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingRecord {
    pub doc_id: u64,
    pub sentence_id: u64,
    pub prop_id: u64,
    pub mask: BinaryMask,
    pub vector: Vec<f32>,
}

impl EmbeddingRecord {
    pub fn key(&self) -> PropKey {
        PropKey::new(self.doc_id, self.sentence_id, self.prop_id)
    }
}

pub fn query_id(key: &PropKey) -> String {
    format!("{}:{}:{}", key.doc_id, key.sentence_id, key.prop_id)
}

/// Embeds every proposition on `side` of each record.
pub fn encode_side(model: &Model, records: &[PairRecord], side: Side) -> Result<Vec<EmbeddingRecord>> {
    let mut out = Vec::new();
    for r in records {
        let pair = sentence_pair(r)?;
        let (sent, props) = match side {
            Side::A => (&pair.sent_a, &pair.props_a),
            Side::B => (&pair.sent_b, &pair.props_b),
        };
        if props.is_empty() {
            continue;
        }
        let masks: Vec<BinaryMask> = props.iter().map(|p| p.mask.clone()).collect();
        for (i, (emb, mask)) in model.embed(sent, &masks)?.iter().zip(masks).enumerate() {
            out.push(EmbeddingRecord {
                doc_id: r.id,
                sentence_id: sentence_id(side),
                prop_id: i as u64,
                mask,
                vector: emb.to_f32(),
            });
        }
    }
    Ok(out)
}

pub fn build_index(embeddings: &[EmbeddingRecord], metadata: serde_json::Value) -> Result<PropIndex> {
    let dim = embeddings
        .first()
        .map(|e| e.vector.len())
        .ok_or_else(|| Error::InvalidArgument("no embeddings to index".into()))?;
    let mut index = PropIndex::new(dim, metadata)?;
    for e in embeddings {
        index.add(PropEntry::new(e.key(), e.mask.clone(), e.vector.clone())?)?;
    }
    Ok(index)
}

/// Relevant side-B propositions for every side-A proposition that has one.
pub fn truth_from_records(records: &[PairRecord]) -> Result<GroundTruth<PropKey>> {
    let mut truth: GroundTruth<PropKey> = BTreeMap::new();
    for r in records {
        let positives = r
            .positives
            .as_ref()
            .ok_or_else(|| Error::Format(format!("record {} has no positives field", r.id)))?;
        for &(a, b) in positives {
            let q = PropKey::new(r.id, sentence_id(Side::A), a as u64);
            truth
                .entry(query_id(&q))
                .or_default()
                .insert(PropKey::new(r.id, sentence_id(Side::B), b as u64));
        }
    }
    Ok(truth)
}

/// Ranked results for one query.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryResult {
    pub query: String,
    pub level: Level,
    pub results: Vec<GroupHit>,
}

pub fn search_queries(
    index: &PropIndex,
    queries: &[EmbeddingRecord],
    level: Level,
    k: usize,
) -> Result<Vec<QueryResult>> {
    queries
        .iter()
        .map(|q| {
            Ok(QueryResult {
                query: query_id(&q.key()),
                level,
                results: index.search_level(&q.vector, level, k, DEFAULT_OVER_RETRIEVAL)?,
            })
        })
        .collect()
}

fn as_prop_key(g: &GroupKey) -> Option<PropKey> {
    Some(PropKey::new(g.doc_id, g.sentence_id?, g.prop_id?))
}

/// Proposition-level rankings from search results.
pub fn prop_rankings(results: &[QueryResult]) -> Result<Rankings<PropKey>> {
    results
        .iter()
        .map(|r| {
            if r.level != Level::Proposition {
                return Err(Error::InvalidArgument(format!(
                    "query {} was searched at {:?} level; proposition level is required",
                    r.query, r.level
                )));
            }
            let keys = r
                .results
                .iter()
                .map(|h| as_prop_key(&h.key).expect("proposition-level key"))
                .collect();
            Ok((r.query.clone(), keys))
        })
        .collect()
}

/// Expected P@1 of a uniformly random ranking: mean of |relevant| / |index|.
pub fn chance_precision_at_1(truth: &GroundTruth<PropKey>, index_size: usize) -> f64 {
    if truth.is_empty() || index_size == 0 {
        return 0.0;
    }
    truth
        .values()
        .map(|rel| rel.len() as f64 / index_size as f64)
        .sum::<f64>()
        / truth.len() as f64
}

#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalRun {
    pub metrics: Metrics,
    pub chance_p_at_1: f64,
    pub index: PropIndex,
}

/// Side-B index, side-A queries restricted to those with a labeled positive.
pub fn evaluate_retrieval(model: &Model, records: &[PairRecord]) -> Result<RetrievalRun> {
    let index = build_index(&encode_side(model, records, Side::B)?, serde_json::Value::Null)?;
    let truth = truth_from_records(records)?;
    let wanted: BTreeSet<&String> = truth.keys().collect();
    let queries: Vec<EmbeddingRecord> = encode_side(model, records, Side::A)?
        .into_iter()
        .filter(|q| wanted.contains(&query_id(&q.key())))
        .collect();
    let results = search_queries(&index, &queries, Level::Proposition, 20)?;
    let metrics = retrieval_metrics(&prop_rankings(&results)?, &truth)?;
    Ok(RetrievalRun {
        chance_p_at_1: chance_precision_at_1(&truth, index.len()),
        metrics,
        index,
    })
}
