//! Retrieval metrics, mask-level fuzzy matching and conditional similarity.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::alignment::BinaryMask;
use crate::encoder::Model;
use crate::error::{Error, Result};
use crate::tokenizer::TokenizedText;

/// Ranked keys per query id.
pub type Rankings<K> = BTreeMap<String, Vec<K>>;
/// Relevant keys per query id.
pub type GroundTruth<K> = BTreeMap<String, BTreeSet<K>>;

fn paired<'a, K: Ord>(
    rankings: &'a Rankings<K>,
    truth: &'a GroundTruth<K>,
) -> Result<Vec<(&'a [K], &'a BTreeSet<K>)>> {
    if truth.is_empty() {
        return Err(Error::InvalidArgument("no queries to evaluate".into()));
    }
    truth
        .iter()
        .map(|(q, rel)| {
            if rel.is_empty() {
                return Err(Error::InvalidArgument(format!("query {q} has no relevant keys")));
            }
            let ranked = rankings
                .get(q)
                .ok_or_else(|| Error::InvalidArgument(format!("no ranking for query {q}")))?;
            Ok((ranked.as_slice(), rel))
        })
        .collect()
}

/// Fraction of queries whose first result is relevant.
pub fn precision_at_1<K: Ord>(rankings: &Rankings<K>, truth: &GroundTruth<K>) -> Result<f64> {
    let pairs = paired(rankings, truth)?;
    let hits = pairs
        .iter()
        .filter(|(r, rel)| r.first().is_some_and(|k| rel.contains(k)))
        .count();
    Ok(hits as f64 / pairs.len() as f64)
}

/// Mean over queries of `|top-k ∩ relevant| / |relevant|`.
pub fn recall_at_k<K: Ord>(rankings: &Rankings<K>, truth: &GroundTruth<K>, k: usize) -> Result<f64> {
    if k < 1 {
        return Err(Error::InvalidArgument("k must be >= 1".into()));
    }
    let pairs = paired(rankings, truth)?;
    let total: f64 = pairs
        .iter()
        .map(|(r, rel)| {
            // Duplicates in a ranking count once.
            let found: BTreeSet<&K> = r.iter().take(k).filter(|x| rel.contains(x)).collect();
            found.len() as f64 / rel.len() as f64
        })
        .sum();
    Ok(total / pairs.len() as f64)
}

/// Token-level Jaccard between two masks.
pub fn mask_jaccard(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!(
            "masks of length {} and {}",
            a.len(),
            b.len()
        )));
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.bits().iter().zip(b.bits()) {
        inter += usize::from(x & y);
        union += usize::from(x | y);
    }
    Ok(if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    })
}

/// `|a ∧ b| / |a ∨ b| ≥ θ`. Two empty masks never match.
pub fn jaccard_mask_match(a: &BinaryMask, b: &BinaryMask, theta: f64) -> Result<bool> {
    if a.popcount() == 0 && b.popcount() == 0 {
        if a.len() != b.len() {
            return Err(Error::Shape("mask length mismatch".into()));
        }
        return Ok(false);
    }
    Ok(mask_jaccard(a, b)? >= theta)
}

/// For each generated mask, the gold mask with the highest Jaccard if it
/// reaches `theta` (lowest index on ties).
pub fn fuzzy_match_masks(
    generated: &[BinaryMask],
    gold: &[BinaryMask],
    theta: f64,
) -> Result<Vec<Option<usize>>> {
    generated
        .iter()
        .map(|g| {
            let mut best: Option<(usize, f64)> = None;
            for (i, m) in gold.iter().enumerate() {
                if !jaccard_mask_match(g, m, theta)? {
                    continue;
                }
                let j = mask_jaccard(g, m)?;
                if best.is_none_or(|(_, bj)| j > bj) {
                    best = Some((i, j));
                }
            }
            Ok(best.map(|(i, _)| i))
        })
        .collect()
}

/// Maps each generated query to a gold query over the same sentence whose
/// mask it fuzzy-matches; unmatched generated queries are left out.
/// Query ids group by `sentence`, a caller-supplied sentence key.
pub fn fuzzy_query_map<S: Ord>(
    generated: &[(String, S, BinaryMask)],
    gold: &[(String, S, BinaryMask)],
    theta: f64,
) -> Result<BTreeMap<String, String>> {
    let mut by_sentence: BTreeMap<&S, Vec<(&String, &BinaryMask)>> = BTreeMap::new();
    for (id, s, m) in gold {
        by_sentence.entry(s).or_default().push((id, m));
    }
    let mut out = BTreeMap::new();
    for (id, s, m) in generated {
        let Some(cands) = by_sentence.get(s) else { continue };
        let masks: Vec<BinaryMask> = cands.iter().map(|c| c.1.clone()).collect();
        if let Some(i) = fuzzy_match_masks(std::slice::from_ref(m), &masks, theta)?[0] {
            out.insert(id.clone(), cands[i].0.clone());
        }
    }
    Ok(out)
}

/// Truth re-keyed to generated query ids through `map`.
pub fn remap_truth<K: Ord + Clone>(
    truth: &GroundTruth<K>,
    map: &BTreeMap<String, String>,
) -> GroundTruth<K> {
    map.iter()
        .filter_map(|(g, gold)| truth.get(gold).map(|rel| (g.clone(), rel.clone())))
        .collect()
}

/// Two sentences, each with a set of condition words.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionalInstance {
    pub sentence_1: TokenizedText,
    pub sentence_2: TokenizedText,
    pub mask_1: BinaryMask,
    pub mask_2: BinaryMask,
    pub human_score: f64,
}

/// Cosine between the two masked embeddings, each encoded in its own sentence.
pub fn conditional_similarity(model: &Model, instance: &ConditionalInstance) -> Result<f64> {
    let a = model.embed(&instance.sentence_1, std::slice::from_ref(&instance.mask_1))?;
    let b = model.embed(&instance.sentence_2, std::slice::from_ref(&instance.mask_2))?;
    Ok(a[0].cosine(&b[0]).clamp(-1.0, 1.0))
}

/// 1-based ranks with ties sharing their average rank.
pub fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut ranks = vec![0.0; xs.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && xs[order[j + 1]] == xs[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &o in &order[i..=j] {
            ranks[o] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation with tie-averaged ranks.
pub fn spearman(pred: &[f64], human: &[f64]) -> Result<f64> {
    if pred.len() != human.len() {
        return Err(Error::Shape(format!(
            "{} predictions for {} labels",
            pred.len(),
            human.len()
        )));
    }
    if pred.len() < 2 {
        return Err(Error::InvalidArgument("need at least two observations".into()));
    }
    if pred.iter().chain(human).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("spearman input".into()));
    }
    let (ra, rb) = (average_ranks(pred), average_ranks(human));
    let n = ra.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let (mut cov, mut va, mut vb) = (0.0, 0.0, 0.0);
    for (a, b) in ra.iter().zip(&rb) {
        cov += (a - ma) * (b - mb);
        va += (a - ma) * (a - ma);
        vb += (b - mb) * (b - mb);
    }
    if va == 0.0 || vb == 0.0 {
        return Err(Error::InvalidArgument(
            "spearman is undefined for constant input".into(),
        ));
    }
    Ok((cov / (va * vb).sqrt()).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub p_at_1: f64,
    pub r_at_5: f64,
    pub r_at_10: f64,
    pub r_at_20: f64,
    pub spearman: Option<f64>,
    pub num_queries: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub run_config_hash: Option<String>,
}

pub fn retrieval_metrics<K: Ord>(rankings: &Rankings<K>, truth: &GroundTruth<K>) -> Result<Metrics> {
    Ok(Metrics {
        p_at_1: precision_at_1(rankings, truth)?,
        r_at_5: recall_at_k(rankings, truth, 5)?,
        r_at_10: recall_at_k(rankings, truth, 10)?,
        r_at_20: recall_at_k(rankings, truth, 20)?,
        spearman: None,
        num_queries: truth.len(),
        run_config_hash: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{EncoderConfig, EncoderParams};
    use crate::tokenizer::{tokenize, Vocab};
    use proptest::prelude::*;

    fn mask(bits: &[u8]) -> BinaryMask {
        BinaryMask::new(bits.to_vec()).unwrap()
    }

    fn q(i: usize) -> String {
        format!("q{i}")
    }

    #[test]
    fn precision_extremes_and_missing_ranking() {
        let truth: GroundTruth<u32> = (0..3).map(|i| (q(i), BTreeSet::from([i as u32]))).collect();
        let good: Rankings<u32> = (0..3).map(|i| (q(i), vec![i as u32, 99])).collect();
        let bad: Rankings<u32> = (0..3).map(|i| (q(i), vec![99, i as u32])).collect();
        assert_eq!(precision_at_1(&good, &truth).unwrap(), 1.0);
        assert_eq!(precision_at_1(&bad, &truth).unwrap(), 0.0);
        let mut partial = good.clone();
        partial.remove("q1");
        assert!(precision_at_1(&partial, &truth).is_err());
    }

    #[test]
    fn planted_twenty_query_fixture() {
        // Query i's answer sits at rank (i % 7) + 1; hand count: ranks 1 for
        // i ∈ {0, 7, 14} → 3 of 20.
        let truth: GroundTruth<u32> = (0..20).map(|i| (q(i), BTreeSet::from([1000 + i as u32]))).collect();
        let rankings: Rankings<u32> = (0..20)
            .map(|i| {
                let mut r: Vec<u32> = (0..25).collect();
                r.insert(i % 7, 1000 + i as u32);
                (q(i), r)
            })
            .collect();
        assert_eq!(precision_at_1(&rankings, &truth).unwrap(), 3.0 / 20.0);
        // Ranks 1..=5 are i % 7 ∈ 0..5: i ∈ {0..4, 7..11, 14..18} = 15 queries.
        assert_eq!(recall_at_k(&rankings, &truth, 5).unwrap(), 15.0 / 20.0);
        assert_eq!(recall_at_k(&rankings, &truth, 10).unwrap(), 1.0);
    }

    #[test]
    fn recall_cases() {
        let truth: GroundTruth<u32> = BTreeMap::from([(q(0), BTreeSet::from([6]))]);
        let r: Rankings<u32> = BTreeMap::from([(q(0), vec![1, 2, 3, 4, 5, 6])]);
        assert_eq!(recall_at_k(&r, &truth, 5).unwrap(), 0.0);
        assert_eq!(recall_at_k(&r, &truth, 6).unwrap(), 1.0);
        assert!(recall_at_k(&r, &truth, 0).is_err());
        let multi: GroundTruth<u32> = BTreeMap::from([(q(0), BTreeSet::from([2, 6, 40]))]);
        assert!((recall_at_k(&r, &multi, 5).unwrap() - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn jaccard_examples() {
        let (a, b) = (mask(&[1, 1, 0, 0]), mask(&[1, 0, 0, 0]));
        assert!(jaccard_mask_match(&a, &b, 0.5).unwrap());
        assert!(!jaccard_mask_match(&a, &b, 0.8).unwrap());
        assert!(jaccard_mask_match(&a, &a, 1.0).unwrap());
        assert!(!jaccard_mask_match(&mask(&[1, 0]), &mask(&[0, 1]), 0.01).unwrap());
        assert!(!jaccard_mask_match(&mask(&[0, 0]), &mask(&[0, 0]), 0.0).unwrap());
        assert!(jaccard_mask_match(&a, &mask(&[1, 1]), 0.5).is_err());
    }

    #[test]
    fn fuzzy_matching_picks_best_gold() {
        let gold = [mask(&[1, 1, 1, 0, 0]), mask(&[0, 0, 1, 1, 1])];
        let generated = [mask(&[1, 1, 1, 1, 0]), mask(&[0, 0, 0, 1, 1]), mask(&[1, 0, 0, 0, 1])];
        assert_eq!(
            fuzzy_match_masks(&generated, &gold, 0.6).unwrap(),
            [Some(0), Some(1), None]
        );
    }

    #[test]
    fn fuzzy_query_mapping_stays_within_sentence() {
        let gold = vec![
            ("g0".to_string(), 0u32, mask(&[1, 1, 1, 0])),
            ("g1".to_string(), 1u32, mask(&[1, 1, 1, 0])),
        ];
        let generated = vec![
            ("x".to_string(), 1u32, mask(&[1, 1, 1, 1])),
            ("y".to_string(), 0u32, mask(&[0, 0, 0, 1])),
            ("z".to_string(), 2u32, mask(&[1, 1, 1, 0])),
        ];
        let map = fuzzy_query_map(&generated, &gold, 0.7).unwrap();
        assert_eq!(map, BTreeMap::from([("x".to_string(), "g1".to_string())]));
        let truth: GroundTruth<u32> = BTreeMap::from([("g1".into(), BTreeSet::from([5]))]);
        assert_eq!(remap_truth(&truth, &map), BTreeMap::from([("x".into(), BTreeSet::from([5]))]));
    }

    #[test]
    fn spearman_cases() {
        let h = [0.1, 0.5, 0.3, 0.9, 0.7];
        assert_eq!(spearman(&h, &h).unwrap(), 1.0);
        let rev: Vec<f64> = h.iter().map(|x| -x).collect();
        assert_eq!(spearman(&rev, &h).unwrap(), -1.0);
        // Reference values from scipy.stats.spearmanr.
        let got = spearman(&[1.0, 2.0, 2.0, 4.0], &[1.0, 3.0, 2.0, 4.0]).unwrap();
        assert!((got - 0.948_683_298_050_513_9).abs() < 1e-12);
        let got = spearman(
            &[3.0, 1.0, 4.0, 1.0, 5.0, 9.0, 2.0, 6.0],
            &[2.0, 7.0, 1.0, 8.0, 2.0, 8.0, 1.0, 8.0],
        )
        .unwrap();
        assert!((got - 0.198_853_681_209_924_67).abs() < 1e-12);
        assert!(spearman(&[1.0, 1.0], &[1.0, 2.0]).is_err());
        assert!(spearman(&[1.0], &[1.0]).is_err());
        assert!(spearman(&[1.0, 2.0], &[1.0]).is_err());
    }

    fn model() -> Model {
        let sentences = [
            tokenize("the bank raised interest rates"),
            tokenize("they sat on the river bank"),
        ];
        let vocab = Vocab::build(sentences.iter(), 1);
        let cfg = EncoderConfig {
            vocab_size: vocab.len(),
            ..EncoderConfig::default()
        };
        Model {
            params: EncoderParams::init(cfg, 4).unwrap(),
            vocab,
        }
    }

    #[test]
    fn conditional_similarity_cases() {
        let m = model();
        let s1 = tokenize("the bank raised interest rates");
        let s2 = tokenize("they sat on the river bank");
        let same = ConditionalInstance {
            sentence_1: s1.clone(),
            sentence_2: s1.clone(),
            mask_1: mask(&[0, 1, 0, 0, 0]),
            mask_2: mask(&[0, 1, 0, 0, 0]),
            human_score: 5.0,
        };
        assert!((conditional_similarity(&m, &same).unwrap() - 1.0).abs() < 1e-12);
        let diff = ConditionalInstance {
            sentence_1: s1,
            sentence_2: s2,
            mask_1: mask(&[1, 1, 0, 0, 0]),
            mask_2: mask(&[0, 0, 0, 1, 0, 1]),
            human_score: 1.0,
        };
        let forward = conditional_similarity(&m, &diff).unwrap();
        assert!(forward < 0.999);
        let swapped = ConditionalInstance {
            sentence_1: diff.sentence_2.clone(),
            sentence_2: diff.sentence_1.clone(),
            mask_1: diff.mask_2.clone(),
            mask_2: diff.mask_1.clone(),
            human_score: 1.0,
        };
        assert_eq!(conditional_similarity(&m, &swapped).unwrap(), forward);
        let empty = ConditionalInstance {
            mask_1: mask(&[0, 0, 0, 0, 0]),
            ..same
        };
        assert!(matches!(conditional_similarity(&m, &empty), Err(Error::EmptyMask)));
    }

    proptest! {
        #[test]
        fn recall_monotone_in_k(
            rankings in prop::collection::vec(prop::collection::vec(0u32..30, 0..25), 1..10),
            truths in prop::collection::vec(prop::collection::btree_set(0u32..30, 1..5), 10),
        ) {
            let r: Rankings<u32> = rankings.iter().enumerate().map(|(i, v)| (q(i), v.clone())).collect();
            let t: GroundTruth<u32> = (0..rankings.len()).map(|i| (q(i), truths[i].clone())).collect();
            let mut prev = 0.0;
            for k in 1..=26 {
                let v = recall_at_k(&r, &t, k).unwrap();
                prop_assert!(v >= prev);
                prev = v;
            }
        }

        #[test]
        fn singleton_truth_precision_equals_recall_at_1(
            rankings in prop::collection::vec(prop::collection::vec(0u32..10, 1..6), 1..10),
            answers in prop::collection::vec(0u32..10, 10),
        ) {
            let r: Rankings<u32> = rankings.iter().enumerate().map(|(i, v)| (q(i), v.clone())).collect();
            let t: GroundTruth<u32> = (0..rankings.len()).map(|i| (q(i), BTreeSet::from([answers[i]]))).collect();
            prop_assert_eq!(precision_at_1(&r, &t).unwrap(), recall_at_k(&r, &t, 1).unwrap());
        }

        #[test]
        fn jaccard_symmetric(bits in prop::collection::vec((0u8..2, 0u8..2), 1..20), theta in 0.0f64..1.0) {
            let a = mask(&bits.iter().map(|p| p.0).collect::<Vec<_>>());
            let b = mask(&bits.iter().map(|p| p.1).collect::<Vec<_>>());
            prop_assert_eq!(jaccard_mask_match(&a, &b, theta).unwrap(), jaccard_mask_match(&b, &a, theta).unwrap());
        }

        #[test]
        fn spearman_monotone_invariance(
            pairs in prop::collection::vec((-100i32..100, -100i32..100), 3..30),
        ) {
            let a: Vec<f64> = pairs.iter().map(|p| p.0 as f64).collect();
            let b: Vec<f64> = pairs.iter().map(|p| p.1 as f64).collect();
            prop_assume!(a.iter().any(|&x| x != a[0]) && b.iter().any(|&x| x != b[0]));
            let base = spearman(&a, &b).unwrap();
            let ta: Vec<f64> = a.iter().map(|x| (x / 50.0).exp()).collect();
            let tb: Vec<f64> = b.iter().map(|x| x * 3.0 - 7.0).collect();
            prop_assert!((spearman(&ta, &tb).unwrap() - base).abs() < 1e-12);
        }
    }
}
