//! Deterministic inputs shared by the benchmarks.

use propenc::alignment::AffinityMatrix;
use propenc::index::{random_unit_vectors, PropEntry, PropIndex, PropKey};
use propenc::{BinaryMask, EncoderConfig, EncoderParams, Positives, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Sparse 0/1 token-match matrix, the shape alignment produces.
pub fn match_matrix(rows: usize, cols: usize, seed: u64) -> AffinityMatrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..rows * cols)
        .map(|_| if rng.random_bool(0.15) { 1.0 } else { 0.0 })
        .collect();
    AffinityMatrix::new(rows, cols, data).unwrap()
}

/// Index of `n` unit vectors, five propositions per sentence.
pub fn index(n: usize, dim: usize, seed: u64) -> PropIndex {
    let mut idx = PropIndex::new(dim, serde_json::Value::Null).unwrap();
    for (i, v) in random_unit_vectors(n, dim, seed).into_iter().enumerate() {
        let i = i as u64;
        let key = PropKey::new(i / 20, (i / 5) % 4, i % 5);
        idx.add(PropEntry::new(key, BinaryMask::ones(8), v).unwrap()).unwrap();
    }
    idx
}

pub fn encoder(d_model: usize, n_layers: usize) -> EncoderParams {
    let cfg = EncoderConfig {
        vocab_size: 300,
        d_model,
        n_layers,
        ..EncoderConfig::default()
    };
    EncoderParams::init(cfg, 1).unwrap()
}

/// Token ids and `k` random non-empty masks over a sentence of `len` tokens.
pub fn sentence(len: usize, k: usize, seed: u64) -> (Vec<usize>, Vec<BinaryMask>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids = (0..len).map(|_| rng.random_range(2..300)).collect();
    let masks = (0..k)
        .map(|_| {
            let start = rng.random_range(0..len);
            let end = rng.random_range(start + 1..=len);
            BinaryMask::from_bools(&(0..len).map(|j| (start..end).contains(&j)).collect::<Vec<_>>())
        })
        .collect();
    (ids, masks)
}

/// `n` unit rows of width `d`, positives in consecutive pairs.
pub fn loss_batch(n: usize, d: usize, seed: u64) -> (Tensor, Positives) {
    let rows: Vec<Vec<f64>> = random_unit_vectors(n, d, seed)
        .into_iter()
        .map(|v| v.into_iter().map(f64::from).collect())
        .collect();
    let pairs: Vec<(usize, usize)> = (0..n / 2).map(|i| (2 * i, 2 * i + 1)).collect();
    (
        Tensor::from_rows(&rows).unwrap(),
        Positives::from_pairs(n, &pairs).unwrap(),
    )
}
