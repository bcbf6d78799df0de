//! In-batch supervised contrastive loss over proposition embeddings.
//!
//! For anchors `i` with a nonempty positive set `P(i)`:
//!
//! ```text
//! L = Σ_i  -1/|P(i)| Σ_{p ∈ P(i)} log( exp(v_i·v_p / τ) / Σ_{j ≠ i} exp(v_i·v_j / τ) )
//! ```
//!
//! Anchors without positives add nothing to the outer sum but still appear
//! as negatives in every other anchor's denominator.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{dot, log_sum_exp, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub temperature: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { temperature: 0.01 }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        Ok(())
    }
}

/// Symmetric, irreflexive positives map `i -> P(i)` over batch indices.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Positives {
    sets: Vec<Vec<usize>>,
}

impl Positives {
    /// Validates and stores `P(i)` for `i in 0..sets.len()`. Each set is
    /// sorted and deduplicated.
    pub fn from_sets(mut sets: Vec<Vec<usize>>) -> Result<Self> {
        let n = sets.len();
        for (i, s) in sets.iter_mut().enumerate() {
            s.sort_unstable();
            s.dedup();
            if let Some(&j) = s.iter().find(|&&j| j >= n) {
                return Err(Error::InvalidPositives(format!("{i} -> {j} out of range")));
            }
            if s.contains(&i) {
                return Err(Error::InvalidPositives(format!("{i} is its own positive")));
            }
        }
        for (i, s) in sets.iter().enumerate() {
            for &j in s {
                if sets[j].binary_search(&i).is_err() {
                    return Err(Error::InvalidPositives(format!(
                        "{i} -> {j} without {j} -> {i}"
                    )));
                }
            }
        }
        Ok(Self { sets })
    }

    /// Builds from undirected pairs over `n` items.
    pub fn from_pairs(n: usize, pairs: &[(usize, usize)]) -> Result<Self> {
        let mut sets = vec![Vec::new(); n];
        for &(a, b) in pairs {
            if a >= n || b >= n {
                return Err(Error::InvalidPositives(format!("pair ({a},{b}) out of range")));
            }
            sets[a].push(b);
            sets[b].push(a);
        }
        Self::from_sets(sets)
    }

    pub fn len(&self) -> usize {
        self.sets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sets.is_empty()
    }

    pub fn get(&self, i: usize) -> &[usize] {
        &self.sets[i]
    }

    pub fn num_anchors(&self) -> usize {
        self.sets.iter().filter(|s| !s.is_empty()).count()
    }

    /// Relabels items: new index `k` is old index `perm[k]`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        let mut inverse = vec![0; perm.len()];
        for (k, &old) in perm.iter().enumerate() {
            inverse[old] = k;
        }
        let sets = perm
            .iter()
            .map(|&old| self.sets[old].iter().map(|&j| inverse[j]).collect())
            .collect();
        Self::from_sets(sets)
    }
}

fn check_batch(embeddings: &Tensor, positives: &Positives, tau: f64) -> Result<()> {
    if embeddings.rank() != 2 {
        return Err(Error::Shape("embeddings must be an N x d matrix".into()));
    }
    if embeddings.rows() < 2 {
        return Err(Error::InvalidArgument(format!(
            "need at least 2 embeddings, got {}",
            embeddings.rows()
        )));
    }
    if positives.len() != embeddings.rows() {
        return Err(Error::Shape(format!(
            "{} positive sets for {} embeddings",
            positives.len(),
            embeddings.rows()
        )));
    }
    if !embeddings.is_finite() {
        return Err(Error::NonFinite("embeddings".into()));
    }
    LossConfig { temperature: tau }.validate()
}

/// Loss value and its gradient with respect to every row of `embeddings`.
///
/// Rows are expected to be unit-norm so that dot products are cosines; the
/// gradient treats each row as a free vector.
pub fn supcon_loss(embeddings: &Tensor, positives: &Positives, tau: f64) -> Result<(f64, Tensor)> {
    check_batch(embeddings, positives, tau)?;
    let n = embeddings.rows();
    let sim = |i: usize, j: usize| dot(embeddings.row(i), embeddings.row(j)) / tau;

    // coeff[i][j] = dL/ds_ij with s_ij = v_i·v_j / τ.
    let mut coeff = vec![0.0; n * n];
    let mut loss = 0.0;
    let mut logits = vec![0.0; n];
    for i in 0..n {
        let pos = positives.get(i);
        if pos.is_empty() {
            continue;
        }
        for j in 0..n {
            logits[j] = if j == i { f64::NEG_INFINITY } else { sim(i, j) };
        }
        let lse = log_sum_exp(&logits);
        let w = 1.0 / pos.len() as f64;
        for &p in pos {
            loss -= w * (logits[p] - lse);
        }
        for j in 0..n {
            if j != i {
                coeff[i * n + j] = (logits[j] - lse).exp();
            }
        }
        for &p in pos {
            coeff[i * n + p] -= w;
        }
    }

    // dL/dv_i = Σ_j (coeff[i][j] + coeff[j][i]) v_j / τ
    let d = embeddings.cols();
    let mut grad = Tensor::zeros(&[n, d]);
    for i in 0..n {
        let g = grad.row_mut(i);
        for j in 0..n {
            let c = coeff[i * n + j] + coeff[j * n + i];
            if c == 0.0 {
                continue;
            }
            for (gk, vk) in g.iter_mut().zip(embeddings.row(j)) {
                *gk += c * vk / tau;
            }
        }
    }
    Ok((loss, grad))
}

/// Value-only convenience wrapper around [`supcon_loss`].
pub fn supcon_loss_value(embeddings: &Tensor, positives: &Positives, tau: f64) -> Result<f64> {
    supcon_loss(embeddings, positives, tau).map(|(l, _)| l)
}

/// Summed cross-entropy of each anchor against its single positive, over
/// all other in-batch candidates.
pub fn inbatch_softmax_ce(embeddings: &Tensor, positives: &Positives, tau: f64) -> Result<f64> {
    check_batch(embeddings, positives, tau)?;
    let n = embeddings.rows();
    let mut total = 0.0;
    for i in 0..n {
        let target = match positives.get(i) {
            [] => continue,
            [p] => *p,
            more => {
                return Err(Error::InvalidPositives(format!(
                    "anchor {i} has {} positives; softmax cross-entropy needs one",
                    more.len()
                )))
            }
        };
        let candidates: Vec<usize> = (0..n).filter(|&j| j != i).collect();
        let logits: Vec<f64> = candidates
            .iter()
            .map(|&j| dot(embeddings.row(i), embeddings.row(j)) / tau)
            .collect();
        let t = candidates.iter().position(|&j| j == target).expect("target in batch");
        total += log_sum_exp(&logits) - logits[t];
    }
    Ok(total)
}
