//! Proposition-to-sentence token alignment.
//!
//! A proposition given as text is turned into a binary mask over its source
//! sentence: tokens with equal normalized forms score 1, diagonal neighbours
//! that also match add a small offset (so contiguous runs win ties), and a
//! maximum-weight bipartite matching picks the aligned sentence tokens.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tokenizer::{tokenize, SuffixNormalizer, TokenNormalizer, TokenizedText};

/// Scores are compared with this slack when deciding tightness and ties.
const SCORE_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AlignConfig {
    /// Side length of the square neighbourhood used for the tie-breaking offset.
    pub window: usize,
    /// Offset added per neighbouring match.
    pub eps: f64,
}

impl Default for AlignConfig {
    fn default() -> Self {
        Self {
            window: 3,
            eps: 0.1,
        }
    }
}

/// Dense `rows × cols` score matrix (proposition tokens × sentence tokens).
#[derive(Debug, Clone, PartialEq)]
pub struct AffinityMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl AffinityMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows * cols != data.len() {
            return Err(Error::Shape(format!(
                "affinity {rows}x{cols} with {} entries",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::InvalidArgument(
                "affinity entries must be finite and nonnegative".into(),
            ));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Shape("ragged affinity rows".into()));
        }
        Self::new(rows.len(), cols, rows.concat())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }
}

/// One bit per sentence token.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct BinaryMask(Vec<u8>);

impl BinaryMask {
    pub fn new(bits: Vec<u8>) -> Result<Self> {
        if bits.iter().any(|&b| b > 1) {
            return Err(Error::InvalidArgument("mask bits must be 0 or 1".into()));
        }
        Ok(Self(bits))
    }

    pub fn from_bools(bits: &[bool]) -> Self {
        Self(bits.iter().map(|&b| u8::from(b)).collect())
    }

    pub fn ones(len: usize) -> Self {
        Self(vec![1; len])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn bits(&self) -> &[u8] {
        &self.0
    }

    pub fn is_set(&self, i: usize) -> bool {
        self.0[i] == 1
    }

    pub fn popcount(&self) -> usize {
        self.0.iter().filter(|&&b| b == 1).count()
    }

    pub fn set_indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.0
            .iter()
            .enumerate()
            .filter(|(_, &b)| b == 1)
            .map(|(i, _)| i)
    }

    /// Errors unless the mask has at least one bit and exactly `len` entries.
    pub fn validate_for(&self, len: usize) -> Result<()> {
        if self.len() != len {
            return Err(Error::Shape(format!(
                "mask of length {} for {len} tokens",
                self.len()
            )));
        }
        if self.popcount() == 0 {
            return Err(Error::EmptyMask);
        }
        Ok(())
    }
}

/// Entry `(i, j)` is 1 iff proposition token `i` and sentence token `j`
/// normalize to the same string.
pub fn build_affinity(
    prop: &TokenizedText,
    sent: &TokenizedText,
    normalizer: &dyn TokenNormalizer,
) -> Result<AffinityMatrix> {
    if prop.is_empty() {
        return Err(Error::EmptyProposition);
    }
    let p: Vec<String> = prop.tokens.iter().map(|t| normalizer.normalize(t)).collect();
    let s: Vec<String> = sent.tokens.iter().map(|t| normalizer.normalize(t)).collect();
    let data = p
        .iter()
        .flat_map(|a| s.iter().map(move |b| if a == b { 1.0 } else { 0.0 }))
        .collect();
    AffinityMatrix::new(p.len(), s.len(), data)
}

/// Adds `eps` to every matching cell for each matching cell that is offset
/// diagonally from it (both indices differ, by at most `window / 2`).
/// Non-matching cells are left at zero.
pub fn apply_window_offset(m: &AffinityMatrix, config: &AlignConfig) -> AffinityMatrix {
    let reach = (config.window / 2) as isize;
    let base = |i: isize, j: isize| -> bool {
        i >= 0
            && j >= 0
            && (i as usize) < m.rows
            && (j as usize) < m.cols
            && m.get(i as usize, j as usize) >= 1.0 - SCORE_TOL
    };
    let mut out = m.clone();
    for i in 0..m.rows as isize {
        for j in 0..m.cols as isize {
            if !base(i, j) {
                continue;
            }
            let mut neighbours = 0usize;
            for di in -reach..=reach {
                for dj in -reach..=reach {
                    if di != 0 && dj != 0 && base(i + di, j + dj) {
                        neighbours += 1;
                    }
                }
            }
            out.data[i as usize * m.cols + j as usize] += config.eps * neighbours as f64;
        }
    }
    out
}

/// Maximum-weight assignment of rows to columns.
///
/// The matrix is zero-padded to square and solved with the Hungarian
/// algorithm; zero-score pairs are dropped. Among all optimal assignments the
/// lexicographically smallest list of `(row, col)` pairs is returned.
pub fn hungarian_max_match(m: &AffinityMatrix) -> Vec<(usize, usize)> {
    let n = m.rows.max(m.cols);
    if n == 0 {
        return Vec::new();
    }
    let score = |i: usize, j: usize| -> f64 {
        if i < m.rows && j < m.cols {
            m.get(i, j)
        } else {
            0.0
        }
    };
    let (u, v) = solve_min_cost_duals(n, |i, j| -score(i, j));

    // Any perfect matching on tight edges is optimal. Rows are settled in
    // order: each takes its smallest positive column that still leaves a
    // tight perfect matching, otherwise it is restricted to zero-score
    // columns without committing to one, so padding never blocks a later row.
    let tight = |i: usize, j: usize| (-score(i, j) - u[i] - v[j]).abs() <= SCORE_TOL * 10.0;
    let mut allowed: Vec<Vec<usize>> = (0..n).map(|i| (0..n).filter(|&j| tight(i, j)).collect()).collect();
    for i in 0..m.rows {
        let positive: Vec<usize> = allowed[i].iter().copied().filter(|&j| score(i, j) > SCORE_TOL).collect();
        let all = std::mem::take(&mut allowed[i]);
        let mut settled = false;
        for j in positive {
            allowed[i] = vec![j];
            if perfect_matching(n, &allowed).is_some() {
                settled = true;
                break;
            }
        }
        if !settled {
            allowed[i] = all.into_iter().filter(|&j| score(i, j) <= SCORE_TOL).collect();
        }
    }
    // The tight graph of an optimal dual always has a perfect matching.
    let row_match = perfect_matching(n, &allowed).expect("tight graph has a perfect matching");

    (0..m.rows)
        .filter_map(|i| {
            let j = row_match[i];
            (j < m.cols && score(i, j) > SCORE_TOL).then_some((i, j))
        })
        .collect()
}

/// O(n³) Hungarian algorithm (shortest augmenting paths with potentials) on
/// an `n × n` cost matrix. Returns feasible optimal duals `(u, v)` with
/// `cost(i, j) - u[i] - v[j] >= 0`.
fn solve_min_cost_duals(n: usize, cost: impl Fn(usize, usize) -> f64) -> (Vec<f64>, Vec<f64>) {
    // 1-indexed internally; index 0 is the virtual root.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    (u[1..].to_vec(), v[1..].to_vec())
}

/// Kuhn's augmenting-path matching; `Some(row -> col)` if every row is matched.
fn perfect_matching(n: usize, adj: &[Vec<usize>]) -> Option<Vec<usize>> {
    fn augment(r: usize, adj: &[Vec<usize>], seen: &mut [bool], col_of: &mut [usize]) -> bool {
        for &c in &adj[r] {
            if seen[c] {
                continue;
            }
            seen[c] = true;
            if col_of[c] == usize::MAX || augment(col_of[c], adj, seen, col_of) {
                col_of[c] = r;
                return true;
            }
        }
        false
    }

    let mut col_of = vec![usize::MAX; n];
    for r in 0..n {
        let mut seen = vec![false; n];
        if !augment(r, adj, &mut seen, &mut col_of) {
            return None;
        }
    }
    let mut row_of = vec![0; n];
    for (c, &r) in col_of.iter().enumerate() {
        row_of[r] = c;
    }
    Some(row_of)
}

/// Full proposition → mask pipeline over an already tokenized sentence.
pub fn proposition_to_mask(
    prop_text: &str,
    sentence: &TokenizedText,
    config: &AlignConfig,
) -> Result<BinaryMask> {
    proposition_to_mask_with(prop_text, sentence, config, &SuffixNormalizer)
}

pub fn proposition_to_mask_with(
    prop_text: &str,
    sentence: &TokenizedText,
    config: &AlignConfig,
    normalizer: &dyn TokenNormalizer,
) -> Result<BinaryMask> {
    if sentence.is_empty() {
        return Err(Error::InvalidArgument("empty sentence".into()));
    }
    let prop = tokenize(prop_text);
    let base = build_affinity(&prop, sentence, normalizer)?;
    let offset = apply_window_offset(&base, config);
    let assignment = hungarian_max_match(&offset);
    if assignment.is_empty() {
        return Err(Error::UnalignableProposition(prop_text.to_string()));
    }
    let mut bits = vec![0u8; sentence.len()];
    for (_, j) in assignment {
        bits[j] = 1;
    }
    BinaryMask::new(bits)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tt(tokens: &[&str]) -> TokenizedText {
        tokenize(&tokens.join(" "))
    }

    fn affinity(p: &[&str], s: &[&str]) -> AffinityMatrix {
        build_affinity(&tt(p), &tt(s), &SuffixNormalizer).unwrap()
    }

    #[test]
    fn zero_row_does_not_steal_a_later_positive_column() {
        // Row 3 is all zero; it must not take column 1 from row 5.
        let m = AffinityMatrix::from_rows(&[
            vec![1.0, 0.0, 1.1, 0.0, 0.0, 1.0, 0.0],
            vec![0.0, 0.0, 1.1, 1.1, 0.0, 1.0, 0.0],
            vec![0.0, 0.0, 0.0, 1.1, 0.0, 0.0, 0.0],
            vec![0.0; 7],
            vec![0.0, 0.0, 1.1, 0.0, 0.0, 1.1, 0.0],
            vec![0.0, 1.1, 0.0, 0.0, 0.0, 1.0, 1.1],
        ])
        .unwrap();
        assert_eq!(hungarian_max_match(&m), vec![(0, 0), (1, 2), (2, 3), (4, 5), (5, 1)]);
    }

    #[test]
    fn identical_token_lists_give_identity_pattern() {
        let toks = ["Dracula", "is", "a", "novel"];
        let m = affinity(&toks, &toks);
        for i in 0..4 {
            for j in 0..4 {
                assert_eq!(m.get(i, j), if i == j { 1.0 } else { 0.0 });
            }
        }
    }

    #[test]
    fn repeated_sentence_token_gives_two_candidates() {
        let m = affinity(&["novel"], &["a", "novel", "about", "a", "novel"]);
        assert_eq!(m.row(0), &[0.0, 1.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn no_overlap_is_all_zero() {
        let m = affinity(&["flying", "pig"], &["the", "cat", "sat"]);
        assert!(m.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn empty_proposition_is_an_error() {
        let r = build_affinity(&tokenize(""), &tt(&["a"]), &SuffixNormalizer);
        assert!(matches!(r, Err(Error::EmptyProposition)));
    }

    #[test]
    fn single_match_has_no_offset() {
        let m = affinity(&["novel"], &["a", "novel"]);
        assert_eq!(apply_window_offset(&m, &AlignConfig::default()), m);
    }

    #[test]
    fn offset_rewards_diagonal_neighbour() {
        let m = affinity(&["a", "novel"], &["a", "novel", "about", "a", "plot"]);
        let o = apply_window_offset(&m, &AlignConfig::default());
        // (a,0) and (novel,1) support each other; (a,3) has no diagonal match.
        assert!((o.get(0, 0) - 1.1).abs() < 1e-12);
        assert!((o.get(1, 1) - 1.1).abs() < 1e-12);
        assert_eq!(o.get(0, 3), 1.0);
        assert_eq!(o.get(1, 2), 0.0);
    }

    #[test]
    fn all_ones_center_gains_four_diagonals() {
        let m = AffinityMatrix::from_rows(&[vec![1.0; 3], vec![1.0; 3], vec![1.0; 3]]).unwrap();
        let o = apply_window_offset(&m, &AlignConfig::default());
        assert!((o.get(1, 1) - 1.4).abs() < 1e-12);
        assert!((o.get(0, 0) - 1.1).abs() < 1e-12);
        assert!((o.get(0, 1) - 1.2).abs() < 1e-12);
    }

    #[test]
    fn hungarian_identity() {
        let m = AffinityMatrix::from_rows(&[
            vec![1.0, 0.0, 0.0],
            vec![0.0, 1.0, 0.0],
            vec![0.0, 0.0, 1.0],
        ])
        .unwrap();
        assert_eq!(hungarian_max_match(&m), [(0, 0), (1, 1), (2, 2)]);
    }

    #[test]
    fn hungarian_forced_perfect_matching() {
        let m = AffinityMatrix::from_rows(&[vec![1.0, 1.0], vec![0.0, 1.0]]).unwrap();
        assert_eq!(hungarian_max_match(&m), [(0, 0), (1, 1)]);
    }

    #[test]
    fn hungarian_prefers_lexicographically_smallest_optimum() {
        let m = AffinityMatrix::from_rows(&[vec![1.0, 1.0, 1.0], vec![1.0, 1.0, 1.0]]).unwrap();
        assert_eq!(hungarian_max_match(&m), [(0, 0), (1, 1)]);
        let m = AffinityMatrix::from_rows(&[vec![0.0, 1.0, 1.0], vec![0.0, 1.0, 0.0]]).unwrap();
        assert_eq!(hungarian_max_match(&m), [(0, 2), (1, 1)]);
    }

    #[test]
    fn hungarian_drops_zero_scores() {
        let m = AffinityMatrix::from_rows(&[vec![0.0, 0.0], vec![0.0, 2.0], vec![0.0, 0.0]])
            .unwrap();
        assert_eq!(hungarian_max_match(&m), [(1, 1)]);
        let empty = AffinityMatrix::from_rows(&[vec![0.0; 4]]).unwrap();
        assert!(hungarian_max_match(&empty).is_empty());
    }

    #[test]
    fn mask_for_identical_text_is_all_ones() {
        let s = tokenize("Dracula is a novel .");
        let m = proposition_to_mask("Dracula is a novel .", &s, &AlignConfig::default()).unwrap();
        assert_eq!(m.bits(), &[1, 1, 1, 1, 1]);
    }

    #[test]
    fn mask_for_prefix_proposition() {
        let s = tokenize("Dracula is a novel published in 1897");
        let m = proposition_to_mask("Dracula is a novel", &s, &AlignConfig::default()).unwrap();
        assert_eq!(m.bits(), &[1, 1, 1, 1, 0, 0, 0]);
    }

    #[test]
    fn window_offset_prefers_contiguous_pair() {
        let s = tokenize("a novel about a count");
        let m = proposition_to_mask("a novel", &s, &AlignConfig::default()).unwrap();
        assert_eq!(m.bits(), &[1, 1, 0, 0, 0]);
    }

    #[test]
    fn unalignable_proposition() {
        let s = tokenize("the cat sat");
        let r = proposition_to_mask("flying pig", &s, &AlignConfig::default());
        assert!(matches!(r, Err(Error::UnalignableProposition(_))));
    }

    #[test]
    fn mask_validation() {
        assert!(BinaryMask::new(vec![0, 2]).is_err());
        let m = BinaryMask::new(vec![0, 0]).unwrap();
        assert!(matches!(m.validate_for(2), Err(Error::EmptyMask)));
        assert!(BinaryMask::ones(3).validate_for(2).is_err());
    }
}
