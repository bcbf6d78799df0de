//! End-to-end acceptance suite. Runs every criterion, prints one line each,
//! and exits non-zero if any fails.

use std::collections::{BTreeMap, BTreeSet};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use propenc::alignment::{apply_window_offset, hungarian_max_match, proposition_to_mask, AffinityMatrix};
use propenc::corpus::{align_record, label_record, labeled_pairs};
use propenc::encoder::encode_propositions_traced;
use propenc::eval::{precision_at_1, recall_at_k, spearman, GroundTruth, Rankings};
use propenc::index::{
    compression_ratio, propagate_scores, random_unit_vectors, GroupHit, Level, PropEntry, PropIndex,
    PropKey, DEFAULT_OVER_RETRIEVAL, ENTRY_FIXED_BYTES, HEADER_BYTES,
};
use propenc::loss::{inbatch_softmax_ce, supcon_loss, supcon_loss_value};
use propenc::numerics::{finite_diff_gradient, max_abs_diff, max_relative_error};
use propenc::pairing::LexicalOracle;
use propenc::synth::{generate, SynthConfig};
use propenc::trainer::{gather_and_backprop, prepare_batches, Checkpoint};
use propenc::{
    tokenize, AlignConfig, BinaryMask, EncoderConfig, EncoderParams, Error, Model, Positives, Tensor,
    Vocab,
};
use propenc_cli::commands::{layout, pipeline};
use propenc_cli::RunConfig;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn data_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data")
}

fn random_rows(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Tensor {
    let rows: Vec<Vec<f64>> = (0..n)
        .map(|_| {
            let v: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.into_iter().map(|x| x / norm).collect()
        })
        .collect();
    Tensor::from_rows(&rows).unwrap()
}

/// Random partition into groups of size 1..=max_group; members of a group
/// are each other's positives.
fn random_groups(rng: &mut ChaCha8Rng, n: usize, max_group: usize) -> Positives {
    loop {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(rng);
        let mut sets = vec![Vec::new(); n];
        let mut rest = &order[..];
        while !rest.is_empty() {
            let g = rng.random_range(1..=max_group.min(rest.len()));
            let (grp, tail) = rest.split_at(g);
            for &a in grp {
                sets[a] = grp.iter().copied().filter(|&b| b != a).collect();
            }
            rest = tail;
        }
        let p = Positives::from_sets(sets).unwrap();
        if p.num_anchors() > 0 {
            return p;
        }
    }
}

/// The check runs at temperatures where central differences with h = 1e-5
/// resolve every component; at the training temperature (0.01) the softmax
/// saturates and FD rounding noise swamps near-zero components. That case is
/// tied to τ = 1 exactly: scores depend on v only through v/√τ, so
/// ∇L(v; τ) = ∇L(v/√τ; 1) / √τ.
fn c1_gradient_check() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let start = Instant::now();
    let mut worst = 0.0f64;
    let mut worst_scaling = 0.0f64;
    let mut sizes = BTreeSet::new();
    for b in 0..100 {
        let n = rng.random_range(2..=8);
        let d = rng.random_range(2..=8);
        let emb = random_rows(&mut rng, n, d);
        let pos = random_groups(&mut rng, n, 3);
        for i in 0..n {
            sizes.insert(pos.get(i).len());
        }
        let tau = [0.1, 0.5, 1.0][b % 3];
        let (_, analytic) = supcon_loss(&emb, &pos, tau).unwrap();
        let numeric =
            finite_diff_gradient(|e: &Tensor| supcon_loss_value(e, &pos, tau).unwrap(), &emb, 1e-5).unwrap();
        worst = worst.max(max_relative_error(&analytic, &numeric).unwrap());

        let train_tau = 0.01;
        let (_, at_train) = supcon_loss(&emb, &pos, train_tau).unwrap();
        let scale = train_tau.sqrt();
        let rescaled = Tensor::new(emb.shape().to_vec(), emb.data().iter().map(|x| x / scale).collect()).unwrap();
        let (_, at_one) = supcon_loss(&rescaled, &pos, 1.0).unwrap();
        let mapped = Tensor::new(at_one.shape().to_vec(), at_one.data().iter().map(|g| g / scale).collect()).unwrap();
        worst_scaling = worst_scaling.max(max_relative_error(&at_train, &mapped).unwrap());
    }
    let elapsed = start.elapsed();
    ensure(sizes == BTreeSet::from([0, 1, 2]), || format!("positive-set sizes seen: {sizes:?}"))?;
    ensure(worst < 1e-4, || format!("max relative error {worst:e}"))?;
    ensure(worst_scaling < 1e-9, || format!("temperature rescaling off by {worst_scaling:e}"))?;
    ensure(elapsed < Duration::from_secs(60), || format!("took {elapsed:?}"))?;
    Ok(format!(
        "max rel err {worst:.2e} over 100 batches (tau 0.1/0.5/1), tau=0.01 rescaling {worst_scaling:.1e}, {elapsed:.2?}"
    ))
}

fn c2_softmax_reduction() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let n = rng.random_range(2..=12);
        let d = rng.random_range(2..=16);
        let emb = random_rows(&mut rng, n, d);
        let pos = random_groups(&mut rng, n, 2);
        let tau = [0.01, 0.05, 0.1, 1.0][rng.random_range(0..4)];
        let a = supcon_loss_value(&emb, &pos, tau).unwrap();
        let b = inbatch_softmax_ce(&emb, &pos, tau).unwrap();
        worst = worst.max((a - b).abs());
    }
    ensure(worst < 1e-12, || format!("max |difference| {worst:e}"))?;
    Ok(format!("max |supcon - softmax CE| = {worst:e}"))
}

fn c3_hand_value() -> Outcome {
    let emb = Tensor::from_rows(&[vec![1.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
    let pos = Positives::from_sets(vec![vec![1], vec![0], vec![]]).unwrap();
    let got = supcon_loss_value(&emb, &pos, 1.0).unwrap();
    let want = 2.0 * (1.0 + (-1.0f64).exp()).ln();
    ensure((got - want).abs() < 1e-12, || format!("{got} vs {want}"))?;
    Ok(format!("{got} (expected {want})"))
}

fn random_mask(rng: &mut ChaCha8Rng, len: usize) -> BinaryMask {
    let mut bits: Vec<u8> = (0..len).map(|_| u8::from(rng.random_bool(0.4))).collect();
    if !bits.contains(&1) {
        let i = rng.random_range(0..len);
        bits[i] = 1;
    }
    BinaryMask::new(bits).unwrap()
}

fn same_bits(a: &[f64], b: &[f64]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
}

fn c4_architecture() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let cfg = EncoderConfig {
        vocab_size: 60,
        d_model: 16,
        n_heads: 2,
        n_layers: 2,
        max_len: 32,
        d_out: 8,
        init_std: 0.3,
        ..EncoderConfig::default()
    };
    let params = EncoderParams::init(cfg, 3).unwrap();
    for case in 0..50 {
        let len = rng.random_range(2..=24);
        let ids: Vec<usize> = (0..len).map(|_| rng.random_range(2..60)).collect();
        let k = rng.random_range(1..=6);
        let masks: Vec<BinaryMask> = (0..k).map(|_| random_mask(&mut rng, len)).collect();
        let (embs, trace) = encode_propositions_traced(&params, &ids, &masks).unwrap();
        ensure(trace.encoder_passes == 1 && trace.projections == k, || {
            format!("case {case}: {trace:?} for {k} masks")
        })?;

        let mut perm: Vec<usize> = (0..k).collect();
        perm.shuffle(&mut rng);
        let shuffled: Vec<BinaryMask> = perm.iter().map(|&i| masks[i].clone()).collect();
        let (perm_embs, _) = encode_propositions_traced(&params, &ids, &shuffled).unwrap();
        for (slot, &i) in perm.iter().enumerate() {
            ensure(same_bits(perm_embs[slot].as_slice(), embs[i].as_slice()), || {
                format!("case {case}: order changed embedding {i}")
            })?;
        }
        for (i, m) in masks.iter().enumerate() {
            let (alone, _) = encode_propositions_traced(&params, &ids, std::slice::from_ref(m)).unwrap();
            ensure(same_bits(alone[0].as_slice(), embs[i].as_slice()), || {
                format!("case {case}: embedding {i} depends on sibling masks")
            })?;
        }
    }
    Ok("50 sentences, k <= 6: bitwise order-invariant and independent, 1 encoder pass each".into())
}

fn synthetic_pairs(pairs: usize, seed: u64) -> Vec<propenc::pairing::LabeledPair> {
    let recs: Vec<_> = generate(&SynthConfig { pairs, seed, ..SynthConfig::default() })
        .unwrap()
        .iter()
        .map(|r| {
            let (a, _) = align_record(r, &AlignConfig::default()).unwrap();
            label_record(&a, &LexicalOracle::default()).unwrap()
        })
        .collect();
    labeled_pairs(&recs).unwrap()
}

fn c5_gather() -> Outcome {
    let pairs = synthetic_pairs(80, 11);
    let vocab = Vocab::build(pairs.iter().flat_map(|p| [&p.pair.sent_a, &p.pair.sent_b]), 1);
    let cfg = EncoderConfig {
        vocab_size: vocab.len(),
        d_model: 16,
        n_heads: 2,
        n_layers: 1,
        d_out: 8,
        init_std: 0.2,
        ..EncoderConfig::default()
    };
    let mut batches = Vec::new();
    let mut seed = 0;
    while batches.len() < 20 {
        for b in prepare_batches(&pairs, 8, seed, &vocab).unwrap() {
            if b.sentences.len() == 8 && b.num_propositions() >= 2 && batches.len() < 20 {
                batches.push(b);
            }
        }
        seed += 1;
    }
    let mut worst_abs = 0.0f64;
    let mut worst_rel = 0.0f64;
    for (i, batch) in batches.iter().enumerate() {
        let params = EncoderParams::init(cfg, i as u64).unwrap();
        let single = gather_and_backprop(&params, batch, 1, 0.01).unwrap();
        for w in [2, 4] {
            let sharded = gather_and_backprop(&params, batch, w, 0.01).unwrap();
            ensure(sharded.worker_losses.iter().all(|&l| l == single.loss), || {
                format!("batch {i}, W={w}: workers disagree on the loss")
            })?;
            worst_abs = worst_abs.max(max_abs_diff(&single.grads, &sharded.grads).unwrap());
            worst_rel = worst_rel.max(max_relative_error(&single.grads, &sharded.grads).unwrap());
        }
    }
    ensure(worst_abs < 1e-9, || format!("max |grad difference| {worst_abs:e}"))?;
    Ok(format!("20 batches, W in {{2,4}}: max abs diff {worst_abs:.1e}, max rel diff {worst_rel:.1e}"))
}

/// Exhaustive maximum-weight assignment over the zero-padded square matrix;
/// ties go to the lexicographically smallest list of positive-score pairs.
fn brute_force_match(m: &AffinityMatrix) -> (f64, Vec<(usize, usize)>) {
    const TOL: f64 = 1e-9;
    let n = m.rows().max(m.cols());
    let score = |i: usize, j: usize| if i < m.rows() && j < m.cols() { m.get(i, j) } else { 0.0 };
    let mut best: Option<(f64, Vec<(usize, usize)>)> = None;
    let mut perm: Vec<usize> = (0..n).collect();
    loop {
        let total: f64 = (0..n).map(|i| score(i, perm[i])).sum();
        let pairs: Vec<(usize, usize)> = (0..m.rows())
            .filter(|&i| perm[i] < m.cols() && score(i, perm[i]) > TOL)
            .map(|i| (i, perm[i]))
            .collect();
        let better = match &best {
            None => true,
            Some((bt, bp)) => total > bt + TOL || ((total - bt).abs() <= TOL && pairs < *bp),
        };
        if better {
            best = Some((total, pairs));
        }
        if !next_permutation(&mut perm) {
            break;
        }
    }
    best.unwrap()
}

fn next_permutation(p: &mut [usize]) -> bool {
    let Some(i) = (1..p.len()).rev().find(|&i| p[i - 1] < p[i]) else {
        return false;
    };
    let j = (i..p.len()).rev().find(|&j| p[j] > p[i - 1]).unwrap();
    p.swap(i - 1, j);
    p[i..].reverse();
    true
}

fn random_affinity(rng: &mut ChaCha8Rng) -> AffinityMatrix {
    let (mut r, mut c) = (rng.random_range(1..=7), rng.random_range(1..=8));
    if rng.random_bool(0.5) {
        std::mem::swap(&mut r, &mut c);
    }
    let kind = rng.random_range(0..3);
    let data: Vec<f64> = (0..r * c)
        .map(|_| match kind {
            0 => f64::from(u8::from(rng.random_bool(0.35))),
            1 => [0.0, 0.5, 1.0, 1.5, 2.0][rng.random_range(0..5)],
            _ => {
                if rng.random_bool(0.3) {
                    0.0
                } else {
                    rng.random_range(0.0..3.0)
                }
            }
        })
        .collect();
    let m = AffinityMatrix::new(r, c, data).unwrap();
    if kind == 0 {
        apply_window_offset(&m, &AlignConfig::default())
    } else {
        m
    }
}

#[derive(serde::Deserialize)]
struct FixtureCase {
    case: usize,
    sentence: String,
    proposition: String,
    #[serde(default)]
    expected_mask: Option<Vec<u8>>,
    #[serde(default)]
    expected_error: Option<String>,
}

fn c6_alignment() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(606);
    for case in 0..1000 {
        let m = random_affinity(&mut rng);
        let got = hungarian_max_match(&m);
        let got_total: f64 = got.iter().map(|&(i, j)| m.get(i, j)).sum();
        let (want_total, want) = brute_force_match(&m);
        ensure((got_total - want_total).abs() <= 1e-9 && got == want, || {
            format!("case {case} ({}x{}): got {got:?} ({got_total}), oracle {want:?} ({want_total})", m.rows(), m.cols())
        })?;
    }
    let text = std::fs::read_to_string(data_dir().join("alignment_fixture.jsonl")).map_err(|e| e.to_string())?;
    let cases: Vec<FixtureCase> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    ensure(cases.len() == 20, || format!("fixture has {} cases", cases.len()))?;
    for c in &cases {
        let got = proposition_to_mask(&c.proposition, &tokenize(&c.sentence), &AlignConfig::default());
        match (&c.expected_mask, c.expected_error.as_deref(), got) {
            (Some(want), None, Ok(mask)) => {
                ensure(mask.bits() == want.as_slice(), || {
                    format!("fixture case {}: got {:?}, expected {want:?}", c.case, mask.bits())
                })?;
            }
            (None, Some("unalignable"), Err(Error::UnalignableProposition(_))) => {}
            (None, Some("empty"), Err(Error::EmptyProposition)) => {}
            (_, _, other) => return Err(format!("fixture case {}: got {other:?}", c.case)),
        }
    }
    Ok("1000 random matrices match exhaustive search; 20/20 fixture masks".into())
}

struct PipelineRun {
    summary: Value,
    work: PathBuf,
    elapsed: Duration,
}

fn run_pipeline(cfg: &RunConfig, work: &Path) -> PipelineRun {
    let start = Instant::now();
    let summary = pipeline(cfg, Some(&data_dir().join("synthetic_raw.jsonl")), work).unwrap();
    PipelineRun { summary, work: work.to_path_buf(), elapsed: start.elapsed() }
}

fn committed_config() -> RunConfig {
    let text = std::fs::read_to_string(data_dir().join("config.toml")).unwrap();
    let cfg = RunConfig::from_toml(&text).unwrap().resolved();
    assert_eq!(cfg, RunConfig::default().resolved(), "committed config must be the defaults");
    cfg
}

fn f(v: &Value, path: &[&str]) -> f64 {
    path.iter().fold(v, |v, k| &v[*k]).as_f64().unwrap_or(f64::NAN)
}

fn c7_learning(run: &PipelineRun) -> Outcome {
    let s = &run.summary;
    let ratio = f(s, &["stages", "train", "loss_ratio"]);
    let p1 = f(s, &["metrics", "p_at_1"]);
    let chance = f(s, &["chance_p_at_1"]);
    ensure(ratio < 0.1, || format!("final/initial train loss {ratio}"))?;
    ensure(p1 > 10.0 * chance, || format!("P@1 {p1} vs chance {chance}"))?;
    ensure(run.elapsed < Duration::from_secs(300), || format!("took {:?}", run.elapsed))?;
    Ok(format!(
        "loss ratio {ratio:.2e}, P@1 {p1:.3} vs chance {chance:.4} ({:.0}x), {:.1?}",
        p1 / chance,
        run.elapsed
    ))
}

fn c8_bottleneck(full: &PipelineRun, small: &PipelineRun) -> Outcome {
    let p64 = f(&full.summary, &["metrics", "p_at_1"]);
    let p16 = f(&small.summary, &["metrics", "p_at_1"]);
    ensure(p64 - p16 <= 0.10, || format!("P@1 {p64:.3} -> {p16:.3}"))?;
    let i64 = PropIndex::load(full.work.join(layout::INDEX)).unwrap();
    let i16 = PropIndex::load(small.work.join(layout::INDEX)).unwrap();
    ensure(i64.len() == i16.len() && i64.dim() == 64 && i16.dim() == 16, || "index shapes differ".into())?;
    let (b64, b16) = (i64.vector_payload_bytes(), i16.vector_payload_bytes());
    ensure(b64 == 4 * b16, || format!("payload {b64} vs {b16}"))?;
    let r12 = compression_ratio(768, 64).unwrap();
    let r16 = compression_ratio(1024, 64).unwrap();
    ensure(r12 == 12.0 && r16 == 16.0, || format!("ratios {r12}, {r16}"))?;
    Ok(format!("P@1 {p64:.3} -> {p16:.3}; payload {b64} -> {b16} bytes (4x); ratios 12, 16"))
}

/// `count` entries grouped into documents of 1..=4 sentences with 1..=6
/// propositions each.
fn synthetic_index(count: usize, dim: usize, seed: u64) -> PropIndex {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let vectors = random_unit_vectors(count, dim, seed);
    let mut idx = PropIndex::new(dim, serde_json::json!({ "corpus": "synthetic", "seed": seed })).unwrap();
    let mut vecs = vectors.into_iter();
    let mut doc = 0u64;
    'outer: loop {
        for s in 0..rng.random_range(1..=4u64) {
            for p in 0..rng.random_range(1..=6u64) {
                let Some(v) = vecs.next() else { break 'outer };
                let len = rng.random_range(1..=40);
                let mask = random_mask(&mut rng, len);
                idx.add(PropEntry::new(PropKey::new(doc, s, p), mask, v).unwrap()).unwrap();
            }
        }
        doc += 1;
    }
    idx
}

fn group_max_oracle(idx: &PropIndex, query: &[f32], level: Level, k: usize) -> Vec<GroupHit> {
    let mut best: BTreeMap<_, f64> = BTreeMap::new();
    for e in idx.entries() {
        let s: f64 = e.vector.iter().zip(query).map(|(&a, &b)| f64::from(a) * f64::from(b)).sum();
        let g = e.key.group(level);
        let slot = best.entry(g).or_insert(f64::NEG_INFINITY);
        if s > *slot {
            *slot = s;
        }
    }
    let mut all: Vec<GroupHit> = best.into_iter().map(|(key, score)| GroupHit { key, score }).collect();
    all.sort_by(|a, b| b.score.total_cmp(&a.score).then_with(|| a.key.cmp(&b.key)));
    all.truncate(k);
    all
}

fn c9_granularity() -> Outcome {
    let idx = synthetic_index(10_000, 32, 909);
    let queries = random_unit_vectors(50, 32, 910);
    for (qi, q) in queries.iter().enumerate() {
        for level in [Level::Sentence, Level::Document] {
            for k in [1, 10, 50] {
                let want = group_max_oracle(&idx, q, level, k);
                let full = propagate_scores(&idx.search_topk(q, idx.len()).unwrap(), level, k);
                let fast = idx.search_level(q, level, k, DEFAULT_OVER_RETRIEVAL).unwrap();
                ensure(full == want && fast == want, || {
                    format!("query {qi}, {level:?}, k={k}: rankings differ from oracle")
                })?;
            }
        }
    }
    Ok(format!("50 queries x 2 levels x k in {{1,10,50}} over {} entries", idx.len()))
}

fn c10_metrics() -> Outcome {
    let s = |xs: &[&str]| xs.iter().map(|x| x.to_string()).collect::<Vec<_>>();
    let rankings: Rankings<String> = BTreeMap::from([
        ("q1".into(), s(&["a", "b", "c", "d", "e", "f"])),
        ("q2".into(), s(&["x", "y", "a", "b", "c", "d", "e", "f", "g", "h", "i", "j"])),
        ("q3".into(), s(&["m", "n", "o"])),
    ]);
    let set = |xs: &[&str]| xs.iter().map(|x| x.to_string()).collect::<BTreeSet<_>>();
    let truth: GroundTruth<String> = BTreeMap::from([
        ("q1".into(), set(&["a", "z"])),
        ("q2".into(), set(&["b", "h", "w"])),
        ("q3".into(), set(&["o"])),
    ]);
    let close = |a: f64, b: f64| (a - b).abs() <= 1e-12;
    let p1 = precision_at_1(&rankings, &truth).unwrap();
    ensure(close(p1, 0.3333333333333333), || format!("P@1 {p1}"))?;
    let want_r = [(1, 0.16666666666666666), (2, 0.16666666666666666), (5, 0.611111111111111), (10, 0.7222222222222222), (20, 0.7222222222222222)];
    for (k, want) in want_r {
        let got = recall_at_k(&rankings, &truth, k).unwrap();
        ensure(close(got, want), || format!("R@{k} {got} vs {want}"))?;
    }
    let rho_cases: [(&[f64], &[f64], f64); 4] = [
        (&[1.0, 2.0, 2.0, 4.0], &[1.0, 3.0, 2.0, 4.0], 0.9486832980505139),
        (&[0.3, 0.1, 0.1, 0.7, 0.7, 0.2], &[2.0, 1.0, 1.0, 3.0, 4.0, 2.0], 0.9696969696969695),
        (&[5.0, 4.0, 3.0, 2.0, 1.0], &[1.0, 2.0, 3.0, 4.0, 5.0], -0.9999999999999999),
        (&[1.0, 1.0, 2.0, 3.0, 3.0, 3.0, 4.0], &[2.0, 1.0, 4.0, 3.0, 3.0, 5.0, 9.0], 0.811899030453063),
    ];
    for (a, b, want) in rho_cases {
        let got = spearman(a, b).unwrap();
        ensure(close(got, want), || format!("spearman {a:?} {b:?}: {got} vs {want}"))?;
    }

    let mut rng = ChaCha8Rng::seed_from_u64(1010);
    for set_no in 0..100 {
        let n_items = rng.random_range(5..60);
        let mut rankings: Rankings<usize> = BTreeMap::new();
        let mut truth: GroundTruth<usize> = BTreeMap::new();
        for q in 0..rng.random_range(1..20) {
            let mut items: Vec<usize> = (0..n_items).collect();
            items.shuffle(&mut rng);
            items.truncate(rng.random_range(1..=n_items));
            let rel: BTreeSet<usize> = (0..rng.random_range(1..=5)).map(|_| rng.random_range(0..n_items)).collect();
            rankings.insert(format!("q{q}"), items);
            truth.insert(format!("q{q}"), rel);
        }
        let mut prev = 0.0;
        for k in 1..=n_items + 2 {
            let r = recall_at_k(&rankings, &truth, k).unwrap();
            ensure(r >= prev && (0.0..=1.0).contains(&r), || format!("set {set_no}: R@{k}={r} after {prev}"))?;
            prev = r;
        }
    }
    Ok("P@1, R@{1,2,5,10,20} and 4 tied Spearman fixtures to 1e-12; 100 monotone recall curves".into())
}

fn c11_persistence() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let idx = synthetic_index(10_000, 32, 1111);
    let path = dir.path().join("big.pidx");
    idx.save(&path).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    let meta_len = serde_json::to_vec(idx.metadata()).unwrap().len() as u64;
    let formula: u64 = HEADER_BYTES
        + meta_len
        + idx
            .entries()
            .iter()
            .map(|e| ENTRY_FIXED_BYTES + (e.mask.len() as u64).div_ceil(8) + 4 * idx.dim() as u64)
            .sum::<u64>();
    ensure(bytes.len() as u64 == formula, || format!("file {} bytes, formula {formula}", bytes.len()))?;
    ensure(idx.expected_file_size().unwrap() == formula, || "expected_file_size disagrees".into())?;
    let back = PropIndex::load(&path).unwrap();
    ensure(back == idx, || "index changed on reload".into())?;
    let mut again = Vec::new();
    back.write_to(&mut again).unwrap();
    ensure(again == bytes, || "index bytes changed on rewrite".into())?;

    let vocab = Vocab::from_tokens((0..40).map(|i| format!("w{i}")));
    let cfg = EncoderConfig { vocab_size: vocab.len(), d_model: 16, n_layers: 2, d_out: 8, ..EncoderConfig::default() };
    let ck = Checkpoint { model: Model { params: EncoderParams::init(cfg, 5).unwrap(), vocab }, epoch: 3, val_loss: 1.25 };
    let cpath = dir.path().join("m.ckpt");
    ck.save(&cpath, &serde_json::json!({ "note": "roundtrip" })).unwrap();
    let cbytes = std::fs::read(&cpath).unwrap();
    let (loaded, meta) = Checkpoint::load(&cpath).unwrap();
    ensure(loaded == ck && meta["note"] == "roundtrip", || "checkpoint changed on reload".into())?;
    let cpath2 = dir.path().join("m2.ckpt");
    loaded.save(&cpath2, &serde_json::json!({ "note": "roundtrip" })).unwrap();
    ensure(std::fs::read(&cpath2).unwrap() == cbytes, || "checkpoint bytes changed on rewrite".into())?;
    Ok(format!("10k-entry index {} bytes = formula; index and checkpoint bit-exact", bytes.len()))
}

fn c12_determinism(first: &PipelineRun, cfg: &RunConfig, work: &Path) -> Outcome {
    let second = run_pipeline(cfg, work);
    let a = std::fs::read(first.work.join(layout::METRICS)).map_err(|e| e.to_string())?;
    let b = std::fs::read(second.work.join(layout::METRICS)).map_err(|e| e.to_string())?;
    ensure(a == b, || "metrics.json differs between runs".into())?;
    Ok(format!("two pipeline runs, identical metrics.json ({} bytes)", a.len()))
}

fn main() {
    let tmp = tempfile::tempdir().expect("temp dir");
    let cfg = committed_config();
    let small_cfg = RunConfig { encoder: EncoderConfig { d_out: 16, ..cfg.encoder }, ..cfg.clone() };

    let mut full: Option<PipelineRun> = None;
    let mut small: Option<PipelineRun> = None;
    let mut results: Vec<(u32, &str, Outcome)> = Vec::new();
    let mut check = |id: u32, name: &'static str, body: &mut dyn FnMut() -> Outcome| {
        let outcome = catch_unwind(AssertUnwindSafe(body)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let (tag, detail) = match &outcome {
            Ok(d) => ("PASS", d.as_str()),
            Err(d) => ("FAIL", d.as_str()),
        };
        println!("criterion {id:>2} {tag} {name}: {detail}");
        results.push((id, name, outcome));
    };

    check(1, "loss gradient vs finite differences", &mut c1_gradient_check);
    check(2, "singleton positives reduce to softmax CE", &mut c2_softmax_reduction);
    check(3, "hand-derived N=3 loss value", &mut c3_hand_value);
    check(4, "order invariance, independence, single pass", &mut c4_architecture);
    check(5, "simulated gather equals single worker", &mut c5_gather);
    check(6, "Hungarian exactness and alignment fixture", &mut c6_alignment);
    check(7, "end-to-end learning signal", &mut || {
        full = Some(run_pipeline(&cfg, &tmp.path().join("d64")));
        c7_learning(full.as_ref().unwrap())
    });
    check(8, "bottleneck trend", &mut || {
        small = Some(run_pipeline(&small_cfg, &tmp.path().join("d16")));
        let full = full.as_ref().ok_or("criterion 7 run missing")?;
        c8_bottleneck(full, small.as_ref().unwrap())
    });
    check(9, "sentence/document propagation vs oracle", &mut c9_granularity);
    check(10, "metrics vs reference values", &mut c10_metrics);
    check(11, "bit-exact persistence and size formula", &mut c11_persistence);
    check(12, "pipeline determinism", &mut || {
        let first = full.as_ref().ok_or("criterion 7 run missing")?;
        c12_determinism(first, &cfg, &tmp.path().join("d64_again"))
    });

    let failed: Vec<u32> = results.iter().filter(|r| r.2.is_err()).map(|r| r.0).collect();
    println!(
        "acceptance: {}/{} criteria passed{}",
        results.len() - failed.len(),
        results.len(),
        if failed.is_empty() { String::new() } else { format!("; failed {failed:?}") }
    );
    if !failed.is_empty() {
        std::process::exit(1);
    }
}
