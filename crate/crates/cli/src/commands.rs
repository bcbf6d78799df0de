//! Subcommand bodies. Each stage reads and writes plain files so stages can
//! be run one at a time or chained by [`pipeline`].

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use propenc::corpus::{
    align_record, label_record, labeled_pairs, read_jsonl, split_records, write_jsonl, PairRecord,
};
use propenc::eval::{
    conditional_similarity, fuzzy_query_map, remap_truth, retrieval_metrics, spearman,
    ConditionalInstance, GroundTruth,
};
use propenc::index::{Level, PropIndex, PropKey};
use propenc::pairing::{EntailmentOracle, LexicalOracle, Side, SubprocessOracle};
use propenc::retrieval::{
    build_index, chance_precision_at_1, encode_side, prop_rankings, query_id, truth_from_records, EmbeddingRecord,
    QueryResult,
};
use propenc::trainer::{train_with_progress, Checkpoint};
use propenc::{tokenize, BinaryMask, Error};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::config::{OracleKind, RunConfig};
use crate::{
    CliError, CliResult, Command, ConfigArg, EvalArgs, OracleArg, PairArgs, SearchArgs, SideArg,
};

pub const TRAIN_LOG: &str = "train_log.jsonl";
pub const CHECKPOINT: &str = "model.ckpt";
pub const LAST_GOOD: &str = "last_good.ckpt";
pub const TRAIN_SUMMARY: &str = "train_summary.json";

/// One line of a truth file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthRow {
    pub query: String,
    pub relevant: Vec<PropKey>,
}

/// One line of a conditional-similarity file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CstsRow {
    pub sentence_1: String,
    pub sentence_2: String,
    pub mask_1: BinaryMask,
    pub mask_2: BinaryMask,
    pub human_score: f64,
}

pub fn dispatch(command: Command) -> CliResult<Value> {
    match command {
        Command::Config { out, config } => {
            let cfg = load_config(&config)?;
            let text = cfg.to_toml();
            if let Some(path) = out {
                ensure_parent(&path)?;
                fs::write(&path, &text)?;
            }
            Ok(json!({ "config": text, "run_config_hash": cfg.hash() }))
        }
        Command::Synth { out, pairs, config } => {
            let mut cfg = load_config(&config)?;
            if let Some(n) = pairs {
                cfg.synth.pairs = n;
            }
            synth(&cfg, &out)
        }
        Command::Align { input, out, config } => align(&load_config(&config)?, &input, &out),
        Command::Pair(args) => pair_cmd(args),
        Command::Split { input, out_dir, config } => split(&load_config(&config)?, &input, &out_dir),
        Command::Train { data, val, out_dir, config } => {
            train(&load_config(&config)?, &data, &val, &out_dir)
        }
        Command::Encode { checkpoint, input, side, out, config } => {
            encode(&load_config(&config)?, &checkpoint, &input, side, &out)
        }
        Command::Index { embeddings, out, config } => {
            index(&load_config(&config)?, &embeddings, &out)
        }
        Command::Search(args) => search_cmd(args),
        Command::Truth { input, out, config } => truth(&load_config(&config)?, &input, &out),
        Command::Eval(args) => eval_cmd(args),
        Command::Pipeline { input, work_dir, config } => {
            pipeline(&load_config(&config)?, input.as_deref(), &work_dir)
        }
    }
}

fn load_config(arg: &ConfigArg) -> CliResult<RunConfig> {
    RunConfig::load(arg.config.as_deref())
}

pub fn meta_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".meta.json");
    PathBuf::from(s)
}

pub fn sha256_file(path: &Path) -> CliResult<String> {
    Ok(hex::encode(Sha256::digest(fs::read(path)?)))
}

fn ensure_parent(path: &Path) -> CliResult<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    Ok(())
}

fn write_json(path: &Path, value: &Value) -> CliResult<()> {
    ensure_parent(path)?;
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

/// Writes `rows` as JSONL plus a `<path>.meta.json` sidecar describing the run.
fn write_artifact<T: Serialize>(
    path: &Path,
    rows: &[T],
    cfg: &RunConfig,
    command: &str,
    extra: Value,
) -> CliResult<()> {
    ensure_parent(path)?;
    write_jsonl(path, rows)?;
    let mut meta = json!({
        "command": command,
        "rows": rows.len(),
        "run_config_hash": cfg.hash(),
        "run_config": cfg.to_json(),
    });
    if let (Some(obj), Value::Object(more)) = (meta.as_object_mut(), extra) {
        obj.extend(more);
    }
    write_json(&meta_path(path), &meta)
}

fn read_meta(path: &Path) -> Option<Value> {
    let text = fs::read_to_string(meta_path(path)).ok()?;
    serde_json::from_str(&text).ok()
}

pub fn synth(cfg: &RunConfig, out: &Path) -> CliResult<Value> {
    let records = propenc::synth::generate(&cfg.synth)?;
    write_artifact(out, &records, cfg, "synth", json!({}))?;
    Ok(json!({ "records": records.len() }))
}

pub fn align(cfg: &RunConfig, input: &Path, out: &Path) -> CliResult<Value> {
    let records: Vec<PairRecord> = read_jsonl(input)?;
    let mut aligned = Vec::with_capacity(records.len());
    let mut dropped = 0usize;
    let mut props = 0usize;
    for r in &records {
        let (rec, lost) = align_record(r, &cfg.align)?;
        for d in &lost {
            eprintln!("{}", json!({ "warning": "dropped_proposition", "detail": d }));
        }
        dropped += lost.len();
        props += rec.props_a.len() + rec.props_b.len();
        aligned.push(rec);
    }
    write_artifact(out, &aligned, cfg, "align", json!({ "dropped_propositions": dropped }))?;
    Ok(json!({ "records": aligned.len(), "propositions": props, "dropped_propositions": dropped }))
}

fn pair_cmd(args: PairArgs) -> CliResult<Value> {
    let mut cfg = load_config(&args.config)?;
    match args.oracle {
        Some(OracleArg::Lexical) => cfg.oracle.kind = OracleKind::Lexical,
        Some(OracleArg::Command) => cfg.oracle.kind = OracleKind::Command,
        None => {}
    }
    if let Some(cmd) = &args.oracle_cmd {
        cfg.oracle.command = cmd.split_whitespace().map(str::to_string).collect();
        if args.oracle.is_none() {
            cfg.oracle.kind = OracleKind::Command;
        }
    }
    if let Some(t) = args.threshold {
        cfg.oracle.threshold = t;
    }
    pair(&cfg, &args.input, &args.out, args.require_positive)
}

fn make_oracle(cfg: &RunConfig) -> CliResult<Box<dyn EntailmentOracle>> {
    match cfg.oracle.kind {
        OracleKind::Lexical => {
            if !(0.0..=1.0).contains(&cfg.oracle.threshold) {
                return Err(CliError::Usage(format!(
                    "oracle threshold {} outside [0, 1]",
                    cfg.oracle.threshold
                )));
            }
            Ok(Box::new(LexicalOracle { threshold: cfg.oracle.threshold }))
        }
        OracleKind::Command => {
            let (program, rest) = cfg
                .oracle
                .command
                .split_first()
                .ok_or_else(|| CliError::Usage("command oracle needs --oracle-cmd".into()))?;
            Ok(Box::new(SubprocessOracle::spawn(program, rest)?))
        }
    }
}

pub fn pair(cfg: &RunConfig, input: &Path, out: &Path, require_positive: bool) -> CliResult<Value> {
    let records: Vec<PairRecord> = read_jsonl(input)?;
    let oracle = make_oracle(cfg)?;
    let mut labeled = Vec::with_capacity(records.len());
    let mut positives = 0usize;
    let mut without = 0usize;
    for r in &records {
        let rec = label_record(r, oracle.as_ref())?;
        let n = rec.positives.as_ref().map_or(0, Vec::len);
        if n == 0 {
            without += 1;
            if require_positive {
                continue;
            }
        }
        positives += n;
        labeled.push(rec);
    }
    write_artifact(
        out,
        &labeled,
        cfg,
        "pair",
        json!({ "records_without_positives": without, "require_positive": require_positive }),
    )?;
    Ok(json!({
        "records": labeled.len(),
        "positive_pairs": positives,
        "records_without_positives": without,
    }))
}

pub fn split(cfg: &RunConfig, input: &Path, out_dir: &Path) -> CliResult<Value> {
    let records: Vec<PairRecord> = read_jsonl(input)?;
    let (train, val, test) =
        split_records(&records, cfg.split.val_fraction, cfg.split.test_fraction, cfg.seed)?;
    for (name, rows) in [("train", &train), ("val", &val), ("test", &test)] {
        write_artifact(&out_dir.join(format!("{name}.jsonl")), rows, cfg, "split", json!({ "split": name }))?;
    }
    Ok(json!({ "train": train.len(), "val": val.len(), "test": test.len() }))
}

pub fn train(cfg: &RunConfig, data: &Path, val: &Path, out_dir: &Path) -> CliResult<Value> {
    let train_pairs = labeled_pairs(&read_jsonl::<PairRecord>(data)?)?;
    let val_pairs = labeled_pairs(&read_jsonl::<PairRecord>(val)?)?;
    fs::create_dir_all(out_dir)?;
    let extra = json!({ "run_config": cfg.to_json(), "run_config_hash": cfg.hash() });
    let outcome = match train_with_progress(&train_pairs, &val_pairs, cfg.encoder, &cfg.train, |log| {
        eprintln!("{}", json!({ "progress": "epoch", "log": log }));
    }) {
        Ok(o) => o,
        Err(Error::Diverged { epoch, message, last_good }) => {
            if let Some(ck) = &last_good {
                ck.save(out_dir.join(LAST_GOOD), &extra)?;
            }
            return Err(Error::Diverged { epoch, message, last_good }.into());
        }
        Err(e) => return Err(e.into()),
    };
    let ckpt = out_dir.join(CHECKPOINT);
    outcome.best.save(&ckpt, &extra)?;
    write_artifact(&out_dir.join(TRAIN_LOG), &outcome.history, cfg, "train", json!({}))?;
    let summary = json!({
        "best_epoch": outcome.best.epoch,
        "best_val_loss": outcome.best.val_loss,
        "initial_train_loss": outcome.initial_train_loss,
        "final_train_loss": outcome.final_train_loss,
        "loss_ratio": outcome.final_train_loss / outcome.initial_train_loss,
        "epochs": outcome.history.len(),
        "checkpoint_sha256": sha256_file(&ckpt)?,
        "run_config_hash": cfg.hash(),
    });
    write_json(&out_dir.join(TRAIN_SUMMARY), &summary)?;
    Ok(summary)
}

pub fn encode(cfg: &RunConfig, checkpoint: &Path, input: &Path, side: SideArg, out: &Path) -> CliResult<Value> {
    let (ck, _) = Checkpoint::load(checkpoint)?;
    let records: Vec<PairRecord> = read_jsonl(input)?;
    let sides: &[Side] = match side {
        SideArg::A => &[Side::A],
        SideArg::B => &[Side::B],
        SideArg::Both => &[Side::A, Side::B],
    };
    let mut rows = Vec::new();
    for &s in sides {
        rows.extend(encode_side(&ck.model, &records, s)?);
    }
    let corpus = input.file_name().map(|n| n.to_string_lossy().into_owned());
    write_artifact(
        out,
        &rows,
        cfg,
        "encode",
        json!({ "checkpoint_sha256": sha256_file(checkpoint)?, "corpus": corpus }),
    )?;
    Ok(json!({ "embeddings": rows.len(), "dim": ck.model.params.config.d_out }))
}

pub fn index(cfg: &RunConfig, embeddings: &Path, out: &Path) -> CliResult<Value> {
    let rows: Vec<EmbeddingRecord> = read_jsonl(embeddings)?;
    let sidecar = read_meta(embeddings).unwrap_or(Value::Null);
    let metadata = json!({
        "corpus": sidecar.get("corpus").cloned().unwrap_or(Value::Null),
        "checkpoint_sha256": sidecar.get("checkpoint_sha256").cloned().unwrap_or(Value::Null),
        "run_config_hash": cfg.hash(),
    });
    let idx = build_index(&rows, metadata)?;
    ensure_parent(out)?;
    idx.save(out)?;
    Ok(json!({
        "entries": idx.len(),
        "dim": idx.dim(),
        "bytes": fs::metadata(out)?.len(),
    }))
}

/// Parses `0110`, `0,1,1,0` or `0 1 1 0`.
pub fn parse_mask(text: &str) -> CliResult<BinaryMask> {
    let bits: Vec<u8> = text
        .chars()
        .filter(|c| !c.is_whitespace() && *c != ',')
        .map(|c| match c {
            '0' => Ok(0),
            '1' => Ok(1),
            other => Err(CliError::Usage(format!("mask character {other:?} is not 0 or 1"))),
        })
        .collect::<CliResult<_>>()?;
    Ok(BinaryMask::new(bits)?)
}

fn search_cmd(args: SearchArgs) -> CliResult<Value> {
    let cfg = load_config(&args.config)?;
    if args.queries.is_none() && args.sentence.is_none() {
        return Err(CliError::Usage(
            "give either --queries or --checkpoint with --sentence and --mask".into(),
        ));
    }
    let idx = PropIndex::load(&args.index)?;
    let queries = match (&args.queries, &args.checkpoint, &args.sentence, &args.mask) {
        (Some(q), None, None, None) => read_jsonl::<EmbeddingRecord>(q)?
            .into_iter()
            .map(|e| (query_id(&e.key()), e.vector))
            .collect(),
        (None, Some(ck), Some(sentence), Some(mask)) => {
            let (ck, _) = Checkpoint::load(ck)?;
            let toks = tokenize(sentence);
            let mask = parse_mask(mask)?;
            let emb = ck.model.embed(&toks, std::slice::from_ref(&mask))?;
            vec![("adhoc".to_string(), emb[0].to_f32())]
        }
        _ => {
            return Err(CliError::Usage(
                "give either --queries or --checkpoint with --sentence and --mask".into(),
            ))
        }
    };
    search(&cfg, &idx, &queries, args.level.into(), args.k, &args.out)
}

pub fn search(
    cfg: &RunConfig,
    idx: &PropIndex,
    queries: &[(String, Vec<f32>)],
    level: Level,
    k: Option<usize>,
    out: &Path,
) -> CliResult<Value> {
    let k = k.unwrap_or(cfg.search.k);
    let rows = queries
        .iter()
        .map(|(id, v)| {
            Ok(QueryResult {
                query: id.clone(),
                level,
                results: idx.search_level(v, level, k, cfg.search.over_retrieval)?,
            })
        })
        .collect::<propenc::Result<Vec<_>>>()?;
    write_artifact(out, &rows, cfg, "search", json!({ "k": k, "index_metadata": idx.metadata() }))?;
    Ok(json!({ "queries": rows.len(), "k": k, "level": level }))
}

pub fn truth(cfg: &RunConfig, input: &Path, out: &Path) -> CliResult<Value> {
    let records: Vec<PairRecord> = read_jsonl(input)?;
    let rows: Vec<TruthRow> = truth_from_records(&records)?
        .into_iter()
        .map(|(query, rel)| TruthRow { query, relevant: rel.into_iter().collect() })
        .collect();
    write_artifact(out, &rows, cfg, "truth", json!({}))?;
    Ok(json!({ "queries": rows.len() }))
}

fn eval_cmd(args: EvalArgs) -> CliResult<Value> {
    let cfg = load_config(&args.config)?;
    let fuzzy = match (&args.generated_queries, &args.gold_queries) {
        (Some(g), Some(gold)) => Some((g.as_path(), gold.as_path(), args.theta)),
        (None, None) => None,
        _ => return Err(CliError::Usage("fuzzy matching needs both query files".into())),
    };
    let csts = match (&args.csts, &args.checkpoint) {
        (Some(c), Some(k)) => Some((c.as_path(), k.as_path())),
        (None, _) => None,
        _ => return Err(CliError::Usage("--csts needs --checkpoint".into())),
    };
    eval(&cfg, &args.results, &args.truth, csts, fuzzy, &args.out)
}

type QueryMask = (String, (u64, u64), BinaryMask);

fn query_masks(path: &Path) -> CliResult<Vec<QueryMask>> {
    Ok(read_jsonl::<EmbeddingRecord>(path)?
        .into_iter()
        .map(|e| (query_id(&e.key()), (e.doc_id, e.sentence_id), e.mask))
        .collect())
}

pub fn eval(
    cfg: &RunConfig,
    results: &Path,
    truth_path: &Path,
    csts: Option<(&Path, &Path)>,
    fuzzy: Option<(&Path, &Path, f64)>,
    out: &Path,
) -> CliResult<Value> {
    let results: Vec<QueryResult> = read_jsonl(results)?;
    let mut truth: GroundTruth<PropKey> = read_jsonl::<TruthRow>(truth_path)?
        .into_iter()
        .map(|r| (r.query, r.relevant.into_iter().collect::<BTreeSet<_>>()))
        .collect();
    let mut matched = None;
    if let Some((generated, gold, theta)) = fuzzy {
        let map = fuzzy_query_map(&query_masks(generated)?, &query_masks(gold)?, theta)?;
        truth = remap_truth(&truth, &map);
        matched = Some(map.len());
    }
    let rankings = prop_rankings(&results)?;
    let mut metrics = retrieval_metrics(&rankings, &truth)?;
    if let Some((csts_path, ckpt)) = csts {
        let (ck, _) = Checkpoint::load(ckpt)?;
        let rows: Vec<CstsRow> = read_jsonl(csts_path)?;
        let mut pred = Vec::with_capacity(rows.len());
        let mut human = Vec::with_capacity(rows.len());
        for r in rows {
            let inst = ConditionalInstance {
                sentence_1: tokenize(&r.sentence_1),
                sentence_2: tokenize(&r.sentence_2),
                mask_1: r.mask_1,
                mask_2: r.mask_2,
                human_score: r.human_score,
            };
            pred.push(conditional_similarity(&ck.model, &inst)?);
            human.push(inst.human_score);
        }
        metrics.spearman = Some(spearman(&pred, &human)?);
    }
    metrics.run_config_hash = Some(cfg.hash());
    let mut value = serde_json::to_value(&metrics)?;
    if let (Some(obj), Some(n)) = (value.as_object_mut(), matched) {
        obj.insert("fuzzy_matched_queries".into(), json!(n));
    }
    write_json(out, &value)?;
    Ok(value)
}

/// File names inside a pipeline work directory.
pub mod layout {
    pub const RAW: &str = "raw.jsonl";
    pub const ALIGNED: &str = "aligned.jsonl";
    pub const PAIRED: &str = "paired.jsonl";
    pub const SPLITS: &str = "splits";
    pub const MODEL_DIR: &str = "model";
    pub const QUERIES: &str = "test_queries.jsonl";
    pub const CORPUS: &str = "test_corpus.jsonl";
    pub const INDEX: &str = "test.pidx";
    pub const TRUTH: &str = "truth.jsonl";
    pub const RESULTS: &str = "results.jsonl";
    pub const METRICS: &str = "metrics.json";
}

/// All stages in order; the test split's side B is indexed and its side A
/// propositions are the queries.
pub fn pipeline(cfg: &RunConfig, input: Option<&Path>, work: &Path) -> CliResult<Value> {
    use layout::*;
    fs::create_dir_all(work)?;
    let raw = match input {
        Some(p) => p.to_path_buf(),
        None => {
            let p = work.join(RAW);
            synth(cfg, &p)?;
            p
        }
    };
    let mut stages = BTreeMap::new();
    stages.insert("align", align(cfg, &raw, &work.join(ALIGNED))?);
    stages.insert("pair", pair(cfg, &work.join(ALIGNED), &work.join(PAIRED), true)?);
    let splits = work.join(SPLITS);
    stages.insert("split", split(cfg, &work.join(PAIRED), &splits)?);
    let model_dir = work.join(MODEL_DIR);
    stages.insert(
        "train",
        train(cfg, &splits.join("train.jsonl"), &splits.join("val.jsonl"), &model_dir)?,
    );
    let ckpt = model_dir.join(CHECKPOINT);
    let test = splits.join("test.jsonl");
    encode(cfg, &ckpt, &test, SideArg::A, &work.join(QUERIES))?;
    encode(cfg, &ckpt, &test, SideArg::B, &work.join(CORPUS))?;
    stages.insert("index", index(cfg, &work.join(CORPUS), &work.join(INDEX))?);
    stages.insert("truth", truth(cfg, &test, &work.join(TRUTH))?);
    let idx = PropIndex::load(work.join(INDEX))?;
    let queries: Vec<(String, Vec<f32>)> = read_jsonl::<EmbeddingRecord>(work.join(QUERIES))?
        .into_iter()
        .map(|e| (query_id(&e.key()), e.vector))
        .collect();
    search(cfg, &idx, &queries, Level::Proposition, None, &work.join(RESULTS))?;
    let metrics = eval(cfg, &work.join(RESULTS), &work.join(TRUTH), None, None, &work.join(METRICS))?;
    let truth_map = truth_from_records(&read_jsonl::<PairRecord>(&test)?)?;
    Ok(json!({
        "stages": stages,
        "metrics": metrics,
        "chance_p_at_1": chance_precision_at_1(&truth_map, idx.len()),
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mask_parsing_accepts_common_forms() {
        assert_eq!(parse_mask("0110").unwrap().bits(), &[0, 1, 1, 0]);
        assert_eq!(parse_mask("0, 1,1 ,0").unwrap().bits(), &[0, 1, 1, 0]);
        assert!(matches!(parse_mask("012"), Err(CliError::Usage(_))));
    }

    #[test]
    fn sidecar_path_appends_suffix() {
        assert_eq!(meta_path(Path::new("out/x.jsonl")), PathBuf::from("out/x.jsonl.meta.json"));
    }
}
