//! End-to-end stages behind the CLI: data preparation, training, norm
//! fine-tuning, generation, and evaluation. Every stage writes its artifacts
//! under the run's output directory and records them in `manifest.json`
//! together with the config digest. Stages are deterministic: rerunning one
//! with the same config reproduces its artifacts byte for byte.

use crate::classifier::ClassifierModel;
use crate::config::RunConfig;
use crate::corpus::{
    build_vocab, generate_synthetic, load_corpus, save_corpus_jsonl, split, tokenize,
    LabeledSentence, TokenSequence, Vocabulary, EOS,
};
use crate::error::{Error, Result};
use crate::evalharness::{
    assert_disjoint_prompts, build_report, measure_flagged_ratio, quadrant_agreement, EvalReport,
    ReportInputs, SentenceRecord,
};
use crate::lm::LmModel;
use crate::normtune::{run_finetune, IterationStats};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

// Stage seeds are derived from the run seed by fixed offsets so stages
// draw independent streams but stay reproducible in isolation.
const SEED_GEN_NORM: u64 = 1;
const SEED_GEN_ALT: u64 = 2;
const SEED_LM_INIT: u64 = 10;
const SEED_LM_TRAIN: u64 = 11;
const SEED_CLS_INIT: u64 = 20;
const SEED_CLS_TRAIN: u64 = 21;
const SEED_FINETUNE: u64 = 40;
const SEED_EVAL: u64 = 50;

pub const LM_BASE: &str = "lm-base";

/// Which classification dimension a command targets.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dimension {
    Norm,
    Alt,
}

impl Dimension {
    pub fn tag(self) -> &'static str {
        match self {
            Dimension::Norm => "norm",
            Dimension::Alt => "alt",
        }
    }

    pub fn classifier_name(self) -> String {
        format!("classifier-{}", self.tag())
    }

    /// Fine-tuned checkpoints take the base model's name plus `-norm`; the
    /// secondary dimension gets an extra tag so both can coexist.
    pub fn finetuned_name(self) -> String {
        match self {
            Dimension::Norm => format!("{LM_BASE}-norm"),
            Dimension::Alt => format!("{LM_BASE}-norm-alt"),
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "norm" => Ok(Dimension::Norm),
            "alt" => Ok(Dimension::Alt),
            other => Err(Error::InvalidInput(format!(
                "unknown classifier dimension '{other}' (expected norm or alt)"
            ))),
        }
    }
}

/// Guard that holds the output-directory lock for one command.
pub struct DirLock {
    path: PathBuf,
}

impl DirLock {
    pub fn acquire(out_dir: &Path) -> Result<Self> {
        fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir.display().to_string(), e))?;
        let path = out_dir.join(".lock");
        match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(DirLock { path }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                Err(Error::InvalidInput(format!(
                    "output directory is locked by another run (remove {} if stale)",
                    path.display()
                )))
            }
            Err(e) => Err(Error::io(path.display().to_string(), e)),
        }
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let d = Sha256::digest(&bytes);
    Ok(d.iter().map(|b| format!("{b:02x}")).collect())
}

#[derive(serde::Serialize, serde::Deserialize, Default)]
struct ArtifactIndex {
    config_sha256: String,
    artifacts: BTreeMap<String, String>,
}

/// Record `files` (paths under `out_dir`) in the run's manifest.json.
fn record_artifacts(out_dir: &Path, config_sha256: &str, files: &[PathBuf]) -> Result<()> {
    let manifest_path = out_dir.join("manifest.json");
    let mut index: ArtifactIndex = match fs::read_to_string(&manifest_path) {
        Ok(s) => serde_json::from_str(&s)
            .map_err(|e| Error::Parse { line: 0, msg: format!("manifest.json: {e}") })?,
        Err(_) => ArtifactIndex::default(),
    };
    index.config_sha256 = config_sha256.to_string();
    for f in files {
        let rel = f
            .strip_prefix(out_dir)
            .map_err(|_| Error::InvalidInput(format!("artifact {} outside run dir", f.display())))?
            .to_string_lossy()
            .replace('\\', "/");
        index.artifacts.insert(rel, sha256_file(f)?);
    }
    let json = serde_json::to_string_pretty(&index)
        .map_err(|e| Error::InvalidInput(format!("manifest encode: {e}")))?;
    fs::write(&manifest_path, json + "\n")
        .map_err(|e| Error::io(manifest_path.display().to_string(), e))
}

fn write_jsonl(path: &Path, rows: &[serde_json::Value]) -> Result<()> {
    let mut out = String::new();
    for r in rows {
        out.push_str(&r.to_string());
        out.push('\n');
    }
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent.display().to_string(), e))?;
    }
    fs::write(path, out).map_err(|e| Error::io(path.display().to_string(), e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent.display().to_string(), e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path.display().to_string(), e))
}

fn data_path(out_dir: &Path, name: &str) -> PathBuf {
    out_dir.join("data").join(name)
}

fn model_dir(out_dir: &Path, name: &str) -> PathBuf {
    out_dir.join("models").join(name)
}

fn log_path(out_dir: &Path, name: &str) -> PathBuf {
    out_dir.join("logs").join(name)
}

fn load_split_file(out_dir: &Path, name: &str) -> Result<Vec<LabeledSentence>> {
    load_corpus(&data_path(out_dir, name), crate::corpus::CorpusFormat::Jsonl)
}

fn seqs_for_lm(sentences: &[LabeledSentence], vocab: &Vocabulary) -> Vec<Vec<usize>> {
    sentences
        .iter()
        .map(|s| {
            let mut ids = tokenize(&s.text, vocab).0;
            ids.push(EOS);
            ids
        })
        .collect()
}

/// Stage 1: materialize corpora and prompt lists under `out_dir/data`.
pub fn prepare_data(cfg: &RunConfig, out_dir: &Path) -> Result<Vec<PathBuf>> {
    let digest = cfg.digest()?;
    assert_disjoint_prompts(&cfg.prompts.finetune, &cfg.prompts.eval)?;

    let norm = match &cfg.corpus.norm_corpus_path {
        Some(p) => load_corpus(Path::new(p), cfg.corpus.format)?,
        None => generate_synthetic(&cfg.synthetic_norm, cfg.seed + SEED_GEN_NORM)?,
    };
    let alt = match (&cfg.corpus.alt_corpus_path, &cfg.synthetic_alt) {
        (Some(p), _) => Some(load_corpus(Path::new(p), cfg.corpus.format)?),
        (None, Some(spec)) => Some(generate_synthetic(spec, cfg.seed + SEED_GEN_ALT)?),
        (None, None) => None,
    };
    let lm_all = match &cfg.corpus.lm_corpus_path {
        Some(p) => load_corpus(Path::new(p), cfg.corpus.format)?,
        None => {
            let mut all = norm.clone();
            if let Some(a) = &alt {
                all.extend(a.iter().cloned());
            }
            all
        }
    };

    let ratios = (cfg.corpus.train_ratio, cfg.corpus.val_ratio, cfg.corpus.test_ratio);
    let split_seed = cfg.seed + cfg.corpus.split_seed_offset;

    let mut written = Vec::new();
    let mut emit = |name: &str, sents: &[LabeledSentence]| -> Result<()> {
        let p = data_path(out_dir, name);
        if let Some(parent) = p.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent.display().to_string(), e))?;
        }
        save_corpus_jsonl(sents, &p)?;
        written.push(p);
        Ok(())
    };

    let s = split(&lm_all, ratios, split_seed)?;
    emit("lm_train.jsonl", &s.train)?;
    emit("lm_val.jsonl", &s.validation)?;
    emit("lm_test.jsonl", &s.test)?;

    let s = split(&norm, ratios, split_seed + 1)?;
    emit("norm_train.jsonl", &s.train)?;
    emit("norm_val.jsonl", &s.validation)?;
    emit("norm_test.jsonl", &s.test)?;

    if let Some(a) = &alt {
        let s = split(a, ratios, split_seed + 2)?;
        emit("alt_train.jsonl", &s.train)?;
        emit("alt_val.jsonl", &s.validation)?;
        emit("alt_test.jsonl", &s.test)?;
    }

    let prompts_ft = data_path(out_dir, "prompts_finetune.txt");
    write_text(&prompts_ft, &(cfg.prompts.finetune.join("\n") + "\n"))?;
    written.push(prompts_ft);
    let prompts_ev = data_path(out_dir, "prompts_eval.txt");
    write_text(&prompts_ev, &(cfg.prompts.eval.join("\n") + "\n"))?;
    written.push(prompts_ev);

    let resolved = out_dir.join("config.resolved.toml");
    write_text(&resolved, &cfg.to_toml()?)?;
    written.push(resolved);

    record_artifacts(out_dir, &digest, &written)?;
    Ok(written)
}

fn model_files(dir: &Path) -> Vec<PathBuf> {
    ["manifest.json", "weights.bin", "vocab.json", "run.json"]
        .iter()
        .map(|f| dir.join(f))
        .filter(|p| p.exists())
        .collect()
}

fn write_run_stamp(dir: &Path, digest: &str) -> Result<()> {
    write_text(
        &dir.join("run.json"),
        &(serde_json::json!({ "config_sha256": digest }).to_string() + "\n"),
    )
}

/// Stage 2: train the base language model on the prepared LM splits.
pub fn train_lm(cfg: &RunConfig, out_dir: &Path) -> Result<LmModel> {
    let digest = cfg.digest()?;
    let train = load_split_file(out_dir, "lm_train.jsonl")?;
    let val = load_split_file(out_dir, "lm_val.jsonl")?;
    let vocab = build_vocab(&train, cfg.corpus.vocab_max_size)?;
    let mut model = LmModel::new(cfg.lm.clone(), vocab.clone(), cfg.seed + SEED_LM_INIT)?;
    let train_seqs = seqs_for_lm(&train, &vocab);
    let val_seqs = seqs_for_lm(&val, &vocab);
    let log = model.train(&train_seqs, Some(&val_seqs), &cfg.lm_train, cfg.seed + SEED_LM_TRAIN)?;

    let dir = model_dir(out_dir, LM_BASE);
    model.save(&dir)?;
    write_run_stamp(&dir, &digest)?;

    let mut rows = vec![serde_json::json!({ "config_sha256": digest })];
    for e in &log.epochs {
        rows.push(serde_json::json!({
            "epoch": e.epoch, "train_loss": e.train_loss, "val_loss": e.val_loss,
        }));
    }
    let log_file = log_path(out_dir, "train-lm.jsonl");
    write_jsonl(&log_file, &rows)?;

    let mut files = model_files(&dir);
    files.push(log_file);
    record_artifacts(out_dir, &digest, &files)?;
    Ok(model)
}

/// Stage 3: train a sentence classifier for one label dimension.
pub fn train_classifier(cfg: &RunConfig, out_dir: &Path, dim: Dimension) -> Result<ClassifierModel> {
    let digest = cfg.digest()?;
    let tag = dim.tag();
    let train = load_split_file(out_dir, &format!("{tag}_train.jsonl"))?;
    let test = load_split_file(out_dir, &format!("{tag}_test.jsonl"))?;
    let vocab = build_vocab(&train, cfg.corpus.vocab_max_size)?;
    let seed_shift = match dim {
        Dimension::Norm => 0,
        Dimension::Alt => 100,
    };
    let mut model = ClassifierModel::new(
        cfg.classifier.clone(),
        vocab,
        cfg.seed + SEED_CLS_INIT + seed_shift,
    )?;
    let log = model.train(&train, &cfg.classifier_train, cfg.seed + SEED_CLS_TRAIN + seed_shift)?;
    let (accuracy, conf) = model.evaluate_accuracy(&test)?;

    let dir = model_dir(out_dir, &dim.classifier_name());
    model.save(&dir)?;
    write_run_stamp(&dir, &digest)?;

    let mut rows = vec![serde_json::json!({ "config_sha256": digest })];
    for e in &log.epochs {
        rows.push(serde_json::json!({ "epoch": e.epoch, "train_loss": e.train_loss }));
    }
    rows.push(serde_json::json!({ "test_accuracy": accuracy, "confusion": conf }));
    let log_file = log_path(out_dir, &format!("train-classifier-{tag}.jsonl"));
    write_jsonl(&log_file, &rows)?;

    let mut files = model_files(&dir);
    files.push(log_file);
    record_artifacts(out_dir, &digest, &files)?;
    Ok(model)
}

fn tokenize_prompts(prompts: &[String], vocab: &Vocabulary) -> Vec<TokenSequence> {
    prompts.iter().map(|p| tokenize(p, vocab)).collect()
}

/// Stage 4: fine-tune a copy of the base model against one classifier. The
/// base checkpoint is never modified; the result is saved under a new name.
pub fn finetune(cfg: &RunConfig, out_dir: &Path, dim: Dimension) -> Result<Vec<IterationStats>> {
    let digest = cfg.digest()?;
    let (mut model, warnings) = LmModel::load(&model_dir(out_dir, LM_BASE))?;
    for w in warnings {
        eprintln!("warning: {w}");
    }
    let (judge, warnings) = ClassifierModel::load(&model_dir(out_dir, &dim.classifier_name()))?;
    for w in warnings {
        eprintln!("warning: {w}");
    }
    let prompts = tokenize_prompts(&cfg.prompts.finetune, &model.vocab);
    let seed_shift = match dim {
        Dimension::Norm => 0,
        Dimension::Alt => 100,
    };
    let stats = run_finetune(
        &mut model,
        &judge,
        &prompts,
        &cfg.finetune,
        cfg.seed + SEED_FINETUNE + seed_shift,
    )?;

    let dir = model_dir(out_dir, &dim.finetuned_name());
    model.save(&dir)?;
    write_run_stamp(&dir, &digest)?;

    let mut rows = vec![serde_json::json!({ "config_sha256": digest })];
    for s in &stats {
        rows.push(serde_json::to_value(s).map_err(|e| Error::InvalidInput(e.to_string()))?);
    }
    let log_file = log_path(out_dir, &format!("finetune-{}.jsonl", dim.tag()));
    write_jsonl(&log_file, &rows)?;

    let mut files = model_files(&dir);
    files.push(log_file);
    record_artifacts(out_dir, &digest, &files)?;
    Ok(stats)
}

/// Stage 5: sample continuations from a named checkpoint for the evaluation
/// prompts. Returns the records; the CLI prints them as JSON lines.
pub fn generate(
    cfg: &RunConfig,
    out_dir: &Path,
    model_name: &str,
    samples_per_prompt: usize,
) -> Result<Vec<serde_json::Value>> {
    let (model, warnings) = LmModel::load(&model_dir(out_dir, model_name))?;
    for w in warnings {
        eprintln!("warning: {w}");
    }
    let prompts = tokenize_prompts(&cfg.prompts.eval, &model.vocab);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed + SEED_EVAL);
    let mut rows = Vec::new();
    for (prompt, text) in prompts.iter().zip(&cfg.prompts.eval) {
        for _ in 0..samples_per_prompt {
            let rec = model.sample_continuation(
                prompt,
                cfg.eval.max_new,
                &cfg.eval.sampling,
                &mut rng,
            )?;
            let cont = crate::corpus::detokenize(&rec.continuation, &model.vocab)?;
            rows.push(serde_json::json!({
                "prompt": text,
                "continuation": cont,
                "word_loss_mean": rec.mean_word_loss(),
            }));
        }
    }
    Ok(rows)
}

pub struct Evaluation {
    pub report: EvalReport,
    pub baseline_audit: Vec<SentenceRecord>,
    pub finetuned_audit: Vec<SentenceRecord>,
}

/// Stage 6: measure flagged proportions before and after fine-tuning on the
/// held-out prompts, perplexity on the LM test split, and (when both
/// classifiers exist) quadrant agreement over all audited continuations.
pub fn evaluate(cfg: &RunConfig, out_dir: &Path, dim: Dimension) -> Result<Evaluation> {
    let digest = cfg.digest()?;
    assert_disjoint_prompts(&cfg.prompts.finetune, &cfg.prompts.eval)?;

    let (base, _) = LmModel::load(&model_dir(out_dir, LM_BASE))?;
    let (tuned, _) = LmModel::load(&model_dir(out_dir, &dim.finetuned_name()))?;
    let (judge, _) = ClassifierModel::load(&model_dir(out_dir, &dim.classifier_name()))?;

    let prompts = tokenize_prompts(&cfg.prompts.eval, &base.vocab);
    let eval_seed = cfg.seed + SEED_EVAL;
    let (p, base_audit) = measure_flagged_ratio(
        &base,
        &judge,
        &prompts,
        cfg.eval.samples_per_prompt,
        &cfg.eval.sampling,
        cfg.eval.max_new,
        eval_seed,
    )?;
    let tuned_prompts = tokenize_prompts(&cfg.prompts.eval, &tuned.vocab);
    let (_, tuned_audit) = measure_flagged_ratio(
        &tuned,
        &judge,
        &tuned_prompts,
        cfg.eval.samples_per_prompt,
        &cfg.eval.sampling,
        cfg.eval.max_new,
        eval_seed,
    )?;

    let test = load_split_file(out_dir, "lm_test.jsonl")?;
    let ppl_before = base.perplexity(&seqs_for_lm(&test, &base.vocab))?;
    let ppl_after = tuned.perplexity(&seqs_for_lm(&test, &tuned.vocab))?;

    // Quadrant agreement needs a second, independently trained judge.
    let other = match dim {
        Dimension::Norm => Dimension::Alt,
        Dimension::Alt => Dimension::Norm,
    };
    let other_dir = model_dir(out_dir, &other.classifier_name());
    let quadrants = if other_dir.join("manifest.json").exists() {
        let (judge_b, _) = ClassifierModel::load(&other_dir)?;
        let sentences: Vec<String> = base_audit
            .iter()
            .chain(&tuned_audit)
            .map(|r| r.continuation.clone())
            .collect();
        Some(quadrant_agreement(&judge, &judge_b, &sentences)?)
    } else {
        None
    };

    let flagged_base = base_audit.iter().filter(|r| r.label == 0).count();
    let flagged_tuned = tuned_audit.iter().filter(|r| r.label == 0).count();
    let report = build_report(ReportInputs {
        model: LM_BASE,
        classifier: &dim.classifier_name(),
        n: base_audit.len(),
        flagged: flagged_base,
        comparison: Some((flagged_tuned, tuned_audit.len())),
        ppl_before,
        ppl_after,
        quadrants,
        seed: cfg.seed,
        config_sha256: &digest,
    })?;
    debug_assert!((report.p - p).abs() < 1e-12);

    let to_rows = |audit: &[SentenceRecord]| -> Result<Vec<serde_json::Value>> {
        let mut rows = vec![serde_json::json!({ "config_sha256": digest })];
        for r in audit {
            rows.push(serde_json::to_value(r).map_err(|e| Error::InvalidInput(e.to_string()))?);
        }
        Ok(rows)
    };
    let audit_base = log_path(out_dir, &format!("audit-{}-{}.jsonl", LM_BASE, dim.tag()));
    write_jsonl(&audit_base, &to_rows(&base_audit)?)?;
    let audit_tuned = log_path(
        out_dir,
        &format!("audit-{}-{}.jsonl", dim.finetuned_name(), dim.tag()),
    );
    write_jsonl(&audit_tuned, &to_rows(&tuned_audit)?)?;

    let report_file = out_dir.join(format!("report-{}.json", dim.tag()));
    let json = serde_json::to_string_pretty(&report)
        .map_err(|e| Error::InvalidInput(e.to_string()))?;
    write_text(&report_file, &(json + "\n"))?;

    record_artifacts(out_dir, &digest, &[audit_base, audit_tuned, report_file])?;
    Ok(Evaluation { report, baseline_audit: base_audit, finetuned_audit: tuned_audit })
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    #[allow(clippy::field_reassign_with_default)]
    fn tiny_config(out: &Path) -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.out_dir = out.display().to_string();
        cfg.synthetic_norm.count_per_class = 40;
        if let Some(alt) = cfg.synthetic_alt.as_mut() {
            alt.count_per_class = 40;
        }
        cfg.lm.layers = 1;
        cfg.lm.heads = 2;
        cfg.lm.width = 16;
        cfg.lm_train.epochs = 1;
        cfg.classifier.layers = 1;
        cfg.classifier.heads = 2;
        cfg.classifier.width = 16;
        cfg.classifier_train.epochs = 1;
        cfg.finetune.max_iterations = 1;
        cfg.finetune.samples_per_prompt = 2;
        cfg.finetune.frozen = crate::normtune::FrozenPolicy::AllButOneHead { layer: 0, head: 0 };
        cfg.eval.samples_per_prompt = 2;
        cfg.eval.max_new = 12;
        cfg
    }

    #[test]
    fn prepare_data_is_deterministic_and_indexed() {
        let dir = tempdir().unwrap();
        let cfg = tiny_config(dir.path());
        let files = prepare_data(&cfg, dir.path()).unwrap();
        assert!(files.iter().all(|f| f.exists()));
        let m1 = fs::read_to_string(dir.path().join("manifest.json")).unwrap();
        let lm1 = fs::read(data_path(dir.path(), "lm_train.jsonl")).unwrap();
        prepare_data(&cfg, dir.path()).unwrap();
        let m2 = fs::read_to_string(dir.path().join("manifest.json")).unwrap();
        let lm2 = fs::read(data_path(dir.path(), "lm_train.jsonl")).unwrap();
        assert_eq!(m1, m2);
        assert_eq!(lm1, lm2);
        let idx: ArtifactIndex = serde_json::from_str(&m1).unwrap();
        assert_eq!(idx.config_sha256, cfg.digest().unwrap());
        assert!(idx.artifacts.contains_key("data/lm_train.jsonl"));
    }

    #[test]
    fn lock_excludes_concurrent_runs() {
        let dir = tempdir().unwrap();
        let l1 = DirLock::acquire(dir.path()).unwrap();
        assert!(DirLock::acquire(dir.path()).is_err());
        drop(l1);
        DirLock::acquire(dir.path()).unwrap();
    }

    #[test]
    fn full_tiny_pipeline_runs_and_reports() {
        let dir = tempdir().unwrap();
        let cfg = tiny_config(dir.path());
        prepare_data(&cfg, dir.path()).unwrap();
        train_lm(&cfg, dir.path()).unwrap();
        train_classifier(&cfg, dir.path(), Dimension::Norm).unwrap();
        train_classifier(&cfg, dir.path(), Dimension::Alt).unwrap();

        // baseline checkpoint bytes must survive fine-tuning untouched
        let base_weights = model_dir(dir.path(), LM_BASE).join("weights.bin");
        let before = fs::read(&base_weights).unwrap();
        let stats = finetune(&cfg, dir.path(), Dimension::Norm).unwrap();
        assert_eq!(stats.len(), 1);
        assert_eq!(fs::read(&base_weights).unwrap(), before);
        assert!(model_dir(dir.path(), "lm-base-norm").join("weights.bin").exists());

        let rows = generate(&cfg, dir.path(), LM_BASE, 1).unwrap();
        assert_eq!(rows.len(), cfg.prompts.eval.len());

        let ev = evaluate(&cfg, dir.path(), Dimension::Norm).unwrap();
        assert!(ev.report.p >= 0.0 && ev.report.p <= 1.0);
        assert!(ev.report.quadrants.is_some());
        assert!(dir.path().join("report-norm.json").exists());
        let idx: ArtifactIndex =
            serde_json::from_str(&fs::read_to_string(dir.path().join("manifest.json")).unwrap())
                .unwrap();
        assert!(idx.artifacts.contains_key("report-norm.json"));
        assert!(idx.artifacts.contains_key("models/lm-base/weights.bin"));
    }
}
