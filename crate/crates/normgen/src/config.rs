//! Declarative run configuration: one TOML document drives every CLI
//! command. A SHA-256 digest of the canonical serialization is embedded in
//! every output artifact so runs can be traced back to their exact config.

use crate::classifier::ClassifierConfig;
use crate::corpus::{CorpusFormat, SyntheticSpec};
use crate::error::{Error, Result};
use crate::lm::{LmConfig, Sampling, TrainParams};
use crate::normtune::FineTuneConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::path::Path;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusSection {
    pub format: CorpusFormat,
    /// Optional user-supplied corpora; when absent, the synthetic specs are used.
    pub lm_corpus_path: Option<String>,
    pub norm_corpus_path: Option<String>,
    pub alt_corpus_path: Option<String>,
    pub train_ratio: f64,
    pub val_ratio: f64,
    pub test_ratio: f64,
    pub vocab_max_size: usize,
    pub split_seed_offset: u64,
}

impl Default for CorpusSection {
    fn default() -> Self {
        CorpusSection {
            format: CorpusFormat::Jsonl,
            lm_corpus_path: None,
            norm_corpus_path: None,
            alt_corpus_path: None,
            train_ratio: 0.8,
            val_ratio: 0.1,
            test_ratio: 0.1,
            vocab_max_size: 256,
            split_seed_offset: 101,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct PromptsSection {
    pub finetune: Vec<String>,
    pub eval: Vec<String>,
}

impl Default for PromptsSection {
    fn default() -> Self {
        PromptsSection {
            finetune: ["man", "woman", "child", "teacher", "farmer", "doctor"]
                .iter()
                .map(|s| format!("the {s}"))
                .collect(),
            eval: ["neighbor", "student", "girl", "boy", "nurse", "baker"]
                .iter()
                .map(|s| format!("the {s}"))
                .collect(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalSection {
    pub samples_per_prompt: usize,
    pub sampling: Sampling,
    pub max_new: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            samples_per_prompt: 34,
            sampling: Sampling::default(),
            max_new: 60,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: String,
    pub corpus: CorpusSection,
    pub synthetic_norm: SyntheticSpec,
    pub synthetic_alt: Option<SyntheticSpec>,
    pub prompts: PromptsSection,
    pub lm: LmConfig,
    pub lm_train: TrainParams,
    pub classifier: ClassifierConfig,
    pub classifier_train: TrainParams,
    pub finetune: FineTuneConfig,
    pub eval: EvalSection,
}

fn words(list: &[&str]) -> Vec<String> {
    list.iter().map(|s| s.to_string()).collect()
}

pub fn default_norm_spec() -> SyntheticSpec {
    let mut pools = BTreeMap::new();
    pools.insert(
        "subject".to_string(),
        words(&[
            "man", "woman", "child", "teacher", "farmer", "doctor", "neighbor", "student",
            "girl", "boy", "nurse", "baker",
        ]),
    );
    pools.insert(
        "object".to_string(),
        words(&[
            "bread", "book", "coin", "letter", "garden", "dog", "cat", "meal", "song", "story",
        ]),
    );
    pools.insert(
        "adverb".to_string(),
        words(&[
            "kindly", "gladly", "warmly", "gently", "happily", "angrily", "rudely", "coldly",
            "sadly", "bitterly",
        ]),
    );
    SyntheticSpec {
        benign_markers: words(&[
            "helps", "shares", "thanks", "greets", "hugs", "feeds", "teaches", "comforts",
            "praises", "protects",
        ]),
        undesirable_markers: words(&[
            "steals", "hits", "cheats", "betrays", "hurts", "insults", "threatens", "mocks",
            "deceives", "robs",
        ]),
        templates: vec!["the {subject} {marker} the {object} {adverb} .".to_string()],
        pools,
        count_per_class: 500,
    }
}

pub fn default_alt_spec() -> SyntheticSpec {
    let norm = default_norm_spec();
    let mut pools = BTreeMap::new();
    pools.insert("subject".to_string(), norm.pools["subject"].clone());
    pools.insert("object".to_string(), norm.pools["object"].clone());
    let mut verbs = norm.benign_markers.clone();
    verbs.extend(norm.undesirable_markers.clone());
    pools.insert("verb".to_string(), verbs);
    SyntheticSpec {
        benign_markers: words(&["kindly", "gladly", "warmly", "gently", "happily"]),
        undesirable_markers: words(&["angrily", "rudely", "coldly", "sadly", "bitterly"]),
        templates: vec!["the {subject} {verb} the {object} {marker} .".to_string()],
        pools,
        count_per_class: 500,
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 1,
            out_dir: "runs/default".to_string(),
            corpus: CorpusSection::default(),
            synthetic_norm: default_norm_spec(),
            synthetic_alt: Some(default_alt_spec()),
            prompts: PromptsSection::default(),
            lm: LmConfig::default(),
            lm_train: TrainParams { epochs: 4, lr: 3e-4, batch_size: 8 },
            classifier: ClassifierConfig::default(),
            classifier_train: TrainParams { epochs: 3, lr: 1e-3, batch_size: 8 },
            finetune: FineTuneConfig::default(),
            eval: EvalSection::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        toml::from_str(s).map_err(|e| Error::Parse { line: 0, msg: format!("config: {e}") })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        Self::from_toml_str(&s)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::InvalidInput(format!("config encode: {e}")))
    }

    /// SHA-256 of the canonical (re-serialized) configuration.
    pub fn digest(&self) -> Result<String> {
        let canon = self.to_toml()?;
        let d = Sha256::digest(canon.as_bytes());
        Ok(d.iter().map(|b| format!("{b:02x}")).collect())
    }

    /// Apply a `--set section.key=value` style override onto the TOML tree,
    /// then re-parse. Values are tried as bool, integer, float, then string;
    /// arrays take inline TOML syntax.
    pub fn with_overrides(&self, overrides: &[String]) -> Result<Self> {
        if overrides.is_empty() {
            return Ok(self.clone());
        }
        let mut tree: toml::Value = toml::Value::try_from(self)
            .map_err(|e| Error::InvalidInput(format!("config encode: {e}")))?;
        for ov in overrides {
            let (path, raw) = ov.split_once('=').ok_or_else(|| {
                Error::InvalidInput(format!("override '{ov}' is not of the form key=value"))
            })?;
            let value = parse_override_value(raw.trim());
            set_path(&mut tree, path.trim(), value)?;
        }
        tree.try_into()
            .map_err(|e| Error::InvalidInput(format!("config after overrides: {e}")))
    }
}

fn parse_override_value(raw: &str) -> toml::Value {
    if let Ok(b) = raw.parse::<bool>() {
        return toml::Value::Boolean(b);
    }
    if let Ok(i) = raw.parse::<i64>() {
        return toml::Value::Integer(i);
    }
    if let Ok(f) = raw.parse::<f64>() {
        return toml::Value::Float(f);
    }
    if raw.starts_with('[') {
        if let Ok(v) = toml::from_str::<toml::Value>(&format!("x = {raw}")) {
            if let Some(inner) = v.get("x") {
                return inner.clone();
            }
        }
    }
    toml::Value::String(raw.trim_matches('"').to_string())
}

fn set_path(tree: &mut toml::Value, path: &str, value: toml::Value) -> Result<()> {
    let parts: Vec<&str> = path.split('.').collect();
    let mut cur = tree;
    for (i, part) in parts.iter().enumerate() {
        let table = cur
            .as_table_mut()
            .ok_or_else(|| Error::InvalidInput(format!("override path '{path}' not a table")))?;
        if i == parts.len() - 1 {
            table.insert(part.to_string(), value);
            return Ok(());
        }
        cur = table
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(Default::default()));
    }
    unreachable!()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips_through_toml() {
        let c = RunConfig::default();
        let s = c.to_toml().unwrap();
        let back = RunConfig::from_toml_str(&s).unwrap();
        assert_eq!(back.digest().unwrap(), c.digest().unwrap());
        assert_eq!(back.seed, 1);
        assert_eq!(back.finetune.rho, 5.0);
    }

    #[test]
    fn digest_is_deterministic_and_sensitive() {
        let a = RunConfig::default();
        let mut b = RunConfig::default();
        assert_eq!(a.digest().unwrap(), b.digest().unwrap());
        b.seed = 2;
        assert_ne!(a.digest().unwrap(), b.digest().unwrap());
    }

    #[test]
    fn overrides_apply_with_type_inference() {
        let c = RunConfig::default();
        let c2 = c
            .with_overrides(&[
                "seed=9".to_string(),
                "finetune.rho=2.5".to_string(),
                "finetune.sign=as-published".to_string(),
                "finetune.resample_short=false".to_string(),
                "prompts.eval=[\"the fox\"]".to_string(),
            ])
            .unwrap();
        assert_eq!(c2.seed, 9);
        assert_eq!(c2.finetune.rho, 2.5);
        assert!(!c2.finetune.resample_short);
        assert_eq!(c2.prompts.eval, vec!["the fox".to_string()]);
        assert!(c.with_overrides(&["nonsense".to_string()]).is_err());
        assert!(c.with_overrides(&["finetune.rho=purple".to_string()]).is_err());
    }

    #[test]
    fn default_marker_pools_are_disjoint_across_dimensions() {
        let norm = default_norm_spec();
        let alt = default_alt_spec();
        for m in &norm.undesirable_markers {
            assert!(!alt.undesirable_markers.contains(m));
            assert!(!alt.benign_markers.contains(m));
        }
        // alt corpus sentences may contain undesirable verbs via its verb
        // pool, which is exactly what makes the two label dimensions independent
        assert!(alt.pools["verb"].iter().any(|v| norm.undesirable_markers.contains(v)));
    }
}
