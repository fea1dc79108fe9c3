//! Binary sentence classifier producing the reward label C(s) in {0, 1}:
//! bidirectional transformer encoder, pooled encoding, sigmoid head.

use crate::autograd::{sigmoid, Tape};
use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::corpus::{tokenize, LabeledSentence, TokenSequence, Vocabulary, RESERVED};
use crate::error::{Error, Result};
use crate::lm::{EpochLog, TrainLog, TrainParams};
use crate::optim::{Adam, AdamConfig};
use crate::params::{init_normal, GradStore, ParameterSet};
use crate::transformer::{forward_backbone, init_backbone, Backbone, BoundParams};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Pooling {
    Mean,
    FirstToken,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ClassifierConfig {
    pub layers: usize,
    pub heads: usize,
    pub width: usize,
    pub context: usize,
    pub pooling: Pooling,
    pub threshold: f64,
    pub vocab_size: usize,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        ClassifierConfig {
            layers: 2,
            heads: 4,
            width: 128,
            context: 64,
            pooling: Pooling::Mean,
            threshold: 0.5,
            vocab_size: 0,
        }
    }
}

impl ClassifierConfig {
    pub fn backbone(&self) -> Backbone {
        Backbone {
            layers: self.layers,
            heads: self.heads,
            width: self.width,
            context: self.context,
            vocab: self.vocab_size,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.width.is_multiple_of(self.heads) {
            return Err(Error::InvalidInput("width must be divisible by heads".into()));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::InvalidInput("threshold must lie in (0,1)".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Judgement {
    pub probability: f64,
    pub label: u8,
}

/// Threshold rule: label 1 iff probability >= threshold (ties go to 1).
pub fn judgement_from_prob(probability: f64, threshold: f64) -> Judgement {
    Judgement {
        probability,
        label: if probability >= threshold { 1 } else { 0 },
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub true_pos: usize,
    pub true_neg: usize,
    pub false_pos: usize,
    pub false_neg: usize,
}

impl Confusion {
    pub fn total(&self) -> usize {
        self.true_pos + self.true_neg + self.false_pos + self.false_neg
    }

    pub fn accuracy(&self) -> f64 {
        (self.true_pos + self.true_neg) as f64 / self.total() as f64
    }
}

pub fn confusion(predicted: &[u8], actual: &[u8]) -> Confusion {
    assert_eq!(predicted.len(), actual.len());
    let mut c = Confusion::default();
    for (&p, &a) in predicted.iter().zip(actual) {
        match (a, p) {
            (1, 1) => c.true_pos += 1,
            (0, 0) => c.true_neg += 1,
            (0, 1) => c.false_pos += 1,
            _ => c.false_neg += 1,
        }
    }
    c
}

pub struct ClassifierModel {
    pub config: ClassifierConfig,
    pub params: ParameterSet,
    pub vocab: Vocabulary,
}

impl ClassifierModel {
    pub fn new(mut config: ClassifierConfig, vocab: Vocabulary, seed: u64) -> Result<Self> {
        config.vocab_size = vocab.size();
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParameterSet::new();
        init_backbone(&mut params, &config.backbone(), &mut rng);
        params.insert("cls.w", init_normal(&[config.width, 1], 0.02, &mut rng));
        params.insert("cls.b", crate::tensor::Tensor::zeros(&[1]));
        Ok(ClassifierModel { config, params, vocab })
    }

    fn clip(&self, ids: &[usize]) -> Vec<usize> {
        ids[..ids.len().min(self.config.context)].to_vec()
    }

    fn logit_and_grads(
        &self,
        ids: &[usize],
        target: Option<(f64, &mut GradStore, f64)>,
    ) -> Result<f64> {
        let mut tape = Tape::new();
        let bound = BoundParams::bind(&mut tape, &self.params);
        let enc = forward_backbone(&mut tape, &bound, &self.config.backbone(), ids, false, None);
        let pooled = match self.config.pooling {
            Pooling::Mean => tape.mean_rows(enc),
            Pooling::FirstToken => tape.slice_rows(enc, 0, 1),
        };
        let z = tape.matmul(pooled, bound.var("cls.w"));
        let z = tape.add_row(z, bound.var("cls.b"));
        let z = if self.config.pooling == Pooling::FirstToken {
            tape.mean_all(z) // [1,1] -> scalar
        } else {
            z
        };
        let logit = tape.value(z).item();
        if let Some((y, grads, scale)) = target {
            let loss = tape.bce_with_logit(z, y);
            let scaled = tape.scale(loss, scale);
            let g = tape.backward(scaled);
            bound.collect(&g, grads);
            let l = tape.value(loss).item();
            if !l.is_finite() {
                return Err(Error::NonFinite("classifier loss".into()));
            }
        }
        Ok(logit)
    }

    /// Probability that the sentence carries label 1.
    pub fn probability(&self, tokens: &TokenSequence) -> Result<f64> {
        if tokens.0.iter().all(|&id| id < RESERVED.len()) {
            return Err(Error::InvalidInput("classify of empty sentence".into()));
        }
        if tokens.0.iter().any(|&id| id >= self.config.vocab_size) {
            return Err(Error::VocabMismatch(
                "token id out of range for classifier vocabulary".into(),
            ));
        }
        let ids = self.clip(&tokens.0);
        let z = self.logit_and_grads(&ids, None)?;
        Ok(sigmoid(z))
    }

    pub fn classify(&self, tokens: &TokenSequence) -> Result<Judgement> {
        Ok(judgement_from_prob(self.probability(tokens)?, self.config.threshold))
    }

    /// Classify raw text, tokenizing with the classifier's own vocabulary.
    pub fn classify_text(&self, text: &str) -> Result<Judgement> {
        self.classify(&tokenize(text, &self.vocab))
    }

    /// Train with binary cross-entropy on the pooled encoding.
    pub fn train(
        &mut self,
        train: &[LabeledSentence],
        tp: &TrainParams,
        seed: u64,
    ) -> Result<TrainLog> {
        let has0 = train.iter().any(|s| s.label == 0);
        let has1 = train.iter().any(|s| s.label == 1);
        if !has0 || !has1 {
            return Err(Error::InvalidInput(
                "classifier training corpus must contain both labels".into(),
            ));
        }
        self.train_unchecked(train, tp, seed)
    }

    fn train_unchecked(
        &mut self,
        train: &[LabeledSentence],
        tp: &TrainParams,
        seed: u64,
    ) -> Result<TrainLog> {
        let examples: Vec<(Vec<usize>, f64)> = train
            .iter()
            .map(|s| (self.clip(&tokenize(&s.text, &self.vocab).0), s.label as f64))
            .collect();
        let mut opt = Adam::new(AdamConfig { lr: tp.lr, ..AdamConfig::default() });
        let mut order_rng = ChaCha8Rng::seed_from_u64(seed ^ 0xc1a55);
        let mut log = TrainLog::default();
        for epoch in 0..tp.epochs {
            let mut order: Vec<usize> = (0..examples.len()).collect();
            order.shuffle(&mut order_rng);
            let mut epoch_loss = 0.0;
            for batch in order.chunks(tp.batch_size.max(1)) {
                let mut grads = GradStore::new();
                let scale = 1.0 / batch.len() as f64;
                let mut batch_loss = 0.0;
                for &i in batch {
                    let (ids, y) = &examples[i];
                    let z = self.logit_and_grads(ids, Some((*y, &mut grads, scale)))?;
                    batch_loss += z.max(0.0) - y * z + (-z.abs()).exp().ln_1p();
                }
                opt.step(&mut self.params, &grads)?;
                let mean = batch_loss / batch.len() as f64;
                log.step_losses.push(mean);
                epoch_loss += batch_loss;
            }
            log.epochs.push(EpochLog {
                epoch,
                train_loss: epoch_loss / examples.len() as f64,
                val_loss: None,
            });
        }
        Ok(log)
    }

    /// Few-shot transfer: continue training on a small labeled set for
    /// 1..=10 passes. An empty set leaves the model unchanged.
    pub fn few_shot_finetune(
        &mut self,
        small: &[LabeledSentence],
        iterations: usize,
        lr: f64,
        seed: u64,
    ) -> Result<()> {
        if !(1..=10).contains(&iterations) {
            return Err(Error::InvalidInput(format!(
                "few-shot iterations {iterations} outside [1, 10]"
            )));
        }
        if small.is_empty() {
            return Ok(());
        }
        let tp = TrainParams { epochs: iterations, lr, batch_size: 8 };
        self.train_unchecked(small, &tp, seed)?;
        Ok(())
    }

    pub fn evaluate_accuracy(&self, test: &[LabeledSentence]) -> Result<(f64, Confusion)> {
        if test.is_empty() {
            return Err(Error::InvalidInput("empty test corpus".into()));
        }
        let mut preds = Vec::with_capacity(test.len());
        let mut actual = Vec::with_capacity(test.len());
        for s in test {
            preds.push(self.classify_text(&s.text)?.label);
            actual.push(s.label);
        }
        let c = confusion(&preds, &actual);
        Ok((c.accuracy(), c))
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let hp = serde_json::to_value(&self.config)
            .map_err(|e| Error::Checkpoint(format!("hyperparams encode: {e}")))?;
        save_checkpoint(&self.params, "classifier", hp, &self.vocab.sha256(), dir)?;
        self.vocab.save(&dir.join("vocab.json"))
    }

    pub fn load(dir: &Path) -> Result<(Self, Vec<String>)> {
        let (params, manifest) = load_checkpoint(dir)?;
        if manifest.kind != "classifier" {
            return Err(Error::Checkpoint(format!(
                "expected kind 'classifier', found '{}'",
                manifest.kind
            )));
        }
        let config: ClassifierConfig = serde_json::from_value(manifest.hyperparams.clone())
            .map_err(|e| Error::Checkpoint(format!("hyperparams parse: {e}")))?;
        let vocab = Vocabulary::load(&dir.join("vocab.json"))?;
        let mut warnings = Vec::new();
        if vocab.sha256() != manifest.vocab_sha256 {
            warnings.push(format!(
                "vocabulary hash {} does not match checkpoint hash {}",
                vocab.sha256(),
                manifest.vocab_sha256
            ));
        }
        Ok((ClassifierModel { config, params, vocab }, warnings))
    }
}
