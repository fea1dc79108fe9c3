//! Reward-based fine-tuning of the language model with classifier labels:
//! the punishment schedule, the sentence loss, the fixed-prompt iteration
//! loop, and partial-parameter freezing.
//!
//! For a sampled continuation s with label C(s), mean word loss m, strength
//! rho, and schedule beta(i) = max(0, 1 - i*d):
//!
//!   u(s)    = rho * beta * (1 - C) * m
//!   loss_s  = m + u(s) = (1 + rho*beta*(1 - C)) * m
//!
//! The backpropagated objective applies loss_s uniformly over the
//! continuation's prediction steps, i.e. each step's cross-entropy is
//! weighted by (1 +/- rho*beta*(1 - C)) depending on the configured sign:
//! `as-published` adds the punishment term literally, which enlarges the
//! likelihood weight of flagged samples; `reversed` subtracts it
//! (unlikelihood-style down-weighting of flagged continuations).

use crate::classifier::{ClassifierModel, Judgement};
use crate::corpus::{detokenize, TokenSequence};
use crate::error::{Error, Result};
use crate::lm::{LmModel, Sampling};
use crate::optim::{Adam, AdamConfig};
use crate::params::{GradStore, ParameterSet};
use crate::transformer::{forward_backbone, BoundParams};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "policy")]
pub enum FrozenPolicy {
    AllButOneHead { layer: usize, head: usize },
    AllButLastLayer,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PunishmentSign {
    AsPublished,
    Reversed,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FineTuneConfig {
    pub rho: f64,
    pub max_iterations: usize,
    pub beta_decrement: f64,
    pub samples_per_prompt: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub frozen: FrozenPolicy,
    pub resample_short: bool,
    pub sign: PunishmentSign,
    pub sampling: Sampling,
    pub max_new: usize,
}

impl Default for FineTuneConfig {
    fn default() -> Self {
        FineTuneConfig {
            rho: 5.0,
            max_iterations: 10,
            beta_decrement: 0.05,
            samples_per_prompt: 8,
            // defaults chosen empirically: with rho=5 this pair gives a
            // large flagged-rate reduction while keeping perplexity drift
            // under a few percent; single-head freezing needs lr too hot
            // to clear both goals at once
            lr: 2e-4,
            batch_size: 8,
            frozen: FrozenPolicy::AllButLastLayer,
            resample_short: true,
            sign: PunishmentSign::Reversed,
            sampling: Sampling::default(),
            max_new: 60,
        }
    }
}

impl FineTuneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rho <= 0.0 {
            return Err(Error::InvalidInput("rho must be positive".into()));
        }
        if !(self.beta_decrement > 0.0 && self.beta_decrement <= 1.0) {
            return Err(Error::InvalidInput("beta decrement must lie in (0, 1]".into()));
        }
        if self.max_iterations == 0 {
            return Err(Error::InvalidInput("max_iterations must be >= 1".into()));
        }
        if self.samples_per_prompt == 0 {
            return Err(Error::InvalidInput("samples_per_prompt must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IterationStats {
    pub i: usize,
    pub beta: f64,
    pub n_continuations: usize,
    pub n_flagged: usize,
    pub mean_word_loss: f64,
    pub mean_u: f64,
    pub mean_sentence_loss: f64,
}

/// Linearly decaying punishment multiplier, clamped into [0, 1].
pub fn beta(i: usize, d: f64) -> f64 {
    (1.0 - i as f64 * d).clamp(0.0, 1.0)
}

/// u(s) = rho * beta(i) * (1 - C(s)) * mean word loss; zero for C = 1.
pub fn punishment(c: u8, mean_word_loss: f64, rho: f64, i: usize, d: f64) -> Result<f64> {
    if rho <= 0.0 {
        return Err(Error::InvalidInput("rho must be positive".into()));
    }
    if mean_word_loss < 0.0 {
        return Err(Error::InvalidInput("mean word loss must be non-negative".into()));
    }
    Ok(rho * beta(i, d) * (1.0 - c as f64) * mean_word_loss)
}

/// loss_s = mean(word_losses) + u.
pub fn sentence_loss(word_losses: &[f64], u: f64) -> Result<f64> {
    if word_losses.is_empty() {
        return Err(Error::InvalidInput(
            "sentence loss of degenerate continuation (no prediction steps)".into(),
        ));
    }
    let mean = word_losses.iter().sum::<f64>() / word_losses.len() as f64;
    Ok(mean + u)
}

/// Source of reward labels. The real classifier implements this; tests can
/// inject constant or rule-based judges.
pub trait Judge {
    fn judge_text(&self, text: &str) -> Result<Judgement>;
}

impl Judge for ClassifierModel {
    fn judge_text(&self, text: &str) -> Result<Judgement> {
        self.classify_text(text)
    }
}

/// Set freeze masks on an LM parameter set according to policy.
pub fn apply_frozen_policy(model: &mut LmModel, policy: FrozenPolicy) -> Result<()> {
    let cfg = model.config.clone();
    match policy {
        FrozenPolicy::None => {
            model.params.unfreeze_all();
        }
        FrozenPolicy::AllButLastLayer => {
            model.params.freeze_all();
            let last = cfg.layers - 1;
            let prefix = format!("h{last}.");
            let names: Vec<String> = model
                .params
                .names()
                .filter(|n| n.starts_with(&prefix))
                .cloned()
                .collect();
            for n in names {
                model.params.unfreeze(&n);
            }
        }
        FrozenPolicy::AllButOneHead { layer, head } => {
            if layer >= cfg.layers || head >= cfg.heads {
                return Err(Error::InvalidInput(format!(
                    "frozen policy names layer {layer} head {head}, model has {} layers x {} heads",
                    cfg.layers, cfg.heads
                )));
            }
            model.params.freeze_all();
            let dh = cfg.width / cfg.heads;
            let (start, len) = (head * dh, dh);
            for proj in ["wq", "wk", "wv"] {
                model.params.unfreeze_cols(&format!("h{layer}.attn.{proj}"), start, len);
            }
            for bias in ["bq", "bk", "bv"] {
                model.params.unfreeze_cols(&format!("h{layer}.attn.{bias}"), start, len);
            }
            model.params.unfreeze_rows(&format!("h{layer}.attn.wo"), start, len);
        }
    }
    Ok(())
}

/// Names of parameters touched by a frozen policy, with the slices they may
/// modify. Used by tests and the evaluation harness to assert bit-identity
/// of everything else.
pub fn trainable_elements(params: &ParameterSet) -> Vec<(String, Vec<usize>)> {
    let mut out = Vec::new();
    for (name, p) in params.iter() {
        let idx: Vec<usize> = (0..p.value.len())
            .filter(|&i| p.is_element_trainable(i))
            .collect();
        if !idx.is_empty() {
            out.push((name.clone(), idx));
        }
    }
    out
}

struct PreparedContinuation {
    ids: Vec<usize>,
    prompt_len: usize,
    c: u8,
    mean_word_loss_sampled: f64,
}

/// One pass over the fixed prompt set: sample, classify fresh, weight each
/// continuation's cross-entropy by the punishment factor, and apply
/// optimizer steps honoring the freeze masks.
pub fn finetune_iteration(
    model: &mut LmModel,
    judge: &dyn Judge,
    opt: &mut Adam,
    prompts: &[TokenSequence],
    cfg: &FineTuneConfig,
    i: usize,
    rng: &mut ChaCha8Rng,
) -> Result<IterationStats> {
    let b = beta(i, cfg.beta_decrement);
    let mut prepared: Vec<PreparedContinuation> = Vec::new();
    let mut n_flagged = 0usize;

    for prompt in prompts {
        for _ in 0..cfg.samples_per_prompt {
            let mut rec = model.sample_continuation(prompt, cfg.max_new, &cfg.sampling, rng)?;
            if rec.continuation.len() < 2 && cfg.resample_short {
                rec = model.sample_continuation(prompt, cfg.max_new, &cfg.sampling, rng)?;
            }
            if rec.continuation.len() < 2 {
                continue; // degenerate even after one resample
            }
            let text = detokenize(&rec.continuation, &model.vocab)?;
            if text.trim().is_empty() {
                continue;
            }
            let judgement = judge.judge_text(&text)?;
            if judgement.label == 0 {
                n_flagged += 1;
            }
            let mut ids = prompt.0.clone();
            ids.extend_from_slice(&rec.continuation.0);
            let ids = ids[..ids.len().min(model.config.context + 1)].to_vec();
            if ids.len() <= prompt.len() + 1 {
                continue;
            }
            prepared.push(PreparedContinuation {
                ids,
                prompt_len: prompt.len(),
                c: judgement.label,
                mean_word_loss_sampled: rec.mean_word_loss().unwrap_or(0.0),
            });
        }
    }

    let mut sum_word_loss = 0.0;
    let mut sum_u = 0.0;
    let mut sum_sentence_loss = 0.0;

    for batch in prepared.chunks(cfg.batch_size.max(1)) {
        let mut grads = GradStore::new();
        let scale = 1.0 / batch.len() as f64;
        for pc in batch {
            // Per-token losses recomputed in the same forward pass that is
            // backpropagated; labels were refreshed above for this iteration.
            let inputs = &pc.ids[..pc.ids.len() - 1];
            let targets = &pc.ids[1..];
            let mut tape = crate::autograd::Tape::new();
            let bound = BoundParams::bind(&mut tape, &model.params);
            let enc = forward_backbone(
                &mut tape,
                &bound,
                &model.config.backbone(),
                inputs,
                true,
                None,
            );
            let logits = tape.matmul(enc, bound.var("head.w"));
            let logits = tape.add_row(logits, bound.var("head.b"));
            // prediction steps within the continuation: rows prompt_len..end
            let start = pc.prompt_len;
            let n_steps = targets.len() - start;
            let cont_logits = tape.slice_rows(logits, start, n_steps);
            let ce = tape.cross_entropy(cont_logits, &targets[start..]);
            let mean_ce = tape.mean_all(ce);
            let m = tape.value(mean_ce).item();
            if !m.is_finite() {
                return Err(Error::NonFinite("fine-tuning sentence loss".into()));
            }

            let u = punishment(pc.c, m, cfg.rho, i, cfg.beta_decrement)?;
            let loss_s = sentence_loss(
                &tape.value(ce).data.clone(),
                u,
            )?;
            let factor = cfg.rho * b * (1.0 - pc.c as f64);
            let weight = match cfg.sign {
                PunishmentSign::AsPublished => 1.0 + factor,
                PunishmentSign::Reversed => 1.0 - factor,
            };
            let objective = tape.scale(mean_ce, weight * scale);
            let g = tape.backward(objective);
            bound.collect(&g, &mut grads);

            sum_word_loss += m;
            sum_u += u;
            sum_sentence_loss += loss_s;
            let _ = pc.mean_word_loss_sampled;
        }
        opt.step(&mut model.params, &grads)?;
    }

    let n = prepared.len();
    let denom = n.max(1) as f64;
    Ok(IterationStats {
        i,
        beta: b,
        n_continuations: n,
        n_flagged,
        mean_word_loss: sum_word_loss / denom,
        mean_u: sum_u / denom,
        mean_sentence_loss: sum_sentence_loss / denom,
    })
}

/// Run the full fixed-prompt loop for `max_iterations` iterations. The same
/// prompt set is used every iteration; the judge is never mutated; freeze
/// masks are applied once up front.
pub fn run_finetune(
    model: &mut LmModel,
    judge: &dyn Judge,
    prompts: &[TokenSequence],
    cfg: &FineTuneConfig,
    seed: u64,
) -> Result<Vec<IterationStats>> {
    cfg.validate()?;
    if prompts.is_empty() {
        return Err(Error::InvalidInput("prompt set must be non-empty".into()));
    }
    apply_frozen_policy(model, cfg.frozen)?;
    let mut opt = Adam::new(AdamConfig { lr: cfg.lr, ..AdamConfig::default() });
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut stats = Vec::with_capacity(cfg.max_iterations);
    for i in 0..cfg.max_iterations {
        stats.push(finetune_iteration(model, judge, &mut opt, prompts, cfg, i, &mut rng)?);
    }
    Ok(stats)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{build_vocab, tokenize, LabeledSentence, EOS};
    use crate::lm::{LmConfig, TrainParams};

    struct ConstJudge(u8);

    impl Judge for ConstJudge {
        fn judge_text(&self, _text: &str) -> Result<Judgement> {
            Ok(Judgement { probability: self.0 as f64, label: self.0 })
        }
    }

    #[test]
    fn beta_schedule() {
        assert_eq!(beta(0, 0.05), 1.0);
        assert_eq!(beta(10, 0.05), 0.5);
        assert_eq!(beta(25, 0.05), 0.0); // raw value -0.25, clamped
        let mut prev = f64::INFINITY;
        for i in 0..40 {
            let b = beta(i, 0.05);
            assert!(b <= prev);
            prev = b;
        }
        // zero for all i >= ceil(1/d)
        for i in 20..50 {
            assert_eq!(beta(i, 0.05), 0.0);
        }
    }

    #[test]
    fn punishment_examples() {
        assert_eq!(punishment(1, 7.3, 2.0, 4, 0.05).unwrap(), 0.0);
        assert_eq!(punishment(0, 1.5, 2.0, 0, 0.05).unwrap(), 3.0);
        assert_eq!(punishment(0, 2.0, 5.0, 10, 0.05).unwrap(), 5.0);
        assert!(punishment(0, 1.0, 0.0, 0, 0.05).is_err());
        assert!(punishment(0, 1.0, -1.0, 0, 0.05).is_err());
    }

    #[test]
    fn sentence_loss_examples_and_identity() {
        assert_eq!(sentence_loss(&[1.0, 2.0], 0.0).unwrap(), 1.5);
        assert_eq!(sentence_loss(&[0.37], 0.0).unwrap(), 0.37);
        assert!(sentence_loss(&[], 0.0).is_err());

        // substituting u into loss_s gives (1 + rho*beta*(1-C)) * mean
        let losses = [1.0, 2.0];
        let u = punishment(0, 1.5, 2.0, 0, 0.05).unwrap();
        assert!((u - 3.0).abs() < 1e-15);
        let ls = sentence_loss(&losses, u).unwrap();
        assert!((ls - 4.5).abs() < 1e-15);
        assert!((ls - (1.0 + 2.0) * 1.5).abs() < 1e-15);
    }

    fn toy_model() -> LmModel {
        let texts = [
            "the cat sat on the mat .",
            "the dog ran to the park .",
            "the bird flew over the tree .",
            "the fish swam in the pond .",
        ];
        let sents: Vec<LabeledSentence> =
            texts.iter().map(|t| LabeledSentence::new(*t, 1).unwrap()).collect();
        let vocab = build_vocab(&sents, 64).unwrap();
        let seqs: Vec<Vec<usize>> = texts
            .iter()
            .map(|t| {
                let mut ids = tokenize(t, &vocab).0;
                ids.push(EOS);
                ids
            })
            .collect();
        let cfg = LmConfig {
            layers: 2,
            heads: 2,
            width: 32,
            context: 24,
            dropout: 0.0,
            vocab_size: 0,
        };
        let mut m = LmModel::new(cfg, vocab, 1).unwrap();
        let tp = TrainParams { epochs: 25, lr: 3e-3, batch_size: 2 };
        m.train(&seqs, None, &tp, 1).unwrap();
        m
    }

    fn toy_prompts(m: &LmModel) -> Vec<TokenSequence> {
        ["the cat", "the dog"].iter().map(|p| tokenize(p, &m.vocab)).collect()
    }

    fn toy_cfg() -> FineTuneConfig {
        FineTuneConfig {
            max_iterations: 2,
            samples_per_prompt: 2,
            frozen: FrozenPolicy::None,
            ..FineTuneConfig::default()
        }
    }

    #[test]
    fn all_normative_judge_gives_zero_punishment() {
        let mut m = toy_model();
        let prompts = toy_prompts(&m);
        let stats = run_finetune(&mut m, &ConstJudge(1), &prompts, &toy_cfg(), 3).unwrap();
        assert_eq!(stats.len(), 2);
        for s in &stats {
            assert_eq!(s.mean_u, 0.0);
            assert_eq!(s.n_flagged, 0);
            assert!(s.n_continuations <= 4);
            assert!((s.mean_sentence_loss - s.mean_word_loss).abs() < 1e-12);
        }
    }

    #[test]
    fn all_flagged_judge_satisfies_batch_identity() {
        let mut m = toy_model();
        let prompts = toy_prompts(&m);
        let cfg = FineTuneConfig {
            max_iterations: 1,
            sign: PunishmentSign::AsPublished,
            ..toy_cfg()
        };
        let stats = run_finetune(&mut m, &ConstJudge(0), &prompts, &cfg, 3).unwrap();
        let s = &stats[0];
        assert_eq!(s.n_flagged, s.n_continuations);
        // rho=5, beta=1: every sentence loss is 6x its mean word loss
        assert!(
            (s.mean_sentence_loss - 6.0 * s.mean_word_loss).abs() < 1e-9,
            "{} vs {}",
            s.mean_sentence_loss,
            6.0 * s.mean_word_loss
        );
    }

    #[test]
    fn vanishing_rho_makes_label_irrelevant() {
        let cfg = FineTuneConfig {
            rho: 1e-12,
            max_iterations: 2,
            samples_per_prompt: 2,
            frozen: FrozenPolicy::None,
            ..FineTuneConfig::default()
        };
        let mut m0 = toy_model();
        let mut m1 = toy_model();
        let prompts = toy_prompts(&m0);
        run_finetune(&mut m0, &ConstJudge(0), &prompts, &cfg, 5).unwrap();
        run_finetune(&mut m1, &ConstJudge(1), &prompts, &cfg, 5).unwrap();
        for (name, p) in m0.params.iter() {
            let q = m1.params.value(name);
            for (a, b) in p.value.data.iter().zip(&q.data) {
                assert!((a - b).abs() < 1e-9, "{name}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn one_head_policy_keeps_everything_else_bit_identical() {
        let mut m = toy_model();
        let baseline = m.params.clone();
        let prompts = toy_prompts(&m);
        let cfg = FineTuneConfig {
            max_iterations: 3,
            samples_per_prompt: 2,
            frozen: FrozenPolicy::AllButOneHead { layer: 1, head: 0 },
            lr: 1e-3,
            ..FineTuneConfig::default()
        };
        run_finetune(&mut m, &ConstJudge(0), &prompts, &cfg, 7).unwrap();

        let mut changed = 0usize;
        for (name, p) in m.params.iter() {
            let before = baseline.value(name);
            for i in 0..p.value.len() {
                if p.is_element_trainable(i) {
                    if p.value.data[i].to_bits() != before.data[i].to_bits() {
                        changed += 1;
                    }
                } else {
                    assert_eq!(
                        p.value.data[i].to_bits(),
                        before.data[i].to_bits(),
                        "frozen element of {name} moved"
                    );
                }
            }
        }
        assert!(changed > 0, "designated head never trained");
    }

    #[test]
    fn preconditions_are_enforced() {
        let mut m = toy_model();
        let prompts = toy_prompts(&m);
        let cfg = FineTuneConfig { max_iterations: 0, ..toy_cfg() };
        assert!(run_finetune(&mut m, &ConstJudge(1), &prompts, &cfg, 1).is_err());
        assert!(run_finetune(&mut m, &ConstJudge(1), &[], &toy_cfg(), 1).is_err());
        let cfg = FineTuneConfig { rho: -1.0, ..toy_cfg() };
        assert!(run_finetune(&mut m, &ConstJudge(1), &prompts, &cfg, 1).is_err());
        let cfg = FineTuneConfig {
            frozen: FrozenPolicy::AllButOneHead { layer: 9, head: 0 },
            ..toy_cfg()
        };
        assert!(run_finetune(&mut m, &ConstJudge(1), &prompts, &cfg, 1).is_err());
    }
}
