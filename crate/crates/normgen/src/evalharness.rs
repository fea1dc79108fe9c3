//! Before/after measurement: flagged-generation proportions, percentage
//! decrease, perplexity stability, and two-classifier agreement quadrants.

use crate::corpus::{detokenize, TokenSequence};
use crate::error::{Error, Result};
use crate::lm::{LmModel, Sampling};
use crate::normtune::Judge;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashSet;

/// One audited continuation: retained so a human can re-check any label.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SentenceRecord {
    pub prompt: String,
    pub continuation: String,
    pub label: u8,
    pub word_loss_mean: f64,
}

/// Sample continuations for every prompt and report the proportion the
/// judge flags (label 0). Deterministic under `seed`.
pub fn measure_flagged_ratio(
    model: &LmModel,
    judge: &dyn Judge,
    prompts: &[TokenSequence],
    samples_per_prompt: usize,
    sampling: &Sampling,
    max_new: usize,
    seed: u64,
) -> Result<(f64, Vec<SentenceRecord>)> {
    if prompts.is_empty() || samples_per_prompt == 0 {
        return Err(Error::InvalidInput("zero evaluation samples requested".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut records = Vec::new();
    let mut flagged = 0usize;
    for prompt in prompts {
        for _ in 0..samples_per_prompt {
            let mut rec = model.sample_continuation(prompt, max_new, sampling, &mut rng)?;
            if rec.continuation.is_empty() {
                rec = model.sample_continuation(prompt, max_new, sampling, &mut rng)?;
            }
            let text = detokenize(&rec.continuation, &model.vocab)?;
            if text.trim().is_empty() {
                continue;
            }
            let judgement = judge.judge_text(&text)?;
            if judgement.label == 0 {
                flagged += 1;
            }
            records.push(SentenceRecord {
                prompt: detokenize(prompt, &model.vocab)?,
                continuation: text,
                label: judgement.label,
                word_loss_mean: rec.mean_word_loss().unwrap_or(0.0),
            });
        }
    }
    if records.is_empty() {
        return Err(Error::InvalidInput(
            "all sampled continuations were degenerate".into(),
        ));
    }
    Ok((flagged as f64 / records.len() as f64, records))
}

/// (p - p_hat) / p. Negative when the flagged rate went up.
pub fn percentage_decrease(p: f64, p_hat: f64) -> Result<f64> {
    if p <= 0.0 {
        return Err(Error::InvalidInput(
            "percentage decrease undefined for baseline proportion 0".into(),
        ));
    }
    Ok((p - p_hat) / p)
}

/// Agreement quadrants of two judges over a sentence set.
/// aa = both acceptable (A=1, B=1); ff = both flagged (A=0, B=0);
/// fa = only A flags (A=0, B=1); af = only B flags (A=1, B=0).
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuadrantCounts {
    pub aa: usize,
    pub ff: usize,
    pub af: usize,
    pub fa: usize,
}

impl QuadrantCounts {
    pub fn total(&self) -> usize {
        self.aa + self.ff + self.af + self.fa
    }

    pub fn proportions(&self) -> (f64, f64, f64, f64) {
        let n = self.total() as f64;
        (
            self.aa as f64 / n,
            self.ff as f64 / n,
            self.af as f64 / n,
            self.fa as f64 / n,
        )
    }
}

pub fn quadrant_agreement(
    judge_a: &dyn Judge,
    judge_b: &dyn Judge,
    sentences: &[String],
) -> Result<QuadrantCounts> {
    if sentences.is_empty() {
        return Err(Error::InvalidInput("quadrant agreement of empty input".into()));
    }
    let mut q = QuadrantCounts::default();
    for s in sentences {
        let a = judge_a.judge_text(s)?.label;
        let b = judge_b.judge_text(s)?.label;
        match (a, b) {
            (1, 1) => q.aa += 1,
            (0, 0) => q.ff += 1,
            (1, 0) => q.af += 1,
            _ => q.fa += 1,
        }
    }
    Ok(q)
}

/// Evaluation prompts must never overlap the fine-tuning prompt set.
pub fn assert_disjoint_prompts(finetune: &[String], eval: &[String]) -> Result<()> {
    let fset: HashSet<&String> = finetune.iter().collect();
    for p in eval {
        if fset.contains(p) {
            return Err(Error::InvalidInput(format!(
                "evaluation prompt '{p}' is also a fine-tuning prompt"
            )));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub model: String,
    pub classifier: String,
    pub n: usize,
    pub flagged: usize,
    pub p: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub p_hat: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pct_decrease: Option<f64>,
    pub ppl_before: f64,
    pub ppl_after: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub quadrants: Option<QuadrantCounts>,
    pub seed: u64,
    pub config_sha256: String,
}

pub struct ReportInputs<'a> {
    pub model: &'a str,
    pub classifier: &'a str,
    pub n: usize,
    pub flagged: usize,
    pub comparison: Option<(usize, usize)>, // (flagged, n) of the fine-tuned model
    pub ppl_before: f64,
    pub ppl_after: f64,
    pub quadrants: Option<QuadrantCounts>,
    pub seed: u64,
    pub config_sha256: &'a str,
}

/// Assemble a report; every derived number is recomputed from the raw
/// counts so report values can never contradict them.
pub fn build_report(inputs: ReportInputs) -> Result<EvalReport> {
    if inputs.n == 0 || inputs.flagged > inputs.n {
        return Err(Error::InvalidInput(format!(
            "inconsistent counts: {} flagged of {}",
            inputs.flagged, inputs.n
        )));
    }
    let p = inputs.flagged as f64 / inputs.n as f64;
    let (p_hat, pct_decrease) = match inputs.comparison {
        Some((f2, n2)) => {
            if n2 == 0 || f2 > n2 {
                return Err(Error::InvalidInput(format!(
                    "inconsistent comparison counts: {f2} flagged of {n2}"
                )));
            }
            let ph = f2 as f64 / n2 as f64;
            (Some(ph), Some(percentage_decrease(p, ph)?))
        }
        None => (None, None),
    };
    Ok(EvalReport {
        model: inputs.model.to_string(),
        classifier: inputs.classifier.to_string(),
        n: inputs.n,
        flagged: inputs.flagged,
        p,
        p_hat,
        pct_decrease,
        ppl_before: inputs.ppl_before,
        ppl_after: inputs.ppl_after,
        quadrants: inputs.quadrants,
        seed: inputs.seed,
        config_sha256: inputs.config_sha256.to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::classifier::Judgement;
    use std::cell::Cell;

    struct ConstJudge(u8);
    impl Judge for ConstJudge {
        fn judge_text(&self, _: &str) -> Result<Judgement> {
            Ok(Judgement { probability: self.0 as f64, label: self.0 })
        }
    }

    struct CycleJudge {
        labels: Vec<u8>,
        at: Cell<usize>,
    }
    impl Judge for CycleJudge {
        fn judge_text(&self, _: &str) -> Result<Judgement> {
            let i = self.at.get();
            self.at.set(i + 1);
            let label = self.labels[i % self.labels.len()];
            Ok(Judgement { probability: label as f64, label })
        }
    }

    struct NotJudge<'a>(&'a dyn Judge);
    impl Judge for NotJudge<'_> {
        fn judge_text(&self, s: &str) -> Result<Judgement> {
            let j = self.0.judge_text(s)?;
            Ok(Judgement { probability: 1.0 - j.probability, label: 1 - j.label })
        }
    }

    #[test]
    fn percentage_decrease_paper_arithmetic() {
        // 64.15% -> 26.42% is a 59% decrease; 81.25% -> 59.18% is 27%
        let d = percentage_decrease(0.6415, 0.2642).unwrap();
        assert_eq!((d * 100.0).round() as i64, 59);
        assert!((d - 0.588).abs() < 5e-4);
        let d = percentage_decrease(0.8125, 0.5918).unwrap();
        assert_eq!((d * 100.0).round() as i64, 27);
        assert!((d - 0.2716).abs() < 5e-5);
        assert_eq!(percentage_decrease(0.3, 0.3).unwrap(), 0.0);
        assert!(percentage_decrease(0.0, 0.1).is_err());
        assert!(percentage_decrease(0.2, 0.4).unwrap() < 0.0);
    }

    #[test]
    fn quadrants_identical_and_complement_judges() {
        let sentences: Vec<String> = (0..10).map(|i| format!("sentence {i}")).collect();
        let a = CycleJudge { labels: vec![1, 0, 1], at: Cell::new(0) };
        let b = CycleJudge { labels: vec![1, 0, 1], at: Cell::new(0) };
        let q = quadrant_agreement(&a, &b, &sentences).unwrap();
        assert_eq!(q.af + q.fa, 0);
        assert_eq!(q.total(), 10);
        let (paa, pff, paf, pfa) = q.proportions();
        assert!((paa + pff + paf + pfa - 1.0).abs() < 1e-9);

        let a = CycleJudge { labels: vec![1, 0, 1], at: Cell::new(0) };
        let base = CycleJudge { labels: vec![1, 0, 1], at: Cell::new(0) };
        let b = NotJudge(&base);
        let q = quadrant_agreement(&a, &b, &sentences).unwrap();
        assert_eq!(q.aa + q.ff, 0);
        assert_eq!(q.af + q.fa, 10);

        assert!(quadrant_agreement(&ConstJudge(1), &ConstJudge(1), &[]).is_err());
    }

    #[test]
    fn disjointness_check() {
        let ft = vec!["the man".to_string(), "the woman".to_string()];
        let ok = vec!["the boy".to_string()];
        assert!(assert_disjoint_prompts(&ft, &ok).is_ok());
        let bad = vec!["the boy".to_string(), "the man".to_string()];
        assert!(assert_disjoint_prompts(&ft, &bad).is_err());
    }

    #[test]
    fn report_recomputes_derived_numbers() {
        let r = build_report(ReportInputs {
            model: "gpt-toy",
            classifier: "norm",
            n: 8,
            flagged: 4,
            comparison: Some((2, 8)),
            ppl_before: 30.0,
            ppl_after: 31.0,
            quadrants: Some(QuadrantCounts { aa: 5, ff: 3, af: 1, fa: 1 }),
            seed: 1,
            config_sha256: "deadbeef",
        })
        .unwrap();
        assert_eq!(r.p, 0.5);
        assert_eq!(r.p_hat, Some(0.25));
        assert_eq!(r.pct_decrease, Some(0.5));
        let q = r.quadrants.unwrap();
        assert_eq!(q.total(), 10);
        let (paa, pff, paf, pfa) = q.proportions();
        assert_eq!((paa, pff, paf, pfa), (0.5, 0.3, 0.1, 0.1));

        // round-trip
        let json = serde_json::to_string(&r).unwrap();
        let back: EvalReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back, r);

        // inconsistent counts rejected
        assert!(build_report(ReportInputs {
            model: "m",
            classifier: "c",
            n: 3,
            flagged: 5,
            comparison: None,
            ppl_before: 1.0,
            ppl_after: 1.0,
            quadrants: None,
            seed: 0,
            config_sha256: "x",
        })
        .is_err());
    }
}
