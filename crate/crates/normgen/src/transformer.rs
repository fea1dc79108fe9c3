//! Pre-layer-norm transformer backbone with GELU feed-forward blocks,
//! shared by the causal language model and the bidirectional classifier
//! encoder.

use crate::autograd::{Grads, Tape, Var};
use crate::params::{init_normal, GradStore, ParameterSet};
use crate::tensor::Tensor;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use std::collections::HashMap;

pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy)]
pub struct Backbone {
    pub layers: usize,
    pub heads: usize,
    pub width: usize,
    pub context: usize,
    pub vocab: usize,
}

impl Backbone {
    pub fn head_dim(&self) -> usize {
        self.width / self.heads
    }
}

/// Insert embedding, block, and final-norm parameters for a backbone.
pub fn init_backbone(ps: &mut ParameterSet, b: &Backbone, rng: &mut ChaCha8Rng) {
    assert!(b.width.is_multiple_of(b.heads), "width must divide by heads");
    let d = b.width;
    ps.insert("tok_emb", init_normal(&[b.vocab, d], INIT_STD, rng));
    ps.insert("pos_emb", init_normal(&[b.context, d], INIT_STD, rng));
    for l in 0..b.layers {
        let p = |s: &str| format!("h{l}.{s}");
        ps.insert(p("ln1.g"), ones(&[d]));
        ps.insert(p("ln1.b"), Tensor::zeros(&[d]));
        ps.insert(p("attn.wq"), init_normal(&[d, d], INIT_STD, rng));
        ps.insert(p("attn.bq"), Tensor::zeros(&[d]));
        ps.insert(p("attn.wk"), init_normal(&[d, d], INIT_STD, rng));
        ps.insert(p("attn.bk"), Tensor::zeros(&[d]));
        ps.insert(p("attn.wv"), init_normal(&[d, d], INIT_STD, rng));
        ps.insert(p("attn.bv"), Tensor::zeros(&[d]));
        ps.insert(p("attn.wo"), init_normal(&[d, d], INIT_STD, rng));
        ps.insert(p("attn.bo"), Tensor::zeros(&[d]));
        ps.insert(p("ln2.g"), ones(&[d]));
        ps.insert(p("ln2.b"), Tensor::zeros(&[d]));
        ps.insert(p("mlp.w1"), init_normal(&[d, 4 * d], INIT_STD, rng));
        ps.insert(p("mlp.b1"), Tensor::zeros(&[4 * d]));
        ps.insert(p("mlp.w2"), init_normal(&[4 * d, d], INIT_STD, rng));
        ps.insert(p("mlp.b2"), Tensor::zeros(&[d]));
    }
    ps.insert("ln_f.g", ones(&[d]));
    ps.insert("ln_f.b", Tensor::zeros(&[d]));
}

fn ones(shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor {
        shape: shape.to_vec(),
        data: vec![1.0; n],
    }
}

/// Parameter leaves bound into one tape, keyed by parameter name.
pub struct BoundParams {
    vars: HashMap<String, Var>,
}

impl BoundParams {
    pub fn bind(tape: &mut Tape, params: &ParameterSet) -> Self {
        let mut vars = HashMap::new();
        for (name, p) in params.iter() {
            vars.insert(name.clone(), tape.leaf(p.value.clone()));
        }
        BoundParams { vars }
    }

    pub fn var(&self, name: &str) -> Var {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("unbound parameter {name}"))
    }

    /// Pull per-parameter gradients off the tape into a grad store.
    pub fn collect(&self, grads: &Grads, into: &mut GradStore) {
        let mut names: Vec<&String> = self.vars.keys().collect();
        names.sort();
        for name in names {
            if let Some(g) = grads.get(self.vars[name]) {
                into.accumulate(name, g);
            }
        }
    }
}

/// Dropout settings for a training-mode forward pass.
pub struct DropoutCtx<'a> {
    pub rate: f64,
    pub rng: &'a mut ChaCha8Rng,
}

fn maybe_dropout(tape: &mut Tape, x: Var, dropout: &mut Option<DropoutCtx>) -> Var {
    match dropout {
        Some(ctx) if ctx.rate > 0.0 => {
            let shape = tape.value(x).shape.clone();
            let n: usize = shape.iter().product();
            let keep = 1.0 - ctx.rate;
            let data: Vec<f64> = (0..n)
                .map(|_| {
                    if ctx.rng.gen::<f64>() < keep {
                        1.0 / keep
                    } else {
                        0.0
                    }
                })
                .collect();
            tape.mul_mask(x, Tensor { shape, data })
        }
        _ => x,
    }
}

fn linear(tape: &mut Tape, x: Var, w: Var, b: Var) -> Var {
    let y = tape.matmul(x, w);
    tape.add_row(y, b)
}

/// Full backbone forward: token + position embeddings, `layers` pre-LN
/// blocks, final layer norm. Returns the [T, width] encoding.
pub fn forward_backbone(
    tape: &mut Tape,
    bound: &BoundParams,
    b: &Backbone,
    ids: &[usize],
    causal: bool,
    mut dropout: Option<DropoutCtx>,
) -> Var {
    let t = ids.len();
    assert!(t >= 1 && t <= b.context, "sequence length {t} out of range");
    let tok = tape.embed(bound.var("tok_emb"), ids);
    let pos_ids: Vec<usize> = (0..t).collect();
    let pos = tape.embed(bound.var("pos_emb"), &pos_ids);
    let mut x = tape.add(tok, pos);

    let dh = b.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();
    for l in 0..b.layers {
        let p = |s: &str| format!("h{l}.{s}");
        let h1 = tape.layer_norm(x, bound.var(&p("ln1.g")), bound.var(&p("ln1.b")));
        let q = linear(tape, h1, bound.var(&p("attn.wq")), bound.var(&p("attn.bq")));
        let k = linear(tape, h1, bound.var(&p("attn.wk")), bound.var(&p("attn.bk")));
        let v = linear(tape, h1, bound.var(&p("attn.wv")), bound.var(&p("attn.bv")));
        let mut heads = Vec::with_capacity(b.heads);
        for h in 0..b.heads {
            let qh = tape.slice_cols(q, h * dh, dh);
            let kh = tape.slice_cols(k, h * dh, dh);
            let vh = tape.slice_cols(v, h * dh, dh);
            let scores = tape.matmul_nt(qh, kh);
            let scores = tape.scale(scores, scale);
            let att = tape.row_softmax(scores, causal);
            heads.push(tape.matmul(att, vh));
        }
        let cat = tape.concat_cols(&heads);
        let o = linear(tape, cat, bound.var(&p("attn.wo")), bound.var(&p("attn.bo")));
        let o = maybe_dropout(tape, o, &mut dropout);
        x = tape.add(x, o);

        let h2 = tape.layer_norm(x, bound.var(&p("ln2.g")), bound.var(&p("ln2.b")));
        let m = linear(tape, h2, bound.var(&p("mlp.w1")), bound.var(&p("mlp.b1")));
        let m = tape.gelu(m);
        let m = linear(tape, m, bound.var(&p("mlp.w2")), bound.var(&p("mlp.b2")));
        let m = maybe_dropout(tape, m, &mut dropout);
        x = tape.add(x, m);
    }
    tape.layer_norm(x, bound.var("ln_f.g"), bound.var("ln_f.b"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::grad_check;
    use rand::SeedableRng;

    fn tiny() -> Backbone {
        Backbone {
            layers: 2,
            heads: 2,
            width: 8,
            context: 6,
            vocab: 11,
        }
    }

    #[test]
    fn backbone_output_shape_and_determinism() {
        let b = tiny();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut ps = ParameterSet::new();
        init_backbone(&mut ps, &b, &mut rng);

        let run = |ps: &ParameterSet| {
            let mut tape = Tape::new();
            let bound = BoundParams::bind(&mut tape, ps);
            let out = forward_backbone(&mut tape, &bound, &b, &[2, 4, 5, 6], true, None);
            tape.value(out).clone()
        };
        let a = run(&ps);
        assert_eq!(a.shape, vec![4, 8]);
        assert!(a.all_finite());
        assert_eq!(a, run(&ps));
    }

    #[test]
    fn causal_backbone_ignores_future_tokens() {
        let b = tiny();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut ps = ParameterSet::new();
        init_backbone(&mut ps, &b, &mut rng);
        let run = |ids: &[usize]| {
            let mut tape = Tape::new();
            let bound = BoundParams::bind(&mut tape, &ps);
            let out = forward_backbone(&mut tape, &bound, &b, ids, true, None);
            tape.value(out).data[..b.width].to_vec() // first position's encoding
        };
        let a = run(&[2, 4, 5]);
        let c = run(&[2, 9, 10]);
        for (x, y) in a.iter().zip(&c) {
            assert!((x - y).abs() < 1e-12, "causal leak: {x} vs {y}");
        }
    }

    #[test]
    fn full_backbone_gradients_check_out() {
        let b = tiny();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut ps = ParameterSet::new();
        init_backbone(&mut ps, &b, &mut rng);
        let ids = [2usize, 4, 7, 9];
        let err = grad_check(
            |p| {
                let mut tape = Tape::new();
                let bound = BoundParams::bind(&mut tape, p);
                let out = forward_backbone(&mut tape, &bound, &b, &ids, true, None);
                let sq = tape.mul(out, out);
                let loss = tape.mean_all(sq);
                let grads = tape.backward(loss);
                let mut gs = GradStore::new();
                bound.collect(&grads, &mut gs);
                Ok((tape.value(loss).item(), gs))
            },
            &mut ps,
            1e-5,
            40,
            7,
        )
        .unwrap();
        assert!(err < 1e-4, "relative error {err}");
    }
}
