//! Named parameter tensors with per-element freeze masks, gradient
//! accumulation, and a finite-difference gradient checker.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use indexmap::IndexMap;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone)]
pub struct Param {
    pub value: Tensor,
    /// None = fully trainable; Some(mask) with 1 = trainable, 0 = frozen.
    pub mask: Option<Vec<u8>>,
}

impl Param {
    pub fn trainable(value: Tensor) -> Self {
        Param { value, mask: None }
    }

    pub fn is_element_trainable(&self, i: usize) -> bool {
        match &self.mask {
            None => true,
            Some(m) => m[i] != 0,
        }
    }
}

/// Ordered collection of named parameter tensors. Iteration order is
/// insertion order, which keeps training runs deterministic.
#[derive(Debug, Clone, Default)]
pub struct ParameterSet {
    params: IndexMap<String, Param>,
}

impl ParameterSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        let name = name.into();
        assert!(
            !self.params.contains_key(&name),
            "duplicate parameter name {name}"
        );
        self.params.insert(name, Param::trainable(value));
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.params.get_mut(name)
    }

    pub fn value(&self, name: &str) -> &Tensor {
        &self.params[name].value
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param)> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Param)> {
        self.params.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_elements(&self) -> usize {
        self.params.values().map(|p| p.value.len()).sum()
    }

    /// Mark every element of every parameter frozen.
    pub fn freeze_all(&mut self) {
        for (_, p) in self.params.iter_mut() {
            p.mask = Some(vec![0; p.value.len()]);
        }
    }

    /// Clear all freeze masks.
    pub fn unfreeze_all(&mut self) {
        for (_, p) in self.params.iter_mut() {
            p.mask = None;
        }
    }

    /// Unfreeze every element of one named parameter.
    pub fn unfreeze(&mut self, name: &str) {
        if let Some(p) = self.params.get_mut(name) {
            p.mask = None;
        }
    }

    /// Unfreeze a column range [start, start+len) of a 2-d parameter.
    pub fn unfreeze_cols(&mut self, name: &str, start: usize, len: usize) {
        if let Some(p) = self.params.get_mut(name) {
            let (r, c) = p.value.dims2();
            let mask = p.mask.get_or_insert_with(|| vec![0; p.value.len()]);
            for i in 0..r {
                for j in start..start + len {
                    mask[i * c + j] = 1;
                }
            }
        }
    }

    /// Unfreeze a row range [start, start+len) of a 2-d parameter.
    pub fn unfreeze_rows(&mut self, name: &str, start: usize, len: usize) {
        if let Some(p) = self.params.get_mut(name) {
            let c = p.value.dims2().1;
            let mask = p.mask.get_or_insert_with(|| vec![0; p.value.len()]);
            for m in &mut mask[start * c..(start + len) * c] {
                *m = 1;
            }
        }
    }
}

/// Accumulated gradients keyed by parameter name.
#[derive(Debug, Clone, Default)]
pub struct GradStore {
    grads: IndexMap<String, Tensor>,
}

impl GradStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn accumulate(&mut self, name: &str, g: &Tensor) {
        match self.grads.get_mut(name) {
            Some(t) => {
                debug_assert_eq!(t.shape, g.shape);
                for (a, b) in t.data.iter_mut().zip(&g.data) {
                    *a += b;
                }
            }
            None => {
                self.grads.insert(name.to_string(), g.clone());
            }
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.grads.get(name)
    }

    pub fn scale(&mut self, k: f64) {
        for (_, t) in self.grads.iter_mut() {
            for v in &mut t.data {
                *v *= k;
            }
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.grads.iter()
    }
}

/// Draw parameters with a seeded normal(0, std) initialization.
pub fn init_normal(shape: &[usize], std: f64, rng: &mut ChaCha8Rng) -> Tensor {
    use rand_distr::{Distribution, Normal};
    let normal = Normal::new(0.0, std).expect("valid normal");
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| normal.sample(rng)).collect();
    Tensor {
        shape: shape.to_vec(),
        data,
    }
}

/// Compare analytic gradients against central finite differences on up to
/// `max_coords` sampled coordinates. `f` must return the loss and its
/// analytic gradients at the given parameters. Returns the max relative
/// error |g_a - g_fd| / max(1e-8, |g_a| + |g_fd|).
pub fn grad_check<F>(
    f: F,
    params: &mut ParameterSet,
    eps: f64,
    max_coords: usize,
    seed: u64,
) -> Result<f64>
where
    F: Fn(&ParameterSet) -> Result<(f64, GradStore)>,
{
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(Error::InvalidInput(format!(
            "grad_check eps {eps} outside [1e-7, 1e-3]"
        )));
    }
    let (loss0, analytic) = f(params)?;
    if !loss0.is_finite() {
        return Err(Error::NonFinite("grad_check objective".into()));
    }

    let mut coords: Vec<(String, usize)> = Vec::new();
    for (name, p) in params.iter() {
        for i in 0..p.value.len() {
            coords.push((name.clone(), i));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    coords.shuffle(&mut rng);
    coords.truncate(max_coords);

    let mut max_rel = 0.0f64;
    for (name, i) in coords {
        let orig = params.value(&name).data[i];
        params.get_mut(&name).unwrap().value.data[i] = orig + eps;
        let (lp, _) = f(params)?;
        params.get_mut(&name).unwrap().value.data[i] = orig - eps;
        let (lm, _) = f(params)?;
        params.get_mut(&name).unwrap().value.data[i] = orig;

        let g_fd = (lp - lm) / (2.0 * eps);
        let g_a = analytic.get(&name).map(|t| t.data[i]).unwrap_or(0.0);
        let rel = (g_a - g_fd).abs() / (1e-8f64).max(g_a.abs() + g_fd.abs());
        if rel > max_rel {
            max_rel = rel;
        }
    }
    Ok(max_rel)
}

// rand_distr comes via rand 0.8's re-exported distributions; keep a tiny
// local shim so we only depend on rand itself.
mod rand_distr {
    pub use rand::distributions::Distribution;

    pub struct Normal {
        mean: f64,
        std: f64,
    }

    impl Normal {
        pub fn new(mean: f64, std: f64) -> Result<Self, ()> {
            if std.is_finite() && std >= 0.0 {
                Ok(Normal { mean, std })
            } else {
                Err(())
            }
        }
    }

    impl Distribution<f64> for Normal {
        // Box-Muller from two uniform draws; deterministic under a seeded rng.
        fn sample<R: rand::Rng + ?Sized>(&self, rng: &mut R) -> f64 {
            let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
            let u2: f64 = rng.gen_range(0.0..1.0);
            let z = (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos();
            self.mean + self.std * z
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::{word_loss, word_loss_grad};

    #[test]
    fn grad_check_word_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut params = ParameterSet::new();
        params.insert("logits", init_normal(&[8], 1.0, &mut rng));
        let err = grad_check(
            |p| {
                let x = &p.value("logits").data;
                let loss = word_loss(x, 3)?;
                let mut gs = GradStore::new();
                let g = word_loss_grad(x, 3)?;
                gs.accumulate("logits", &Tensor::from_vec(&[8], g)?);
                Ok((loss, gs))
            },
            &mut params,
            1e-5,
            8,
            0,
        )
        .unwrap();
        assert!(err < 1e-4, "relative error {err}");
    }

    #[test]
    fn grad_check_constant_function_is_zero() {
        let mut params = ParameterSet::new();
        params.insert("w", Tensor::from_vec(&[3], vec![1.0, 2.0, 3.0]).unwrap());
        let err = grad_check(
            |_| Ok((7.0, GradStore::new())),
            &mut params,
            1e-5,
            3,
            0,
        )
        .unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn grad_check_rejects_bad_eps() {
        let mut params = ParameterSet::new();
        params.insert("w", Tensor::scalar(1.0));
        assert!(grad_check(|_| Ok((0.0, GradStore::new())), &mut params, 1e-2, 1, 0).is_err());
    }

    #[test]
    fn unfreeze_cols_marks_expected_elements() {
        let mut ps = ParameterSet::new();
        ps.insert("w", Tensor::zeros(&[2, 4]));
        ps.freeze_all();
        ps.unfreeze_cols("w", 1, 2);
        let p = ps.get("w").unwrap();
        let expect = [0u8, 1, 1, 0, 0, 1, 1, 0];
        assert_eq!(p.mask.as_ref().unwrap().as_slice(), &expect);
    }
}
