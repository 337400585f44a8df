use rand::Rng;

use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
    pub m: Tensor,
    pub v: Tensor,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Named trainable tensors with gradient accumulators and Adam moments.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Param>,
    step: u64,
    grads_ready: bool,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.params.iter().any(|p| p.name == name) {
            return Err(Error::invalid(format!("duplicate parameter name {name}")));
        }
        let (r, c) = (value.rows(), value.cols());
        self.params.push(Param {
            name,
            grad: Tensor::zeros(r, c),
            m: Tensor::zeros(r, c),
            v: Tensor::zeros(r, c),
            value,
        });
        Ok(ParamId(self.params.len() - 1))
    }

    /// Xavier-uniform initialised matrix.
    pub fn add_xavier(
        &mut self,
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        rng: &mut impl Rng,
    ) -> Result<ParamId> {
        self.add(name, xavier_uniform(rows, cols, rng))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].grad
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn grads_ready(&self) -> bool {
        self.grads_ready
    }

    pub fn num_values(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub(crate) fn accumulate_grad(&mut self, id: ParamId, g: &Tensor) {
        self.params[id.0].grad.add_assign(g);
    }

    pub(crate) fn mark_grads_ready(&mut self) {
        self.grads_ready = true;
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().fill(0.0);
        }
        self.grads_ready = false;
    }

    /// Bias-corrected Adam update; clears gradients afterwards.
    pub fn adam_step(&mut self, cfg: &AdamConfig) -> Result<()> {
        if !self.grads_ready {
            return Err(Error::GradientsMissing);
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        for p in &mut self.params {
            let grad = p.grad.data();
            let m = p.m.data_mut();
            for (mi, &g) in m.iter_mut().zip(grad) {
                *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * g;
            }
            let v = p.v.data_mut();
            for (vi, &g) in v.iter_mut().zip(grad) {
                *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * g * g;
            }
            let (m, v) = (p.m.data(), p.v.data());
            for ((theta, &mi), &vi) in p.value.data_mut().iter_mut().zip(m).zip(v) {
                let m_hat = mi / bc1;
                let v_hat = vi / bc2;
                *theta -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
            }
        }
        self.zero_grads();
        Ok(())
    }

    pub(crate) fn set_step_count(&mut self, step: u64) {
        self.step = step;
    }
}

pub fn xavier_uniform(rows: usize, cols: usize, rng: &mut impl Rng) -> Tensor {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols)
        .map(|_| rng.gen_range(-bound..bound))
        .collect();
    Tensor::new(vec![rows, cols], data).expect("length matches shape")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn store_with(values: Vec<f64>) -> (ParamStore, ParamId) {
        let mut s = ParamStore::new();
        let n = values.len();
        let id = s.add("w", Tensor::new(vec![1, n], values).unwrap()).unwrap();
        (s, id)
    }

    #[test]
    fn names_must_be_unique() {
        let mut s = ParamStore::new();
        s.add("a", Tensor::zeros(1, 1)).unwrap();
        assert!(s.add("a", Tensor::zeros(1, 1)).is_err());
    }

    #[test]
    fn one_step_moves_by_lr_times_sign() {
        // m_hat = g, v_hat = g^2, so the step is lr * g / (|g| + eps).
        let (mut s, id) = store_with(vec![1.0, 1.0, 1.0]);
        let g = Tensor::row_vector(vec![0.3, -2.0, 1e-3]);
        s.accumulate_grad(id, &g);
        s.mark_grads_ready();
        let cfg = AdamConfig::default();
        s.adam_step(&cfg).unwrap();
        for (i, &gi) in g.data().iter().enumerate() {
            let expected = 1.0 - cfg.lr * gi / (gi.abs() + cfg.eps);
            assert!((s.value(id).data()[i] - expected).abs() < 1e-15);
            assert!((s.value(id).data()[i] - (1.0 - cfg.lr * gi.signum())).abs() < 1e-7);
        }
        assert!(s.grad(id).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_gradient_is_identity() {
        let (mut s, id) = store_with(vec![0.5, -0.25]);
        s.mark_grads_ready();
        for _ in 0..5 {
            s.mark_grads_ready();
            s.adam_step(&AdamConfig::default()).unwrap();
        }
        assert_eq!(s.value(id).data(), &[0.5, -0.25]);
    }

    #[test]
    fn step_without_gradients_errors() {
        let (mut s, _) = store_with(vec![1.0]);
        assert!(matches!(
            s.adam_step(&AdamConfig::default()),
            Err(Error::GradientsMissing)
        ));
    }

    #[test]
    fn xavier_is_seed_deterministic_and_bounded() {
        let a = xavier_uniform(4, 5, &mut ChaCha8Rng::seed_from_u64(3));
        let b = xavier_uniform(4, 5, &mut ChaCha8Rng::seed_from_u64(3));
        assert_eq!(a, b);
        let bound = (6.0f64 / 9.0).sqrt();
        assert!(a.data().iter().all(|v| v.abs() <= bound));
    }
}
