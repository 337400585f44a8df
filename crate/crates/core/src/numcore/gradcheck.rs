//! Central finite-difference verification of tape gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::params::{ParamId, ParamStore};
use super::tape::{Tape, Var};
use crate::error::{Error, Result};

/// Anything that owns a [`ParamStore`] a loss can be evaluated against.
pub trait HasParams {
    fn store(&self) -> &ParamStore;
    fn store_mut(&mut self) -> &mut ParamStore;
}

impl HasParams for ParamStore {
    fn store(&self) -> &ParamStore {
        self
    }
    fn store_mut(&mut self) -> &mut ParamStore {
        self
    }
}

#[derive(Debug, Clone, Copy)]
pub enum Coords {
    All,
    /// Up to `per_param` randomly chosen entries of every parameter.
    Sample { per_param: usize, seed: u64 },
}

#[derive(Debug, Clone)]
pub struct ParamCheck {
    pub name: String,
    pub checked: usize,
    pub max_rel_error: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    pub per_param: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn param(&self, name: &str) -> Option<&ParamCheck> {
        self.per_param.iter().find(|p| p.name == name)
    }
}

fn eval<M: HasParams>(
    model: &mut M,
    f: &mut impl FnMut(&mut M, &mut Tape) -> Result<Var>,
) -> Result<f64> {
    let mut tape = Tape::new();
    let loss = f(model, &mut tape)?;
    let v = tape.scalar(loss);
    if !v.is_finite() {
        return Err(Error::NonFinite("grad_check objective"));
    }
    Ok(v)
}

/// Compares tape gradients against `(f(θ+ε) − f(θ−ε)) / 2ε` and reports the
/// largest `|g_tape − g_fd| / max(1, |g_fd|)`.
///
/// `f` must be deterministic (freeze batch normalization to eval mode).
/// Gradients in the store are left zeroed.
pub fn grad_check<M: HasParams>(
    model: &mut M,
    mut f: impl FnMut(&mut M, &mut Tape) -> Result<Var>,
    eps: f64,
    coords: Coords,
) -> Result<GradCheckReport> {
    model.store_mut().zero_grads();
    let mut tape = Tape::new();
    let loss = f(model, &mut tape)?;
    if !tape.scalar(loss).is_finite() {
        return Err(Error::NonFinite("grad_check objective"));
    }
    tape.backward(loss, model.store_mut())?;
    let ids: Vec<ParamId> = model.store().ids().collect();
    let tape_grads: Vec<Vec<f64>> = ids
        .iter()
        .map(|&id| model.store().grad(id).data().to_vec())
        .collect();
    model.store_mut().zero_grads();

    let mut rng = match coords {
        Coords::Sample { seed, .. } => Some(ChaCha8Rng::seed_from_u64(seed)),
        Coords::All => None,
    };
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        checked: 0,
        per_param: Vec::with_capacity(ids.len()),
    };
    for (pi, &id) in ids.iter().enumerate() {
        let len = model.store().value(id).len();
        let chosen: Vec<usize> = match (&coords, rng.as_mut()) {
            (Coords::Sample { per_param, .. }, Some(rng)) if *per_param < len => {
                let mut v = sample(rng, len, *per_param).into_vec();
                v.sort_unstable();
                v
            }
            _ => (0..len).collect(),
        };
        let mut worst = 0.0f64;
        for &i in &chosen {
            let orig = model.store().value(id).data()[i];
            model.store_mut().value_mut(id).data_mut()[i] = orig + eps;
            let plus = eval(model, &mut f);
            model.store_mut().value_mut(id).data_mut()[i] = orig - eps;
            let minus = eval(model, &mut f);
            model.store_mut().value_mut(id).data_mut()[i] = orig;
            let fd = (plus? - minus?) / (2.0 * eps);
            let err = (tape_grads[pi][i] - fd).abs() / fd.abs().max(1.0);
            worst = worst.max(err);
        }
        report.checked += chosen.len();
        report.max_rel_error = report.max_rel_error.max(worst);
        report.per_param.push(ParamCheck {
            name: model.store().get(id).name.clone(),
            checked: chosen.len(),
            max_rel_error: worst,
        });
    }
    Ok(report)
}
