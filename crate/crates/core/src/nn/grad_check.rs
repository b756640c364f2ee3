//! Central-difference gradient checking against the autodiff engine.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::graph::{Graph, Value};
use super::params::{Binding, ParamStore};
use crate::error::{Error, Result};

/// Denominator floor for relative error, so gradients that are zero up to
/// rounding are compared absolutely.
pub const REL_ERR_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub name: String,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub elements: usize,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    pub tol: f64,
    pub loss: f64,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.params
            .iter()
            .map(|p| p.max_rel_err)
            .fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_rel_err() < self.tol
    }

    pub fn worst(&self) -> Option<&ParamCheck> {
        self.params
            .iter()
            .max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
    }
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

/// Adds `U(-scale, scale)` noise to every parameter. Freshly initialised
/// zero biases put ReLU and max inputs exactly on their kinks; a jittered
/// point is almost surely smooth.
pub fn jitter_params(store: &mut ParamStore, seed: u64, scale: f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for p in store.iter_mut() {
        for x in p.value.data_mut() {
            *x += rng.random_range(-scale..=scale);
        }
    }
}

fn eval_loss<F>(store: &ParamStore, f: &F) -> Result<f64>
where
    F: Fn(&mut Graph, &Binding) -> Result<Value>,
{
    let mut g = Graph::new();
    let b = store.bind(&mut g);
    let out = f(&mut g, &b)?;
    Ok(g.value(out).item())
}

/// Compares autodiff gradients of the scalar built by `f` with central
/// differences `(f(w+eps) − f(w−eps)) / 2eps`, element by element.
///
/// `f` receives a fresh eval-mode graph with every parameter bound and must
/// return a 1×1 value.
pub fn grad_check<F>(store: &ParamStore, eps: f64, tol: f64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &Binding) -> Result<Value>,
{
    let mut g = Graph::new();
    let binding = store.bind(&mut g);
    let out = f(&mut g, &binding)?;
    if g.shape(out) != (1, 1) {
        return Err(Error::shape("grad_check", (1, 1), g.shape(out)));
    }
    let loss = g.value(out).item();
    let again = eval_loss(store, &f)?;
    if loss.to_bits() != again.to_bits() {
        return Err(Error::NonDeterministicFunction {
            first: loss,
            second: again,
        });
    }
    g.backward(out)?;

    let mut probe = store.clone();
    let mut params = Vec::with_capacity(store.len());
    let ids: Vec<_> = store
        .iter()
        .map(|p| store.id(&p.name).expect("own name"))
        .collect();
    for id in ids {
        let analytic = g
            .grad(binding.get(id))
            .map(|t| t.data().to_vec())
            .unwrap_or_else(|| vec![0.0; store.get(id).value.len()]);
        let mut check = ParamCheck {
            name: store.get(id).name.clone(),
            max_rel_err: 0.0,
            max_abs_err: 0.0,
            elements: analytic.len(),
        };
        for (i, &a) in analytic.iter().enumerate() {
            let orig = store.get(id).value.data()[i];
            probe.get_mut(id).value.data_mut()[i] = orig + eps;
            let plus = eval_loss(&probe, &f)?;
            probe.get_mut(id).value.data_mut()[i] = orig - eps;
            let minus = eval_loss(&probe, &f)?;
            probe.get_mut(id).value.data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            check.max_rel_err = check.max_rel_err.max(rel_err(a, numeric));
            check.max_abs_err = check.max_abs_err.max((a - numeric).abs());
        }
        params.push(check);
    }
    Ok(GradCheckReport { params, tol, loss })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Tensor;

    #[test]
    fn sum_of_squares() {
        let mut store = ParamStore::new();
        store
            .add(
                "w",
                Tensor::from_vec(2, 2, vec![0.5, -1.5, 2.0, 0.25]).unwrap(),
            )
            .unwrap();
        let report = grad_check(&store, 1e-5, 1e-8, |g, p| {
            let w = p.get(store.id("w").unwrap());
            let sq = g.mul(w, w)?;
            Ok(g.sum(sq))
        })
        .unwrap();
        assert!(report.passed(), "{report:?}");
        let mut g = Graph::new();
        let b = store.bind(&mut g);
        let w = b.get(store.id("w").unwrap());
        let sq = g.mul(w, w).unwrap();
        let s = g.sum(sq);
        g.backward(s).unwrap();
        assert_eq!(g.grad(w).unwrap().data(), &[1.0, -3.0, 4.0, 0.5]);
    }

    #[test]
    fn constant_function_has_zero_gradients() {
        let mut store = ParamStore::new();
        store.add("w", Tensor::filled(1, 3, 0.3)).unwrap();
        let report = grad_check(&store, 1e-5, 1e-8, |g, _| {
            Ok(g.constant(Tensor::scalar(4.0)))
        })
        .unwrap();
        assert!(report.passed());
        assert_eq!(report.params[0].max_abs_err, 0.0);
    }

    #[test]
    fn nondeterminism_detected() {
        use std::cell::Cell;
        let mut store = ParamStore::new();
        store.add("w", Tensor::scalar(1.0)).unwrap();
        let calls = Cell::new(0.0);
        let err = grad_check(&store, 1e-5, 1e-8, |g, _| {
            calls.set(calls.get() + 1.0);
            Ok(g.constant(Tensor::scalar(calls.get())))
        })
        .unwrap_err();
        assert!(matches!(err, Error::NonDeterministicFunction { .. }));
    }
}
