//! Finite-difference gradient checking.
//!
//! The analytic gradient is taken at precision `F`; the numerical one is a
//! central difference evaluated in `f64`, so an `f32` check measures the
//! `f32` backward pass against a reference that is not itself limited by
//! `f32` rounding.

use super::{Binding, ParamId, ParamStore, Real, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// A scalar-valued function of several tensors that can be evaluated at any
/// precision.
pub trait ScalarFn {
    fn eval<'t, F: Real>(&self, tape: &'t Tape<F>, inputs: &[Var<'t, F>]) -> Result<Var<'t, F>>;
}

#[derive(Clone, Debug)]
pub struct GradCheck {
    /// Per input: `max |analytic - numeric| / max(max |numeric|, max |analytic|)`.
    pub relative_errors: Vec<f64>,
}

impl GradCheck {
    pub fn max_relative_error(&self) -> f64 {
        self.relative_errors.iter().copied().fold(0.0, f64::max)
    }
}

/// Compares the tape gradient of `f` at precision `F` with central
/// differences of step `h` computed in `f64`.
pub fn check<F: Real>(f: &impl ScalarFn, inputs: &[Tensor<f64>], h: f64) -> Result<GradCheck> {
    let tape = Tape::<F>::new();
    let vars: Vec<Var<'_, F>> = inputs.iter().map(|t| tape.leaf(t.cast())).collect();
    let loss = f.eval(&tape, &vars)?;
    let grads = tape.backward(&loss)?;
    let analytic: Vec<Tensor<f64>> = vars.iter().map(|v| grads.get_or_zeros(v).cast()).collect();

    let eval64 = |xs: &[Tensor<f64>]| -> Result<f64> {
        let tape = Tape::<f64>::no_grad();
        let vars: Vec<Var<'_, f64>> = xs.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f.eval(&tape, &vars)?;
        let v = out.value().item()?;
        if !v.is_finite() {
            return Err(Error::NonFinite("gradcheck objective".into()));
        }
        Ok(v)
    };

    let mut relative_errors = Vec::with_capacity(inputs.len());
    for (i, input) in inputs.iter().enumerate() {
        let mut numeric = vec![0.0; input.numel()];
        let mut xs = inputs.to_vec();
        for (j, d) in numeric.iter_mut().enumerate() {
            let mut plus = input.to_vec();
            plus[j] += h;
            xs[i] = Tensor::new(input.shape().to_vec(), plus)?;
            let fp = eval64(&xs)?;
            let mut minus = input.to_vec();
            minus[j] -= h;
            xs[i] = Tensor::new(input.shape().to_vec(), minus)?;
            let fm = eval64(&xs)?;
            *d = (fp - fm) / (2.0 * h);
        }
        let a = analytic[i].data();
        let scale = numeric
            .iter()
            .chain(a.iter())
            .fold(0.0f64, |m, v| m.max(v.abs()))
            .max(1e-12);
        let err = a
            .iter()
            .zip(&numeric)
            .fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
        relative_errors.push(err / scale);
    }
    Ok(GradCheck { relative_errors })
}

/// A scalar function of the parameters in a store.
pub trait ParamFn {
    fn eval<'t, F: Real>(&self, params: &Binding<'t, '_, F>) -> Result<Var<'t, F>>;
}

/// [`check`] for every parameter of `store`: the tape gradient at
/// precision `F` against `f64` central differences. One relative error per
/// parameter, in store order.
///
/// A parameter whose gradient vanishes identically (a bias feeding a
/// normalization layer, say) would be scored on finite-difference noise
/// alone, so each error is measured against at least `1e-3` times the
/// largest gradient entry of the whole store.
pub fn check_params<F: Real>(f: &impl ParamFn, store: &ParamStore<f64>, h: f64) -> Result<GradCheck> {
    let cast = store.cast::<F>();
    let tape = Tape::<F>::new();
    let binding = cast.bind(&tape);
    let loss = f.eval(&binding)?;
    let grads = tape.backward(&loss)?;
    let analytic: Vec<(ParamId, Tensor<F>)> = binding.collect(&grads);

    let eval64 = |s: &ParamStore<f64>| -> Result<f64> {
        let tape = Tape::<f64>::no_grad();
        let v = f.eval(&s.bind(&tape))?.value().item()?;
        if !v.is_finite() {
            return Err(Error::NonFinite("gradcheck objective".into()));
        }
        Ok(v)
    };

    let mut pairs = Vec::with_capacity(store.len());
    let mut work = store.clone();
    for id in store.ids() {
        let base = store.value(id).clone();
        let mut numeric = vec![0.0; base.numel()];
        for (j, d) in numeric.iter_mut().enumerate() {
            let mut v = base.to_vec();
            v[j] += h;
            work.set_value(id, Tensor::new(base.shape().to_vec(), v)?)?;
            let fp = eval64(&work)?;
            let mut v = base.to_vec();
            v[j] -= h;
            work.set_value(id, Tensor::new(base.shape().to_vec(), v)?)?;
            let fm = eval64(&work)?;
            *d = (fp - fm) / (2.0 * h);
        }
        work.set_value(id, base)?;
        let a: Vec<f64> = match analytic.iter().find(|(i, _)| *i == id) {
            Some((_, g)) => g.data().iter().map(|v| v.f64()).collect(),
            None => vec![0.0; numeric.len()],
        };
        let scale = numeric.iter().chain(&a).fold(0.0f64, |m, v| m.max(v.abs()));
        let err = a.iter().zip(&numeric).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
        pairs.push((err, scale));
    }
    let floor = (1e-3 * pairs.iter().fold(0.0f64, |m, p| m.max(p.1))).max(1e-12);
    Ok(GradCheck {
        relative_errors: pairs.into_iter().map(|(e, s)| e / s.max(floor)).collect(),
    })
}
