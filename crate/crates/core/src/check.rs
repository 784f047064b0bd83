//! Finite-difference verification of tape gradients.

use crate::error::{Error, Result};
use crate::param::ParamVisit;
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor4;

/// Compare analytic gradients of a scalar-valued graph against central
/// differences, returning the maximum relative error over every element of
/// every input:
///
/// ```text
/// |analytic - numeric| / (|analytic| + |numeric| + 1e-8)
/// ```
///
/// The builder receives one leaf per input tensor, in order. Step `h`
/// should lie in [1e-5, 1e-3]; inputs are expected to be small (extents of
/// at most 8 per axis) since the numeric side costs two forward passes per
/// element.
pub fn grad_check<F>(inputs: &[Tensor4], build: F, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[NodeId]) -> Result<NodeId>,
{
    if !(1e-5..=1e-3).contains(&h) {
        return Err(Error::param(format!("step {h} outside [1e-5, 1e-3]")));
    }
    // Analytic pass.
    let mut tape = Tape::new();
    let ids: Vec<NodeId> = inputs
        .iter()
        .map(|t| {
            let mut t = t.clone();
            t.requires_grad = true;
            tape.leaf(t)
        })
        .collect();
    let root = build(&mut tape, &ids)?;
    if tape.value(root).numel() != 1 {
        return Err(Error::shape(
            "grad_check requires a scalar-valued graph".to_string(),
        ));
    }
    let grads = tape.backward(root)?;
    let analytic: Vec<Vec<f64>> = ids
        .iter()
        .zip(inputs)
        .map(|(&id, t)| {
            grads
                .get(id)
                .map(|g| g.data().to_vec())
                .unwrap_or_else(|| vec![0.0; t.numel()])
        })
        .collect();

    let eval = |points: &[Tensor4]| -> Result<f64> {
        let mut tape = Tape::new();
        let ids: Vec<NodeId> = points.iter().map(|t| tape.constant(t.clone())).collect();
        let root = build(&mut tape, &ids)?;
        tape.value(root).scalar()
    };

    let mut worst = 0.0f64;
    for (pi, input) in inputs.iter().enumerate() {
        for e in 0..input.numel() {
            let mut plus: Vec<Tensor4> = inputs.to_vec();
            plus[pi].data_mut()[e] += h;
            let mut minus: Vec<Tensor4> = inputs.to_vec();
            minus[pi].data_mut()[e] -= h;
            let numeric = (eval(&plus)? - eval(&minus)?) / (2.0 * h);
            let a = analytic[pi][e];
            if !a.is_finite() || !numeric.is_finite() {
                return Err(Error::numeric(format!(
                    "non-finite gradient for input {pi} element {e}"
                )));
            }
            let rel = (a - numeric).abs() / (a.abs() + numeric.abs() + 1e-8);
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}

/// Gradient check over every learnable parameter of a module plus its
/// input. The forward closure must bind the module's parameters itself
/// (the usual `Param::bind` path) and reduce to a scalar.
pub fn grad_check_module<M, F>(module: &mut M, input: &Tensor4, forward: F, h: f64) -> Result<f64>
where
    M: ParamVisit,
    F: Fn(&mut Tape, &M, NodeId) -> Result<NodeId>,
{
    if !(1e-5..=1e-3).contains(&h) {
        return Err(Error::param(format!("step {h} outside [1e-5, 1e-3]")));
    }
    // Analytic pass.
    let mut tape = Tape::new();
    let mut x = input.clone();
    x.requires_grad = true;
    let xid = tape.leaf(x);
    let root = forward(&mut tape, module, xid)?;
    let grads = tape.backward(root)?;
    let input_grad: Vec<f64> = grads
        .get(xid)
        .map(|g| g.data().to_vec())
        .unwrap_or_else(|| vec![0.0; input.numel()]);
    let mut param_grads: Vec<Vec<f64>> = Vec::new();
    module.visit("", &mut |_, p| {
        let g = p
            .bound()
            .and_then(|id| grads.get(id))
            .map(|g| g.data().to_vec())
            .unwrap_or_else(|| vec![0.0; p.value.numel()]);
        param_grads.push(g);
    });

    let eval = |module: &M, point: &Tensor4| -> Result<f64> {
        let mut tape = Tape::new();
        let xid = tape.constant(point.clone());
        let root = forward(&mut tape, module, xid)?;
        tape.value(root).scalar()
    };

    let mut worst = 0.0f64;
    // Input elements.
    for e in 0..input.numel() {
        let mut plus = input.clone();
        plus.data_mut()[e] += h;
        let mut minus = input.clone();
        minus.data_mut()[e] -= h;
        let numeric = (eval(module, &plus)? - eval(module, &minus)?) / (2.0 * h);
        let a = input_grad[e];
        let rel = (a - numeric).abs() / (a.abs() + numeric.abs() + 1e-8);
        worst = worst.max(rel);
    }
    // Parameter elements, perturbing the module in place.
    let count = param_grads.len();
    for pi in 0..count {
        let numel = param_grads[pi].len();
        for e in 0..numel {
            let mut f_plus = 0.0;
            let mut f_minus = 0.0;
            for (sign, out) in [(h, &mut f_plus), (-h, &mut f_minus)] {
                let mut k = 0;
                module.visit_mut("", &mut |_, p| {
                    if k == pi {
                        p.value.data_mut()[e] += sign;
                    }
                    k += 1;
                });
                *out = eval(module, input)?;
                let mut k = 0;
                module.visit_mut("", &mut |_, p| {
                    if k == pi {
                        p.value.data_mut()[e] -= sign;
                    }
                    k += 1;
                });
            }
            let numeric = (f_plus - f_minus) / (2.0 * h);
            let a = param_grads[pi][e];
            if !a.is_finite() || !numeric.is_finite() {
                return Err(Error::numeric(format!(
                    "non-finite gradient for parameter {pi} element {e}"
                )));
            }
            let rel = (a - numeric).abs() / (a.abs() + numeric.abs() + 1e-8);
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}
