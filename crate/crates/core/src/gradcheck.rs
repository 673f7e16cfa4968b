//! Central-difference gradient checking.
//!
//! A "scalar program" is a closure that rebuilds a scalar loss on a fresh
//! tape from a named set of parameter tensors. The check runs the program
//! once with differentiable leaves to obtain reverse-mode gradients, then
//! re-evaluates it with each coordinate perturbed by +/- h (parameters
//! inserted as constants, so no gradient work happens on those tapes) and
//! compares the two estimates coordinate by coordinate.
//!
//! The error metric is |g_ad - g_fd| / max(1, |g_ad|, |g_fd|), so absolute
//! error governs small gradients and relative error governs large ones.

use std::collections::BTreeMap;

use crate::tape::{Tape, TapeResult, ValueId};
use crate::tensor::Tensor;

pub type ParamMap = BTreeMap<String, Tensor>;
pub type ParamIds = BTreeMap<String, ValueId>;

/// Outcome of one finite-difference comparison.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Worst-case error over every parameter coordinate.
    pub max_rel_err: f64,
    /// Parameter name and flat index attaining `max_rel_err`.
    pub worst: Option<(String, usize)>,
    /// Number of coordinates compared.
    pub coords_checked: usize,
}

impl GradCheckReport {
    pub fn within(&self, tol: f64) -> bool {
        self.max_rel_err <= tol
    }
}

fn insert_params(tape: &mut Tape, params: &ParamMap, differentiable: bool) -> ParamIds {
    params
        .iter()
        .map(|(name, t)| {
            let id = if differentiable { tape.leaf(t) } else { tape.constant(t) };
            (name.clone(), id)
        })
        .collect()
}

fn eval_value<B>(build: &B, params: &ParamMap) -> TapeResult<f64>
where
    B: Fn(&mut Tape, &ParamIds) -> TapeResult<ValueId>,
{
    let mut tape = Tape::new();
    let ids = insert_params(&mut tape, params, false);
    let root = build(&mut tape, &ids)?;
    Ok(tape.item(root))
}

/// Reverse-mode gradients of the program root for every parameter.
/// Parameters the root does not depend on get all-zero gradients.
pub fn reverse_mode_gradients<B>(
    build: &B,
    params: &ParamMap,
) -> TapeResult<(f64, BTreeMap<String, Vec<f64>>)>
where
    B: Fn(&mut Tape, &ParamIds) -> TapeResult<ValueId>,
{
    let mut tape = Tape::new();
    let ids = insert_params(&mut tape, params, true);
    let root = build(&mut tape, &ids)?;
    let value = tape.item(root);
    tape.backward(root)?;
    let grads = params
        .iter()
        .map(|(name, t)| {
            let g = tape
                .grad(ids[name])
                .map(|g| g.to_vec())
                .unwrap_or_else(|| vec![0.0; t.len()]);
            (name.clone(), g)
        })
        .collect();
    Ok((value, grads))
}

/// Compare reverse-mode gradients against central differences with step h.
pub fn finite_difference_check<B>(
    build: B,
    params: &ParamMap,
    h: f64,
) -> TapeResult<GradCheckReport>
where
    B: Fn(&mut Tape, &ParamIds) -> TapeResult<ValueId>,
{
    let (_, grads) = reverse_mode_gradients(&build, params)?;
    let mut work = params.clone();
    let mut max_rel_err = 0.0f64;
    let mut worst = None;
    let mut coords_checked = 0usize;
    let names: Vec<String> = params.keys().cloned().collect();
    for name in names {
        let len = params[&name].len();
        for i in 0..len {
            let orig = params[&name].data()[i];
            work.get_mut(&name).unwrap().data_mut()[i] = orig + h;
            let fp = eval_value(&build, &work)?;
            work.get_mut(&name).unwrap().data_mut()[i] = orig - h;
            let fm = eval_value(&build, &work)?;
            work.get_mut(&name).unwrap().data_mut()[i] = orig;
            let g_fd = (fp - fm) / (2.0 * h);
            let g_ad = grads[&name][i];
            let err = (g_ad - g_fd).abs() / 1.0f64.max(g_ad.abs()).max(g_fd.abs());
            if err > max_rel_err {
                max_rel_err = err;
                worst = Some((name.clone(), i));
            }
            coords_checked += 1;
        }
    }
    Ok(GradCheckReport { max_rel_err, worst, coords_checked })
}
