//! Central-difference gradient checking.

use crate::autodiff::tape::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Floor on the denominator of the relative error.
pub const REL_ERR_FLOOR: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// `(parameter, flat index)` of the worst entry.
    pub worst: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err <= tol
    }

    pub(crate) fn empty() -> Self {
        Self {
            max_rel_err: 0.0,
            worst: (0, 0),
            analytic: 0.0,
            numeric: 0.0,
            checked: 0,
        }
    }

    pub(crate) fn record(&mut self, param: usize, index: usize, analytic: f64, numeric: f64) {
        let err = rel_err(analytic, numeric);
        self.checked += 1;
        if self.checked == 1 || err > self.max_rel_err {
            self.max_rel_err = err;
            self.worst = (param, index);
            self.analytic = analytic;
            self.numeric = numeric;
        }
    }
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

/// Compares reverse-mode gradients of the scalar built by `f` against
/// central differences with step `h`, over every entry of every parameter.
///
/// `f` receives a fresh tape and one leaf per parameter.
pub fn grad_check<F>(params: &[Tensor], h: f64, mut f: F) -> Result<GradCheckReport>
where
    F: FnMut(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let leaves: Vec<Var> = params.iter().map(|p| tape.leaf(p.clone())).collect();
    let loss = f(&mut tape, &leaves)?;
    let grads = tape.backward(loss)?;

    let mut eval = |params: &[Tensor], which: usize, index: usize| -> Result<f64> {
        let mut tape = Tape::new();
        let leaves: Vec<Var> = params.iter().map(|p| tape.constant(p.clone())).collect();
        let out = f(&mut tape, &leaves)?;
        let v = tape.value(out).item();
        if !v.is_finite() {
            return Err(Error::GradCheck {
                name: format!("#{which}"),
                index,
                reason: format!("non-finite loss {v}"),
            });
        }
        Ok(v)
    };

    let mut report = GradCheckReport::empty();
    let mut work: Vec<Tensor> = params.to_vec();
    for (p, leaf) in leaves.iter().enumerate() {
        let n = params[p].numel();
        let analytic = grads
            .get(*leaf)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; n]);
        for (i, &a) in analytic.iter().enumerate() {
            let orig = work[p].data()[i];
            work[p].data_mut()[i] = orig + h;
            let up = eval(&work, p, i)?;
            work[p].data_mut()[i] = orig - h;
            let down = eval(&work, p, i)?;
            work[p].data_mut()[i] = orig;
            report.record(p, i, a, (up - down) / (2.0 * h));
        }
    }
    Ok(report)
}
