//! Central finite-difference verification of tape gradients.

use crate::error::{IhanError, Result};
use crate::tape::{ParamStore, Tape, Var};

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub coordinates: usize,
    pub worst: Option<Coordinate>,
}

/// The coordinate with the largest relative error.
#[derive(Debug, Clone, PartialEq)]
pub struct Coordinate {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

/// Compares the tape gradient of `f` with `(f(p+h) - f(p-h)) / 2h` at every coordinate
/// of every parameter in `params`.
///
/// The relative error uses `max(|analytic|, |numeric|, 1e-8)` as denominator.
pub fn grad_check<F>(params: &ParamStore, h: f64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<'_>) -> Result<Var>,
{
    let coords = coordinates(params, h, f)?;
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        coordinates: coords.len(),
        worst: None,
    };
    for c in coords {
        let rel = c.rel_error();
        if rel >= report.max_rel_error {
            report.max_rel_error = rel;
            report.worst = Some(c);
        }
    }
    Ok(report)
}

/// Analytic and numeric derivative for every coordinate, in parameter order.
pub fn coordinates<F>(params: &ParamStore, h: f64, f: F) -> Result<Vec<Coordinate>>
where
    F: Fn(&mut Tape<'_>) -> Result<Var>,
{
    if !(1e-6..=1e-4).contains(&h) {
        return Err(IhanError::Config(format!(
            "finite-difference step {h} outside [1e-6, 1e-4]"
        )));
    }
    let eval = |store: &ParamStore| -> Result<f64> {
        let mut tape = Tape::new(store);
        let out = f(&mut tape)?;
        let v = tape.value(out);
        if v.shape() != (1, 1) {
            return Err(IhanError::dim("grad_check objective", v.shape(), (1, 1)));
        }
        let v = v.item();
        if !v.is_finite() {
            return Err(IhanError::Evaluation(format!("objective evaluated to {v}")));
        }
        Ok(v)
    };

    let analytic = {
        let mut tape = Tape::new(params);
        let out = f(&mut tape)?;
        tape.backward(out)?
    };
    eval(params)?;

    let mut work = params.clone();
    let mut out = Vec::new();
    for id in params.ids() {
        for k in 0..params.get(id).len() {
            let orig = params.get(id).data()[k];
            work.get_mut(id).data_mut()[k] = orig + h;
            let up = eval(&work)?;
            work.get_mut(id).data_mut()[k] = orig - h;
            let down = eval(&work)?;
            work.get_mut(id).data_mut()[k] = orig;
            out.push(Coordinate {
                param: params.name(id).to_string(),
                index: k,
                analytic: analytic.get(id).data()[k],
                numeric: (up - down) / (2.0 * h),
            });
        }
    }
    Ok(out)
}

impl Coordinate {
    pub fn abs_error(&self) -> f64 {
        (self.analytic - self.numeric).abs()
    }

    pub fn rel_error(&self) -> f64 {
        let denom = self.analytic.abs().max(self.numeric.abs()).max(1e-8);
        self.abs_error() / denom
    }
}
