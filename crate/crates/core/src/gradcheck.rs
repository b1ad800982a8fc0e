//! Central finite-difference gradient checking.

use crate::error::Result;
use crate::nets::Parameters;
use crate::tape::{Tape, Var};

/// Finite-difference step used by [`grad_check`].
pub const FD_STEP: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Parameter name and flat index of the worst element.
    pub worst: Option<(String, usize)>,
    pub checked: usize,
    pub pass: bool,
    /// Set when the loss could not be evaluated.
    pub failure: Option<String>,
}

impl GradCheckReport {
    fn failed(msg: String) -> Self {
        GradCheckReport {
            max_rel_error: f64::INFINITY,
            worst: None,
            checked: 0,
            pass: false,
            failure: Some(msg),
        }
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

fn eval<T: Parameters + ?Sized>(target: &T, loss: &impl Fn(&T, &mut Tape) -> Result<Var>) -> Result<f64> {
    let mut tape = Tape::new();
    let l = loss(target, &mut tape)?;
    Ok(tape.value(l).item())
}

/// Compares the tape's gradient for every trainable scalar of `target`
/// against a central difference with step [`FD_STEP`].
///
/// Passes when the largest relative error, with denominator
/// `max(|analytic|, |numeric|, 1e-8)`, is below `tol`.
pub fn grad_check<T: Parameters + ?Sized>(
    target: &mut T,
    loss: impl Fn(&T, &mut Tape) -> Result<Var>,
    tol: f64,
) -> GradCheckReport {
    let grads = {
        let mut tape = Tape::new();
        match loss(target, &mut tape).and_then(|l| tape.backward(l)) {
            Ok(g) => g,
            Err(e) => return GradCheckReport::failed(e.to_string()),
        }
    };
    let names: Vec<(String, usize)> = target
        .stores()
        .iter()
        .flat_map(|s| s.iter())
        .filter(|(_, p)| !p.frozen)
        .map(|(n, p)| (n.clone(), p.value.len()))
        .collect();
    let mut max_rel: f64 = 0.0;
    let mut worst = None;
    let mut checked = 0;
    for (name, len) in names {
        let Some(analytic) = grads.param(&name).cloned() else {
            return GradCheckReport::failed(format!("{name} was never recorded on the tape"));
        };
        for i in 0..len {
            let orig = target.param_mut(&name).expect("listed").value.data()[i];
            target.param_mut(&name).expect("listed").value.data_mut()[i] = orig + FD_STEP;
            let plus = eval(target, &loss);
            target.param_mut(&name).expect("listed").value.data_mut()[i] = orig - FD_STEP;
            let minus = eval(target, &loss);
            target.param_mut(&name).expect("listed").value.data_mut()[i] = orig;
            let (plus, minus) = match (plus, minus) {
                (Ok(p), Ok(m)) => (p, m),
                (Err(e), _) | (_, Err(e)) => return GradCheckReport::failed(e.to_string()),
            };
            let numeric = (plus - minus) / (2.0 * FD_STEP);
            let rel = relative_error(analytic.data()[i], numeric);
            if rel > max_rel || worst.is_none() {
                max_rel = max_rel.max(rel);
                worst = Some((name.clone(), i));
            }
            checked += 1;
        }
    }
    GradCheckReport {
        max_rel_error: max_rel,
        worst,
        checked,
        pass: max_rel < tol,
        failure: None,
    }
}
