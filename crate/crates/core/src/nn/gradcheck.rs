use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{NnError, ParamId, ParamStore, Tape, Var};
use crate::rng;

pub const DEFAULT_GRADCHECK_STEP: f64 = 1e-5;
pub const DEFAULT_GRADCHECK_TOLERANCE: f64 = 1e-4;

// Gradients smaller than this are compared on an absolute scale. A central
// difference with h = 1e-5 on an O(1..10) loss carries about 1e-10 of
// rounding noise, so relative error is meaningless much below 1e-5.
const DENOM_FLOOR: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
    pub tolerance: f64,
    pub passed: bool,
}

/// Compares tape gradients with central finite differences.
///
/// `loss` rebuilds the scalar loss on a fresh tape. `params` limits the check
/// to some tensors (all when `None`); `max_per_param` samples that many
/// entries per tensor with a fixed seed instead of checking every one.
pub fn gradient_check<F>(
    store: &ParamStore,
    params: Option<&[ParamId]>,
    loss: F,
    step: f64,
    tolerance: f64,
    max_per_param: Option<usize>,
) -> Result<GradCheckReport, NnError>
where
    F: Fn(&mut Tape<'_>) -> Result<Var, NnError>,
{
    let eval = |s: &ParamStore| -> Result<f64, NnError> {
        let mut tape = Tape::new(s);
        let l = loss(&mut tape)?;
        Ok(tape.scalar_value(l))
    };
    let analytic = {
        let mut tape = Tape::new(store);
        let l = loss(&mut tape)?;
        tape.backward(l)?
    };

    let ids: Vec<ParamId> = match params {
        Some(p) => p.to_vec(),
        None => store.ids().collect(),
    };
    let mut sampler = rng::seeded(0x9c);
    let mut work = store.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
        tolerance,
        passed: true,
    };
    for id in ids {
        let n = store.get(id).len();
        let entries: Vec<usize> = match max_per_param {
            Some(k) if k < n => (0..k).map(|_| sampler.gen_range(0..n)).collect(),
            _ => (0..n).collect(),
        };
        for i in entries {
            let orig = store.get(id).data[i];
            work.get_mut(id).data[i] = orig + step;
            let up = eval(&work)?;
            work.get_mut(id).data[i] = orig - step;
            let down = eval(&work)?;
            work.get_mut(id).data[i] = orig;

            let numeric = (up - down) / (2.0 * step);
            let a = analytic.get(id).data[i];
            let denom = libm::fabs(a).max(libm::fabs(numeric)).max(DENOM_FLOOR);
            let err = libm::fabs(a - numeric) / denom;
            report.checked += 1;
            if !(err <= report.max_rel_error) {
                report.max_rel_error = err;
                report.worst_param = store.name(id).to_string();
                report.worst_index = i;
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    report.passed = report.max_rel_error <= tolerance;
    Ok(report)
}
