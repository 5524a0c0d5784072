//! Central finite-difference verification of reverse-mode gradients.

use super::matrix::Matrix;
use super::params::ParamStore;
use super::tape::{Tape, Var};

/// Default perturbation step.
pub const STEP: f64 = 1e-4;
/// Default relative tolerance.
pub const RTOL: f64 = 1e-4;
/// Absolute floor covering coordinates whose true gradient is near zero,
/// where the relative criterion degenerates; sized to sit above central
/// difference truncation error at O(1) loss scale.
pub const ATOL: f64 = 1e-7;

/// One failed coordinate.
#[derive(Debug, Clone)]
pub struct GradMismatch {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Default)]
pub struct GradCheckReport {
    pub checked: usize,
    pub worst_abs_gap: f64,
    pub mismatches: Vec<GradMismatch>,
}

impl GradCheckReport {
    pub fn ok(&self) -> bool {
        self.mismatches.is_empty()
    }
}

fn agrees(analytic: f64, numeric: f64, rtol: f64, atol: f64) -> bool {
    (analytic - numeric).abs() <= rtol * analytic.abs().max(numeric.abs()) + atol
}

/// Compares the gradients already accumulated in `store` against central
/// differences of `loss` for every coordinate of `names` (or an
/// evenly-strided subset of at most `max_coords_per_param` when nonzero).
/// `loss` must be a pure function of the store contents.
pub fn finite_difference_check(
    store: &mut ParamStore,
    names: &[&str],
    mut loss: impl FnMut(&ParamStore) -> f64,
    step: f64,
    rtol: f64,
    atol: f64,
    max_coords_per_param: usize,
) -> GradCheckReport {
    let mut report = GradCheckReport::default();
    for &name in names {
        let n = store.get(name).data().len();
        let stride = if max_coords_per_param == 0 || n <= max_coords_per_param {
            1
        } else {
            n.div_ceil(max_coords_per_param)
        };
        for idx in (0..n).step_by(stride) {
            let original = store.get(name).data()[idx];

            let mut bumped = store.get(name).clone();
            bumped.data_mut()[idx] = original + step;
            store.set(name, bumped);
            let plus = loss(store);

            let mut bumped = store.get(name).clone();
            bumped.data_mut()[idx] = original - step;
            store.set(name, bumped);
            let minus = loss(store);

            let mut restored = store.get(name).clone();
            restored.data_mut()[idx] = original;
            store.set(name, restored);

            let numeric = (plus - minus) / (2.0 * step);
            let analytic = store.grad(name).data()[idx];
            report.checked += 1;
            report.worst_abs_gap = report.worst_abs_gap.max((analytic - numeric).abs());
            if !agrees(analytic, numeric, rtol, atol) {
                report.mismatches.push(GradMismatch {
                    param: name.to_string(),
                    index: idx,
                    analytic,
                    numeric,
                });
            }
        }
    }
    report
}

/// Checks d(sum(build(x)))/dx for a single tape composition at input `x`.
/// Used by the per-operation test battery.
pub fn check_composition(build: impl Fn(&mut Tape, Var) -> Var, x: &Matrix) -> GradCheckReport {
    let mut store = ParamStore::new();
    store.insert("x", x.clone()).unwrap();

    let eval = |s: &ParamStore| -> f64 {
        let mut tape = Tape::new();
        let xv = tape.leaf(s.get("x").clone());
        let y = build(&mut tape, xv);
        let loss = tape.sum_all(y);
        tape.value(loss).scalar()
    };

    let mut tape = Tape::new();
    let xv = tape.param(&store, "x");
    let y = build(&mut tape, xv);
    let loss = tape.sum_all(y);
    let grads = tape.backward(loss);
    tape.write_grads(&grads, &mut store);

    finite_difference_check(&mut store, &["x"], eval, STEP, RTOL, ATOL, 0)
}
