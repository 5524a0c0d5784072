//! Data-adaptive activation: out = p(s)*s + (1 - p(s))*alpha*s with
//! p(s) = sigmoid((s - mean) / sqrt(var + eps)), statistics per channel
//! (column). Training mode standardizes by current-batch statistics and
//! folds them into running averages; inference mode standardizes by the
//! running averages.

use serde::{Deserialize, Serialize};

use super::matrix::{sigmoid_scalar, Matrix};
use super::params::ParamStore;
use super::tape::{Tape, Var};

/// Default standardization epsilon: inert on unit-variance channels, but
/// large enough that finite-difference probes at step 1e-4 stay in the
/// locally linear regime near zero-variance channels.
pub const DICE_EPSILON: f64 = 1e-5;

/// Default momentum of the running-statistics fold.
pub const DICE_MOMENTUM: f64 = 0.99;

/// Per-channel activation state. `alpha` is the learnable negative-branch
/// slope; the running statistics are updated outside the gradient path.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DiceState {
    pub running_mean: Matrix,
    pub running_var: Matrix,
    pub alpha: Matrix,
    pub epsilon: f64,
    pub momentum: f64,
}

impl DiceState {
    /// Fresh state: zero mean, unit variance, zero slope.
    pub fn new(channels: usize, epsilon: f64) -> Self {
        assert!(epsilon > 0.0, "epsilon must be positive");
        DiceState {
            running_mean: Matrix::zeros(1, channels),
            running_var: Matrix::from_fn(1, channels, |_, _| 1.0),
            alpha: Matrix::zeros(1, channels),
            epsilon,
            momentum: 0.99,
        }
    }

    pub fn channels(&self) -> usize {
        self.running_mean.cols()
    }
}

/// Column mean and population variance of `x`.
pub fn batch_stats(x: &Matrix) -> (Matrix, Matrix) {
    let n = x.rows() as f64;
    let mean = x.col_sums().scale(1.0 / n);
    let mut var = Matrix::zeros(1, x.cols());
    for i in 0..x.rows() {
        for j in 0..x.cols() {
            let c = x.get(i, j) - mean.get(0, j);
            var.set(0, j, var.get(0, j) + c * c);
        }
    }
    (mean, var.scale(1.0 / n))
}

/// Plain (non-tape) evaluation. Training mode uses batch statistics and
/// advances the running averages in `state`.
pub fn dice(x: &Matrix, state: &mut DiceState, training: bool) -> Matrix {
    assert_eq!(x.cols(), state.channels(), "channel count mismatch");
    let (mean, var) = if training {
        let (m, v) = batch_stats(x);
        let mom = state.momentum;
        state.running_mean = state.running_mean.scale(mom).add(&m.scale(1.0 - mom)).unwrap();
        state.running_var = state.running_var.scale(mom).add(&v.scale(1.0 - mom)).unwrap();
        (m, v)
    } else {
        (state.running_mean.clone(), state.running_var.clone())
    };
    Matrix::from_fn(x.rows(), x.cols(), |i, j| {
        let s = x.get(i, j);
        let p = sigmoid_scalar((s - mean.get(0, j)) / (var.get(0, j) + state.epsilon).sqrt());
        p * s + (1.0 - p) * state.alpha.get(0, j) * s
    })
}

/// Tape node bundle produced by [`dice_tape`]. In training mode the batch
/// statistics are exposed so the caller can fold them into running state
/// after the step.
pub struct DiceTape {
    pub out: Var,
    pub batch_mean: Option<Var>,
    pub batch_var: Option<Var>,
}

/// Tape composition of the activation. `alpha` is a 1xC node (trainable or
/// frozen); `eval_stats` supplies (mean, var) nodes for inference mode, and
/// `None` selects differentiable batch statistics.
pub fn dice_tape(
    tape: &mut Tape,
    x: Var,
    alpha: Var,
    eval_stats: Option<(Var, Var)>,
    epsilon: f64,
) -> DiceTape {
    let rows = tape.value(x).rows();
    let (mean, var, batch) = match eval_stats {
        Some((m, v)) => (m, v, None),
        None => {
            let n = rows as f64;
            let sums = tape.col_sum(x);
            let mean = tape.scale(sums, 1.0 / n);
            let mean_rep = tape.repeat_rows(mean, rows);
            let centered = tape.sub(x, mean_rep);
            let sq = tape.mul(centered, centered);
            let sq_sums = tape.col_sum(sq);
            let var = tape.scale(sq_sums, 1.0 / n);
            (mean, var, Some((mean, var)))
        }
    };
    let mean_rep = tape.repeat_rows(mean, rows);
    let centered = tape.sub(x, mean_rep);
    let var_eps = tape.add_const(var, epsilon);
    let inv_std = tape.pow_const(var_eps, -0.5);
    let inv_rep = tape.repeat_rows(inv_std, rows);
    let z = tape.mul(centered, inv_rep);
    let p = tape.sigmoid(z);
    let ps = tape.mul(p, x);
    let neg_p = tape.scale(p, -1.0);
    let one_minus_p = tape.add_const(neg_p, 1.0);
    let alpha_rep = tape.repeat_rows(alpha, rows);
    let scaled = tape.mul(one_minus_p, alpha_rep);
    let alt = tape.mul(scaled, x);
    let out = tape.add(ps, alt);
    DiceTape { out, batch_mean: batch.map(|(m, _)| m), batch_var: batch.map(|(_, v)| v) }
}

/// Pending running-statistics fold for one activation site. The batch
/// statistics live on a tape; the running averages live in a parameter store
/// under the two names (kept non-trainable by the training schedule).
pub struct DiceUpdate {
    pub mean_name: String,
    pub var_name: String,
    pub mean: Var,
    pub var: Var,
}

/// Advances running statistics after a training step, outside the gradient
/// path: running <- momentum * running + (1 - momentum) * batch.
pub fn fold_running_stats(
    tape: &Tape,
    updates: &[DiceUpdate],
    store: &mut ParamStore,
    momentum: f64,
) {
    for u in updates {
        for (name, batch) in [(&u.mean_name, u.mean), (&u.var_name, u.var)] {
            let folded = store
                .get(name)
                .scale(momentum)
                .add(&tape.value(batch).scale(1.0 - momentum))
                .expect("running statistic and batch statistic shapes match");
            store.set(name, folded);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_input_with_zero_mean_maps_to_zero() {
        let mut state = DiceState::new(1, 1e-8);
        let out = dice(&Matrix::zeros(3, 1), &mut state, false);
        assert_eq!(out, Matrix::zeros(3, 1));
    }

    #[test]
    fn alpha_one_is_identity() {
        let mut state = DiceState::new(2, 1e-8);
        state.alpha = Matrix::from_rows(&[&[1.0, 1.0]]);
        let x = Matrix::from_rows(&[&[-3.0, 0.5], &[2.0, -0.25]]);
        let out = dice(&x, &mut state, false);
        assert!(out.max_abs_diff(&x) < 1e-15);
    }

    #[test]
    fn scalar_case_matches_reference_sigmoid() {
        // s = 1, mean 0, var 1, eps = 0, alpha = 0 -> sigmoid(1) * 1.
        let mut state = DiceState {
            running_mean: Matrix::zeros(1, 1),
            running_var: Matrix::from_rows(&[&[1.0]]),
            alpha: Matrix::zeros(1, 1),
            epsilon: 0.0,
            momentum: 0.99,
        };
        let out = dice(&Matrix::from_rows(&[&[1.0]]), &mut state, false);
        assert!((out.get(0, 0) - 0.73105857863000487925).abs() < 1e-15);
    }

    #[test]
    fn training_updates_running_stats_with_momentum() {
        let mut state = DiceState::new(1, 1e-8);
        let x = Matrix::from_rows(&[&[1.0], &[3.0]]);
        let _ = dice(&x, &mut state, true);
        // batch mean 2, batch var 1: running = 0.99 * old + 0.01 * batch.
        assert!((state.running_mean.get(0, 0) - 0.02).abs() < 1e-15);
        assert!((state.running_var.get(0, 0) - 1.0).abs() < 1e-15);
        let _ = dice(&x, &mut state, false);
        assert!((state.running_mean.get(0, 0) - 0.02).abs() < 1e-15);
    }

    #[test]
    fn tape_version_matches_plain_version() {
        let x = Matrix::from_rows(&[&[0.3, -1.2], &[2.0, 0.7], &[-0.5, 0.1]]);
        let alpha = Matrix::from_rows(&[&[0.2, -0.4]]);

        let mut state = DiceState::new(2, 1e-8);
        state.alpha = alpha.clone();
        let plain_train = dice(&x, &mut state.clone(), true);
        let plain_eval = dice(&x, &mut state, false);

        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let av = tape.constant(alpha.clone());
        let train = dice_tape(&mut tape, xv, av, None, 1e-8);
        assert!(tape.value(train.out).max_abs_diff(&plain_train) < 1e-14);

        let mv = tape.constant(state.running_mean.clone());
        let vv = tape.constant(state.running_var.clone());
        let eval = dice_tape(&mut tape, xv, av, Some((mv, vv)), 1e-8);
        assert!(tape.value(eval.out).max_abs_diff(&plain_eval) < 1e-14);
        assert!(eval.batch_mean.is_none());
    }

    #[test]
    fn fold_moves_running_stats_by_momentum() {
        let mut store = ParamStore::new();
        store.insert("net/dice_mean", Matrix::zeros(1, 2)).unwrap();
        store.insert("net/dice_var", Matrix::from_rows(&[&[1.0, 1.0]])).unwrap();

        let mut tape = Tape::new();
        let mean = tape.constant(Matrix::from_rows(&[&[2.0, 4.0]]));
        let var = tape.constant(Matrix::from_rows(&[&[3.0, 5.0]]));
        let updates = [DiceUpdate {
            mean_name: "net/dice_mean".into(),
            var_name: "net/dice_var".into(),
            mean,
            var,
        }];
        fold_running_stats(&tape, &updates, &mut store, 0.99);

        assert!((store.get("net/dice_mean").get(0, 0) - 0.02).abs() < 1e-15);
        assert!((store.get("net/dice_mean").get(0, 1) - 0.04).abs() < 1e-15);
        assert!((store.get("net/dice_var").get(0, 0) - (0.99 + 0.03)).abs() < 1e-15);
        assert!((store.get("net/dice_var").get(0, 1) - (0.99 + 0.05)).abs() < 1e-15);
    }
}
