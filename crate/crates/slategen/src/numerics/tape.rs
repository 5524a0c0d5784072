//! Reverse-mode autodiff over a recorded operation tape.
//!
//! Each operation evaluates eagerly and records enough to run the backward
//! sweep. The operation set is closed: models compose exactly these nodes,
//! so everything a loss can be built from has a matching adjoint rule.
//! Shape violations inside the tape are programmer errors and panic with
//! the offending shapes; public module entry points validate their inputs
//! before building a tape.
//!
//! Gradients only flow into leaves registered with [`Tape::param`] (or
//! [`Tape::leaf`]); matrices entering via [`Tape::constant`] are treated as
//! fixed data, which is how phase-specific freezing is enforced: a frozen
//! subnetwork is evaluated with its parameters registered as constants, so
//! its gradient slots provably stay zero.

use indexmap::IndexMap;

use super::matrix::Matrix;
use super::params::ParamStore;

/// Handle to a tape node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// How a stored parameter enters a tape: as a gradient-receiving leaf or as
/// fixed data. Phase-specific freezing registers frozen subnetworks as
/// [`ParamMode::Frozen`], which keeps their gradient slots exactly zero.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamMode {
    Trainable,
    Frozen,
}

#[derive(Debug, Clone)]
enum Node {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// Elementwise product with a 1x1 node broadcast to the left shape.
    MulScalarVar(Var, Var),
    Scale(Var, f64),
    AddConst(Var),
    Transpose(Var),
    Sigmoid(Var),
    Exp(Var),
    Ln(Var),
    PowConst(Var, f64),
    Clamp(Var, f64, f64),
    RowSoftmax(Var),
    RowSum(Var),
    ColSum(Var),
    SumAll(Var),
    ConcatCols(Var, Var),
    SliceCols(Var, usize, usize),
    GatherRows(Var, Vec<Option<usize>>),
    GatherElems(Var, Vec<(usize, usize)>),
    RepeatRows(Var),
    RepeatCols(Var),
    /// Columns scaled to sum to 1; all-zero columns stay zero.
    ColNormalize(Var),
}

pub struct Tape {
    nodes: Vec<Node>,
    values: Vec<Matrix>,
    needs_grad: Vec<bool>,
    named: IndexMap<String, Var>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), values: Vec::new(), needs_grad: Vec::new(), named: IndexMap::new() }
    }

    fn push(&mut self, node: Node, value: Matrix, needs_grad: bool) -> Var {
        self.nodes.push(node);
        self.values.push(value);
        self.needs_grad.push(needs_grad);
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.values[v.0]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Fixed input; gradients never flow into it.
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(Node::Leaf, value, false)
    }

    /// Anonymous differentiable leaf.
    pub fn leaf(&mut self, value: Matrix) -> Var {
        self.push(Node::Leaf, value, true)
    }

    /// Differentiable leaf bound to `store[name]`. Registering the same
    /// name twice returns the original node so gradient paths accumulate.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Var {
        if let Some(&v) = self.named.get(name) {
            return v;
        }
        let v = self.push(Node::Leaf, store.get(name).clone(), true);
        self.named.insert(name.to_string(), v);
        v
    }

    /// `store[name]` as a non-differentiable input (frozen parameter).
    pub fn frozen(&mut self, store: &ParamStore, name: &str) -> Var {
        self.constant(store.get(name).clone())
    }

    /// Registers `store[name]` according to `mode`.
    pub fn leaf_mode(&mut self, store: &ParamStore, name: &str, mode: ParamMode) -> Var {
        match mode {
            ParamMode::Trainable => self.param(store, name),
            ParamMode::Frozen => self.frozen(store, name),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.values[a.0]
            .matmul(&self.values[b.0])
            .unwrap_or_else(|e| panic!("tape matmul: {e}"));
        let ng = self.needs_grad[a.0] || self.needs_grad[b.0];
        self.push(Node::MatMul(a, b), value, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.values[a.0]
            .add(&self.values[b.0])
            .unwrap_or_else(|e| panic!("tape add: {e}"));
        let ng = self.needs_grad[a.0] || self.needs_grad[b.0];
        self.push(Node::Add(a, b), value, ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.values[a.0]
            .sub(&self.values[b.0])
            .unwrap_or_else(|e| panic!("tape sub: {e}"));
        let ng = self.needs_grad[a.0] || self.needs_grad[b.0];
        self.push(Node::Sub(a, b), value, ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.values[a.0]
            .mul_elem(&self.values[b.0])
            .unwrap_or_else(|e| panic!("tape mul: {e}"));
        let ng = self.needs_grad[a.0] || self.needs_grad[b.0];
        self.push(Node::Mul(a, b), value, ng)
    }

    /// `a * s` with `s` a 1x1 node broadcast over all entries of `a`.
    pub fn mul_scalar_var(&mut self, a: Var, s: Var) -> Var {
        assert_eq!(
            (self.values[s.0].rows(), self.values[s.0].cols()),
            (1, 1),
            "mul_scalar_var expects a 1x1 scalar node"
        );
        let c = self.values[s.0].scalar();
        let value = self.values[a.0].scale(c);
        let ng = self.needs_grad[a.0] || self.needs_grad[s.0];
        self.push(Node::MulScalarVar(a, s), value, ng)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.values[a.0].scale(c);
        let ng = self.needs_grad[a.0];
        self.push(Node::Scale(a, c), value, ng)
    }

    pub fn add_const(&mut self, a: Var, c: f64) -> Var {
        let value = self.values[a.0].map(|v| v + c);
        let ng = self.needs_grad[a.0];
        self.push(Node::AddConst(a), value, ng)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.values[a.0].transpose();
        let ng = self.needs_grad[a.0];
        self.push(Node::Transpose(a), value, ng)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.values[a.0].map(super::matrix::sigmoid_scalar);
        let ng = self.needs_grad[a.0];
        self.push(Node::Sigmoid(a), value, ng)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.values[a.0].map(f64::exp);
        let ng = self.needs_grad[a.0];
        self.push(Node::Exp(a), value, ng)
    }

    /// Natural log; caller guarantees positive entries.
    pub fn ln(&mut self, a: Var) -> Var {
        let value = self.values[a.0].map(f64::ln);
        assert!(value.is_finite(), "ln of a non-positive entry");
        let ng = self.needs_grad[a.0];
        self.push(Node::Ln(a), value, ng)
    }

    /// Entrywise power with constant exponent; for non-integer exponents the
    /// caller guarantees positive entries.
    pub fn pow_const(&mut self, a: Var, p: f64) -> Var {
        let value = self.values[a.0].map(|v| v.powf(p));
        assert!(value.is_finite(), "pow_const produced a non-finite entry");
        let ng = self.needs_grad[a.0];
        self.push(Node::PowConst(a, p), value, ng)
    }

    /// Clamp to [lo, hi]; gradient passes only strictly inside the band.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let value = self.values[a.0].map(|v| v.clamp(lo, hi));
        let ng = self.needs_grad[a.0];
        self.push(Node::Clamp(a, lo, hi), value, ng)
    }

    pub fn row_softmax(&mut self, a: Var) -> Var {
        let value = self.values[a.0].row_softmax();
        let ng = self.needs_grad[a.0];
        self.push(Node::RowSoftmax(a), value, ng)
    }

    pub fn row_sum(&mut self, a: Var) -> Var {
        let value = self.values[a.0].row_sums();
        let ng = self.needs_grad[a.0];
        self.push(Node::RowSum(a), value, ng)
    }

    pub fn col_sum(&mut self, a: Var) -> Var {
        let value = self.values[a.0].col_sums();
        let ng = self.needs_grad[a.0];
        self.push(Node::ColSum(a), value, ng)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let value = Matrix::from_vec(1, 1, vec![self.values[a.0].sum()]).unwrap();
        let ng = self.needs_grad[a.0];
        self.push(Node::SumAll(a), value, ng)
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = (self.values[a.0].rows() * self.values[a.0].cols()) as f64;
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n)
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        let (ma, mb) = (&self.values[a.0], &self.values[b.0]);
        assert_eq!(ma.rows(), mb.rows(), "concat_cols row mismatch");
        let mut value = Matrix::zeros(ma.rows(), ma.cols() + mb.cols());
        for i in 0..ma.rows() {
            value.row_mut(i)[..ma.cols()].copy_from_slice(ma.row(i));
            value.row_mut(i)[ma.cols()..].copy_from_slice(mb.row(i));
        }
        let ng = self.needs_grad[a.0] || self.needs_grad[b.0];
        self.push(Node::ConcatCols(a, b), value, ng)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let m = &self.values[a.0];
        assert!(start + len <= m.cols(), "slice_cols out of range");
        let value = Matrix::from_fn(m.rows(), len, |i, j| m.get(i, start + j));
        let ng = self.needs_grad[a.0];
        self.push(Node::SliceCols(a, start, len), value, ng)
    }

    /// Row `r` of the output is row `idx[r]` of the input, or zeros for
    /// `None` (reserved-null lookups). Backward scatter-adds.
    pub fn gather_rows(&mut self, a: Var, idx: &[Option<usize>]) -> Var {
        let m = &self.values[a.0];
        let mut value = Matrix::zeros(idx.len(), m.cols());
        for (r, slot) in idx.iter().enumerate() {
            if let Some(i) = slot {
                assert!(*i < m.rows(), "gather_rows index out of range");
                value.row_mut(r).copy_from_slice(m.row(*i));
            }
        }
        let ng = self.needs_grad[a.0];
        self.push(Node::GatherRows(a, idx.to_vec()), value, ng)
    }

    /// Column vector of picked entries `a[r, c]` in the given order.
    pub fn gather_elems(&mut self, a: Var, picks: &[(usize, usize)]) -> Var {
        let m = &self.values[a.0];
        let mut value = Matrix::zeros(picks.len(), 1);
        for (k, &(r, c)) in picks.iter().enumerate() {
            value.set(k, 0, m.get(r, c));
        }
        let ng = self.needs_grad[a.0];
        self.push(Node::GatherElems(a, picks.to_vec()), value, ng)
    }

    /// Broadcast a 1xM row to n rows.
    pub fn repeat_rows(&mut self, a: Var, n: usize) -> Var {
        let m = &self.values[a.0];
        assert_eq!(m.rows(), 1, "repeat_rows expects a 1xM input");
        let value = Matrix::from_fn(n, m.cols(), |_, j| m.get(0, j));
        let ng = self.needs_grad[a.0];
        self.push(Node::RepeatRows(a), value, ng)
    }

    /// Broadcast an Nx1 column to m columns.
    pub fn repeat_cols(&mut self, a: Var, m_cols: usize) -> Var {
        let m = &self.values[a.0];
        assert_eq!(m.cols(), 1, "repeat_cols expects an Nx1 input");
        let value = Matrix::from_fn(m.rows(), m_cols, |i, _| m.get(i, 0));
        let ng = self.needs_grad[a.0];
        self.push(Node::RepeatCols(a), value, ng)
    }

    /// Scale each column to sum to 1; columns summing to 0 are left zero.
    pub fn col_normalize(&mut self, a: Var) -> Var {
        let m = &self.values[a.0];
        let sums = m.col_sums();
        let value = Matrix::from_fn(m.rows(), m.cols(), |i, j| {
            let s = sums.get(0, j);
            if s == 0.0 {
                0.0
            } else {
                m.get(i, j) / s
            }
        });
        let ng = self.needs_grad[a.0];
        self.push(Node::ColNormalize(a), value, ng)
    }

    /// Reverse sweep from a 1x1 loss node. Returns per-node adjoints; use
    /// [`Tape::write_grads`] to move named-parameter gradients into a store.
    pub fn backward(&mut self, loss: Var) -> Gradients {
        assert_eq!(
            (self.values[loss.0].rows(), self.values[loss.0].cols()),
            (1, 1),
            "backward expects a scalar loss"
        );
        let mut grads: Vec<Option<Matrix>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Matrix::from_vec(1, 1, vec![1.0]).unwrap());

        for id in (0..self.nodes.len()).rev() {
            if !self.needs_grad[id] {
                grads[id] = None;
                continue;
            }
            let g = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            self.propagate(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        Gradients { grads }
    }

    fn accumulate(&self, grads: &mut [Option<Matrix>], target: Var, delta: Matrix) {
        if !self.needs_grad[target.0] {
            return;
        }
        match &mut grads[target.0] {
            Some(existing) => {
                *existing = existing.add(&delta).expect("adjoint shape mismatch");
            }
            slot @ None => *slot = Some(delta),
        }
    }

    fn propagate(&self, id: usize, g: &Matrix, grads: &mut [Option<Matrix>]) {
        match &self.nodes[id] {
            Node::Leaf => {}
            Node::MatMul(a, b) => {
                if self.needs_grad[a.0] {
                    let bt = self.values[b.0].transpose();
                    self.accumulate(grads, *a, g.matmul(&bt).unwrap());
                }
                if self.needs_grad[b.0] {
                    let at = self.values[a.0].transpose();
                    self.accumulate(grads, *b, at.matmul(g).unwrap());
                }
            }
            Node::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Node::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.scale(-1.0));
            }
            Node::Mul(a, b) => {
                if self.needs_grad[a.0] {
                    self.accumulate(grads, *a, g.mul_elem(&self.values[b.0]).unwrap());
                }
                if self.needs_grad[b.0] {
                    self.accumulate(grads, *b, g.mul_elem(&self.values[a.0]).unwrap());
                }
            }
            Node::MulScalarVar(a, s) => {
                let c = self.values[s.0].scalar();
                if self.needs_grad[a.0] {
                    self.accumulate(grads, *a, g.scale(c));
                }
                if self.needs_grad[s.0] {
                    let dot = g.mul_elem(&self.values[a.0]).unwrap().sum();
                    self.accumulate(grads, *s, Matrix::from_vec(1, 1, vec![dot]).unwrap());
                }
            }
            Node::Scale(a, c) => self.accumulate(grads, *a, g.scale(*c)),
            Node::AddConst(a) => self.accumulate(grads, *a, g.clone()),
            Node::Transpose(a) => self.accumulate(grads, *a, g.transpose()),
            Node::Sigmoid(a) => {
                let y = &self.values[id];
                let dy = y.map(|v| v * (1.0 - v));
                self.accumulate(grads, *a, g.mul_elem(&dy).unwrap());
            }
            Node::Exp(a) => {
                self.accumulate(grads, *a, g.mul_elem(&self.values[id]).unwrap());
            }
            Node::Ln(a) => {
                let inv = self.values[a.0].map(|v| 1.0 / v);
                self.accumulate(grads, *a, g.mul_elem(&inv).unwrap());
            }
            Node::PowConst(a, p) => {
                let da = self.values[a.0].map(|v| p * v.powf(p - 1.0));
                self.accumulate(grads, *a, g.mul_elem(&da).unwrap());
            }
            Node::Clamp(a, lo, hi) => {
                let x = &self.values[a.0];
                let mask = x.map(|v| if v > *lo && v < *hi { 1.0 } else { 0.0 });
                self.accumulate(grads, *a, g.mul_elem(&mask).unwrap());
            }
            Node::RowSoftmax(a) => {
                let y = &self.values[id];
                let mut out = Matrix::zeros(y.rows(), y.cols());
                for i in 0..y.rows() {
                    let dot: f64 = g.row(i).iter().zip(y.row(i)).map(|(&gi, &yi)| gi * yi).sum();
                    for j in 0..y.cols() {
                        out.set(i, j, y.get(i, j) * (g.get(i, j) - dot));
                    }
                }
                self.accumulate(grads, *a, out);
            }
            Node::RowSum(a) => {
                let src = &self.values[a.0];
                let out = Matrix::from_fn(src.rows(), src.cols(), |i, _| g.get(i, 0));
                self.accumulate(grads, *a, out);
            }
            Node::ColSum(a) => {
                let src = &self.values[a.0];
                let out = Matrix::from_fn(src.rows(), src.cols(), |_, j| g.get(0, j));
                self.accumulate(grads, *a, out);
            }
            Node::SumAll(a) => {
                let src = &self.values[a.0];
                let c = g.scalar();
                self.accumulate(grads, *a, Matrix::from_fn(src.rows(), src.cols(), |_, _| c));
            }
            Node::ConcatCols(a, b) => {
                let ca = self.values[a.0].cols();
                let cb = self.values[b.0].cols();
                if self.needs_grad[a.0] {
                    let ga = Matrix::from_fn(g.rows(), ca, |i, j| g.get(i, j));
                    self.accumulate(grads, *a, ga);
                }
                if self.needs_grad[b.0] {
                    let gb = Matrix::from_fn(g.rows(), cb, |i, j| g.get(i, ca + j));
                    self.accumulate(grads, *b, gb);
                }
            }
            Node::SliceCols(a, start, len) => {
                let src = &self.values[a.0];
                let mut out = Matrix::zeros(src.rows(), src.cols());
                for i in 0..g.rows() {
                    for j in 0..*len {
                        out.set(i, start + j, g.get(i, j));
                    }
                }
                self.accumulate(grads, *a, out);
            }
            Node::GatherRows(a, idx) => {
                let src = &self.values[a.0];
                let mut out = Matrix::zeros(src.rows(), src.cols());
                for (r, slot) in idx.iter().enumerate() {
                    if let Some(i) = slot {
                        for j in 0..src.cols() {
                            out.set(*i, j, out.get(*i, j) + g.get(r, j));
                        }
                    }
                }
                self.accumulate(grads, *a, out);
            }
            Node::GatherElems(a, picks) => {
                let src = &self.values[a.0];
                let mut out = Matrix::zeros(src.rows(), src.cols());
                for (k, &(r, c)) in picks.iter().enumerate() {
                    out.set(r, c, out.get(r, c) + g.get(k, 0));
                }
                self.accumulate(grads, *a, out);
            }
            Node::RepeatRows(a) => self.accumulate(grads, *a, g.col_sums()),
            Node::RepeatCols(a) => self.accumulate(grads, *a, g.row_sums()),
            Node::ColNormalize(a) => {
                // For column c with sum s != 0 and outputs y_i = x_i / s:
                // dx_j = g_j / s - (sum_i g_i y_i) / s. A zero-sum column is
                // a kink; the zero subgradient is used there.
                let x = &self.values[a.0];
                let y = &self.values[id];
                let sums = x.col_sums();
                let mut out = Matrix::zeros(x.rows(), x.cols());
                for j in 0..x.cols() {
                    let s = sums.get(0, j);
                    if s == 0.0 {
                        continue;
                    }
                    let mut dot = 0.0;
                    for i in 0..x.rows() {
                        dot += g.get(i, j) * y.get(i, j);
                    }
                    for i in 0..x.rows() {
                        out.set(i, j, (g.get(i, j) - dot) / s);
                    }
                }
                self.accumulate(grads, *a, out);
            }
        }
    }

    /// Accumulates the gradients of all named parameters into `store`.
    pub fn write_grads(&self, gradients: &Gradients, store: &mut ParamStore) {
        for (name, var) in &self.named {
            if let Some(g) = gradients.get(*var) {
                store.accumulate_grad(name, g);
            }
        }
    }
}

/// Adjoints produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.grads[v.0].as_ref()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_loss_gradient_is_broadcast_of_input() {
        // loss = sum(W x) with x fixed -> dW[i][j] = x[j]
        let mut store = ParamStore::new();
        store.insert("w", Matrix::from_rows(&[&[0.3, -0.7], &[1.5, 0.25]])).unwrap();
        let x = Matrix::from_rows(&[&[2.0], &[5.0]]);

        let mut tape = Tape::new();
        let w = tape.param(&store, "w");
        let xv = tape.constant(x);
        let y = tape.matmul(w, xv);
        let loss = tape.sum_all(y);
        let grads = tape.backward(loss);
        tape.write_grads(&grads, &mut store);

        assert_eq!(store.grad("w"), &Matrix::from_rows(&[&[2.0, 5.0], &[2.0, 5.0]]));
    }

    #[test]
    fn sigmoid_bce_gradient_at_logit_zero() {
        // loss = -ln(sigmoid(z)) at z = 0, label 1 -> dz = -0.5
        let mut tape = Tape::new();
        let z = tape.leaf(Matrix::from_vec(1, 1, vec![0.0]).unwrap());
        let p = tape.sigmoid(z);
        let lp = tape.ln(p);
        let loss = tape.scale(lp, -1.0);
        let grads = tape.backward(loss);
        let dz = grads.get(z).unwrap().scalar();
        assert!((dz - (-0.5)).abs() < 1e-15);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut tape = Tape::new();
        let a = tape.leaf(Matrix::from_rows(&[&[1.0, 2.0]]));
        let c = tape.constant(Matrix::from_rows(&[&[3.0], &[4.0]]));
        let y = tape.matmul(a, c);
        let loss = tape.sum_all(y);
        let grads = tape.backward(loss);
        assert!(grads.get(c).is_none());
        assert!(grads.get(a).is_some());
    }

    #[test]
    fn shared_param_accumulates_both_paths() {
        // loss = sum(w) + sum(2 w) -> dw = 3
        let mut store = ParamStore::new();
        store.insert("w", Matrix::from_rows(&[&[1.0, 1.0]])).unwrap();
        let mut tape = Tape::new();
        let w1 = tape.param(&store, "w");
        let w2 = tape.param(&store, "w");
        assert_eq!(w1, w2);
        let s1 = tape.sum_all(w1);
        let doubled = tape.scale(w2, 2.0);
        let s2 = tape.sum_all(doubled);
        let loss = tape.add(s1, s2);
        let grads = tape.backward(loss);
        tape.write_grads(&grads, &mut store);
        assert_eq!(store.grad("w"), &Matrix::from_rows(&[&[3.0, 3.0]]));
    }

    #[test]
    fn gather_rows_none_yields_zero_row_and_no_gradient_to_source() {
        let mut tape = Tape::new();
        let a = tape.leaf(Matrix::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]));
        let picked = tape.gather_rows(a, &[Some(1), None, Some(1)]);
        assert_eq!(tape.value(picked).row(1), &[0.0, 0.0]);
        let loss = tape.sum_all(picked);
        let grads = tape.backward(loss);
        // Row 1 gathered twice, row 0 never.
        assert_eq!(grads.get(a).unwrap(), &Matrix::from_rows(&[&[0.0, 0.0], &[2.0, 2.0]]));
    }

    #[test]
    fn col_normalize_columns_sum_to_one() {
        let mut tape = Tape::new();
        let a = tape.constant(Matrix::from_rows(&[&[1.0, 0.0], &[3.0, 0.0]]));
        let n = tape.col_normalize(a);
        let v = tape.value(n);
        assert!((v.get(0, 0) - 0.25).abs() < 1e-15);
        assert!((v.get(1, 0) - 0.75).abs() < 1e-15);
        // All-zero column stays zero.
        assert_eq!(v.get(0, 1), 0.0);
        assert_eq!(v.get(1, 1), 0.0);
    }
}
