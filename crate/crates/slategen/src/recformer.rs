//! Stacked cluster-attention encoder over the candidate set and the user
//! behavior sequence, with interleaved cross-attention fusion and a click
//! probability head.
//!
//! A cluster-attention layer compresses keys and values into `n_c` surrogate
//! tokens through a content-adaptive cluster matrix before running multi-head
//! attention, so per-layer cost is linear in the token count. The encoder
//! applies `m` such layers to both token stacks independently; every `m_c`-th
//! layer a fusion event lets behavior states attend to the freshly updated ad
//! states (context attention) and then ad states attend to the updated
//! behavior states (target attention).

use rand::Rng;
use thiserror::Error;

use crate::numerics::{
    dice_tape, DiceUpdate, Matrix, ParamMode, ParamStore, Tape, Var, DICE_EPSILON,
};

/// Shared by layer normalization; same order as the Dice epsilon so that
/// finite-difference probes at step 1e-4 remain locally linear.
pub const LN_EPSILON: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum RecError {
    #[error("input is {got} wide, the model dimension is {want}")]
    WidthMismatch { got: usize, want: usize },
    #[error("row counts {left} and {right} must match")]
    RowMismatch { left: usize, right: usize },
    #[error("head count {n_h} must divide the dimension {d}")]
    HeadSplit { d: usize, n_h: usize },
    #[error("cluster count must be at least 1")]
    NoClusters,
    #[error("fusion interval must be at least 1")]
    ZeroInterval,
}

/// Encoder sizing. `m` self-attention layers per stack, a fusion event after
/// every `m_c`-th layer (when `mif_enabled`), `n_c` surrogate tokens, `n_h`
/// attention heads over dimension `d`, and the click-head hidden widths.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RecFormerConfig {
    pub d: usize,
    pub n_c: usize,
    pub n_h: usize,
    pub m: usize,
    pub m_c: usize,
    pub mif_enabled: bool,
    pub ctr_hidden: (usize, usize),
}

impl RecFormerConfig {
    pub fn validate(&self) -> Result<(), RecError> {
        if self.n_c == 0 {
            return Err(RecError::NoClusters);
        }
        if self.m_c == 0 {
            return Err(RecError::ZeroInterval);
        }
        if self.n_h == 0 || self.d % self.n_h != 0 {
            return Err(RecError::HeadSplit { d: self.d, n_h: self.n_h });
        }
        Ok(())
    }

    /// Count of fusion events, `ceil(m / m_c)`.
    pub fn m_k(&self) -> usize {
        self.m.div_ceil(self.m_c)
    }

    /// One-based layer indices followed by a fusion event:
    /// `{m_c, 2 m_c, ...}` up to `m`.
    pub fn fusion_layers(&self) -> Vec<usize> {
        (self.m_c..=self.m).step_by(self.m_c).collect()
    }
}

/// How parameters enter a forward tape. `mode` governs whether gradients
/// reach this subnetwork; `training` selects batch statistics (differentiable,
/// collected for a later running-average fold) over frozen running statistics
/// inside every Dice site.
#[derive(Clone, Copy)]
pub struct NetCtx<'a> {
    pub params: &'a ParamStore,
    pub mode: ParamMode,
    pub training: bool,
}

impl<'a> NetCtx<'a> {
    pub fn evaluation(params: &'a ParamStore) -> Self {
        NetCtx { params, mode: ParamMode::Frozen, training: false }
    }
}

fn pleaf(tape: &mut Tape, ctx: &NetCtx, name: &str) -> Var {
    tape.leaf_mode(ctx.params, name, ctx.mode)
}

/// x·W + b with the bias row broadcast over all rows of x.
pub fn linear(tape: &mut Tape, ctx: &NetCtx, x: Var, w_name: &str, b_name: &str) -> Var {
    let w = pleaf(tape, ctx, w_name);
    let b = pleaf(tape, ctx, b_name);
    let xw = tape.matmul(x, w);
    let rows = tape.value(xw).rows();
    let b_rep = tape.repeat_rows(b, rows);
    tape.add(xw, b_rep)
}

/// Per-row standardization with learned gain and shift, parameters
/// `{site}_g` and `{site}_b`.
pub fn layer_norm(tape: &mut Tape, ctx: &NetCtx, site: &str, x: Var) -> Var {
    let gamma = pleaf(tape, ctx, &format!("{site}_g"));
    let beta = pleaf(tape, ctx, &format!("{site}_b"));
    let (rows, cols) = {
        let v = tape.value(x);
        (v.rows(), v.cols())
    };
    let sums = tape.row_sum(x);
    let mean = tape.scale(sums, 1.0 / cols as f64);
    let mean_rep = tape.repeat_cols(mean, cols);
    let centered = tape.sub(x, mean_rep);
    let sq = tape.mul(centered, centered);
    let var = tape.row_sum(sq);
    let var = tape.scale(var, 1.0 / cols as f64);
    let var_eps = tape.add_const(var, LN_EPSILON);
    let inv_std = tape.pow_const(var_eps, -0.5);
    let inv_rep = tape.repeat_cols(inv_std, cols);
    let normed = tape.mul(centered, inv_rep);
    let gamma_rep = tape.repeat_rows(gamma, rows);
    let beta_rep = tape.repeat_rows(beta, rows);
    let scaled = tape.mul(normed, gamma_rep);
    tape.add(scaled, beta_rep)
}

/// Dice activation at a named site: alpha from `{site}_alpha`; running
/// statistics `{site}_mean` / `{site}_var` feed inference, while training
/// standardizes by differentiable batch statistics and records them in
/// `updates` for the post-step fold.
pub fn dice_block(
    tape: &mut Tape,
    ctx: &NetCtx,
    site: &str,
    x: Var,
    updates: &mut Vec<DiceUpdate>,
) -> Var {
    let alpha = pleaf(tape, ctx, &format!("{site}_alpha"));
    if ctx.training {
        let dt = dice_tape(tape, x, alpha, None, DICE_EPSILON);
        updates.push(DiceUpdate {
            mean_name: format!("{site}_mean"),
            var_name: format!("{site}_var"),
            mean: dt.batch_mean.expect("training mode exposes batch statistics"),
            var: dt.batch_var.expect("training mode exposes batch statistics"),
        });
        dt.out
    } else {
        let mean = tape.frozen(ctx.params, &format!("{site}_mean"));
        let var = tape.frozen(ctx.params, &format!("{site}_var"));
        dice_tape(tape, x, alpha, Some((mean, var)), DICE_EPSILON).out
    }
}

fn uniform_init<R: Rng>(rng: &mut R, rows: usize, cols: usize, fan_in: usize) -> Matrix {
    let bound = 1.0 / (fan_in as f64).sqrt();
    Matrix::from_fn(rows, cols, |_, _| rng.gen_range(-bound..bound))
}

fn insert_dice_site(
    store: &mut ParamStore,
    site: &str,
    channels: usize,
) -> Result<(), crate::numerics::ParamError> {
    store.insert(format!("{site}_alpha"), Matrix::zeros(1, channels))?;
    store.insert(format!("{site}_mean"), Matrix::zeros(1, channels))?;
    store.insert(format!("{site}_var"), Matrix::from_fn(1, channels, |_, _| 1.0))?;
    Ok(())
}

fn insert_ln_site(
    store: &mut ParamStore,
    site: &str,
    channels: usize,
) -> Result<(), crate::numerics::ParamError> {
    store.insert(format!("{site}_g"), Matrix::from_fn(1, channels, |_, _| 1.0))?;
    store.insert(format!("{site}_b"), Matrix::zeros(1, channels))?;
    Ok(())
}

/// Inserts one cluster-attention layer's parameters under `prefix`. Weights
/// are zero-mean uniform scaled by 1/sqrt(fan-in); biases and gate nets start
/// at zero so the aggregation gates open at 0.5.
pub fn init_cluster_layer_params<R: Rng>(
    store: &mut ParamStore,
    rng: &mut R,
    prefix: &str,
    d: usize,
    n_c: usize,
) -> Result<(), crate::numerics::ParamError> {
    store.insert(format!("{prefix}/f1_w"), uniform_init(rng, d, 3 * d, d))?;
    store.insert(format!("{prefix}/f1_b"), Matrix::zeros(1, 3 * d))?;
    insert_dice_site(store, &format!("{prefix}/dice_qkv"), 3 * d)?;
    store.insert(format!("{prefix}/cluster_w"), uniform_init(rng, d, n_c, d))?;
    store.insert(format!("{prefix}/cluster_b"), Matrix::zeros(1, n_c))?;
    store.insert(format!("{prefix}/fk1_w"), uniform_init(rng, n_c, 1, n_c))?;
    store.insert(format!("{prefix}/fk1_b"), Matrix::zeros(1, 1))?;
    store.insert(format!("{prefix}/fv1_w"), uniform_init(rng, n_c, 1, n_c))?;
    store.insert(format!("{prefix}/fv1_b"), Matrix::zeros(1, 1))?;
    store.insert(format!("{prefix}/fk2_w"), uniform_init(rng, d, d, d))?;
    store.insert(format!("{prefix}/fk2_b"), Matrix::zeros(1, d))?;
    store.insert(format!("{prefix}/fv2_w"), uniform_init(rng, d, d, d))?;
    store.insert(format!("{prefix}/fv2_b"), Matrix::zeros(1, d))?;
    store.insert(format!("{prefix}/f2_w"), uniform_init(rng, d, d, d))?;
    store.insert(format!("{prefix}/f2_b"), Matrix::zeros(1, d))?;
    insert_dice_site(store, &format!("{prefix}/dice_attn"), d)?;
    insert_ln_site(store, &format!("{prefix}/ln1"), d)?;
    store.insert(format!("{prefix}/fout_w1"), uniform_init(rng, d, 4 * d, d))?;
    store.insert(format!("{prefix}/fout_b1"), Matrix::zeros(1, 4 * d))?;
    insert_dice_site(store, &format!("{prefix}/dice_ffn"), 4 * d)?;
    store.insert(format!("{prefix}/fout_w2"), uniform_init(rng, 4 * d, d, 4 * d))?;
    store.insert(format!("{prefix}/fout_b2"), Matrix::zeros(1, d))?;
    insert_ln_site(store, &format!("{prefix}/ln2"), d)?;
    Ok(())
}

/// Inserts a sigmoid MLP head under `prefix`: in -> h1 -> h2 -> out, Dice on
/// both hidden layers, final layer zeroed so every initial output is exactly
/// sigmoid(0) = 0.5.
pub fn init_mlp_head_params<R: Rng>(
    store: &mut ParamStore,
    rng: &mut R,
    prefix: &str,
    input: usize,
    hidden: (usize, usize),
    outputs: usize,
) -> Result<(), crate::numerics::ParamError> {
    let (h1, h2) = hidden;
    store.insert(format!("{prefix}/w1"), uniform_init(rng, input, h1, input))?;
    store.insert(format!("{prefix}/b1"), Matrix::zeros(1, h1))?;
    insert_dice_site(store, &format!("{prefix}/dice1"), h1)?;
    store.insert(format!("{prefix}/w2"), uniform_init(rng, h1, h2, h1))?;
    store.insert(format!("{prefix}/b2"), Matrix::zeros(1, h2))?;
    insert_dice_site(store, &format!("{prefix}/dice2"), h2)?;
    store.insert(format!("{prefix}/w3"), Matrix::zeros(h2, outputs))?;
    store.insert(format!("{prefix}/b3"), Matrix::zeros(1, outputs))?;
    Ok(())
}

/// The sigmoid MLP head inserted by [`init_mlp_head_params`], on tape.
pub fn mlp_head_tape(
    tape: &mut Tape,
    ctx: &NetCtx,
    prefix: &str,
    x: Var,
    updates: &mut Vec<DiceUpdate>,
) -> Var {
    let a1 = linear(tape, ctx, x, &format!("{prefix}/w1"), &format!("{prefix}/b1"));
    let a1 = dice_block(tape, ctx, &format!("{prefix}/dice1"), a1, updates);
    let a2 = linear(tape, ctx, a1, &format!("{prefix}/w2"), &format!("{prefix}/b2"));
    let a2 = dice_block(tape, ctx, &format!("{prefix}/dice2"), a2, updates);
    let logits = linear(tape, ctx, a2, &format!("{prefix}/w3"), &format!("{prefix}/b3"));
    tape.sigmoid(logits)
}

/// Inserts the full encoder parameter set: per-layer self-attention stacks
/// for ads and behaviors, fusion layers when enabled, and the click head.
pub fn init_recformer_params<R: Rng>(
    store: &mut ParamStore,
    rng: &mut R,
    cfg: &RecFormerConfig,
) -> Result<(), crate::numerics::ParamError> {
    for i in 0..cfg.m {
        init_cluster_layer_params(store, rng, &format!("recformer/gcf_ad/layer{i}"), cfg.d, cfg.n_c)?;
        init_cluster_layer_params(store, rng, &format!("recformer/gcf_usr/layer{i}"), cfg.d, cfg.n_c)?;
    }
    if cfg.mif_enabled {
        for l in cfg.fusion_layers() {
            init_cluster_layer_params(store, rng, &format!("recformer/mif/fuse{l}/ctx"), cfg.d, cfg.n_c)?;
            init_cluster_layer_params(store, rng, &format!("recformer/mif/fuse{l}/tgt"), cfg.d, cfg.n_c)?;
        }
    }
    init_mlp_head_params(store, rng, "recformer/ctr", 2 * cfg.d, cfg.ctr_hidden, 1)?;
    Ok(())
}

fn split_qkv(tape: &mut Tape, g: Var, d: usize) -> (Var, Var, Var) {
    let q = tape.slice_cols(g, 0, d);
    let k = tape.slice_cols(g, d, d);
    let v = tape.slice_cols(g, 2 * d, d);
    (q, k, v)
}

/// Adaptive cluster assignments for each input row: row-softmax of a linear
/// projection, so rows sum to 1 and the layer stays a set function.
fn cluster_matrix_tape(tape: &mut Tape, ctx: &NetCtx, prefix: &str, h: Var) -> Var {
    let logits = linear(tape, ctx, h, &format!("{prefix}/cluster_w"), &format!("{prefix}/cluster_b"));
    tape.row_softmax(logits)
}

fn gate_tape(tape: &mut Tape, ctx: &NetCtx, a_q: Var, other: Var, w: &str, b: &str) -> Var {
    let d = tape.value(a_q).cols();
    let other_t = tape.transpose(other);
    let inner = tape.matmul(a_q, other_t);
    let pre = linear(tape, ctx, inner, w, b);
    let phi = tape.sigmoid(pre);
    tape.repeat_cols(phi, d)
}

fn gated_mix_tape(
    tape: &mut Tape,
    ctx: &NetCtx,
    phi: Var,
    own: Var,
    other: Var,
    w: &str,
    b: &str,
) -> Var {
    let t_own = linear(tape, ctx, own, w, b);
    let t_other = linear(tape, ctx, other, w, b);
    let gated = tape.mul(phi, t_own);
    let neg = tape.scale(phi, -1.0);
    let complement = tape.add_const(neg, 1.0);
    let rest = tape.mul(complement, t_other);
    tape.add(gated, rest)
}

/// Gated mixture of transformed query/key (and query/value) surrogate tokens.
fn aggregate_tape(
    tape: &mut Tape,
    ctx: &NetCtx,
    prefix: &str,
    a_q: Var,
    a_k: Var,
    a_v: Var,
) -> (Var, Var) {
    let phi_k = gate_tape(tape, ctx, a_q, a_v, &format!("{prefix}/fk1_w"), &format!("{prefix}/fk1_b"));
    let phi_v = gate_tape(tape, ctx, a_q, a_k, &format!("{prefix}/fv1_w"), &format!("{prefix}/fv1_b"));
    let k_agg =
        gated_mix_tape(tape, ctx, phi_k, a_q, a_k, &format!("{prefix}/fk2_w"), &format!("{prefix}/fk2_b"));
    let v_agg =
        gated_mix_tape(tape, ctx, phi_v, a_q, a_v, &format!("{prefix}/fv2_w"), &format!("{prefix}/fv2_b"));
    (k_agg, v_agg)
}

fn debug_assert_rows_normalized(m: &Matrix) {
    if cfg!(debug_assertions) {
        for i in 0..m.rows() {
            let s: f64 = (0..m.cols()).map(|j| m.get(i, j)).sum();
            debug_assert!((s - 1.0).abs() <= 1e-9, "attention row {i} sums to {s}");
        }
    }
}

/// One cluster-attention layer on tape. `kv = None` is self mode; in cross
/// mode queries come from `h_in` and keys/values from `kv`, each side with
/// its own adaptive cluster matrix from the shared projection. An empty
/// query stack passes through; an empty key/value stack zeroes the attention
/// term so only normalization and the feed-forward sublayer act.
pub fn cluster_attention_layer_tape(
    tape: &mut Tape,
    ctx: &NetCtx,
    prefix: &str,
    h_in: Var,
    kv: Option<Var>,
    n_h: usize,
    updates: &mut Vec<DiceUpdate>,
) -> Var {
    let n = tape.value(h_in).rows();
    let d = tape.value(h_in).cols();
    assert!(n_h >= 1 && d % n_h == 0, "head count {n_h} must divide dimension {d}");
    if n == 0 {
        return h_in;
    }
    let kv_rows = tape.value(kv.unwrap_or(h_in)).rows();

    let attn = if kv_rows == 0 {
        None
    } else {
        let (q, a_q, a_k, a_v) = match kv {
            None => {
                let g = linear(tape, ctx, h_in, &format!("{prefix}/f1_w"), &format!("{prefix}/f1_b"));
                let g = dice_block(tape, ctx, &format!("{prefix}/dice_qkv"), g, updates);
                let (q, k, v) = split_qkv(tape, g, d);
                let s = cluster_matrix_tape(tape, ctx, prefix, h_in);
                let s_hat = tape.col_normalize(s);
                let s_t = tape.transpose(s_hat);
                (q, tape.matmul(s_t, q), tape.matmul(s_t, k), tape.matmul(s_t, v))
            }
            Some(kv) => {
                let g_q = linear(tape, ctx, h_in, &format!("{prefix}/f1_w"), &format!("{prefix}/f1_b"));
                let g_q = dice_block(tape, ctx, &format!("{prefix}/dice_qkv"), g_q, updates);
                let q = tape.slice_cols(g_q, 0, d);
                let g_kv = linear(tape, ctx, kv, &format!("{prefix}/f1_w"), &format!("{prefix}/f1_b"));
                let g_kv = dice_block(tape, ctx, &format!("{prefix}/dice_qkv"), g_kv, updates);
                let k = tape.slice_cols(g_kv, d, d);
                let v = tape.slice_cols(g_kv, 2 * d, d);
                let s_q = cluster_matrix_tape(tape, ctx, prefix, h_in);
                let s_q_hat = tape.col_normalize(s_q);
                let s_q_t = tape.transpose(s_q_hat);
                let s_kv = cluster_matrix_tape(tape, ctx, prefix, kv);
                let s_kv_hat = tape.col_normalize(s_kv);
                let s_kv_t = tape.transpose(s_kv_hat);
                (q, tape.matmul(s_q_t, q), tape.matmul(s_kv_t, k), tape.matmul(s_kv_t, v))
            }
        };
        let (k_agg, v_agg) = aggregate_tape(tape, ctx, prefix, a_q, a_k, a_v);

        let d_h = d / n_h;
        let mut heads = Vec::with_capacity(n_h);
        for h in 0..n_h {
            let q_h = tape.slice_cols(q, h * d_h, d_h);
            let k_h = tape.slice_cols(k_agg, h * d_h, d_h);
            let v_h = tape.slice_cols(v_agg, h * d_h, d_h);
            let k_t = tape.transpose(k_h);
            let scores = tape.matmul(q_h, k_t);
            let scores = tape.scale(scores, 1.0 / (d_h as f64).sqrt());
            let probs = tape.row_softmax(scores);
            debug_assert_rows_normalized(tape.value(probs));
            heads.push(tape.matmul(probs, v_h));
        }
        let concat = heads[1..].iter().fold(heads[0], |acc, &h| tape.concat_cols(acc, h));
        let out = linear(tape, ctx, concat, &format!("{prefix}/f2_w"), &format!("{prefix}/f2_b"));
        Some(dice_block(tape, ctx, &format!("{prefix}/dice_attn"), out, updates))
    };

    let h1 = match attn {
        Some(a) => {
            let sum = tape.add(h_in, a);
            layer_norm(tape, ctx, &format!("{prefix}/ln1"), sum)
        }
        None => layer_norm(tape, ctx, &format!("{prefix}/ln1"), h_in),
    };
    let hid = linear(tape, ctx, h1, &format!("{prefix}/fout_w1"), &format!("{prefix}/fout_b1"));
    let hid = dice_block(tape, ctx, &format!("{prefix}/dice_ffn"), hid, updates);
    let f = linear(tape, ctx, hid, &format!("{prefix}/fout_w2"), &format!("{prefix}/fout_b2"));
    let sum = tape.add(h1, f);
    layer_norm(tape, ctx, &format!("{prefix}/ln2"), sum)
}

/// Final hidden states for both token stacks.
pub struct RecOut {
    pub h_ad: Var,
    pub h_usr: Var,
}

/// Full encoder on tape: `m` interleaved self-attention layers per stack
/// with a fusion event after every `m_c`-th layer when enabled. Context
/// attention refreshes behavior states from the new ad states first; target
/// attention then refreshes ad states from the updated behavior states.
pub fn recformer_forward_tape(
    tape: &mut Tape,
    ctx: &NetCtx,
    cfg: &RecFormerConfig,
    e_ad: Var,
    e_bhvr: Var,
    updates: &mut Vec<DiceUpdate>,
) -> RecOut {
    let mut h_ad = e_ad;
    let mut h_usr = e_bhvr;
    for i in 0..cfg.m {
        h_ad = cluster_attention_layer_tape(
            tape, ctx, &format!("recformer/gcf_ad/layer{i}"), h_ad, None, cfg.n_h, updates,
        );
        h_usr = cluster_attention_layer_tape(
            tape, ctx, &format!("recformer/gcf_usr/layer{i}"), h_usr, None, cfg.n_h, updates,
        );
        let layer = i + 1;
        if cfg.mif_enabled && layer % cfg.m_c == 0 {
            h_usr = cluster_attention_layer_tape(
                tape, ctx, &format!("recformer/mif/fuse{layer}/ctx"), h_usr, Some(h_ad), cfg.n_h, updates,
            );
            h_ad = cluster_attention_layer_tape(
                tape, ctx, &format!("recformer/mif/fuse{layer}/tgt"), h_ad, Some(h_usr), cfg.n_h, updates,
            );
        }
    }
    RecOut { h_ad, h_usr }
}

/// Click head on tape: per-ad concat(h_i, e_u) through the sigmoid MLP,
/// giving an N x 1 column of probabilities.
pub fn ctr_head_tape(
    tape: &mut Tape,
    ctx: &NetCtx,
    h_ad: Var,
    e_u: Var,
    updates: &mut Vec<DiceUpdate>,
) -> Var {
    let n = tape.value(h_ad).rows();
    let e_rep = tape.repeat_rows(e_u, n);
    let x = tape.concat_cols(h_ad, e_rep);
    mlp_head_tape(tape, ctx, "recformer/ctr", x, updates)
}

fn expect_width(m: &Matrix, want: usize) -> Result<(), RecError> {
    if m.cols() != want {
        return Err(RecError::WidthMismatch { got: m.cols(), want });
    }
    Ok(())
}

/// Adaptive cluster matrix of `h` under the layer at `prefix`: each row is a
/// softmax over the `n_c` clusters.
pub fn cluster_matrix(params: &ParamStore, prefix: &str, h: &Matrix) -> Result<Matrix, RecError> {
    expect_width(h, params.get(&format!("{prefix}/cluster_w")).rows())?;
    let mut tape = Tape::new();
    let ctx = NetCtx::evaluation(params);
    let hv = tape.constant(h.clone());
    let s = cluster_matrix_tape(&mut tape, &ctx, prefix, hv);
    Ok(tape.value(s).clone())
}

/// Column-normalized cluster-weighted aggregation of `x`: each cluster's row
/// is the weighted average of the rows assigned to it; an all-zero cluster
/// column aggregates to the zero row.
pub fn surrogate_tokens(s: &Matrix, x: &Matrix) -> Result<Matrix, RecError> {
    if s.rows() != x.rows() {
        return Err(RecError::RowMismatch { left: s.rows(), right: x.rows() });
    }
    let mut tape = Tape::new();
    let sv = tape.constant(s.clone());
    let xv = tape.constant(x.clone());
    let s_hat = tape.col_normalize(sv);
    let s_t = tape.transpose(s_hat);
    let a = tape.matmul(s_t, xv);
    Ok(tape.value(a).clone())
}

/// Clustered key/value pair for one layer in self mode: surrogate tokens for
/// Q, K, V under the shared cluster matrix `s`, mixed by the learned gates.
pub fn cluster_aggregate(
    params: &ParamStore,
    prefix: &str,
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    s: &Matrix,
) -> Result<(Matrix, Matrix), RecError> {
    let d = q.cols();
    expect_width(k, d)?;
    expect_width(v, d)?;
    expect_width(s, params.get(&format!("{prefix}/fk1_w")).rows())?;
    for x in [k, v] {
        if x.rows() != q.rows() {
            return Err(RecError::RowMismatch { left: x.rows(), right: q.rows() });
        }
    }
    if s.rows() != q.rows() {
        return Err(RecError::RowMismatch { left: s.rows(), right: q.rows() });
    }
    let mut tape = Tape::new();
    let ctx = NetCtx::evaluation(params);
    let sv = tape.constant(s.clone());
    let s_hat = tape.col_normalize(sv);
    let s_t = tape.transpose(s_hat);
    let (qv, kv, vv) = (tape.constant(q.clone()), tape.constant(k.clone()), tape.constant(v.clone()));
    let a_q = tape.matmul(s_t, qv);
    let a_k = tape.matmul(s_t, kv);
    let a_v = tape.matmul(s_t, vv);
    let (k_agg, v_agg) = aggregate_tape(&mut tape, &ctx, prefix, a_q, a_k, a_v);
    Ok((tape.value(k_agg).clone(), tape.value(v_agg).clone()))
}

/// One inference-mode layer application; see [`cluster_attention_layer_tape`].
pub fn cluster_attention_layer(
    params: &ParamStore,
    prefix: &str,
    h_in: &Matrix,
    kv: Option<&Matrix>,
    n_h: usize,
) -> Result<Matrix, RecError> {
    let d = params.get(&format!("{prefix}/f1_w")).rows();
    expect_width(h_in, d)?;
    if let Some(kv) = kv {
        expect_width(kv, d)?;
    }
    if n_h == 0 || d % n_h != 0 {
        return Err(RecError::HeadSplit { d, n_h });
    }
    let mut tape = Tape::new();
    let ctx = NetCtx::evaluation(params);
    let hv = tape.constant(h_in.clone());
    let kvv = kv.map(|m| tape.constant(m.clone()));
    let mut updates = Vec::new();
    let out = cluster_attention_layer_tape(&mut tape, &ctx, prefix, hv, kvv, n_h, &mut updates);
    Ok(tape.value(out).clone())
}

fn forward_value(
    params: &ParamStore,
    cfg: &RecFormerConfig,
    e_ad: &Matrix,
    e_bhvr: &Matrix,
    fused: bool,
) -> Result<(Matrix, Matrix), RecError> {
    cfg.validate()?;
    expect_width(e_ad, cfg.d)?;
    expect_width(e_bhvr, cfg.d)?;
    let cfg = RecFormerConfig { mif_enabled: fused && cfg.mif_enabled, ..cfg.clone() };
    let mut tape = Tape::new();
    let ctx = NetCtx::evaluation(params);
    let ad = tape.constant(e_ad.clone());
    let usr = tape.constant(e_bhvr.clone());
    let mut updates = Vec::new();
    let out = recformer_forward_tape(&mut tape, &ctx, &cfg, ad, usr, &mut updates);
    Ok((tape.value(out.h_ad).clone(), tape.value(out.h_usr).clone()))
}

/// The two self-attention stacks alone, fusion disabled.
pub fn gcf_forward(
    params: &ParamStore,
    cfg: &RecFormerConfig,
    e_ad: &Matrix,
    e_bhvr: &Matrix,
) -> Result<(Matrix, Matrix), RecError> {
    forward_value(params, cfg, e_ad, e_bhvr, false)
}

/// Full encoder in inference mode, fusion included when configured.
pub fn recformer_forward(
    params: &ParamStore,
    cfg: &RecFormerConfig,
    e_ad: &Matrix,
    e_bhvr: &Matrix,
) -> Result<(Matrix, Matrix), RecError> {
    forward_value(params, cfg, e_ad, e_bhvr, true)
}

/// Click probabilities in inference mode, one per row of `h_ad`.
pub fn ctr_head(params: &ParamStore, h_ad: &Matrix, e_u: &Matrix) -> Result<Matrix, RecError> {
    let input = params.get("recformer/ctr/w1").rows();
    if h_ad.cols() + e_u.cols() != input {
        return Err(RecError::WidthMismatch { got: h_ad.cols() + e_u.cols(), want: input });
    }
    let mut tape = Tape::new();
    let ctx = NetCtx::evaluation(params);
    let h = tape.constant(h_ad.clone());
    let e = tape.constant(e_u.clone());
    let mut updates = Vec::new();
    let out = ctr_head_tape(&mut tape, &ctx, h, e, &mut updates);
    Ok(tape.value(out).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{flops, gradcheck, sigmoid_scalar};
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    fn small_cfg() -> RecFormerConfig {
        RecFormerConfig { d: 4, n_c: 3, n_h: 2, m: 2, m_c: 1, mif_enabled: true, ctr_hidden: (5, 3) }
    }

    fn init_store(cfg: &RecFormerConfig, seed: u64) -> ParamStore {
        let mut store = ParamStore::new();
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        init_recformer_params(&mut store, &mut rng, cfg).unwrap();
        store
    }

    fn random_matrix(rng: &mut ChaCha12Rng, rows: usize, cols: usize) -> Matrix {
        Matrix::from_fn(rows, cols, |_, _| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn config_counts_fusion_events() {
        let cfg = RecFormerConfig { d: 8, n_c: 4, n_h: 2, m: 6, m_c: 2, mif_enabled: true, ctr_hidden: (8, 4) };
        assert_eq!(cfg.fusion_layers(), vec![2, 4, 6]);
        assert_eq!(cfg.m_k(), 3);
        let tight = RecFormerConfig { m: 4, m_c: 2, ..cfg.clone() };
        assert_eq!(tight.m_k(), 2);
        assert_eq!(
            RecFormerConfig { n_h: 3, ..cfg.clone() }.validate(),
            Err(RecError::HeadSplit { d: 8, n_h: 3 })
        );
        assert_eq!(RecFormerConfig { n_c: 0, ..cfg }.validate(), Err(RecError::NoClusters));
    }

    #[test]
    fn single_cluster_matrix_is_the_ones_column() {
        let cfg = RecFormerConfig { n_c: 1, ..small_cfg() };
        let store = init_store(&cfg, 1);
        let mut rng = ChaCha12Rng::seed_from_u64(2);
        let h = random_matrix(&mut rng, 5, cfg.d);
        let s = cluster_matrix(&store, "recformer/gcf_ad/layer0", &h).unwrap();
        assert_eq!(s, Matrix::from_fn(5, 1, |_, _| 1.0));
    }

    #[test]
    fn zero_cluster_weights_give_uniform_rows() {
        let cfg = small_cfg();
        let mut store = init_store(&cfg, 3);
        store.set("recformer/gcf_ad/layer0/cluster_w", Matrix::zeros(cfg.d, cfg.n_c));
        let mut rng = ChaCha12Rng::seed_from_u64(4);
        let h = random_matrix(&mut rng, 4, cfg.d);
        let s = cluster_matrix(&store, "recformer/gcf_ad/layer0", &h).unwrap();
        for i in 0..4 {
            for c in 0..cfg.n_c {
                assert!((s.get(i, c) - 1.0 / cfg.n_c as f64).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn cluster_rows_sum_to_one_and_permute_with_input() {
        let cfg = small_cfg();
        let store = init_store(&cfg, 5);
        let mut rng = ChaCha12Rng::seed_from_u64(6);
        let h = random_matrix(&mut rng, 6, cfg.d);
        let s = cluster_matrix(&store, "recformer/gcf_ad/layer0", &h).unwrap();
        for i in 0..6 {
            let sum: f64 = (0..cfg.n_c).map(|c| s.get(i, c)).sum();
            assert!((sum - 1.0).abs() < 1e-9);
        }
        let perm = [3usize, 0, 5, 1, 4, 2];
        let h_perm = Matrix::from_fn(6, cfg.d, |i, j| h.get(perm[i], j));
        let s_perm = cluster_matrix(&store, "recformer/gcf_ad/layer0", &h_perm).unwrap();
        let expected = Matrix::from_fn(6, cfg.n_c, |i, c| s.get(perm[i], c));
        assert!(s_perm.max_abs_diff(&expected) < 1e-12);
    }

    // Scalar-loop re-derivation of the gated aggregation, kept free of the
    // Matrix helpers on purpose.
    #[allow(clippy::too_many_arguments)]
    fn oracle_aggregate(
        q: &Matrix,
        k: &Matrix,
        v: &Matrix,
        s: &Matrix,
        fk1_w: &Matrix,
        fk1_b: f64,
        fv1_w: &Matrix,
        fv1_b: f64,
        fk2_w: &Matrix,
        fk2_b: &Matrix,
        fv2_w: &Matrix,
        fv2_b: &Matrix,
    ) -> (Matrix, Matrix) {
        let (n, d, n_c) = (q.rows(), q.cols(), s.cols());
        let mut col_sum = vec![0.0; n_c];
        for c in 0..n_c {
            for i in 0..n {
                col_sum[c] += s.get(i, c);
            }
        }
        let surrogate = |x: &Matrix| {
            Matrix::from_fn(n_c, d, |c, j| {
                if col_sum[c] == 0.0 {
                    return 0.0;
                }
                let mut acc = 0.0;
                for i in 0..n {
                    acc += s.get(i, c) / col_sum[c] * x.get(i, j);
                }
                acc
            })
        };
        let (a_q, a_k, a_v) = (surrogate(q), surrogate(k), surrogate(v));
        let gate = |other: &Matrix, w: &Matrix, b: f64| {
            let mut phi = vec![0.0; n_c];
            for c in 0..n_c {
                let mut pre = b;
                for c2 in 0..n_c {
                    let mut inner = 0.0;
                    for j in 0..d {
                        inner += a_q.get(c, j) * other.get(c2, j);
                    }
                    pre += inner * w.get(c2, 0);
                }
                phi[c] = sigmoid_scalar(pre);
            }
            phi
        };
        let phi_k = gate(&a_v, fk1_w, fk1_b);
        let phi_v = gate(&a_k, fv1_w, fv1_b);
        let transform = |x: &Matrix, w: &Matrix, b: &Matrix| {
            Matrix::from_fn(n_c, d, |c, j| {
                let mut acc = b.get(0, j);
                for j2 in 0..d {
                    acc += x.get(c, j2) * w.get(j2, j);
                }
                acc
            })
        };
        let mix = |phi: &[f64], own: &Matrix, other: &Matrix, w: &Matrix, b: &Matrix| {
            let t_own = transform(own, w, b);
            let t_other = transform(other, w, b);
            Matrix::from_fn(n_c, d, |c, j| {
                phi[c] * t_own.get(c, j) + (1.0 - phi[c]) * t_other.get(c, j)
            })
        };
        (mix(&phi_k, &a_q, &a_k, fk2_w, fk2_b), mix(&phi_v, &a_q, &a_v, fv2_w, fv2_b))
    }

    #[test]
    fn aggregate_matches_the_loop_oracle_on_all_small_shapes() {
        for n in 1..=8usize {
            for n_c in 1..=4usize {
                for d in 1..=4usize {
                    for seed in 0..3u64 {
                        let mut rng = ChaCha12Rng::seed_from_u64(seed * 1000 + (n * 100 + n_c * 10 + d) as u64);
                        let mut store = ParamStore::new();
                        init_cluster_layer_params(&mut store, &mut rng, "layer", d, n_c).unwrap();
                        let q = random_matrix(&mut rng, n, d);
                        let k = random_matrix(&mut rng, n, d);
                        let v = random_matrix(&mut rng, n, d);
                        // A softmax-produced S plus a crafted S with an
                        // all-zero column, which must aggregate to zero rows.
                        let mut s_cases = vec![cluster_matrix(&store, "layer", &q).unwrap()];
                        if n_c > 1 {
                            let mut s = random_matrix(&mut rng, n, n_c).map(f64::abs);
                            for i in 0..n {
                                s.set(i, n_c - 1, 0.0);
                            }
                            s_cases.push(s);
                        }
                        for s in s_cases {
                            let (k_got, v_got) = cluster_aggregate(&store, "layer", &q, &k, &v, &s).unwrap();
                            let (k_want, v_want) = oracle_aggregate(
                                &q, &k, &v, &s,
                                store.get("layer/fk1_w"), store.get("layer/fk1_b").scalar(),
                                store.get("layer/fv1_w"), store.get("layer/fv1_b").scalar(),
                                store.get("layer/fk2_w"), store.get("layer/fk2_b"),
                                store.get("layer/fv2_w"), store.get("layer/fv2_b"),
                            );
                            assert!(k_got.max_abs_diff(&k_want) < 1e-12, "K' off at n={n} n_c={n_c} d={d}");
                            assert!(v_got.max_abs_diff(&v_want) < 1e-12, "V' off at n={n} n_c={n_c} d={d}");
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn zero_gate_nets_with_identity_transform_average_query_and_key() {
        let d = 3;
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        let mut store = ParamStore::new();
        init_cluster_layer_params(&mut store, &mut rng, "layer", d, 1).unwrap();
        store.set("layer/fk1_w", Matrix::zeros(1, 1));
        store.set("layer/fk2_w", Matrix::identity(d));
        store.set("layer/fk2_b", Matrix::zeros(1, d));
        let q = Matrix::from_rows(&[&[0.4, -1.0, 2.0]]);
        let k = Matrix::from_rows(&[&[1.6, 3.0, -2.0]]);
        let v = Matrix::from_rows(&[&[0.0, 0.0, 0.0]]);
        let s = Matrix::from_rows(&[&[1.0]]);
        let (k_agg, _) = cluster_aggregate(&store, "layer", &q, &k, &v, &s).unwrap();
        let want = q.add(&k).unwrap().scale(0.5);
        assert!(k_agg.max_abs_diff(&want) < 1e-15);
    }

    #[test]
    fn identical_key_rows_share_the_aggregate() {
        let row = [0.3, -0.7, 1.1, 0.2];
        let k = Matrix::from_fn(6, 4, |_, j| row[j]);
        let mut rng = ChaCha12Rng::seed_from_u64(8);
        let s = random_matrix(&mut rng, 6, 3).map(|x| x.abs() + 0.01);
        let a_k = surrogate_tokens(&s, &k).unwrap();
        for c in 0..3 {
            for j in 0..4 {
                assert!((a_k.get(c, j) - row[j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn layer_keeps_shape_and_rejects_width_mismatch() {
        let cfg = small_cfg();
        let store = init_store(&cfg, 9);
        let mut rng = ChaCha12Rng::seed_from_u64(10);
        for n in [1usize, 5] {
            let h = random_matrix(&mut rng, n, cfg.d);
            let out = cluster_attention_layer(&store, "recformer/gcf_ad/layer0", &h, None, cfg.n_h).unwrap();
            assert_eq!((out.rows(), out.cols()), (n, cfg.d));
            assert!(out.is_finite());
        }
        let bad = random_matrix(&mut rng, 2, cfg.d + 1);
        assert_eq!(
            cluster_attention_layer(&store, "recformer/gcf_ad/layer0", &bad, None, cfg.n_h),
            Err(RecError::WidthMismatch { got: cfg.d + 1, want: cfg.d })
        );
    }

    #[test]
    fn self_attention_stack_is_permutation_equivariant() {
        let cfg = RecFormerConfig { mif_enabled: false, ..small_cfg() };
        let store = init_store(&cfg, 11);
        let mut rng = ChaCha12Rng::seed_from_u64(12);
        let e_ad = random_matrix(&mut rng, 7, cfg.d);
        let e_b = random_matrix(&mut rng, 3, cfg.d);
        let (h, _) = gcf_forward(&store, &cfg, &e_ad, &e_b).unwrap();
        let perm = [6usize, 2, 0, 4, 1, 5, 3];
        let e_perm = Matrix::from_fn(7, cfg.d, |i, j| e_ad.get(perm[i], j));
        let (h_perm, _) = gcf_forward(&store, &cfg, &e_perm, &e_b).unwrap();
        let expected = Matrix::from_fn(7, cfg.d, |i, j| h.get(perm[i], j));
        assert!(h_perm.max_abs_diff(&expected) < 1e-9);
    }

    #[test]
    fn empty_kv_side_leaves_output_independent_of_attention_params() {
        let cfg = small_cfg();
        let store_a = init_store(&cfg, 13);
        let mut store_b = init_store(&cfg, 14);
        // Align everything outside the attention path; the two stores then
        // differ only in f1/cluster/gate/transform/f2 parameters.
        let shared = ["/ln1", "/ln2", "/fout_", "/dice_ffn", "recformer/ctr"];
        let names: Vec<String> = store_a.names().map(str::to_string).collect();
        for name in &names {
            if shared.iter().any(|frag| name.contains(frag)) {
                store_b.set(name, store_a.get(name).clone());
            }
        }
        let mut rng = ChaCha12Rng::seed_from_u64(15);
        let h = random_matrix(&mut rng, 4, cfg.d);
        let empty = Matrix::zeros(0, cfg.d);
        let out_a =
            cluster_attention_layer(&store_a, "recformer/gcf_ad/layer0", &h, Some(&empty), cfg.n_h).unwrap();
        let out_b =
            cluster_attention_layer(&store_b, "recformer/gcf_ad/layer0", &h, Some(&empty), cfg.n_h).unwrap();
        assert!(out_a.max_abs_diff(&out_b) < 1e-15);
        let with_kv =
            cluster_attention_layer(&store_a, "recformer/gcf_ad/layer0", &h, Some(&h), cfg.n_h).unwrap();
        assert!(out_a.max_abs_diff(&with_kv) > 1e-6);
    }

    #[test]
    fn zero_depth_stack_is_identity() {
        let cfg = RecFormerConfig { m: 0, ..small_cfg() };
        let store = init_store(&cfg, 16);
        let mut rng = ChaCha12Rng::seed_from_u64(17);
        let e_ad = random_matrix(&mut rng, 4, cfg.d);
        let e_b = random_matrix(&mut rng, 2, cfg.d);
        let (h_ad, h_usr) = recformer_forward(&store, &cfg, &e_ad, &e_b).unwrap();
        assert_eq!(h_ad, e_ad);
        assert_eq!(h_usr, e_b);
    }

    #[test]
    fn empty_behavior_sequence_passes_through_the_full_encoder() {
        let cfg = small_cfg();
        let store = init_store(&cfg, 18);
        let mut rng = ChaCha12Rng::seed_from_u64(19);
        let e_ad = random_matrix(&mut rng, 4, cfg.d);
        let empty = Matrix::zeros(0, cfg.d);
        let (h_ad, h_usr) = recformer_forward(&store, &cfg, &e_ad, &empty).unwrap();
        assert_eq!((h_usr.rows(), h_usr.cols()), (0, cfg.d));
        assert_eq!((h_ad.rows(), h_ad.cols()), (4, cfg.d));
        assert!(h_ad.is_finite());
    }

    #[test]
    fn fusion_changes_the_ad_states() {
        let cfg = small_cfg();
        let store = init_store(&cfg, 20);
        let mut rng = ChaCha12Rng::seed_from_u64(21);
        let e_ad = random_matrix(&mut rng, 4, cfg.d);
        let e_b = random_matrix(&mut rng, 3, cfg.d);
        let (fused, _) = recformer_forward(&store, &cfg, &e_ad, &e_b).unwrap();
        let (unfused, _) = gcf_forward(&store, &cfg, &e_ad, &e_b).unwrap();
        assert!(fused.max_abs_diff(&unfused) > 1e-6);
    }

    #[test]
    fn disabled_fusion_creates_no_fusion_params() {
        let cfg = RecFormerConfig { mif_enabled: false, ..small_cfg() };
        let store = init_store(&cfg, 22);
        assert!(store.names().all(|n| !n.starts_with("recformer/mif/")));
    }

    #[test]
    fn fresh_click_head_outputs_exactly_half() {
        let cfg = small_cfg();
        let store = init_store(&cfg, 23);
        let mut rng = ChaCha12Rng::seed_from_u64(24);
        let h_ad = random_matrix(&mut rng, 5, cfg.d);
        let e_u = random_matrix(&mut rng, 1, cfg.d);
        let q = ctr_head(&store, &h_ad, &e_u).unwrap();
        assert_eq!((q.rows(), q.cols()), (5, 1));
        for i in 0..5 {
            assert_eq!(q.get(i, 0), 0.5);
        }
    }

    #[test]
    fn click_probabilities_stay_strictly_inside_unit_interval() {
        let cfg = small_cfg();
        let mut store = init_store(&cfg, 25);
        let mut rng = ChaCha12Rng::seed_from_u64(26);
        // Break the zero-initialized final layer so outputs move off 0.5.
        store.set("recformer/ctr/w3", random_matrix(&mut rng, cfg.ctr_hidden.1, 1).scale(3.0));
        let h_ad = random_matrix(&mut rng, 8, cfg.d);
        let e_u = random_matrix(&mut rng, 1, cfg.d);
        let q = ctr_head(&store, &h_ad, &e_u).unwrap();
        let mut moved = false;
        for i in 0..8 {
            let p = q.get(i, 0);
            assert!(p > 0.0 && p < 1.0);
            moved |= (p - 0.5).abs() > 1e-6;
        }
        assert!(moved);
    }

    #[test]
    fn measured_stack_flops_track_the_linear_closed_form() {
        let cfg = RecFormerConfig {
            d: 32,
            n_c: 16,
            n_h: 4,
            m: 2,
            m_c: 1,
            mif_enabled: false,
            ctr_hidden: (8, 4),
        };
        let store = init_store(&cfg, 27);
        let mut rng = ChaCha12Rng::seed_from_u64(28);
        let n = 600;
        let e_ad = random_matrix(&mut rng, n, cfg.d);
        let empty = Matrix::zeros(0, cfg.d);
        let _lock = flops::measure_lock();
        flops::reset();
        gcf_forward(&store, &cfg, &e_ad, &empty).unwrap();
        let measured = flops::read();
        let closed = (cfg.m * (10 * n * cfg.n_c * cfg.d + 24 * n * cfg.d * cfg.d)) as f64;
        let rel = (measured as f64 - closed).abs() / closed;
        // The closed form omits the adaptive cluster projection (2*N*N_c*d
        // per layer) and the N_c-only gate/transform terms.
        assert!(rel < 0.05, "measured {measured} vs closed {closed}: rel {rel}");
    }

    #[test]
    fn encoder_gradients_pass_finite_differences() {
        let cfg = RecFormerConfig { d: 4, n_c: 2, n_h: 2, m: 1, m_c: 1, mif_enabled: true, ctr_hidden: (3, 2) };
        let mut store = init_store(&cfg, 29);
        let mut rng = ChaCha12Rng::seed_from_u64(30);
        // Move the zero-initialized head off its stationary point so its
        // upstream gradients are informative.
        store.set("recformer/ctr/w3", random_matrix(&mut rng, 2, 1));
        let e_ad = random_matrix(&mut rng, 3, cfg.d);
        let e_b = random_matrix(&mut rng, 2, cfg.d);
        let e_u = random_matrix(&mut rng, 1, cfg.d);
        let labels = Matrix::from_rows(&[&[1.0], &[0.0], &[1.0]]);

        let loss_of = |ps: &ParamStore, tape_out: Option<&mut ParamStore>| -> f64 {
            let mut tape = Tape::new();
            let ctx = NetCtx { params: ps, mode: ParamMode::Trainable, training: true };
            let mut updates = Vec::new();
            let ad = tape.constant(e_ad.clone());
            let b = tape.constant(e_b.clone());
            let out = recformer_forward_tape(&mut tape, &ctx, &cfg, ad, b, &mut updates);
            let u = tape.constant(e_u.clone());
            let probs = ctr_head_tape(&mut tape, &ctx, out.h_ad, u, &mut updates);
            let probs = tape.clamp(probs, 1e-7, 1.0 - 1e-7);
            let y = tape.constant(labels.clone());
            let ln_p = tape.ln(probs);
            let pos = tape.mul(y, ln_p);
            let neg_y = tape.scale(y, -1.0);
            let one_minus_y = tape.add_const(neg_y, 1.0);
            let neg_p = tape.scale(probs, -1.0);
            let one_minus_p = tape.add_const(neg_p, 1.0);
            let ln_q = tape.ln(one_minus_p);
            let negs = tape.mul(one_minus_y, ln_q);
            let sum = tape.add(pos, negs);
            let total = tape.mean_all(sum);
            let loss = tape.scale(total, -1.0);
            if let Some(sink) = tape_out {
                let grads = tape.backward(loss);
                tape.write_grads(&grads, sink);
            }
            tape.value(loss).scalar()
        };

        let snapshot = store.clone();
        let _ = loss_of(&snapshot, Some(&mut store));
        let names = [
            "recformer/gcf_ad/layer0/f1_w",
            "recformer/gcf_ad/layer0/cluster_w",
            "recformer/gcf_ad/layer0/fk1_w",
            "recformer/gcf_ad/layer0/fv2_w",
            "recformer/gcf_ad/layer0/f2_w",
            "recformer/gcf_ad/layer0/dice_qkv_alpha",
            "recformer/gcf_ad/layer0/ln1_g",
            "recformer/gcf_ad/layer0/fout_w1",
            "recformer/gcf_usr/layer0/f1_w",
            "recformer/mif/fuse1/ctx/f1_w",
            "recformer/mif/fuse1/tgt/cluster_w",
            "recformer/mif/fuse1/tgt/f2_b",
            "recformer/ctr/w1",
            "recformer/ctr/dice1_alpha",
            "recformer/ctr/w3",
        ];
        let report = gradcheck::finite_difference_check(
            &mut store,
            &names,
            |ps| loss_of(ps, None),
            gradcheck::STEP,
            gradcheck::RTOL,
            gradcheck::ATOL,
            6,
        );
        assert!(report.ok(), "mismatches: {:?}", report.mismatches);
        assert!(report.checked >= names.len());
    }
}
