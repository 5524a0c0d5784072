//! Slot allocation and pricing on top of the encoder's ad states: a
//! non-autoregressive generator scores every ad for every slot at once, a
//! greedy masked argmax turns the scores into an ordered slate, a
//! permutation-aware evaluator re-scores the chosen slate, and a payment
//! network prices each winner from everything except its own bid. A GSP
//! baseline covers the ablation without the learned auction.

use rand::Rng;
use thiserror::Error;

use crate::numerics::{Matrix, ParamError, ParamStore, Tape, Var};
use crate::recformer::{
    cluster_attention_layer_tape, init_cluster_layer_params, init_mlp_head_params, linear,
    mlp_head_tape, NetCtx, RecError,
};
use crate::numerics::DiceUpdate;

#[derive(Debug, Clone, Copy, PartialEq, Error)]
pub enum AucError {
    #[error("bid {bid} at index {index} must be positive")]
    NonPositiveBid { index: usize, bid: f64 },
    #[error("{k} slots cannot be filled from {n} candidates")]
    TooManySlots { k: usize, n: usize },
    #[error("input is {got} wide, expected {want}")]
    WidthMismatch { got: usize, want: usize },
    #[error("expected {want} rows, got {got}")]
    RowCount { got: usize, want: usize },
    #[error("invalid configuration: {0}")]
    Config(RecError),
}

/// Sizing of the allocation head. `k` slots, `m_e` refinement and evaluator
/// layers, `n_c` clusters on the generator side (the evaluator runs over
/// K-length sequences and caps its cluster count at `k`).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AucFormerConfig {
    pub d: usize,
    pub k: usize,
    pub n_c: usize,
    pub n_h: usize,
    pub m_e: usize,
    pub eval_hidden: (usize, usize),
    pub pay_hidden: (usize, usize),
}

impl AucFormerConfig {
    pub fn validate(&self) -> Result<(), AucError> {
        if self.k == 0 {
            return Err(AucError::TooManySlots { k: 0, n: 0 });
        }
        if self.n_c == 0 {
            return Err(AucError::Config(RecError::NoClusters));
        }
        if self.n_h == 0 || self.d % self.n_h != 0 {
            return Err(AucError::Config(RecError::HeadSplit { d: self.d, n_h: self.n_h }));
        }
        Ok(())
    }

    fn eval_clusters(&self) -> usize {
        self.n_c.min(self.k)
    }
}

/// Per-request allocation scores: `scores` is the N x K affinity of every ad
/// for every slot, `z` its per-slot (column) selection distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct Allocation {
    pub scores: Matrix,
    pub z: Matrix,
}

/// Winner pricing. `rate[i]` is in [0,1]; `payment[i] = rate[i] * bid` never
/// exceeds the winner's bid.
#[derive(Debug, Clone, PartialEq)]
pub struct PaymentResult {
    pub rate: Vec<f64>,
    pub payment: Vec<f64>,
    pub q_slots: Vec<f64>,
}

/// Inserts the full allocation-head parameter set under "aucformer/".
pub fn init_aucformer_params<R: Rng>(
    store: &mut ParamStore,
    rng: &mut R,
    cfg: &AucFormerConfig,
) -> Result<(), ParamError> {
    let bound = 1.0 / (cfg.d as f64).sqrt();
    let generator_emb = Matrix::from_fn(cfg.k, cfg.d, |_, _| rng.gen_range(-bound..bound));
    let evaluator_emb = Matrix::from_fn(cfg.k, cfg.d, |_, _| rng.gen_range(-bound..bound));
    store.insert("aucformer/slot_emb", generator_emb)?;
    store.insert("aucformer/w_z", Matrix::zeros(1, 1))?;
    for i in 0..cfg.m_e {
        init_cluster_layer_params(store, rng, &format!("aucformer/refine/layer{i}"), cfg.d, cfg.n_c)?;
    }
    store.insert("aucformer/eval/slot_emb", evaluator_emb)?;
    store.insert(
        "aucformer/eval/in_proj_w",
        Matrix::from_fn(3 * cfg.d, cfg.d, |_, _| rng.gen_range(-bound..bound) / 3.0f64.sqrt()),
    )?;
    store.insert("aucformer/eval/in_proj_b", Matrix::zeros(1, cfg.d))?;
    for i in 0..cfg.m_e {
        init_cluster_layer_params(
            store,
            rng,
            &format!("aucformer/eval/layer{i}"),
            cfg.d,
            cfg.eval_clusters(),
        )?;
    }
    init_mlp_head_params(store, rng, "aucformer/eval/head", cfg.d, cfg.eval_hidden, 1)?;
    init_mlp_head_params(store, rng, "aucformer/pay", cfg.d + cfg.k, cfg.pay_hidden, 1)?;
    Ok(())
}

/// Slot tokens after `m_e` refinement layers: learnable slot embeddings
/// cross-attend to the ad states.
pub fn slot_tokens_tape(
    tape: &mut Tape,
    ctx: &NetCtx,
    cfg: &AucFormerConfig,
    h_ad: Var,
    updates: &mut Vec<DiceUpdate>,
) -> Var {
    let mut t = tape.leaf_mode(ctx.params, "aucformer/slot_emb", ctx.mode);
    for i in 0..cfg.m_e {
        t = cluster_attention_layer_tape(
            tape,
            ctx,
            &format!("aucformer/refine/layer{i}"),
            t,
            Some(h_ad),
            cfg.n_h,
            updates,
        );
    }
    t
}

/// Generator on tape. Scores are ad-to-slot-token affinities; each slot's
/// selection distribution is a softmax over all N candidates of the score
/// plus a slot-independent bid bias e^{w_z} * qctr * bid.
pub fn generator_scores_tape(
    tape: &mut Tape,
    ctx: &NetCtx,
    cfg: &AucFormerConfig,
    h_ad: Var,
    qctr: Var,
    bids: Var,
    updates: &mut Vec<DiceUpdate>,
) -> (Var, Var) {
    let t = slot_tokens_tape(tape, ctx, cfg, h_ad, updates);
    let t_t = tape.transpose(t);
    let scores = tape.matmul(h_ad, t_t);
    let w_z = tape.leaf_mode(ctx.params, "aucformer/w_z", ctx.mode);
    let scale = tape.exp(w_z);
    let qb = tape.mul(qctr, bids);
    let bias = tape.mul_scalar_var(qb, scale);
    let bias_rep = tape.repeat_cols(bias, cfg.k);
    let logits = tape.add(scores, bias_rep);
    let logits_t = tape.transpose(logits);
    let z_t = tape.row_softmax(logits_t);
    let z = tape.transpose(z_t);
    (scores, z)
}

fn check_bids(bids: &[f64]) -> Result<(), AucError> {
    for (index, &bid) in bids.iter().enumerate() {
        if !(bid > 0.0) {
            return Err(AucError::NonPositiveBid { index, bid });
        }
    }
    Ok(())
}

/// Inference-mode ad-to-slot affinity scores (N x K), the bid-independent
/// half of the selection logits. Pair with [`rescore_bids`] to sweep bid
/// profiles without re-running the refinement stack.
pub fn slot_affinities(
    params: &ParamStore,
    cfg: &AucFormerConfig,
    h_ad: &Matrix,
) -> Result<Matrix, AucError> {
    cfg.validate()?;
    if h_ad.cols() != cfg.d {
        return Err(AucError::WidthMismatch { got: h_ad.cols(), want: cfg.d });
    }
    let mut tape = Tape::new();
    let ctx = NetCtx::evaluation(params);
    let h = tape.constant(h_ad.clone());
    let mut updates = Vec::new();
    let t = slot_tokens_tape(&mut tape, &ctx, cfg, h, &mut updates);
    let t_t = tape.transpose(t);
    let scores = tape.matmul(h, t_t);
    Ok(tape.value(scores).clone())
}

/// Re-derives the selection distribution from cached affinity scores under
/// a new bid profile, skipping the refinement stack. Matches the tape path
/// bit for bit: same multiplication order, same stabilized column softmax.
/// Misreport searches lean on this, since scores do not depend on bids.
pub fn rescore_bids(
    scores: &Matrix,
    w_z: f64,
    qctr: &[f64],
    bids: &[f64],
) -> Result<Matrix, AucError> {
    let n = scores.rows();
    if qctr.len() != n {
        return Err(AucError::RowCount { got: qctr.len(), want: n });
    }
    if bids.len() != n {
        return Err(AucError::RowCount { got: bids.len(), want: n });
    }
    check_bids(bids)?;
    let scale = w_z.exp();
    let logits =
        Matrix::from_fn(n, scores.cols(), |j, s| scores.get(j, s) + qctr[j] * bids[j] * scale);
    Ok(logits.transpose().row_softmax().transpose())
}

/// Inference-mode generator; rejects nonpositive bids and shape drift.
pub fn generator_scores(
    params: &ParamStore,
    cfg: &AucFormerConfig,
    h_ad: &Matrix,
    qctr: &[f64],
    bids: &[f64],
) -> Result<Allocation, AucError> {
    cfg.validate()?;
    if h_ad.cols() != cfg.d {
        return Err(AucError::WidthMismatch { got: h_ad.cols(), want: cfg.d });
    }
    let n = h_ad.rows();
    if qctr.len() != n {
        return Err(AucError::RowCount { got: qctr.len(), want: n });
    }
    if bids.len() != n {
        return Err(AucError::RowCount { got: bids.len(), want: n });
    }
    check_bids(bids)?;
    let mut tape = Tape::new();
    let ctx = NetCtx::evaluation(params);
    let h = tape.constant(h_ad.clone());
    let q = tape.constant(Matrix::from_vec(n, 1, qctr.to_vec()).expect("length checked"));
    let b = tape.constant(Matrix::from_vec(n, 1, bids.to_vec()).expect("length checked"));
    let mut updates = Vec::new();
    let (scores, z) = generator_scores_tape(&mut tape, &ctx, cfg, h, q, b, &mut updates);
    Ok(Allocation { scores: tape.value(scores).clone(), z: tape.value(z).clone() })
}

/// Greedy masked selection with some ads globally excluded: slot k takes the
/// highest-z unassigned candidate, ties to the lowest index.
pub fn greedy_select_masked(z: &Matrix, banned: &[usize]) -> Result<Vec<usize>, AucError> {
    let (n, k) = (z.rows(), z.cols());
    let available = n - banned.iter().filter(|&&b| b < n).count();
    if k > available {
        return Err(AucError::TooManySlots { k, n: available });
    }
    let mut taken = vec![false; n];
    for &b in banned {
        if b < n {
            taken[b] = true;
        }
    }
    let mut slate = Vec::with_capacity(k);
    for slot in 0..k {
        let mut best: Option<usize> = None;
        for j in 0..n {
            if taken[j] {
                continue;
            }
            if best.map_or(true, |b| z.get(j, slot) > z.get(b, slot)) {
                best = Some(j);
            }
        }
        let j = best.expect("availability checked up front");
        taken[j] = true;
        slate.push(j);
    }
    Ok(slate)
}

/// Greedy masked selection over all candidates; see [`greedy_select_masked`].
pub fn greedy_select(z: &Matrix) -> Result<Vec<usize>, AucError> {
    greedy_select_masked(z, &[])
}

/// Evaluator on tape: per-slot tokens concat(winner state, slot embedding,
/// user embedding) projected to d, `m_e` self-attention layers, sigmoid MLP.
/// Slot embeddings are the evaluator's own, separate from the generator's.
pub fn evaluator_forward_tape(
    tape: &mut Tape,
    ctx: &NetCtx,
    cfg: &AucFormerConfig,
    h_slate: Var,
    e_u: Var,
    updates: &mut Vec<DiceUpdate>,
) -> Var {
    evaluator_forward_prefix_tape(tape, ctx, cfg, h_slate, e_u, updates)
}

/// Evaluator over a slate occupying the first `j <= K` slots, where `j` is
/// the row count of `h_slate`. Counterfactual slates under candidate bans
/// can come up short; they keep the prefix slot embeddings. An empty slate
/// yields an empty column.
pub fn evaluator_forward_prefix_tape(
    tape: &mut Tape,
    ctx: &NetCtx,
    cfg: &AucFormerConfig,
    h_slate: Var,
    e_u: Var,
    updates: &mut Vec<DiceUpdate>,
) -> Var {
    let j = tape.value(h_slate).rows();
    debug_assert!(j <= cfg.k, "slate of {j} rows exceeds {} slots", cfg.k);
    if j == 0 {
        return tape.constant(Matrix::zeros(0, 1));
    }
    let slot_full = tape.leaf_mode(ctx.params, "aucformer/eval/slot_emb", ctx.mode);
    let slot_emb = if j == cfg.k {
        slot_full
    } else {
        let rows: Vec<Option<usize>> = (0..j).map(Some).collect();
        tape.gather_rows(slot_full, &rows)
    };
    let e_rep = tape.repeat_rows(e_u, j);
    let he = tape.concat_cols(h_slate, slot_emb);
    let x = tape.concat_cols(he, e_rep);
    let mut h = linear(tape, ctx, x, "aucformer/eval/in_proj_w", "aucformer/eval/in_proj_b");
    for i in 0..cfg.m_e {
        h = cluster_attention_layer_tape(
            tape,
            ctx,
            &format!("aucformer/eval/layer{i}"),
            h,
            None,
            cfg.n_h,
            updates,
        );
    }
    mlp_head_tape(tape, ctx, "aucformer/eval/head", h, updates)
}

/// Inference-mode evaluator over the winning slate's states in slot order.
pub fn evaluator_forward(
    params: &ParamStore,
    cfg: &AucFormerConfig,
    h_slate: &Matrix,
    e_u: &Matrix,
) -> Result<Matrix, AucError> {
    cfg.validate()?;
    if h_slate.rows() != cfg.k {
        return Err(AucError::RowCount { got: h_slate.rows(), want: cfg.k });
    }
    if h_slate.cols() != cfg.d || e_u.cols() != cfg.d {
        return Err(AucError::WidthMismatch { got: h_slate.cols().max(e_u.cols()), want: cfg.d });
    }
    let mut tape = Tape::new();
    let ctx = NetCtx::evaluation(params);
    let h = tape.constant(h_slate.clone());
    let e = tape.constant(e_u.clone());
    let mut updates = Vec::new();
    let q = evaluator_forward_tape(&mut tape, &ctx, cfg, h, e, &mut updates);
    Ok(tape.value(q).clone())
}

/// Inference-mode evaluator for slates of `j <= K` rows sitting in the slot
/// prefix. Zero rows produce a zero-row column.
pub fn evaluator_forward_prefix(
    params: &ParamStore,
    cfg: &AucFormerConfig,
    h_slate: &Matrix,
    e_u: &Matrix,
) -> Result<Matrix, AucError> {
    cfg.validate()?;
    if h_slate.rows() > cfg.k {
        return Err(AucError::TooManySlots { k: h_slate.rows(), n: cfg.k });
    }
    if (h_slate.rows() > 0 && h_slate.cols() != cfg.d) || e_u.cols() != cfg.d {
        return Err(AucError::WidthMismatch { got: h_slate.cols().max(e_u.cols()), want: cfg.d });
    }
    let mut tape = Tape::new();
    let ctx = NetCtx::evaluation(params);
    let h = tape.constant(h_slate.clone());
    let e = tape.constant(e_u.clone());
    let mut updates = Vec::new();
    let q = evaluator_forward_prefix_tape(&mut tape, &ctx, cfg, h, e, &mut updates);
    Ok(tape.value(q).clone())
}

/// The K x (K-1) matrix whose row i lists the other winners' bids in slot
/// order, for feeding the payment net everything except the own bid.
pub fn excluded_bids(bids: &[f64]) -> Matrix {
    let k = bids.len();
    Matrix::from_fn(k, k.saturating_sub(1), |i, j| {
        let other = if j < i { j } else { j + 1 };
        bids[other]
    })
}

/// Payment rates and payments on tape. Each winner's rate sees its own
/// state, its permutation-aware click estimate, and the other winners' bids,
/// never its own bid: IR holds by construction because the sigmoidal rate is
/// multiplied by the bid.
pub fn payment_forward_tape(
    tape: &mut Tape,
    ctx: &NetCtx,
    cfg: &AucFormerConfig,
    h_slate: Var,
    q_slots: Var,
    bids: &[f64],
    updates: &mut Vec<DiceUpdate>,
) -> (Var, Var) {
    assert_eq!(bids.len(), cfg.k, "one bid per slot");
    let b_minus = tape.constant(excluded_bids(bids));
    let hq = tape.concat_cols(h_slate, q_slots);
    let x = tape.concat_cols(hq, b_minus);
    let rate = mlp_head_tape(tape, ctx, "aucformer/pay", x, updates);
    let b = tape.constant(Matrix::from_vec(cfg.k, 1, bids.to_vec()).expect("length asserted"));
    let payment = tape.mul(rate, b);
    (rate, payment)
}

/// Inference-mode pricing of a slate.
pub fn payment_forward(
    params: &ParamStore,
    cfg: &AucFormerConfig,
    h_slate: &Matrix,
    q_slots: &Matrix,
    bids: &[f64],
) -> Result<PaymentResult, AucError> {
    cfg.validate()?;
    if h_slate.rows() != cfg.k || q_slots.rows() != cfg.k || bids.len() != cfg.k {
        return Err(AucError::RowCount {
            got: h_slate.rows().min(q_slots.rows()).min(bids.len()),
            want: cfg.k,
        });
    }
    if h_slate.cols() != cfg.d {
        return Err(AucError::WidthMismatch { got: h_slate.cols(), want: cfg.d });
    }
    check_bids(bids)?;
    let mut tape = Tape::new();
    let ctx = NetCtx::evaluation(params);
    let h = tape.constant(h_slate.clone());
    let q = tape.constant(q_slots.clone());
    let mut updates = Vec::new();
    let (rate, payment) = payment_forward_tape(&mut tape, &ctx, cfg, h, q, bids, &mut updates);
    Ok(PaymentResult {
        rate: tape.value(rate).data().to_vec(),
        payment: tape.value(payment).data().to_vec(),
        q_slots: q_slots.data().to_vec(),
    })
}

/// Generalized second price baseline: rank by qctr * bid descending (ties to
/// the lowest index); slot i pays the next-ranked score over its own qctr,
/// clamped to its bid, and 0 with no runner-up.
pub fn gsp_allocate(
    qctr: &[f64],
    bids: &[f64],
    k: usize,
) -> Result<(Vec<usize>, Vec<f64>), AucError> {
    let n = qctr.len();
    if bids.len() != n {
        return Err(AucError::RowCount { got: bids.len(), want: n });
    }
    if k > n {
        return Err(AucError::TooManySlots { k, n });
    }
    check_bids(bids)?;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        let (sa, sb) = (qctr[a] * bids[a], qctr[b] * bids[b]);
        sb.partial_cmp(&sa).expect("finite scores").then(a.cmp(&b))
    });
    let winners: Vec<usize> = order[..k].to_vec();
    let mut payments = Vec::with_capacity(k);
    for (rank, &j) in winners.iter().enumerate() {
        let price = match order.get(rank + 1) {
            Some(&next) => (qctr[next] * bids[next] / qctr[j]).min(bids[j]),
            None => 0.0,
        };
        payments.push(price);
    }
    Ok((winners, payments))
}
