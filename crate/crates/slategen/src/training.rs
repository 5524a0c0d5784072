//! The four-phase schedule. Phase one pre-trains embeddings, encoder, and
//! click head on exposed-plus-sampled-negative click labels. Phase two
//! freezes the embeddings and fits the slate evaluator on exposed slates.
//! Phase three freezes everything but the allocator and pushes it toward
//! slates of higher marginal value. Phase four tunes the payment net for
//! revenue under an augmented-Lagrangian regret penalty with periodic dual
//! ascent. Freezing is structural: a frozen subnetwork enters the tape
//! without gradient slots, so its parameters provably receive zero.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::aucformer::{
    evaluator_forward_tape, generator_scores_tape, greedy_select, greedy_select_masked,
    payment_forward, payment_forward_tape, rescore_bids, AucError,
};
use crate::feature_store::{AdId, FeatureStore, UserId};
use crate::numerics::{
    fold_running_stats, Matrix, ParamError, ParamMode, ParamStore, Tape, Var, DICE_MOMENTUM,
};
use crate::pipeline::{
    encode_request_tape, gather_rows_value, AllocationRule, EncodeModes, EncodedValues,
    MechanismCache, ModelConfig, PipelineError,
};
use crate::recformer::NetCtx;

pub const BCE_CLAMP: f64 = 1e-7;

#[derive(Debug, Error, PartialEq)]
pub enum TrainError {
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Auc(#[from] AucError),
    #[error(transparent)]
    Param(#[from] ParamError),
    #[error("batch is empty")]
    EmptyBatch,
    #[error("request {request_id} carries no ads")]
    EmptySample { request_id: u64 },
    #[error("request {request_id} exposes {got} ads but the slate has {want} slots")]
    SlotCount { request_id: u64, got: usize, want: usize },
    #[error("asked for {want} negatives but only {have} candidates carry sampling mass")]
    NotEnoughNegatives { want: usize, have: usize },
    #[error("item lists {got} {what} for {want} candidates")]
    ItemLength { what: &'static str, got: usize, want: usize },
}

/// One logged request: the slate that actually served (with in-request
/// click labels, slot order preserved) plus sampled unexposed ads carrying
/// platform-wide click labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RequestSample {
    pub request_id: u64,
    pub user_id: UserId,
    pub exposed: Vec<(AdId, bool)>,
    pub unexposed: Vec<(AdId, bool)>,
}

impl RequestSample {
    fn ids_and_labels(&self) -> (Vec<AdId>, Vec<bool>) {
        let ids = self.exposed.iter().chain(&self.unexposed).map(|&(id, _)| id).collect();
        let labels = self.exposed.iter().chain(&self.unexposed).map(|&(_, c)| c).collect();
        (ids, labels)
    }
}

/// Which parameters a phase may move. Dice running statistics never train;
/// they advance by EMA folds outside the gradient path.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Pretrain,
    Reward,
    Rlaf,
    Payment,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Pretrain => "pretrain",
            Phase::Reward => "reward",
            Phase::Rlaf => "rlaf",
            Phase::Payment => "payment",
        }
    }

    pub fn trainable(self, name: &str) -> bool {
        if name.ends_with("_mean") || name.ends_with("_var") {
            return false;
        }
        match self {
            Phase::Pretrain => name.starts_with("emb/") || name.starts_with("recformer/"),
            Phase::Reward => {
                name.starts_with("recformer/") || name.starts_with("aucformer/eval/")
            }
            // Slot tokens and the bid-bias scale only: the refine stack is a
            // frozen feature map once allocation training starts.
            Phase::Rlaf => name == "aucformer/slot_emb" || name == "aucformer/w_z",
            Phase::Payment => name.starts_with("aucformer/pay/"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-3, beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }
}

/// Adam with bias correction, state keyed by parameter name. Build one per
/// phase: moments must not leak across freeze boundaries.
#[derive(Debug, Clone)]
pub struct Adam {
    cfg: AdamConfig,
    t: u64,
    moments: BTreeMap<String, (Matrix, Matrix)>,
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Self {
        Adam { cfg, t: 0, moments: BTreeMap::new() }
    }

    /// One update over the currently-trainable parameters, reading the
    /// accumulated gradient slots. Non-trainable parameters are skipped
    /// entirely, so the store-level freeze guard never trips.
    pub fn step(
        &mut self,
        store: &mut ParamStore,
        trainable: &dyn Fn(&str) -> bool,
    ) -> Result<(), ParamError> {
        self.t += 1;
        let c1 = 1.0 - self.cfg.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.cfg.beta2.powi(self.t as i32);
        let names: Vec<String> =
            store.names().filter(|n| trainable(n)).map(str::to_string).collect();
        for name in names {
            let g = store.grad(&name).clone();
            let (m, v) = self
                .moments
                .entry(name.clone())
                .or_insert_with(|| (Matrix::zeros(g.rows(), g.cols()), Matrix::zeros(g.rows(), g.cols())));
            *m = m.scale(self.cfg.beta1).add(&g.scale(1.0 - self.cfg.beta1)).expect("shapes fixed");
            *v = v
                .scale(self.cfg.beta2)
                .add(&g.mul_elem(&g).expect("shapes fixed").scale(1.0 - self.cfg.beta2))
                .expect("shapes fixed");
            let (lr, eps) = (self.cfg.lr, self.cfg.epsilon);
            let delta = m
                .zip_map(v, |mi, vi| -lr * (mi / c1) / ((vi / c2).sqrt() + eps))
                .expect("shapes fixed");
            store.apply_update(&name, &delta, trainable)?;
        }
        Ok(())
    }
}

/// Word-frequency smoothing for negative sampling.
pub fn smoothed_mass(count: u64) -> f64 {
    (count as f64).powf(0.75)
}

/// Samples `n_s` distinct ad ids with probability proportional to
/// count^0.75, without replacement. Zero-count ads carry zero mass and are
/// never drawn; asking for more negatives than carry mass is an error.
pub fn sample_negatives<R: Rng>(
    counts: &[(AdId, u64)],
    n_s: usize,
    rng: &mut R,
) -> Result<Vec<AdId>, TrainError> {
    let feasible = counts.iter().filter(|&&(_, c)| c > 0).count();
    if n_s > feasible {
        return Err(TrainError::NotEnoughNegatives { want: n_s, have: feasible });
    }
    let mut mass: Vec<f64> = counts.iter().map(|&(_, c)| smoothed_mass(c)).collect();
    let mut picked = Vec::with_capacity(n_s);
    for _ in 0..n_s {
        let total: f64 = mass.iter().sum();
        let mut x = rng.gen_range(0.0..total);
        let mut chosen = None;
        for (i, &w) in mass.iter().enumerate() {
            if w <= 0.0 {
                continue;
            }
            if x < w {
                chosen = Some(i);
                break;
            }
            x -= w;
        }
        // Rounding can walk x past the last bucket; take the last live one.
        let i = chosen
            .unwrap_or_else(|| mass.iter().rposition(|&w| w > 0.0).expect("mass checked above"));
        picked.push(counts[i].0);
        mass[i] = 0.0;
    }
    Ok(picked)
}

/// Sum over items of the binary cross-entropy between `probs` (a column)
/// and the labels, with probabilities clamped away from the log poles.
pub fn bce_sum_tape(tape: &mut Tape, probs: Var, labels: &[bool]) -> Var {
    let n = labels.len();
    debug_assert_eq!(tape.value(probs).rows(), n);
    let q = tape.clamp(probs, BCE_CLAMP, 1.0 - BCE_CLAMP);
    let y = tape.constant(Matrix::from_fn(n, 1, |i, _| if labels[i] { 1.0 } else { 0.0 }));
    let y_not = tape.constant(Matrix::from_fn(n, 1, |i, _| if labels[i] { 0.0 } else { 1.0 }));
    let ln_q = tape.ln(q);
    let neg_q = tape.scale(q, -1.0);
    let one_minus_q = tape.add_const(neg_q, 1.0);
    let ln_one_minus = tape.ln(one_minus_q);
    let pos = tape.mul(y, ln_q);
    let neg = tape.mul(y_not, ln_one_minus);
    let both = tape.add(pos, neg);
    let total = tape.sum_all(both);
    tape.scale(total, -1.0)
}

fn mean_of(tape: &mut Tape, terms: &[Var]) -> Var {
    let mut total = terms[0];
    for &t in &terms[1..] {
        total = tape.add(total, t);
    }
    tape.scale(total, 1.0 / terms.len() as f64)
}

/// Phase one: embeddings, encoder, and click head all learn. The loss is
/// the batch mean of per-request BCE sums over exposed and sampled ads.
pub fn pretrain_step(
    store: &mut ParamStore,
    cfg: &ModelConfig,
    fs: &FeatureStore,
    batch: &[RequestSample],
    opt: &mut Adam,
) -> Result<f64, TrainError> {
    if batch.is_empty() {
        return Err(TrainError::EmptyBatch);
    }
    store.zero_grads();
    let mut tape = Tape::new();
    let mut updates = Vec::new();
    let mut per_sample = Vec::with_capacity(batch.len());
    for s in batch {
        let (ids, labels) = s.ids_and_labels();
        if ids.is_empty() {
            return Err(TrainError::EmptySample { request_id: s.request_id });
        }
        let enc = encode_request_tape(
            &mut tape,
            store,
            cfg,
            fs,
            s.user_id,
            &ids,
            EncodeModes::pretrain(),
            &mut updates,
        )?;
        per_sample.push(bce_sum_tape(&mut tape, enc.qctr, &labels));
    }
    let loss = mean_of(&mut tape, &per_sample);
    let grads = tape.backward(loss);
    tape.write_grads(&grads, store);
    opt.step(store, &|n| Phase::Pretrain.trainable(n))?;
    fold_running_stats(&tape, &updates, store, DICE_MOMENTUM);
    Ok(tape.value(loss).scalar())
}

/// Phase two: embeddings freeze; encoder and evaluator learn. The loss is
/// BCE over the K exposed ads scored by the slot-aware evaluator, so the
/// evaluator sees the slate exactly as it served.
pub fn reward_model_step(
    store: &mut ParamStore,
    cfg: &ModelConfig,
    fs: &FeatureStore,
    batch: &[RequestSample],
    opt: &mut Adam,
) -> Result<f64, TrainError> {
    if batch.is_empty() {
        return Err(TrainError::EmptyBatch);
    }
    if !cfg.uses_learned_auction() {
        return Err(PipelineError::NoLearnedAuction.into());
    }
    let k = cfg.k();
    store.zero_grads();
    let mut tape = Tape::new();
    let mut updates = Vec::new();
    let mut per_sample = Vec::with_capacity(batch.len());
    for s in batch {
        if s.exposed.len() != k {
            return Err(TrainError::SlotCount {
                request_id: s.request_id,
                got: s.exposed.len(),
                want: k,
            });
        }
        // The encoder still sees the full exposed+unexposed set; only the
        // exposed rows reach the loss.
        let (ids, _) = s.ids_and_labels();
        let enc = encode_request_tape(
            &mut tape,
            store,
            cfg,
            fs,
            s.user_id,
            &ids,
            EncodeModes::reward(),
            &mut updates,
        )?;
        let slate_rows: Vec<Option<usize>> = (0..k).map(Some).collect();
        let h_slate = tape.gather_rows(enc.h_ad, &slate_rows);
        let ctx = NetCtx { params: store, mode: ParamMode::Trainable, training: true };
        let q = evaluator_forward_tape(&mut tape, &ctx, &cfg.auc, h_slate, enc.e_u, &mut updates);
        let labels: Vec<bool> = s.exposed.iter().map(|&(_, c)| c).collect();
        per_sample.push(bce_sum_tape(&mut tape, q, &labels));
    }
    let loss = mean_of(&mut tape, &per_sample);
    let grads = tape.backward(loss);
    tape.write_grads(&grads, store);
    opt.step(store, &|n| Phase::Reward.trainable(n))?;
    fold_running_stats(&tape, &updates, store, DICE_MOMENTUM);
    Ok(tape.value(loss).scalar())
}

/// Greedy slate with one candidate banned everywhere. When the ban leaves
/// fewer candidates than slots, the slate shrinks to the slot prefix; with
/// nobody left it is empty.
fn masked_slate(z: &Matrix, banned: usize) -> Result<Vec<usize>, AucError> {
    match greedy_select_masked(z, &[banned]) {
        Ok(slate) => Ok(slate),
        Err(AucError::TooManySlots { .. }) => {
            let k_short = z.rows().saturating_sub(1);
            if k_short == 0 {
                return Ok(Vec::new());
            }
            let z_short = Matrix::from_fn(z.rows(), k_short, |i, j| z.get(i, j));
            greedy_select_masked(&z_short, &[banned])
        }
        Err(e) => Err(e),
    }
}

/// Marginal slate value per winner: the value of the served slate minus the
/// value of the best slate with that winner banned, both metered by the
/// frozen evaluator in currency (bid times slate-aware pCTR).
pub fn compute_rlaf_rewards(
    params: &ParamStore,
    cfg: &ModelConfig,
    enc: &EncodedValues,
    bids: &[f64],
) -> Result<(Vec<usize>, Vec<f64>), TrainError> {
    let cache = MechanismCache::new(params, cfg, enc, AllocationRule::Learned)?;
    let scores = cache.affinities().expect("learned rule caches affinities");
    let w_z = params.get("aucformer/w_z").scalar();
    let z = rescore_bids(scores, w_z, &enc.qctr, bids)?;
    let slate = greedy_select(&z)?;
    let value_of = |members: &[usize]| -> Result<f64, TrainError> {
        let q = cache.q_slots(members)?;
        Ok(members.iter().zip(&q).map(|(&j, &qj)| bids[j] * qj).sum())
    };
    let base = value_of(&slate)?;
    let mut rewards = Vec::with_capacity(slate.len());
    for &y in &slate {
        let rival = masked_slate(&z, y)?;
        rewards.push(base - value_of(&rival)?);
    }
    Ok((slate, rewards))
}

/// Everything phase three needs for one request, with the frozen encoder
/// outputs precomputed: the allocator is the only live subnetwork, so the
/// expensive encode happens once per item, not once per step.
#[derive(Debug, Clone, PartialEq)]
pub struct RlafItem {
    pub enc: EncodedValues,
    pub bids: Vec<f64>,
    pub slate: Vec<usize>,
    pub rewards: Vec<f64>,
}

pub fn prepare_rlaf_item(
    params: &ParamStore,
    cfg: &ModelConfig,
    enc: EncodedValues,
    bids: Vec<f64>,
) -> Result<RlafItem, TrainError> {
    let (slate, rewards) = compute_rlaf_rewards(params, cfg, &enc, &bids)?;
    Ok(RlafItem { enc, bids, slate, rewards })
}

/// Phase three: policy-gradient ascent on the allocator. The served slate
/// is the single action; its per-slot log-selection-probabilities are
/// weighted by the precomputed marginal rewards.
pub fn rlaf_step(
    store: &mut ParamStore,
    cfg: &ModelConfig,
    batch: &[RlafItem],
    opt: &mut Adam,
) -> Result<f64, TrainError> {
    if batch.is_empty() {
        return Err(TrainError::EmptyBatch);
    }
    if !cfg.uses_learned_auction() {
        return Err(PipelineError::NoLearnedAuction.into());
    }
    store.zero_grads();
    let mut tape = Tape::new();
    let mut updates = Vec::new();
    let mut per_request = Vec::with_capacity(batch.len());
    for item in batch {
        let n = item.enc.h_ad.rows();
        if item.bids.len() != n {
            return Err(TrainError::ItemLength { what: "bids", got: item.bids.len(), want: n });
        }
        if item.rewards.len() != item.slate.len() {
            return Err(TrainError::ItemLength {
                what: "rewards",
                got: item.rewards.len(),
                want: item.slate.len(),
            });
        }
        // Inference statistics: the slate was served (and its rewards were
        // metered) in inference mode, so the taped selection probabilities
        // must describe the same distribution.
        let ctx = NetCtx { params: store, mode: ParamMode::Trainable, training: false };
        let h_ad = tape.constant(item.enc.h_ad.clone());
        let qctr = tape.constant(Matrix::from_fn(n, 1, |i, _| item.enc.qctr[i]));
        let bids = tape.constant(Matrix::from_fn(n, 1, |i, _| item.bids[i]));
        let (_, z) = generator_scores_tape(&mut tape, &ctx, &cfg.auc, h_ad, qctr, bids, &mut updates);
        let picks: Vec<(usize, usize)> = item.slate.iter().enumerate().map(|(s, &j)| (j, s)).collect();
        let z_picked = tape.gather_elems(z, &picks);
        let z_safe = tape.clamp(z_picked, 1e-300, 1.0);
        let log_z = tape.ln(z_safe);
        let r = tape.constant(Matrix::from_fn(item.rewards.len(), 1, |i, _| item.rewards[i]));
        let weighted = tape.mul(log_z, r);
        per_request.push(tape.sum_all(weighted));
    }
    let gain = mean_of(&mut tape, &per_request);
    let loss = tape.scale(gain, -1.0);
    let grads = tape.backward(loss);
    tape.write_grads(&grads, store);
    opt.step(store, &|n| Phase::Rlaf.trainable(n))?;
    fold_running_stats(&tape, &updates, store, DICE_MOMENTUM);
    Ok(tape.value(loss).scalar())
}

/// Multipliers for the payment phase's regret constraints, one per ad that
/// has shown positive empirical regret, plus the shared penalty weight.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LagrangianState {
    pub lambda: BTreeMap<AdId, f64>,
    pub rho: f64,
    pub update_period: usize,
}

impl LagrangianState {
    pub fn new(rho: f64, update_period: usize) -> Self {
        LagrangianState { lambda: BTreeMap::new(), rho, update_period }
    }
}

/// Dual ascent: each multiplier climbs by rho times its measured regret and
/// never drops below zero. Call once per update period with per-ad regrets
/// aggregated over the window.
pub fn dual_update(state: &mut LagrangianState, regrets: &BTreeMap<AdId, f64>) {
    for (&ad, &tgt) in regrets {
        debug_assert!(tgt >= 0.0, "regret estimates are floored at zero");
        let lam = state.lambda.entry(ad).or_insert(0.0);
        *lam = (*lam + state.rho * tgt).max(0.0);
    }
}

/// One request for the payment phase, encoder outputs precomputed.
/// `values` are the advertisers' private values, aligned with candidates.
#[derive(Debug, Clone, PartialEq)]
pub struct PaymentItem {
    pub ad_ids: Vec<AdId>,
    pub enc: EncodedValues,
    pub bids: Vec<f64>,
    pub values: Vec<f64>,
}

/// What one payment step measured, before any dual update.
#[derive(Debug, Clone, PartialEq)]
pub struct PaymentReport {
    pub loss: f64,
    /// Mean per-request expected revenue at the pre-step parameters.
    pub revenue: f64,
    /// Winner-level empirical regrets measured this step (floored at zero).
    pub regrets: Vec<(AdId, f64)>,
    pub mean_regret: f64,
}

/// Phase four: everything but the payment net is frozen. Revenue is pushed
/// up while each winner's empirical regret, re-measured by a grid search
/// over bid misreports at the current prices, is pushed down through its
/// multiplier and a quadratic penalty. Individual rationality cannot break
/// (rates are sigmoids), and the step re-asserts it on every priced slate.
pub fn payment_step(
    store: &mut ParamStore,
    cfg: &ModelConfig,
    batch: &[PaymentItem],
    lagr: &LagrangianState,
    grid: &[f64],
    opt: &mut Adam,
) -> Result<PaymentReport, TrainError> {
    if batch.is_empty() {
        return Err(TrainError::EmptyBatch);
    }
    if !cfg.uses_learned_auction() {
        return Err(PipelineError::NoLearnedAuction.into());
    }
    store.zero_grads();
    let mut tape = Tape::new();
    let mut updates = Vec::new();
    let mut regrets: Vec<(AdId, f64)> = Vec::new();
    let mut revenue_sum = 0.0;
    let mut per_item = Vec::with_capacity(batch.len());
    for item in batch {
        let n = item.enc.h_ad.rows();
        for (what, len) in
            [("ad ids", item.ad_ids.len()), ("bids", item.bids.len()), ("values", item.values.len())]
        {
            if len != n {
                return Err(TrainError::ItemLength { what, got: len, want: n });
            }
        }
        let cache = MechanismCache::new(store, cfg, &item.enc, AllocationRule::Learned)?;
        let scores = cache.affinities().expect("learned rule caches affinities").clone();
        let w_z = store.get("aucformer/w_z").scalar();
        let z = rescore_bids(&scores, w_z, &item.enc.qctr, &item.bids)?;
        let slate = greedy_select(&z)?;
        let q = cache.q_slots(&slate)?;
        let h_slate_m = gather_rows_value(&item.enc.h_ad, &slate);
        let q_m = Matrix::from_fn(q.len(), 1, |i, _| q[i]);
        let slate_bids: Vec<f64> = slate.iter().map(|&j| item.bids[j]).collect();

        // Truthful pricing, value level, for the misreport search.
        let truthful = payment_forward(store, &cfg.auc, &h_slate_m, &q_m, &slate_bids)?;
        for (s, (&p, &b)) in truthful.payment.iter().zip(&slate_bids).enumerate() {
            assert!(p <= b, "slot {s} charged {p} over the bid {b}");
        }

        // Truthful pricing on tape: the revenue term and the truthful half
        // of each regret term. Inference statistics, not batch statistics:
        // the taped utilities must equal the measured ones, or the penalty
        // can disagree with the grid search about the sign of the regret.
        let ctx = NetCtx { params: store, mode: ParamMode::Trainable, training: false };
        let h_slate = tape.constant(h_slate_m);
        let q_const = tape.constant(q_m);
        let (rate, payment) =
            payment_forward_tape(&mut tape, &ctx, &cfg.auc, h_slate, q_const, &slate_bids, &mut updates);
        let slot_revenue = tape.mul(payment, q_const);
        let item_revenue = tape.sum_all(slot_revenue);
        revenue_sum += tape.value(item_revenue).scalar();
        let mut terms = vec![tape.scale(item_revenue, -1.0)];

        for (s, &j) in slate.iter().enumerate() {
            let v = item.values[j];
            let b = item.bids[j];
            let u_truth = (v - truthful.payment[s]) * q[s];

            // Best misreport on the gamma grid, at the current prices.
            let mut best: Option<(f64, f64, Vec<usize>, usize, Vec<f64>)> = None;
            for &gamma in grid {
                if gamma == 1.0 {
                    continue;
                }
                let mut shaded = item.bids.clone();
                shaded[j] = gamma * b;
                let z_shaded = rescore_bids(&scores, w_z, &item.enc.qctr, &shaded)?;
                let slate_shaded = greedy_select(&z_shaded)?;
                let Some(slot) = slate_shaded.iter().position(|&x| x == j) else {
                    // Off the slate: utility zero, never beats the floor.
                    continue;
                };
                let q_shaded = cache.q_slots(&slate_shaded)?;
                let h_shaded = gather_rows_value(&item.enc.h_ad, &slate_shaded);
                let q_shaded_m = Matrix::from_fn(q_shaded.len(), 1, |i, _| q_shaded[i]);
                let bids_shaded: Vec<f64> = slate_shaded.iter().map(|&x| shaded[x]).collect();
                let priced = payment_forward(store, &cfg.auc, &h_shaded, &q_shaded_m, &bids_shaded)?;
                let u_shaded = (v - priced.payment[slot]) * q_shaded[slot];
                let gain = u_shaded - u_truth;
                let better = best.as_ref().map_or(true, |(g, ..)| gain > *g);
                if better {
                    best = Some((gain, gamma, slate_shaded, slot, q_shaded));
                }
            }
            let gain = best.as_ref().map_or(0.0, |(g, ..)| *g);
            regrets.push((item.ad_ids[j], gain.max(0.0)));
            if gain <= 0.0 {
                continue;
            }
            let (_, gamma, slate_shaded, slot, q_shaded) = best.expect("positive gain recorded");

            // The regret at the fixed best misreport, differentiable in the
            // payment parameters through both utilities.
            let mut shaded = item.bids.clone();
            shaded[j] = gamma * b;
            let bids_shaded: Vec<f64> = slate_shaded.iter().map(|&x| shaded[x]).collect();
            let h_shaded = tape.constant(gather_rows_value(&item.enc.h_ad, &slate_shaded));
            let q_shaded_const =
                tape.constant(Matrix::from_fn(q_shaded.len(), 1, |i, _| q_shaded[i]));
            let (rate_shaded, _) = payment_forward_tape(
                &mut tape,
                &ctx,
                &cfg.auc,
                h_shaded,
                q_shaded_const,
                &bids_shaded,
                &mut updates,
            );
            let u_shaded_var = {
                let r = tape.gather_elems(rate_shaded, &[(slot, 0)]);
                let p = tape.scale(r, gamma * b);
                let neg_p = tape.scale(p, -1.0);
                let margin = tape.add_const(neg_p, v);
                tape.scale(margin, q_shaded[slot])
            };
            let u_truth_var = {
                let r = tape.gather_elems(rate, &[(s, 0)]);
                let p = tape.scale(r, b);
                let neg_p = tape.scale(p, -1.0);
                let margin = tape.add_const(neg_p, v);
                tape.scale(margin, q[s])
            };
            let tgt = tape.sub(u_shaded_var, u_truth_var);
            let lambda = lagr.lambda.get(&item.ad_ids[j]).copied().unwrap_or(0.0);
            if lambda != 0.0 {
                terms.push(tape.scale(tgt, lambda));
            }
            if lagr.rho != 0.0 {
                let tgt_sq = tape.mul(tgt, tgt);
                terms.push(tape.scale(tgt_sq, 0.5 * lagr.rho));
            }
        }
        let mut item_loss = terms[0];
        for &t in &terms[1..] {
            item_loss = tape.add(item_loss, t);
        }
        per_item.push(item_loss);
    }
    let loss = mean_of(&mut tape, &per_item);
    let grads = tape.backward(loss);
    tape.write_grads(&grads, store);
    opt.step(store, &|n| Phase::Payment.trainable(n))?;
    fold_running_stats(&tape, &updates, store, DICE_MOMENTUM);
    let mean_regret = if regrets.is_empty() {
        0.0
    } else {
        regrets.iter().map(|&(_, r)| r).sum::<f64>() / regrets.len() as f64
    };
    Ok(PaymentReport {
        loss: tape.value(loss).scalar(),
        revenue: revenue_sum / batch.len() as f64,
        regrets,
        mean_regret,
    })
}
