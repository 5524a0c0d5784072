//! Scratch: directional checks for the four desk-pipeline claims on a run dir.

use slategen::aucformer::{greedy_select, payment_forward, rescore_bids};
use slategen::harness::Experiment;
use slategen::numerics::{load_checkpoint, Matrix, ParamStore};
use slategen::pipeline::{encode_request, AllocationRule, MechanismCache};
use slategen::training::Phase;

fn main() {
    let out = std::env::args().nth(1).expect("usage: compare7 <out-dir>");
    let exp = Experiment::load(std::path::Path::new(&out), None).expect("load");

    let at = |phase: Option<Phase>| -> ParamStore {
        let mut store = exp.fresh_params().expect("params");
        if let Some(p) = phase {
            load_checkpoint(&exp.ckpt_path(p), &mut store).expect("ckpt");
        }
        store
    };

    let test = &exp.artifacts().test;
    let fresh = exp.split_metrics(&at(None), test, AllocationRule::Learned).unwrap();
    let pre = exp.split_metrics(&at(Some(Phase::Pretrain)), test, AllocationRule::Learned).unwrap();
    println!(
        "7a auc fresh {:.4} -> pretrain {:.4}   [{}]",
        fresh.auc.unwrap(),
        pre.auc.unwrap(),
        if (fresh.auc.unwrap() - 0.5).abs() <= 0.05 && pre.auc.unwrap() >= 0.70 { "pass" } else { "FAIL" }
    );

    let reward = exp.split_metrics(&at(Some(Phase::Reward)), test, AllocationRule::Learned).unwrap();
    let rlaf = exp.split_metrics(&at(Some(Phase::Rlaf)), test, AllocationRule::Learned).unwrap();
    println!(
        "7b erpm reward {:.1} -> rlaf {:.1}   [{}]",
        reward.erpm,
        rlaf.erpm,
        if rlaf.erpm > reward.erpm { "pass" } else { "FAIL" }
    );

    if !exp.ckpt_path(Phase::Payment).exists() {
        println!("(no payment ckpt; stopping at 7b)");
        return;
    }
    let rlaf_store = at(Some(Phase::Rlaf));
    let pay_store = at(Some(Phase::Payment));
    let tgt_init = mean_tgt(&exp, &rlaf_store);
    let tgt_paid = mean_tgt(&exp, &pay_store);
    let paid = exp.split_metrics(&pay_store, test, AllocationRule::Learned).unwrap();
    let erpm_ok = (paid.erpm - rlaf.erpm).abs() <= 0.20 * rlaf.erpm;
    println!(
        "7c tgt {:.4} -> {:.4} (cut {:.0}%)  erpm {:.1} vs {:.1} ({:+.1}%)   [{}]",
        tgt_init,
        tgt_paid,
        100.0 * (1.0 - tgt_paid / tgt_init),
        paid.erpm,
        rlaf.erpm,
        100.0 * (paid.erpm - rlaf.erpm) / rlaf.erpm,
        if tgt_paid <= 0.5 * tgt_init && erpm_ok { "pass" } else { "FAIL" }
    );

    let gsp = exp.split_metrics(&pay_store, test, AllocationRule::Gsp).unwrap();
    println!(
        "7d learned erpm {:.1} psi {:?} vs gsp erpm {:.1} psi {:?}   [{}]",
        paid.erpm,
        paid.psi,
        gsp.erpm,
        gsp.psi,
        if paid.erpm > gsp.erpm && paid.psi.unwrap() < gsp.psi.unwrap() { "pass" } else { "FAIL" }
    );
}

/// Mean best-misreport gain over winner-slots of the test split, gamma grid,
/// floored at zero per slot, zero-gain slots included in the mean.
fn mean_tgt(exp: &Experiment, store: &ParamStore) -> f64 {
    let cfg = exp.model().clone();
    let art = exp.artifacts();
    let grid: Vec<f64> = (1..=10).map(|j| j as f64 / 5.0).collect();
    let mut total = 0.0;
    let mut slots = 0usize;
    for req in &art.test {
        let enc = encode_request(store, &cfg, &art.store, req.user_id, &req.candidates).unwrap();
        let bids: Vec<f64> =
            req.candidates.iter().map(|&id| art.store.ad(id).unwrap().bid).collect();
        let values: Vec<f64> =
            req.candidates.iter().map(|&id| art.store.ad(id).unwrap().private_value).collect();
        let cache = MechanismCache::new(store, &cfg, &enc, AllocationRule::Learned).unwrap();
        let scores = cache.affinities().unwrap().clone();
        let w_z = store.get("aucformer/w_z").scalar();
        let z = rescore_bids(&scores, w_z, &enc.qctr, &bids).unwrap();
        let slate = greedy_select(&z).unwrap();
        let q = cache.q_slots(&slate).unwrap();
        let h = gather(&enc.h_ad, &slate);
        let qm = Matrix::from_fn(q.len(), 1, |i, _| q[i]);
        let sb: Vec<f64> = slate.iter().map(|&j| bids[j]).collect();
        let truthful = payment_forward(store, &cfg.auc, &h, &qm, &sb).unwrap();
        for (s, &j) in slate.iter().enumerate() {
            slots += 1;
            let u_t = (values[j] - truthful.payment[s]) * q[s];
            let mut best = 0.0f64;
            for &gamma in &grid {
                if gamma == 1.0 {
                    continue;
                }
                let mut shaded = bids.clone();
                shaded[j] = gamma * bids[j];
                let z2 = rescore_bids(&scores, w_z, &enc.qctr, &shaded).unwrap();
                let s2 = greedy_select(&z2).unwrap();
                let Some(slot) = s2.iter().position(|&x| x == j) else { continue };
                let q2 = cache.q_slots(&s2).unwrap();
                let h2 = gather(&enc.h_ad, &s2);
                let q2m = Matrix::from_fn(q2.len(), 1, |i, _| q2[i]);
                let b2: Vec<f64> = s2.iter().map(|&x| shaded[x]).collect();
                let p2 = payment_forward(store, &cfg.auc, &h2, &q2m, &b2).unwrap();
                let gain = (values[j] - p2.payment[slot]) * q2[slot] - u_t;
                if gain > best {
                    best = gain;
                }
            }
            total += best;
        }
    }
    total / slots as f64
}

fn gather(m: &Matrix, rows: &[usize]) -> Matrix {
    Matrix::from_fn(rows.len(), m.cols(), |i, j| m.get(rows[i], j))
}
