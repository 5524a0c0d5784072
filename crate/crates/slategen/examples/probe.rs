//! Scratch probe: deviation landscape at payment-init on an existing run dir.

use slategen::aucformer::{greedy_select, payment_forward, rescore_bids};
use slategen::harness::{Experiment, HarnessConfig};
use slategen::numerics::Matrix;
use slategen::pipeline::{encode_request, AllocationRule, MechanismCache};

fn main() {
    let out = std::env::args().nth(1).expect("usage: probe <out-dir> [ckpt]");
    let ckpt = std::env::args().nth(2).unwrap_or_else(|| "rlaf".into());
    let phase = match ckpt.as_str() {
        "pretrain" => slategen::training::Phase::Pretrain,
        "reward" => slategen::training::Phase::Reward,
        "rlaf" => slategen::training::Phase::Rlaf,
        _ => slategen::training::Phase::Payment,
    };
    let exp = Experiment::load(std::path::Path::new(&out), None).expect("load");
    let mut store = exp.fresh_params().expect("params");
    slategen::numerics::load_checkpoint(&exp.ckpt_path(phase), &mut store).expect("ckpt");
    let cfg = exp.model().clone();
    let art = exp.artifacts();
    let _ = HarnessConfig::default();

    let grid: Vec<f64> = (1..=10).map(|j| j as f64 / 5.0).collect();
    let mut keep = vec![0usize; grid.len()];
    let mut n_slots = 0usize;
    let mut shade_regret = 0.0;
    let mut over_regret = 0.0;
    let mut total_regret = 0.0;
    let mut positive = 0usize;
    let mut revenue = 0.0;
    let mut margins: Vec<f64> = Vec::new();

    for req in &art.val {
        let enc = encode_request(&store, &cfg, &art.store, req.user_id, &req.candidates).unwrap();
        let bids: Vec<f64> =
            req.candidates.iter().map(|&id| art.store.ad(id).unwrap().bid).collect();
        let values: Vec<f64> =
            req.candidates.iter().map(|&id| art.store.ad(id).unwrap().private_value).collect();
        let cache = MechanismCache::new(&store, &cfg, &enc, AllocationRule::Learned).unwrap();
        let scores = cache.affinities().unwrap().clone();
        let w_z = store.get("aucformer/w_z").scalar();
        let z = rescore_bids(&scores, w_z, &enc.qctr, &bids).unwrap();
        let slate = greedy_select(&z).unwrap();
        let q = cache.q_slots(&slate).unwrap();
        let h = gather(&enc.h_ad, &slate);
        let qm = Matrix::from_fn(q.len(), 1, |i, _| q[i]);
        let sb: Vec<f64> = slate.iter().map(|&j| bids[j]).collect();
        let truthful = payment_forward(&store, &cfg.auc, &h, &qm, &sb).unwrap();
        for (s, &j) in slate.iter().enumerate() {
            n_slots += 1;
            revenue += truthful.payment[s] * q[s];
            let u_t = (values[j] - truthful.payment[s]) * q[s];
            let mut best = 0.0f64;
            let mut best_gamma = 1.0;
            for (gi, &gamma) in grid.iter().enumerate() {
                if gamma == 1.0 {
                    keep[gi] += 1;
                    continue;
                }
                let mut shaded = bids.clone();
                shaded[j] = gamma * bids[j];
                let z2 = rescore_bids(&scores, w_z, &enc.qctr, &shaded).unwrap();
                let s2 = greedy_select(&z2).unwrap();
                let Some(slot) = s2.iter().position(|&x| x == j) else { continue };
                if s2[slot] == j && slot == s && s2 == slate {
                    keep[gi] += 1;
                }
                let q2 = cache.q_slots(&s2).unwrap();
                let h2 = gather(&enc.h_ad, &s2);
                let q2m = Matrix::from_fn(q2.len(), 1, |i, _| q2[i]);
                let b2: Vec<f64> = s2.iter().map(|&x| shaded[x]).collect();
                let p2 = payment_forward(&store, &cfg.auc, &h2, &q2m, &b2).unwrap();
                let gain = (values[j] - p2.payment[slot]) * q2[slot] - u_t;
                if gain > best {
                    best = gain;
                    best_gamma = gamma;
                }
            }
            if best > 0.0 {
                positive += 1;
                total_regret += best;
                if best_gamma < 1.0 {
                    shade_regret += best;
                } else {
                    over_regret += best;
                }
            }
            // top-1 z margin for this winner's slot
            let col = s;
            let mut top = f64::MIN;
            let mut second = f64::MIN;
            for i in 0..z.rows() {
                let v = z.get(i, col);
                if v > top {
                    second = top;
                    top = v;
                } else if v > second {
                    second = v;
                }
            }
            margins.push(top / second.max(1e-300));
        }
    }
    println!("slots {n_slots}  positive-regret {positive}");
    println!("revenue/slot {:.3}  mean regret {:.3}", revenue / n_slots as f64, total_regret / n_slots as f64);
    println!("shade share {:.3}  overbid share {:.3}", shade_regret / total_regret.max(1e-12), over_regret / total_regret.max(1e-12));
    for (gi, &g) in grid.iter().enumerate() {
        println!("gamma {:.1} keeps slate {:.2}", g, keep[gi] as f64 / n_slots as f64);
    }
    margins.sort_by(f64::total_cmp);
    let pct = |p: f64| margins[((margins.len() - 1) as f64 * p) as usize];
    println!("z top/second margin p10 {:.2} p50 {:.2} p90 {:.2}", pct(0.1), pct(0.5), pct(0.9));
}

fn gather(m: &Matrix, rows: &[usize]) -> Matrix {
    Matrix::from_fn(rows.len(), m.cols(), |i, j| m.get(rows[i], j))
}
