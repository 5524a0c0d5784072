//! Scratch: allocation value decomposition on the test split at a checkpoint.
//! A = judge-metered bid-weighted value of the learned slate, B = same for the
//! GSP slate, C = greedy-by-judge ceiling, G = GSP revenue / B.

use slategen::harness::Experiment;
use slategen::numerics::load_checkpoint;
use slategen::pipeline::{encode_request, AllocationRule, MechanismCache};
use slategen::training::Phase;

fn main() {
    let out = std::env::args().nth(1).expect("usage: alloc_gap <out-dir> [ckpt]");
    let ckpt = std::env::args().nth(2).unwrap_or_else(|| "rlaf".into());
    let exp = Experiment::load(std::path::Path::new(&out), None).expect("load");
    let phase = match ckpt.as_str() {
        "pretrain" => Phase::Pretrain,
        "reward" => Phase::Reward,
        "rlaf" => Phase::Rlaf,
        _ => Phase::Payment,
    };
    let mut store = exp.fresh_params().expect("params");
    load_checkpoint(&exp.ckpt_path(phase), &mut store).expect("ckpt");
    let cfg = exp.model().clone();
    let art = exp.artifacts();
    let k = exp.cfg().k;

    let (mut a, mut b_val, mut c, mut gsp_rev, mut learned_rev) = (0.0, 0.0, 0.0, 0.0, 0.0);
    let ceiling_reqs = 8usize.min(art.test.len());
    for (ri, req) in art.test.iter().enumerate() {
        let enc = encode_request(&store, &cfg, &art.store, req.user_id, &req.candidates).unwrap();
        let bids: Vec<f64> =
            req.candidates.iter().map(|&id| art.store.ad(id).unwrap().bid).collect();

        let lc = MechanismCache::new(&store, &cfg, &enc, AllocationRule::Learned).unwrap();
        let ls = lc.serve(&bids).unwrap();
        a += ls.slate.iter().zip(&ls.q_slots).map(|(&j, &q)| bids[j] * q).sum::<f64>();
        learned_rev += ls.payments.iter().zip(&ls.q_slots).map(|(&p, &q)| p * q).sum::<f64>();

        let gc = MechanismCache::new(&store, &cfg, &enc, AllocationRule::Gsp).unwrap();
        let gs = gc.serve(&bids).unwrap();
        b_val += gs.slate.iter().zip(&gs.q_slots).map(|(&j, &q)| bids[j] * q).sum::<f64>();
        gsp_rev += gs.payments.iter().zip(&gs.q_slots).map(|(&p, &q)| p * q).sum::<f64>();

        if ri < ceiling_reqs {
            let mut chosen: Vec<usize> = Vec::new();
            for s in 0..k {
                let mut best = (f64::MIN, usize::MAX);
                for cand in 0..bids.len() {
                    if chosen.contains(&cand) {
                        continue;
                    }
                    let mut trial = chosen.clone();
                    trial.push(cand);
                    let q = lc.q_slots(&trial).unwrap()[s];
                    let v = bids[cand] * q;
                    if v > best.0 {
                        best = (v, cand);
                    }
                }
                chosen.push(best.1);
            }
            let qc = lc.q_slots(&chosen).unwrap();
            c += chosen.iter().zip(&qc).map(|(&j, &q)| bids[j] * q).sum::<f64>();
        }
    }
    let n = art.test.len() as f64;
    let scale = 1000.0 / n; // same scaling as erpm reporting? just report sums
    println!("A learned alloc value {:.1}", a * scale);
    println!("B gsp alloc value     {:.1}", b_val * scale);
    println!("C ceiling (first {} reqs, scaled) {:.1}", ceiling_reqs, c * 1000.0 / ceiling_reqs as f64);
    println!("gsp eff rate G = {:.3}", gsp_rev / b_val);
    println!("learned eff rate R = {:.3}", learned_rev / a);
    println!("erpm learned {:.1} vs gsp {:.1}", learned_rev * scale, gsp_rev * scale);
}
