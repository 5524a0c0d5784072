//! Scratch: step-by-step RLAF trace with held-out eRPM measurements.

use rand::prelude::*;
use rand_chacha::ChaCha12Rng;
use slategen::harness::{derive_seed, Experiment};
use slategen::numerics::load_checkpoint;
use slategen::pipeline::{encode_request, AllocationRule};
use slategen::training::{prepare_rlaf_item, rlaf_step, Adam, AdamConfig, Phase};

fn main() {
    let out = std::env::args().nth(1).expect("usage: rlaf_trace <out-dir> <lr> <steps>");
    let lr: f64 = std::env::args().nth(2).unwrap_or_else(|| "3e-3".into()).parse().unwrap();
    let steps: usize = std::env::args().nth(3).unwrap_or_else(|| "30".into()).parse().unwrap();
    let exp = Experiment::load(std::path::Path::new(&out), None).expect("load");
    let mut store = exp.fresh_params().expect("params");
    load_checkpoint(&exp.ckpt_path(Phase::Reward), &mut store).expect("ckpt");
    let cfg = exp.model().clone();
    let art = exp.artifacts();
    let hc = exp.cfg().clone();

    let mut opt = Adam::new(AdamConfig { lr, ..AdamConfig::default() });
    let mut rng = ChaCha12Rng::seed_from_u64(derive_seed(hc.seed, "rlaf", 0));
    let mut encodings: std::collections::HashMap<u64, _> = Default::default();

    let erpm = |store: &slategen::numerics::ParamStore| {
        exp.split_metrics(store, &art.val, AllocationRule::Learned).unwrap().erpm
    };
    println!("step -1  w_z {:+.4}  val erpm {:.1}", store.get("aucformer/w_z").scalar(), erpm(&store));
    for step in 0..steps {
        let mut idx: Vec<usize> = (0..art.train.len()).collect();
        for i in 0..hc.rlaf_batch.min(idx.len()) {
            let j = rng.gen_range(i..idx.len());
            idx.swap(i, j);
        }
        idx.truncate(hc.rlaf_batch);
        let mut items = Vec::new();
        for i in idx {
            let r = &art.train[i];
            let enc = encodings
                .entry(r.request_id)
                .or_insert_with(|| {
                    encode_request(&store, &cfg, &art.store, r.user_id, &r.candidates).unwrap()
                })
                .clone();
            let bids: Vec<f64> =
                r.candidates.iter().map(|&id| art.store.ad(id).unwrap().bid).collect();
            items.push(prepare_rlaf_item(&store, &cfg, enc, bids).unwrap());
        }
        let rstats: Vec<f64> = items.iter().flat_map(|it| it.rewards.iter().copied()).collect();
        let pos = rstats.iter().filter(|&&r| r > 0.0).count();
        let loss = rlaf_step(&mut store, &cfg, &items, &mut opt).unwrap();
        if step % 3 == 0 || step + 1 == steps {
            println!(
                "step {:>3}  w_z {:+.4}  loss {:>9.2}  r mean {:>7.2} min {:>7.2} max {:>7.2} pos {}/{}  val erpm {:.1}",
                step,
                store.get("aucformer/w_z").scalar(),
                loss,
                rstats.iter().sum::<f64>() / rstats.len() as f64,
                rstats.iter().copied().fold(f64::MAX, f64::min),
                rstats.iter().copied().fold(f64::MIN, f64::max),
                pos,
                rstats.len(),
                erpm(&store)
            );
        }
    }
}
