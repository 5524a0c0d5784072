//! Synthetic auction world. A hidden low-dimensional latent per user and per
//! ad drives everything observable: categorical features are quantized
//! latent coordinates (so features carry signal the model can recover),
//! exposure logs rank by the true affinity plus noise (so logs carry signal
//! but are not oracle-clean), and click labels are drawn from the planted
//! probability. Generation is a pure function of (config, seed).

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Gumbel, LogNormal, Normal};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::config::{ConfigError, HarnessConfig};
use super::derive_seed;
use crate::evaluation::auc;
use crate::feature_store::{
    AdFeatureRecord, AdId, ContextFeatures, FeatureError, FeatureStore, UserFeatureRecord, UserId,
};
use crate::numerics::sigmoid_scalar;
use crate::training::{sample_negatives, RequestSample, TrainError};

#[derive(Debug, Error)]
pub enum WorldError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error("world io: {0}")]
    Io(#[from] std::io::Error),
    #[error("world serialization: {0}")]
    Json(#[from] serde_json::Error),
    #[error("planted signal too weak: oracle AUC {auc:.4} on the test split is not above 0.85")]
    WeakSignal { auc: f64 },
    #[error("missing world artifact {0}; run gen-data first")]
    MissingArtifact(String),
}

/// Ground truth. Click probability for an exposed ad is
/// sigmoid(user latent . ad latent + position bias of the slot); without a
/// slot (platform-wide labels) the bias term is absent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClickOracle {
    pub user_latents: BTreeMap<UserId, Vec<f64>>,
    pub ad_latents: BTreeMap<AdId, Vec<f64>>,
    pub position_bias: Vec<f64>,
    pub noise_temperature: f64,
}

impl ClickOracle {
    pub fn affinity(&self, user: UserId, ad: AdId) -> f64 {
        let u = &self.user_latents[&user];
        let a = &self.ad_latents[&ad];
        u.iter().zip(a).map(|(x, y)| x * y).sum()
    }

    pub fn exposed_probability(&self, user: UserId, ad: AdId, slot: usize) -> f64 {
        sigmoid_scalar(self.affinity(user, ad) + self.position_bias[slot])
    }

    pub fn platform_probability(&self, user: UserId, ad: AdId) -> f64 {
        sigmoid_scalar(self.affinity(user, ad))
    }
}

/// One logged request: the candidate pool the auction will see, the slate
/// that was exposed (slot order, in-request labels), and the sampled
/// unexposed ads with platform-wide labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulatedRequest {
    pub request_id: u64,
    pub user_id: UserId,
    pub candidates: Vec<AdId>,
    pub exposed: Vec<(AdId, bool)>,
    pub unexposed: Vec<(AdId, bool)>,
}

impl SimulatedRequest {
    pub fn sample(&self) -> RequestSample {
        RequestSample {
            request_id: self.request_id,
            user_id: self.user_id,
            exposed: self.exposed.clone(),
            unexposed: self.unexposed.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct World {
    pub config: HarnessConfig,
    pub oracle: ClickOracle,
    /// AUC of the true click probabilities on the held-out test split,
    /// measured once at generation time.
    pub bayes_auc: f64,
}

/// Exposure half of a request, before negatives are drawn (negative
/// sampling needs corpus-wide exposure counts, so it runs as a second pass).
#[derive(Debug, Clone, PartialEq)]
pub struct ExposureDraw {
    pub request_id: u64,
    pub user_id: UserId,
    pub candidates: Vec<AdId>,
    pub exposed: Vec<(AdId, bool)>,
}

impl World {
    /// Simulates the exposure half of one request. Pure in (self,
    /// request_id), so any request id can be drawn independently and in
    /// parallel.
    pub fn simulate_request(&self, request_id: u64) -> ExposureDraw {
        let cfg = &self.config;
        let mut rng = ChaCha12Rng::seed_from_u64(derive_seed(cfg.seed, "request", request_id));
        let user_id = rng.gen_range(1..=cfg.n_users as u64);

        // Partial Fisher-Yates over the corpus for a distinct pool.
        let mut ids: Vec<AdId> = (1..=cfg.n_total as u64).collect();
        for i in 0..cfg.n_candidates {
            let j = rng.gen_range(i..ids.len());
            ids.swap(i, j);
        }
        ids.truncate(cfg.n_candidates);

        // Oracle-informed ranking with Gumbel noise: at zero temperature the
        // log is oracle-greedy, at high temperature it is uniform.
        let gumbel = Gumbel::new(0.0, 1.0).expect("valid gumbel");
        let mut scored: Vec<(f64, AdId)> = ids
            .iter()
            .map(|&ad| {
                let noise: f64 = gumbel.sample(&mut rng);
                (self.oracle.affinity(user_id, ad) + cfg.exposure_noise * noise, ad)
            })
            .collect();
        scored.sort_by(|a, b| b.0.partial_cmp(&a.0).expect("finite scores").then(a.1.cmp(&b.1)));
        let exposed = scored[..cfg.k]
            .iter()
            .enumerate()
            .map(|(slot, &(_, ad))| {
                let p = self.oracle.exposed_probability(user_id, ad, slot);
                (ad, rng.gen_bool(p))
            })
            .collect();
        ExposureDraw { request_id, user_id, candidates: ids, exposed }
    }

    /// Draws the unexposed negatives for one request against corpus-wide
    /// exposure counts, labeling each from the oracle without position bias.
    pub fn draw_negatives(
        &self,
        draw: &ExposureDraw,
        counts: &[(AdId, u64)],
    ) -> Result<Vec<(AdId, bool)>, WorldError> {
        let exposed: BTreeSet<AdId> = draw.exposed.iter().map(|&(a, _)| a).collect();
        let masked: Vec<(AdId, u64)> = counts
            .iter()
            .map(|&(a, c)| (a, if exposed.contains(&a) { 0 } else { c }))
            .collect();
        let mut rng =
            ChaCha12Rng::seed_from_u64(derive_seed(self.config.seed, "negatives", draw.request_id));
        let picked = sample_negatives(&masked, self.config.n_s, &mut rng)?;
        Ok(picked
            .into_iter()
            .map(|ad| {
                let p = self.oracle.platform_probability(draw.user_id, ad);
                (ad, rng.gen_bool(p))
            })
            .collect())
    }
}

/// Everything gen-data produces.
#[derive(Debug)]
pub struct WorldArtifacts {
    pub world: World,
    pub store: FeatureStore,
    pub train: Vec<SimulatedRequest>,
    pub val: Vec<SimulatedRequest>,
    pub test: Vec<SimulatedRequest>,
    /// Corpus-wide exposure counts, ascending ad id, zero-count ads included.
    pub counts: Vec<(AdId, u64)>,
}

fn bucket_index(x: f64, scale: f64, buckets: usize) -> usize {
    let squashed = sigmoid_scalar(x / scale);
    ((squashed * buckets as f64) as usize).min(buckets - 1)
}

/// Builds the full world: latents, features, bids, request logs, counts,
/// and the generation-time signal check.
pub fn generate_world(config: &HarnessConfig) -> Result<WorldArtifacts, WorldError> {
    config.validate()?;
    let mut rng = ChaCha12Rng::seed_from_u64(derive_seed(config.seed, "world", 0));
    let normal = Normal::new(0.0, config.latent_scale).expect("positive scale");
    let bids = LogNormal::new(config.bid_mu, config.bid_sigma).expect("valid lognormal");
    let latent = |rng: &mut ChaCha12Rng| -> Vec<f64> {
        (0..config.latent_dim).map(|_| normal.sample(rng)).collect()
    };
    // Feature j quantizes latent coordinate j (mod dim); with no latent the
    // features are pure noise and only position bias remains learnable.
    let feature_of = |lat: &[f64], j: usize, buckets: usize, rng: &mut ChaCha12Rng| -> u32 {
        let b = if lat.is_empty() {
            rng.gen_range(0..buckets)
        } else {
            bucket_index(lat[j % lat.len()], config.latent_scale, buckets)
        };
        (b + 1) as u32
    };

    let store_schema = config.schema();
    let mut store = FeatureStore::new(store_schema);
    let mut ad_latents = BTreeMap::new();
    for id in 1..=config.n_total as u64 {
        let lat = latent(&mut rng);
        let features: Vec<u32> = (0..config.n_ad_features)
            .map(|j| feature_of(&lat, j, config.ad_feature_buckets, &mut rng))
            .collect();
        let bid = bids.sample(&mut rng);
        store.insert_ad(AdFeatureRecord {
            ad_id: id,
            categorical_features: features,
            bid,
            private_value: config.value_scale * bid,
        })?;
        ad_latents.insert(id, lat);
    }

    let mut user_latents = BTreeMap::new();
    let gumbel = Gumbel::new(0.0, 1.0).expect("valid gumbel");
    for uid in 1..=config.n_users as u64 {
        let lat = latent(&mut rng);
        let features: Vec<u32> = (0..config.n_user_features)
            .map(|j| feature_of(&lat, j, config.user_feature_buckets, &mut rng))
            .collect();
        // Interest-aligned history: each slot keeps the best of a handful of
        // uniform draws under the affinity plus light noise.
        let mut behavior = Vec::with_capacity(config.behavior_len);
        for slot in 0..config.behavior_len {
            let mut best: Option<(f64, AdId)> = None;
            for _ in 0..8 {
                let ad = rng.gen_range(1..=config.n_total as u64);
                let noise: f64 = gumbel.sample(&mut rng);
                let score = lat
                    .iter()
                    .zip(&ad_latents[&ad])
                    .map(|(x, y)| x * y)
                    .sum::<f64>()
                    + 0.5 * noise;
                if best.map_or(true, |(s, _)| score > s) {
                    best = Some((score, ad));
                }
            }
            behavior.push((best.expect("eight draws").1, slot as u64));
        }
        store.insert_user(UserFeatureRecord {
            user_id: uid,
            categorical_features: features,
            behavior_sequence: behavior,
            context: ContextFeatures {
                time_bucket: rng.gen_range(1..=config.ctx_buckets as u32),
                location_bucket: rng.gen_range(1..=config.ctx_buckets as u32),
            },
        })?;
        user_latents.insert(uid, lat);
    }

    let world = World {
        config: config.clone(),
        oracle: ClickOracle {
            user_latents,
            ad_latents,
            position_bias: config.position_bias(),
            noise_temperature: config.exposure_noise,
        },
        bayes_auc: 0.0,
    };

    let total = config.requests_train + config.requests_val + config.requests_test;
    let draws = simulate_all(&world, total as u64, config.threads);

    let mut count_map: BTreeMap<AdId, u64> = (1..=config.n_total as u64).map(|a| (a, 0)).collect();
    for d in &draws {
        for &(ad, _) in &d.exposed {
            *count_map.get_mut(&ad).expect("corpus ad") += 1;
        }
    }
    let counts: Vec<(AdId, u64)> = count_map.into_iter().collect();

    let mut requests = Vec::with_capacity(draws.len());
    for d in draws {
        let unexposed = world.draw_negatives(&d, &counts)?;
        requests.push(SimulatedRequest {
            request_id: d.request_id,
            user_id: d.user_id,
            candidates: d.candidates,
            exposed: d.exposed,
            unexposed,
        });
    }
    let test_split = requests.split_off(config.requests_train + config.requests_val);
    let val_split = requests.split_off(config.requests_train);

    let mut world = world;
    world.bayes_auc = oracle_auc(&world, &test_split);
    if !(world.bayes_auc > 0.85) {
        return Err(WorldError::WeakSignal { auc: world.bayes_auc });
    }

    Ok(WorldArtifacts { world, store, train: requests, val: val_split, test: test_split, counts })
}

fn simulate_all(world: &World, total: u64, threads: usize) -> Vec<ExposureDraw> {
    if threads <= 1 || total < 2 {
        return (0..total).map(|id| world.simulate_request(id)).collect();
    }
    // Each draw is pure in (world, request_id), so chunked workers return
    // exactly the sequential result in order.
    let chunk = total.div_ceil(threads as u64);
    std::thread::scope(|scope| {
        let mut handles = Vec::new();
        for t in 0..threads as u64 {
            let lo = t * chunk;
            let hi = ((t + 1) * chunk).min(total);
            handles.push(scope.spawn(move || {
                (lo..hi).map(|id| world.simulate_request(id)).collect::<Vec<_>>()
            }));
        }
        handles.into_iter().flat_map(|h| h.join().expect("worker panicked")).collect()
    })
}

/// Pooled AUC of the true generating probabilities against the drawn labels:
/// the ceiling any learned predictor can approach on this world.
fn oracle_auc(world: &World, split: &[SimulatedRequest]) -> f64 {
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    for r in split {
        for (slot, &(ad, clicked)) in r.exposed.iter().enumerate() {
            scores.push(world.oracle.exposed_probability(r.user_id, ad, slot));
            labels.push(clicked);
        }
        for &(ad, clicked) in &r.unexposed {
            scores.push(world.oracle.platform_probability(r.user_id, ad));
            labels.push(clicked);
        }
    }
    auc(&scores, &labels).unwrap_or(0.5)
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<(), WorldError> {
    let mut w = BufWriter::new(File::create(path)?);
    for item in items {
        serde_json::to_writer(&mut w, item)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, WorldError> {
    if !path.exists() {
        return Err(WorldError::MissingArtifact(path.display().to_string()));
    }
    let r = BufReader::new(File::open(path)?);
    let mut items = Vec::new();
    for line in r.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        items.push(serde_json::from_str(&line)?);
    }
    Ok(items)
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, WorldError> {
    if !path.exists() {
        return Err(WorldError::MissingArtifact(path.display().to_string()));
    }
    Ok(serde_json::from_reader(BufReader::new(File::open(path)?))?)
}

impl WorldArtifacts {
    pub fn write(&self, out: &Path) -> Result<(), WorldError> {
        std::fs::create_dir_all(out)?;
        serde_json::to_writer_pretty(
            BufWriter::new(File::create(out.join("world.json"))?),
            &self.world,
        )?;
        let ads: Vec<AdFeatureRecord> = (1..=self.world.config.n_total as u64)
            .map(|id| self.store.ad(id).expect("generated ad").clone())
            .collect();
        write_jsonl(&out.join("ads.jsonl"), &ads)?;
        let users: Vec<UserFeatureRecord> = (1..=self.world.config.n_users as u64)
            .map(|id| self.store.user(id).expect("generated user").clone())
            .collect();
        write_jsonl(&out.join("users.jsonl"), &users)?;
        write_jsonl(&out.join("requests-train.jsonl"), &self.train)?;
        write_jsonl(&out.join("requests-val.jsonl"), &self.val)?;
        write_jsonl(&out.join("requests-test.jsonl"), &self.test)?;
        serde_json::to_writer(
            BufWriter::new(File::create(out.join("counts.json"))?),
            &self.counts,
        )?;
        Ok(())
    }

    pub fn load(out: &Path) -> Result<Self, WorldError> {
        let world: World = read_json(&out.join("world.json"))?;
        let mut store = FeatureStore::new(world.config.schema());
        for ad in read_jsonl::<AdFeatureRecord>(&out.join("ads.jsonl"))? {
            store.insert_ad(ad)?;
        }
        for user in read_jsonl::<UserFeatureRecord>(&out.join("users.jsonl"))? {
            store.insert_user(user)?;
        }
        Ok(WorldArtifacts {
            train: read_jsonl(&out.join("requests-train.jsonl"))?,
            val: read_jsonl(&out.join("requests-val.jsonl"))?,
            test: read_jsonl(&out.join("requests-test.jsonl"))?,
            counts: read_json(&out.join("counts.json"))?,
            world,
            store,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config() -> HarnessConfig {
        HarnessConfig {
            n_total: 240,
            n_users: 24,
            n_candidates: 24,
            k: 3,
            behavior_len: 12,
            latent_scale: 1.4,
            requests_train: 10,
            requests_val: 4,
            requests_test: 10,
            n_s: 8,
            d: 8,
            n_c: 2,
            n_h: 2,
            m: 1,
            m_e: 1,
            ctr_h1: 6,
            ctr_h2: 4,
            eval_h1: 6,
            eval_h2: 4,
            pay_h1: 5,
            pay_h2: 3,
            ..HarnessConfig::default()
        }
    }

    #[test]
    fn same_seed_worlds_are_byte_identical() {
        let cfg = small_config();
        let a = generate_world(&cfg).unwrap();
        let b = generate_world(&cfg).unwrap();
        assert_eq!(
            serde_json::to_string(&a.world).unwrap(),
            serde_json::to_string(&b.world).unwrap()
        );
        assert_eq!(a.train, b.train);
        assert_eq!(a.val, b.val);
        assert_eq!(a.test, b.test);
        assert_eq!(a.counts, b.counts);

        let mut threaded = cfg;
        threaded.threads = 3;
        let c = generate_world(&threaded).unwrap();
        assert_eq!(a.train, c.train);
        assert_eq!(a.test, c.test);
    }

    #[test]
    fn zero_latent_dimension_leaves_only_position_bias() {
        let mut cfg = small_config();
        cfg.latent_dim = 0;
        // No affinity signal: the world cannot pass the AUC gate, so build
        // the pieces directly and check the oracle arithmetic.
        let err = generate_world(&cfg).unwrap_err();
        assert!(matches!(err, WorldError::WeakSignal { .. }), "{err}");

        let oracle = ClickOracle {
            user_latents: BTreeMap::from([(1, vec![])]),
            ad_latents: BTreeMap::from([(1, vec![])]),
            position_bias: vec![-0.4, -0.9],
            noise_temperature: 0.5,
        };
        assert_eq!(oracle.exposed_probability(1, 1, 0), sigmoid_scalar(-0.4));
        assert_eq!(oracle.exposed_probability(1, 1, 1), sigmoid_scalar(-0.9));
        assert_eq!(oracle.platform_probability(1, 1), 0.5);
    }

    #[test]
    fn all_zero_latents_and_biases_click_at_exactly_one_half() {
        let oracle = ClickOracle {
            user_latents: BTreeMap::from([(1, vec![0.0; 3])]),
            ad_latents: BTreeMap::from([(7, vec![0.0; 3])]),
            position_bias: vec![0.0, 0.0],
            noise_temperature: 1.0,
        };
        assert_eq!(oracle.exposed_probability(1, 7, 0), 0.5);
        assert_eq!(oracle.exposed_probability(1, 7, 1), 0.5);
        assert_eq!(oracle.platform_probability(1, 7), 0.5);
    }

    #[test]
    fn infinite_noise_makes_exposure_uniform() {
        let mut cfg = small_config();
        cfg.n_total = 12;
        cfg.n_candidates = 12;
        cfg.n_users = 4;
        cfg.k = 2;
        cfg.exposure_noise = 1e9;
        cfg.latent_scale = 2.0;
        let world = World {
            config: cfg.clone(),
            oracle: ClickOracle {
                user_latents: (1..=4).map(|u| (u, vec![u as f64, 1.0])).collect(),
                ad_latents: (1..=12).map(|a| (a, vec![1.0, a as f64 / 6.0])).collect(),
                position_bias: vec![-0.4, -0.7],
                noise_temperature: cfg.exposure_noise,
            },
            bayes_auc: 1.0,
        };
        let draws = 4000;
        let mut hits = 0usize;
        for id in 0..draws {
            let d = world.simulate_request(id);
            if d.exposed.iter().any(|&(ad, _)| ad == 1) {
                hits += 1;
            }
        }
        let p = 2.0 / 12.0;
        let sigma = (p * (1.0 - p) / draws as f64).sqrt();
        let hat = hits as f64 / draws as f64;
        assert!((hat - p).abs() < 3.0 * sigma, "exposure rate {hat} vs uniform {p}");
    }

    #[test]
    fn near_certain_oracle_yields_all_positive_labels() {
        let mut cfg = small_config();
        cfg.n_total = 6;
        cfg.n_candidates = 6;
        cfg.n_users = 2;
        cfg.k = 2;
        let world = World {
            config: cfg,
            oracle: ClickOracle {
                user_latents: (1..=2).map(|u| (u, vec![40.0])).collect(),
                ad_latents: (1..=6).map(|a| (a, vec![1.0])).collect(),
                position_bias: vec![-0.4, -0.7],
                noise_temperature: 0.5,
            },
            bayes_auc: 1.0,
        };
        let labels: usize = (0..500)
            .map(|id| world.simulate_request(id).exposed.iter().filter(|&&(_, c)| c).count())
            .sum();
        assert_eq!(labels, 1000, "sigmoid(~40) failed to click");
    }

    #[test]
    fn bucketing_is_monotone_and_in_vocabulary_range() {
        let mut prev = 0;
        for i in -20..=20 {
            let b = bucket_index(i as f64 * 0.3, 1.2, 32);
            assert!(b >= prev, "bucket must not decrease");
            assert!(b < 32);
            prev = b;
        }
        assert_eq!(bucket_index(-1e9, 1.2, 32), 0);
        assert_eq!(bucket_index(1e9, 1.2, 32), 31);

        let art = generate_world(&small_config()).unwrap();
        for id in 1..=art.world.config.n_total as u64 {
            for &f in &art.store.ad(id).unwrap().categorical_features {
                assert!(f >= 1 && f <= art.world.config.ad_feature_buckets as u32);
            }
        }
    }

    #[test]
    fn generation_passes_the_signal_gate_and_weak_worlds_fail_it() {
        let art = generate_world(&small_config()).unwrap();
        assert!(art.world.bayes_auc > 0.85, "bayes {:.4}", art.world.bayes_auc);

        let mut weak = small_config();
        weak.latent_scale = 0.05;
        let err = generate_world(&weak).unwrap_err();
        match err {
            WorldError::WeakSignal { auc } => assert!(auc < 0.85),
            other => panic!("expected weak-signal rejection, got {other}"),
        }
    }

    #[test]
    fn negatives_avoid_the_exposed_slate_and_carry_mass() {
        let art = generate_world(&small_config()).unwrap();
        let counts: BTreeMap<AdId, u64> = art.counts.iter().copied().collect();
        for r in art.train.iter().chain(&art.val).chain(&art.test) {
            assert_eq!(r.exposed.len(), art.world.config.k);
            assert_eq!(r.unexposed.len(), art.world.config.n_s);
            assert_eq!(r.candidates.len(), art.world.config.n_candidates);
            let pool: BTreeSet<AdId> = r.candidates.iter().copied().collect();
            assert_eq!(pool.len(), r.candidates.len(), "pool has duplicates");
            let exposed: BTreeSet<AdId> = r.exposed.iter().map(|&(a, _)| a).collect();
            for &(ad, _) in &r.unexposed {
                assert!(!exposed.contains(&ad), "negative {ad} was exposed");
                assert!(counts[&ad] > 0, "negative {ad} has zero exposure mass");
            }
            for &(ad, _) in &r.exposed {
                assert!(pool.contains(&ad), "exposed {ad} outside the pool");
            }
        }
        // Counts re-derive from the logs.
        let mut recount: BTreeMap<AdId, u64> =
            (1..=art.world.config.n_total as u64).map(|a| (a, 0)).collect();
        for r in art.train.iter().chain(&art.val).chain(&art.test) {
            for &(ad, _) in &r.exposed {
                *recount.get_mut(&ad).unwrap() += 1;
            }
        }
        assert_eq!(art.counts, recount.into_iter().collect::<Vec<_>>());
    }

    #[test]
    fn artifacts_round_trip_through_the_out_directory() {
        let art = generate_world(&small_config()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        art.write(dir.path()).unwrap();
        let back = WorldArtifacts::load(dir.path()).unwrap();
        assert_eq!(back.world, art.world);
        assert_eq!(back.train, art.train);
        assert_eq!(back.val, art.val);
        assert_eq!(back.test, art.test);
        assert_eq!(back.counts, art.counts);
        assert_eq!(back.store.ad(17).unwrap(), art.store.ad(17).unwrap());
        assert_eq!(back.store.user(3).unwrap(), art.store.user(3).unwrap());

        let missing = WorldArtifacts::load(&dir.path().join("nowhere")).unwrap_err();
        assert!(matches!(missing, WorldError::MissingArtifact(_)), "{missing}");
    }
}
