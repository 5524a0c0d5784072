//! Phase driver. Each phase loads its predecessor's checkpoint, trains its
//! own subnetwork on the logged train split, writes a step-level metrics
//! log, saves a checkpoint, and measures a validation report. Every random
//! choice draws from a stream derived with [`super::derive_seed`], so a
//! (config, seed) pair pins the whole run bit for bit.

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::config::{ConfigError, HarnessConfig};
use super::derive_seed;
use super::world::{generate_world, SimulatedRequest, WorldArtifacts, WorldError};
use crate::evaluation::{
    auc, deviation, empirical_regret, expected_value_metrics, flops_auf, flops_compare,
    flops_gcf, flops_mif, gamma_grid, psi_metric, recall_at_k, utility, FlopsReport,
    MetricReport, SlateValue,
};
use crate::feature_store::{
    AdFeatureRecord, AdId, ContextFeatures, FeatureError, FeatureStore, UserFeatureRecord,
};
use crate::numerics::{flops, load_checkpoint, save_checkpoint, CheckpointError, ParamStore};
use crate::pipeline::{
    encode_request, focal_outcome, init_model_params, AllocationRule, EncodedValues,
    MechanismCache, ModelConfig, PipelineError, Variant,
};
use crate::training::{
    dual_update, payment_step, prepare_rlaf_item, pretrain_step, reward_model_step, rlaf_step,
    Adam, AdamConfig, LagrangianState, PaymentItem, Phase, RequestSample, TrainError,
};

/// Ranking cutoff for the recall metric in reports.
pub const RECALL_CUTOFF: usize = 10;

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error(transparent)]
    World(#[from] WorldError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("experiment io: {0}")]
    Io(#[from] std::io::Error),
    #[error("report serialization: {0}")]
    Json(#[from] serde_json::Error),
    #[error("missing prerequisite checkpoint: phase {phase} has not run")]
    MissingCheckpoint { phase: &'static str },
    #[error("phase {phase} does not apply to variant {variant}")]
    PhaseNotApplicable { phase: &'static str, variant: String },
    #[error("--config disagrees with the world.json this out directory was generated from")]
    ConfigDrift,
}

/// One phase's outcome. Two runs are considered identical when every field
/// except the wall time matches; the clock is the one legitimately
/// nondeterministic output.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunReport {
    pub run_id: String,
    pub phase: String,
    pub metrics: MetricReport,
    pub flops: FlopsReport,
    pub wall_time_secs: f64,
    pub seed: u64,
}

impl PartialEq for RunReport {
    fn eq(&self, other: &Self) -> bool {
        self.run_id == other.run_id
            && self.phase == other.phase
            && self.metrics == other.metrics
            && self.flops == other.flops
            && self.seed == other.seed
    }
}

fn applicable_phases(variant: Variant) -> &'static [Phase] {
    match variant {
        // Without the learned auction there is nothing for the evaluator,
        // allocator, or payment phases to train.
        Variant::NoAuf => &[Phase::Pretrain],
        _ => &[Phase::Pretrain, Phase::Reward, Phase::Rlaf, Phase::Payment],
    }
}

#[derive(Debug)]
pub struct Experiment {
    out: PathBuf,
    art: WorldArtifacts,
    model: ModelConfig,
    train_seed: u64,
}

impl Experiment {
    /// Generates the world under `cfg`, writes every artifact to `out`, and
    /// returns the loaded experiment.
    pub fn generate(cfg: &HarnessConfig, out: &Path) -> Result<Self, ExperimentError> {
        let art = generate_world(cfg)?;
        art.write(out)?;
        Self::assemble(out.to_path_buf(), art, None)
    }

    /// Loads a generated out directory. The embedded config is authoritative;
    /// `seed_override` reseeds the training streams without regenerating the
    /// world.
    pub fn load(out: &Path, seed_override: Option<u64>) -> Result<Self, ExperimentError> {
        let art = WorldArtifacts::load(out)?;
        Self::assemble(out.to_path_buf(), art, seed_override)
    }

    /// Like [`Experiment::load`], additionally checking a caller-supplied
    /// config against the one the world was generated from.
    pub fn load_checked(
        out: &Path,
        expect: Option<&HarnessConfig>,
        seed_override: Option<u64>,
    ) -> Result<Self, ExperimentError> {
        let exp = Self::load(out, seed_override)?;
        if let Some(given) = expect {
            if *given != exp.art.world.config {
                return Err(ExperimentError::ConfigDrift);
            }
        }
        Ok(exp)
    }

    fn assemble(
        out: PathBuf,
        art: WorldArtifacts,
        seed_override: Option<u64>,
    ) -> Result<Self, ExperimentError> {
        let model = art.world.config.model_config()?;
        let train_seed = seed_override.unwrap_or(art.world.config.seed);
        Ok(Experiment { out, art, model, train_seed })
    }

    pub fn cfg(&self) -> &HarnessConfig {
        &self.art.world.config
    }

    pub fn artifacts(&self) -> &WorldArtifacts {
        &self.art
    }

    pub fn model(&self) -> &ModelConfig {
        &self.model
    }

    pub fn out(&self) -> &Path {
        &self.out
    }

    fn variant(&self) -> Variant {
        self.model.variant
    }

    fn serving_rule(&self) -> AllocationRule {
        match self.variant() {
            Variant::NoAuf => AllocationRule::Gsp,
            _ => AllocationRule::Learned,
        }
    }

    pub fn ckpt_path(&self, phase: Phase) -> PathBuf {
        self.out.join(format!("{}.ckpt", phase.as_str()))
    }

    pub fn fresh_params(&self) -> Result<ParamStore, ExperimentError> {
        let mut store = ParamStore::new();
        let mut rng = ChaCha12Rng::seed_from_u64(derive_seed(self.train_seed, "init", 0));
        init_model_params(&self.model, &mut store, &mut rng)?;
        Ok(store)
    }

    /// Verifies the prerequisite chain for `phase` and returns the phase
    /// whose checkpoint seeds it (none for the first). The first missing
    /// link is named, not the requested phase.
    fn check_prerequisites(&self, phase: Phase) -> Result<Option<Phase>, ExperimentError> {
        let chain = applicable_phases(self.variant());
        let Some(pos) = chain.iter().position(|&p| p == phase) else {
            return Err(ExperimentError::PhaseNotApplicable {
                phase: phase.as_str(),
                variant: self.variant().as_str().to_string(),
            });
        };
        for &q in &chain[..pos] {
            if !self.ckpt_path(q).exists() {
                return Err(ExperimentError::MissingCheckpoint { phase: q.as_str() });
            }
        }
        Ok(pos.checked_sub(1).map(|i| chain[i]))
    }

    fn params_from(&self, phase: Option<Phase>) -> Result<ParamStore, ExperimentError> {
        let mut store = self.fresh_params()?;
        if let Some(q) = phase {
            load_checkpoint(&self.ckpt_path(q), &mut store)?;
        }
        Ok(store)
    }

    /// Runs one training phase end to end: prerequisite check, train loop,
    /// step log, checkpoint, validation report.
    pub fn run_phase(&self, phase: Phase) -> Result<RunReport, ExperimentError> {
        let started = Instant::now();
        let pred = self.check_prerequisites(phase)?;
        let mut store = self.params_from(pred)?;
        let log_path = self.out.join(format!("metrics-{}.jsonl", phase.as_str()));
        let mut log = BufWriter::new(File::create(log_path)?);
        match phase {
            Phase::Pretrain => self.pretrain_loop(&mut store, &mut log)?,
            Phase::Reward => self.reward_loop(&mut store, &mut log)?,
            Phase::Rlaf => self.rlaf_loop(&mut store, &mut log)?,
            Phase::Payment => self.payment_loop(&mut store, &mut log)?,
        }
        log.flush()?;
        save_checkpoint(&self.ckpt_path(phase), &store)?;
        self.finish_report(phase.as_str(), &store, &self.art.val, started)
    }

    /// Measures the test split under the newest trained checkpoint, or under
    /// fresh parameters when nothing has trained yet (the untrained
    /// baseline).
    pub fn evaluate(&self) -> Result<RunReport, ExperimentError> {
        let started = Instant::now();
        let newest = applicable_phases(self.variant())
            .iter()
            .rev()
            .copied()
            .find(|&p| self.ckpt_path(p).exists());
        let store = self.params_from(newest)?;
        self.finish_report("evaluate", &store, &self.art.test, started)
    }

    /// All applicable phases in order, then the test-split evaluation.
    pub fn run_all(&self) -> Result<Vec<RunReport>, ExperimentError> {
        let mut reports = Vec::new();
        for &phase in applicable_phases(self.variant()) {
            reports.push(self.run_phase(phase)?);
        }
        reports.push(self.evaluate()?);
        Ok(reports)
    }

    fn finish_report(
        &self,
        phase: &str,
        store: &ParamStore,
        split: &[SimulatedRequest],
        started: Instant,
    ) -> Result<RunReport, ExperimentError> {
        let metrics = self.split_metrics(store, split, self.serving_rule())?;
        let flops = self.flops_snapshot(store)?;
        let report = RunReport {
            run_id: format!("{}-{}", self.train_seed, phase),
            phase: phase.to_string(),
            metrics,
            flops,
            wall_time_secs: started.elapsed().as_secs_f64(),
            seed: self.train_seed,
        };
        let file = File::create(self.out.join(format!("report-{phase}.json")))?;
        serde_json::to_writer_pretty(BufWriter::new(file), &report)?;
        Ok(report)
    }

    fn batch_indices(&self, n: usize, want: usize, rng: &mut ChaCha12Rng) -> Vec<usize> {
        let take = want.min(n);
        let mut idx: Vec<usize> = (0..n).collect();
        for i in 0..take {
            let j = rng.gen_range(i..n);
            idx.swap(i, j);
        }
        idx.truncate(take);
        idx
    }

    fn pretrain_loop(
        &self,
        store: &mut ParamStore,
        log: &mut impl Write,
    ) -> Result<(), ExperimentError> {
        let cfg = self.cfg();
        let samples: Vec<RequestSample> = self.art.train.iter().map(|r| r.sample()).collect();
        let mut opt = Adam::new(AdamConfig { lr: cfg.pretrain_lr, ..AdamConfig::default() });
        let mut rng = ChaCha12Rng::seed_from_u64(derive_seed(self.train_seed, "pretrain", 0));
        for step in 0..cfg.pretrain_steps {
            let batch: Vec<RequestSample> = self
                .batch_indices(samples.len(), cfg.pretrain_batch, &mut rng)
                .into_iter()
                .map(|i| samples[i].clone())
                .collect();
            let loss = pretrain_step(store, &self.model, &self.art.store, &batch, &mut opt)?;
            writeln!(log, "{}", serde_json::json!({ "step": step, "loss": loss }))?;
        }
        Ok(())
    }

    fn reward_loop(
        &self,
        store: &mut ParamStore,
        log: &mut impl Write,
    ) -> Result<(), ExperimentError> {
        let cfg = self.cfg();
        let samples: Vec<RequestSample> = self.art.train.iter().map(|r| r.sample()).collect();
        let mut opt = Adam::new(AdamConfig { lr: cfg.reward_lr, ..AdamConfig::default() });
        let mut rng = ChaCha12Rng::seed_from_u64(derive_seed(self.train_seed, "reward", 0));
        for step in 0..cfg.reward_steps {
            let batch: Vec<RequestSample> = self
                .batch_indices(samples.len(), cfg.reward_batch, &mut rng)
                .into_iter()
                .map(|i| samples[i].clone())
                .collect();
            let loss = reward_model_step(store, &self.model, &self.art.store, &batch, &mut opt)?;
            writeln!(log, "{}", serde_json::json!({ "step": step, "loss": loss }))?;
        }
        Ok(())
    }

    fn pool_bids(&self, request: &SimulatedRequest) -> Result<Vec<f64>, ExperimentError> {
        request
            .candidates
            .iter()
            .map(|&id| Ok(self.art.store.ad(id)?.bid))
            .collect()
    }

    fn pool_values(&self, request: &SimulatedRequest) -> Result<Vec<f64>, ExperimentError> {
        request
            .candidates
            .iter()
            .map(|&id| Ok(self.art.store.ad(id)?.private_value))
            .collect()
    }

    /// Encodes a request's candidate pool, memoized by request id. Valid
    /// only while the encoder stays frozen, which holds within each auction
    /// phase and within report measurement.
    fn pool_encoding(
        &self,
        store: &ParamStore,
        cache: &mut HashMap<u64, EncodedValues>,
        request: &SimulatedRequest,
    ) -> Result<EncodedValues, ExperimentError> {
        if !cache.contains_key(&request.request_id) {
            let enc = encode_request(
                store,
                &self.model,
                &self.art.store,
                request.user_id,
                &request.candidates,
            )?;
            cache.insert(request.request_id, enc);
        }
        Ok(cache[&request.request_id].clone())
    }

    fn rlaf_loop(
        &self,
        store: &mut ParamStore,
        log: &mut impl Write,
    ) -> Result<(), ExperimentError> {
        let cfg = self.cfg();
        let mut opt = Adam::new(AdamConfig { lr: cfg.rlaf_lr, ..AdamConfig::default() });
        let mut rng = ChaCha12Rng::seed_from_u64(derive_seed(self.train_seed, "rlaf", 0));
        let mut encodings = HashMap::new();
        for step in 0..cfg.rlaf_steps {
            let idx = self.batch_indices(self.art.train.len(), cfg.rlaf_batch, &mut rng);
            let mut items = Vec::with_capacity(idx.len());
            for i in idx {
                let r = &self.art.train[i];
                let enc = self.pool_encoding(store, &mut encodings, r)?;
                let bids = self.pool_bids(r)?;
                items.push(prepare_rlaf_item(store, &self.model, enc, bids)?);
            }
            let loss = rlaf_step(store, &self.model, &items, &mut opt)?;
            writeln!(log, "{}", serde_json::json!({ "step": step, "loss": loss }))?;
        }
        Ok(())
    }

    fn payment_loop(
        &self,
        store: &mut ParamStore,
        log: &mut impl Write,
    ) -> Result<(), ExperimentError> {
        let cfg = self.cfg();
        let mut opt = Adam::new(AdamConfig { lr: cfg.payment_lr, ..AdamConfig::default() });
        let mut rng = ChaCha12Rng::seed_from_u64(derive_seed(self.train_seed, "payment", 0));
        let mut lagr = LagrangianState::new(cfg.rho, cfg.dual_period);
        let grid = gamma_grid();
        let mut encodings = HashMap::new();
        // Per-ad regret sums and counts over the current dual window.
        let mut window: BTreeMap<AdId, (f64, u64)> = BTreeMap::new();
        for step in 0..cfg.payment_steps {
            let idx = self.batch_indices(self.art.train.len(), cfg.payment_batch, &mut rng);
            let mut items = Vec::with_capacity(idx.len());
            for i in idx {
                let r = &self.art.train[i];
                items.push(PaymentItem {
                    ad_ids: r.candidates.clone(),
                    enc: self.pool_encoding(store, &mut encodings, r)?,
                    bids: self.pool_bids(r)?,
                    values: self.pool_values(r)?,
                });
            }
            let report = payment_step(store, &self.model, &items, &lagr, &grid, &mut opt)?;
            for &(ad, tgt) in &report.regrets {
                let e = window.entry(ad).or_insert((0.0, 0));
                e.0 += tgt;
                e.1 += 1;
            }
            if (step + 1) % cfg.dual_period == 0 {
                let means: BTreeMap<AdId, f64> =
                    window.iter().map(|(&ad, &(sum, n))| (ad, sum / n as f64)).collect();
                dual_update(&mut lagr, &means);
                window.clear();
            }
            writeln!(
                log,
                "{}",
                serde_json::json!({
                    "step": step,
                    "loss": report.loss,
                    "revenue": report.revenue,
                    "mean_regret": report.mean_regret,
                })
            )?;
        }
        let file = File::create(self.out.join("lagrangian.json"))?;
        serde_json::to_writer_pretty(BufWriter::new(file), &lagr)?;
        Ok(())
    }

    /// The full metric block for one split under one serving rule:
    /// candidate-level ranking quality, slate-level expected value, pCTR
    /// calibration, and the counterfactual incentive estimate.
    pub fn split_metrics(
        &self,
        store: &ParamStore,
        split: &[SimulatedRequest],
        rule: AllocationRule,
    ) -> Result<MetricReport, ExperimentError> {
        let grid = gamma_grid();
        let mut scores = Vec::new();
        let mut labels = Vec::new();
        let mut recalls = Vec::new();
        let mut pctr_sum = 0.0;
        let mut clicks = 0u64;
        let mut exposed_total = 0u64;
        let mut slates = Vec::with_capacity(split.len());
        let mut psi_terms = Vec::new();
        let mut encodings = HashMap::new();
        for r in split {
            let s = r.sample();
            let ids: Vec<AdId> =
                s.exposed.iter().chain(&s.unexposed).map(|&(id, _)| id).collect();
            let lab: Vec<bool> = s.exposed.iter().chain(&s.unexposed).map(|&(_, c)| c).collect();
            let enc =
                encode_request(store, &self.model, &self.art.store, r.user_id, &ids)?;
            if let Some(rec) = recall_at_k(&enc.qctr, &lab, RECALL_CUTOFF) {
                recalls.push(rec);
            }
            for (slot, &(_, clicked)) in s.exposed.iter().enumerate() {
                pctr_sum += enc.qctr[slot];
                clicks += clicked as u64;
                exposed_total += 1;
            }
            scores.extend_from_slice(&enc.qctr);
            labels.extend_from_slice(&lab);

            let pool_enc = self.pool_encoding(store, &mut encodings, r)?;
            let mech = MechanismCache::new(store, &self.model, &pool_enc, rule)?;
            let bids = self.pool_bids(r)?;
            let served = mech.serve(&bids)?;
            slates.push(SlateValue {
                qctr: served.q_slots.clone(),
                payment: served.payments.clone(),
            });
            for &winner in &served.slate {
                let v = self.art.store.ad(r.candidates[winner])?.private_value;
                let mut mechanism = |b: f64| {
                    let mut profile = bids.clone();
                    profile[winner] = b;
                    let outcome = mech.serve(&profile).expect("perturbed-bid serve");
                    focal_outcome(&outcome, winner)
                };
                let u_truth = utility(v, &mechanism(v));
                let est = empirical_regret(&mut mechanism, &[v], &grid);
                psi_terms.push((est.tgt, u_truth));
            }
        }
        let value = expected_value_metrics(&slates);
        let psi = psi_metric(&psi_terms);
        let realized = if exposed_total == 0 { 0.0 } else { clicks as f64 / exposed_total as f64 };
        let pctr_mean = if exposed_total == 0 { 0.0 } else { pctr_sum / exposed_total as f64 };
        Ok(MetricReport {
            recall_at_k: if recalls.is_empty() {
                None
            } else {
                Some(recalls.iter().sum::<f64>() / recalls.len() as f64)
            },
            auc: auc(&scores, &labels),
            ectr: value.ectr,
            erpm: value.erpm,
            deviation: deviation(pctr_mean, realized),
            psi: psi.psi,
            psi_skipped: psi.skipped,
        })
    }

    /// Measured-versus-closed-form accounting for one representative
    /// request under the current parameters.
    fn flops_snapshot(&self, store: &ParamStore) -> Result<FlopsReport, ExperimentError> {
        let r = self.art.test.first().unwrap_or(&self.art.train[0]);
        flops_report_for(&self.model, store, &self.art.store, r)
    }
}

/// Builds the closed-form/measured table for a config without touching any
/// trained weights: a scratch world slice and fresh parameters suffice,
/// because FLOP counts depend on shapes alone.
pub fn flops_table(cfg: &HarnessConfig) -> Result<FlopsReport, ExperimentError> {
    cfg.validate()?;
    let model = cfg.model_config()?;
    let mut store = ParamStore::new();
    let mut rng = ChaCha12Rng::seed_from_u64(derive_seed(cfg.seed, "flops", 0));
    init_model_params(&model, &mut store, &mut rng)?;

    let mut fs = FeatureStore::new(cfg.schema());
    for id in 1..=cfg.n_candidates as u64 {
        fs.insert_ad(AdFeatureRecord {
            ad_id: id,
            categorical_features: vec![1 + (id % cfg.ad_feature_buckets as u64) as u32; cfg.n_ad_features],
            bid: 1.0,
            private_value: 1.0,
        })?;
    }
    fs.insert_user(UserFeatureRecord {
        user_id: 1,
        categorical_features: vec![1; cfg.n_user_features],
        behavior_sequence: (0..cfg.behavior_len)
            .map(|i| (1 + (i as u64 % cfg.n_candidates as u64), i as u64))
            .collect(),
        context: ContextFeatures { time_bucket: 1, location_bucket: 1 },
    })?;
    let request = SimulatedRequest {
        request_id: 0,
        user_id: 1,
        candidates: (1..=cfg.n_candidates as u64).collect(),
        exposed: Vec::new(),
        unexposed: Vec::new(),
    };
    flops_report_for(&model, &store, &fs, &request)
}

fn flops_report_for(
    model: &ModelConfig,
    store: &ParamStore,
    fs: &FeatureStore,
    request: &SimulatedRequest,
) -> Result<FlopsReport, ExperimentError> {
    let cfg = &model.rec;
    let n = request.candidates.len() as f64;
    let l = model.schema.behavior_len as f64;
    let d = cfg.d as f64;
    let n_c = cfg.n_c as f64;

    let (enc, encoder_flops) = flops::measured(|| {
        encode_request(store, model, fs, request.user_id, &request.candidates)
    });
    let enc = enc?;
    let mut closed_encoder = flops_gcf(cfg.m as f64, n, n_c, d) + flops_gcf(cfg.m as f64, l, n_c, d);
    if cfg.mif_enabled {
        closed_encoder += flops_mif(cfg.m_k() as f64, n, l, n_c, d);
    }

    let mut entries = vec![("encoder", encoder_flops as f64, closed_encoder)];
    let mut serve_flops = 0;
    if model.uses_learned_auction() {
        let (served, measured) = flops::measured(|| {
            let mech = MechanismCache::new(store, model, &enc, AllocationRule::Learned)?;
            let bids = vec![1.0; request.candidates.len()];
            mech.serve(&bids)
        });
        served?;
        serve_flops = measured;
        let closed_auf = flops_auf(model.auc.m_e as f64, n, model.auc.k as f64, d);
        entries.push(("auction", serve_flops as f64, closed_auf));
    }
    let _ = serve_flops;

    let entries_ref: Vec<(&str, f64, f64)> = entries.iter().map(|&(a, b, c)| (a, b, c)).collect();
    let ratio = crate::evaluation::ega_mca_ratio_approx(
        cfg.m_k() as f64,
        n,
        l,
        d,
        cfg.m as f64,
        (0.033 * n).ceil(),
    );
    Ok(FlopsReport { entries: flops_compare(&entries_ref), ratio_approx: ratio })
}

/// Reads every `report-*.json` under `out`, phase order preserved where
/// known, for the CLI's summary view.
pub fn read_reports(out: &Path) -> Result<Vec<RunReport>, ExperimentError> {
    let order = ["pretrain", "reward", "rlaf", "payment", "evaluate"];
    let mut reports = Vec::new();
    for phase in order {
        let path = out.join(format!("report-{phase}.json"));
        if path.exists() {
            let report: RunReport = serde_json::from_reader(BufReader::new(File::open(path)?))?;
            reports.push(report);
        }
    }
    Ok(reports)
}
