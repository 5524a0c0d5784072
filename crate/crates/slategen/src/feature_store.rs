//! Split feature service: ad features are embedded from local
//! categorical-only tables, user and context features arrive through a
//! single simulated remote fetch per request, and atomic counters expose
//! the call/byte cost of each side.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use indexmap::IndexMap;
use rand::Rng;
use serde::{de::DeserializeOwned, Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::{Matrix, ParamMode, ParamStore, Tape, Var};

/// Reserved identifier embedding to the zero vector (padding / absent).
pub const NULL_ID: u32 = 0;

pub type AdId = u64;
pub type UserId = u64;

#[derive(Debug, Error, PartialEq)]
pub enum FeatureError {
    #[error("unknown ad id {0}")]
    UnknownAd(AdId),
    #[error("unknown user id {0}")]
    UnknownUser(UserId),
    #[error("unknown feature id {id} in slot {slot} (vocabulary size {vocab})")]
    UnknownFeature { slot: usize, id: u32, vocab: usize },
    #[error("ad {0}: expected {1} categorical slots, found {2}")]
    WrongSlotCount(AdId, usize, usize),
    #[error("ad {0}: bid must be positive, got {1}")]
    NonPositiveBid(AdId, f64),
    #[error("ad {0}: private value must be positive, got {1}")]
    NonPositiveValue(AdId, f64),
    #[error("behavior sequence longer than {0}")]
    BehaviorTooLong(usize),
}

#[derive(Debug, Error)]
pub enum CorpusIoError {
    #[error("corpus io: {0}")]
    Io(#[from] std::io::Error),
    #[error("corpus parse error on line {line}: {source}")]
    Parse { line: usize, source: serde_json::Error },
    #[error("corpus file has header {got:?}, expected {want:?}")]
    WrongHeader { got: String, want: String },
}

/// One ad: categorical feature values, click bid, and the private value the
/// mechanism never sees.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdFeatureRecord {
    pub ad_id: AdId,
    pub categorical_features: Vec<u32>,
    pub bid: f64,
    pub private_value: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContextFeatures {
    pub time_bucket: u32,
    pub location_bucket: u32,
}

/// One user: categorical profile, clicked-ad history (most recent last,
/// padded with [`NULL_ID`]), and request-time context buckets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserFeatureRecord {
    pub user_id: UserId,
    pub categorical_features: Vec<u32>,
    pub behavior_sequence: Vec<(AdId, u64)>,
    pub context: ContextFeatures,
}

/// Shapes of the feature space shared by the store and the model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSchema {
    /// Categorical slots per ad.
    pub ad_vocab: Vec<usize>,
    /// Categorical slots per user profile.
    pub user_vocab: Vec<usize>,
    /// Context slots (time bucket, location bucket, ...).
    pub ctx_vocab: Vec<usize>,
    /// Behavior sequence length L (padded).
    pub behavior_len: usize,
    /// Model dimension d.
    pub d: usize,
}

impl FeatureSchema {
    pub fn n_ad_features(&self) -> usize {
        self.ad_vocab.len()
    }

    /// Per-feature embedding width: d / N_f, rounded, at least 1.
    pub fn d_f(&self) -> usize {
        let n = self.n_ad_features().max(1);
        (((self.d as f64) / n as f64).round() as usize).max(1)
    }

    /// Ads skip the output projection when the concatenation already has
    /// width d.
    pub fn ad_needs_projection(&self) -> bool {
        self.n_ad_features() * self.d_f() != self.d
    }

    pub fn user_concat_width(&self) -> usize {
        (self.user_vocab.len() + self.ctx_vocab.len()) * self.d_f()
    }
}

/// Monotone access counters (snapshot type).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct AccessCounters {
    pub local_fetches: u64,
    pub remote_calls: u64,
    pub bytes_local: u64,
    pub bytes_remote: u64,
}

#[derive(Debug, Default)]
struct CounterCells {
    local_fetches: AtomicU64,
    remote_calls: AtomicU64,
    bytes_local: AtomicU64,
    bytes_remote: AtomicU64,
}

/// Local ad corpus + user directory with the access-counting contract:
/// every ad embedding touches only local state, and each user fetch is
/// exactly one remote call whose payload size does not depend on the
/// candidate count.
#[derive(Debug)]
pub struct FeatureStore {
    schema: FeatureSchema,
    ads: IndexMap<AdId, AdFeatureRecord>,
    users: IndexMap<UserId, UserFeatureRecord>,
    counters: CounterCells,
}

impl FeatureStore {
    pub fn new(schema: FeatureSchema) -> Self {
        FeatureStore { schema, ads: IndexMap::new(), users: IndexMap::new(), counters: CounterCells::default() }
    }

    pub fn schema(&self) -> &FeatureSchema {
        &self.schema
    }

    pub fn insert_ad(&mut self, record: AdFeatureRecord) -> Result<(), FeatureError> {
        self.validate_ad(&record)?;
        self.ads.insert(record.ad_id, record);
        Ok(())
    }

    pub fn insert_user(&mut self, record: UserFeatureRecord) -> Result<(), FeatureError> {
        if record.behavior_sequence.len() > self.schema.behavior_len {
            return Err(FeatureError::BehaviorTooLong(self.schema.behavior_len));
        }
        self.users.insert(record.user_id, record);
        Ok(())
    }

    pub fn ad(&self, id: AdId) -> Result<&AdFeatureRecord, FeatureError> {
        self.ads.get(&id).ok_or(FeatureError::UnknownAd(id))
    }

    pub fn user(&self, id: UserId) -> Result<&UserFeatureRecord, FeatureError> {
        self.users.get(&id).ok_or(FeatureError::UnknownUser(id))
    }

    pub fn ads(&self) -> impl Iterator<Item = &AdFeatureRecord> {
        self.ads.values()
    }

    pub fn users(&self) -> impl Iterator<Item = &UserFeatureRecord> {
        self.users.values()
    }

    pub fn n_ads(&self) -> usize {
        self.ads.len()
    }

    fn validate_ad(&self, record: &AdFeatureRecord) -> Result<(), FeatureError> {
        let n_f = self.schema.n_ad_features();
        if record.categorical_features.len() != n_f {
            return Err(FeatureError::WrongSlotCount(
                record.ad_id,
                n_f,
                record.categorical_features.len(),
            ));
        }
        for (slot, (&id, &vocab)) in record
            .categorical_features
            .iter()
            .zip(self.schema.ad_vocab.iter())
            .enumerate()
        {
            if id as usize >= vocab {
                return Err(FeatureError::UnknownFeature { slot, id, vocab });
            }
        }
        if record.bid <= 0.0 {
            return Err(FeatureError::NonPositiveBid(record.ad_id, record.bid));
        }
        if record.private_value <= 0.0 {
            return Err(FeatureError::NonPositiveValue(record.ad_id, record.private_value));
        }
        Ok(())
    }

    /// Embeds ad records onto the tape: per slot, a table lookup (null id is
    /// the zero row and receives no gradient), concatenated and projected to
    /// d only when the concatenation width differs from d.
    pub fn embed_records_tape(
        &self,
        tape: &mut Tape,
        params: &ParamStore,
        mode: ParamMode,
        records: &[&AdFeatureRecord],
    ) -> Result<Var, FeatureError> {
        for r in records {
            self.validate_ad(r)?;
        }
        let n_f = self.schema.n_ad_features();
        let d_f = self.schema.d_f();
        let mut parts: Option<Var> = None;
        for slot in 0..n_f {
            let table = self.table_var(tape, params, mode, &format!("emb/ad_feat{slot}"));
            let idx: Vec<Option<usize>> = records
                .iter()
                .map(|r| {
                    let id = r.categorical_features[slot];
                    if id == NULL_ID {
                        None
                    } else {
                        Some(id as usize)
                    }
                })
                .collect();
            let looked = tape.gather_rows(table, &idx);
            parts = Some(match parts {
                None => looked,
                Some(p) => tape.concat_cols(p, looked),
            });
        }
        let concat = parts.expect("schema has at least one ad feature");
        self.counters.local_fetches.fetch_add(records.len() as u64, Ordering::Relaxed);
        self.counters
            .bytes_local
            .fetch_add((records.len() * n_f * d_f * 8) as u64, Ordering::Relaxed);
        if self.schema.ad_needs_projection() {
            let proj = self.table_var(tape, params, mode, "emb/ad_proj");
            Ok(tape.matmul(concat, proj))
        } else {
            Ok(concat)
        }
    }

    /// Embeds ads by id from the local corpus.
    pub fn embed_ads_tape(
        &self,
        tape: &mut Tape,
        params: &ParamStore,
        mode: ParamMode,
        ids: &[AdId],
    ) -> Result<Var, FeatureError> {
        let records = ids.iter().map(|&id| self.ad(id)).collect::<Result<Vec<_>, _>>()?;
        self.embed_records_tape(tape, params, mode, &records)
    }

    /// Value-only convenience over [`FeatureStore::embed_ads_tape`].
    pub fn embed_ads(&self, params: &ParamStore, ids: &[AdId]) -> Result<Matrix, FeatureError> {
        let mut tape = Tape::new();
        let v = self.embed_ads_tape(&mut tape, params, ParamMode::Frozen, ids)?;
        Ok(tape.value(v).clone())
    }

    /// One remote call: brings back the user-categorical and context
    /// feature values (payload independent of any candidate count), then
    /// embeds the behavior sequence from the local ad tables. Returns
    /// (e_u: 1xd, E_bhvr: Lxd).
    pub fn fetch_user_tape(
        &self,
        tape: &mut Tape,
        params: &ParamStore,
        mode: ParamMode,
        user_id: UserId,
    ) -> Result<(Var, Var), FeatureError> {
        let user = self.user(user_id)?.clone();
        let d_f = self.schema.d_f();

        self.counters.remote_calls.fetch_add(1, Ordering::Relaxed);
        let payload_slots = self.schema.user_vocab.len() + self.schema.ctx_vocab.len();
        self.counters
            .bytes_remote
            .fetch_add((payload_slots * d_f * 8) as u64, Ordering::Relaxed);

        let mut concat: Option<Var> = None;
        let user_ids: Vec<u32> = user.categorical_features.clone();
        for (slot, (&id, &vocab)) in
            user_ids.iter().zip(self.schema.user_vocab.iter()).enumerate()
        {
            if id as usize >= vocab {
                return Err(FeatureError::UnknownFeature { slot, id, vocab });
            }
            let table = self.table_var(tape, params, mode, &format!("emb/user_feat{slot}"));
            let looked =
                tape.gather_rows(table, &[if id == NULL_ID { None } else { Some(id as usize) }]);
            concat = Some(match concat {
                None => looked,
                Some(p) => tape.concat_cols(p, looked),
            });
        }
        let ctx_ids = [user.context.time_bucket, user.context.location_bucket];
        for (slot, (&id, &vocab)) in ctx_ids.iter().zip(self.schema.ctx_vocab.iter()).enumerate() {
            if id as usize >= vocab {
                return Err(FeatureError::UnknownFeature { slot, id, vocab });
            }
            let table = self.table_var(tape, params, mode, &format!("emb/ctx_feat{slot}"));
            let looked =
                tape.gather_rows(table, &[if id == NULL_ID { None } else { Some(id as usize) }]);
            concat = Some(match concat {
                None => looked,
                Some(p) => tape.concat_cols(p, looked),
            });
        }
        let concat = concat.expect("schema has at least one user or context feature");
        let proj = self.table_var(tape, params, mode, "emb/user_proj");
        let e_u = tape.matmul(concat, proj);

        // Behavior ads embed from the local store, padded to L with nulls.
        let mut behavior_ids: Vec<AdId> = user.behavior_sequence.iter().map(|&(a, _)| a).collect();
        behavior_ids.resize(self.schema.behavior_len, NULL_ID as AdId);
        let e_bhvr = self.embed_behaviors_tape(tape, params, mode, &behavior_ids)?;
        Ok((e_u, e_bhvr))
    }

    /// Value-only convenience over [`FeatureStore::fetch_user_tape`].
    pub fn fetch_user(
        &self,
        params: &ParamStore,
        user_id: UserId,
    ) -> Result<(Matrix, Matrix), FeatureError> {
        let mut tape = Tape::new();
        let (e_u, e_bhvr) = self.fetch_user_tape(&mut tape, params, ParamMode::Frozen, user_id)?;
        Ok((tape.value(e_u).clone(), tape.value(e_bhvr).clone()))
    }

    fn embed_behaviors_tape(
        &self,
        tape: &mut Tape,
        params: &ParamStore,
        mode: ParamMode,
        ids: &[AdId],
    ) -> Result<Var, FeatureError> {
        // Null-padded positions embed to zero rows without a table read.
        let n_f = self.schema.n_ad_features();
        let d_f = self.schema.d_f();
        let mut per_slot_idx: Vec<Vec<Option<usize>>> = vec![Vec::with_capacity(ids.len()); n_f];
        let mut real = 0u64;
        for &id in ids {
            if id == NULL_ID as AdId {
                for slot_idx in per_slot_idx.iter_mut() {
                    slot_idx.push(None);
                }
                continue;
            }
            let record = self.ad(id)?;
            real += 1;
            for (slot, slot_idx) in per_slot_idx.iter_mut().enumerate() {
                let fid = record.categorical_features[slot];
                slot_idx.push(if fid == NULL_ID { None } else { Some(fid as usize) });
            }
        }
        self.counters.local_fetches.fetch_add(real, Ordering::Relaxed);
        self.counters.bytes_local.fetch_add(real * (n_f * d_f * 8) as u64, Ordering::Relaxed);

        let mut parts: Option<Var> = None;
        for (slot, idx) in per_slot_idx.iter().enumerate() {
            let table = self.table_var(tape, params, mode, &format!("emb/ad_feat{slot}"));
            let looked = tape.gather_rows(table, idx);
            parts = Some(match parts {
                None => looked,
                Some(p) => tape.concat_cols(p, looked),
            });
        }
        let concat = parts.expect("schema has at least one ad feature");
        if self.schema.ad_needs_projection() {
            let proj = self.table_var(tape, params, mode, "emb/ad_proj");
            Ok(tape.matmul(concat, proj))
        } else {
            Ok(concat)
        }
    }

    fn table_var(&self, tape: &mut Tape, params: &ParamStore, mode: ParamMode, name: &str) -> Var {
        tape.leaf_mode(params, name, mode)
    }

    /// Copy of the counters; no side effects.
    pub fn counters_report(&self) -> AccessCounters {
        AccessCounters {
            local_fetches: self.counters.local_fetches.load(Ordering::Relaxed),
            remote_calls: self.counters.remote_calls.load(Ordering::Relaxed),
            bytes_local: self.counters.bytes_local.load(Ordering::Relaxed),
            bytes_remote: self.counters.bytes_remote.load(Ordering::Relaxed),
        }
    }
}

/// Inserts all embedding parameters for `schema` into `store`. Table row 0
/// is the reserved null row and stays zero; other rows draw uniform values
/// scaled by 1/sqrt(width).
pub fn init_embedding_params(
    schema: &FeatureSchema,
    store: &mut ParamStore,
    rng: &mut impl Rng,
) -> Vec<String> {
    let d_f = schema.d_f();
    let mut names = Vec::new();
    let mut table = |store: &mut ParamStore,
                     rng: &mut dyn rand::RngCore,
                     name: String,
                     vocab: usize,
                     width: usize| {
        let scale = 1.0 / (width as f64).sqrt();
        let m = Matrix::from_fn(vocab, width, |i, _| {
            if i == NULL_ID as usize {
                0.0
            } else {
                rng.gen_range(-scale..scale)
            }
        });
        store.insert(&name, m).expect("fresh embedding name");
        names.push(name);
    };
    for (slot, &vocab) in schema.ad_vocab.iter().enumerate() {
        table(store, rng, format!("emb/ad_feat{slot}"), vocab, d_f);
    }
    for (slot, &vocab) in schema.user_vocab.iter().enumerate() {
        table(store, rng, format!("emb/user_feat{slot}"), vocab, d_f);
    }
    for (slot, &vocab) in schema.ctx_vocab.iter().enumerate() {
        table(store, rng, format!("emb/ctx_feat{slot}"), vocab, d_f);
    }
    if schema.ad_needs_projection() {
        let rows = schema.n_ad_features() * d_f;
        let scale = 1.0 / (rows as f64).sqrt();
        let m = Matrix::from_fn(rows, schema.d, |_, _| rng.gen_range(-scale..scale));
        store.insert("emb/ad_proj", m).expect("fresh embedding name");
        names.push("emb/ad_proj".to_string());
    }
    {
        let rows = schema.user_concat_width();
        let scale = 1.0 / (rows as f64).sqrt();
        let m = Matrix::from_fn(rows, schema.d, |_, _| rng.gen_range(-scale..scale));
        store.insert("emb/user_proj", m).expect("fresh embedding name");
        names.push("emb/user_proj".to_string());
    }
    names
}

/// Writes records as line-delimited JSON under a versioned header line.
pub fn save_jsonl<T: Serialize>(
    path: &Path,
    kind: &str,
    records: impl Iterator<Item = T>,
) -> Result<(), CorpusIoError> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "{}", serde_json::json!({ "schema": format!("{kind}/v1") }))?;
    for r in records {
        writeln!(w, "{}", serde_json::to_string(&r).expect("serializable record"))?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a versioned JSONL file written by [`save_jsonl`].
pub fn load_jsonl<T: DeserializeOwned>(path: &Path, kind: &str) -> Result<Vec<T>, CorpusIoError> {
    let r = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    let want = format!("{kind}/v1");
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        if i == 0 {
            let header: serde_json::Value =
                serde_json::from_str(&line).map_err(|source| CorpusIoError::Parse { line: 1, source })?;
            let got = header["schema"].as_str().unwrap_or("").to_string();
            if got != want {
                return Err(CorpusIoError::WrongHeader { got, want });
            }
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|source| CorpusIoError::Parse { line: i + 1, source })?,
        );
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    fn schema() -> FeatureSchema {
        FeatureSchema {
            ad_vocab: vec![9, 9, 9, 9],
            user_vocab: vec![7, 7],
            ctx_vocab: vec![5, 6],
            behavior_len: 4,
            d: 8,
        }
    }

    fn store_with_params() -> (FeatureStore, ParamStore) {
        let mut params = ParamStore::new();
        let mut rng = ChaCha12Rng::seed_from_u64(11);
        let schema = schema();
        init_embedding_params(&schema, &mut params, &mut rng);
        let mut fs = FeatureStore::new(schema);
        for i in 1..=20u64 {
            fs.insert_ad(AdFeatureRecord {
                ad_id: i,
                categorical_features: vec![
                    1 + (i % 8) as u32,
                    1 + ((i / 2) % 8) as u32,
                    1 + ((i / 3) % 8) as u32,
                    1 + ((i / 4) % 8) as u32,
                ],
                bid: 1.0 + i as f64 / 10.0,
                private_value: 1.0 + i as f64 / 10.0,
            })
            .unwrap();
        }
        fs.insert_user(UserFeatureRecord {
            user_id: 1,
            categorical_features: vec![2, 3],
            behavior_sequence: vec![(1, 10), (2, 20)],
            context: ContextFeatures { time_bucket: 1, location_bucket: 2 },
        })
        .unwrap();
        fs.insert_user(UserFeatureRecord {
            user_id: 2,
            categorical_features: vec![4, 5],
            behavior_sequence: vec![],
            context: ContextFeatures { time_bucket: 2, location_bucket: 1 },
        })
        .unwrap();
        (fs, params)
    }

    #[test]
    fn schema_widths() {
        let s = schema();
        assert_eq!(s.d_f(), 2);
        assert!(!s.ad_needs_projection());
        assert_eq!(s.user_concat_width(), 8);
    }

    #[test]
    fn all_null_features_embed_to_zero_row() {
        let (mut fs, params) = store_with_params();
        fs.insert_ad(AdFeatureRecord {
            ad_id: 99,
            categorical_features: vec![NULL_ID; 4],
            bid: 1.0,
            private_value: 1.0,
        })
        .unwrap();
        let e = fs.embed_ads(&params, &[99]).unwrap();
        assert_eq!(e, Matrix::zeros(1, 8));
    }

    #[test]
    fn identical_features_embed_identically() {
        let (mut fs, params) = store_with_params();
        fs.insert_ad(AdFeatureRecord {
            ad_id: 100,
            categorical_features: vec![3, 3, 3, 3],
            bid: 1.0,
            private_value: 1.0,
        })
        .unwrap();
        fs.insert_ad(AdFeatureRecord {
            ad_id: 101,
            categorical_features: vec![3, 3, 3, 3],
            bid: 9.0,
            private_value: 9.0,
        })
        .unwrap();
        let e = fs.embed_ads(&params, &[100, 101]).unwrap();
        assert_eq!(e.row(0), e.row(1));
    }

    #[test]
    fn embed_ads_counts_local_only() {
        let (fs, params) = store_with_params();
        let before = fs.counters_report();
        let _ = fs.embed_ads(&params, &[1, 2, 3]).unwrap();
        let after = fs.counters_report();
        assert_eq!(after.local_fetches - before.local_fetches, 3);
        assert_eq!(after.remote_calls, before.remote_calls);
        assert!(after.bytes_local > before.bytes_local);
        assert_eq!(after.bytes_remote, before.bytes_remote);
    }

    #[test]
    fn fetch_user_is_exactly_one_remote_call() {
        let (fs, params) = store_with_params();
        let before = fs.counters_report();
        let _ = fs.fetch_user(&params, 1).unwrap();
        let after = fs.counters_report();
        assert_eq!(after.remote_calls - before.remote_calls, 1);
    }

    #[test]
    fn empty_behavior_sequence_embeds_to_zeros() {
        let (fs, params) = store_with_params();
        let (_, e_bhvr) = fs.fetch_user(&params, 2).unwrap();
        assert_eq!(e_bhvr, Matrix::zeros(4, 8));
    }

    #[test]
    fn remote_bytes_independent_of_candidate_count() {
        let (fs, params) = store_with_params();
        let ids: Vec<AdId> = (1..=20).collect();

        let r0 = fs.counters_report();
        let _ = fs.embed_ads(&params, &ids[..2]).unwrap();
        let _ = fs.fetch_user(&params, 1).unwrap();
        let r1 = fs.counters_report();

        let _ = fs.embed_ads(&params, &ids).unwrap();
        let _ = fs.fetch_user(&params, 1).unwrap();
        let r2 = fs.counters_report();

        let small = (r1.bytes_remote - r0.bytes_remote, r1.bytes_local - r0.bytes_local);
        let large = (r2.bytes_remote - r1.bytes_remote, r2.bytes_local - r1.bytes_local);
        assert_eq!(small.0, large.0, "remote payload must not depend on N");
        assert!(large.1 > small.1, "local bytes grow with N");
    }

    #[test]
    fn counters_fresh_zero_additive_monotone() {
        let (fs, params) = store_with_params();
        assert_eq!(fs.counters_report(), AccessCounters::default());
        for _ in 0..3 {
            let _ = fs.embed_ads(&params, &[1, 2, 3, 4]).unwrap();
        }
        let snap = fs.counters_report();
        assert_eq!(snap.local_fetches, 12);
        let _ = fs.fetch_user(&params, 1).unwrap();
        let snap2 = fs.counters_report();
        assert!(snap2.local_fetches >= snap.local_fetches);
        assert!(snap2.remote_calls >= snap.remote_calls);
        assert!(snap2.bytes_local >= snap.bytes_local);
        assert!(snap2.bytes_remote >= snap.bytes_remote);
    }

    #[test]
    fn unknown_feature_id_is_rejected_with_the_id() {
        let (mut fs, _) = store_with_params();
        let err = fs
            .insert_ad(AdFeatureRecord {
                ad_id: 200,
                categorical_features: vec![1, 42, 1, 1],
                bid: 1.0,
                private_value: 1.0,
            })
            .unwrap_err();
        assert_eq!(err, FeatureError::UnknownFeature { slot: 1, id: 42, vocab: 9 });
    }

    #[test]
    fn nonpositive_bid_rejected() {
        let (mut fs, _) = store_with_params();
        let err = fs
            .insert_ad(AdFeatureRecord {
                ad_id: 201,
                categorical_features: vec![1, 1, 1, 1],
                bid: 0.0,
                private_value: 1.0,
            })
            .unwrap_err();
        assert_eq!(err, FeatureError::NonPositiveBid(201, 0.0));
    }

    #[test]
    fn jsonl_roundtrip_with_header() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ads.jsonl");
        let records = vec![
            AdFeatureRecord { ad_id: 1, categorical_features: vec![1, 2], bid: 0.5, private_value: 0.5 },
            AdFeatureRecord { ad_id: 2, categorical_features: vec![3, 4], bid: 1.5, private_value: 2.0 },
        ];
        save_jsonl(&path, "ads", records.iter()).unwrap();
        let loaded: Vec<AdFeatureRecord> = load_jsonl(&path, "ads").unwrap();
        assert_eq!(loaded, records);
        let err = load_jsonl::<AdFeatureRecord>(&path, "users").unwrap_err();
        assert!(matches!(err, CorpusIoError::WrongHeader { .. }));
    }

    #[test]
    fn embedding_lookup_is_pure() {
        let (fs, params) = store_with_params();
        let a = fs.embed_ads(&params, &[5, 6]).unwrap();
        let b = fs.embed_ads(&params, &[5, 6]).unwrap();
        assert_eq!(a, b);
    }
}
