//! Flat `key = value` run configuration. One bag of typed keys covers the
//! world, the model shape, and the per-phase training settings, so a single
//! file pins an entire experiment. Unknown keys are rejected rather than
//! ignored: a typo must not silently fall back to a default.

use std::collections::BTreeSet;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::aucformer::AucFormerConfig;
use crate::feature_store::FeatureSchema;
use crate::pipeline::{ModelConfig, Variant};
use crate::recformer::RecFormerConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config io: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: expected `key = value`, got {text:?}")]
    Malformed { line: usize, text: String },
    #[error("line {line}: unknown key {key:?}")]
    UnknownKey { line: usize, key: String },
    #[error("line {line}: key {key:?} rejects value {value:?}: {why}")]
    BadValue { line: usize, key: String, value: String, why: String },
    #[error("config bound violated: {0}")]
    Bound(String),
}

/// Everything one experiment needs, with desk-scale defaults. Field names
/// are the config-file keys.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HarnessConfig {
    // World shape.
    pub n_total: usize,
    pub n_users: usize,
    pub n_candidates: usize,
    pub k: usize,
    pub behavior_len: usize,
    pub latent_dim: usize,
    pub latent_scale: f64,
    pub n_ad_features: usize,
    pub ad_feature_buckets: usize,
    pub n_user_features: usize,
    pub user_feature_buckets: usize,
    pub ctx_buckets: usize,
    pub bid_mu: f64,
    pub bid_sigma: f64,
    pub value_scale: f64,
    pub position_bias_start: f64,
    pub position_bias_step: f64,
    pub exposure_noise: f64,
    pub requests_train: usize,
    pub requests_val: usize,
    pub requests_test: usize,
    pub threads: usize,

    // Model shape.
    pub variant: String,
    pub d: usize,
    pub n_c: usize,
    pub n_h: usize,
    pub m: usize,
    pub m_c: usize,
    pub m_e: usize,
    pub ctr_h1: usize,
    pub ctr_h2: usize,
    pub eval_h1: usize,
    pub eval_h2: usize,
    pub pay_h1: usize,
    pub pay_h2: usize,

    // Training schedule.
    pub n_s: usize,
    pub pretrain_steps: usize,
    pub pretrain_batch: usize,
    pub pretrain_lr: f64,
    pub reward_steps: usize,
    pub reward_batch: usize,
    pub reward_lr: f64,
    pub rlaf_steps: usize,
    pub rlaf_batch: usize,
    pub rlaf_lr: f64,
    pub payment_steps: usize,
    pub payment_batch: usize,
    pub payment_lr: f64,
    pub rho: f64,
    pub dual_period: usize,

    pub seed: u64,
}

impl Default for HarnessConfig {
    fn default() -> Self {
        HarnessConfig {
            n_total: 2000,
            n_users: 64,
            n_candidates: 500,
            k: 5,
            behavior_len: 64,
            latent_dim: 4,
            latent_scale: 1.2,
            n_ad_features: 4,
            ad_feature_buckets: 32,
            n_user_features: 4,
            user_feature_buckets: 16,
            ctx_buckets: 8,
            bid_mu: 0.0,
            bid_sigma: 1.0,
            value_scale: 1.0,
            position_bias_start: -0.4,
            position_bias_step: -0.3,
            exposure_noise: 0.5,
            requests_train: 96,
            requests_val: 24,
            requests_test: 24,
            threads: 1,
            variant: "full".to_string(),
            d: 32,
            n_c: 16,
            n_h: 4,
            m: 2,
            m_c: 1,
            m_e: 2,
            ctr_h1: 48,
            ctr_h2: 24,
            eval_h1: 48,
            eval_h2: 24,
            pay_h1: 40,
            pay_h2: 20,
            n_s: 32,
            pretrain_steps: 150,
            pretrain_batch: 8,
            pretrain_lr: 3e-3,
            reward_steps: 60,
            reward_batch: 8,
            reward_lr: 1e-3,
            rlaf_steps: 30,
            rlaf_batch: 4,
            rlaf_lr: 1e-2,
            payment_steps: 40,
            payment_batch: 4,
            payment_lr: 1e-2,
            rho: 4.0,
            dual_period: 5,
            seed: 7,
        }
    }
}

macro_rules! apply_keys {
    ($self:ident, $key:ident, $value:ident, $line:ident; $($field:ident),+ $(,)?) => {
        match $key {
            $(stringify!($field) => {
                $self.$field = $value.parse().map_err(|e| ConfigError::BadValue {
                    line: $line,
                    key: $key.to_string(),
                    value: $value.to_string(),
                    why: format!("{e}"),
                })?;
            })+
            _ => {
                return Err(ConfigError::UnknownKey { line: $line, key: $key.to_string() });
            }
        }
    };
}

impl HarnessConfig {
    /// Parses a flat key=value file over the defaults. `#` starts a comment,
    /// blank lines are skipped, later assignments win.
    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)?;
        Self::from_str_over_defaults(&text)
    }

    pub fn from_str_over_defaults(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = HarnessConfig::default();
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let Some((key, value)) = content.split_once('=') else {
                return Err(ConfigError::Malformed { line, text: raw.to_string() });
            };
            cfg.apply(key.trim(), value.trim(), line)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn apply(&mut self, key: &str, value: &str, line: usize) -> Result<(), ConfigError> {
        apply_keys!(self, key, value, line;
            n_total, n_users, n_candidates, k, behavior_len, latent_dim, latent_scale,
            n_ad_features, ad_feature_buckets, n_user_features, user_feature_buckets,
            ctx_buckets, bid_mu, bid_sigma, value_scale, position_bias_start,
            position_bias_step, exposure_noise, requests_train, requests_val,
            requests_test, threads, variant, d, n_c, n_h, m, m_c, m_e, ctr_h1, ctr_h2,
            eval_h1, eval_h2, pay_h1, pay_h2, n_s, pretrain_steps, pretrain_batch,
            pretrain_lr, reward_steps, reward_batch, reward_lr, rlaf_steps, rlaf_batch,
            rlaf_lr, payment_steps, payment_batch, payment_lr, rho, dual_period, seed,
        );
        Ok(())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bound = |msg: String| Err(ConfigError::Bound(msg));
        if self.k == 0 {
            return bound("k must be at least 1".into());
        }
        if self.k > self.n_candidates {
            return bound(format!("k {} exceeds candidate pool n_candidates {}", self.k, self.n_candidates));
        }
        if self.n_candidates > self.n_total {
            return bound(format!(
                "n_candidates {} exceeds corpus n_total {}",
                self.n_candidates, self.n_total
            ));
        }
        if self.n_users == 0 {
            return bound("n_users must be at least 1".into());
        }
        if self.n_s == 0 {
            return bound("n_s must be at least 1".into());
        }
        if self.threads == 0 {
            return bound("threads must be at least 1".into());
        }
        if self.ad_feature_buckets == 0 || self.user_feature_buckets == 0 || self.ctx_buckets == 0
        {
            return bound("feature bucket counts must be at least 1".into());
        }
        if self.n_ad_features == 0 {
            return bound("n_ad_features must be at least 1".into());
        }
        if !(self.latent_scale > 0.0) {
            return bound("latent_scale must be positive".into());
        }
        if !(self.bid_sigma >= 0.0) {
            return bound("bid_sigma must be nonnegative".into());
        }
        if !(self.value_scale >= 1.0) {
            return bound("value_scale must be at least 1 so values cover bids".into());
        }
        if self.position_bias_step > 0.0 {
            return bound("position_bias_step must be nonpositive (bias decays down the slate)".into());
        }
        if !(self.exposure_noise >= 0.0) {
            return bound("exposure_noise must be nonnegative".into());
        }
        if self.requests_train == 0 || self.requests_val == 0 || self.requests_test == 0 {
            return bound("every request split must be nonempty".into());
        }
        if self.dual_period == 0 {
            return bound("dual_period must be at least 1".into());
        }
        self.variant()?;
        let model = self.model_config()?;
        model
            .validate()
            .map_err(|e| ConfigError::Bound(format!("model shape rejected: {e}")))?;
        Ok(())
    }

    pub fn variant(&self) -> Result<Variant, ConfigError> {
        Variant::from_str(&self.variant)
            .map_err(|e| ConfigError::Bound(format!("variant key: {e}")))
    }

    pub fn position_bias(&self) -> Vec<f64> {
        (0..self.k)
            .map(|s| self.position_bias_start + self.position_bias_step * s as f64)
            .collect()
    }

    pub fn schema(&self) -> FeatureSchema {
        FeatureSchema {
            // Slot 0 of every vocabulary is the null id, so bucket b maps to
            // value b + 1 and tables get one extra row.
            ad_vocab: vec![self.ad_feature_buckets + 1; self.n_ad_features],
            user_vocab: vec![self.user_feature_buckets + 1; self.n_user_features],
            ctx_vocab: vec![self.ctx_buckets + 1; 2],
            behavior_len: self.behavior_len,
            d: self.d,
        }
    }

    pub fn model_config(&self) -> Result<ModelConfig, ConfigError> {
        let variant = self.variant()?;
        Ok(ModelConfig {
            variant,
            rec: RecFormerConfig {
                d: self.d,
                n_c: self.n_c,
                n_h: self.n_h,
                m: self.m,
                m_c: self.m_c,
                mif_enabled: variant != Variant::NoMif,
                ctr_hidden: (self.ctr_h1, self.ctr_h2),
            },
            auc: AucFormerConfig {
                d: self.d,
                k: self.k,
                n_c: self.n_c,
                n_h: self.n_h,
                m_e: self.m_e,
                eval_hidden: (self.eval_h1, self.eval_h2),
                pay_hidden: (self.pay_h1, self.pay_h2),
            },
            schema: self.schema(),
        })
    }

    /// Renders the config back to the flat file format, keys sorted.
    pub fn to_config_text(&self) -> String {
        let json = serde_json::to_value(self).expect("config serializes");
        let map = json.as_object().expect("config is a flat object");
        let keys: BTreeSet<&String> = map.keys().collect();
        let mut out = String::new();
        for key in keys {
            let v = &map[key.as_str()];
            let rendered = match v {
                serde_json::Value::String(s) => s.clone(),
                other => other.to_string(),
            };
            out.push_str(&format!("{key} = {rendered}\n"));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_assemble_a_consistent_model() {
        let cfg = HarnessConfig::default();
        cfg.validate().unwrap();
        let model = cfg.model_config().unwrap();
        assert_eq!(model.variant, Variant::Full);
        assert!(model.rec.mif_enabled);
        assert_eq!(model.schema.ad_vocab, vec![33, 33, 33, 33]);
        assert_eq!(model.schema.d, 32);
        let bias = cfg.position_bias();
        assert_eq!(bias.len(), 5);
        assert!(bias.windows(2).all(|w| w[1] < w[0]), "bias must decay: {bias:?}");
    }

    #[test]
    fn parser_reads_keys_comments_and_blanks() {
        let text = "\n# a comment\nk = 3   # trailing comment\nn_candidates = 5\nvariant = no_mif\nseed = 99\n";
        let cfg = HarnessConfig::from_str_over_defaults(text).unwrap();
        assert_eq!(cfg.k, 3);
        assert_eq!(cfg.n_candidates, 5);
        assert_eq!(cfg.seed, 99);
        assert_eq!(cfg.variant().unwrap(), Variant::NoMif);
        assert!(!cfg.model_config().unwrap().rec.mif_enabled);
    }

    #[test]
    fn unknown_keys_and_malformed_lines_are_rejected() {
        let err = HarnessConfig::from_str_over_defaults("no_such_key = 1\n").unwrap_err();
        assert!(matches!(err, ConfigError::UnknownKey { line: 1, .. }), "{err}");
        let err = HarnessConfig::from_str_over_defaults("just some words\n").unwrap_err();
        assert!(matches!(err, ConfigError::Malformed { line: 1, .. }), "{err}");
        let err = HarnessConfig::from_str_over_defaults("k = banana\n").unwrap_err();
        assert!(matches!(err, ConfigError::BadValue { .. }), "{err}");
    }

    #[test]
    fn bounds_name_the_violated_constraint() {
        let err = HarnessConfig::from_str_over_defaults("k = 9\nn_candidates = 4\n").unwrap_err();
        assert!(err.to_string().contains("k 9 exceeds candidate pool"), "{err}");
        let err =
            HarnessConfig::from_str_over_defaults("n_candidates = 5000\n").unwrap_err();
        assert!(err.to_string().contains("exceeds corpus"), "{err}");
        let err = HarnessConfig::from_str_over_defaults("variant = gsp2\n").unwrap_err();
        assert!(err.to_string().contains("unknown variant"), "{err}");
    }

    #[test]
    fn config_text_round_trips() {
        let mut cfg = HarnessConfig::default();
        cfg.k = 3;
        cfg.n_candidates = 40;
        cfg.variant = "no_auf".to_string();
        cfg.latent_scale = 0.75;
        let text = cfg.to_config_text();
        let back = HarnessConfig::from_str_over_defaults(&text).unwrap();
        assert_eq!(back, cfg);
    }
}
