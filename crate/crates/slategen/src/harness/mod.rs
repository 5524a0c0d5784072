//! Desk-scale experiment harness: a synthetic auction world with a planted
//! click oracle, the phase driver that takes a model from raw parameters
//! through the full training schedule, and machine-readable run reports.

pub mod config;
pub mod experiment;
pub mod world;

pub use config::{ConfigError, HarnessConfig};
pub use experiment::{flops_table, read_reports, Experiment, ExperimentError, RunReport};
pub use world::{
    generate_world, ClickOracle, SimulatedRequest, World, WorldArtifacts, WorldError,
};

/// Deterministic stream splitting: FNV-1a over (base seed, label, index).
/// Every random decision in the harness draws from a generator seeded this
/// way, so streams never alias across phases, requests, or steps.
pub fn derive_seed(base: u64, label: &str, index: u64) -> u64 {
    const OFFSET: u64 = 0xcbf29ce484222325;
    const PRIME: u64 = 0x100000001b3;
    let mut h = OFFSET;
    for &b in base
        .to_le_bytes()
        .iter()
        .chain(label.as_bytes())
        .chain(index.to_le_bytes().iter())
    {
        h ^= b as u64;
        h = h.wrapping_mul(PRIME);
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seed_derivation_matches_fnv1a_reference_values() {
        // FNV-1a of the empty input is the offset basis; of "a" it is the
        // published 64-bit test vector. Our input always carries the two
        // u64 halves, so check those paths against a direct restatement.
        fn reference(bytes: &[u8]) -> u64 {
            let mut h = 0xcbf29ce484222325u64;
            for &b in bytes {
                h = (h ^ b as u64).wrapping_mul(0x100000001b3);
            }
            h
        }
        let mut bytes = Vec::new();
        bytes.extend_from_slice(&7u64.to_le_bytes());
        bytes.extend_from_slice(b"pretrain");
        bytes.extend_from_slice(&3u64.to_le_bytes());
        assert_eq!(derive_seed(7, "pretrain", 3), reference(&bytes));
        assert_eq!(reference(b"a"), 0xaf63dc4c8601ec8c);
    }

    #[test]
    fn seed_streams_do_not_collide_across_labels_or_indices() {
        let mut seen = std::collections::BTreeSet::new();
        for label in ["world", "request", "negatives", "pretrain", "reward", "rlaf", "payment"] {
            for idx in 0..200u64 {
                assert!(seen.insert(derive_seed(11, label, idx)), "collision at {label}/{idx}");
            }
        }
        assert_ne!(derive_seed(1, "x", 0), derive_seed(2, "x", 0));
    }
}
