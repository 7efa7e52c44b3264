//! Experiment configuration: one JSON file drives every subcommand.
//!
//! Every field has a default, so `{}` is a valid config and a sparse file
//! only overrides what it names. Unknown top-level keys are rejected to
//! catch typos before they silently fall back to defaults.

use serde::{Deserialize, Serialize};

use dedtwin::botspo::{BoConfig, ObjectiveSpec};
use dedtwin::profile::PowerMap;
use dedtwin::sampling::StatsBounds;
use dedtwin::surrogate::SurrogateConfig;
use dedtwin::thermal::{BuildSpec, MaterialProps, SimConfig};

/// Profile-library stage settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProfilesConfig {
    pub count: usize,
    pub duration_s: f64,
    pub sample_period_s: f64,
    pub clamp_w: [f64; 2],
    pub stats: StatsBounds,
}

impl Default for ProfilesConfig {
    fn default() -> ProfilesConfig {
        ProfilesConfig {
            count: 50,
            duration_s: 280.0,
            sample_period_s: 0.02,
            clamp_w: [0.0, 1000.0],
            stats: StatsBounds::default(),
        }
    }
}

/// Root config. `seed` and `out_dir` may be overridden from the command
/// line; the override is applied before the config hash is computed, so the
/// manifest records what actually ran.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub out_dir: String,
    pub seed: u64,
    /// Fraction of profiles assigned to the training split.
    pub train_frac: f64,
    /// Monte Carlo samples per predicted window.
    pub mc_samples: usize,
    pub profiles: ProfilesConfig,
    pub build: BuildSpec,
    pub material: MaterialProps,
    pub sim: SimConfig,
    pub power_map: PowerMap,
    pub surrogate: SurrogateConfig,
    pub objective: ObjectiveSpec,
    /// Optimizer settings. Its `seed` field is ignored: the stage seed is
    /// derived from the experiment seed like every other stage's.
    pub bo: BoConfig,
}

impl Default for ExperimentConfig {
    fn default() -> ExperimentConfig {
        ExperimentConfig {
            out_dir: "out".into(),
            seed: 0,
            train_frac: 0.8,
            mc_samples: 30,
            profiles: ProfilesConfig::default(),
            build: BuildSpec::default(),
            material: MaterialProps::default(),
            sim: SimConfig::default(),
            power_map: PowerMap::default(),
            surrogate: SurrogateConfig::default(),
            objective: ObjectiveSpec::default(),
            bo: BoConfig::default(),
        }
    }
}

/// Stage indices for [`stage_seed`]. U32::MAX-adjacent values are reserved
/// by the library internals, so small integers are safe here.
pub mod stage {
    pub const PROFILES: u64 = 0;
    pub const DATASET: u64 = 1;
    pub const TRAIN: u64 = 2;
    pub const PREDICT: u64 = 3;
    pub const OPTIMIZE: u64 = 4;
}

/// Decorrelates the per-stage streams from the single experiment seed.
/// Same mix as the library uses internally for sub-streams.
pub fn stage_seed(seed: u64, stage: u64) -> u64 {
    seed ^ (stage.wrapping_add(1)).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_object_is_a_full_config() {
        let cfg: ExperimentConfig = serde_json::from_str("{}").unwrap();
        assert_eq!(cfg, ExperimentConfig::default());
        assert_eq!(cfg.profiles.count, 50);
        assert_eq!(cfg.bo.n_init, 50);
    }

    #[test]
    fn sparse_overrides_leave_the_rest_alone() {
        let cfg: ExperimentConfig = serde_json::from_str(
            r#"{"seed": 7, "profiles": {"count": 3}, "bo": {"n_iter": 5}}"#,
        )
        .unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.profiles.count, 3);
        assert_eq!(cfg.profiles.duration_s, 280.0);
        assert_eq!(cfg.bo.n_iter, 5);
        assert_eq!(cfg.bo.n_init, 50);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(serde_json::from_str::<ExperimentConfig>(r#"{"sed": 7}"#).is_err());
    }

    #[test]
    fn stage_seeds_differ() {
        let s = 42;
        let all = [
            stage_seed(s, stage::PROFILES),
            stage_seed(s, stage::DATASET),
            stage_seed(s, stage::TRAIN),
            stage_seed(s, stage::PREDICT),
            stage_seed(s, stage::OPTIMIZE),
        ];
        for i in 0..all.len() {
            for j in 0..i {
                assert_ne!(all[i], all[j]);
            }
        }
    }
}
