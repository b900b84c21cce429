//! Run configuration: one human-editable TOML document with sections for
//! data generation, splitting, training, evaluation and ablation. Every
//! command writes the fully-resolved configuration (defaults expanded)
//! beside its outputs so a run is reproducible from that artifact alone.
//! All randomness derives from the single root `seed` through named
//! streams.

use gpmil_core::attention::Normalization;
use gpmil_core::data::SyntheticSpec;
use gpmil_core::rng::stream_seed;
use gpmil_core::train::TrainConfig;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    #[serde(default = "d_n_bags")]
    pub n_bags: usize,
    #[serde(default = "d_k_min")]
    pub k_min: usize,
    #[serde(default = "d_k_max")]
    pub k_max: usize,
    #[serde(default = "d_feat_dim")]
    pub feat_dim: usize,
    #[serde(default = "d_n_classes")]
    pub n_classes: usize,
    /// Distance of each positive-class cluster mean from the origin.
    #[serde(default = "d_separation")]
    pub separation: f64,
    #[serde(default = "d_cluster_std")]
    pub cluster_std: f64,
    #[serde(default = "d_pos_frac_min")]
    pub pos_frac_min: f64,
    #[serde(default = "d_pos_frac_max")]
    pub pos_frac_max: f64,
}

fn d_n_bags() -> usize {
    300
}
fn d_k_min() -> usize {
    20
}
fn d_k_max() -> usize {
    50
}
fn d_feat_dim() -> usize {
    16
}
fn d_n_classes() -> usize {
    2
}
fn d_separation() -> f64 {
    3.0
}
fn d_cluster_std() -> f64 {
    1.0
}
fn d_pos_frac_min() -> f64 {
    0.05
}
fn d_pos_frac_max() -> f64 {
    0.2
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            n_bags: d_n_bags(),
            k_min: d_k_min(),
            k_max: d_k_max(),
            feat_dim: d_feat_dim(),
            n_classes: d_n_classes(),
            separation: d_separation(),
            cluster_std: d_cluster_std(),
            pos_frac_min: d_pos_frac_min(),
            pos_frac_max: d_pos_frac_max(),
        }
    }
}

impl DataSection {
    pub fn to_spec(&self, seed: u64) -> SyntheticSpec {
        SyntheticSpec::axis_separated(
            self.n_bags,
            (self.k_min, self.k_max),
            self.feat_dim,
            self.n_classes,
            self.separation,
            self.cluster_std,
            (self.pos_frac_min, self.pos_frac_max),
            seed,
        )
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSection {
    #[serde(default = "d_split_train")]
    pub train: f64,
    #[serde(default = "d_split_val")]
    pub val: f64,
    #[serde(default = "d_split_test")]
    pub test: f64,
}

fn d_split_train() -> f64 {
    0.6666666666666667
}
fn d_split_val() -> f64 {
    0.13333333333333333
}
fn d_split_test() -> f64 {
    0.2
}

impl Default for SplitSection {
    fn default() -> Self {
        SplitSection {
            train: d_split_train(),
            val: d_split_val(),
            test: d_split_test(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    #[serde(default = "d_eval_samples")]
    pub n_samples: usize,
    #[serde(default = "d_ece_bins")]
    pub ece_bins: usize,
}

fn d_eval_samples() -> usize {
    32
}
fn d_ece_bins() -> usize {
    15
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            n_samples: d_eval_samples(),
            ece_bins: d_ece_bins(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblateSection {
    /// Seeds per grid cell; run s uses root seed `seed + s`.
    #[serde(default = "d_ablate_seeds")]
    pub n_seeds: usize,
    #[serde(default = "d_inducing_counts")]
    pub inducing_counts: Vec<usize>,
    #[serde(default = "d_lm_axis")]
    pub use_lm: Vec<bool>,
    #[serde(default = "d_norm_axis")]
    pub normalizations: Vec<Normalization>,
    #[serde(default = "d_diag_axis")]
    pub diag_only: Vec<bool>,
}

fn d_ablate_seeds() -> usize {
    3
}
fn d_inducing_counts() -> Vec<usize> {
    vec![16, 80]
}
fn d_lm_axis() -> Vec<bool> {
    vec![true, false]
}
fn d_norm_axis() -> Vec<Normalization> {
    vec![Normalization::Softmax, Normalization::Sigmoid]
}
fn d_diag_axis() -> Vec<bool> {
    vec![true, false]
}

impl Default for AblateSection {
    fn default() -> Self {
        AblateSection {
            n_seeds: d_ablate_seeds(),
            inducing_counts: d_inducing_counts(),
            use_lm: d_lm_axis(),
            normalizations: d_norm_axis(),
            diag_only: d_diag_axis(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    #[serde(default)]
    pub data: DataSection,
    #[serde(default)]
    pub split: SplitSection,
    #[serde(default = "default_train_section")]
    pub train: TrainConfig,
    #[serde(default)]
    pub eval: EvalSection,
    #[serde(default)]
    pub ablate: AblateSection,
}

fn default_train_section() -> TrainConfig {
    TrainConfig::quick(20, 0)
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<RunConfig, String> {
        toml::from_str(text).map_err(|e| e.to_string())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Seed of a named stream under this config's root seed.
    pub fn stream(&self, name: &str) -> u64 {
        stream_seed(self.seed, name)
    }

    /// Training configuration with all seeding rooted at this config.
    pub fn train_config(&self) -> TrainConfig {
        let mut cfg = self.train.clone();
        cfg.seed = self.seed;
        cfg.eval_samples = self.eval.n_samples;
        cfg
    }

    pub fn validate(&self) -> Result<(), String> {
        let s = &self.split;
        if (s.train + s.val + s.test - 1.0).abs() > 1e-9 {
            return Err("split fractions must sum to 1".into());
        }
        if self.data.k_min == 0 || self.data.k_min > self.data.k_max {
            return Err("data.k_min must satisfy 1 <= k_min <= k_max".into());
        }
        if !(self.data.pos_frac_min > 0.0 && self.data.pos_frac_min <= self.data.pos_frac_max) {
            return Err("positive fraction range must lie in (0, 1]".into());
        }
        let a = &self.ablate;
        if a.n_seeds == 0
            || a.inducing_counts.is_empty()
            || a.use_lm.is_empty()
            || a.normalizations.is_empty()
            || a.diag_only.is_empty()
        {
            return Err("ablation grid axes must be nonempty".into());
        }
        Ok(())
    }
}
