//! Run configuration in TOML.
//!
//! Every table rejects unknown keys. Optional keys take the defaults below,
//! and [`RunConfig::to_canonical`] writes every key explicitly so that a
//! reload yields an identical value.
//!
//! ```toml
//! seed = 7
//! output_dir = "runs/demo"
//!
//! [scenario]
//! variant = "unsupervised"      # marginals_only | semi_supervised | unsupervised | hierarchical | triple_game
//! data = "categorical:8x1"
//! latent = ["categorical:4x1"]
//!
//! [training]
//! steps = 5000
//! alpha = 0.05
//!
//! [dataset]
//! source = { synthetic_tabular = { n = 100 } }
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use symvae::efcore::FamilyDescriptor;
use symvae::equilibrium::{
    Algorithm, Architecture, GradientSource, PriorKind, Scenario, ScenarioOptions, UpdateMode, Variant,
};

use crate::error::{io_err, validation, HarnessError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    #[serde(default = "defaults::output_dir")]
    pub output_dir: PathBuf,
    pub scenario: ScenarioConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub training: TrainingConfig,
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub chain: ChainConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VariantName {
    MarginalsOnly,
    SemiSupervised,
    Unsupervised,
    Hierarchical,
    TripleGame,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PriorName {
    #[default]
    Learned,
    Fixed,
    Implicit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub variant: VariantName,
    #[serde(with = "family")]
    pub data: FamilyDescriptor,
    #[serde(with = "family_list")]
    pub latent: Vec<FamilyDescriptor>,
    #[serde(default)]
    pub prior: PriorName,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub classes: Option<usize>,
    #[serde(default)]
    pub labelled: bool,
    #[serde(default = "defaults::one")]
    pub labelled_encoder_weight: f64,
    #[serde(default, with = "family_opt", skip_serializing_if = "Option::is_none")]
    pub segmentation: Option<FamilyDescriptor>,
    #[serde(default = "defaults::gibbs_sweeps")]
    pub gibbs_sweeps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Hidden layer widths shared by every map; empty gives affine maps.
    #[serde(default = "defaults::hidden")]
    pub hidden: Vec<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { hidden: defaults::hidden() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModeName {
    #[default]
    Parallel,
    Sequential,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlgorithmName {
    #[default]
    Nash,
    WakeSleep,
    Elbo,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradientName {
    #[default]
    MonteCarlo,
    Exact,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingConfig {
    #[serde(default = "defaults::steps")]
    pub steps: u64,
    /// Records per stream per step; 0 trains on the full data each step.
    #[serde(default = "defaults::batch_size")]
    pub batch_size: usize,
    /// Unconditioned model draws per step in full-batch mode.
    #[serde(default = "defaults::model_draws")]
    pub model_draws: usize,
    #[serde(default = "defaults::alpha")]
    pub alpha: f64,
    #[serde(default = "defaults::n_mc")]
    pub n_mc: usize,
    #[serde(default)]
    pub mode: ModeName,
    #[serde(default)]
    pub algorithm: AlgorithmName,
    #[serde(default)]
    pub gradient: GradientName,
    #[serde(default = "defaults::eval_every")]
    pub eval_every: u64,
    /// Steps between checkpoints; 0 writes only the final one.
    #[serde(default = "defaults::checkpoint_every")]
    pub checkpoint_every: u64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            steps: defaults::steps(),
            batch_size: defaults::batch_size(),
            model_draws: defaults::model_draws(),
            alpha: defaults::alpha(),
            n_mc: defaults::n_mc(),
            mode: ModeName::default(),
            algorithm: AlgorithmName::default(),
            gradient: GradientName::default(),
            eval_every: defaults::eval_every(),
            checkpoint_every: defaults::checkpoint_every(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub source: DatasetSource,
    /// Fraction of the records used for training; the rest is held out.
    #[serde(default = "defaults::train_fraction")]
    pub train_fraction: f64,
    /// Fraction of the training records whose labels are exposed to the
    /// labelled streams.
    #[serde(default = "defaults::one")]
    pub labelled_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetSource {
    SyntheticMixture(MixtureParams),
    SyntheticGrid(GridParams),
    SyntheticTabular(TabularParams),
    IdxImages(IdxParams),
}

/// `k` isotropic unit-variance Gaussians in `dim` dimensions whose means are
/// `separation` apart.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixtureParams {
    pub components: usize,
    pub dim: usize,
    pub separation: f64,
    pub n: usize,
}

/// `grid x grid` label fields made of `block x block` constant patches,
/// observed through one noisy intensity per pixel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridParams {
    pub grid: usize,
    pub labels: usize,
    #[serde(default = "defaults::block")]
    pub block: usize,
    pub noise: f64,
    pub n: usize,
}

/// Draws from a random strictly positive law over an enumerable data family.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TabularParams {
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IdxParams {
    pub images: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<PathBuf>,
    #[serde(default = "defaults::threshold")]
    pub threshold: f64,
    /// Use at most this many images.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub limit: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChainConfig {
    #[serde(default = "defaults::burn_in")]
    pub burn_in: usize,
    #[serde(default = "defaults::chain_samples")]
    pub n_samples: usize,
    #[serde(default = "defaults::thinning")]
    pub thinning: usize,
    /// Fraction of data sites hidden by `complete`.
    #[serde(default = "defaults::mask_fraction")]
    pub mask_fraction: f64,
    /// Held-out records completed by `complete`.
    #[serde(default = "defaults::completions")]
    pub completions: usize,
}

impl Default for ChainConfig {
    fn default() -> Self {
        Self {
            burn_in: defaults::burn_in(),
            n_samples: defaults::chain_samples(),
            thinning: defaults::thinning(),
            mask_fraction: defaults::mask_fraction(),
            completions: defaults::completions(),
        }
    }
}

mod defaults {
    use std::path::PathBuf;

    pub fn output_dir() -> PathBuf {
        PathBuf::from("out")
    }
    pub fn one() -> f64 {
        1.0
    }
    pub fn hidden() -> Vec<usize> {
        symvae::equilibrium::Architecture::default().hidden
    }
    pub fn gibbs_sweeps() -> usize {
        4
    }
    pub fn steps() -> u64 {
        1000
    }
    pub fn batch_size() -> usize {
        32
    }
    pub fn model_draws() -> usize {
        32
    }
    pub fn alpha() -> f64 {
        0.05
    }
    pub fn n_mc() -> usize {
        1
    }
    pub fn eval_every() -> u64 {
        100
    }
    pub fn checkpoint_every() -> u64 {
        1000
    }
    pub fn train_fraction() -> f64 {
        0.8
    }
    pub fn block() -> usize {
        2
    }
    pub fn threshold() -> f64 {
        0.5
    }
    pub fn burn_in() -> usize {
        1000
    }
    pub fn chain_samples() -> usize {
        10_000
    }
    pub fn thinning() -> usize {
        1
    }
    pub fn mask_fraction() -> f64 {
        0.25
    }
    pub fn completions() -> usize {
        100
    }
}

mod family {
    use serde::{de::Error, Deserialize, Deserializer, Serializer};
    use symvae::efcore::FamilyDescriptor;

    pub fn serialize<S: Serializer>(f: &FamilyDescriptor, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(f)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<FamilyDescriptor, D::Error> {
        String::deserialize(d)?.parse().map_err(D::Error::custom)
    }
}

mod family_list {
    use serde::{de::Error, ser::SerializeSeq, Deserialize, Deserializer, Serializer};
    use symvae::efcore::FamilyDescriptor;

    pub fn serialize<S: Serializer>(fs: &[FamilyDescriptor], s: S) -> Result<S::Ok, S::Error> {
        let mut seq = s.serialize_seq(Some(fs.len()))?;
        for f in fs {
            seq.serialize_element(&f.to_string())?;
        }
        seq.end()
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<FamilyDescriptor>, D::Error> {
        Vec::<String>::deserialize(d)?.iter().map(|t| t.parse().map_err(D::Error::custom)).collect()
    }
}

mod family_opt {
    use serde::{de::Error, Deserialize, Deserializer, Serializer};
    use symvae::efcore::FamilyDescriptor;

    pub fn serialize<S: Serializer>(f: &Option<FamilyDescriptor>, s: S) -> Result<S::Ok, S::Error> {
        match f {
            Some(f) => s.collect_str(f),
            None => s.serialize_none(),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<FamilyDescriptor>, D::Error> {
        Option::<String>::deserialize(d)?.map(|t| t.parse().map_err(D::Error::custom)).transpose()
    }
}

fn line_column(text: &str, offset: usize) -> (usize, usize) {
    let before = &text[..offset.min(text.len())];
    let line = before.matches('\n').count() + 1;
    let column = before.rsplit('\n').next().map_or(0, |l| l.chars().count()) + 1;
    (line, column)
}

impl RunConfig {
    /// Parses and validates a config; `path` only labels errors.
    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| {
            let (line, column) = e.span().map_or((0, 0), |s| line_column(text, s.start));
            HarnessError::Parse { path: path.into(), line, column, message: e.message().to_string() }
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Every key written explicitly, in declaration order.
    pub fn to_canonical(&self) -> String {
        toml::to_string(self).expect("configs always serialize")
    }

    pub fn validate(&self) -> Result<()> {
        let t = &self.training;
        if !(t.alpha >= 0.0 && t.alpha.is_finite()) {
            return validation("alpha", format!("must be finite and non-negative, got {}", t.alpha));
        }
        if t.n_mc == 0 {
            return validation("n_mc", "must be at least 1");
        }
        if t.eval_every == 0 {
            return validation("eval_every", "must be positive");
        }
        if t.checkpoint_every % t.eval_every != 0 {
            return validation("checkpoint_every", "must be a multiple of eval_every");
        }
        if t.batch_size == 0 && t.model_draws == 0 {
            return validation("model_draws", "full-batch training needs at least one model draw");
        }
        let s = &self.scenario;
        if !(s.labelled_encoder_weight >= 0.0 && s.labelled_encoder_weight.is_finite()) {
            return validation("labelled_encoder_weight", "must be finite and non-negative");
        }
        if s.latent.is_empty() {
            return validation("latent", "at least one latent family is required");
        }
        let d = &self.dataset;
        if !(d.train_fraction > 0.0 && d.train_fraction <= 1.0) {
            return validation("train_fraction", "must lie in (0, 1]");
        }
        if !(0.0..=1.0).contains(&d.labelled_fraction) {
            return validation("labelled_fraction", "must lie in [0, 1]");
        }
        match &d.source {
            DatasetSource::SyntheticMixture(m) => {
                if m.components == 0 || m.dim == 0 || m.n == 0 {
                    return validation("synthetic_mixture", "components, dim and n must be positive");
                }
                if m.components > 2 * m.dim {
                    return validation("components", "at most 2 * dim components fit on the axes");
                }
                if !(m.separation >= 0.0 && m.separation.is_finite()) {
                    return validation("separation", "must be finite and non-negative");
                }
                if s.data != (FamilyDescriptor::DiagonalGaussian { n: m.dim }) {
                    return validation("data", format!("mixture data needs gaussian:{}", m.dim));
                }
            }
            DatasetSource::SyntheticGrid(g) => {
                if g.grid == 0 || g.labels == 0 || g.block == 0 || g.n == 0 {
                    return validation("synthetic_grid", "grid, labels, block and n must be positive");
                }
                if !(g.noise >= 0.0 && g.noise.is_finite()) {
                    return validation("noise", "must be finite and non-negative");
                }
                let sites = g.grid * g.grid;
                if s.data != (FamilyDescriptor::DiagonalGaussian { n: sites }) {
                    return validation("data", format!("grid data needs gaussian:{sites}"));
                }
                if let Some(seg) = s.segmentation {
                    if seg != (FamilyDescriptor::Categorical { k: g.labels.max(2), sites }) {
                        return validation("segmentation", format!("grid labels need categorical:{}x{sites}", g.labels.max(2)));
                    }
                }
            }
            DatasetSource::SyntheticTabular(t) => {
                if t.n == 0 {
                    return validation("n", "must be positive");
                }
                if !s.data.is_discrete() {
                    return validation("data", "tabular draws need a discrete data family");
                }
            }
            DatasetSource::IdxImages(i) => {
                if !(i.threshold > 0.0 && i.threshold < 1.0) {
                    return validation("threshold", format!("must lie in (0, 1), got {}", i.threshold));
                }
                if matches!(s.data, FamilyDescriptor::Categorical { .. }) {
                    return validation("data", "images need a bernoulli or gaussian data family");
                }
            }
        }
        let c = &self.chain;
        if c.n_samples == 0 || c.thinning == 0 {
            return validation("chain", "n_samples and thinning must be positive");
        }
        if !(0.0..=1.0).contains(&c.mask_fraction) {
            return validation("mask_fraction", "must lie in [0, 1]");
        }
        self.scenario()?;
        Ok(())
    }

    /// The engine scenario described by the `[scenario]` table.
    pub fn scenario(&self) -> Result<Scenario> {
        let s = &self.scenario;
        let mut o = ScenarioOptions::new(s.data, s.latent[0]);
        o.latent = s.latent.clone();
        o.prior = match s.prior {
            PriorName::Learned => PriorKind::Learned,
            PriorName::Fixed => PriorKind::Fixed,
            PriorName::Implicit => PriorKind::Implicit,
        };
        o.classes = s.classes;
        o.labelled = s.labelled;
        o.labelled_encoder_weight = s.labelled_encoder_weight;
        o.segmentation = s.segmentation;
        o.gibbs_sweeps = s.gibbs_sweeps;
        let variant = match s.variant {
            VariantName::MarginalsOnly => Variant::MarginalsOnly,
            VariantName::SemiSupervised => Variant::SemiSupervisedMixed,
            VariantName::Unsupervised => Variant::Unsupervised,
            VariantName::Hierarchical => Variant::Hierarchical,
            VariantName::TripleGame => Variant::TripleGame,
        };
        Scenario::new(variant, o).map_err(|e| HarnessError::Validation { field: "scenario".into(), message: e.to_string() })
    }

    pub fn architecture(&self) -> Architecture {
        Architecture { hidden: self.model.hidden.clone() }
    }

    pub fn update_mode(&self) -> UpdateMode {
        match self.training.mode {
            ModeName::Parallel => UpdateMode::Parallel,
            ModeName::Sequential => UpdateMode::Sequential,
        }
    }

    pub fn algorithm(&self) -> Algorithm {
        match self.training.algorithm {
            AlgorithmName::Nash => Algorithm::Nash,
            AlgorithmName::WakeSleep => Algorithm::WakeSleep,
            AlgorithmName::Elbo => Algorithm::Elbo,
        }
    }

    pub fn gradient_source(&self) -> GradientSource {
        match self.training.gradient {
            GradientName::MonteCarlo => GradientSource::MonteCarlo,
            GradientName::Exact => GradientSource::Exact,
        }
    }
}

pub fn load_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    RunConfig::parse(&text, path)
}
