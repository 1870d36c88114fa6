//! Experiment configuration files (TOML).
//!
//! Every section is optional and falls back to its documented default; unknown
//! keys anywhere are rejected.

use std::path::{Path, PathBuf};

use resdgp::gvf::GvfKind;
use resdgp::model::{FamilyKind, HeadKind, ModelConfig};
use resdgp::training::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::acquisition::DescentConfig;
use crate::benchmarks::Target;
use crate::error::{io_err, HarnessError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    Synthetic,
    Vectorfield,
    Bayesopt,
    Embed,
    Gradcheck,
}

impl ExperimentKind {
    pub fn name(self) -> &'static str {
        match self {
            ExperimentKind::Synthetic => "synthetic",
            ExperimentKind::Vectorfield => "vectorfield",
            ExperimentKind::Bayesopt => "bayesopt",
            ExperimentKind::Embed => "embed",
            ExperimentKind::Gradcheck => "gradcheck",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub kind: ExperimentKind,
    #[serde(default)]
    pub seed: u64,
    /// Output directory; the command line `--out` takes precedence.
    #[serde(default)]
    pub out: Option<PathBuf>,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub training: TrainConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub synthetic: SyntheticConfig,
    #[serde(default)]
    pub bayesopt: BayesOptConfig,
    #[serde(default)]
    pub embed: EmbedConfig,
    #[serde(default)]
    pub gradcheck: GradcheckConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Hidden-layer samples per test point.
    pub samples: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { samples: 10 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Training records; `lat,lon,u,v` for vector fields, `x1,…,xd,y` for embedding regression.
    pub csv: Option<PathBuf>,
    /// Separate test records; without it a seeded random holdout is used.
    pub test_csv: Option<PathBuf>,
    pub test_fraction: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            csv: None,
            test_csv: None,
            test_fraction: 0.2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticConfig {
    pub n_train: Vec<usize>,
    pub depths: Vec<usize>,
    pub families: Vec<FamilyKind>,
    pub kinds: Vec<GvfKind>,
    /// Runs per grid cell, seeded `seed, seed + 1, …`.
    pub seeds: usize,
    pub noise_variance: f64,
    pub test_points: usize,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            n_train: vec![100, 200, 400, 800, 1600],
            depths: vec![1, 2, 3],
            families: vec![FamilyKind::Iv],
            kinds: vec![GvfKind::Hodge],
            seeds: 5,
            noise_variance: 1e-4,
            test_points: 5000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BayesOptConfig {
    pub target: Target,
    pub initial_points: usize,
    pub iterations: usize,
    /// Iteration from which the deep surrogate replaces the shallow one.
    pub switch_at: Option<usize>,
    /// Independent runs seeded `seed, seed + 1, …`.
    pub runs: usize,
    pub shallow: ModelConfig,
    pub deep: ModelConfig,
    pub refit: TrainConfig,
    /// Pathwise function draws per deep acquisition evaluation.
    pub ei_samples: usize,
    pub descent: DescentConfig,
    /// Lattice size for the reference optimum.
    pub reference_points: usize,
}

pub fn default_shallow_surrogate() -> ModelConfig {
    ModelConfig {
        depth: 1,
        nu: 2.5,
        train_nu: false,
        ..ModelConfig::default()
    }
}

pub fn default_deep_surrogate() -> ModelConfig {
    ModelConfig {
        depth: 2,
        hidden_kind: GvfKind::Projected,
        family: FamilyKind::Il,
        num_inducing: 50,
        nu: 2.5,
        train_nu: false,
        ..ModelConfig::default()
    }
}

impl Default for BayesOptConfig {
    fn default() -> Self {
        Self {
            target: Target::BoTarget,
            initial_points: 5,
            iterations: 200,
            switch_at: Some(180),
            runs: 1,
            shallow: default_shallow_surrogate(),
            deep: default_deep_surrogate(),
            refit: TrainConfig {
                iters: 500,
                samples: 1,
                optimal_head: true,
                ..TrainConfig::default()
            },
            ei_samples: 32,
            descent: DescentConfig::default(),
            reference_points: 1_000_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EmbedConfig {
    /// Constant appended before normalisation.
    pub bias: f64,
    /// Synthetic data when no CSV is given.
    pub synthetic_points: usize,
    pub synthetic_features: usize,
    pub synthetic_noise: f64,
}

impl Default for EmbedConfig {
    fn default() -> Self {
        Self {
            bias: 1.0,
            synthetic_points: 400,
            synthetic_features: 3,
            synthetic_noise: 0.01,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GradcheckConfig {
    pub points: usize,
    /// Central-difference step; smaller steps are dominated by round-off in the ELBO.
    pub step: f64,
    pub samples: usize,
    pub tolerance: f64,
    /// Standard deviation of the random offset applied to the initial parameters.
    pub perturbation: f64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            points: 16,
            step: 1e-4,
            samples: 2,
            tolerance: 1e-4,
            perturbation: 0.3,
        }
    }
}

impl ExperimentConfig {
    /// Defaults for `kind`, including the kind-specific model head.
    pub fn default_for(kind: ExperimentKind) -> Self {
        let mut model = ModelConfig::default();
        match kind {
            ExperimentKind::Vectorfield => {
                model.depth = 1;
                model.head = HeadKind::Vector;
            }
            ExperimentKind::Embed => {
                model.hidden_kind = GvfKind::Projected;
                model.dim = EmbedConfig::default().synthetic_features;
            }
            ExperimentKind::Gradcheck => {
                model.family = FamilyKind::Il;
                model.num_inducing = 8;
            }
            _ => {}
        }
        Self {
            kind,
            seed: 0,
            out: None,
            model,
            training: TrainConfig::default(),
            eval: EvalConfig::default(),
            data: DataConfig::default(),
            synthetic: SyntheticConfig::default(),
            bayesopt: BayesOptConfig::default(),
            embed: EmbedConfig::default(),
            gradcheck: GradcheckConfig::default(),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| HarnessError::Serialize(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(HarnessError::Config(m));
        if self.seed > i64::MAX as u64 {
            return bad(format!("seed {} does not fit a signed 64-bit integer", self.seed));
        }
        if self.eval.samples == 0 {
            return bad("eval.samples must be positive".into());
        }
        if self.training.samples == 0 {
            return bad("training.samples must be positive".into());
        }
        if !(self.training.lr > 0.0) {
            return bad("training.lr must be positive".into());
        }
        self.model.validate()?;
        let head = self.model.head;
        match self.kind {
            ExperimentKind::Synthetic => {
                let s = &self.synthetic;
                if head != HeadKind::Scalar || self.model.dim != 2 {
                    return bad("synthetic regression needs a scalar head on S_2".into());
                }
                if s.n_train.is_empty() || s.n_train.contains(&0) || s.depths.is_empty() || s.depths.contains(&0) {
                    return bad("synthetic.n_train and synthetic.depths must be nonempty and positive".into());
                }
                if s.families.is_empty() || s.kinds.is_empty() || s.seeds == 0 || s.test_points == 0 {
                    return bad("synthetic.families, kinds, seeds and test_points must be nonempty".into());
                }
                if !(s.noise_variance >= 0.0) {
                    return bad("synthetic.noise_variance must be nonnegative".into());
                }
                for &depth in &s.depths {
                    for &family in &s.families {
                        for &kind in &s.kinds {
                            ModelConfig {
                                depth,
                                family,
                                hidden_kind: kind,
                                ..self.model.clone()
                            }
                            .validate()?;
                        }
                    }
                }
            }
            ExperimentKind::Vectorfield => {
                if head != HeadKind::Vector || self.model.dim != 2 {
                    return bad("vector-field regression needs a vector head on S_2".into());
                }
                if self.data.csv.is_none() {
                    return bad("vector-field regression needs data.csv".into());
                }
                self.check_holdout()?;
            }
            ExperimentKind::Bayesopt => {
                let b = &self.bayesopt;
                b.target.validate()?;
                use crate::benchmarks::Objective;
                for (name, m) in [("shallow", &b.shallow), ("deep", &b.deep)] {
                    m.validate()?;
                    if m.head != HeadKind::Scalar || m.dim != b.target.dim() {
                        return bad(format!("bayesopt.{name} needs a scalar head on S_{}", b.target.dim()));
                    }
                }
                if b.initial_points == 0 || b.runs == 0 || b.ei_samples == 0 || b.reference_points == 0 {
                    return bad("bayesopt counts must be positive".into());
                }
                if b.descent.starts == 0 || b.descent.candidates == 0 || !(b.descent.step > 0.0) {
                    return bad("bayesopt.descent needs positive starts, candidates and step".into());
                }
            }
            ExperimentKind::Embed => {
                if head != HeadKind::Scalar {
                    return bad("embedding regression needs a scalar head".into());
                }
                if self.model.depth > 1 && self.model.hidden_kind != GvfKind::Projected && self.model.dim != 2 {
                    return bad("embedding regression beyond S_2 needs projected hidden layers".into());
                }
                if !self.embed.bias.is_finite() {
                    return bad("embed.bias must be finite".into());
                }
                if self.data.csv.is_none() && (self.embed.synthetic_points < 2 || self.embed.synthetic_features == 0) {
                    return bad("synthetic embedding data needs at least 2 points and 1 feature".into());
                }
                if self.data.csv.is_none() && self.embed.synthetic_features != self.model.dim {
                    return bad(format!(
                        "model.dim {} must equal embed.synthetic_features {}",
                        self.model.dim, self.embed.synthetic_features
                    ));
                }
                self.check_holdout()?;
            }
            ExperimentKind::Gradcheck => {
                let g = &self.gradcheck;
                if g.points == 0 || g.samples == 0 || !(g.step > 0.0) || !(g.tolerance > 0.0) {
                    return bad("gradcheck needs positive points, samples, step and tolerance".into());
                }
                if self.model.dim != 2 {
                    return bad("gradcheck uses data on S_2".into());
                }
            }
        }
        Ok(())
    }

    fn check_holdout(&self) -> Result<()> {
        if self.data.test_csv.is_none() && !(self.data.test_fraction > 0.0 && self.data.test_fraction < 1.0) {
            return Err(HarnessError::Config("data.test_fraction must lie in (0, 1)".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        for kind in [ExperimentKind::Synthetic, ExperimentKind::Bayesopt, ExperimentKind::Embed, ExperimentKind::Gradcheck] {
            ExperimentConfig::default_for(kind).validate().unwrap();
        }
        // vector-field runs need a data source
        assert!(ExperimentConfig::default_for(ExperimentKind::Vectorfield).validate().is_err());
    }

    #[test]
    fn unknown_keys_are_errors() {
        assert!(ExperimentConfig::from_toml("kind = \"synthetic\"\nbogus = 1\n").is_err());
        assert!(ExperimentConfig::from_toml("kind = \"synthetic\"\n[model]\ndepht = 2\n").is_err());
        assert!(ExperimentConfig::from_toml("kind = \"synthetic\"\n[synthetic]\nn_train = [10]\nextra = true\n").is_err());
    }

    #[test]
    fn partial_file_fills_defaults() {
        let cfg = ExperimentConfig::from_toml(
            "kind = \"synthetic\"\nseed = 4\n[model]\ndepth = 3\n[training]\niters = 7\n[synthetic]\nn_train = [50]\n",
        )
        .unwrap();
        assert_eq!(cfg.seed, 4);
        assert_eq!(cfg.model.depth, 3);
        assert_eq!(cfg.model.nu, 1.5);
        assert_eq!(cfg.training.iters, 7);
        assert_eq!(cfg.synthetic.n_train, vec![50]);
        assert_eq!(cfg.synthetic.noise_variance, 1e-4);
    }

    #[test]
    fn toml_echo_round_trips() {
        let mut cfg = ExperimentConfig::default_for(ExperimentKind::Bayesopt);
        cfg.seed = 123;
        cfg.model.noise_variance = 0.1 + 0.2;
        cfg.bayesopt.target = Target::Linear { x0: vec![0.1, -0.3, 0.7] };
        cfg.out = Some("runs/a".into());
        let text = cfg.to_toml().unwrap();
        assert_eq!(ExperimentConfig::from_toml(&text).unwrap(), cfg);
    }

    #[test]
    fn kind_specific_checks() {
        let mut cfg = ExperimentConfig::default_for(ExperimentKind::Synthetic);
        cfg.model.head = HeadKind::Vector;
        assert!(cfg.validate().is_err());
        let mut cfg = ExperimentConfig::default_for(ExperimentKind::Synthetic);
        cfg.synthetic.depths = vec![];
        assert!(cfg.validate().is_err());
        let mut cfg = ExperimentConfig::default_for(ExperimentKind::Vectorfield);
        cfg.data.csv = Some("x.csv".into());
        cfg.validate().unwrap();
        cfg.data.test_fraction = 1.0;
        assert!(cfg.validate().is_err());
    }
}
