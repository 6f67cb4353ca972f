//! Run configuration: a flat TOML table shared by every command.
//!
//! Keys a command does not use are accepted and ignored, so one file can
//! drive a whole simulate → fit → benchmark pipeline. Unknown keys are
//! rejected.

use std::path::{Path, PathBuf};

use odekernel::{
    default_lambda_grid, model_by_name, ModelSpec, OptimizerConfig, RkhsConfig, Smoothing, Stencil,
    TimeGrid, VariancePolicy,
};
use serde::Deserialize;

use crate::error::{CliError, Result};

#[derive(Debug, Clone, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: String,
    /// Gene count for `tf-network`; otherwise taken from the data.
    pub genes: Option<usize>,

    /// Input dataset for `fit` and `select-lambda`, relative to the config file.
    pub data: Option<PathBuf>,
    /// Output directory, relative to the config file.
    #[serde(default = "default_out")]
    pub out: PathBuf,
    /// File stem of the simulated dataset.
    #[serde(default = "default_name")]
    pub name: String,

    #[serde(default)]
    pub params: Vec<f64>,
    #[serde(default)]
    pub x0: Vec<f64>,
    pub t_start: Option<f64>,
    pub t_end: Option<f64>,
    pub n: Option<usize>,
    /// Explicit observation times; replaces `t_start`, `t_end` and `n`.
    pub times: Option<Vec<f64>>,
    #[serde(default)]
    pub sigma: f64,
    #[serde(default = "default_substeps")]
    pub substeps: usize,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default = "default_replicates")]
    pub replicates: usize,

    /// Fixed λ. When absent, λ is chosen by AIC over `lambda_grid`.
    pub lambda: Option<f64>,
    pub lambda_grid: Option<Vec<f64>>,
    #[serde(default = "default_variance")]
    pub variance: String,
    #[serde(default)]
    pub sigma2: Vec<f64>,
    /// Fixed surrogate smoothing weight; GCV when absent.
    pub smoothing: Option<f64>,
    #[serde(default = "default_stencil")]
    pub stencil: String,
    #[serde(default = "default_true")]
    pub separate_blocks: bool,
    #[serde(default = "default_true")]
    pub covariance: bool,
    #[serde(default = "default_level")]
    pub level: f64,

    pub max_iters: Option<usize>,
    pub starts: Option<usize>,
    pub gradient_tolerance: Option<f64>,
    pub start_lower: Option<Vec<f64>>,
    pub start_upper: Option<Vec<f64>>,

    /// Benchmark estimators, from `rkhs` and `mle`.
    #[serde(default = "default_methods")]
    pub methods: Vec<String>,
    /// Write wall-clock timings. Off by default so outputs are reproducible.
    #[serde(default)]
    pub timing: bool,

    #[serde(skip)]
    pub base_dir: PathBuf,
}

fn default_out() -> PathBuf {
    PathBuf::from("out")
}

fn default_name() -> String {
    "data".into()
}

fn default_substeps() -> usize {
    20
}

fn default_seed() -> u64 {
    1
}

fn default_replicates() -> usize {
    1
}

fn default_variance() -> String {
    "auto".into()
}

fn default_stencil() -> String {
    "central".into()
}

fn default_true() -> bool {
    true
}

fn default_level() -> f64 {
    0.95
}

fn default_methods() -> Vec<String> {
    vec!["rkhs".into(), "mle".into()]
}

/// Command-line overrides applied on top of the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub lambda: Option<f64>,
    pub out: Option<PathBuf>,
}

impl RunConfig {
    pub fn parse(text: &str, base_dir: &Path) -> Result<Self> {
        let mut config: RunConfig =
            toml::from_str(text).map_err(|e| CliError::schema(format!("config: {e}")))?;
        config.base_dir = base_dir.to_path_buf();
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse(&text, base)
    }

    /// Applies overrides. A command-line `--out` is taken as given, not
    /// relative to the config file.
    pub fn apply(&mut self, o: &Overrides) {
        if let Some(seed) = o.seed {
            self.seed = seed;
        }
        if let Some(lambda) = o.lambda {
            self.lambda = Some(lambda);
        }
        if let Some(out) = &o.out {
            self.out = std::path::absolute(out).unwrap_or_else(|_| out.clone());
        }
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn out_dir(&self) -> PathBuf {
        self.resolve(&self.out)
    }

    pub fn data_path(&self) -> Result<PathBuf> {
        let data = self
            .data
            .as_ref()
            .ok_or_else(|| CliError::schema("config: `data` is required for this command"))?;
        Ok(self.resolve(data))
    }

    /// Model for `n_states` observed states spanning `span`.
    pub fn model(&self, n_states: usize, span: (f64, f64)) -> Result<Box<dyn ModelSpec>> {
        let genes = self.genes.unwrap_or(n_states);
        let model = model_by_name(&self.model, genes, span)?;
        if model.n_equations() != n_states {
            return Err(CliError::schema(format!(
                "model `{}` has {} equations but {} states were given",
                self.model,
                model.n_equations(),
                n_states
            )));
        }
        Ok(model)
    }

    /// Number of states implied by the model name alone.
    pub fn model_states(&self) -> Result<usize> {
        match self.model.as_str() {
            "exponential" => Ok(1),
            "lotka-volterra" => Ok(2),
            "tf-network" => self
                .genes
                .ok_or_else(|| CliError::schema("config: `genes` is required for tf-network")),
            other => Err(CliError::schema(format!(
                "unknown model `{other}` (expected exponential, lotka-volterra or tf-network)"
            ))),
        }
    }

    pub fn grid(&self) -> Result<TimeGrid> {
        if let Some(times) = &self.times {
            return Ok(TimeGrid::new(times.clone())?);
        }
        match (self.t_start, self.t_end, self.n) {
            (Some(a), Some(b), Some(n)) => Ok(TimeGrid::uniform(a, b, n)?),
            _ => Err(CliError::schema(
                "config: give either `times` or all of `t_start`, `t_end` and `n`",
            )),
        }
    }

    pub fn optimizer(&self) -> Result<OptimizerConfig> {
        let mut opt = OptimizerConfig {
            seed: self.seed,
            ..Default::default()
        };
        if let Some(v) = self.max_iters {
            opt.max_iters = v;
        }
        if let Some(v) = self.starts {
            opt.starts = v;
        }
        if let Some(v) = self.gradient_tolerance {
            opt.gradient_tolerance = v;
        }
        match (&self.start_lower, &self.start_upper) {
            (Some(lo), Some(hi)) => {
                if lo.len() != hi.len() {
                    return Err(CliError::schema(
                        "config: `start_lower` and `start_upper` differ in length",
                    ));
                }
                opt.start_box = Some(lo.iter().copied().zip(hi.iter().copied()).collect());
            }
            (None, None) => {}
            _ => {
                return Err(CliError::schema(
                    "config: give both `start_lower` and `start_upper`",
                ))
            }
        }
        opt.validate()?;
        Ok(opt)
    }

    pub fn variance_policy(&self) -> Result<VariancePolicy> {
        let policy = match self.variance.as_str() {
            "auto" => VariancePolicy::Auto,
            "per-state" => VariancePolicy::PerState,
            "shared" => VariancePolicy::Shared,
            "known" => {
                if self.sigma2.is_empty() || self.sigma2.iter().any(|s| !(*s > 0.0)) {
                    return Err(CliError::schema("config: `variance = \"known\"` needs positive `sigma2` values"));
                }
                VariancePolicy::Known(self.sigma2.clone())
            }
            other => {
                return Err(CliError::schema(format!(
                    "config: unknown variance policy `{other}` (expected auto, per-state, shared or known)"
                )))
            }
        };
        Ok(policy)
    }

    pub fn rkhs(&self) -> Result<RkhsConfig> {
        let stencil: Stencil = self.stencil.parse()?;
        let smoothing = match self.smoothing {
            Some(mu) if mu >= 0.0 => Smoothing::Fixed(mu),
            Some(mu) => {
                return Err(CliError::schema(format!(
                    "config: smoothing must be >= 0, got {mu}"
                )))
            }
            None => Smoothing::default(),
        };
        if !(self.level > 0.0 && self.level < 1.0) {
            return Err(CliError::schema(format!(
                "config: level must lie in (0, 1), got {}",
                self.level
            )));
        }
        Ok(RkhsConfig {
            lambda: self.lambda.unwrap_or(100.0),
            variance: self.variance_policy()?,
            smoothing,
            stencil,
            optimizer: self.optimizer()?,
            separate_blocks: self.separate_blocks,
            covariance: self.covariance,
            level: self.level,
        })
    }

    /// The λ values to fit: the fixed λ alone, or the AIC grid.
    pub fn lambda_choice(&self) -> Result<LambdaChoice> {
        if let Some(l) = self.lambda {
            if !(l > 0.0 && l.is_finite()) {
                return Err(CliError::schema(format!(
                    "lambda must be positive, got {l}"
                )));
            }
            return Ok(LambdaChoice::Fixed(l));
        }
        Ok(LambdaChoice::Aic(self.lambda_grid()?))
    }

    pub fn lambda_grid(&self) -> Result<Vec<f64>> {
        let grid = self.lambda_grid.clone().unwrap_or_else(default_lambda_grid);
        if grid.is_empty() {
            return Err(CliError::schema("config: `lambda_grid` is empty"));
        }
        if let Some(l) = grid.iter().find(|l| !(**l > 0.0 && l.is_finite())) {
            return Err(CliError::schema(format!(
                "config: lambda values must be positive, got {l}"
            )));
        }
        Ok(grid)
    }

    pub fn methods(&self) -> Result<(bool, bool)> {
        let mut rkhs = false;
        let mut mle = false;
        for m in &self.methods {
            match m.as_str() {
                "rkhs" => rkhs = true,
                "mle" => mle = true,
                other => {
                    return Err(CliError::schema(format!(
                        "config: unknown method `{other}` (expected rkhs or mle)"
                    )))
                }
            }
        }
        if !(rkhs || mle) {
            return Err(CliError::schema("config: `methods` is empty"));
        }
        Ok((rkhs, mle))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum LambdaChoice {
    Fixed(f64),
    Aic(Vec<f64>),
}
