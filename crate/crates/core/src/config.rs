//! Flat JSON run configuration.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{DatasetKind, Oracle, DEFAULT_CENTERS, SIGMA_HAT};
use crate::error::{Error, Result};
use crate::layers::{AffineCoupling, LogitPreprocess};
use crate::model::FlowModel;
use crate::objectives::{Objective, Projection};
use crate::trainer::{OptimizerKind, TrainConfig};

/// One run, as read from a single JSON document. Every key is optional;
/// unknown keys are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// `sine`, `swirl`, `checkerboard` or `gauss-D`.
    pub dataset: String,
    /// Number of mixture centers in the data oracle.
    #[serde(rename = "M")]
    pub centers: usize,
    pub sigma_hat: f64,
    /// Seed for the oracle's centers; shared across runs that compare objectives.
    pub data_seed: u64,
    /// Seed for initialization, batches and projections.
    pub seed: u64,

    /// `ml`, `sml`, `sm_exact`, `ssm`, `dsm` or `fdssm`.
    pub objective: String,
    pub sigma: Option<f64>,
    pub xi: Option<f64>,
    pub n_v: usize,
    pub projection: String,

    pub optimizer: OptimizerKind,
    pub lr: f64,
    /// Global-norm threshold; `null` disables clipping.
    pub clip: Option<f64>,
    pub batch_size: usize,
    pub iterations: usize,
    pub ema: f64,

    pub blocks: usize,
    pub hidden: usize,
    /// `none` or `logit`.
    pub preprocess: String,
    pub logit_lambda: f64,
    pub logit_lo: f64,
    pub logit_hi: f64,
    /// Train the head on preprocessed data.
    pub map: bool,

    pub eval_every: usize,
    pub eval_samples: usize,
    pub checkpoint_every: usize,
    pub wall_clock: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            dataset: "sine".into(),
            centers: DEFAULT_CENTERS,
            sigma_hat: SIGMA_HAT,
            data_seed: 0,
            seed: t.seed,
            objective: "ssm".into(),
            sigma: None,
            xi: None,
            n_v: 1,
            projection: "rademacher".into(),
            optimizer: t.optimizer,
            lr: t.lr,
            clip: t.clip,
            batch_size: t.batch_size,
            iterations: t.iterations,
            ema: t.ema,
            blocks: 10,
            hidden: AffineCoupling::DEFAULT_HIDDEN,
            preprocess: "none".into(),
            logit_lambda: LogitPreprocess::DEFAULT_LAMBDA,
            logit_lo: -4.5,
            logit_hi: 4.5,
            map: false,
            eval_every: t.eval_every,
            eval_samples: t.eval_samples,
            checkpoint_every: t.checkpoint_every,
            wall_clock: t.wall_clock,
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.dataset_kind()?;
        self.train_config()?.validate()?;
        if self.centers == 0 {
            return Err(Error::Config("M must be at least 1".into()));
        }
        if !(self.sigma_hat > 0.0) {
            return Err(Error::Config("sigma_hat must be positive".into()));
        }
        if self.blocks == 0 || self.hidden == 0 {
            return Err(Error::Config("blocks and hidden must be at least 1".into()));
        }
        match self.preprocess.as_str() {
            "none" if self.map => Err(Error::MapWithoutPreprocess),
            "none" => Ok(()),
            "logit" if !(self.logit_lo < self.logit_hi) => Err(Error::Config(format!(
                "logit_lo {} must be below logit_hi {}",
                self.logit_lo, self.logit_hi
            ))),
            "logit" => Ok(()),
            other => Err(Error::Config(format!(
                "unknown preprocess {other:?}; expected none or logit"
            ))),
        }
    }

    pub fn dataset_kind(&self) -> Result<DatasetKind> {
        self.dataset.parse()
    }

    pub fn objective(&self) -> Result<Objective> {
        let need = |v: Option<f64>, key: &str| {
            v.ok_or_else(|| {
                Error::Config(format!("objective {:?} requires \"{key}\"", self.objective))
            })
        };
        let obj = match self.objective.as_str() {
            "ml" => Objective::Ml,
            "sml" => Objective::Sml,
            "sm_exact" => Objective::SmExact,
            "ssm" => Objective::Ssm {
                n_v: self.n_v,
                projection: self.projection.parse::<Projection>()?,
            },
            "dsm" => Objective::Dsm {
                sigma: need(self.sigma, "sigma")?,
            },
            "fdssm" => Objective::Fdssm {
                xi: need(self.xi, "xi")?,
            },
            other => {
                return Err(Error::Config(format!(
                    "unknown objective {other:?}; expected ml, sml, sm_exact, ssm, dsm or fdssm"
                )))
            }
        };
        obj.validate()?;
        Ok(obj)
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        Ok(TrainConfig {
            objective: self.objective()?,
            optimizer: self.optimizer,
            lr: self.lr,
            clip: self.clip,
            batch_size: self.batch_size,
            iterations: self.iterations,
            ema: self.ema,
            map: self.map,
            seed: self.seed,
            eval_every: self.eval_every,
            eval_samples: self.eval_samples,
            checkpoint_every: self.checkpoint_every,
            wall_clock: self.wall_clock,
        })
    }

    pub fn oracle(&self) -> Result<Oracle> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.data_seed);
        self.dataset_kind()?
            .oracle(self.centers, self.sigma_hat, &mut rng)
    }

    /// Glow-style model with the configured preprocess layer in front.
    pub fn build_model(&self) -> Result<FlowModel> {
        let d = self.dataset_kind()?.dim();
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let model = FlowModel::glow(d, self.blocks, self.hidden, &mut rng)?;
        match self.preprocess.as_str() {
            "logit" => model.with_logit_preprocess(self.logit_lambda, self.logit_lo, self.logit_hi),
            _ => Ok(model),
        }
    }

    /// Optimizer settings for Sine runs:
    /// ML with Adam 5e-4 and clip 1; SML with AdamW 5e-4 and no clipping;
    /// score-matching objectives with Adam 1e-4 and clip 1.
    pub fn sine_preset(objective: &str) -> Result<Self> {
        let mut cfg = Self {
            objective: objective.into(),
            ..Self::default()
        };
        match objective {
            "ml" => {
                cfg.lr = 5e-4;
                cfg.clip = Some(1.0);
            }
            "sml" => {
                cfg.optimizer = OptimizerKind::Adamw;
                cfg.lr = 5e-4;
                cfg.clip = None;
            }
            "ssm" | "dsm" | "fdssm" | "sm_exact" => {
                cfg.lr = 1e-4;
                cfg.clip = Some(1.0);
            }
            other => return Err(Error::Config(format!("no preset for objective {other:?}"))),
        }
        if objective == "dsm" {
            cfg.sigma = Some(0.05);
        }
        if objective == "fdssm" {
            cfg.xi = Some(0.1);
        }
        cfg.validate()?;
        Ok(cfg)
    }
}
