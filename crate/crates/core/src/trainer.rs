//! Optimization loop: batch → loss → backward → clip → optimizer step → EMA.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::data::{DensityOracle, Oracle};
use crate::error::{Error, Result};
use crate::eval;
use crate::model::FlowModel;
use crate::objectives::{self, LossReport, Objective};
use crate::tensor::Tensor;

pub const METRICS_HEADER: &str = "step,loss,grad_norm,kl,fisher,wall_ms";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    #[default]
    Adam,
    Adamw,
    Rmsprop,
}

impl std::str::FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "adam" => Ok(OptimizerKind::Adam),
            "adamw" => Ok(OptimizerKind::Adamw),
            "rmsprop" => Ok(OptimizerKind::Rmsprop),
            other => Err(Error::Config(format!(
                "unknown optimizer {other:?}; expected adam, adamw or rmsprop"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub objective: Objective,
    pub optimizer: OptimizerKind,
    pub lr: f64,
    pub clip: Option<f64>,
    pub batch_size: usize,
    pub iterations: usize,
    pub ema: f64,
    /// Train the head against preprocessed data (requires preprocess layers).
    pub map: bool,
    pub seed: u64,
    /// Steps between KL/Fisher evaluations of the EMA model; 0 disables.
    pub eval_every: usize,
    pub eval_samples: usize,
    /// Steps between checkpoints; 0 disables intermediate checkpoints.
    pub checkpoint_every: usize,
    /// Record elapsed time in the metric log. Off leaves `wall_ms` empty so
    /// the log is byte-reproducible.
    pub wall_clock: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            objective: Objective::Ssm {
                n_v: 1,
                projection: Default::default(),
            },
            optimizer: OptimizerKind::Adam,
            lr: 1e-4,
            clip: Some(10.0),
            batch_size: 1000,
            iterations: 10_000,
            ema: 0.999,
            map: false,
            seed: 0,
            eval_every: 500,
            eval_samples: 10_000,
            checkpoint_every: 0,
            wall_clock: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.objective.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if !(0.0..=1.0).contains(&self.ema) {
            return Err(Error::Config(format!("ema must lie in [0, 1], got {}", self.ema)));
        }
        if let Some(c) = self.clip {
            if !(c > 0.0) {
                return Err(Error::Config(format!("clip must be positive, got {c}")));
            }
        }
        Ok(())
    }
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;
const WEIGHT_DECAY: f64 = 0.01;
const RMS_ALPHA: f64 = 0.99;

#[derive(Clone, Debug)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: u64,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64, params: &[Tensor]) -> Self {
        let zeros: Vec<Tensor> = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        Self {
            kind,
            lr,
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Updates `params[i]` in place for every `i` in `active`.
    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor], active: std::ops::Range<usize>) {
        self.t += 1;
        let t = self.t as i32;
        let (bc1, bc2) = (1.0 - BETA1.powi(t), 1.0 - BETA2.powi(t));
        for i in active {
            let (p, g) = (params[i].data_mut(), grads[i].data());
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            match self.kind {
                OptimizerKind::Adam | OptimizerKind::Adamw => {
                    let decay = if self.kind == OptimizerKind::Adamw {
                        1.0 - self.lr * WEIGHT_DECAY
                    } else {
                        1.0
                    };
                    for j in 0..p.len() {
                        m[j] = BETA1 * m[j] + (1.0 - BETA1) * g[j];
                        v[j] = BETA2 * v[j] + (1.0 - BETA2) * g[j] * g[j];
                        let mhat = m[j] / bc1;
                        let vhat = v[j] / bc2;
                        p[j] = p[j] * decay - self.lr * mhat / (vhat.sqrt() + ADAM_EPS);
                    }
                }
                OptimizerKind::Rmsprop => {
                    for j in 0..p.len() {
                        v[j] = RMS_ALPHA * v[j] + (1.0 - RMS_ALPHA) * g[j] * g[j];
                        p[j] -= self.lr * g[j] / (v[j].sqrt() + ADAM_EPS);
                    }
                }
            }
        }
    }
}

/// `θ̃ ← m θ̃ + (1 − m) θ`, elementwise.
pub fn ema_update(shadow: &mut [Tensor], theta: &[Tensor], m: f64) -> Result<()> {
    if shadow.len() != theta.len() {
        return Err(Error::ShapeMismatch {
            op: "ema_update",
            lhs: vec![shadow.len()],
            rhs: vec![theta.len()],
        });
    }
    for (s, t) in shadow.iter_mut().zip(theta) {
        if s.shape() != t.shape() {
            return Err(Error::ShapeMismatch {
                op: "ema_update",
                lhs: s.shape().to_vec(),
                rhs: t.shape().to_vec(),
            });
        }
        for (a, &b) in s.data_mut().iter_mut().zip(t.data()) {
            *a = m * *a + (1.0 - m) * b;
        }
    }
    Ok(())
}

pub fn global_norm(grads: &[Tensor]) -> f64 {
    grads.iter().map(Tensor::sq_norm).sum::<f64>().sqrt()
}

/// Global-norm clipping `g ← g · min(1, threshold/‖g‖)`. Returns the norm
/// before clipping.
pub fn clip_gradient(grads: &mut [Tensor], threshold: Option<f64>) -> f64 {
    let norm = global_norm(grads);
    if let Some(c) = threshold {
        if norm > c {
            let s = c / norm;
            grads
                .iter_mut()
                .for_each(|g| g.data_mut().iter_mut().for_each(|v| *v *= s));
        }
    }
    norm
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub step: usize,
    pub loss: f64,
    pub grad_norm: f64,
    pub kl: Option<f64>,
    pub fisher: Option<f64>,
    pub wall_ms: Option<f64>,
}

impl MetricRow {
    pub fn csv(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| format!("{x:e}")).unwrap_or_default();
        format!(
            "{},{:e},{:e},{},{},{}",
            self.step,
            self.loss,
            self.grad_norm,
            opt(self.kl),
            opt(self.fisher),
            self.wall_ms.map(|t| format!("{t:.3}")).unwrap_or_default()
        )
    }
}

pub struct Trainer {
    config: TrainConfig,
    model: FlowModel,
    shadow: Vec<Tensor>,
    optimizer: Optimizer,
    step: usize,
    rng: ChaCha8Rng,
    out_dir: Option<PathBuf>,
    metrics: Option<BufWriter<File>>,
    last_checkpoint: Option<PathBuf>,
    history: Vec<MetricRow>,
}

impl Trainer {
    pub fn new(model: FlowModel, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        if config.map && model.preprocess_count() == 0 {
            return Err(Error::MapWithoutPreprocess);
        }
        if config.ema >= 1.0 {
            eprintln!("warning: ema momentum 1 freezes the shadow parameters");
        }
        let params = model.clone_parameters();
        Ok(Self {
            optimizer: Optimizer::new(config.optimizer, config.lr, &params),
            shadow: params,
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            config,
            model,
            step: 0,
            out_dir: None,
            metrics: None,
            last_checkpoint: None,
            history: Vec::new(),
        })
    }

    /// Writes `metrics.csv` and checkpoints under `dir`.
    pub fn with_output(mut self, dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir)?;
        let mut w = BufWriter::new(File::create(dir.join("metrics.csv"))?);
        writeln!(w, "{METRICS_HEADER}")?;
        w.flush()?;
        self.metrics = Some(w);
        self.out_dir = Some(dir.to_path_buf());
        Ok(self)
    }

    pub fn model(&self) -> &FlowModel {
        &self.model
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn step_count(&self) -> usize {
        self.step
    }

    pub fn history(&self) -> &[MetricRow] {
        &self.history
    }

    /// The model with EMA shadow parameters.
    pub fn ema_model(&self) -> Result<FlowModel> {
        let mut m = self.model.clone();
        m.set_parameters(&self.shadow)?;
        Ok(m)
    }

    pub fn into_models(self) -> Result<(FlowModel, FlowModel)> {
        let ema = self.ema_model()?;
        Ok((self.model, ema))
    }

    /// Layers the loss is evaluated on.
    fn active_layers(&self) -> std::ops::Range<usize> {
        if self.config.map {
            self.model.head_range()
        } else {
            0..self.model.len()
        }
    }

    fn prepare_batch(&self, x: &Tensor) -> Result<Tensor> {
        if self.config.map {
            self.model
                .forward_range(x, 0..self.model.preprocess_count())
        } else {
            Ok(x.clone())
        }
    }

    /// One optimization step on batch `x`. Returns the loss report and the
    /// gradient norm before clipping.
    pub fn step_on(&mut self, x: &Tensor) -> Result<(LossReport, f64)> {
        let layers = self.active_layers();
        let input = self.prepare_batch(x)?;
        if self.step == 0 {
            self.model.initialize_actnorm_range(&input, layers.clone())?;
            self.shadow = self.model.clone_parameters();
        }
        let (report, mut grads) = objectives::loss_and_grad(
            &self.model,
            &self.config.objective,
            &input,
            layers.clone(),
            &mut self.rng,
        )?;
        let step = self.step + 1;
        if !report.loss.is_finite() {
            return Err(self.non_finite("loss", step));
        }
        if !grads.iter().all(Tensor::all_finite) {
            return Err(self.non_finite("gradient", step));
        }
        let norm = clip_gradient(&mut grads, self.config.clip);
        let mut params = self.model.clone_parameters();
        let active = self.model.parameter_range(layers);
        self.optimizer.step(&mut params, &grads, active);
        if !params.iter().all(Tensor::all_finite) {
            return Err(self.non_finite("parameters", step));
        }
        self.model.set_parameters(&params)?;
        ema_update(&mut self.shadow, &params, self.config.ema)?;
        self.step = step;
        Ok((report, norm))
    }

    fn non_finite(&self, what: &'static str, step: usize) -> Error {
        Error::NonFinite {
            what,
            step,
            last_checkpoint: self.last_checkpoint.clone(),
        }
    }

    fn checkpoint(&mut self, name: &str) -> Result<()> {
        if let Some(dir) = &self.out_dir {
            let path = dir.join(name);
            checkpoint::save(&path, &self.model, Some(self.config.seed))?;
            self.last_checkpoint = Some(path);
        }
        Ok(())
    }

    /// Evaluates KL and Fisher divergence of the EMA model.
    pub fn evaluate(&mut self, oracle: &Oracle) -> Result<(f64, f64)> {
        let ema = self.ema_model()?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed ^ 0x5eed_e7a1 ^ self.step as u64);
        let x = oracle.sample(self.config.eval_samples, &mut rng);
        let kl = eval::kl_monte_carlo_on(oracle, &ema, &x)?;
        let fisher = eval::fisher_on(oracle, &ema, &x)?;
        Ok((kl.value, fisher.value))
    }

    /// Runs the configured number of iterations with batches from `oracle`.
    pub fn run(&mut self, oracle: &Oracle) -> Result<()> {
        if oracle.dim() != self.model.dim() {
            return Err(Error::ShapeMismatch {
                op: "train_data",
                lhs: vec![oracle.dim()],
                rhs: vec![self.model.dim()],
            });
        }
        if self.step == 0 {
            self.checkpoint("initial.ckpt")?;
        }
        let start = Instant::now();
        while self.step < self.config.iterations {
            let x = oracle.sample(self.config.batch_size, &mut self.rng);
            let (report, norm) = self.step_on(&x)?;
            let (mut kl, mut fisher) = (None, None);
            let every = self.config.eval_every;
            if every > 0 && (self.step.is_multiple_of(every) || self.step == self.config.iterations) {
                let (k, f) = self.evaluate(oracle)?;
                kl = Some(k);
                fisher = Some(f);
            }
            let row = MetricRow {
                step: self.step,
                loss: report.loss,
                grad_norm: norm,
                kl,
                fisher,
                wall_ms: self
                    .config
                    .wall_clock
                    .then(|| start.elapsed().as_secs_f64() * 1e3),
            };
            if let Some(w) = &mut self.metrics {
                writeln!(w, "{}", row.csv())?;
                w.flush()?;
            }
            self.history.push(row);
            let ce = self.config.checkpoint_every;
            if ce > 0 && self.step.is_multiple_of(ce) {
                self.checkpoint(&format!("step_{:06}.ckpt", self.step))?;
            }
        }
        if let Some(dir) = self.out_dir.clone() {
            self.checkpoint("final.ckpt")?;
            checkpoint::save(
                &dir.join("final_ema.ckpt"),
                &self.ema_model()?,
                Some(self.config.seed),
            )?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ema_examples() {
        let theta = vec![Tensor::vector(vec![1.0, 2.0])];
        let mut s = vec![Tensor::vector(vec![5.0, 5.0])];
        ema_update(&mut s, &theta, 0.0).unwrap();
        assert_eq!(s, theta);
        let mut s = vec![Tensor::vector(vec![5.0, 5.0])];
        ema_update(&mut s, &theta, 1.0).unwrap();
        assert_eq!(s[0].data(), &[5.0, 5.0]);
        let mut s = vec![Tensor::vector(vec![0.0])];
        ema_update(&mut s, &[Tensor::vector(vec![1.0])], 0.999).unwrap();
        assert!((s[0].data()[0] - 0.001).abs() < 1e-15);
        assert!(ema_update(&mut s, &[Tensor::vector(vec![1.0, 2.0])], 0.5).is_err());
    }

    #[test]
    fn clip_examples() {
        let mut g = vec![Tensor::vector(vec![3.0, 4.0])];
        assert_eq!(clip_gradient(&mut g, Some(10.0)), 5.0);
        assert_eq!(g[0].data(), &[3.0, 4.0]);
        let mut g = vec![Tensor::vector(vec![12.0, 16.0])];
        assert_eq!(clip_gradient(&mut g, Some(10.0)), 20.0);
        assert!((global_norm(&g) - 10.0).abs() < 1e-12);
        assert_eq!(g[0].data(), &[6.0, 8.0]);
        let mut g = vec![Tensor::vector(vec![12.0, 16.0])];
        clip_gradient(&mut g, None);
        assert_eq!(g[0].data(), &[12.0, 16.0]);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut p = vec![Tensor::vector(vec![1.0, -1.0])];
        let g = vec![Tensor::vector(vec![0.5, -2.0])];
        let mut opt = Optimizer::new(OptimizerKind::Adam, 0.1, &p);
        opt.step(&mut p, &g, 0..1);
        assert!((p[0].data()[0] - 0.9).abs() < 1e-6);
        assert!((p[0].data()[1] + 0.9).abs() < 1e-6);
    }

    #[test]
    fn adamw_decays_with_zero_gradient() {
        let mut p = vec![Tensor::vector(vec![2.0])];
        let g = vec![Tensor::vector(vec![0.0])];
        let mut opt = Optimizer::new(OptimizerKind::Adamw, 0.1, &p);
        opt.step(&mut p, &g, 0..1);
        assert!((p[0].data()[0] - 2.0 * (1.0 - 0.1 * WEIGHT_DECAY)).abs() < 1e-15);
    }

    #[test]
    fn config_validation() {
        let bad = TrainConfig {
            batch_size: 0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = TrainConfig {
            lr: 0.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        assert!("sgd".parse::<OptimizerKind>().is_err());
    }
}
