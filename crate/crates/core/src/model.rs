//! Layer stacks and their energy-based factorization.
//!
//! For `g = g_L ∘ … ∘ g_1` with a standard normal prior,
//!
//! ```text
//! E(x)  = −log p_u(g(x)) − Σ_{non-linear i} log|det J_i(x)|
//! log Z = −Σ_{linear i} log|det J_i|
//! log p(x) = −E(x) − log Z
//! ```
//!
//! Computing `E` never touches a linear layer's determinant, so score-based
//! objectives avoid the O(D³) term entirely. `log Z` is computed once per
//! parameter setting and cached.

use std::ops::Range;
use std::sync::OnceLock;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::layers::{
    Actnorm, AffineCoupling, FlowLayer, FullyConnected, LayerSet, LogitPreprocess, SmoothLeakyRelu,
};
use crate::tensor::Tensor;

/// Rows evaluated per tape when scoring large batches.
pub const EVAL_CHUNK: usize = 4096;

/// Worker threads for batch evaluation, from `EBFLOW_THREADS` (default 1).
/// Chunk boundaries do not depend on it, so results are identical for any value.
pub fn worker_threads() -> usize {
    std::env::var("EBFLOW_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&t| t > 0)
        .unwrap_or(1)
}

pub const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// Base distribution `p_u`. Only the standard normal is supported.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Prior {
    #[default]
    StandardNormal,
}

impl Prior {
    pub fn name(self) -> &'static str {
        "standard_normal"
    }

    /// Per-row `log p_u(z)` on the tape.
    pub fn log_density<'t>(self, z: Var<'t>) -> Result<Var<'t>> {
        let d = z.value().cols() as f64;
        Ok(z.square().sum_cols()?.scale(-0.5).add_scalar(-0.5 * d * LN_2PI))
    }
}

#[derive(Clone, Debug)]
pub struct FlowModel {
    layers: Vec<FlowLayer>,
    dim: usize,
    prior: Prior,
    preprocess: usize,
    log_z: OnceLock<f64>,
}

/// Energy, normalizer and log-density at one point.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EnergyReport {
    pub energy: f64,
    pub log_z: Option<f64>,
    pub log_prob: Option<f64>,
}

impl EnergyReport {
    pub fn new(energy: f64, log_z: Option<f64>) -> Self {
        Self {
            energy,
            log_z,
            log_prob: log_z.map(|lz| -energy - lz),
        }
    }
}

impl FlowModel {
    pub fn new(layers: Vec<FlowLayer>, preprocess: usize) -> Result<Self> {
        let dim = layers
            .first()
            .map(FlowLayer::dim)
            .ok_or_else(|| Error::Model("a flow needs at least one layer".into()))?;
        if let Some((i, l)) = layers.iter().enumerate().find(|(_, l)| l.dim() != dim) {
            return Err(Error::Model(format!(
                "layer {i} has dimension {}, expected {dim}",
                l.dim()
            )));
        }
        if preprocess >= layers.len() {
            return Err(Error::Model(format!(
                "preprocess count {preprocess} must be below layer count {}",
                layers.len()
            )));
        }
        Ok(Self {
            layers,
            dim,
            prior: Prior::StandardNormal,
            preprocess,
            log_z: OnceLock::new(),
        })
    }

    pub fn identity(dim: usize) -> Self {
        Self::new(vec![FlowLayer::FullyConnected(FullyConnected::identity(dim))], 0)
            .expect("single layer")
    }

    /// `blocks` × (actnorm, fully-connected, affine coupling), with the
    /// coupling split alternating between blocks.
    pub fn glow<R: Rng + ?Sized>(dim: usize, blocks: usize, hidden: usize, rng: &mut R) -> Result<Self> {
        let mut layers = Vec::with_capacity(3 * blocks);
        for b in 0..blocks {
            layers.push(FlowLayer::Actnorm(Actnorm::identity(dim)));
            layers.push(FlowLayer::FullyConnected(FullyConnected::random_orthogonal(dim, rng)));
            layers.push(FlowLayer::AffineCoupling(AffineCoupling::new(
                dim,
                b % 2 == 1,
                hidden,
                rng,
            )?));
        }
        Self::new(layers, 0)
    }

    /// Fully-connected flow: FC, then `depth` × (smooth leaky ReLU, FC).
    pub fn fully_connected<R: Rng + ?Sized>(dim: usize, depth: usize, alpha: f64, rng: &mut R) -> Result<Self> {
        let mut layers = vec![FlowLayer::FullyConnected(FullyConnected::random_orthogonal(dim, rng))];
        for _ in 0..depth {
            layers.push(FlowLayer::SmoothLeakyRelu(SmoothLeakyRelu::new(dim, alpha)?));
            layers.push(FlowLayer::FullyConnected(FullyConnected::random_orthogonal(dim, rng)));
        }
        Self::new(layers, 0)
    }

    /// Prepends a logit preprocessing layer and marks it as the MaP preprocess stage.
    pub fn with_logit_preprocess(self, lambda: f64, lo: f64, hi: f64) -> Result<Self> {
        let mut layers = vec![FlowLayer::LogitPreprocess(LogitPreprocess::new(
            self.dim, lambda, lo, hi,
        )?)];
        layers.extend(self.layers);
        Self::new(layers, self.preprocess + 1)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn prior(&self) -> Prior {
        self.prior
    }

    pub fn layers(&self) -> &[FlowLayer] {
        &self.layers
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn preprocess_count(&self) -> usize {
        self.preprocess
    }

    pub fn set_preprocess_count(&mut self, k: usize) -> Result<()> {
        if k >= self.layers.len() {
            return Err(Error::Model(format!(
                "preprocess count {k} must be below layer count {}",
                self.layers.len()
            )));
        }
        self.preprocess = k;
        Ok(())
    }

    /// Mutable layer access. Invalidates the cached normalizer.
    pub fn layers_mut(&mut self) -> &mut [FlowLayer] {
        self.log_z = OnceLock::new();
        &mut self.layers
    }

    pub fn parameters(&self) -> Vec<&Tensor> {
        self.layers.iter().flat_map(FlowLayer::params).collect()
    }

    pub fn parameter_names(&self) -> Vec<String> {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(i, l)| {
                let kind = l.kind().name();
                l.param_names()
                    .into_iter()
                    .map(move |n| format!("{i}.{kind}.{n}"))
            })
            .collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.parameters().iter().map(|t| t.len()).sum()
    }

    /// Range of flat parameter indices owned by layers `layers`.
    pub fn parameter_range(&self, layers: Range<usize>) -> Range<usize> {
        let count = |r: Range<usize>| -> usize {
            self.layers[r].iter().map(|l| l.params().len()).sum()
        };
        count(0..layers.start)..count(0..layers.end)
    }

    pub fn clone_parameters(&self) -> Vec<Tensor> {
        self.parameters().into_iter().cloned().collect()
    }

    /// Overwrites every parameter. Invalidates the cached normalizer.
    pub fn set_parameters(&mut self, values: &[Tensor]) -> Result<()> {
        let mut slots: Vec<&mut Tensor> = self
            .layers
            .iter_mut()
            .flat_map(FlowLayer::params_mut)
            .collect();
        if slots.len() != values.len() {
            return Err(Error::Model(format!(
                "expected {} parameter tensors, got {}",
                slots.len(),
                values.len()
            )));
        }
        for (slot, v) in slots.iter_mut().zip(values) {
            if slot.shape() != v.shape() {
                return Err(Error::ShapeMismatch {
                    op: "set_parameters",
                    lhs: slot.shape().to_vec(),
                    rhs: v.shape().to_vec(),
                });
            }
            **slot = v.clone();
        }
        self.log_z = OnceLock::new();
        Ok(())
    }

    /// Puts the parameters on `tape`; layers in `trainable` become
    /// differentiable leaves, the rest constants.
    pub fn bind<'m, 't>(&'m self, tape: &'t Tape, trainable: Range<usize>) -> Bound<'m, 't> {
        let params = self
            .layers
            .iter()
            .enumerate()
            .map(|(i, l)| {
                l.params()
                    .into_iter()
                    .map(|p| {
                        if trainable.contains(&i) {
                            tape.var(p.clone())
                        } else {
                            tape.constant(p.clone())
                        }
                    })
                    .collect()
            })
            .collect();
        Bound {
            model: self,
            tape,
            params,
            range: 0..self.layers.len(),
        }
    }

    pub fn bind_constant<'m, 't>(&'m self, tape: &'t Tape) -> Bound<'m, 't> {
        self.bind(tape, 0..0)
    }

    fn chunked<F>(&self, x: &Tensor, out_cols: Option<usize>, f: F) -> Result<Tensor>
    where
        F: for<'t> Fn(&Bound<'_, 't>, Var<'t>) -> Result<Var<'t>> + Sync,
    {
        self.check_input(x)?;
        let n = x.rows();
        let spans: Vec<(usize, usize)> = (0..n)
            .step_by(EVAL_CHUNK)
            .map(|s| (s, (s + EVAL_CHUNK).min(n)))
            .collect();
        let eval = |&(start, end): &(usize, usize)| -> Result<Tensor> {
            let tape = Tape::new();
            let bound = self.bind_constant(&tape);
            let xv = tape.constant(x.slice_rows(start, end));
            let out = f(&bound, xv)?;
            Ok((*out.value()).clone())
        };
        let threads = worker_threads().min(spans.len());
        let parts: Vec<Tensor> = if threads <= 1 {
            spans.iter().map(eval).collect::<Result<_>>()?
        } else {
            let mut indexed: Vec<(usize, Result<Tensor>)> = std::thread::scope(|scope| {
                let handles: Vec<_> = (0..threads)
                    .map(|t| {
                        let (spans, eval) = (&spans, &eval);
                        scope.spawn(move || {
                            (t..spans.len())
                                .step_by(threads)
                                .map(|i| (i, eval(&spans[i])))
                                .collect::<Vec<_>>()
                        })
                    })
                    .collect();
                handles
                    .into_iter()
                    .flat_map(|h| h.join().expect("evaluation worker panicked"))
                    .collect()
            });
            indexed.sort_by_key(|(i, _)| *i);
            indexed.into_iter().map(|(_, r)| r).collect::<Result<_>>()?
        };
        match out_cols {
            None => Ok(Tensor::vector(
                parts.into_iter().flat_map(Tensor::into_data).collect(),
            )),
            Some(_) => Tensor::concat_rows(&parts),
        }
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        if x.ndim() != 2 || x.cols() != self.dim {
            return Err(Error::ShapeMismatch {
                op: "model_input",
                lhs: x.shape().to_vec(),
                rhs: vec![self.dim],
            });
        }
        Ok(())
    }

    /// `E(x)` per row of `x` (`[N, D]` → `[N]`).
    pub fn energy(&self, x: &Tensor) -> Result<Tensor> {
        self.chunked(x, None, |b, xv| b.energy(xv))
    }

    /// `log Z = −Σ_{linear} log|det J|`, computed once and cached until the
    /// parameters change.
    pub fn log_partition(&self) -> Result<f64> {
        if let Some(v) = self.log_z.get() {
            return Ok(*v);
        }
        let tape = Tape::new();
        let v = -self.bind_constant(&tape).linear_logdet()?.item();
        let _ = self.log_z.set(v);
        Ok(v)
    }

    /// `log p(x) = −E(x) − log Z`.
    pub fn log_prob(&self, x: &Tensor) -> Result<Tensor> {
        let log_z = self.log_partition()?;
        Ok(self.energy(x)?.map(|e| -e - log_z))
    }

    /// `log p(x)` from the change-of-variables formula, summing every layer's
    /// log-determinant per sample without the energy/normalizer split.
    pub fn log_prob_direct(&self, x: &Tensor) -> Result<Tensor> {
        self.chunked(x, None, |b, xv| b.log_prob_direct(xv))
    }

    pub fn energy_report(&self, x: &Tensor) -> Result<EnergyReport> {
        let e = self.energy(x)?;
        let lz = self.log_partition().ok();
        Ok(EnergyReport::new(e.data()[0], lz))
    }

    /// `∇ₓ log p(x) = −∂E/∂x`, per row.
    pub fn score(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        let n = x.rows();
        let mut parts = Vec::new();
        let mut start = 0;
        while start < n {
            let end = (start + EVAL_CHUNK).min(n);
            let tape = Tape::new();
            let bound = self.bind_constant(&tape);
            let xv = tape.var(x.slice_rows(start, end));
            let s = bound.score(xv, false)?;
            parts.push((*s.value()).clone());
            start = end;
        }
        Tensor::concat_rows(&parts)
    }

    /// `g(x)`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.forward_range(x, 0..self.layers.len())
    }

    pub fn forward_range(&self, x: &Tensor, layers: Range<usize>) -> Result<Tensor> {
        let d = self.dim;
        self.chunked(x, Some(d), |b, xv| Ok(b.with_range(layers.clone()).push(xv)?.z))
    }

    /// `g⁻¹(z)`.
    pub fn inverse(&self, z: &Tensor) -> Result<Tensor> {
        self.inverse_range(z, 0..self.layers.len())
    }

    pub fn inverse_range(&self, z: &Tensor, layers: Range<usize>) -> Result<Tensor> {
        self.check_input(z)?;
        let mut y = z.clone();
        for i in layers.rev() {
            y = self.layers[i].inverse(&y).map_err(|e| Error::InverseFailed {
                layer: i,
                source: Box::new(e),
            })?;
        }
        Ok(y)
    }

    /// Draws `n` samples `g⁻¹(u)`, `u ~ p_u`.
    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<Tensor> {
        let u = (0..n * self.dim)
            .map(|_| rng.sample::<f64, _>(StandardNormal))
            .collect();
        self.inverse(&Tensor::matrix(n, self.dim, u)?)
    }

    /// Splits into `(preprocess, head)` at the MaP boundary `k`.
    pub fn map_split(&self) -> Result<(FlowModel, FlowModel)> {
        let k = self.preprocess;
        if k == 0 {
            return Err(Error::MapWithoutPreprocess);
        }
        let pre = FlowModel::new(self.layers[..k].to_vec(), 0)?;
        let head = FlowModel::new(self.layers[k..].to_vec(), 0)?;
        Ok((pre, head))
    }

    /// Layers modeled under MaP (`k..L`).
    pub fn head_range(&self) -> Range<usize> {
        self.preprocess..self.layers.len()
    }

    /// Runs actnorm data-dependent initialization with `batch`, layer by layer.
    pub fn initialize_actnorm(&mut self, batch: &Tensor) -> Result<()> {
        self.initialize_actnorm_range(batch, 0..self.layers.len())
    }

    /// Same as [`initialize_actnorm`](Self::initialize_actnorm) for `batch`
    /// entering at the first layer of `layers`.
    pub fn initialize_actnorm_range(&mut self, batch: &Tensor, layers: Range<usize>) -> Result<()> {
        let mut y = batch.clone();
        for i in layers {
            if let FlowLayer::Actnorm(a) = &mut self.layers[i] {
                if !a.initialized {
                    a.initialize_from(&y);
                }
            }
            y = self.layers[i].forward(&y)?;
        }
        self.log_z = OnceLock::new();
        Ok(())
    }
}

/// A model whose parameters live on a tape.
pub struct Bound<'m, 't> {
    model: &'m FlowModel,
    tape: &'t Tape,
    params: Vec<Vec<Var<'t>>>,
    range: Range<usize>,
}

/// Output of a pass through a layer range.
pub struct Pass<'t> {
    pub z: Var<'t>,
    /// Sum of per-sample non-linear log-determinants (`[N]`), if any.
    pub nonlinear_logdet: Option<Var<'t>>,
}

impl<'m, 't> Bound<'m, 't> {
    pub fn model(&self) -> &'m FlowModel {
        self.model
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    /// Restricts evaluation to `layers` (e.g. the MaP head).
    pub fn with_range(&self, layers: Range<usize>) -> Bound<'m, 't> {
        Bound {
            model: self.model,
            tape: self.tape,
            params: self.params.clone(),
            range: layers,
        }
    }

    pub fn range(&self) -> Range<usize> {
        self.range.clone()
    }

    /// Parameter leaves in flat model order.
    pub fn parameters(&self) -> Vec<Var<'t>> {
        self.params.iter().flatten().copied().collect()
    }

    pub fn push(&self, x: Var<'t>) -> Result<Pass<'t>> {
        let mut z = x;
        let mut logdet: Option<Var<'t>> = None;
        for i in self.range.clone() {
            let out = self.model.layers[i].forward_tape(&self.params[i], z)?;
            z = out.z;
            if let Some(ld) = out.logdet {
                logdet = Some(match logdet {
                    None => ld,
                    Some(acc) => acc.add(ld)?,
                });
            }
        }
        Ok(Pass {
            z,
            nonlinear_logdet: logdet,
        })
    }

    /// Per-row energy `[N]`.
    pub fn energy(&self, x: Var<'t>) -> Result<Var<'t>> {
        let pass = self.push(x)?;
        let neg_log_prior = self.model.prior.log_density(pass.z)?.neg();
        match pass.nonlinear_logdet {
            Some(ld) => neg_log_prior.sub(ld),
            None => Ok(neg_log_prior),
        }
    }

    /// `Σ_{linear} log|det J|` over the range, as a scalar node.
    pub fn linear_logdet(&self) -> Result<Var<'t>> {
        let mut acc: Option<Var<'t>> = None;
        for i in self.range.clone() {
            let layer = &self.model.layers[i];
            if layer.set() == LayerSet::Linear {
                let ld = layer.linear_logdet_tape(&self.params[i])?;
                acc = Some(match acc {
                    None => ld,
                    Some(a) => a.add(ld)?,
                });
            }
        }
        Ok(acc.unwrap_or_else(|| self.tape.scalar(0.0)))
    }

    /// Per-row `log p(x)` with the normalizer on the tape.
    pub fn log_prob(&self, x: Var<'t>) -> Result<Var<'t>> {
        let n = x.value().rows();
        let e = self.energy(x)?;
        match self.linear_logdet_opt()? {
            Some(ld) => ld.expand_scalar(&[n]).sub(e),
            None => Ok(e.neg()),
        }
    }

    fn linear_logdet_opt(&self) -> Result<Option<Var<'t>>> {
        let any = self.range.clone().any(|i| self.model.layers[i].set() == LayerSet::Linear);
        if any {
            Ok(Some(self.linear_logdet()?))
        } else {
            Ok(None)
        }
    }

    /// Per-row `log p(x)` accumulating every layer's log-determinant per sample.
    pub fn log_prob_direct(&self, x: Var<'t>) -> Result<Var<'t>> {
        let n = x.value().rows();
        let mut z = x;
        let mut total: Option<Var<'t>> = None;
        for i in self.range.clone() {
            let layer = &self.model.layers[i];
            let out = layer.forward_tape(&self.params[i], z)?;
            let ld = match out.logdet {
                Some(ld) => ld,
                None => layer
                    .linear_logdet_tape(&self.params[i])?
                    .expand_scalar(&[n]),
            };
            total = Some(match total {
                None => ld,
                Some(t) => t.add(ld)?,
            });
            z = out.z;
        }
        let lp = self.model.prior.log_density(z)?;
        match total {
            Some(t) => lp.add(t),
            None => Ok(lp),
        }
    }

    /// `∂ΣE/∂x`, i.e. the per-row energy gradient `[N, D]`.
    pub fn energy_grad(&self, x: Var<'t>, create_graph: bool) -> Result<Var<'t>> {
        let e = self.energy(x)?.sum();
        Ok(x.tape().grad(e, &[x], create_graph)?[0])
    }

    /// `−∂E/∂x` per row.
    pub fn score(&self, x: Var<'t>, create_graph: bool) -> Result<Var<'t>> {
        Ok(self.energy_grad(x, create_graph)?.neg())
    }
}
