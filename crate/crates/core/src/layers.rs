//! Invertible layers with forward, inverse and log-Jacobian-determinant.
//!
//! Batches are `[N, D]` matrices, one sample per row. Each layer belongs to
//! either the linear set (input-independent Jacobian, log-determinant goes
//! into the normalizing constant) or the non-linear set (log-determinant
//! depends on the input and is part of the energy).

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{softplus, sigmoid, Tape, Var};
use crate::error::{Error, Result};
use crate::linalg::{self, Lu};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Actnorm,
    FullyConnected,
    SmoothLeakyRelu,
    AffineCoupling,
    LogitPreprocess,
}

/// Membership in the linear (`S_l`) or non-linear (`S_n`) layer set.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum LayerSet {
    Linear,
    NonLinear,
}

impl LayerSet {
    pub fn tag(self) -> &'static str {
        match self {
            LayerSet::Linear => "S_l",
            LayerSet::NonLinear => "S_n",
        }
    }
}

impl LayerKind {
    pub fn set(self) -> LayerSet {
        match self {
            LayerKind::Actnorm | LayerKind::FullyConnected => LayerSet::Linear,
            LayerKind::SmoothLeakyRelu | LayerKind::AffineCoupling | LayerKind::LogitPreprocess => {
                LayerSet::NonLinear
            }
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            LayerKind::Actnorm => "actnorm",
            LayerKind::FullyConnected => "fully_connected",
            LayerKind::SmoothLeakyRelu => "smooth_leaky_relu",
            LayerKind::AffineCoupling => "affine_coupling",
            LayerKind::LogitPreprocess => "logit_preprocess",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        [
            LayerKind::Actnorm,
            LayerKind::FullyConnected,
            LayerKind::SmoothLeakyRelu,
            LayerKind::AffineCoupling,
            LayerKind::LogitPreprocess,
        ]
        .into_iter()
        .find(|k| k.name() == s)
    }
}

/// `z = (y − β) / γ`.
#[derive(Clone, Debug)]
pub struct Actnorm {
    pub beta: Tensor,
    pub gamma: Tensor,
    /// Whether the data-dependent initialization has run.
    pub initialized: bool,
}

impl Actnorm {
    pub fn identity(dim: usize) -> Self {
        Self {
            beta: Tensor::zeros(&[dim]),
            gamma: Tensor::ones(&[dim]),
            initialized: false,
        }
    }

    pub fn new(beta: Vec<f64>, gamma: Vec<f64>) -> Result<Self> {
        if beta.len() != gamma.len() {
            return Err(Error::ShapeMismatch {
                op: "actnorm",
                lhs: vec![beta.len()],
                rhs: vec![gamma.len()],
            });
        }
        Ok(Self {
            beta: Tensor::vector(beta),
            gamma: Tensor::vector(gamma),
            initialized: true,
        })
    }

    /// Sets `β`, `γ` to the per-coordinate mean and standard deviation of `y`.
    pub fn initialize_from(&mut self, y: &Tensor) {
        let std: Vec<f64> = y
            .col_stds()
            .into_iter()
            .map(|s| if s > 1e-6 { s } else { 1.0 })
            .collect();
        self.beta = Tensor::vector(y.col_means());
        self.gamma = Tensor::vector(std);
        self.initialized = true;
    }

    fn check(&self) -> Result<()> {
        if let Some(i) = self.gamma.data().iter().position(|&g| g == 0.0) {
            return Err(Error::InvalidParameter {
                layer: "actnorm",
                reason: format!("gamma[{i}] is zero"),
            });
        }
        Ok(())
    }
}

/// `z = W y + b`.
#[derive(Clone, Debug)]
pub struct FullyConnected {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl FullyConnected {
    pub fn new(weight: Tensor, bias: Vec<f64>) -> Result<Self> {
        let d = bias.len();
        if weight.shape() != [d, d] {
            return Err(Error::ShapeMismatch {
                op: "fully_connected",
                lhs: weight.shape().to_vec(),
                rhs: vec![d],
            });
        }
        Ok(Self {
            weight,
            bias: Tensor::vector(bias),
        })
    }

    pub fn identity(dim: usize) -> Self {
        Self {
            weight: Tensor::eye(dim),
            bias: Tensor::zeros(&[dim]),
        }
    }

    /// Orthogonal weight from the QR factor of a Gaussian matrix, zero bias.
    pub fn random_orthogonal<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Self {
        loop {
            let g = gaussian_tensor(&[dim, dim], 1.0, rng);
            if let Ok(q) = linalg::orthonormalize(&g) {
                return Self {
                    weight: q,
                    bias: Tensor::zeros(&[dim]),
                };
            }
        }
    }
}

/// `z = αy + (1 − α) log(1 + eʸ)`, applied elementwise.
#[derive(Clone, Debug)]
pub struct SmoothLeakyRelu {
    pub alpha: f64,
    pub dim: usize,
}

pub const NEWTON_MAX_ITERS: usize = 50;
pub const NEWTON_TOL: f64 = 1e-10;

impl SmoothLeakyRelu {
    pub fn new(dim: usize, alpha: f64) -> Result<Self> {
        if !(alpha > 0.0 && alpha <= 1.0) {
            return Err(Error::InvalidParameter {
                layer: "smooth_leaky_relu",
                reason: format!("alpha = {alpha} not in (0, 1]"),
            });
        }
        Ok(Self { alpha, dim })
    }

    fn apply(&self, y: f64) -> f64 {
        self.alpha * y + (1.0 - self.alpha) * softplus(y)
    }

    /// Inverts one coordinate with bracketed Newton iterations.
    pub fn invert_scalar(&self, z: f64) -> Result<f64> {
        let a = self.alpha;
        if a == 1.0 {
            return Ok(z);
        }
        let c = z - (1.0 - a) * std::f64::consts::LN_2;
        let mut lo = c.min(c / a);
        let mut hi = z.max(0.0);
        let mut y = z.clamp(lo, hi);
        let mut residual = f64::INFINITY;
        for _ in 0..NEWTON_MAX_ITERS {
            let f = self.apply(y) - z;
            residual = f.abs();
            if residual <= NEWTON_TOL * (1.0 + z.abs()) {
                return Ok(y);
            }
            if f < 0.0 {
                lo = y;
            } else {
                hi = y;
            }
            let slope = a + (1.0 - a) * sigmoid(y);
            let next = y - f / slope;
            y = if next > lo && next < hi {
                next
            } else {
                0.5 * (lo + hi)
            };
        }
        Err(Error::NewtonDiverged {
            iterations: NEWTON_MAX_ITERS,
            residual,
        })
    }
}

/// Dense network with `tanh` hidden activations and a linear output layer.
#[derive(Clone, Debug)]
pub struct Mlp {
    /// `(weight [in, out], bias [out])` per layer.
    pub layers: Vec<(Tensor, Tensor)>,
}

impl Mlp {
    /// Xavier-scaled hidden layers; the output layer is drawn with
    /// `output_scale` (zero gives a network that outputs exactly zero).
    pub fn new<R: Rng + ?Sized>(
        input: usize,
        hidden: usize,
        depth: usize,
        output: usize,
        output_scale: f64,
        rng: &mut R,
    ) -> Self {
        let mut dims = vec![input];
        dims.extend(std::iter::repeat_n(hidden, depth));
        dims.push(output);
        let n = dims.len() - 1;
        let layers = (0..n)
            .map(|i| {
                let (fan_in, fan_out) = (dims[i], dims[i + 1]);
                let scale = if i + 1 == n {
                    output_scale / (fan_in as f64).sqrt()
                } else {
                    (2.0 / (fan_in + fan_out) as f64).sqrt()
                };
                let w = gaussian_tensor(&[fan_in, fan_out], scale, rng);
                let b = if i + 1 == n {
                    gaussian_tensor(&[fan_out], output_scale * 0.1, rng)
                } else {
                    Tensor::zeros(&[fan_out])
                };
                (w, b)
            })
            .collect();
        Self { layers }
    }

    pub fn depth(&self) -> usize {
        self.layers.len().saturating_sub(1)
    }

    pub fn hidden(&self) -> usize {
        self.layers.first().map_or(0, |(w, _)| w.cols())
    }

    fn forward_tape<'t>(&self, params: &[Var<'t>], x: Var<'t>) -> Result<Var<'t>> {
        let n = x.value().rows();
        let mut h = x;
        let last = self.layers.len() - 1;
        for (i, pair) in params.chunks_exact(2).enumerate() {
            h = h.matmul(pair[0])?.add(pair[1].expand_rows(n)?)?;
            if i < last {
                h = h.tanh();
            }
        }
        Ok(h)
    }
}

/// `z_a = s(y_b) ⊙ y_a + t(y_b)`, `z_b = y_b`, with `s = exp(raw scale)`.
#[derive(Clone, Debug)]
pub struct AffineCoupling {
    pub dim: usize,
    /// When set, the transformed block is the trailing `⌈D/2⌉` coordinates.
    pub flip: bool,
    pub scale_net: Mlp,
    pub shift_net: Mlp,
}

impl AffineCoupling {
    pub const DEFAULT_HIDDEN: usize = 32;
    pub const DEFAULT_DEPTH: usize = 2;

    /// Coupling whose output layers start at zero (identity map).
    pub fn new<R: Rng + ?Sized>(dim: usize, flip: bool, hidden: usize, rng: &mut R) -> Result<Self> {
        Self::with_output_scale(dim, flip, hidden, 0.0, rng)
    }

    pub fn with_output_scale<R: Rng + ?Sized>(
        dim: usize,
        flip: bool,
        hidden: usize,
        output_scale: f64,
        rng: &mut R,
    ) -> Result<Self> {
        if dim < 2 {
            return Err(Error::InvalidParameter {
                layer: "affine_coupling",
                reason: format!("needs dim >= 2, got {dim}"),
            });
        }
        let da = dim.div_ceil(2);
        let db = dim - da;
        let depth = Self::DEFAULT_DEPTH;
        Ok(Self {
            dim,
            flip,
            scale_net: Mlp::new(db, hidden, depth, da, output_scale, rng),
            shift_net: Mlp::new(db, hidden, depth, da, output_scale, rng),
        })
    }

    pub fn transformed_dim(&self) -> usize {
        self.dim.div_ceil(2)
    }

    /// Column ranges of the transformed (`a`) and conditioning (`b`) blocks.
    fn blocks(&self) -> ((usize, usize), (usize, usize)) {
        let da = self.transformed_dim();
        if self.flip {
            ((self.dim - da, self.dim), (0, self.dim - da))
        } else {
            ((0, da), (da, self.dim))
        }
    }

    fn assemble<'t>(&self, za: Var<'t>, yb: Var<'t>) -> Result<Var<'t>> {
        if self.flip {
            yb.concat_cols(za)
        } else {
            za.concat_cols(yb)
        }
    }

    fn split_params<'a, 't>(&self, params: &'a [Var<'t>]) -> (&'a [Var<'t>], &'a [Var<'t>]) {
        params.split_at(2 * self.scale_net.layers.len())
    }
}

/// `z = logit(λ + (1 − 2λ)(y − lo)/(hi − lo))`.
#[derive(Clone, Debug)]
pub struct LogitPreprocess {
    pub dim: usize,
    pub lambda: f64,
    pub lo: f64,
    pub hi: f64,
}

impl LogitPreprocess {
    pub const DEFAULT_LAMBDA: f64 = 1e-2;

    pub fn new(dim: usize, lambda: f64, lo: f64, hi: f64) -> Result<Self> {
        if !(lo < hi) {
            return Err(Error::InvalidParameter {
                layer: "logit_preprocess",
                reason: format!("lo = {lo} must be below hi = {hi}"),
            });
        }
        if !(lambda > 0.0 && lambda < 0.5) {
            return Err(Error::InvalidParameter {
                layer: "logit_preprocess",
                reason: format!("lambda = {lambda} not in (0, 0.5)"),
            });
        }
        Ok(Self { dim, lambda, lo, hi })
    }

    fn rescale(&self) -> (f64, f64) {
        let a = (1.0 - 2.0 * self.lambda) / (self.hi - self.lo);
        (a, self.lambda - a * self.lo)
    }

    fn check_domain(&self, y: &Tensor) -> Result<()> {
        let d = y.cols();
        for (i, &v) in y.data().iter().enumerate() {
            if !(v > self.lo && v < self.hi) {
                return Err(Error::Domain {
                    layer: "logit_preprocess",
                    coord: i % d,
                    value: v,
                    lo: self.lo,
                    hi: self.hi,
                });
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub enum FlowLayer {
    Actnorm(Actnorm),
    FullyConnected(FullyConnected),
    SmoothLeakyRelu(SmoothLeakyRelu),
    AffineCoupling(AffineCoupling),
    LogitPreprocess(LogitPreprocess),
}

/// Result of pushing a batch through one layer on a tape.
pub struct LayerOutput<'t> {
    pub z: Var<'t>,
    /// Per-sample `log|det J|` (`[N]`) for non-linear layers; `None` for linear ones.
    pub logdet: Option<Var<'t>>,
}

impl FlowLayer {
    pub fn kind(&self) -> LayerKind {
        match self {
            FlowLayer::Actnorm(_) => LayerKind::Actnorm,
            FlowLayer::FullyConnected(_) => LayerKind::FullyConnected,
            FlowLayer::SmoothLeakyRelu(_) => LayerKind::SmoothLeakyRelu,
            FlowLayer::AffineCoupling(_) => LayerKind::AffineCoupling,
            FlowLayer::LogitPreprocess(_) => LayerKind::LogitPreprocess,
        }
    }

    pub fn set(&self) -> LayerSet {
        self.kind().set()
    }

    pub fn dim(&self) -> usize {
        match self {
            FlowLayer::Actnorm(l) => l.beta.len(),
            FlowLayer::FullyConnected(l) => l.bias.len(),
            FlowLayer::SmoothLeakyRelu(l) => l.dim,
            FlowLayer::AffineCoupling(l) => l.dim,
            FlowLayer::LogitPreprocess(l) => l.dim,
        }
    }

    pub fn param_names(&self) -> Vec<String> {
        match self {
            FlowLayer::Actnorm(_) => vec!["beta".into(), "gamma".into()],
            FlowLayer::FullyConnected(_) => vec!["weight".into(), "bias".into()],
            FlowLayer::SmoothLeakyRelu(_) | FlowLayer::LogitPreprocess(_) => vec![],
            FlowLayer::AffineCoupling(l) => {
                let mut names = Vec::new();
                for (net, m) in [("scale", &l.scale_net), ("shift", &l.shift_net)] {
                    for i in 0..m.layers.len() {
                        names.push(format!("{net}.{i}.weight"));
                        names.push(format!("{net}.{i}.bias"));
                    }
                }
                names
            }
        }
    }

    pub fn params(&self) -> Vec<&Tensor> {
        match self {
            FlowLayer::Actnorm(l) => vec![&l.beta, &l.gamma],
            FlowLayer::FullyConnected(l) => vec![&l.weight, &l.bias],
            FlowLayer::SmoothLeakyRelu(_) | FlowLayer::LogitPreprocess(_) => vec![],
            FlowLayer::AffineCoupling(l) => l
                .scale_net
                .layers
                .iter()
                .chain(&l.shift_net.layers)
                .flat_map(|(w, b)| [w, b])
                .collect(),
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        match self {
            FlowLayer::Actnorm(l) => vec![&mut l.beta, &mut l.gamma],
            FlowLayer::FullyConnected(l) => vec![&mut l.weight, &mut l.bias],
            FlowLayer::SmoothLeakyRelu(_) | FlowLayer::LogitPreprocess(_) => vec![],
            FlowLayer::AffineCoupling(l) => l
                .scale_net
                .layers
                .iter_mut()
                .chain(l.shift_net.layers.iter_mut())
                .flat_map(|(w, b)| [w, b])
                .collect(),
        }
    }

    /// Pushes `y` (`[N, D]`) through the layer on the tape. `params` must be
    /// bound in the order of [`FlowLayer::params`].
    pub fn forward_tape<'t>(&self, params: &[Var<'t>], y: Var<'t>) -> Result<LayerOutput<'t>> {
        let yv = y.value();
        if yv.ndim() != 2 || yv.cols() != self.dim() {
            return Err(Error::ShapeMismatch {
                op: self.kind().name(),
                lhs: yv.shape().to_vec(),
                rhs: vec![self.dim()],
            });
        }
        let n = yv.rows();
        match self {
            FlowLayer::Actnorm(l) => {
                l.check()?;
                let z = y
                    .sub(params[0].expand_rows(n)?)?
                    .div(params[1].expand_rows(n)?)?;
                Ok(LayerOutput { z, logdet: None })
            }
            FlowLayer::FullyConnected(_) => {
                let z = y
                    .matmul(params[0].transpose()?)?
                    .add(params[1].expand_rows(n)?)?;
                Ok(LayerOutput { z, logdet: None })
            }
            FlowLayer::SmoothLeakyRelu(l) => {
                let a = l.alpha;
                let z = y.scale(a).add(y.softplus().scale(1.0 - a))?;
                let logdet = y.sigmoid().affine(1.0 - a, a).ln().sum_cols()?;
                Ok(LayerOutput {
                    z,
                    logdet: Some(logdet),
                })
            }
            FlowLayer::AffineCoupling(l) => {
                let ((a0, a1), (b0, b1)) = l.blocks();
                let ya = y.slice_cols(a0, a1)?;
                let yb = y.slice_cols(b0, b1)?;
                let (sp, tp) = l.split_params(params);
                let raw = l.scale_net.forward_tape(sp, yb)?;
                let shift = l.shift_net.forward_tape(tp, yb)?;
                let za = raw.exp().mul(ya)?.add(shift)?;
                let z = l.assemble(za, yb)?;
                Ok(LayerOutput {
                    z,
                    logdet: Some(raw.sum_cols()?),
                })
            }
            FlowLayer::LogitPreprocess(l) => {
                l.check_domain(&yv)?;
                let (a, c) = l.rescale();
                let u = y.affine(a, c);
                let log_u = u.ln();
                let log_1mu = u.affine(-1.0, 1.0).ln();
                let z = log_u.sub(log_1mu)?;
                let logdet = log_u
                    .add(log_1mu)?
                    .neg()
                    .add_scalar(a.ln())
                    .sum_cols()?;
                Ok(LayerOutput {
                    z,
                    logdet: Some(logdet),
                })
            }
        }
    }

    /// Input-independent `log|det J|` of a linear layer, as a scalar tape node.
    pub fn linear_logdet_tape<'t>(&self, params: &[Var<'t>]) -> Result<Var<'t>> {
        match self {
            FlowLayer::Actnorm(l) => {
                l.check()?;
                Ok(params[1].abs().ln().sum().neg())
            }
            FlowLayer::FullyConnected(_) => params[0].slogdet(),
            _ => Err(Error::Model(format!(
                "{} is not a linear layer",
                self.kind().name()
            ))),
        }
    }

    fn eval<T>(&self, f: impl for<'t> FnOnce(&'t Tape, Vec<Var<'t>>) -> Result<T>) -> Result<T> {
        let tape = Tape::new();
        let params = self
            .params()
            .into_iter()
            .map(|p| tape.constant(p.clone()))
            .collect();
        f(&tape, params)
    }

    pub fn forward(&self, y: &Tensor) -> Result<Tensor> {
        self.eval(|tape, params| {
            let out = self.forward_tape(&params, tape.constant(y.clone()))?;
            Ok((*out.z.value()).clone())
        })
    }

    /// Per-sample `log|det J_g(y)|`, shape `[N]`.
    pub fn log_abs_det_jacobian(&self, y: &Tensor) -> Result<Tensor> {
        self.eval(|tape, params| {
            let out = self.forward_tape(&params, tape.constant(y.clone()))?;
            match out.logdet {
                Some(ld) => Ok((*ld.value()).clone()),
                None => {
                    let c = self.linear_logdet_tape(&params)?.item();
                    Ok(Tensor::full(&[y.rows()], c))
                }
            }
        })
    }

    pub fn inverse(&self, z: &Tensor) -> Result<Tensor> {
        if z.ndim() != 2 || z.cols() != self.dim() {
            return Err(Error::ShapeMismatch {
                op: "inverse",
                lhs: z.shape().to_vec(),
                rhs: vec![self.dim()],
            });
        }
        let (n, d) = (z.rows(), z.cols());
        match self {
            FlowLayer::Actnorm(l) => {
                l.check()?;
                let mut out = z.clone();
                for row in out.data_mut().chunks_exact_mut(d) {
                    for ((v, b), g) in row.iter_mut().zip(l.beta.data()).zip(l.gamma.data()) {
                        *v = *v * g + b;
                    }
                }
                Ok(out)
            }
            FlowLayer::FullyConnected(l) => {
                let mut centered = z.clone();
                for row in centered.data_mut().chunks_exact_mut(d) {
                    for (v, b) in row.iter_mut().zip(l.bias.data()) {
                        *v -= b;
                    }
                }
                // rows: y = W⁻¹(z − b)  ⇔  Yᵀ = W⁻¹ (Z − b)ᵀ
                let lu = Lu::factor(&l.weight)?;
                lu.solve_matrix(&centered.transpose()?)?.transpose()
            }
            FlowLayer::SmoothLeakyRelu(l) => {
                let data = z
                    .data()
                    .iter()
                    .map(|&v| l.invert_scalar(v))
                    .collect::<Result<Vec<_>>>()?;
                Tensor::matrix(n, d, data)
            }
            FlowLayer::AffineCoupling(l) => self.eval(|tape, params| {
                let ((a0, a1), (b0, b1)) = l.blocks();
                let zt = tape.constant(z.clone());
                let za = zt.slice_cols(a0, a1)?;
                let yb = zt.slice_cols(b0, b1)?;
                let (sp, tp) = l.split_params(&params);
                let raw = l.scale_net.forward_tape(sp, yb)?;
                let shift = l.shift_net.forward_tape(tp, yb)?;
                let ya = za.sub(shift)?.mul(raw.neg().exp())?;
                Ok((*l.assemble(ya, yb)?.value()).clone())
            }),
            FlowLayer::LogitPreprocess(l) => {
                let (a, c) = l.rescale();
                Ok(z.map(|v| (sigmoid(v) - c) / a))
            }
        }
    }
}

pub(crate) fn gaussian_tensor<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| std * rng.sample::<f64, _>(StandardNormal))
        .collect();
    Tensor::from_parts(shape.to_vec(), data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn row(v: &[f64]) -> Tensor {
        Tensor::matrix(1, v.len(), v.to_vec()).unwrap()
    }

    #[test]
    fn set_membership() {
        assert_eq!(LayerKind::Actnorm.set(), LayerSet::Linear);
        assert_eq!(LayerKind::FullyConnected.set(), LayerSet::Linear);
        assert_eq!(LayerKind::SmoothLeakyRelu.set(), LayerSet::NonLinear);
        assert_eq!(LayerKind::AffineCoupling.set(), LayerSet::NonLinear);
        assert_eq!(LayerKind::LogitPreprocess.set(), LayerSet::NonLinear);
    }

    #[test]
    fn forward_examples() {
        let an = FlowLayer::Actnorm(Actnorm::identity(2));
        assert_eq!(an.forward(&row(&[1.0, 2.0])).unwrap().data(), &[1.0, 2.0]);

        let sl = FlowLayer::SmoothLeakyRelu(SmoothLeakyRelu::new(2, 0.3).unwrap());
        let z = sl.forward(&row(&[0.0, 0.0])).unwrap();
        let expect = 0.7 * 2f64.ln();
        assert!((z.data()[0] - expect).abs() < 1e-15);
        assert!((expect - 0.485203).abs() < 1e-6);

        let fc = FlowLayer::FullyConnected(
            FullyConnected::new(Tensor::diag(&[2.0, 3.0]), vec![0.0, 0.0]).unwrap(),
        );
        assert_eq!(fc.forward(&row(&[1.0, 1.0])).unwrap().data(), &[2.0, 3.0]);
    }

    #[test]
    fn inverse_examples() {
        let an = FlowLayer::Actnorm(Actnorm::new(vec![1.0, 1.0], vec![2.0, 2.0]).unwrap());
        assert_eq!(an.inverse(&row(&[0.0, 0.0])).unwrap().data(), &[1.0, 1.0]);

        let fc = FlowLayer::FullyConnected(
            FullyConnected::new(Tensor::eye(2), vec![5.0, 5.0]).unwrap(),
        );
        assert_eq!(fc.inverse(&row(&[0.0, 0.0])).unwrap().data(), &[-5.0, -5.0]);

        let id = FlowLayer::SmoothLeakyRelu(SmoothLeakyRelu::new(2, 1.0).unwrap());
        assert_eq!(id.inverse(&row(&[3.5, -7.0])).unwrap().data(), &[3.5, -7.0]);
    }

    #[test]
    fn logdet_examples() {
        let an = FlowLayer::Actnorm(Actnorm::new(vec![0.0, 0.0], vec![0.5, 0.5]).unwrap());
        let ld = an.log_abs_det_jacobian(&row(&[0.3, 0.1])).unwrap().item();
        assert!((ld - 4f64.ln()).abs() < 1e-15);

        let sl = FlowLayer::SmoothLeakyRelu(SmoothLeakyRelu::new(2, 0.3).unwrap());
        let ld = sl.log_abs_det_jacobian(&row(&[0.0, 0.0])).unwrap().item();
        assert!((ld - 2.0 * 0.65f64.ln()).abs() < 1e-15);
        assert!((ld + 0.861566).abs() < 1e-6);

        let fc = FlowLayer::FullyConnected(FullyConnected::identity(2));
        assert_eq!(fc.log_abs_det_jacobian(&row(&[1.0, 2.0])).unwrap().item(), 0.0);
    }

    #[test]
    fn zero_gamma_and_singular_weight_are_errors() {
        let an = FlowLayer::Actnorm(Actnorm::new(vec![0.0, 0.0], vec![1.0, 0.0]).unwrap());
        assert!(matches!(
            an.log_abs_det_jacobian(&row(&[0.0, 0.0])),
            Err(Error::InvalidParameter { .. })
        ));
        let fc = FlowLayer::FullyConnected(
            FullyConnected::new(Tensor::zeros(&[2, 2]), vec![0.0, 0.0]).unwrap(),
        );
        assert!(matches!(
            fc.log_abs_det_jacobian(&row(&[0.0, 0.0])),
            Err(Error::Singular { .. })
        ));
        assert!(matches!(
            fc.inverse(&row(&[0.0, 0.0])),
            Err(Error::Singular { .. })
        ));
    }

    #[test]
    fn logit_domain_violation_names_coordinate() {
        let l = FlowLayer::LogitPreprocess(LogitPreprocess::new(2, 0.01, -1.0, 1.0).unwrap());
        match l.forward(&row(&[0.0, 1.5])) {
            Err(Error::Domain { coord, lo, hi, .. }) => {
                assert_eq!(coord, 1);
                assert_eq!((lo, hi), (-1.0, 1.0));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn smooth_leaky_relu_inverts_extreme_values() {
        let l = SmoothLeakyRelu::new(1, 0.05).unwrap();
        for z in [-500.0, -30.0, -1e-3, 0.0, 1e-3, 2.0, 40.0, 800.0] {
            let y = l.invert_scalar(z).unwrap();
            assert!((l.apply(y) - z).abs() < 1e-8 * (1.0 + z.abs()), "z={z}");
        }
    }

    #[test]
    fn coupling_blocks_alternate() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = AffineCoupling::new(3, false, 4, &mut rng).unwrap();
        let b = AffineCoupling::new(3, true, 4, &mut rng).unwrap();
        assert_eq!(a.blocks(), ((0, 2), (2, 3)));
        assert_eq!(b.blocks(), ((1, 3), (0, 1)));
    }

    #[test]
    fn zero_initialized_coupling_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let c = FlowLayer::AffineCoupling(AffineCoupling::new(2, false, 8, &mut rng).unwrap());
        let y = row(&[0.4, -1.3]);
        assert_eq!(c.forward(&y).unwrap(), y);
        assert_eq!(c.log_abs_det_jacobian(&y).unwrap().item(), 0.0);
    }
}
