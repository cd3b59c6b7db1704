//! Finite-difference gradient oracle and random instance helpers shared by
//! the integration tests and the acceptance target.

#![allow(dead_code)]

use ebflow::layers::{Actnorm, AffineCoupling, FlowLayer, FullyConnected, LogitPreprocess, SmoothLeakyRelu};
use ebflow::{FlowModel, Result, Tape, Tensor, Var};
use rand::Rng;
use rand_distr::StandardNormal;

/// Denominator floor for relative errors of near-zero entries.
pub const REL_FLOOR: f64 = 1e-3;
/// Step of the five-point stencil.
pub const FD_STEP: f64 = 1e-3;

pub trait TapeFn: for<'t> Fn(&[Var<'t>]) -> Result<Var<'t>> {}
impl<F> TapeFn for F where F: for<'t> Fn(&[Var<'t>]) -> Result<Var<'t>> {}

pub fn normal<R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.sample(StandardNormal)).collect()).unwrap()
}

pub fn uniform<R: Rng + ?Sized>(shape: &[usize], lo: f64, hi: f64, rng: &mut R) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Entries with magnitude in `[lo, hi]` and random sign.
pub fn away_from_zero<R: Rng + ?Sized>(shape: &[usize], lo: f64, hi: f64, rng: &mut R) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let v = rng.random_range(lo..hi);
            if rng.random_bool(0.5) {
                v
            } else {
                -v
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// `U diag(s) Vᵀ` with orthogonal `U`, `V` and singular values in `[lo, hi]`.
pub fn conditioned<R: Rng + ?Sized>(d: usize, lo: f64, hi: f64, rng: &mut R) -> Tensor {
    let u = ebflow::linalg::orthonormalize(&normal(&[d, d], rng)).unwrap();
    let v = ebflow::linalg::orthonormalize(&normal(&[d, d], rng)).unwrap();
    let s: Vec<f64> = (0..d).map(|_| rng.random_range(lo..hi)).collect();
    u.matmul(&Tensor::diag(&s)).unwrap().matmul(&v.transpose().unwrap()).unwrap()
}

/// Max over entries of `|a − b| / max(|a|, |b|, REL_FLOOR)`.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(REL_FLOOR))
        .fold(0.0, f64::max)
}

fn with_entry(inputs: &[Tensor], i: usize, k: usize, delta: f64) -> Vec<Tensor> {
    let mut v = inputs.to_vec();
    v[i].data_mut()[k] += delta;
    v
}

fn along(inputs: &[Tensor], dirs: &[Tensor], t: f64) -> Vec<Tensor> {
    inputs
        .iter()
        .zip(dirs)
        .map(|(x, d)| x.add(&d.scale(t)).unwrap())
        .collect()
}

/// Five-point central difference of `f` at `0`.
fn stencil(f: impl Fn(f64) -> f64, h: f64) -> f64 {
    (-f(2.0 * h) + 8.0 * f(h) - 8.0 * f(-h) + f(-2.0 * h)) / (12.0 * h)
}

/// `Σ w ⊙ f(inputs)` with fixed weights, so every output entry is exercised.
pub struct Scalarized<F> {
    f: F,
    weights: Tensor,
}

impl<F: TapeFn> Scalarized<F> {
    pub fn new<R: Rng + ?Sized>(f: F, inputs: &[Tensor], rng: &mut R) -> Self {
        let tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|x| tape.constant(x.clone())).collect();
        let shape = f(&vars).expect("function evaluates").shape();
        Self {
            f,
            weights: normal(&shape, rng),
        }
    }

    fn build<'t>(&self, vars: &[Var<'t>]) -> Var<'t> {
        let tape = vars[0].tape();
        let out = (self.f)(vars).expect("function evaluates");
        out.mul(tape.constant(self.weights.clone())).unwrap().sum()
    }

    pub fn value(&self, inputs: &[Tensor]) -> f64 {
        let tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|x| tape.constant(x.clone())).collect();
        self.build(&vars).item()
    }

    pub fn grad(&self, inputs: &[Tensor]) -> Vec<Tensor> {
        let tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|x| tape.var(x.clone())).collect();
        let l = self.build(&vars);
        tape.grad(l, &vars, false)
            .unwrap()
            .into_iter()
            .map(|g| (*g.value()).clone())
            .collect()
    }

    /// Hessian-vector product by double backward.
    pub fn hvp(&self, inputs: &[Tensor], dirs: &[Tensor]) -> Vec<Tensor> {
        let tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|x| tape.var(x.clone())).collect();
        let l = self.build(&vars);
        let g = tape.grad(l, &vars, true).unwrap();
        let mut s = tape.scalar(0.0);
        for (gi, d) in g.iter().zip(dirs) {
            s = s.add(gi.mul(tape.constant(d.clone())).unwrap().sum()).unwrap();
        }
        tape.grad(s, &vars, false)
            .unwrap()
            .into_iter()
            .map(|g| (*g.value()).clone())
            .collect()
    }
}

/// Relative error of the tape gradient against finite differences.
pub fn first_order_error<F: TapeFn>(s: &Scalarized<F>, inputs: &[Tensor]) -> f64 {
    let analytic = s.grad(inputs);
    let mut worst: f64 = 0.0;
    for (i, x) in inputs.iter().enumerate() {
        let fd: Vec<f64> = (0..x.len())
            .map(|k| {
                let h = FD_STEP * x.data()[k].abs().max(1.0);
                stencil(|t| s.value(&with_entry(inputs, i, k, t)), h)
            })
            .collect();
        worst = worst.max(rel_err(analytic[i].data(), &fd));
    }
    worst
}

/// Relative error of the double-backward Hessian-vector product against
/// finite differences of the tape gradient along random directions.
pub fn second_order_error<F: TapeFn, R: Rng + ?Sized>(
    s: &Scalarized<F>,
    inputs: &[Tensor],
    rng: &mut R,
) -> f64 {
    let dirs: Vec<Tensor> = inputs.iter().map(|x| normal(x.shape(), rng)).collect();
    let analytic = s.hvp(inputs, &dirs);
    let mut worst: f64 = 0.0;
    for (i, a) in analytic.iter().enumerate() {
        let fd: Vec<f64> = (0..a.len())
            .map(|k| stencil(|t| s.grad(&along(inputs, &dirs, t))[i].data()[k], FD_STEP))
            .collect();
        worst = worst.max(rel_err(a.data(), &fd));
    }
    worst
}

/// First- and second-order errors for one instance.
pub fn check<F: TapeFn, R: Rng + ?Sized>(f: F, inputs: &[Tensor], rng: &mut R) -> (f64, f64) {
    let s = Scalarized::new(f, inputs, rng);
    (first_order_error(&s, inputs), second_order_error(&s, inputs, rng))
}

/// A random layer of each kind at dimension `d`, with small coupling nets and
/// non-trivial parameters.
pub fn random_layers<R: Rng + ?Sized>(d: usize, rng: &mut R) -> Vec<FlowLayer> {
    let beta: Vec<f64> = (0..d).map(|_| rng.random_range(-0.5..0.5)).collect();
    let gamma: Vec<f64> = (0..d).map(|_| rng.random_range(0.6..1.6)).collect();
    let fc = FullyConnected::new(conditioned(d, 0.5, 1.5, rng), (0..d).map(|_| rng.random_range(-0.3..0.3)).collect())
        .unwrap();
    vec![
        FlowLayer::Actnorm(Actnorm::new(beta, gamma).unwrap()),
        FlowLayer::FullyConnected(fc),
        FlowLayer::SmoothLeakyRelu(SmoothLeakyRelu::new(d, rng.random_range(0.2..0.9)).unwrap()),
        FlowLayer::AffineCoupling(AffineCoupling::with_output_scale(d, rng.random_bool(0.5), 6, 0.3, rng).unwrap()),
        FlowLayer::LogitPreprocess(LogitPreprocess::new(d, 0.05, -3.0, 3.0).unwrap()),
    ]
}

/// Layer input suited to `layer`'s domain.
pub fn layer_input<R: Rng + ?Sized>(layer: &FlowLayer, n: usize, rng: &mut R) -> Tensor {
    let d = layer.dim();
    match layer {
        FlowLayer::LogitPreprocess(_) => uniform(&[n, d], -2.5, 2.5, rng),
        _ => normal(&[n, d], rng),
    }
}

/// A random invertible stack of `len` layers at `D = 2` whose density keeps
/// essentially all mass inside `[−8, 8]²`.
pub fn random_model<R: Rng + ?Sized>(len: usize, rng: &mut R) -> FlowModel {
    let d = 2;
    let mut layers = Vec::with_capacity(len);
    for i in 0..len {
        let kind = if i == 0 { 1 } else { rng.random_range(0..4) };
        let layer = match kind {
            0 => FlowLayer::Actnorm(
                Actnorm::new(
                    (0..d).map(|_| rng.random_range(-0.3..0.3)).collect(),
                    (0..d).map(|_| rng.random_range(0.8..1.25)).collect(),
                )
                .unwrap(),
            ),
            1 => FlowLayer::FullyConnected(
                FullyConnected::new(conditioned(d, 0.75, 1.35, rng), (0..d).map(|_| rng.random_range(-0.3..0.3)).collect())
                    .unwrap(),
            ),
            2 => FlowLayer::SmoothLeakyRelu(SmoothLeakyRelu::new(d, rng.random_range(0.6..1.0)).unwrap()),
            _ => FlowLayer::AffineCoupling(AffineCoupling::with_output_scale(d, i % 2 == 1, 8, 0.2, rng).unwrap()),
        };
        layers.push(layer);
    }
    FlowModel::new(layers, 0).unwrap()
}

pub type BoxFn = Box<dyn for<'t> Fn(&[Var<'t>]) -> Result<Var<'t>>>;

/// A function on the tape with one random input instance.
pub struct Case {
    pub name: String,
    pub f: BoxFn,
    pub inputs: Vec<Tensor>,
}

impl Case {
    pub fn check<R: Rng + ?Sized>(self, rng: &mut R) -> (f64, f64) {
        check(self.f, &self.inputs, rng)
    }
}

pub const OPS: &[&str] = &[
    "add", "sub", "mul", "div", "neg", "scale", "add_scalar", "affine", "square", "exp", "ln",
    "softplus", "sigmoid", "tanh", "abs", "sum", "mean", "sq_norm", "matmul", "matmul_tn",
    "matmul_nt", "matmul_tt", "transpose", "expand_rows", "sum_rows", "expand_cols", "sum_cols",
    "slice_cols", "pad_cols", "concat_cols", "expand_scalar", "slogdet", "inverse_transpose",
];

/// Random instance of primitive op `name`.
pub fn op_case<R: Rng + ?Sized>(name: &str, rng: &mut R) -> Case {
    let n = rng.random_range(1..5);
    let d = rng.random_range(1..5);
    let k = rng.random_range(1..5);
    let c = rng.random_range(-2.0..2.0);
    let b = rng.random_range(-2.0..2.0);
    let nd = |rng: &mut R| normal(&[n, d], rng);
    let (f, inputs): (BoxFn, Vec<Tensor>) = match name {
        "add" => (Box::new(|v| v[0].add(v[1])), vec![nd(rng), nd(rng)]),
        "sub" => (Box::new(|v| v[0].sub(v[1])), vec![nd(rng), nd(rng)]),
        "mul" => (Box::new(|v| v[0].mul(v[1])), vec![nd(rng), nd(rng)]),
        "div" => (
            Box::new(|v| v[0].div(v[1])),
            vec![nd(rng), away_from_zero(&[n, d], 0.5, 2.0, rng)],
        ),
        "neg" => (Box::new(|v| Ok(v[0].neg())), vec![nd(rng)]),
        "scale" => (Box::new(move |v| Ok(v[0].scale(c))), vec![nd(rng)]),
        "add_scalar" => (Box::new(move |v| Ok(v[0].add_scalar(c))), vec![nd(rng)]),
        "affine" => (Box::new(move |v| Ok(v[0].affine(c, b))), vec![nd(rng)]),
        "square" => (Box::new(|v| Ok(v[0].square())), vec![nd(rng)]),
        "exp" => (Box::new(|v| Ok(v[0].exp())), vec![nd(rng)]),
        "ln" => (Box::new(|v| Ok(v[0].ln())), vec![uniform(&[n, d], 0.5, 3.0, rng)]),
        "softplus" => (Box::new(|v| Ok(v[0].softplus())), vec![nd(rng).scale(2.0)]),
        "sigmoid" => (Box::new(|v| Ok(v[0].sigmoid())), vec![nd(rng).scale(2.0)]),
        "tanh" => (Box::new(|v| Ok(v[0].tanh())), vec![nd(rng)]),
        "abs" => (Box::new(|v| Ok(v[0].abs())), vec![away_from_zero(&[n, d], 0.2, 2.0, rng)]),
        "sum" => (Box::new(|v| Ok(v[0].sum())), vec![nd(rng)]),
        "mean" => (Box::new(|v| Ok(v[0].mean())), vec![nd(rng)]),
        "sq_norm" => (Box::new(|v| Ok(v[0].sq_norm())), vec![nd(rng)]),
        "matmul" => (Box::new(|v| v[0].matmul(v[1])), vec![nd(rng), normal(&[d, k], rng)]),
        "matmul_tn" => (
            Box::new(|v| v[0].matmul_t(v[1], true, false)),
            vec![normal(&[d, n], rng), normal(&[d, k], rng)],
        ),
        "matmul_nt" => (
            Box::new(|v| v[0].matmul_t(v[1], false, true)),
            vec![nd(rng), normal(&[k, d], rng)],
        ),
        "matmul_tt" => (
            Box::new(|v| v[0].matmul_t(v[1], true, true)),
            vec![normal(&[d, n], rng), normal(&[k, d], rng)],
        ),
        "transpose" => (Box::new(|v| v[0].transpose()), vec![nd(rng)]),
        "expand_rows" => (Box::new(move |v| v[0].expand_rows(n)), vec![normal(&[d], rng)]),
        "sum_rows" => (Box::new(|v| v[0].sum_rows()), vec![nd(rng)]),
        "expand_cols" => (Box::new(move |v| v[0].expand_cols(d)), vec![normal(&[n], rng)]),
        "sum_cols" => (Box::new(|v| v[0].sum_cols()), vec![nd(rng)]),
        "slice_cols" => {
            let s = rng.random_range(0..d);
            let e = rng.random_range(s + 1..=d);
            (Box::new(move |v| v[0].slice_cols(s, e)), vec![nd(rng)])
        }
        "pad_cols" => {
            let s = rng.random_range(0..3);
            (Box::new(move |v| v[0].pad_cols(s, s + d + k)), vec![nd(rng)])
        }
        "concat_cols" => (Box::new(|v| v[0].concat_cols(v[1])), vec![nd(rng), normal(&[n, k], rng)]),
        "expand_scalar" => (
            Box::new(move |v| Ok(v[0].expand_scalar(&[n, d]))),
            vec![normal(&[1], rng)],
        ),
        "slogdet" => (Box::new(|v| v[0].slogdet()), vec![conditioned(d, 0.5, 1.5, rng)]),
        "inverse_transpose" => (
            Box::new(|v| v[0].inverse_transpose()),
            vec![conditioned(d, 0.5, 1.5, rng)],
        ),
        other => panic!("unknown op {other}"),
    };
    Case {
        name: name.into(),
        f,
        inputs,
    }
}

/// Random instances for every layer kind: the forward map and per-sample
/// log-determinant as one weighted scalar of `(x, θ)`, plus the parameter-only
/// log-determinant of each linear layer.
pub fn layer_cases<R: Rng + ?Sized>(rng: &mut R) -> Vec<Case> {
    let d = rng.random_range(2..5);
    let n = rng.random_range(1..4);
    let mut cases = Vec::new();
    for layer in random_layers(d, rng) {
        let x = layer_input(&layer, n, rng);
        let params: Vec<Tensor> = layer.params().into_iter().cloned().collect();
        let wz = normal(&[n, d], rng);
        let wl = normal(&[n], rng);
        let mut inputs = vec![x];
        inputs.extend(params.iter().cloned());
        let name = layer.kind().name().to_string();
        let l = layer.clone();
        cases.push(Case {
            name: format!("{name}.forward"),
            f: Box::new(move |v| {
                let tape = v[0].tape();
                let out = l.forward_tape(&v[1..], v[0])?;
                let mut s = out.z.mul(tape.constant(wz.clone()))?.sum();
                if let Some(ld) = out.logdet {
                    s = s.add(ld.mul(tape.constant(wl.clone()))?.sum())?;
                }
                Ok(s)
            }),
            inputs,
        });
        if layer.set() == ebflow::LayerSet::Linear {
            let l = layer.clone();
            cases.push(Case {
                name: format!("{name}.logdet"),
                f: Box::new(move |v| l.linear_logdet_tape(v)),
                inputs: params,
            });
        }
    }
    cases
}
