//! Training losses. Each maps a batch `[N, D]` to a scalar on the tape.
//!
//! Only `Ml` touches the normalizer; every other objective is built from the
//! energy alone, so no linear-layer determinant is ever formed for them.

use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::layers::gaussian_tensor;
use crate::model::{Bound, FlowModel};
use crate::tensor::Tensor;

/// Law of the SSM projection vectors `v` (both have `E[v vᵀ] = I`).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Projection {
    #[default]
    Rademacher,
    Gaussian,
}

impl Projection {
    pub fn sample<R: Rng + ?Sized>(self, n: usize, d: usize, rng: &mut R) -> Tensor {
        match self {
            Projection::Rademacher => {
                let data = (0..n * d)
                    .map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 })
                    .collect();
                Tensor::from_parts(vec![n, d], data)
            }
            Projection::Gaussian => gaussian_tensor(&[n, d], 1.0, rng),
        }
    }
}

impl FromStr for Projection {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rademacher" => Ok(Projection::Rademacher),
            "gaussian" => Ok(Projection::Gaussian),
            other => Err(Error::Config(format!(
                "unknown projection {other:?}; expected rademacher or gaussian"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Objective {
    Ml,
    Sml,
    SmExact,
    Ssm { n_v: usize, projection: Projection },
    Dsm { sigma: f64 },
    Fdssm { xi: f64 },
}

impl Objective {
    pub fn name(&self) -> &'static str {
        match self {
            Objective::Ml => "ml",
            Objective::Sml => "sml",
            Objective::SmExact => "sm_exact",
            Objective::Ssm { .. } => "ssm",
            Objective::Dsm { .. } => "dsm",
            Objective::Fdssm { .. } => "fdssm",
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            Objective::Ssm { n_v: 0, .. } => {
                Err(Error::Config("n_v must be at least 1".into()))
            }
            Objective::Dsm { sigma } if !(sigma > 0.0 && sigma.is_finite()) => {
                Err(Error::Config(format!("sigma must be positive, got {sigma}")))
            }
            Objective::Fdssm { xi } if !(xi > 0.0 && xi.is_finite()) => {
                Err(Error::Config(format!("xi must be positive, got {xi}")))
            }
            _ => Ok(()),
        }
    }

    /// Whether the loss needs the linear layers' determinants.
    pub fn uses_normalizer(&self) -> bool {
        matches!(self, Objective::Ml)
    }

    /// Whether the loss differentiates the energy with respect to the input.
    pub fn needs_input_grad(&self) -> bool {
        matches!(
            self,
            Objective::SmExact | Objective::Ssm { .. } | Objective::Dsm { .. }
        )
    }
}

impl fmt::Display for Objective {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Loss value with its named additive terms.
#[derive(Clone, Debug, PartialEq)]
pub struct LossReport {
    pub loss: f64,
    pub terms: Vec<(&'static str, f64)>,
    pub batch: usize,
}

impl LossReport {
    pub fn term(&self, name: &str) -> Option<f64> {
        self.terms.iter().find(|(n, _)| *n == name).map(|t| t.1)
    }
}

pub struct Loss<'t> {
    pub value: Var<'t>,
    pub report: LossReport,
}

impl<'t> Loss<'t> {
    fn new(value: Var<'t>, batch: usize, terms: Vec<(&'static str, f64)>) -> Self {
        let loss = value.item();
        Self {
            value,
            report: LossReport { loss, terms, batch },
        }
    }
}

fn check_batch(bound: &Bound<'_, '_>, x: &Tensor) -> Result<usize> {
    let d = bound.model().dim();
    if x.ndim() != 2 || x.cols() != d || x.rows() == 0 {
        return Err(Error::ShapeMismatch {
            op: "loss_batch",
            lhs: x.shape().to_vec(),
            rhs: vec![d],
        });
    }
    Ok(x.rows())
}

/// Row-wise sum of `a ⊙ b`.
fn row_dot<'t>(a: Var<'t>, b: Var<'t>) -> Result<Var<'t>> {
    a.mul(b)?.sum_cols()
}

/// `mean(−log p(x))` including the normalizer.
pub fn loss_ml<'t>(bound: &Bound<'_, 't>, x: &Tensor) -> Result<Loss<'t>> {
    let n = check_batch(bound, x)?;
    let tape = bound.tape();
    let xv = tape.constant(x.clone());
    let energy = bound.energy(xv)?.mean();
    let log_z = bound.linear_logdet()?.neg();
    let value = energy.add(log_z)?;
    Ok(Loss::new(
        value,
        n,
        vec![("energy", energy.item()), ("log_z", log_z.item())],
    ))
}

/// Mean data energy minus mean energy of `N` detached model samples.
pub fn loss_sml<'t, R: Rng + ?Sized>(bound: &Bound<'_, 't>, x: &Tensor, rng: &mut R) -> Result<Loss<'t>> {
    let n = check_batch(bound, x)?;
    let u = gaussian_tensor(&[n, x.cols()], 1.0, rng);
    let samples = bound.model().inverse_range(&u, bound.range())?;
    loss_sml_with(bound, x, &samples)
}

pub fn loss_sml_with<'t>(bound: &Bound<'_, 't>, x: &Tensor, samples: &Tensor) -> Result<Loss<'t>> {
    let n = check_batch(bound, x)?;
    check_batch(bound, samples)?;
    let tape = bound.tape();
    let data = bound.energy(tape.constant(x.clone()))?.mean();
    let model = bound.energy(tape.constant(samples.clone()))?.mean();
    let value = data.sub(model)?;
    Ok(Loss::new(
        value,
        n,
        vec![("data_energy", data.item()), ("model_energy", model.item())],
    ))
}

/// Exact score matching, `mean(½‖∂E/∂x‖² − tr ∂²E/∂x²)`, with the trace
/// assembled from `D` Hessian-vector products against basis vectors.
pub fn loss_sm_exact<'t>(bound: &Bound<'_, 't>, x: &Tensor) -> Result<Loss<'t>> {
    let n = check_batch(bound, x)?;
    let d = x.cols();
    let tape = bound.tape();
    let xv = tape.var(x.clone());
    let g = bound.energy_grad(xv, true)?;
    let norm = g.square().sum_cols()?.mean().scale(0.5);
    let mut trace: Option<Var<'t>> = None;
    for j in 0..d {
        let mut e = Tensor::zeros(&[n, d]);
        (0..n).for_each(|i| e.set(i, j, 1.0));
        let e = tape.constant(e);
        let gj = row_dot(g, e)?.sum();
        let hj = tape.grad(gj, &[xv], true)?[0];
        let diag = row_dot(hj, e)?;
        trace = Some(match trace {
            None => diag,
            Some(t) => t.add(diag)?,
        });
    }
    let trace = trace.expect("dim >= 1").mean();
    let value = norm.sub(trace)?;
    Ok(Loss::new(
        value,
        n,
        vec![("norm", norm.item()), ("trace", trace.item())],
    ))
}

/// Sliced score matching, `mean(½‖∂E/∂x‖² − vᵀ (∂²E/∂x²) v)` averaged over
/// `n_v` projections per sample.
pub fn loss_ssm<'t, R: Rng + ?Sized>(
    bound: &Bound<'_, 't>,
    x: &Tensor,
    n_v: usize,
    projection: Projection,
    rng: &mut R,
) -> Result<Loss<'t>> {
    let n = check_batch(bound, x)?;
    let vs: Vec<Tensor> = (0..n_v.max(1))
        .map(|_| projection.sample(n, x.cols(), rng))
        .collect();
    loss_ssm_with(bound, x, &vs)
}

pub fn loss_ssm_with<'t>(bound: &Bound<'_, 't>, x: &Tensor, projections: &[Tensor]) -> Result<Loss<'t>> {
    let n = check_batch(bound, x)?;
    if projections.is_empty() {
        return Err(Error::Config("n_v must be at least 1".into()));
    }
    let tape = bound.tape();
    let xv = tape.var(x.clone());
    let g = bound.energy_grad(xv, true)?;
    let norm = g.square().sum_cols()?.mean().scale(0.5);
    let mut hvp: Option<Var<'t>> = None;
    for v in projections {
        if v.shape() != x.shape() {
            return Err(Error::ShapeMismatch {
                op: "ssm_projection",
                lhs: v.shape().to_vec(),
                rhs: x.shape().to_vec(),
            });
        }
        let v = tape.constant(v.clone());
        let gv = row_dot(g, v)?.sum();
        let hv = tape.grad(gv, &[xv], true)?[0];
        let vhv = row_dot(hv, v)?.mean();
        hvp = Some(match hvp {
            None => vhv,
            Some(h) => h.add(vhv)?,
        });
    }
    let hvp = hvp
        .expect("non-empty projections")
        .scale(1.0 / projections.len() as f64);
    let value = norm.sub(hvp)?;
    Ok(Loss::new(
        value,
        n,
        vec![("norm", norm.item()), ("hvp", hvp.item())],
    ))
}

/// Denoising score matching with `x̃ = x + σ·z`:
/// `mean(½‖∂E(x̃)/∂x̃ + (x − x̃)/σ²‖²)`.
pub fn loss_dsm<'t, R: Rng + ?Sized>(bound: &Bound<'_, 't>, x: &Tensor, sigma: f64, rng: &mut R) -> Result<Loss<'t>> {
    check_batch(bound, x)?;
    let z = gaussian_tensor(x.shape(), 1.0, rng);
    loss_dsm_with(bound, x, sigma, &z)
}

pub fn loss_dsm_with<'t>(bound: &Bound<'_, 't>, x: &Tensor, sigma: f64, noise: &Tensor) -> Result<Loss<'t>> {
    let n = check_batch(bound, x)?;
    if !(sigma > 0.0) {
        return Err(Error::Config(format!("sigma must be positive, got {sigma}")));
    }
    let tape = bound.tape();
    let x_tilde = x.add(&noise.scale(sigma))?;
    let xv = tape.var(x_tilde.clone());
    let g = bound.energy_grad(xv, true)?;
    let target = tape.constant(x.sub(&x_tilde)?.scale(1.0 / (sigma * sigma)));
    let value = g.add(target)?.square().sum_cols()?.mean().scale(0.5);
    Ok(Loss::new(value, n, vec![("denoise", value.item())]))
}

/// Finite-difference sliced score matching with `ε` uniform on the
/// radius-`ξ` sphere:
/// `mean(2E(x) − E(x+ε) − E(x−ε) + ⅛(E(x+ε) − E(x−ε))²)`.
///
/// Its expectation is `(ξ²/D)` times the score-matching loss up to `O(ξ⁴)`.
pub fn loss_fdssm<'t, R: Rng + ?Sized>(bound: &Bound<'_, 't>, x: &Tensor, xi: f64, rng: &mut R) -> Result<Loss<'t>> {
    let n = check_batch(bound, x)?;
    let d = x.cols();
    let mut eps = gaussian_tensor(&[n, d], 1.0, rng);
    for i in 0..n {
        let norm = eps.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
        for j in 0..d {
            let v = eps.get(i, j);
            eps.set(i, j, xi * v / norm);
        }
    }
    loss_fdssm_with(bound, x, &eps)
}

pub fn loss_fdssm_with<'t>(bound: &Bound<'_, 't>, x: &Tensor, eps: &Tensor) -> Result<Loss<'t>> {
    let n = check_batch(bound, x)?;
    let tape = bound.tape();
    let e0 = bound.energy(tape.constant(x.clone()))?;
    let ep = bound.energy(tape.constant(x.add(eps)?))?;
    let em = bound.energy(tape.constant(x.sub(eps)?))?;
    let center = e0.scale(2.0).sub(ep)?.sub(em)?.mean();
    let gap = ep.sub(em)?.square().mean().scale(0.125);
    let value = center.add(gap)?;
    Ok(Loss::new(
        value,
        n,
        vec![("center", center.item()), ("gap", gap.item())],
    ))
}

/// Builds `objective` on `bound` for batch `x`.
pub fn loss<'t, R: Rng + ?Sized>(
    objective: &Objective,
    bound: &Bound<'_, 't>,
    x: &Tensor,
    rng: &mut R,
) -> Result<Loss<'t>> {
    objective.validate()?;
    match *objective {
        Objective::Ml => loss_ml(bound, x),
        Objective::Sml => loss_sml(bound, x, rng),
        Objective::SmExact => loss_sm_exact(bound, x),
        Objective::Ssm { n_v, projection } => loss_ssm(bound, x, n_v, projection, rng),
        Objective::Dsm { sigma } => loss_dsm(bound, x, sigma, rng),
        Objective::Fdssm { xi } => loss_fdssm(bound, x, xi, rng),
    }
}

/// Loss over `layers` of `model` and its gradient for every model parameter,
/// in flat parameter order. Parameters outside `layers` get zero gradient.
pub fn loss_and_grad<R: Rng + ?Sized>(
    model: &FlowModel,
    objective: &Objective,
    x: &Tensor,
    layers: Range<usize>,
    rng: &mut R,
) -> Result<(LossReport, Vec<Tensor>)> {
    let tape = Tape::new();
    let bound = model.bind(&tape, layers.clone()).with_range(layers);
    let l = loss(objective, &bound, x, rng)?;
    let params = bound.parameters();
    let grads = tape.grad(l.value, &params, false)?;
    Ok((
        l.report,
        grads.into_iter().map(|g| (*g.value()).clone()).collect(),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::{FlowLayer, FullyConnected};
    use crate::model::LN_2PI;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn pt(v: &[f64]) -> Tensor {
        Tensor::matrix(1, v.len(), v.to_vec()).unwrap()
    }

    fn diag_model(d: &[f64]) -> FlowModel {
        FlowModel::new(
            vec![FlowLayer::FullyConnected(
                FullyConnected::new(Tensor::diag(d), vec![0.0; d.len()]).unwrap(),
            )],
            0,
        )
        .unwrap()
    }

    fn eval<F>(m: &FlowModel, f: F) -> f64
    where
        F: for<'t> Fn(&Bound<'_, 't>) -> Result<Loss<'t>>,
    {
        let tape = Tape::new();
        let b = m.bind(&tape, 0..m.len());
        f(&b).unwrap().report.loss
    }

    #[test]
    fn ml_examples() {
        let id = FlowModel::identity(2);
        assert!((eval(&id, |b| loss_ml(b, &pt(&[0.0, 0.0]))) - LN_2PI).abs() < 1e-15);
        assert!((eval(&id, |b| loss_ml(b, &pt(&[1.0, 1.0]))) - LN_2PI - 1.0).abs() < 1e-15);
        let w = diag_model(&[2.0, 4.0]);
        let l = eval(&w, |b| loss_ml(b, &pt(&[0.0, 0.0])));
        assert!((l - (LN_2PI - 8f64.ln())).abs() < 1e-14);
    }

    #[test]
    fn sm_exact_examples() {
        let id = FlowModel::identity(2);
        assert!((eval(&id, |b| loss_sm_exact(b, &pt(&[0.0, 0.0]))) + 2.0).abs() < 1e-14);
        assert!((eval(&id, |b| loss_sm_exact(b, &pt(&[1.0, 0.0]))) + 1.5).abs() < 1e-14);
        let w = diag_model(&[2.0, 1.0]);
        assert!((eval(&w, |b| loss_sm_exact(b, &pt(&[0.0, 0.0]))) + 5.0).abs() < 1e-14);
    }

    #[test]
    fn ssm_examples() {
        let id = FlowModel::identity(2);
        let l = eval(&id, |b| loss_ssm_with(b, &pt(&[1.0, 0.0]), &[pt(&[1.0, 0.0])]));
        assert!((l + 0.5).abs() < 1e-14);
        let l = eval(&id, |b| loss_ssm_with(b, &pt(&[0.0, 0.0]), &[pt(&[0.0, 1.0])]));
        assert!((l + 1.0).abs() < 1e-14);
    }

    #[test]
    fn hutchinson_is_unbiased_for_fixed_hessian() {
        // tr(WᵀW) for W = [[2, 1], [0, 3]] is 14.
        let w = FlowModel::new(
            vec![FlowLayer::FullyConnected(
                FullyConnected::new(
                    Tensor::from_rows(&[vec![2.0, 1.0], vec![0.0, 3.0]]).unwrap(),
                    vec![0.0, 0.0],
                )
                .unwrap(),
            )],
            0,
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 100_000;
        let x = Tensor::zeros(&[n, 2]);
        let v = Projection::Rademacher.sample(n, 2, &mut rng);
        let tape = Tape::new();
        let b = w.bind_constant(&tape);
        let xv = tape.var(x);
        let g = b.energy_grad(xv, true).unwrap();
        let vc = tape.constant(v);
        let gv = row_dot(g, vc).unwrap().sum();
        let hv = tape.grad(gv, &[xv], false).unwrap()[0];
        let q = row_dot(hv, vc).unwrap().value();
        let mean = q.mean();
        let var = q.data().iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let se = (var / n as f64).sqrt();
        assert!((mean - 14.0).abs() < 3.0 * se, "{mean} ± {se}");
    }

    #[test]
    fn dsm_cancels_for_unit_gaussian_at_origin() {
        let id = FlowModel::identity(2);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..5 {
            let l = eval(&id, |b| loss_dsm(b, &pt(&[0.0, 0.0]), 1.0, &mut rng.clone()));
            assert!(l.abs() < 1e-28);
            rng.random::<f64>();
        }
    }

    #[test]
    fn fdssm_of_quadratic() {
        let id = FlowModel::identity(2);
        let x = pt(&[1.0, 2.0]);
        let eps = pt(&[0.1, -0.2]);
        // E = ½‖x‖² + c: 2E(x) − E(x+ε) − E(x−ε) = −‖ε‖², E(x+ε) − E(x−ε) = 2xᵀε.
        let expect = -0.05 + 0.125 * (2.0f64 * (0.1 - 0.4)).powi(2);
        let l = eval(&id, |b| loss_fdssm_with(b, &x, &eps));
        assert!((l - expect).abs() < 1e-13);
    }

    #[test]
    fn score_objectives_never_build_slogdet() {
        use crate::autodiff::OpTag;
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = FlowModel::fully_connected(3, 2, 0.4, &mut rng).unwrap();
        let x = gaussian_tensor(&[8, 3], 1.0, &mut rng);
        for obj in [
            Objective::Sml,
            Objective::Ssm {
                n_v: 1,
                projection: Projection::Rademacher,
            },
            Objective::Dsm { sigma: 0.1 },
            Objective::Fdssm { xi: 0.1 },
        ] {
            let tape = Tape::new();
            let b = m.bind(&tape, 0..m.len());
            let l = loss(&obj, &b, &x, &mut rng).unwrap();
            tape.grad(l.value, &b.parameters(), false).unwrap();
            assert!(!tape.contains_op(OpTag::Slogdet), "{obj}");
            assert!(!tape.contains_op(OpTag::InverseTranspose), "{obj}");
        }
        let tape = Tape::new();
        let b = m.bind(&tape, 0..m.len());
        loss_ml(&b, &x).unwrap();
        assert!(tape.contains_op(OpTag::Slogdet));
    }

    #[test]
    fn validation() {
        assert!(Objective::Dsm { sigma: 0.0 }.validate().is_err());
        assert!(Objective::Fdssm { xi: -1.0 }.validate().is_err());
        assert!(Objective::Ssm {
            n_v: 0,
            projection: Projection::Gaussian
        }
        .validate()
        .is_err());
        assert!("cauchy".parse::<Projection>().is_err());
    }
}
