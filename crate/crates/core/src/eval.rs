//! Divergences against exact oracles, quadrature checks of the MaP
//! identities, density heatmaps and the step-time scaling benchmark.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Tape;
use crate::data::DensityOracle;
use crate::error::{Error, Result};
use crate::layers::gaussian_tensor;
use crate::model::{FlowModel, EVAL_CHUNK};
use crate::objectives::{self, Objective};
use crate::tensor::Tensor;

/// Sample mean with its standard error.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Estimate {
    pub value: f64,
    pub stderr: f64,
    pub n: usize,
}

impl Estimate {
    pub fn from_samples(v: &[f64]) -> Self {
        let n = v.len();
        let mean = v.iter().sum::<f64>() / n as f64;
        let var = if n > 1 {
            v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1) as f64
        } else {
            0.0
        };
        Self {
            value: mean,
            stderr: (var / n as f64).sqrt(),
            n,
        }
    }
}

/// `E_{p_x}[log p_x − log p]` over the rows of `x` (drawn from the oracle).
pub fn kl_monte_carlo_on<O: DensityOracle>(oracle: &O, model: &FlowModel, x: &Tensor) -> Result<Estimate> {
    let lp_x = oracle.log_pdf(x)?;
    let lp = model.log_prob(x)?;
    let d: Vec<f64> = lp_x.data().iter().zip(lp.data()).map(|(a, b)| a - b).collect();
    Ok(Estimate::from_samples(&d))
}

pub fn kl_monte_carlo<O: DensityOracle, R: Rng + ?Sized>(
    oracle: &O,
    model: &FlowModel,
    n: usize,
    rng: &mut R,
) -> Result<Estimate> {
    kl_monte_carlo_on(oracle, model, &oracle.sample(n, rng))
}

/// `E_{p_x}[½‖∇log p_x − ∇log p‖²]` over the rows of `x`. Never needs `log Z`.
pub fn fisher_on<O: DensityOracle>(oracle: &O, model: &FlowModel, x: &Tensor) -> Result<Estimate> {
    let s_x = oracle.score(x)?;
    let s = model.score(x)?;
    let d = x.cols();
    let v: Vec<f64> = (0..x.rows())
        .map(|r| {
            (0..d)
                .map(|j| (s_x.get(r, j) - s.get(r, j)).powi(2))
                .sum::<f64>()
                * 0.5
        })
        .collect();
    Ok(Estimate::from_samples(&v))
}

pub fn fisher<O: DensityOracle, R: Rng + ?Sized>(
    oracle: &O,
    model: &FlowModel,
    n: usize,
    rng: &mut R,
) -> Result<Estimate> {
    fisher_on(oracle, model, &oracle.sample(n, rng))
}

/// `E[−log p]` over the rows of `x`.
pub fn nll_on(model: &FlowModel, x: &Tensor) -> Result<Estimate> {
    let lp = model.log_prob(x)?;
    let v: Vec<f64> = lp.data().iter().map(|v| -v).collect();
    Ok(Estimate::from_samples(&v))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Method {
    MonteCarlo,
    Quadrature,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::MonteCarlo => "monte-carlo",
            Method::Quadrature => "quadrature",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DivergenceReport {
    pub kl: f64,
    pub kl_stderr: f64,
    pub fisher: f64,
    pub fisher_stderr: f64,
    pub nll: f64,
    pub n_eval: usize,
    pub method: Method,
}

impl DivergenceReport {
    pub const CSV_HEADER: &'static str = "method,n_eval,kl,kl_stderr,fisher,fisher_stderr,nll";

    pub fn csv(&self) -> String {
        format!(
            "{},{},{:e},{:e},{:e},{:e},{:e}",
            self.method.name(),
            self.n_eval,
            self.kl,
            self.kl_stderr,
            self.fisher,
            self.fisher_stderr,
            self.nll
        )
    }

    pub fn summary(&self) -> String {
        format!(
            "method      {}\nsamples     {}\nKL          {:.6e} ± {:.2e}\nFisher      {:.6e} ± {:.2e}\nNLL         {:.6e}\n",
            self.method.name(),
            self.n_eval,
            self.kl,
            self.kl_stderr,
            self.fisher,
            self.fisher_stderr,
            self.nll
        )
    }
}

pub fn divergence_report<O: DensityOracle, R: Rng + ?Sized>(
    oracle: &O,
    model: &FlowModel,
    n: usize,
    rng: &mut R,
) -> Result<DivergenceReport> {
    let x = oracle.sample(n, rng);
    let kl = kl_monte_carlo_on(oracle, model, &x)?;
    let f = fisher_on(oracle, model, &x)?;
    let nll = nll_on(model, &x)?;
    Ok(DivergenceReport {
        kl: kl.value,
        kl_stderr: kl.stderr,
        fisher: f.value,
        fisher_stderr: f.stderr,
        nll: nll.value,
        n_eval: n,
        method: Method::MonteCarlo,
    })
}

/// Tensor-product trapezoid grid on a 2D box.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Grid {
    pub lo: [f64; 2],
    pub hi: [f64; 2],
    pub n: usize,
}

impl Grid {
    pub const DEFAULT_HALF_WIDTH: f64 = 8.0;
    pub const DEFAULT_POINTS: usize = 400;

    pub fn square(lo: f64, hi: f64, n: usize) -> Self {
        Self {
            lo: [lo, lo],
            hi: [hi, hi],
            n,
        }
    }

    /// `[−8, 8]²` with 400 points per axis.
    pub fn standard() -> Self {
        Self::square(
            -Self::DEFAULT_HALF_WIDTH,
            Self::DEFAULT_HALF_WIDTH,
            Self::DEFAULT_POINTS,
        )
    }

    fn step(&self, axis: usize) -> f64 {
        (self.hi[axis] - self.lo[axis]) / (self.n - 1) as f64
    }

    pub fn axis(&self, axis: usize) -> Vec<f64> {
        let h = self.step(axis);
        (0..self.n).map(|i| self.lo[axis] + i as f64 * h).collect()
    }

    /// Grid points `[n², 2]`; row `i·n + j` is `(axis0[i], axis1[j])`.
    pub fn points(&self) -> Tensor {
        let (a, b) = (self.axis(0), self.axis(1));
        let mut data = Vec::with_capacity(2 * self.n * self.n);
        for &u in &a {
            for &v in &b {
                data.push(u);
                data.push(v);
            }
        }
        Tensor::new(vec![self.n * self.n, 2], data).expect("grid shape")
    }

    pub fn weights(&self) -> Vec<f64> {
        let w1 = |axis: usize| -> Vec<f64> {
            let h = self.step(axis);
            (0..self.n)
                .map(|i| if i == 0 || i + 1 == self.n { 0.5 * h } else { h })
                .collect()
        };
        let (a, b) = (w1(0), w1(1));
        a.iter()
            .flat_map(|wa| b.iter().map(move |wb| wa * wb))
            .collect()
    }

    pub fn integrate(&self, values: &[f64]) -> f64 {
        self.weights().iter().zip(values).map(|(w, v)| w * v).sum()
    }
}

/// `∫ p_x · f` on the grid, with `f` given pointwise and `p_x = exp(log_px)`.
/// Points where `p_x` underflows contribute nothing.
fn weighted(grid: &Grid, log_px: &[f64], f: impl Fn(usize) -> f64) -> f64 {
    let vals: Vec<f64> = log_px
        .iter()
        .enumerate()
        .map(|(i, &lp)| {
            let p = lp.exp();
            if p == 0.0 {
                0.0
            } else {
                p * f(i)
            }
        })
        .collect();
    grid.integrate(&vals)
}

pub fn kl_quadrature<O: DensityOracle>(oracle: &O, model: &FlowModel, grid: &Grid) -> Result<f64> {
    let x = grid.points();
    let lp_x = oracle.log_pdf(&x)?;
    let lp = model.log_prob(&x)?;
    Ok(weighted(grid, lp_x.data(), |i| lp_x.data()[i] - lp.data()[i]))
}

pub fn nll_quadrature<O: DensityOracle>(oracle: &O, model: &FlowModel, grid: &Grid) -> Result<f64> {
    let x = grid.points();
    let lp_x = oracle.log_pdf(&x)?;
    let lp = model.log_prob(&x)?;
    Ok(weighted(grid, lp_x.data(), |i| -lp.data()[i]))
}

/// Differential entropy `−∫ p_x log p_x`.
pub fn entropy_quadrature<O: DensityOracle>(oracle: &O, grid: &Grid) -> Result<f64> {
    let lp_x = oracle.log_pdf(&grid.points())?;
    Ok(weighted(grid, lp_x.data(), |i| -lp_x.data()[i]))
}

pub fn fisher_quadrature<O: DensityOracle>(oracle: &O, model: &FlowModel, grid: &Grid) -> Result<f64> {
    let x = grid.points();
    let lp_x = oracle.log_pdf(&x)?;
    let s_x = oracle.score(&x)?;
    let s = model.score(&x)?;
    Ok(weighted(grid, lp_x.data(), |i| {
        0.5 * ((s_x.get(i, 0) - s.get(i, 0)).powi(2) + (s_x.get(i, 1) - s.get(i, 1)).powi(2))
    }))
}

/// `∫ exp(−E(x)) dx` on the grid. Equals `exp(log Z)` when the grid holds the mass.
pub fn partition_quadrature(model: &FlowModel, grid: &Grid) -> Result<f64> {
    let e = model.energy(&grid.points())?;
    let vals: Vec<f64> = e.data().iter().map(|v| (-v).exp()).collect();
    Ok(grid.integrate(&vals))
}

/// Quadrature values behind the MaP identities for a model with `k ≥ 1`
/// preprocess layers, `p_0` the full model and `p_k` the head.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MapReport {
    /// `KL(p_x ‖ p_0)`, integrated over `x`.
    pub kl_full: f64,
    /// `KL(p_{x_k} ‖ p_k)`, integrated over `x_k`.
    pub kl_head: f64,
    /// `D_F(p_x ‖ p_0)`, integrated over `x`.
    pub fisher_full: f64,
    /// `E_{p_{x_k}}[½‖(∇ log p_{x_k}/p_k)ᵀ ∏J‖²]`, integrated over `x_k`.
    pub fisher_pushforward: f64,
    /// `D_F(p_{x_k} ‖ p_k)`, integrated over `x_k`.
    pub fisher_head: f64,
}

impl MapReport {
    pub fn kl_gap(&self) -> f64 {
        (self.kl_full - self.kl_head).abs()
    }

    pub fn fisher_gap(&self) -> f64 {
        (self.fisher_full - self.fisher_pushforward).abs()
    }
}

/// Per-point Jacobian `∂z/∂x` (row-major 2×2 per row) of `model` over
/// `layers`, and the gradient of the summed non-linear log-determinant.
fn jacobian_and_logdet_grad(
    model: &FlowModel,
    layers: std::ops::Range<usize>,
    x: &Tensor,
) -> Result<(Tensor, Tensor)> {
    let n = x.rows();
    let mut jac = Vec::with_capacity(4 * n);
    let mut dl = Vec::with_capacity(2 * n);
    let mut start = 0;
    while start < n {
        let end = (start + EVAL_CHUNK).min(n);
        let tape = Tape::new();
        let bound = model.bind_constant(&tape).with_range(layers.clone());
        let xv = tape.var(x.slice_rows(start, end));
        let pass = bound.push(xv)?;
        let rows: Vec<Tensor> = (0..2)
            .map(|j| {
                let zj = pass.z.slice_cols(j, j + 1)?.sum();
                Ok((*tape.grad(zj, &[xv], false)?[0].value()).clone())
            })
            .collect::<Result<_>>()?;
        let g = match pass.nonlinear_logdet {
            Some(ld) => (*tape.grad(ld.sum(), &[xv], false)?[0].value()).clone(),
            None => Tensor::zeros(&[end - start, 2]),
        };
        for r in 0..end - start {
            jac.extend_from_slice(rows[0].row(r));
            jac.extend_from_slice(rows[1].row(r));
            dl.extend_from_slice(g.row(r));
        }
        start = end;
    }
    Ok((
        Tensor::new(vec![n, 4], jac)?,
        Tensor::new(vec![n, 2], dl)?,
    ))
}

/// Quadrature check of the KL and Fisher relations between the full model
/// and its MaP head. The `x`-space integrals use `x_grid`; the `x_k`-space
/// integrals use a grid over the image of `x_grid`'s corners, with the
/// pushforward density obtained by change of variables through the
/// preprocess stack.
pub fn verify_map_identities<O: DensityOracle>(
    oracle: &O,
    model: &FlowModel,
    x_grid: &Grid,
) -> Result<MapReport> {
    if oracle.dim() != 2 || model.dim() != 2 {
        return Err(Error::Config("MaP quadrature checks need D = 2".into()));
    }
    let k = model.preprocess_count();
    if k == 0 {
        return Err(Error::MapWithoutPreprocess);
    }
    let (pre, head) = model.map_split()?;

    let x = x_grid.points();
    let lp_x = oracle.log_pdf(&x)?;
    let s_x = oracle.score(&x)?;
    let lp0 = model.log_prob(&x)?;
    let s0 = model.score(&x)?;
    let kl_full = weighted(x_grid, lp_x.data(), |i| lp_x.data()[i] - lp0.data()[i]);
    let fisher_full = weighted(x_grid, lp_x.data(), |i| {
        0.5 * ((s_x.get(i, 0) - s0.get(i, 0)).powi(2) + (s_x.get(i, 1) - s0.get(i, 1)).powi(2))
    });

    let corners = Tensor::from_rows(&[
        vec![x_grid.lo[0], x_grid.lo[1]],
        vec![x_grid.lo[0], x_grid.hi[1]],
        vec![x_grid.hi[0], x_grid.lo[1]],
        vec![x_grid.hi[0], x_grid.hi[1]],
    ])?;
    let zc = pre.forward(&corners)?;
    let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
    for r in 0..4 {
        for j in 0..2 {
            lo[j] = lo[j].min(zc.get(r, j));
            hi[j] = hi[j].max(zc.get(r, j));
        }
    }
    let z_grid = Grid {
        lo,
        hi,
        n: x_grid.n,
    };
    let z = z_grid.points();
    let xz = pre.inverse(&z)?;
    let (jac, dl) = jacobian_and_logdet_grad(&pre, 0..pre.len(), &xz)?;
    let lp_xz = oracle.log_pdf(&xz)?;
    let s_xz = oracle.score(&xz)?;
    let lpk = head.log_prob(&z)?;
    let sk = head.score(&z)?;

    let n = z.rows();
    let mut log_pz = vec![0.0; n];
    let mut diff = vec![[0.0; 2]; n];
    for i in 0..n {
        let j = jac.row(i);
        let det = j[0] * j[3] - j[1] * j[2];
        log_pz[i] = lp_xz.data()[i] - det.abs().ln();
        // ∇_z log p_{x_k} = J⁻ᵀ (∇_x log p_x − ∇_x log|det J|)
        let a = [s_xz.get(i, 0) - dl.get(i, 0), s_xz.get(i, 1) - dl.get(i, 1)];
        let s_k = [
            (j[3] * a[0] - j[2] * a[1]) / det,
            (-j[1] * a[0] + j[0] * a[1]) / det,
        ];
        diff[i] = [s_k[0] - sk.get(i, 0), s_k[1] - sk.get(i, 1)];
    }
    let kl_head = weighted(&z_grid, &log_pz, |i| log_pz[i] - lpk.data()[i]);
    let fisher_head = weighted(&z_grid, &log_pz, |i| {
        0.5 * (diff[i][0].powi(2) + diff[i][1].powi(2))
    });
    let fisher_pushforward = weighted(&z_grid, &log_pz, |i| {
        let j = jac.row(i);
        let d = diff[i];
        // row vector dᵀ J
        let v = [d[0] * j[0] + d[1] * j[2], d[0] * j[1] + d[1] * j[3]];
        0.5 * (v[0] * v[0] + v[1] * v[1])
    });
    Ok(MapReport {
        kl_full,
        kl_head,
        fisher_full,
        fisher_pushforward,
        fisher_head,
    })
}

/// `log p` of `model` on every grid point.
pub fn density_grid(model: &FlowModel, grid: &Grid) -> Result<Tensor> {
    model.log_prob(&grid.points())
}

/// Grayscale PGM (binary `P5`) of `exp(log_density)`, scaled to the maximum.
/// Axis 0 runs left to right, axis 1 bottom to top.
pub fn write_pgm(path: &Path, grid: &Grid, log_density: &[f64]) -> Result<()> {
    let n = grid.n;
    let max = log_density
        .iter()
        .copied()
        .filter(|v| v.is_finite())
        .fold(f64::NEG_INFINITY, f64::max);
    let mut pixels = vec![0u8; n * n];
    for i in 0..n {
        for j in 0..n {
            let v = log_density[i * n + j];
            let level = if v.is_finite() { (v - max).exp() } else { 0.0 };
            pixels[(n - 1 - j) * n + i] = (255.0 * level).round().clamp(0.0, 255.0) as u8;
        }
    }
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write!(f, "P5\n{n} {n}\n255\n")?;
    f.write_all(&pixels)?;
    f.flush()?;
    Ok(())
}

pub fn write_grid_csv(path: &Path, grid: &Grid, log_density: &[f64]) -> Result<()> {
    let pts = grid.points();
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "x0,x1,log_density")?;
    for (r, v) in log_density.iter().enumerate() {
        writeln!(f, "{},{},{}", pts.get(r, 0), pts.get(r, 1), v)?;
    }
    f.flush()?;
    Ok(())
}

/// Per-step timings over a dimension sweep and the fitted log-log slope.
#[derive(Clone, Debug, PartialEq)]
pub struct ScalingFit {
    pub dims: Vec<usize>,
    /// Median seconds per step.
    pub times: Vec<f64>,
    pub slope: f64,
}

impl ScalingFit {
    pub fn csv(&self) -> String {
        let mut s = String::from("dim,seconds\n");
        for (d, t) in self.dims.iter().zip(&self.times) {
            s.push_str(&format!("{d},{t:e}\n"));
        }
        s.push_str(&format!("# slope,{}\n", self.slope));
        s
    }
}

/// Least-squares slope of `ln t` against `ln D`.
pub fn loglog_slope(dims: &[usize], times: &[f64]) -> f64 {
    let xs: Vec<f64> = dims.iter().map(|&d| (d as f64).ln()).collect();
    let ys: Vec<f64> = times.iter().map(|t| t.ln()).collect();
    let n = xs.len() as f64;
    let (mx, my) = (xs.iter().sum::<f64>() / n, ys.iter().sum::<f64>() / n);
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    sxy / sxx
}

/// Median wall time of `f` over `reps` calls after `warmup` untimed calls.
pub fn median_time<F: FnMut() -> Result<()>>(mut f: F, reps: usize, warmup: usize) -> Result<f64> {
    for _ in 0..warmup {
        f()?;
    }
    let mut times = Vec::with_capacity(reps);
    for _ in 0..reps.max(1) {
        let t = Instant::now();
        f()?;
        times.push(t.elapsed().as_secs_f64());
    }
    times.sort_by(f64::total_cmp);
    Ok(times[times.len() / 2])
}

/// Settings for [`bench_step_time`].
#[derive(Clone, Debug, PartialEq)]
pub struct BenchConfig {
    pub dims: Vec<usize>,
    /// Number of (smooth leaky ReLU, fully-connected) pairs after the first
    /// fully-connected layer.
    pub depth: usize,
    pub batch: usize,
    pub reps: usize,
    pub warmup: usize,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            dims: vec![64, 128, 256, 512],
            depth: 2,
            batch: 16,
            reps: 21,
            warmup: 5,
            seed: 0,
        }
    }
}

/// Times one training step (loss, backward) of `objective` on fully-connected
/// flows at each dimension.
pub fn bench_step_time(objective: &Objective, config: &BenchConfig) -> Result<ScalingFit> {
    let mut times = Vec::with_capacity(config.dims.len());
    for &d in &config.dims {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ d as u64);
        let model = FlowModel::fully_connected(d, config.depth, 0.5, &mut rng)?;
        let x = gaussian_tensor(&[config.batch, d], 1.0, &mut rng);
        let t = median_time(
            || {
                objectives::loss_and_grad(&model, objective, &x, 0..model.len(), &mut rng)
                    .map(|_| ())
            },
            config.reps,
            config.warmup,
        )?;
        times.push(t);
    }
    Ok(ScalingFit {
        slope: loglog_slope(&config.dims, &times),
        dims: config.dims.clone(),
        times,
    })
}
