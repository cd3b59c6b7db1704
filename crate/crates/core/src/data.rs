//! Synthetic targets with closed-form densities and scores.
//!
//! The 2D sets are smoothed with an isotropic Gaussian kernel around `M`
//! base samples, so both `log p_x` and `∇ log p_x` are available exactly.

use std::f64::consts::PI;
use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::layers::gaussian_tensor;
use crate::linalg::{self, Lu};
use crate::model::LN_2PI;
use crate::tensor::Tensor;

pub const DEFAULT_CENTERS: usize = 2_000;
pub const FULL_CENTERS: usize = 50_000;
pub const SIGMA_HAT: f64 = 0.375;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DatasetKind {
    Sine,
    Swirl,
    Checkerboard,
    /// Standard normal in `D` dimensions.
    Gaussian(usize),
}

impl DatasetKind {
    pub fn dim(self) -> usize {
        match self {
            DatasetKind::Gaussian(d) => d,
            _ => 2,
        }
    }

    /// The point of the parametric set at `(w, t, s)`. `t` and `s` are only
    /// used by the checkerboard. Panics for `Gaussian`.
    pub fn base_point(self, w: f64, t: f64, s: u8) -> [f64; 2] {
        match self {
            DatasetKind::Sine => [4.0 * w - 2.0, (12.0 * w - 6.0).sin()],
            DatasetKind::Swirl => {
                let r = PI * w.sqrt();
                [-r * r.cos(), r * r.sin()]
            }
            DatasetKind::Checkerboard => {
                let x = 4.0 * w - 2.0;
                let parity = x.floor().rem_euclid(2.0);
                [x, t - 2.0 * f64::from(s) + parity]
            }
            DatasetKind::Gaussian(_) => panic!("gaussian data has no parametric set"),
        }
    }

    /// `n` points from the un-smoothed generating set (or the standard normal).
    pub fn sample_base<R: Rng + ?Sized>(self, n: usize, rng: &mut R) -> Tensor {
        match self {
            DatasetKind::Gaussian(d) => gaussian_tensor(&[n, d], 1.0, rng),
            _ => {
                let mut data = Vec::with_capacity(2 * n);
                for _ in 0..n {
                    let w: f64 = rng.random();
                    let t: f64 = rng.random();
                    let s: u8 = rng.random_range(0..2);
                    data.extend(self.base_point(w, t, s));
                }
                Tensor::from_parts(vec![n, 2], data)
            }
        }
    }

    /// Exact oracle for this dataset: the smoothed mixture for the 2D sets,
    /// the standard normal for `Gaussian`.
    pub fn oracle<R: Rng + ?Sized>(self, centers: usize, sigma_hat: f64, rng: &mut R) -> Result<Oracle> {
        match self {
            DatasetKind::Gaussian(d) => Ok(Oracle::Gaussian(GaussianOracle::standard(d))),
            _ => Ok(Oracle::Mixture(MixtureOracle::new(
                self.sample_base(centers, rng),
                sigma_hat,
            )?)),
        }
    }
}

impl fmt::Display for DatasetKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DatasetKind::Sine => f.write_str("sine"),
            DatasetKind::Swirl => f.write_str("swirl"),
            DatasetKind::Checkerboard => f.write_str("checkerboard"),
            DatasetKind::Gaussian(d) => write!(f, "gauss-{d}"),
        }
    }
}

impl FromStr for DatasetKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sine" => Ok(DatasetKind::Sine),
            "swirl" => Ok(DatasetKind::Swirl),
            "checkerboard" => Ok(DatasetKind::Checkerboard),
            _ => s
                .strip_prefix("gauss-")
                .and_then(|d| d.parse().ok())
                .filter(|&d: &usize| d >= 1)
                .map(DatasetKind::Gaussian)
                .ok_or_else(|| {
                    Error::Config(format!(
                        "unknown dataset {s:?}; expected sine, swirl, checkerboard or gauss-D"
                    ))
                }),
        }
    }
}

/// A target density with closed-form log-pdf and score.
pub trait DensityOracle {
    fn dim(&self) -> usize;
    /// `log p_x` per row `[N]`.
    fn log_pdf(&self, x: &Tensor) -> Result<Tensor>;
    /// `∇ log p_x` per row `[N, D]`.
    fn score(&self, x: &Tensor) -> Result<Tensor>;
    fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Tensor
    where
        Self: Sized;

    fn pdf(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.log_pdf(x)?.map(f64::exp))
    }
}

fn check_dim(x: &Tensor, d: usize) -> Result<()> {
    if x.ndim() != 2 || x.cols() != d {
        return Err(Error::ShapeMismatch {
            op: "oracle_input",
            lhs: x.shape().to_vec(),
            rhs: vec![d],
        });
    }
    Ok(())
}

/// `p_x(x) = (1/M) Σᵢ N(x | x̂⁽ⁱ⁾, σ̂² I)`.
#[derive(Clone, Debug)]
pub struct MixtureOracle {
    centers: Tensor,
    sigma: f64,
}

impl MixtureOracle {
    pub fn new(centers: Tensor, sigma: f64) -> Result<Self> {
        if centers.ndim() != 2 || centers.rows() == 0 {
            return Err(Error::Config("mixture needs at least one center".into()));
        }
        if !(sigma > 0.0) {
            return Err(Error::Config(format!("sigma_hat must be positive, got {sigma}")));
        }
        Ok(Self { centers, sigma })
    }

    pub fn centers(&self) -> &Tensor {
        &self.centers
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    fn log_norm(&self) -> f64 {
        let d = self.centers.cols() as f64;
        -(self.centers.rows() as f64).ln() - 0.5 * d * (LN_2PI + 2.0 * self.sigma.ln())
    }

    /// Calls `f(row, log_pdf, score)` for each row of `x`.
    fn for_each_row(&self, x: &Tensor, mut f: impl FnMut(usize, f64, &[f64])) -> Result<()> {
        let d = self.dim();
        check_dim(x, d)?;
        let m = self.centers.rows();
        let inv2s2 = 0.5 / (self.sigma * self.sigma);
        let mut a = vec![0.0; m];
        let mut score = vec![0.0; d];
        for r in 0..x.rows() {
            let xr = x.row(r);
            let mut max = f64::NEG_INFINITY;
            for (i, ai) in a.iter_mut().enumerate() {
                let c = self.centers.row(i);
                let sq: f64 = xr.iter().zip(c).map(|(p, q)| (p - q) * (p - q)).sum();
                *ai = -sq * inv2s2;
                max = max.max(*ai);
            }
            let mut total = 0.0;
            score.iter_mut().for_each(|s| *s = 0.0);
            for (i, ai) in a.iter().enumerate() {
                let w = (ai - max).exp();
                total += w;
                for (s, (c, xv)) in score.iter_mut().zip(self.centers.row(i).iter().zip(xr)) {
                    *s += w * (c - xv);
                }
            }
            let scale = 1.0 / (total * self.sigma * self.sigma);
            score.iter_mut().for_each(|s| *s *= scale);
            f(r, max + total.ln() + self.log_norm(), &score);
        }
        Ok(())
    }

    /// Log-density on the tape, for checking the closed-form score.
    pub fn log_pdf_tape<'t>(&self, x: Var<'t>) -> Result<Var<'t>> {
        let tape = x.tape();
        let xv = x.value();
        check_dim(&xv, self.dim())?;
        let (n, m) = (xv.rows(), self.centers.rows());
        let inv2s2 = 0.5 / (self.sigma * self.sigma);
        let ct = tape.constant(self.centers.transpose()?);
        let c_sq: Vec<f64> = (0..m)
            .map(|i| self.centers.row(i).iter().map(|v| v * v).sum())
            .collect();
        let c_sq = tape.constant(Tensor::from_parts(
            vec![n, m],
            (0..n).flat_map(|_| c_sq.iter().copied()).collect(),
        ));
        let x_sq = x.square().sum_cols()?.expand_cols(m)?;
        let cross = x.matmul(ct)?.scale(2.0);
        let a = x_sq.sub(cross)?.add(c_sq)?.scale(-inv2s2);
        let av = a.value();
        let maxes: Vec<f64> = (0..n)
            .map(|r| av.row(r).iter().copied().fold(f64::NEG_INFINITY, f64::max))
            .collect();
        let shift = Tensor::from_parts(
            vec![n, m],
            maxes.iter().flat_map(|&v| std::iter::repeat_n(v, m)).collect(),
        );
        let lse = a
            .sub(tape.constant(shift))?
            .exp()
            .sum_cols()?
            .ln()
            .add(tape.constant(Tensor::vector(maxes)))?;
        Ok(lse.add_scalar(self.log_norm()))
    }
}

impl DensityOracle for MixtureOracle {
    fn dim(&self) -> usize {
        self.centers.cols()
    }

    fn log_pdf(&self, x: &Tensor) -> Result<Tensor> {
        let mut out = vec![0.0; x.rows()];
        self.for_each_row(x, |r, lp, _| out[r] = lp)?;
        Ok(Tensor::vector(out))
    }

    fn score(&self, x: &Tensor) -> Result<Tensor> {
        let d = self.dim();
        let mut out = vec![0.0; x.rows() * d];
        self.for_each_row(x, |r, _, s| out[r * d..(r + 1) * d].copy_from_slice(s))?;
        Ok(Tensor::from_parts(vec![x.rows(), d], out))
    }

    /// A uniformly chosen center plus `σ̂·z`.
    fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Tensor {
        let (m, d) = (self.centers.rows(), self.centers.cols());
        let z = gaussian_tensor(&[n, d], self.sigma, rng);
        let mut data = Vec::with_capacity(n * d);
        for r in 0..n {
            let c = self.centers.row(rng.random_range(0..m));
            data.extend(c.iter().zip(z.row(r)).map(|(a, b)| a + b));
        }
        Tensor::from_parts(vec![n, d], data)
    }
}

/// `N(μ, Σ)` with dense covariance.
#[derive(Clone, Debug)]
pub struct GaussianOracle {
    mean: Vec<f64>,
    cov: Tensor,
    precision: Tensor,
    chol: Tensor,
    log_det_cov: f64,
}

impl GaussianOracle {
    pub fn standard(d: usize) -> Self {
        Self::new(vec![0.0; d], Tensor::eye(d)).expect("identity covariance")
    }

    pub fn new(mean: Vec<f64>, cov: Tensor) -> Result<Self> {
        let d = mean.len();
        if cov.shape() != [d, d] {
            return Err(Error::ShapeMismatch {
                op: "gaussian_oracle",
                lhs: cov.shape().to_vec(),
                rhs: vec![d, d],
            });
        }
        let lu = Lu::factor(&cov)?;
        let (sign, log_det_cov) = lu.slogdet();
        if sign <= 0.0 {
            return Err(Error::Config("covariance must be positive definite".into()));
        }
        let chol = cholesky(&cov)?;
        Ok(Self {
            mean,
            precision: lu.inverse(),
            cov,
            chol,
            log_det_cov,
        })
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn cov(&self) -> &Tensor {
        &self.cov
    }

    fn centered(&self, x: &Tensor) -> Result<Tensor> {
        check_dim(x, self.mean.len())?;
        let mut c = x.clone();
        let d = self.mean.len();
        for (i, v) in c.data_mut().iter_mut().enumerate() {
            *v -= self.mean[i % d];
        }
        Ok(c)
    }
}

/// Lower-triangular `L` with `L Lᵀ = A`.
pub fn cholesky(a: &Tensor) -> Result<Tensor> {
    let n = a.rows();
    let mut l = Tensor::zeros(&[n, n]);
    for i in 0..n {
        for j in 0..=i {
            let s: f64 = (0..j).map(|k| l.get(i, k) * l.get(j, k)).sum();
            if i == j {
                let v = a.get(i, i) - s;
                if !(v > linalg::PIVOT_TOL) {
                    return Err(Error::Singular { pivot: i, value: v });
                }
                l.set(i, j, v.sqrt());
            } else {
                l.set(i, j, (a.get(i, j) - s) / l.get(j, j));
            }
        }
    }
    Ok(l)
}

impl DensityOracle for GaussianOracle {
    fn dim(&self) -> usize {
        self.mean.len()
    }

    fn log_pdf(&self, x: &Tensor) -> Result<Tensor> {
        let c = self.centered(x)?;
        let pc = c.matmul(&self.precision)?;
        let d = self.dim() as f64;
        let base = -0.5 * (d * LN_2PI + self.log_det_cov);
        Ok(Tensor::vector(
            (0..c.rows())
                .map(|r| {
                    let q: f64 = c.row(r).iter().zip(pc.row(r)).map(|(a, b)| a * b).sum();
                    base - 0.5 * q
                })
                .collect(),
        ))
    }

    fn score(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.centered(x)?.matmul(&self.precision)?.scale(-1.0))
    }

    fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Tensor {
        let d = self.dim();
        let z = gaussian_tensor(&[n, d], 1.0, rng);
        let mut x = z
            .matmul(&self.chol.transpose().expect("square"))
            .expect("matching dims");
        for (i, v) in x.data_mut().iter_mut().enumerate() {
            *v += self.mean[i % d];
        }
        x
    }
}

/// Either oracle, chosen by dataset.
#[derive(Clone, Debug)]
pub enum Oracle {
    Mixture(MixtureOracle),
    Gaussian(GaussianOracle),
}

impl DensityOracle for Oracle {
    fn dim(&self) -> usize {
        match self {
            Oracle::Mixture(o) => o.dim(),
            Oracle::Gaussian(o) => o.dim(),
        }
    }

    fn log_pdf(&self, x: &Tensor) -> Result<Tensor> {
        match self {
            Oracle::Mixture(o) => o.log_pdf(x),
            Oracle::Gaussian(o) => o.log_pdf(x),
        }
    }

    fn score(&self, x: &Tensor) -> Result<Tensor> {
        match self {
            Oracle::Mixture(o) => o.score(x),
            Oracle::Gaussian(o) => o.score(x),
        }
    }

    fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Tensor {
        match self {
            Oracle::Mixture(o) => o.sample(n, rng),
            Oracle::Gaussian(o) => o.sample(n, rng),
        }
    }
}

/// Adds `scale · U[0, 1)` noise to every entry.
pub fn dequantize_uniform<R: Rng + ?Sized>(x: &Tensor, scale: f64, rng: &mut R) -> Tensor {
    if scale == 0.0 {
        return x.clone();
    }
    let mut out = x.clone();
    out.data_mut()
        .iter_mut()
        .for_each(|v| *v += scale * rng.random::<f64>());
    out
}

/// Writes rows of `x` as CSV with header `x0,x1,…`.
pub fn write_points_csv(path: &Path, x: &Tensor) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    let header: Vec<String> = (0..x.cols()).map(|j| format!("x{j}")).collect();
    writeln!(w, "{}", header.join(","))?;
    for r in 0..x.rows() {
        let row: Vec<String> = x.row(r).iter().map(|v| format!("{v}")).collect();
        writeln!(w, "{}", row.join(","))?;
    }
    w.flush()?;
    Ok(())
}
