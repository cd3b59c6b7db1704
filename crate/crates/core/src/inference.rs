//! Sampling, Langevin imputation of masked coordinates, and the
//! importance-sampling estimate of the normalizing constant.

use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::layers::{gaussian_tensor, FlowLayer, FullyConnected};
use crate::model::FlowModel;
use crate::tensor::Tensor;

/// `n` draws `g⁻¹(u)` with `u ~ p_u`.
pub fn sample_inverse<R: Rng + ?Sized>(model: &FlowModel, n: usize, rng: &mut R) -> Result<Tensor> {
    model.sample(n, rng)
}

#[derive(Clone, Debug, PartialEq)]
pub struct LangevinConfig {
    pub step_size: f64,
    pub iterations: usize,
    /// `true` marks a free coordinate to be imputed.
    pub mask: Vec<bool>,
    /// Record every `thin`-th state; 0 records nothing.
    pub thin: usize,
    pub seed: u64,
}

impl LangevinConfig {
    pub fn validate(&self, dim: usize) -> Result<()> {
        if self.mask.len() != dim {
            return Err(Error::Config(format!(
                "mask has {} entries for a {dim}-dimensional model",
                self.mask.len()
            )));
        }
        if !self.mask.iter().any(|&m| m) || self.mask.iter().all(|&m| m) {
            return Err(Error::Config(
                "mask needs at least one masked and one observed coordinate".into(),
            ));
        }
        if !(self.step_size >= 0.0 && self.step_size.is_finite()) {
            return Err(Error::Config(format!("step size {} must be ≥ 0", self.step_size)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Imputation {
    /// Final states `[chains, D]`.
    pub state: Tensor,
    /// Thinned states, `(iteration, [chains, D])`; iteration 0 is the initial state.
    pub trajectory: Vec<(usize, Tensor)>,
}

impl Imputation {
    /// Trajectory as CSV with header `iter,chain,x0,x1,…`.
    pub fn write_trajectory_csv(&self, path: &Path) -> Result<()> {
        let d = self.state.cols();
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        let cols: Vec<String> = (0..d).map(|j| format!("x{j}")).collect();
        writeln!(f, "iter,chain,{}", cols.join(","))?;
        for (it, x) in &self.trajectory {
            for c in 0..x.rows() {
                let vals: Vec<String> = x.row(c).iter().map(|v| v.to_string()).collect();
                writeln!(f, "{it},{c},{}", vals.join(","))?;
            }
        }
        f.flush()?;
        Ok(())
    }
}

/// Unadjusted Langevin chains over the masked coordinates,
/// `x_M ← x_M − α ∂E/∂x_M + √(2α) z`, one chain per row of `observed`.
/// Masked entries of `observed` are ignored and start from a standard normal
/// draw; observed entries are never written.
pub fn impute_langevin(model: &FlowModel, observed: &Tensor, config: &LangevinConfig) -> Result<Imputation> {
    let d = model.dim();
    config.validate(d)?;
    if observed.ndim() != 2 || observed.cols() != d {
        return Err(Error::ShapeMismatch {
            op: "impute_langevin",
            lhs: observed.shape().to_vec(),
            rhs: vec![d],
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let free: Vec<usize> = (0..d).filter(|&j| config.mask[j]).collect();
    let mut x = observed.clone();
    for r in 0..x.rows() {
        for &j in &free {
            x.set(r, j, rng.sample(StandardNormal));
        }
    }
    let mut trajectory = Vec::new();
    if config.thin > 0 {
        trajectory.push((0, x.clone()));
    }
    let alpha = config.step_size;
    let noise = (2.0 * alpha).sqrt();
    for it in 1..=config.iterations {
        let tape = Tape::new();
        let bound = model.bind_constant(&tape);
        let xv = tape.var(x.clone());
        let e = bound.energy(xv)?;
        if !e.value().all_finite() {
            return Err(Error::NonFinite {
                what: "energy",
                step: it,
                last_checkpoint: None,
            });
        }
        let g = tape.grad(e.sum(), &[xv], false)?[0].value();
        for r in 0..x.rows() {
            for &j in &free {
                let z: f64 = rng.sample(StandardNormal);
                let v = x.get(r, j) - alpha * g.get(r, j) + noise * z;
                x.set(r, j, v);
            }
        }
        if config.thin > 0 && it % config.thin == 0 {
            trajectory.push((it, x.clone()));
        }
    }
    Ok(Imputation { state: x, trajectory })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct IsConfig {
    pub samples: usize,
    pub seed: u64,
}

/// Importance-sampling estimate of `Z = ∫ exp(−E)` under a standard normal proposal.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct IsEstimate {
    pub log_z: f64,
    /// Delta-method standard error of `log_z`.
    pub log_z_stderr: f64,
    pub z: f64,
    pub z_stderr: f64,
    pub samples: usize,
    pub dim: usize,
}

impl IsEstimate {
    pub const CSV_HEADER: &'static str = "estimate,stderr,log_estimate,log_stderr,samples,dim";

    pub fn csv(&self) -> String {
        format!(
            "{:e},{:e},{:e},{:e},{},{}",
            self.z, self.z_stderr, self.log_z, self.log_z_stderr, self.samples, self.dim
        )
    }
}

/// Log-weights `−E(x) − log q(x)` for `x ~ q = N(0, I)`.
fn log_weights(model: &FlowModel, x: &Tensor) -> Result<Vec<f64>> {
    let e = model.energy(x)?;
    let tape = Tape::new();
    let lq = model.prior().log_density(tape.constant(x.clone()))?.value();
    Ok(e.data().iter().zip(lq.data()).map(|(e, q)| -e - q).collect())
}

pub fn estimate_log_partition_is(model: &FlowModel, config: &IsConfig) -> Result<IsEstimate> {
    if config.samples == 0 {
        return Err(Error::Config("importance sampling needs at least one sample".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let x = gaussian_tensor(&[config.samples, model.dim()], 1.0, &mut rng);
    let lw = log_weights(model, &x)?;
    if lw.iter().any(|v| v.is_nan() || *v == f64::INFINITY) {
        return Err(Error::NonFinite {
            what: "importance weight",
            step: 0,
            last_checkpoint: None,
        });
    }
    let max = lw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return Err(Error::WeightUnderflow);
    }
    let m = config.samples as f64;
    let scaled: Vec<f64> = lw.iter().map(|v| (v - max).exp()).collect();
    let mean = scaled.iter().sum::<f64>() / m;
    let var = if config.samples > 1 {
        scaled.iter().map(|w| (w - mean) * (w - mean)).sum::<f64>() / (m - 1.0)
    } else {
        0.0
    };
    let rel = (var / m).sqrt() / mean;
    let log_z = max + mean.ln();
    let z = log_z.exp();
    Ok(IsEstimate {
        log_z,
        log_z_stderr: rel,
        z,
        z_stderr: z * rel,
        samples: config.samples,
        dim: model.dim(),
    })
}

/// Single fully-connected layer `g(x) = W x` with `W = I + (0.05/√D) G`,
/// `G` standard normal.
pub fn linear_gaussian_model<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Result<FlowModel> {
    let mut w = gaussian_tensor(&[dim, dim], 0.05 / (dim as f64).sqrt(), rng);
    for i in 0..dim {
        let v = w.get(i, i) + 1.0;
        w.set(i, i, v);
    }
    FlowModel::new(
        vec![FlowLayer::FullyConnected(FullyConnected::new(w, vec![0.0; dim])?)],
        0,
    )
}

/// `|d − d̂| / |d|` for `d = |det W|` and `d̂ = 1/Ẑ`, with `Ẑ` the
/// importance-sampling estimate of `∫ exp(−E) = 1/|det W|`.
pub fn determinant_relative_error(model: &FlowModel, config: &IsConfig) -> Result<f64> {
    let log_det = -model.log_partition()?;
    let est = estimate_log_partition_is(model, config)?;
    Ok((1.0 - (-est.log_z - log_det).exp()).abs())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn correlated() -> FlowModel {
        let w = Tensor::from_rows(&[vec![1.0, 0.0], vec![-0.8, 1.5]]).unwrap();
        FlowModel::new(
            vec![FlowLayer::FullyConnected(FullyConnected::new(w, vec![0.3, -0.2]).unwrap())],
            0,
        )
        .unwrap()
    }

    #[test]
    fn identity_model_is_estimate_is_exact() {
        let m = FlowModel::identity(3);
        let est = estimate_log_partition_is(&m, &IsConfig { samples: 500, seed: 4 }).unwrap();
        assert_eq!(est.z, 1.0);
        assert_eq!(est.z_stderr, 0.0);
        assert_eq!(est.log_z, 0.0);
    }

    #[test]
    fn zero_step_size_returns_initial_state() {
        let m = correlated();
        let cfg = LangevinConfig {
            step_size: 0.0,
            iterations: 50,
            mask: vec![false, true],
            thin: 1,
            seed: 9,
        };
        let obs = Tensor::from_rows(&[vec![0.5, 0.0], vec![-1.0, 0.0]]).unwrap();
        let out = impute_langevin(&m, &obs, &cfg).unwrap();
        assert_eq!(out.state.data(), out.trajectory[0].1.data());
        assert_eq!(out.trajectory.len(), 51);
    }

    #[test]
    fn observed_coordinates_never_change() {
        let m = correlated();
        let cfg = LangevinConfig {
            step_size: 0.05,
            iterations: 40,
            mask: vec![false, true],
            thin: 1,
            seed: 1,
        };
        let obs = Tensor::from_rows(&[vec![0.123456789, 7.0], vec![-2.5, 7.0]]).unwrap();
        let out = impute_langevin(&m, &obs, &cfg).unwrap();
        for (_, x) in &out.trajectory {
            assert_eq!(x.get(0, 0).to_bits(), 0.123456789f64.to_bits());
            assert_eq!(x.get(1, 0).to_bits(), (-2.5f64).to_bits());
        }
    }

    #[test]
    fn mask_validation() {
        let m = correlated();
        let obs = Tensor::zeros(&[1, 2]);
        for mask in [vec![true, true], vec![false, false], vec![true]] {
            let cfg = LangevinConfig {
                step_size: 0.01,
                iterations: 1,
                mask,
                thin: 0,
                seed: 0,
            };
            assert!(matches!(impute_langevin(&m, &obs, &cfg), Err(Error::Config(_))));
        }
    }

    #[test]
    fn is_estimate_tracks_exact_partition() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let m = linear_gaussian_model(10, &mut rng).unwrap();
        let est = estimate_log_partition_is(&m, &IsConfig { samples: 20_000, seed: 3 }).unwrap();
        let exact = m.log_partition().unwrap();
        assert!((est.log_z - exact).abs() < 4.0 * est.log_z_stderr + 1e-12);
    }

    #[test]
    fn trajectory_csv_layout() {
        let m = correlated();
        let cfg = LangevinConfig {
            step_size: 0.01,
            iterations: 4,
            mask: vec![true, false],
            thin: 2,
            seed: 0,
        };
        let out = impute_langevin(&m, &Tensor::zeros(&[2, 2]), &cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.csv");
        out.write_trajectory_csv(&p).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "iter,chain,x0,x1");
        assert_eq!(lines.len(), 1 + 3 * 2);
        assert!(lines[5].starts_with("4,0,"));
    }
}
