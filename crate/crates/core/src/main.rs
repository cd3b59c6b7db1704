use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use ebflow::checkpoint;
use ebflow::config::RunConfig;
use ebflow::data::{write_points_csv, DatasetKind, DensityOracle};
use ebflow::eval::{self, BenchConfig, DivergenceReport, Grid, Method};
use ebflow::inference::{self, IsConfig, LangevinConfig};
use ebflow::objectives::{Objective, Projection};
use ebflow::run::RunManifest;
use ebflow::trainer::Trainer;
use ebflow::{Error, FlowModel, Result, Tensor};

#[derive(Parser)]
#[command(name = "ebflow", version, about = "Train and evaluate energy-based normalizing flows")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write a run directory.
    Train(TrainArgs),
    /// KL / Fisher / NLL of a checkpoint against a dataset oracle.
    Eval(EvalArgs),
    /// Draw samples through the inverse flow.
    Sample(SampleArgs),
    /// Fill masked coordinates by Langevin dynamics on the energy.
    Impute(ImputeArgs),
    /// Per-step time of an objective over a dimension sweep.
    Bench(BenchArgs),
    /// Importance-sampling estimate of the normalizing constant.
    Zest(ZestArgs),
}

#[derive(Args)]
struct DataArgs {
    /// sine, swirl, checkerboard or gauss-D.
    #[arg(long)]
    dataset: Option<String>,
    /// Mixture centers in the oracle.
    #[arg(long = "M")]
    centers: Option<usize>,
    #[arg(long)]
    sigma_hat: Option<f64>,
    #[arg(long)]
    data_seed: Option<u64>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    objective: Option<String>,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    sigma: Option<f64>,
    #[arg(long)]
    xi: Option<f64>,
    #[arg(long)]
    eval_every: Option<usize>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    data: DataArgs,
    /// Monte Carlo sample count.
    #[arg(long, default_value_t = 100_000)]
    samples: usize,
    /// Also integrate on the [-8, 8]² grid (2D only).
    #[arg(long)]
    quadrature: bool,
    /// Grid points per axis for quadrature and heatmaps.
    #[arg(long, default_value_t = Grid::DEFAULT_POINTS)]
    grid: usize,
}

#[derive(Args)]
struct SampleArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Output CSV file.
    #[arg(long)]
    out: PathBuf,
    #[arg(short = 'n', long, default_value_t = 1000)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct ImputeArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Output trajectory CSV.
    #[arg(long)]
    out: PathBuf,
    /// Comma-separated values for every coordinate; masked entries are ignored.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    observed: Vec<f64>,
    /// Comma-separated 0/1 per coordinate, 1 = impute.
    #[arg(long, value_delimiter = ',')]
    mask: Vec<u8>,
    #[arg(long, default_value_t = 1)]
    chains: usize,
    #[arg(long, default_value_t = 1e-2)]
    step_size: f64,
    #[arg(long, default_value_t = 10_000)]
    iterations: usize,
    #[arg(long, default_value_t = 100)]
    thin: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct BenchArgs {
    /// Output CSV file.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "dsm")]
    objective: String,
    #[arg(long, default_value_t = 0.1)]
    sigma: f64,
    #[arg(long, default_value_t = 0.1)]
    xi: f64,
    #[arg(long, value_delimiter = ',', default_values_t = vec![64, 128, 256, 512])]
    dims: Vec<usize>,
    /// Non-linearity + fully-connected pairs after the first layer.
    #[arg(long, default_value_t = BenchConfig::default().depth)]
    depth: usize,
    #[arg(long, default_value_t = BenchConfig::default().batch)]
    batch: usize,
    #[arg(long, default_value_t = BenchConfig::default().reps)]
    reps: usize,
    #[arg(long, default_value_t = BenchConfig::default().warmup)]
    warmup: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct ZestArgs {
    /// Model to estimate; without it a random linear-Gaussian model of
    /// dimension --dim is used.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long, default_value_t = 50)]
    dim: usize,
    /// Output CSV file.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 200)]
    samples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Sample(a) => cmd_sample(a),
        Command::Impute(a) => cmd_impute(a),
        Command::Bench(a) => cmd_bench(a),
        Command::Zest(a) => cmd_zest(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn apply_data_args(cfg: &mut RunConfig, d: &DataArgs) {
    if let Some(v) = &d.dataset {
        cfg.dataset = v.clone();
    }
    if let Some(v) = d.centers {
        cfg.centers = v;
    }
    if let Some(v) = d.sigma_hat {
        cfg.sigma_hat = v;
    }
    if let Some(v) = d.data_seed {
        cfg.data_seed = v;
    }
}

const TRAIN_ARTIFACTS: [&str; 5] = [
    "config.json",
    "metrics.csv",
    "initial.ckpt",
    "final.ckpt",
    "final_ema.ckpt",
];

fn cmd_train(a: TrainArgs) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    apply_data_args(&mut cfg, &a.data);
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    if let Some(v) = &a.objective {
        cfg.objective = v.clone();
    }
    if let Some(v) = a.iterations {
        cfg.iterations = v;
    }
    if let Some(v) = a.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = a.lr {
        cfg.lr = v;
    }
    if a.sigma.is_some() {
        cfg.sigma = a.sigma;
    }
    if a.xi.is_some() {
        cfg.xi = a.xi;
    }
    if let Some(v) = a.eval_every {
        cfg.eval_every = v;
    }
    cfg.validate()?;

    let out = &a.out;
    let snapshot = serde_json::to_value(&cfg)?;
    let mut manifest = RunManifest::begin(out, "train", snapshot, cfg.seed)?;
    fs::write(out.join("config.json"), cfg.to_json() + "\n")?;
    let outcome = (|| -> Result<()> {
        let oracle = cfg.oracle()?;
        let model = cfg.build_model()?;
        let mut trainer = Trainer::new(model, cfg.train_config()?)?.with_output(out)?;
        trainer.run(&oracle)?;
        if let Some(last) = trainer.history().last() {
            eprintln!(
                "step {} loss {:.6e} grad_norm {:.3e}",
                last.step, last.loss, last.grad_norm
            );
        }
        Ok(())
    })();
    let checkpoint = if out.join("final_ema.ckpt").exists() {
        "final_ema.ckpt"
    } else {
        "initial.ckpt"
    };
    manifest.finish(
        out,
        outcome.as_ref().map(|_| ()).map_err(|e| e.to_string()),
        &TRAIN_ARTIFACTS,
        Some(checkpoint),
    )?;
    outcome
}

fn load_checkpoint(path: &Path) -> Result<FlowModel> {
    Ok(checkpoint::load(path)?.0)
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let model = load_checkpoint(&a.checkpoint)?;
    let mut cfg = RunConfig::default();
    apply_data_args(&mut cfg, &a.data);
    let kind: DatasetKind = cfg.dataset_kind()?;
    if kind.dim() != model.dim() {
        return Err(Error::ShapeMismatch {
            op: "eval_dataset",
            lhs: vec![kind.dim()],
            rhs: vec![model.dim()],
        });
    }
    let oracle = cfg.oracle()?;
    fs::create_dir_all(&a.out)?;
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let mut reports = vec![eval::divergence_report(&oracle, &model, a.samples, &mut rng)?];
    let grid = Grid::square(-Grid::DEFAULT_HALF_WIDTH, Grid::DEFAULT_HALF_WIDTH, a.grid);
    if a.quadrature {
        if model.dim() != 2 {
            return Err(Error::Config("quadrature needs a 2D dataset".into()));
        }
        reports.push(DivergenceReport {
            kl: eval::kl_quadrature(&oracle, &model, &grid)?,
            kl_stderr: 0.0,
            fisher: eval::fisher_quadrature(&oracle, &model, &grid)?,
            fisher_stderr: 0.0,
            nll: eval::nll_quadrature(&oracle, &model, &grid)?,
            n_eval: grid.n * grid.n,
            method: Method::Quadrature,
        });
    }
    let mut csv = format!("{}\n", DivergenceReport::CSV_HEADER);
    let mut summary = String::new();
    for r in &reports {
        csv.push_str(&r.csv());
        csv.push('\n');
        summary.push_str(&r.summary());
    }
    fs::write(a.out.join("report.csv"), csv)?;
    fs::write(a.out.join("summary.txt"), &summary)?;
    print!("{summary}");
    if model.dim() == 2 {
        let lp = eval::density_grid(&model, &grid)?;
        eval::write_pgm(&a.out.join("model_density.pgm"), &grid, lp.data())?;
        eval::write_grid_csv(&a.out.join("model_density.csv"), &grid, lp.data())?;
        let lo = oracle.log_pdf(&grid.points())?;
        eval::write_pgm(&a.out.join("oracle_density.pgm"), &grid, lo.data())?;
        eval::write_grid_csv(&a.out.join("oracle_density.csv"), &grid, lo.data())?;
    }
    Ok(())
}

fn cmd_sample(a: SampleArgs) -> Result<()> {
    let model = load_checkpoint(&a.checkpoint)?;
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let x = inference::sample_inverse(&model, a.n, &mut rng)?;
    write_points_csv(&a.out, &x)
}

fn cmd_impute(a: ImputeArgs) -> Result<()> {
    let model = load_checkpoint(&a.checkpoint)?;
    let d = model.dim();
    if a.observed.len() != d {
        return Err(Error::Config(format!(
            "--observed has {} values for a {d}-dimensional model",
            a.observed.len()
        )));
    }
    if a.chains == 0 {
        return Err(Error::Config("--chains must be at least 1".into()));
    }
    let config = LangevinConfig {
        step_size: a.step_size,
        iterations: a.iterations,
        mask: a.mask.iter().map(|&m| m != 0).collect(),
        thin: a.thin,
        seed: a.seed,
    };
    let rows = vec![a.observed.clone(); a.chains];
    let mut out = inference::impute_langevin(&model, &Tensor::from_rows(&rows)?, &config)?;
    if a.thin == 0 || !a.iterations.is_multiple_of(a.thin) {
        out.trajectory.push((a.iterations, out.state.clone()));
    }
    out.write_trajectory_csv(&a.out)
}

fn bench_objective(a: &BenchArgs) -> Result<Objective> {
    let obj = match a.objective.as_str() {
        "ml" => Objective::Ml,
        "sml" => Objective::Sml,
        "sm_exact" => Objective::SmExact,
        "ssm" => Objective::Ssm {
            n_v: 1,
            projection: Projection::Rademacher,
        },
        "dsm" => Objective::Dsm { sigma: a.sigma },
        "fdssm" => Objective::Fdssm { xi: a.xi },
        other => return Err(Error::Config(format!("unknown objective {other:?}"))),
    };
    obj.validate()?;
    Ok(obj)
}

fn cmd_bench(a: BenchArgs) -> Result<()> {
    let objective = bench_objective(&a)?;
    if a.dims.windows(2).any(|w| w[0] >= w[1]) || a.dims.len() < 2 {
        return Err(Error::Config("--dims must list at least two increasing values".into()));
    }
    let config = BenchConfig {
        dims: a.dims.clone(),
        depth: a.depth,
        batch: a.batch,
        reps: a.reps,
        warmup: a.warmup,
        seed: a.seed,
    };
    let fit = eval::bench_step_time(&objective, &config)?;
    fs::write(&a.out, fit.csv())?;
    println!("{} slope {:.3}", objective, fit.slope);
    Ok(())
}

fn cmd_zest(a: ZestArgs) -> Result<()> {
    let model = match &a.checkpoint {
        Some(p) => load_checkpoint(p)?,
        None => {
            let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
            inference::linear_gaussian_model(a.dim, &mut rng)?
        }
    };
    let est = inference::estimate_log_partition_is(
        &model,
        &IsConfig {
            samples: a.samples,
            seed: a.seed,
        },
    )?;
    fs::write(
        &a.out,
        format!("{}\n{}\n", ebflow::inference::IsEstimate::CSV_HEADER, est.csv()),
    )?;
    println!("Z ≈ {:e} ± {:e} (log Z {:.6} ± {:.2e})", est.z, est.z_stderr, est.log_z, est.log_z_stderr);
    Ok(())
}
