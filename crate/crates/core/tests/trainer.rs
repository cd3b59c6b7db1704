use ebflow::config::RunConfig;
use ebflow::data::{DatasetKind, DensityOracle, GaussianOracle, Oracle};
use ebflow::objectives::Objective;
use ebflow::trainer::{TrainConfig, Trainer};
use ebflow::{Error, FlowModel, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn small_config(objective: Objective, iterations: usize) -> TrainConfig {
    TrainConfig {
        objective,
        iterations,
        batch_size: 64,
        eval_every: 0,
        wall_clock: false,
        ..TrainConfig::default()
    }
}

fn small_model(seed: u64) -> FlowModel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    FlowModel::glow(2, 2, 8, &mut rng).unwrap()
}

#[test]
fn zero_iterations_leave_the_model_unchanged() {
    let model = small_model(0);
    let oracle = DatasetKind::Sine.oracle(100, 0.375, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let mut t = Trainer::new(model.clone(), small_config(Objective::Ml, 0)).unwrap();
    t.run(&oracle).unwrap();
    assert_eq!(t.step_count(), 0);
    assert_eq!(t.model().clone_parameters(), model.clone_parameters());
}

#[test]
fn identical_seeds_give_identical_trajectories() {
    let oracle = DatasetKind::Sine.oracle(100, 0.375, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let run = || {
        let cfg = TrainConfig {
            eval_every: 50,
            eval_samples: 500,
            ..small_config(Objective::Dsm { sigma: 0.1 }, 100)
        };
        let mut t = Trainer::new(small_model(2), cfg).unwrap();
        t.run(&oracle).unwrap();
        (t.history().to_vec(), t.model().clone_parameters())
    };
    let (h1, p1) = run();
    let (h2, p2) = run();
    assert_eq!(h1, h2);
    for (a, b) in p1.iter().zip(&p2) {
        let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(a), bits(b));
    }
    assert!(h1[49].kl.is_some() && h1[99].fisher.is_some() && h1[50].kl.is_none());
}

#[test]
fn ema_trails_first_step_by_one_minus_m() {
    let oracle = Oracle::Gaussian(GaussianOracle::standard(2));
    let model = small_model(3);
    let mut t = Trainer::new(model, TrainConfig { ema: 0.9, ..small_config(Objective::Ml, 1) }).unwrap();
    let x = oracle.sample(64, &mut ChaCha8Rng::seed_from_u64(4));
    t.step_on(&x).unwrap();
    // Actnorm initializes on the first batch; measure from that point.
    let mut initialized = small_model(3);
    initialized.initialize_actnorm(&x).unwrap();
    let theta0 = initialized.clone_parameters();
    let theta1 = t.model().clone_parameters();
    let shadow = t.ema_model().unwrap().clone_parameters();
    for ((a, b), s) in theta0.iter().zip(&theta1).zip(&shadow) {
        let lag = s.sub(a).unwrap().norm();
        let moved = b.sub(a).unwrap().norm();
        assert!((lag - 0.1 * moved).abs() < 1e-12, "{lag} vs {moved}");
    }
}

#[test]
fn non_finite_batch_aborts_with_step_index() {
    let mut t = Trainer::new(small_model(5), small_config(Objective::Ml, 10)).unwrap();
    let mut x = Tensor::zeros(&[4, 2]);
    x.set(0, 0, f64::NAN);
    match t.step_on(&x) {
        Err(Error::NonFinite { step, what, .. }) => {
            assert_eq!(step, 1);
            assert_eq!(what, "loss");
        }
        other => panic!("expected NonFinite, got {other:?}"),
    }
}

#[test]
fn identity_model_on_prior_data_stays_near_optimum() {
    // ML on N(0, I) data with an identity flow: already optimal, so the loss
    // sits at the entropy D/2·(1 + ln 2π) and parameters barely move.
    let oracle = Oracle::Gaussian(GaussianOracle::standard(2));
    let model = FlowModel::new(
        vec![ebflow::FlowLayer::FullyConnected(ebflow::layers::FullyConnected::identity(2))],
        0,
    )
    .unwrap();
    let cfg = TrainConfig {
        batch_size: 2000,
        lr: 1e-4,
        ..small_config(Objective::Ml, 50)
    };
    let mut t = Trainer::new(model.clone(), cfg).unwrap();
    t.run(&oracle).unwrap();
    let entropy = 1.0 + (2.0 * std::f64::consts::PI).ln();
    let mean_loss = t.history().iter().map(|r| r.loss).sum::<f64>() / 50.0;
    assert!((mean_loss - entropy).abs() < 0.02, "{mean_loss} vs {entropy}");
    let drift: f64 = t
        .model()
        .clone_parameters()
        .iter()
        .zip(model.clone_parameters())
        .map(|(a, b)| a.sub(&b).unwrap().norm())
        .sum();
    assert!(drift < 50.0 * 1e-4 * 4.0, "drift {drift}");
}

#[test]
fn map_training_only_updates_the_head() {
    let cfg = RunConfig::from_json(
        r#"{"preprocess": "logit", "map": true, "blocks": 2, "hidden": 8, "batch_size": 64,
            "iterations": 3, "eval_every": 0, "objective": "ssm", "logit_lo": -6, "logit_hi": 6}"#,
    )
    .unwrap();
    let model = cfg.build_model().unwrap();
    let mut t = Trainer::new(model.clone(), cfg.train_config().unwrap()).unwrap();
    t.run(&cfg.oracle().unwrap()).unwrap();
    assert_eq!(t.model().preprocess_count(), 1);
    assert_ne!(t.model().clone_parameters(), model.clone_parameters());
}

#[test]
fn map_without_preprocess_is_rejected() {
    let cfg = TrainConfig { map: true, ..small_config(Objective::Ml, 1) };
    assert!(matches!(Trainer::new(small_model(6), cfg), Err(Error::MapWithoutPreprocess)));
}
