mod common;

use common::{check, layer_cases, normal, op_case, random_model, OPS};
use ebflow::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const FIRST: f64 = 1e-6;
const SECOND: f64 = 1e-4;

#[test]
fn primitive_ops_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for op in OPS {
        for _ in 0..10 {
            let case = op_case(op, &mut rng);
            let (e1, e2) = case.check(&mut rng);
            assert!(e1 < FIRST, "{op}: first-order error {e1:e}");
            assert!(e2 < SECOND, "{op}: second-order error {e2:e}");
        }
    }
}

#[test]
fn layers_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..10 {
        for case in layer_cases(&mut rng) {
            let name = case.name.clone();
            let (e1, e2) = case.check(&mut rng);
            assert!(e1 < FIRST, "{name}: first-order error {e1:e}");
            assert!(e2 < SECOND, "{name}: second-order error {e2:e}");
        }
    }
}

#[test]
fn model_energy_matches_finite_differences_in_input_and_parameters() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for len in 2..5 {
        let model = random_model(len, &mut rng);
        let x = normal(&[3, 2], &mut rng);
        let mut inputs = vec![x];
        inputs.extend(model.clone_parameters());
        let m = model.clone();
        let (e1, e2) = check(
            move |v: &[ebflow::Var<'_>]| {
                let mut mm = m.clone();
                let params: Vec<Tensor> = v[1..].iter().map(|p| (*p.value()).clone()).collect();
                mm.set_parameters(&params)?;
                energy_with_params(&mm, v)
            },
            &inputs,
            &mut rng,
        );
        assert!(e1 < FIRST, "L={len}: first-order error {e1:e}");
        assert!(e2 < SECOND, "L={len}: second-order error {e2:e}");
    }
}

/// Energy with parameters taken from the tape variables `v[1..]`.
fn energy_with_params<'t>(model: &ebflow::FlowModel, v: &[ebflow::Var<'t>]) -> ebflow::Result<ebflow::Var<'t>> {
    let mut z = v[0];
    let mut ld: Option<ebflow::Var<'t>> = None;
    let mut at = 1;
    for layer in model.layers() {
        let k = layer.params().len();
        let out = layer.forward_tape(&v[at..at + k], z)?;
        at += k;
        z = out.z;
        if let Some(l) = out.logdet {
            ld = Some(match ld {
                Some(acc) => acc.add(l)?,
                None => l,
            });
        }
    }
    let e = model.prior().log_density(z)?.neg();
    match ld {
        Some(l) => e.sub(l),
        None => Ok(e),
    }
}
