//! Finite-difference checks of every tape operation and of both model
//! families, plus the masked-gradient identities.

use proptest::prelude::*;
use rand::Rng;
use sdcs::autodiff::Tape;
use sdcs::cs::{BlockGeometry, Ratio};
use sdcs::gradcheck::{check, DEFAULT_STEP};
use sdcs::models::ModelSpec;
use sdcs::rng::{stream_rng, Stream};
use sdcs::selfcheck::{model_gradient_check, perturbed_model, random_batch};
use sdcs::tensor::Tensor;
use sdcs::train::{batch_gradients, masked_grad_check, stack_columns};
use sdcs::Result;

const TOL: f64 = 1e-6;

fn random(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = stream_rng(seed, Stream::Patches);
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect()).unwrap()
}

/// Checks `d/dp sum(w ⊙ f(p))` for a fixed random weighting `w`, so every
/// output entry contributes a distinct amount. `mask_mul` by a real-valued
/// tensor is an elementwise product with a constant.
fn check_op(inputs: Vec<Tensor>, build: impl Fn(&mut Tape, &[sdcs::Var]) -> Result<sdcs::Var>) {
    let run = |ps: &[Tensor], want_grads: bool| -> Result<(f64, u64, Vec<Tensor>)> {
        let mut t = Tape::new();
        let vars: Vec<_> = ps.iter().map(|p| t.leaf(p.clone())).collect();
        let out = build(&mut t, &vars)?;
        let w = random(t.value(out).shape(), 99);
        let prod = t.mask_mul(out, &w)?;
        let loss = t.sum(prod)?;
        let value = t.value(loss).item();
        let sig = t.branch_signature();
        let grads = if want_grads {
            t.backward(loss)?;
            vars.iter().map(|&v| t.grad(v).unwrap().clone()).collect()
        } else {
            vec![]
        };
        Ok((value, sig, grads))
    };
    let (_, _, analytic) = run(&inputs, true).unwrap();
    let names: Vec<String> = (0..inputs.len()).map(|i| format!("input{i}")).collect();
    let report = check(&names, &inputs, &analytic, DEFAULT_STEP, |ps| {
        run(ps, false).map(|(v, s, _)| (v, s))
    })
    .unwrap();
    assert!(report.passes(TOL), "{report:?}");
}

#[test]
fn matmul_and_transpose() {
    check_op(vec![random(&[3, 4], 1), random(&[4, 2], 2)], |t, v| t.matmul(v[0], v[1]));
    check_op(vec![random(&[3, 4], 3)], |t, v| t.transpose(v[0]));
}

#[test]
fn elementwise_ops() {
    check_op(vec![random(&[2, 3], 4), random(&[2, 3], 5)], |t, v| t.add(v[0], v[1]));
    check_op(vec![random(&[2, 3], 6), random(&[2, 3], 7)], |t, v| t.sub(v[0], v[1]));
    check_op(vec![random(&[2, 3], 8)], |t, v| t.scale(v[0], -1.7));
    check_op(vec![random(&[2, 3], 9), random(&[1], 10)], |t, v| t.mul_scalar(v[0], v[1]));
    check_op(vec![random(&[3, 4], 11), random(&[3], 12)], |t, v| t.add_bias(v[0], v[1]));
    check_op(vec![random(&[3, 4], 13)], |t, v| t.relu(v[0]));
}

#[test]
fn soft_threshold_in_both_arguments() {
    let theta = Tensor::scalar(0.2);
    check_op(vec![random(&[4, 4], 14), theta], |t, v| t.soft_threshold(v[0], v[1]));
}

#[test]
fn mse_loss_gradient() {
    let target = random(&[3, 2], 15);
    check_op(vec![random(&[3, 2], 16)], move |t, v| {
        let l = t.mse_loss(v[0], &target)?;
        t.scale(l, 1.0)
    });
}

#[test]
fn both_model_families_match_finite_differences() {
    let g = BlockGeometry::square(4).unwrap();
    let rm = Ratio::new(0.5).unwrap();
    for spec in [ModelSpec::Mlp { hidden: vec![64] }, ModelSpec::Unfolded { phases: 2 }] {
        for seed in 0..3 {
            let model = perturbed_model(g, rm, &spec, seed).unwrap();
            let x = random_batch(16, 3, &mut stream_rng(seed, Stream::Patches));
            let report = model_gradient_check(&model, &x, &[1, 4, 8], None).unwrap();
            assert!(report.passes(TOL), "{spec:?} seed {seed}: {report:?}");
        }
    }
}

#[test]
fn every_parameter_receives_gradient() {
    let g = BlockGeometry::square(4).unwrap();
    let rm = Ratio::new(0.5).unwrap();
    for spec in [ModelSpec::Mlp { hidden: vec![32] }, ModelSpec::Unfolded { phases: 3 }] {
        let model = perturbed_model(g, rm, &spec, 4).unwrap();
        let x = random_batch(16, 4, &mut stream_rng(4, Stream::Patches));
        let (_, grads) = batch_gradients(&model, &x, &[8, 8, 8, 8], None).unwrap();
        for ((name, _), grad) in model.named_tensors().iter().zip(&grads) {
            assert!(grad.max_abs() > 0.0, "{spec:?}: {name} has zero gradient");
        }
    }
}

#[test]
fn all_ones_masks_give_plain_average() {
    let g = BlockGeometry::square(4).unwrap();
    let model = perturbed_model(g, Ratio::new(1.0).unwrap(), &ModelSpec::Unfolded { phases: 1 }, 2).unwrap();
    let x = random_batch(16, 2, &mut stream_rng(2, Stream::Patches));
    let cols: Vec<Tensor> = (0..2).map(|j| Tensor::vector(x.column(j))).collect();
    let (_, joint) = batch_gradients(&model, &x, &[16, 16], None).unwrap();
    let mut avg: Vec<Tensor> = joint.iter().map(|t| Tensor::zeros(t.shape())).collect();
    for c in &cols {
        let (_, g1) = batch_gradients(&model, &stack_columns(&[c], 16).unwrap(), &[16], None).unwrap();
        for (a, g) in avg.iter_mut().zip(&g1) {
            a.accumulate(&g.map(|v| v / 2.0)).unwrap();
        }
    }
    for (a, b) in joint.iter().zip(&avg) {
        let dev = a.zip_map(b, "dev", |x, y| (x - y).abs()).unwrap().max_abs();
        assert!(dev < 1e-12, "{dev}");
    }
}

#[test]
fn mixed_ratio_rows_get_only_the_larger_sample() {
    // Rows in (ceil(0.1 N), ceil(0.5 N)] must equal the 50% sample's masked
    // gradient divided by the batch size.
    let g = BlockGeometry::square(8).unwrap();
    let rm = Ratio::new(0.5).unwrap();
    let model = perturbed_model(g, rm, &ModelSpec::Unfolded { phases: 2 }, 9).unwrap();
    let x = random_batch(64, 2, &mut stream_rng(9, Stream::Patches));
    let (lo, hi) = (model.active(Ratio::percent(10).unwrap()).unwrap(), model.active(rm).unwrap());
    let (_, joint) = batch_gradients(&model, &x, &[lo, hi], None).unwrap();
    let x_hi = stack_columns(&[&Tensor::vector(x.column(1))], 64).unwrap();
    let (_, single) = batch_gradients(&model, &x_hi, &[hi], None).unwrap();
    for j in lo..hi {
        for (a, b) in joint[0].row(j).iter().zip(single[0].row(j)) {
            assert!((a - b / 2.0).abs() < 1e-12);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn masked_gradient_identity_on_random_batches(
        seed in 0u64..1000,
        percents in proptest::collection::vec(prop_oneof![Just(1u32), Just(10), Just(25), Just(50), 1u32..=50], 1..5),
        mlp in any::<bool>(),
    ) {
        let g = BlockGeometry::square(4).unwrap();
        let spec = if mlp { ModelSpec::Mlp { hidden: vec![24] } } else { ModelSpec::Unfolded { phases: 2 } };
        let model = perturbed_model(g, Ratio::new(0.5).unwrap(), &spec, seed).unwrap();
        let x = random_batch(16, percents.len(), &mut stream_rng(seed, Stream::Patches));
        let blocks: Vec<Tensor> = (0..percents.len()).map(|j| Tensor::vector(x.column(j))).collect();
        let refs: Vec<&Tensor> = blocks.iter().collect();
        let ratios: Vec<Ratio> = percents.iter().map(|&p| Ratio::percent(p).unwrap()).collect();
        let report = masked_grad_check(&model, &refs, &ratios).unwrap();
        prop_assert!(report.passes(1e-12), "{:?}", report);
    }
}
