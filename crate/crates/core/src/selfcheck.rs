//! Fast built-in verification suite at `N = 16`: finite-difference gradient
//! checks of both reconstructor families, the masked-gradient identities,
//! prefix consistency of the codec, and optimizer sanity.

use std::time::{Duration, Instant};

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{BackwardFault, Tape};
use crate::codec::MeasurementFile;
use crate::cs::{column_mask, BlockGeometry, Ratio};
use crate::error::Result;
use crate::gradcheck::{check, GradCheckReport, DEFAULT_STEP};
use crate::models::{ModelSpec, Reconstructor};
use crate::optim::{adam_step, AdamState};
use crate::pipeline::{forward_batch, ScalableModel};
use crate::rng::{stream_rng, Stream};
use crate::tensor::Tensor;
use crate::train::{batch_gradients, masked_grad_check_with};

pub const GRADIENT_TOLERANCE: f64 = 1e-6;
pub const MASKED_GRADIENT_TOLERANCE: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub elapsed: Duration,
}

/// A model whose every parameter is away from its structured initial value,
/// so no gradient vanishes by construction (zero synthesis or output layers).
pub fn perturbed_model(geometry: BlockGeometry, max_ratio: Ratio, spec: &ModelSpec, seed: u64) -> Result<ScalableModel> {
    let mut rng = stream_rng(seed, Stream::Init);
    let mut model = ScalableModel::new(geometry, max_ratio, spec, &mut rng)?;
    let noise = Normal::new(0.0, 0.1).expect("valid normal");
    for t in model.recon.params_mut() {
        for v in t.data_mut() {
            *v += noise.sample(&mut rng);
        }
    }
    if let Reconstructor::Unfolded(u) = &mut model.recon {
        for p in u.phases_mut() {
            p.theta = Tensor::scalar(0.02 + 0.05 * rng.random::<f64>());
        }
    }
    Ok(model)
}

/// Random blocks in `[0, 1]` as columns of an `N x batch` matrix.
pub fn random_batch<R: Rng + ?Sized>(n: usize, batch: usize, rng: &mut R) -> Tensor {
    Tensor::new(vec![n, batch], (0..n * batch).map(|_| rng.random::<f64>()).collect()).expect("batch shape")
}

/// Batch loss and branch signature with the model's tensors replaced by
/// `params` (in [`ScalableModel::named_tensors`] order).
fn loss_with(model: &ScalableModel, params: &[Tensor], x: &Tensor, actives: &[usize]) -> Result<(f64, u64)> {
    let mut m = model.clone();
    for (slot, p) in m.tensors_mut().into_iter().zip(params) {
        *slot = p.clone();
    }
    let mask = column_mask(m.measurement_len(), actives);
    let mut tape = Tape::new();
    let bound = m.bind(&mut tape, true);
    let xv = tape.constant(x.clone());
    let (_, xhat) = forward_batch(&mut tape, &bound, xv, &mask)?;
    let loss = tape.mse_loss(xhat, x)?;
    Ok((tape.value(loss).item(), tape.branch_signature()))
}

/// Central-difference check of every parameter gradient of the batch loss.
pub fn model_gradient_check(
    model: &ScalableModel,
    x: &Tensor,
    actives: &[usize],
    fault: Option<BackwardFault>,
) -> Result<GradCheckReport> {
    let (_, analytic) = batch_gradients(model, x, actives, fault)?;
    let named = model.named_tensors();
    let names: Vec<String> = named.iter().map(|(n, _)| n.clone()).collect();
    let params: Vec<Tensor> = named.iter().map(|(_, t)| (*t).clone()).collect();
    check(&names, &params, &analytic, DEFAULT_STEP, |ps| loss_with(model, ps, x, actives))
}

fn ratios(percents: &[u32]) -> Vec<Ratio> {
    percents.iter().map(|&p| Ratio::percent(p).expect("valid percent")).collect()
}

fn timed(name: &'static str, f: impl FnOnce() -> Result<(bool, String)>) -> CheckOutcome {
    let start = Instant::now();
    let (passed, detail) = f().unwrap_or_else(|e| (false, format!("error: {e}")));
    CheckOutcome {
        name,
        passed,
        detail,
        elapsed: start.elapsed(),
    }
}

fn gradient_property(spec: ModelSpec, seed: u64, fault: Option<BackwardFault>) -> Result<(bool, String)> {
    let g = BlockGeometry::square(4)?;
    let model = perturbed_model(g, Ratio::new(0.5)?, &spec, seed)?;
    let mut rng = stream_rng(seed, Stream::Patches);
    let x = random_batch(16, 4, &mut rng);
    let actives: Vec<usize> = ratios(&[10, 25, 50, 1]).iter().map(|&r| model.active(r)).collect::<Result<_>>()?;
    let report = model_gradient_check(&model, &x, &actives, fault)?;
    let worst = report.worst().expect("nonempty report");
    Ok((
        report.passes(GRADIENT_TOLERANCE),
        format!("max relative error {:.3e} ({})", worst.rel_error, worst.name),
    ))
}

/// Runs every property. `fault` corrupts one backward rule so the suite can
/// demonstrate that it catches it.
pub fn run(seed: u64, fault: Option<BackwardFault>) -> Vec<CheckOutcome> {
    let g = BlockGeometry::square(4).expect("geometry");
    let rm = Ratio::new(0.5).expect("ratio");
    let unfolded = ModelSpec::Unfolded { phases: 2 };
    let mut out = Vec::new();

    out.push(timed("gradient_fd_mlp", || {
        gradient_property(ModelSpec::Mlp { hidden: vec![64] }, seed, fault)
    }));
    out.push(timed("gradient_fd_unfolded", || gradient_property(unfolded.clone(), seed, fault)));

    out.push(timed("masked_gradient_identity", || {
        let model = perturbed_model(g, rm, &unfolded, seed)?;
        let mut rng = stream_rng(seed, Stream::Patches);
        let x = random_batch(16, 4, &mut rng);
        let blocks: Vec<Tensor> = (0..4).map(|j| Tensor::vector(x.column(j))).collect();
        let refs: Vec<&Tensor> = blocks.iter().collect();
        let mut worst: f64 = 0.0;
        let mut tails = true;
        for rs in [ratios(&[10, 10, 25, 10]), ratios(&[1, 50, 10, 25])] {
            let r = masked_grad_check_with(&model, &refs, &rs, fault)?;
            worst = worst.max(r.max_deviation());
            tails &= r.sampling_tail_zero && r.init_tail_zero;
        }
        Ok((
            worst < MASKED_GRADIENT_TOLERANCE && tails,
            format!("max deviation {worst:.3e}, tails zero: {tails}"),
        ))
    }));

    out.push(timed("masked_rows_frozen", || {
        let model = perturbed_model(g, rm, &unfolded, seed)?;
        let mut rng = stream_rng(seed, Stream::Patches);
        let x = random_batch(16, 3, &mut rng);
        let active = model.active(Ratio::percent(25)?)?;
        let (_, grads) = batch_gradients(&model, &x, &[active; 3], fault)?;
        let mut stepped = model.clone();
        let mut opt = AdamState::new(&model.named_tensors());
        adam_step(&mut stepped.tensors_mut(), &grads, &mut opt, 1e-2)?;
        let (a0, a1) = (model.sampling.tensor(), stepped.sampling.tensor());
        let (b0, b1) = (model.init.tensor(), stepped.init.tensor());
        let frozen = (active..a0.rows()).all(|j| a0.row(j) == a1.row(j))
            && (0..b0.rows()).all(|i| b0.row(i)[active..] == b1.row(i)[active..]);
        let moved = a0.row(0) != a1.row(0);
        Ok((
            frozen && moved,
            format!("rows >= {active} of A and columns >= {active} of B unchanged after a 25% step"),
        ))
    }));

    out.push(timed("prefix_consistency", || {
        let model = perturbed_model(g, rm, &unfolded, seed)?;
        let mut rng = stream_rng(seed, Stream::Patches);
        let image = Tensor::new(vec![10, 13], (0..130).map(|_| rng.random::<f64>()).collect())?;
        let set = ratios(&[1, 10, 25, 50]);
        let mut pairs = 0;
        for &rs in &set {
            let file = MeasurementFile::encode(&model, &image, rs)?;
            for &rr in set.iter().filter(|r| r.value() <= rs.value()) {
                let direct = MeasurementFile::encode(&model, &image, rr)?;
                let reference = direct.decode(&model, rr)?;
                let from_high = file.decode(&model, rr)?;
                let truncated = file.truncate(rr)?;
                if from_high != reference
                    || truncated.decode(&model, rr)? != reference
                    || truncated.to_bytes() != direct.to_bytes()
                {
                    return Ok((false, format!("mismatch decoding {rr} from a {rs} file")));
                }
                pairs += 1;
            }
        }
        Ok((true, format!("{pairs} ratio pairs bit-identical")))
    }));

    out.push(timed("adam_zero_gradient", || {
        let mut p = Tensor::vector(vec![0.25, -1.0, 3.5]);
        let before = p.clone();
        let mut st = AdamState::new(&[("p".to_string(), &p)]);
        for _ in 0..5 {
            adam_step(&mut [&mut p], &[Tensor::zeros(&[3])], &mut st, 1e-2)?;
        }
        Ok((p == before, "five zero-gradient steps leave parameters unchanged".into()))
    }));

    out
}
