//! Scalable training with per-sample ratio masks, the fixed-ratio baseline,
//! RVG validation, and best-checkpoint selection.

use std::fmt;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{BackwardFault, Tape};
use crate::checkpoint::Checkpoint;
use crate::cs::{column_mask, default_validation_ratios, make_mask, BlockGeometry, Ratio};
use crate::data::{GrayImage, PatchDataset};
use crate::error::{Error, Result};
use crate::metrics::psnr;
use crate::models::ModelSpec;
use crate::optim::{adam_step, AdamState, DEFAULT_LR};
use crate::pipeline::{forward_batch, ScalableModel};
use crate::rng::{stream_rng, Stream};
use crate::tensor::Tensor;

pub const DEFAULT_BATCH_SIZE: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Strategy {
    /// A fresh ratio per sample, drawn uniformly from the ratio grid.
    Scalable,
    /// Every sample at the same ratio.
    Fixed(Ratio),
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Strategy::Scalable => write!(f, "scalable"),
            Strategy::Fixed(r) => write!(f, "fixed:{r}"),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    pub max_ratio: Ratio,
    /// Ratios the scalable strategy draws from.
    pub ratio_grid: Vec<Ratio>,
    pub seed: u64,
    pub spec: ModelSpec,
    pub geometry: BlockGeometry,
    pub strategy: Strategy,
    /// Ratio validation group used for model selection.
    pub rvg: Vec<Ratio>,
}

impl TrainConfig {
    /// Defaults: batch 32, one epoch, learning rate 1e-4, percent grid up to
    /// `max_ratio`, the default RVG restricted to `max_ratio`.
    pub fn new(geometry: BlockGeometry, spec: ModelSpec, max_ratio: Ratio) -> Self {
        TrainConfig {
            batch_size: DEFAULT_BATCH_SIZE,
            epochs: 1,
            lr: DEFAULT_LR,
            max_ratio,
            ratio_grid: percent_grid(max_ratio),
            seed: 0,
            spec,
            geometry,
            strategy: Strategy::Scalable,
            rvg: default_validation_ratios()
                .into_iter()
                .filter(|r| r.value() <= max_ratio.value())
                .collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Domain("batch size must be at least 1".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Domain("epochs must be at least 1".into()));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Domain(format!("learning rate must be positive, got {}", self.lr)));
        }
        self.spec.validate()?;
        if self.ratio_grid.is_empty() {
            return Err(Error::Domain("ratio grid is empty".into()));
        }
        if self.rvg.is_empty() {
            return Err(Error::Domain("validation group is empty".into()));
        }
        let check = |r: Ratio| make_mask(r, self.geometry, self.max_ratio).map(|_| ());
        for &r in self.ratio_grid.iter().chain(&self.rvg) {
            check(r)?;
        }
        if let Strategy::Fixed(r) = self.strategy {
            check(r)?;
        }
        Ok(())
    }
}

/// `{1%, 2%, ..., floor(100 R_M)%}`.
pub fn percent_grid(max_ratio: Ratio) -> Vec<Ratio> {
    let top = (max_ratio.value() * 100.0 + 1e-9).floor() as u32;
    (1..=top).map(|p| Ratio::percent(p).expect("percent in range")).collect()
}

/// Telemetry of one epoch.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochStats {
    /// Sample-weighted mean of the batch losses.
    pub loss: f64,
    pub samples: usize,
    pub batches: usize,
    /// For each row of `A`, the number of batches whose gradient touched it.
    pub row_updates: Vec<u64>,
    /// How often each training sample was used.
    pub visits: Vec<u32>,
}

/// Model, optimizer state and the random streams of one training run.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub config: TrainConfig,
    pub model: ScalableModel,
    pub optimizer: AdamState,
    shuffle_rng: ChaCha8Rng,
    ratio_rng: ChaCha8Rng,
}

impl Trainer {
    /// Fresh model drawn from the run seed's init stream.
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let model = ScalableModel::new(
            config.geometry,
            config.max_ratio,
            &config.spec,
            &mut stream_rng(config.seed, Stream::Init),
        )?;
        Trainer::with_model(config, model)
    }

    pub fn with_model(config: TrainConfig, model: ScalableModel) -> Result<Self> {
        config.validate()?;
        if model.geometry != config.geometry || model.max_ratio != config.max_ratio || model.recon.spec() != config.spec {
            return Err(Error::Contract("model does not match the training configuration".into()));
        }
        let optimizer = AdamState::new(&model.named_tensors());
        Ok(Trainer {
            shuffle_rng: stream_rng(config.seed, Stream::Shuffle),
            ratio_rng: stream_rng(config.seed, Stream::Ratios),
            config,
            model,
            optimizer,
        })
    }

    /// One pass over `data` in a freshly shuffled order, following the
    /// configured strategy.
    pub fn epoch(&mut self, data: &PatchDataset) -> Result<EpochStats> {
        if data.is_empty() {
            return Err(Error::EmptyDataset("training set has no patches".into()));
        }
        if self.config.batch_size > data.len() {
            return Err(Error::Domain(format!(
                "batch size {} exceeds the {} training patches",
                self.config.batch_size,
                data.len()
            )));
        }
        if data.geometry != self.model.geometry {
            return Err(Error::Contract(format!(
                "patches are {} but the model expects {}",
                data.geometry, self.model.geometry
            )));
        }
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut self.shuffle_rng);

        let mut stats = EpochStats {
            loss: 0.0,
            samples: 0,
            batches: 0,
            row_updates: vec![0; self.model.measurement_len()],
            visits: vec![0; data.len()],
        };
        let mut weighted = 0.0;
        for chunk in order.chunks(self.config.batch_size) {
            let blocks: Vec<&Tensor> = chunk.iter().map(|&i| &data.patches[i].block).collect();
            let ratios: Vec<Ratio> = chunk.iter().map(|_| self.draw_ratio()).collect();
            let loss = self.step(&blocks, &ratios, &mut stats.row_updates)?;
            for &i in chunk {
                stats.visits[i] += 1;
            }
            weighted += loss * chunk.len() as f64;
            stats.samples += chunk.len();
            stats.batches += 1;
        }
        stats.loss = weighted / stats.samples as f64;
        Ok(stats)
    }

    fn draw_ratio(&mut self) -> Ratio {
        match self.config.strategy {
            Strategy::Scalable => {
                let grid = &self.config.ratio_grid;
                grid[self.ratio_rng.random_range(0..grid.len())]
            }
            Strategy::Fixed(r) => r,
        }
    }

    /// One optimizer step on a batch with the given per-sample ratios.
    /// Returns the batch loss.
    pub fn step(&mut self, blocks: &[&Tensor], ratios: &[Ratio], row_updates: &mut [u64]) -> Result<f64> {
        let actives = ratios
            .iter()
            .map(|&r| self.model.active(r))
            .collect::<Result<Vec<_>>>()?;
        let x = stack_columns(blocks, self.model.geometry.n())?;
        let (loss, grads) = batch_gradients(&self.model, &x, &actives, None)?;
        for (j, count) in row_updates.iter_mut().enumerate() {
            if grads[0].row(j).iter().any(|&g| g != 0.0) {
                *count += 1;
            }
        }
        adam_step(&mut self.model.tensors_mut(), &grads, &mut self.optimizer, self.config.lr)?;
        self.model.recon.project();
        Ok(loss)
    }
}

/// Blocks as the columns of an `n x batch` matrix.
pub fn stack_columns(blocks: &[&Tensor], n: usize) -> Result<Tensor> {
    if let Some(b) = blocks.iter().find(|b| b.numel() != n) {
        return Err(Error::shape("stack_columns", &[n], b.shape()));
    }
    let cols: Vec<&[f64]> = blocks.iter().map(|b| b.data()).collect();
    Tensor::from_columns(n, &cols)
}

/// Batch MSE loss and its gradients with respect to every model tensor, in
/// [`ScalableModel::named_tensors`] order. Column `j` of `x` is sampled and
/// reconstructed with its first `actives[j]` measurements.
pub fn batch_gradients(
    model: &ScalableModel,
    x: &Tensor,
    actives: &[usize],
    fault: Option<BackwardFault>,
) -> Result<(f64, Vec<Tensor>)> {
    let mask = column_mask(model.measurement_len(), actives);
    let mut tape = Tape::with_fault(fault);
    let bound = model.bind(&mut tape, true);
    let xv = tape.constant(x.clone());
    let (_, xhat) = forward_batch(&mut tape, &bound, xv, &mask)?;
    let loss = tape.mse_loss(xhat, x)?;
    tape.backward(loss)?;
    let grads = bound
        .vars()
        .into_iter()
        .map(|v| tape.grad(v).cloned().expect("every leaf has a gradient after backward"))
        .collect();
    Ok((tape.value(loss).item(), grads))
}

/// Outcome of comparing batched masked gradients to explicit per-sample ones.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskedGradReport {
    pub max_dev_sampling: f64,
    pub max_dev_init: f64,
    pub max_dev_recon: f64,
    /// Largest active prefix in the batch.
    pub max_active: usize,
    /// Rows of `∇A` beyond `max_active` are all exactly zero.
    pub sampling_tail_zero: bool,
    /// Columns of `∇B` beyond `max_active` are all exactly zero.
    pub init_tail_zero: bool,
}

impl MaskedGradReport {
    pub fn max_deviation(&self) -> f64 {
        self.max_dev_sampling.max(self.max_dev_init).max(self.max_dev_recon)
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.max_deviation() < tol && self.sampling_tail_zero && self.init_tail_zero
    }
}

/// Checks the masked-gradient identities
/// `∇A L = (1/B) Σ M_i ⊙ ∇(M_i ⊙ A) L_i` and
/// `∇B L = (1/B) Σ M_i^T ⊙ ∇(M_i^T ⊙ B) L_i`.
///
/// The per-sample side builds `M_i ⊙ A` and `M_i^T ⊙ B` as explicit leaf
/// matrices and runs each sample alone with an all-ones mask.
pub fn masked_grad_check(model: &ScalableModel, blocks: &[&Tensor], ratios: &[Ratio]) -> Result<MaskedGradReport> {
    masked_grad_check_with(model, blocks, ratios, None)
}

pub fn masked_grad_check_with(
    model: &ScalableModel,
    blocks: &[&Tensor],
    ratios: &[Ratio],
    fault: Option<BackwardFault>,
) -> Result<MaskedGradReport> {
    if blocks.len() != ratios.len() || blocks.is_empty() {
        return Err(Error::Contract("need one ratio per block and at least one block".into()));
    }
    let n = model.geometry.n();
    let m = model.measurement_len();
    let masks = ratios
        .iter()
        .map(|&r| make_mask(r, model.geometry, model.max_ratio))
        .collect::<Result<Vec<_>>>()?;
    let actives: Vec<usize> = masks.iter().map(|mk| mk.active()).collect();
    let x = stack_columns(blocks, n)?;
    let (_, batched) = batch_gradients(model, &x, &actives, fault)?;

    let batch = blocks.len() as f64;
    let mut expected: Vec<Tensor> = batched.iter().map(|g| Tensor::zeros(g.shape())).collect();
    for (block, mask) in blocks.iter().zip(&masks) {
        let mut tape = Tape::with_fault(fault);
        let a_i = tape.leaf(mask.apply_rows(model.sampling.tensor())?);
        let b_i = tape.leaf(mask.apply_cols(model.init.tensor())?);
        let recon = model.recon.bind(&mut tape, true);
        let bound = crate::pipeline::BoundModel { a: a_i, b: b_i, recon };
        let xi = stack_columns(&[block], n)?;
        let xv = tape.constant(xi.clone());
        let ones = Tensor::filled(&[m, 1], 1.0);
        let (_, xhat) = forward_batch(&mut tape, &bound, xv, &ones)?;
        let loss = tape.mse_loss(xhat, &xi)?;
        tape.backward(loss)?;
        for (k, v) in bound.vars().into_iter().enumerate() {
            let g = tape.grad(v).expect("leaf gradient");
            let g = match k {
                0 => mask.apply_rows(g)?,
                1 => mask.apply_cols(g)?,
                _ => g.clone(),
            };
            expected[k].accumulate(&g.map(|v| v / batch))?;
        }
    }

    let dev = |a: &Tensor, b: &Tensor| -> f64 {
        a.data()
            .iter()
            .zip(b.data())
            .fold(0.0, |acc, (x, y)| acc.max((x - y).abs()))
    };
    let max_active = actives.iter().copied().max().unwrap_or(0);
    let ga = &batched[0];
    let gb = &batched[1];
    let sampling_tail_zero = (max_active..m).all(|j| ga.row(j).iter().all(|&v| v == 0.0));
    let init_tail_zero = (0..n).all(|i| gb.row(i)[max_active..].iter().all(|&v| v == 0.0));
    let max_dev_recon = batched[2..]
        .iter()
        .zip(&expected[2..])
        .fold(0.0, |acc: f64, (a, b)| acc.max(dev(a, b)));
    Ok(MaskedGradReport {
        max_dev_sampling: dev(ga, &expected[0]),
        max_dev_init: dev(gb, &expected[1]),
        max_dev_recon,
        max_active,
        sampling_tail_zero,
        init_tail_zero,
    })
}

/// Mean PSNR per RVG ratio over the validation images, plus the grand mean.
#[derive(Clone, Debug, PartialEq)]
pub struct RvgReport {
    pub ratios: Vec<Ratio>,
    pub psnr: Vec<f64>,
    pub mean: f64,
}

/// Samples and reconstructs every validation image at each ratio
/// (`R_S = R_R`), clamps to `[0, 1]`, and averages PSNR.
pub fn validate_rvg(model: &ScalableModel, val: &[GrayImage], rvg: &[Ratio]) -> Result<RvgReport> {
    if val.is_empty() {
        return Err(Error::EmptyDataset("validation set has no images".into()));
    }
    if rvg.is_empty() {
        return Err(Error::Domain("validation group is empty".into()));
    }
    let mut per_ratio = Vec::with_capacity(rvg.len());
    for &r in rvg {
        let mut total = 0.0;
        for img in val {
            let out = GrayImage::from_tensor_clamped(&model.reconstruct_image(&img.to_tensor(), r, r)?)?;
            total += psnr(img, &out)?;
        }
        per_ratio.push(total / val.len() as f64);
    }
    let mean = per_ratio.iter().sum::<f64>() / per_ratio.len() as f64;
    Ok(RvgReport {
        ratios: rvg.to_vec(),
        psnr: per_ratio,
        mean,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub psnr: Vec<f64>,
    pub mean_psnr: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Checkpoint of the epoch with the highest grand-mean RVG PSNR.
    pub best: Checkpoint,
    pub log: Vec<EpochLog>,
}

/// Runs `config.epochs` epochs, validating on the RVG after each and
/// keeping the best model. `on_epoch` sees every log row as it is produced.
pub fn train(
    config: &TrainConfig,
    data: &PatchDataset,
    val: &[GrayImage],
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    if val.is_empty() {
        return Err(Error::EmptyDataset("validation set has no images".into()));
    }
    let mut trainer = Trainer::new(config.clone())?;
    let mut best: Option<Checkpoint> = None;
    let mut log = Vec::with_capacity(config.epochs);
    for epoch in 1..=config.epochs {
        let stats = trainer.epoch(data)?;
        let report = validate_rvg(&trainer.model, val, &config.rvg)?;
        let row = EpochLog {
            epoch,
            loss: stats.loss,
            psnr: report.psnr,
            mean_psnr: report.mean,
        };
        on_epoch(&row);
        if best.as_ref().is_none_or(|b| row.mean_psnr > b.best_mean_psnr) {
            let mut ck = Checkpoint::new(trainer.model.clone());
            ck.optimizer = Some(trainer.optimizer.clone());
            ck.epoch = epoch;
            ck.best_mean_psnr = row.mean_psnr;
            ck.extra.insert("seed".into(), config.seed.to_string());
            ck.extra.insert("strategy".into(), config.strategy.to_string());
            ck.extra.insert("lr".into(), config.lr.to_string());
            ck.extra.insert("batch_size".into(), config.batch_size.to_string());
            best = Some(ck);
        }
        log.push(row);
    }
    Ok(TrainOutcome {
        best: best.expect("at least one epoch"),
        log,
    })
}

/// `epoch,loss,psnr_r1,...,psnr_rG,psnr_mean`.
pub fn log_csv(log: &[EpochLog], groups: usize) -> String {
    let mut out = String::from("epoch,loss");
    for g in 1..=groups {
        out.push_str(&format!(",psnr_r{g}"));
    }
    out.push_str(",psnr_mean\n");
    for row in log {
        out.push_str(&format!("{},{}", row.epoch, row.loss));
        for p in &row.psnr {
            out.push_str(&format!(",{p}"));
        }
        out.push_str(&format!(",{}\n", row.mean_psnr));
    }
    out
}

pub fn write_log_csv(log: &[EpochLog], groups: usize, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, log_csv(log, groups)).map_err(|e| Error::io(path, e))
}
