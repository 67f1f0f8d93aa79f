//! The complete scalable model: sampling matrix `A`, initialization matrix
//! `B`, and reconstructor `Θ`, sharing one block geometry and maximum ratio.
//!
//! Training and inference run the same tape code. Inference binds every
//! tensor as a constant, so results are bit-identical to what the training
//! forward pass computes for the same inputs.

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::cs::{
    blockize, blocks_to_columns, column_mask, columns_to_blocks, deblockize, init_on_tape, make_mask,
    BlockGeometry, InitMatrix, MaskedSampling, Ratio, SamplingMatrix,
};
use crate::error::{Error, Result};
use crate::models::{BoundReconstructor, ModelSpec, Reconstructor};
use crate::tensor::Tensor;

pub const SAMPLING_NAME: &str = "sampling_matrix";
pub const INIT_NAME: &str = "init_matrix";

#[derive(Clone, Debug, PartialEq)]
pub struct ScalableModel {
    pub geometry: BlockGeometry,
    pub max_ratio: Ratio,
    pub sampling: SamplingMatrix,
    pub init: InitMatrix,
    pub recon: Reconstructor,
}

/// A [`ScalableModel`] registered on a tape.
#[derive(Clone, Debug)]
pub struct BoundModel {
    pub a: Var,
    pub b: Var,
    pub recon: BoundReconstructor,
}

impl BoundModel {
    /// `A`, `B`, then `Θ`, matching [`ScalableModel::named_tensors`].
    pub fn vars(&self) -> Vec<Var> {
        let mut v = vec![self.a, self.b];
        v.extend(self.recon.vars());
        v
    }
}

impl ScalableModel {
    /// Fresh model: Gaussian `A` and `B` (variance `1/N`) and the
    /// reconstructor's own initialization, all drawn from `rng` in that order.
    pub fn new<R: Rng + ?Sized>(
        geometry: BlockGeometry,
        max_ratio: Ratio,
        spec: &ModelSpec,
        rng: &mut R,
    ) -> Result<Self> {
        spec.validate()?;
        let sampling = SamplingMatrix::gaussian(geometry, max_ratio, rng);
        let init = InitMatrix::gaussian(geometry, max_ratio, rng);
        let recon = Reconstructor::new(spec, geometry.n(), rng)?;
        Ok(ScalableModel {
            geometry,
            max_ratio,
            sampling,
            init,
            recon,
        })
    }

    pub fn measurement_len(&self) -> usize {
        self.geometry.measurement_len(self.max_ratio)
    }

    /// Active measurement count for `ratio`, rejecting ratios above `R_M`.
    pub fn active(&self, ratio: Ratio) -> Result<usize> {
        Ok(make_mask(ratio, self.geometry, self.max_ratio)?.active())
    }

    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut v = vec![
            (SAMPLING_NAME.to_string(), self.sampling.tensor()),
            (INIT_NAME.to_string(), self.init.tensor()),
        ];
        v.extend(self.recon.param_list());
        v
    }

    /// Mutable tensors in [`ScalableModel::named_tensors`] order.
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = vec![self.sampling.tensor_mut(), self.init.tensor_mut()];
        v.extend(self.recon.params_mut());
        v
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundModel {
        let put = |tape: &mut Tape, t: &Tensor| {
            if trainable {
                tape.leaf(t.clone())
            } else {
                tape.constant(t.clone())
            }
        };
        let a = put(tape, self.sampling.tensor());
        let b = put(tape, self.init.tensor());
        let recon = self.recon.bind(tape, trainable);
        BoundModel { a, b, recon }
    }

    /// Measurements of the blocks in `columns` (`N x B`) at `active` rows,
    /// as an `ceil(R_M N) x B` matrix with zero tails.
    pub fn measure(&self, columns: &Tensor, active: usize) -> Result<Tensor> {
        self.expect_rows(columns, self.geometry.n(), "measure")?;
        let mut tape = Tape::new();
        let bound_a = tape.constant(self.sampling.tensor().clone());
        let x = tape.constant(columns.clone());
        let mask = column_mask(self.measurement_len(), &vec![active; columns.cols()]);
        let y = MaskedSampling { a: bound_a, mask: &mask }.apply(&mut tape, x)?;
        Ok(tape.value(y).clone())
    }

    /// Full reconstruction of every column of `y` using the first `active`
    /// measurements. Entries beyond `active` are ignored.
    pub fn reconstruct(&self, y: &Tensor, active: usize) -> Result<Tensor> {
        self.run_inference(y, active, true)
    }

    /// The linear estimate `X0 = (M_R^T ⊙ B) y` only, with the reconstructor
    /// switched off.
    pub fn initial_estimate(&self, y: &Tensor, active: usize) -> Result<Tensor> {
        self.run_inference(y, active, false)
    }

    fn run_inference(&self, y: &Tensor, active: usize, full: bool) -> Result<Tensor> {
        self.expect_rows(y, self.measurement_len(), "reconstruct")?;
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let yv = tape.constant(y.clone());
        let mask = column_mask(self.measurement_len(), &vec![active; y.cols()]);
        let x0 = init_on_tape(&mut tape, bound.b, yv, &mask)?;
        let out = if full {
            let sampling = MaskedSampling { a: bound.a, mask: &mask };
            bound.recon.forward(&mut tape, x0, yv, sampling)?
        } else {
            x0
        };
        Ok(tape.value(out).clone())
    }

    /// Samples `image` block-by-block at `rs` and reconstructs at `rr`.
    /// Output is cropped to the image size but not clamped.
    pub fn reconstruct_image(&self, image: &Tensor, rs: Ratio, rr: Ratio) -> Result<Tensor> {
        self.image_roundtrip(image, rs, rr, true)
    }

    /// Like [`ScalableModel::reconstruct_image`] but stops at the linear estimate.
    pub fn initial_image(&self, image: &Tensor, rs: Ratio, rr: Ratio) -> Result<Tensor> {
        self.image_roundtrip(image, rs, rr, false)
    }

    fn image_roundtrip(&self, image: &Tensor, rs: Ratio, rr: Ratio, full: bool) -> Result<Tensor> {
        let active_s = self.active(rs)?;
        let active_r = self.active(rr)?;
        if active_r > active_s {
            return Err(Error::Contract(format!(
                "reconstruction ratio {rr} exceeds sampling ratio {rs}"
            )));
        }
        let (blocks, layout) = blockize(image, self.geometry)?;
        let y = self.measure(&blocks_to_columns(&blocks)?, active_s)?;
        let x = self.run_inference(&y, active_r, full)?;
        deblockize(&columns_to_blocks(&x, self.geometry)?, &layout)
    }

    fn expect_rows(&self, t: &Tensor, rows: usize, op: &'static str) -> Result<()> {
        if t.shape().len() != 2 || t.rows() != rows {
            return Err(Error::shape(op, &[rows], t.shape()));
        }
        Ok(())
    }
}

/// Algorithm-1 forward pass for a training batch: sample with per-column
/// masks, initialize with the transposed masks, reconstruct with the same
/// masked `A`. Returns `(X0, X̂)`.
pub fn forward_batch(tape: &mut Tape, bound: &BoundModel, x: Var, mask: &Tensor) -> Result<(Var, Var)> {
    let sampling = MaskedSampling { a: bound.a, mask };
    let y = sampling.apply(tape, x)?;
    let x0 = init_on_tape(tape, bound.b, y, mask)?;
    let xhat = bound.recon.forward(tape, x0, y, sampling)?;
    Ok((x0, xhat))
}
