//! Block compressive sensing primitives: CS ratios, prefix ratio masks,
//! the trainable sampling and initialization matrices, and block plumbing.
//!
//! A sampling matrix `A` has `ceil(R_M * N)` rows. Sampling at ratio `R_S`
//! activates its first `ceil(R_S * N)` rows; the remaining measurement
//! entries are exactly zero. The initialization matrix `B` is `N x
//! ceil(R_M * N)` and is masked on columns with the transposed mask, so a
//! reconstruction at `R_R <= R_S` only ever reads the measurement prefix.

use std::fmt;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Tolerance used when snapping `ratio * N` to an integer before taking the
/// ceiling, so that e.g. `0.07 * 100` counts as 7 rows rather than 8.
const CEIL_SNAP: f64 = 1e-9;

/// A CS ratio in `(0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq, PartialOrd)]
pub struct Ratio(f64);

impl Ratio {
    pub fn new(value: f64) -> Result<Self> {
        if !(value > 0.0 && value <= 1.0) {
            return Err(Error::Domain(format!("CS ratio must lie in (0, 1], got {value}")));
        }
        Ok(Ratio(value))
    }

    pub fn percent(p: u32) -> Result<Self> {
        Ratio::new(f64::from(p) / 100.0)
    }

    pub fn value(self) -> f64 {
        self.0
    }

    /// `ceil(ratio * n)`.
    pub fn active_rows(self, n: usize) -> usize {
        active_rows(self, n)
    }
}

impl fmt::Display for Ratio {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl std::str::FromStr for Ratio {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let value = if let Some(p) = s.strip_suffix('%') {
            p.trim().parse::<f64>().map(|v| v / 100.0)
        } else {
            s.parse::<f64>()
        }
        .map_err(|e| Error::Domain(format!("invalid ratio '{s}': {e}")))?;
        Ratio::new(value)
    }
}

pub fn active_rows(ratio: Ratio, n: usize) -> usize {
    let exact = ratio.0 * n as f64;
    let nearest = exact.round();
    let rows = if (exact - nearest).abs() < CEIL_SNAP {
        nearest
    } else {
        exact.ceil()
    };
    (rows as usize).clamp(1, n)
}

/// The default ratio validation group: 1%, 4%, 10%, 25%, 30%, 40%, 50%.
pub fn default_validation_ratios() -> Vec<Ratio> {
    [1, 4, 10, 25, 30, 40, 50]
        .into_iter()
        .map(|p| Ratio::percent(p).expect("valid percent"))
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BlockGeometry {
    pub height: usize,
    pub width: usize,
}

impl BlockGeometry {
    pub fn new(height: usize, width: usize) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Domain("block dimensions must be positive".into()));
        }
        Ok(BlockGeometry { height, width })
    }

    pub fn square(side: usize) -> Result<Self> {
        BlockGeometry::new(side, side)
    }

    /// Pixels per block.
    pub fn n(&self) -> usize {
        self.height * self.width
    }

    /// Rows of `A` (columns of `B`) for a given maximum ratio.
    pub fn measurement_len(&self, max_ratio: Ratio) -> usize {
        max_ratio.active_rows(self.n())
    }
}

impl Default for BlockGeometry {
    fn default() -> Self {
        BlockGeometry {
            height: 33,
            width: 33,
        }
    }
}

impl fmt::Display for BlockGeometry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}", self.height, self.width)
    }
}

/// Zero-one mask over the rows of `A` whose first `active` rows are ones.
///
/// Stored as the active-row count; [`RatioMask::materialize`] produces the
/// explicit `rows x cols` matrix.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RatioMask {
    rows: usize,
    cols: usize,
    active: usize,
}

impl RatioMask {
    pub fn with_active(rows: usize, cols: usize, active: usize) -> Result<Self> {
        if active == 0 || active > rows {
            return Err(Error::Domain(format!(
                "active rows {active} outside [1, {rows}]"
            )));
        }
        Ok(RatioMask { rows, cols, active })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn active(&self) -> usize {
        self.active
    }

    pub fn materialize(&self) -> Tensor {
        let mut m = Tensor::zeros(&[self.rows, self.cols]);
        m.data_mut()[..self.active * self.cols].fill(1.0);
        m
    }

    /// The transposed mask, `cols x rows`, used on the initialization matrix.
    pub fn materialize_transposed(&self) -> Tensor {
        let mut m = Tensor::zeros(&[self.cols, self.rows]);
        for row in m.data_mut().chunks_mut(self.rows) {
            row[..self.active].fill(1.0);
        }
        m
    }

    /// `mask ⊙ a` without materializing the mask.
    pub fn apply_rows(&self, a: &Tensor) -> Result<Tensor> {
        self.expect_shape(a, [self.rows, self.cols], "apply_rows")?;
        let mut out = Tensor::zeros(a.shape());
        let keep = self.active * self.cols;
        out.data_mut()[..keep].copy_from_slice(&a.data()[..keep]);
        Ok(out)
    }

    /// `mask^T ⊙ b` without materializing the mask.
    pub fn apply_cols(&self, b: &Tensor) -> Result<Tensor> {
        self.expect_shape(b, [self.cols, self.rows], "apply_cols")?;
        let mut out = Tensor::zeros(b.shape());
        for (dst, src) in out
            .data_mut()
            .chunks_mut(self.rows)
            .zip(b.data().chunks(self.rows))
        {
            dst[..self.active].copy_from_slice(&src[..self.active]);
        }
        Ok(out)
    }

    fn expect_shape(&self, t: &Tensor, shape: [usize; 2], op: &'static str) -> Result<()> {
        if t.shape() != shape {
            return Err(Error::shape(op, &shape, t.shape()));
        }
        Ok(())
    }
}

/// Builds the prefix mask for sampling or reconstructing at `ratio`.
pub fn make_mask(ratio: Ratio, geometry: BlockGeometry, max_ratio: Ratio) -> Result<RatioMask> {
    if ratio.value() > max_ratio.value() + CEIL_SNAP {
        return Err(Error::RatioExceedsMax {
            ratio: ratio.value(),
            max: max_ratio.value(),
        });
    }
    let n = geometry.n();
    let rows = max_ratio.active_rows(n);
    let active = ratio.active_rows(n).min(rows);
    RatioMask::with_active(rows, n, active)
}

/// I.i.d. Gaussian matrix with zero mean and the given variance.
pub fn gaussian_init<R: Rng + ?Sized>(rows: usize, cols: usize, variance: f64, rng: &mut R) -> Tensor {
    let normal = Normal::new(0.0, variance.sqrt()).expect("variance must be finite and >= 0");
    let data = (0..rows * cols).map(|_| normal.sample(rng)).collect();
    Tensor::new(vec![rows, cols], data).expect("shape matches data")
}

/// Trainable sampling matrix `A`, `ceil(R_M N) x N`.
#[derive(Clone, Debug, PartialEq)]
pub struct SamplingMatrix(Tensor);

impl SamplingMatrix {
    pub fn new(a: Tensor, geometry: BlockGeometry, max_ratio: Ratio) -> Result<Self> {
        let expected = [geometry.measurement_len(max_ratio), geometry.n()];
        if a.shape() != expected {
            return Err(Error::shape("sampling matrix", &expected, a.shape()));
        }
        Ok(SamplingMatrix(a))
    }

    /// Gaussian initialization with variance `1/N`.
    pub fn gaussian<R: Rng + ?Sized>(geometry: BlockGeometry, max_ratio: Ratio, rng: &mut R) -> Self {
        let n = geometry.n();
        SamplingMatrix(gaussian_init(geometry.measurement_len(max_ratio), n, 1.0 / n as f64, rng))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn tensor_mut(&mut self) -> &mut Tensor {
        &mut self.0
    }
}

/// Trainable initialization matrix `B`, `N x ceil(R_M N)`.
#[derive(Clone, Debug, PartialEq)]
pub struct InitMatrix(Tensor);

impl InitMatrix {
    pub fn new(b: Tensor, geometry: BlockGeometry, max_ratio: Ratio) -> Result<Self> {
        let expected = [geometry.n(), geometry.measurement_len(max_ratio)];
        if b.shape() != expected {
            return Err(Error::shape("initialization matrix", &expected, b.shape()));
        }
        Ok(InitMatrix(b))
    }

    /// Gaussian initialization with variance `1/N`.
    pub fn gaussian<R: Rng + ?Sized>(geometry: BlockGeometry, max_ratio: Ratio, rng: &mut R) -> Self {
        let n = geometry.n();
        InitMatrix(gaussian_init(n, geometry.measurement_len(max_ratio), 1.0 / n as f64, rng))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn tensor_mut(&mut self) -> &mut Tensor {
        &mut self.0
    }
}

/// Measurement vector of one block with its zero tail.
#[derive(Clone, Debug, PartialEq)]
pub struct Measurement {
    pub y: Tensor,
    pub sampled_ratio: Ratio,
    /// Length of the valid prefix, `ceil(R_S N)`.
    pub active: usize,
}

/// Row-major flattening of an `H x L` block.
pub fn vec(block: &Tensor) -> Result<Tensor> {
    let (h, l) = block.dims2("vec")?;
    block.clone().reshape(&[h * l])
}

pub fn unvec(x: &Tensor, geometry: BlockGeometry) -> Result<Tensor> {
    if x.numel() != geometry.n() {
        return Err(Error::shape("unvec", &[geometry.n()], x.shape()));
    }
    x.clone().reshape(&[geometry.height, geometry.width])
}

/// `y = (M_S ⊙ A) vec(X)`, computed by slicing the active rows.
pub fn scalable_sample(block: &Tensor, a: &SamplingMatrix, mask: &RatioMask) -> Result<Measurement> {
    let at = a.tensor();
    if mask.rows() != at.rows() || mask.cols() != at.cols() {
        return Err(Error::shape("scalable_sample", &[mask.rows(), mask.cols()], at.shape()));
    }
    if block.numel() != at.cols() {
        return Err(Error::shape("scalable_sample", &[at.cols()], block.shape()));
    }
    let x = block.data();
    let mut y = vec![0.0; at.rows()];
    for (j, yj) in y.iter_mut().enumerate().take(mask.active()) {
        let mut acc = 0.0;
        for (&aj, &xj) in at.row(j).iter().zip(x) {
            acc += aj * xj;
        }
        *yj = acc;
    }
    let n = at.cols();
    Ok(Measurement {
        y: Tensor::vector(y),
        sampled_ratio: Ratio::new(mask.active() as f64 / n as f64)?,
        active: mask.active(),
    })
}

/// `X0 = unvec((M_R^T ⊙ B) y)`. Requires `R_R <= R_S`.
pub fn scalable_init(
    y: &Measurement,
    b: &InitMatrix,
    mask: &RatioMask,
    geometry: BlockGeometry,
) -> Result<Tensor> {
    if mask.active() > y.active {
        return Err(Error::Contract(format!(
            "reconstruction uses {} measurements but only {} were sampled (R_R > R_S)",
            mask.active(),
            y.active
        )));
    }
    let bt = b.tensor();
    if bt.rows() != geometry.n() || bt.cols() != y.y.numel() || mask.rows() != bt.cols() {
        return Err(Error::shape("scalable_init", &[geometry.n(), y.y.numel()], bt.shape()));
    }
    let yv = y.y.data();
    let x0: Vec<f64> = (0..bt.rows())
        .map(|i| {
            let mut acc = 0.0;
            for (&bik, &yk) in bt.row(i)[..mask.active()].iter().zip(yv) {
                acc += bik * yk;
            }
            acc
        })
        .collect();
    unvec(&Tensor::vector(x0), geometry)
}

/// `rows x actives.len()` matrix whose column `j` keeps the first
/// `actives[j]` entries. Per-sample masks applied to a batch of column vectors.
pub fn column_mask(rows: usize, actives: &[usize]) -> Tensor {
    let cols = actives.len();
    let mut m = Tensor::zeros(&[rows, cols]);
    let data = m.data_mut();
    for (j, &active) in actives.iter().enumerate() {
        for i in 0..active.min(rows) {
            data[i * cols + j] = 1.0;
        }
    }
    m
}

/// The sampling operator `x -> (M_j ⊙ A) x_j` applied column-wise to a batch,
/// with column `j` restricted to its own active prefix.
#[derive(Clone, Copy, Debug)]
pub struct MaskedSampling<'a> {
    pub a: Var,
    pub mask: &'a Tensor,
}

impl MaskedSampling<'_> {
    /// `(M ⊙ A) x`, per column.
    pub fn apply(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let ax = tape.matmul(self.a, x)?;
        tape.mask_mul(ax, self.mask)
    }

    /// `(M ⊙ A)^T r`, per column. Entries of `r` outside the active prefix
    /// are zeroed before the product.
    pub fn adjoint(&self, tape: &mut Tape, r: Var) -> Result<Var> {
        let rm = tape.mask_mul(r, self.mask)?;
        let at = tape.transpose(self.a)?;
        tape.matmul(at, rm)
    }
}

/// Batched initialization `X0_j = (M_j^T ⊙ B) y_j`.
pub fn init_on_tape(tape: &mut Tape, b: Var, y: Var, mask: &Tensor) -> Result<Var> {
    let ym = tape.mask_mul(y, mask)?;
    tape.matmul(b, ym)
}

/// Placement of an image on the block grid, with the bottom/right padding
/// needed to reach whole blocks.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BlockLayout {
    pub geometry: BlockGeometry,
    pub image_height: usize,
    pub image_width: usize,
    pub grid_rows: usize,
    pub grid_cols: usize,
}

impl BlockLayout {
    pub fn for_image(image_height: usize, image_width: usize, geometry: BlockGeometry) -> Result<Self> {
        if image_height == 0 || image_width == 0 {
            return Err(Error::Domain("image must have positive size".into()));
        }
        Ok(BlockLayout {
            geometry,
            image_height,
            image_width,
            grid_rows: image_height.div_ceil(geometry.height),
            grid_cols: image_width.div_ceil(geometry.width),
        })
    }

    pub fn block_count(&self) -> usize {
        self.grid_rows * self.grid_cols
    }

    pub fn pad_rows(&self) -> usize {
        self.grid_rows * self.geometry.height - self.image_height
    }

    pub fn pad_cols(&self) -> usize {
        self.grid_cols * self.geometry.width - self.image_width
    }
}

/// Splits an `h x w` image into row-major ordered blocks, zero-padding the
/// bottom and right edges.
pub fn blockize(image: &Tensor, geometry: BlockGeometry) -> Result<(Vec<Tensor>, BlockLayout)> {
    let (h, w) = image.dims2("blockize")?;
    let layout = BlockLayout::for_image(h, w, geometry)?;
    let (bh, bw) = (geometry.height, geometry.width);
    let mut blocks = Vec::with_capacity(layout.block_count());
    for gr in 0..layout.grid_rows {
        for gc in 0..layout.grid_cols {
            let mut block = Tensor::zeros(&[bh, bw]);
            for r in 0..bh {
                let y = gr * bh + r;
                if y >= h {
                    break;
                }
                for c in 0..bw {
                    let x = gc * bw + c;
                    if x >= w {
                        break;
                    }
                    block.set(r, c, image.get(y, x));
                }
            }
            blocks.push(block);
        }
    }
    Ok((blocks, layout))
}

/// Inverse of [`blockize`]: reassembles blocks and crops the padding.
pub fn deblockize(blocks: &[Tensor], layout: &BlockLayout) -> Result<Tensor> {
    if blocks.len() != layout.block_count() {
        return Err(Error::shape("deblockize", &[layout.block_count()], &[blocks.len()]));
    }
    let (bh, bw) = (layout.geometry.height, layout.geometry.width);
    let (h, w) = (layout.image_height, layout.image_width);
    let mut image = Tensor::zeros(&[h, w]);
    for (idx, block) in blocks.iter().enumerate() {
        if block.numel() != bh * bw {
            return Err(Error::shape("deblockize", &[bh, bw], block.shape()));
        }
        let (gr, gc) = (idx / layout.grid_cols, idx % layout.grid_cols);
        for r in 0..bh {
            let y = gr * bh + r;
            if y >= h {
                break;
            }
            for c in 0..bw {
                let x = gc * bw + c;
                if x >= w {
                    break;
                }
                image.set(y, x, block.data()[r * bw + c]);
            }
        }
    }
    Ok(image)
}

/// Stacks blocks as columns of an `N x count` matrix (column `j` is `vec(block_j)`).
pub fn blocks_to_columns(blocks: &[Tensor]) -> Result<Tensor> {
    let Some(first) = blocks.first() else {
        return Err(Error::EmptyDataset("no blocks to stack".into()));
    };
    let n = first.numel();
    let cols: Vec<&[f64]> = blocks.iter().map(|b| b.data()).collect();
    Tensor::from_columns(n, &cols)
}

pub fn columns_to_blocks(columns: &Tensor, geometry: BlockGeometry) -> Result<Vec<Tensor>> {
    if columns.rows() != geometry.n() {
        return Err(Error::shape("columns_to_blocks", &[geometry.n()], columns.shape()));
    }
    (0..columns.cols())
        .map(|j| Tensor::new(vec![geometry.height, geometry.width], columns.column(j)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream_rng, Stream};

    fn r(v: f64) -> Ratio {
        Ratio::new(v).unwrap()
    }

    #[test]
    fn active_rows_examples() {
        assert_eq!(active_rows(r(0.5), 1089), 545);
        assert_eq!(active_rows(r(1.0), 64), 64);
        assert_eq!(active_rows(r(0.01), 1089), 11);
        assert_eq!(active_rows(r(0.07), 100), 7);
        assert_eq!(active_rows(r(0.1), 16), 2);
    }

    #[test]
    fn ratio_range_and_parse() {
        assert!(Ratio::new(0.0).is_err());
        assert!(Ratio::new(1.5).is_err());
        assert!(Ratio::new(f64::NAN).is_err());
        assert_eq!("25%".parse::<Ratio>().unwrap(), r(0.25));
        assert_eq!("0.4".parse::<Ratio>().unwrap(), r(0.4));
    }

    #[test]
    fn make_mask_examples() {
        let g = BlockGeometry::square(8).unwrap();
        let full = make_mask(r(0.5), g, r(0.5)).unwrap();
        assert!(full.materialize().data().iter().all(|&v| v == 1.0));
        let quarter = make_mask(r(0.25), g, r(0.5)).unwrap();
        assert_eq!((quarter.active(), quarter.rows()), (16, 32));
        assert!(matches!(
            make_mask(r(0.6), g, r(0.5)),
            Err(Error::RatioExceedsMax { .. })
        ));
    }

    #[test]
    fn mask_prefix_structure_on_percent_grid() {
        let g = BlockGeometry::square(8).unwrap();
        let rm = r(0.5);
        for p in 1..=50 {
            let m = make_mask(Ratio::percent(p).unwrap(), g, rm).unwrap();
            let t = m.materialize();
            for i in 0..m.rows() {
                let expect = if i < m.active() { 1.0 } else { 0.0 };
                assert!(t.row(i).iter().all(|&v| v == expect), "p={p} row={i}");
            }
            let tt = m.materialize_transposed();
            assert_eq!(tt, t.transpose().unwrap());
        }
    }

    #[test]
    fn implicit_mask_matches_materialized() {
        let g = BlockGeometry::square(8).unwrap();
        let mut rng = stream_rng(3, Stream::Init);
        let a = gaussian_init(32, 64, 1.0, &mut rng);
        let b = gaussian_init(64, 32, 1.0, &mut rng);
        for p in [1, 10, 25, 37, 50] {
            let m = make_mask(Ratio::percent(p).unwrap(), g, r(0.5)).unwrap();
            let explicit = m.materialize().zip_map(&a, "t", |x, y| x * y).unwrap();
            assert_eq!(m.apply_rows(&a).unwrap(), explicit);
            let explicit = m.materialize_transposed().zip_map(&b, "t", |x, y| x * y).unwrap();
            assert_eq!(m.apply_cols(&b).unwrap(), explicit);
        }
    }

    #[test]
    fn gaussian_init_determinism_and_moments() {
        let a = gaussian_init(32, 64, 1.0 / 64.0, &mut stream_rng(11, Stream::Init));
        let b = gaussian_init(32, 64, 1.0 / 64.0, &mut stream_rng(11, Stream::Init));
        assert_eq!(a, b);
        let n = a.numel() as f64;
        let mean = a.sum() / n;
        let sigma = (1.0f64 / 64.0).sqrt();
        assert!(mean.abs() < 4.0 * sigma / n.sqrt(), "mean {mean}");
        let var = a.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        assert!((var - 1.0 / 64.0).abs() < 0.1 / 64.0, "var {var}");
    }

    #[test]
    fn vec_unvec() {
        let x = Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(vec(&x).unwrap().data(), &[1.0, 2.0, 3.0, 4.0]);
        let g = BlockGeometry::square(2).unwrap();
        assert_eq!(unvec(&vec(&x).unwrap(), g).unwrap(), x);
        assert!(unvec(&Tensor::vector(vec![1.0; 5]), g).is_err());
    }

    #[test]
    fn blockize_examples() {
        let g = BlockGeometry::default();
        let (blocks, layout) = blockize(&Tensor::filled(&[33, 33], 0.5), g).unwrap();
        assert_eq!(blocks.len(), 1);
        assert_eq!((layout.pad_rows(), layout.pad_cols()), (0, 0));

        let (blocks, layout) = blockize(&Tensor::filled(&[34, 33], 0.5), g).unwrap();
        assert_eq!(blocks.len(), 2);
        assert_eq!(layout.pad_rows(), 32);
        let second = &blocks[1];
        assert!(second.row(0).iter().all(|&v| v == 0.5));
        for row in 1..33 {
            assert!(second.row(row).iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn blockize_roundtrip() {
        let mut rng = stream_rng(5, Stream::Patches);
        let img = gaussian_init(100, 75, 1.0, &mut rng);
        let g = BlockGeometry::new(16, 12).unwrap();
        let (blocks, layout) = blockize(&img, g).unwrap();
        assert_eq!(deblockize(&blocks, &layout).unwrap(), img);
        let cols = blocks_to_columns(&blocks).unwrap();
        assert_eq!(columns_to_blocks(&cols, g).unwrap(), blocks);
    }

    #[test]
    fn sample_identity_and_zero() {
        let g = BlockGeometry::square(4).unwrap();
        let rm = r(0.5);
        let mut a = Tensor::zeros(&[8, 16]);
        for i in 0..8 {
            a.set(i, i, 1.0);
        }
        let a = SamplingMatrix::new(a, g, rm).unwrap();
        let x = Tensor::matrix(4, 4, (0..16).map(|v| v as f64).collect()).unwrap();
        let y = scalable_sample(&x, &a, &make_mask(rm, g, rm).unwrap()).unwrap();
        assert_eq!(y.y.data(), &x.data()[..8]);
        let zero = scalable_sample(&Tensor::zeros(&[4, 4]), &a, &make_mask(r(0.25), g, rm).unwrap()).unwrap();
        assert!(zero.y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn sample_zero_tail_and_init_contract() {
        let g = BlockGeometry::square(8).unwrap();
        let rm = r(0.5);
        let mut rng = stream_rng(9, Stream::Init);
        let a = SamplingMatrix::gaussian(g, rm, &mut rng);
        let b = InitMatrix::gaussian(g, rm, &mut rng);
        let x = gaussian_init(8, 8, 1.0, &mut rng);
        for p in [1, 5, 10, 25, 50] {
            let m = make_mask(Ratio::percent(p).unwrap(), g, rm).unwrap();
            let y = scalable_sample(&x, &a, &m).unwrap();
            assert!(y.y.data()[m.active()..].iter().all(|&v| v == 0.0));
        }
        let y10 = scalable_sample(&x, &a, &make_mask(r(0.1), g, rm).unwrap()).unwrap();
        let m25 = make_mask(r(0.25), g, rm).unwrap();
        assert!(matches!(scalable_init(&y10, &b, &m25, g), Err(Error::Contract(_))));

        let zero = Measurement {
            y: Tensor::zeros(&[32]),
            sampled_ratio: rm,
            active: 32,
        };
        let x0 = scalable_init(&zero, &b, &m25, g).unwrap();
        assert!(x0.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn init_prefix_consistency() {
        let g = BlockGeometry::square(8).unwrap();
        let rm = r(0.5);
        let mut rng = stream_rng(21, Stream::Init);
        let a = SamplingMatrix::gaussian(g, rm, &mut rng);
        let b = InitMatrix::gaussian(g, rm, &mut rng);
        let x = gaussian_init(8, 8, 1.0, &mut rng);
        let mr = make_mask(r(0.1), g, rm).unwrap();
        let y_hi = scalable_sample(&x, &a, &make_mask(r(0.5), g, rm).unwrap()).unwrap();
        let y_lo = scalable_sample(&x, &a, &mr).unwrap();
        assert_eq!(
            scalable_init(&y_hi, &b, &mr, g).unwrap(),
            scalable_init(&y_lo, &b, &mr, g).unwrap()
        );
    }

    #[test]
    fn tape_masking_matches_slicing() {
        let g = BlockGeometry::square(8).unwrap();
        let rm = r(0.5);
        let mut rng = stream_rng(4, Stream::Init);
        let a = SamplingMatrix::gaussian(g, rm, &mut rng);
        let b = InitMatrix::gaussian(g, rm, &mut rng);
        let blocks: Vec<Tensor> = (0..3).map(|_| gaussian_init(8, 8, 1.0, &mut rng)).collect();
        let actives = [3usize, 32, 17];
        let mut tape = Tape::new();
        let av = tape.constant(a.tensor().clone());
        let bv = tape.constant(b.tensor().clone());
        let x = tape.constant(blocks_to_columns(&blocks).unwrap());
        let mask = column_mask(32, &actives);
        let y = MaskedSampling { a: av, mask: &mask }.apply(&mut tape, x).unwrap();
        let x0 = init_on_tape(&mut tape, bv, y, &mask).unwrap();
        for (j, block) in blocks.iter().enumerate() {
            let m = RatioMask::with_active(32, 64, actives[j]).unwrap();
            let ys = scalable_sample(block, &a, &m).unwrap();
            assert_eq!(ys.y.data(), tape.value(y).column(j).as_slice());
            let x0s = scalable_init(&ys, &b, &m, g).unwrap();
            assert_eq!(x0s.data(), tape.value(x0).column(j).as_slice());
        }
    }
}
