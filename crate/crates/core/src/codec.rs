//! Measurement files: an image sampled block-by-block at `R_S`, storing only
//! the valid measurement prefix of every block.
//!
//! Layout (little-endian):
//!
//! ```text
//! "SDCM"  u32 version=1
//! u32 block_height  u32 block_width  f64 R_M  f64 R_S
//! u32 grid_rows  u32 grid_cols  u32 image_height  u32 image_width
//! u32 pad_bottom  u32 pad_right  u32 prefix_len
//! grid_rows * grid_cols records (row-major), each prefix_len f64
//! ```

use std::path::Path;

use crate::cs::{blockize, blocks_to_columns, columns_to_blocks, deblockize, BlockGeometry, BlockLayout, Ratio};
use crate::error::{Error, Result};
use crate::pipeline::ScalableModel;
use crate::tensor::Tensor;
use crate::wire::Reader;

pub const MAGIC: &[u8; 4] = b"SDCM";
pub const VERSION: u32 = 1;
/// Bytes before the first block record.
pub const HEADER_LEN: usize = 4 + 4 + 4 * 2 + 8 * 2 + 4 * 7;

#[derive(Clone, Debug, PartialEq)]
pub struct MeasurementFile {
    pub max_ratio: Ratio,
    pub sampled_ratio: Ratio,
    pub layout: BlockLayout,
    /// `ceil(R_S N)` measurements per block.
    pub prefix_len: usize,
    /// One record per block in row-major grid order.
    pub records: Vec<Vec<f64>>,
}

impl MeasurementFile {
    /// Blockizes `image`, samples every block at `rs`, and keeps the prefixes.
    pub fn encode(model: &ScalableModel, image: &Tensor, rs: Ratio) -> Result<Self> {
        let active = model.active(rs)?;
        let (blocks, layout) = blockize(image, model.geometry)?;
        let y = model.measure(&blocks_to_columns(&blocks)?, active)?;
        let records = (0..y.cols())
            .map(|j| y.column(j)[..active].to_vec())
            .collect();
        Ok(MeasurementFile {
            max_ratio: model.max_ratio,
            sampled_ratio: rs,
            layout,
            prefix_len: active,
            records,
        })
    }

    pub fn geometry(&self) -> BlockGeometry {
        self.layout.geometry
    }

    /// Reconstructs the image at `rr <= R_S`. Output is cropped, not clamped.
    pub fn decode(&self, model: &ScalableModel, rr: Ratio) -> Result<Tensor> {
        if model.geometry != self.geometry() || model.max_ratio != self.max_ratio {
            return Err(Error::Contract(format!(
                "measurement file is {} at R_M={} but the model is {} at R_M={}",
                self.geometry(),
                self.max_ratio,
                model.geometry,
                model.max_ratio
            )));
        }
        let active = model.active(rr)?;
        if active > self.prefix_len {
            return Err(Error::Contract(format!(
                "reconstruction ratio {rr} needs {active} measurements per block but the file was sampled at {} ({} stored); R_R must not exceed R_S",
                self.sampled_ratio, self.prefix_len
            )));
        }
        let m = model.measurement_len();
        let count = self.records.len();
        let mut y = Tensor::zeros(&[m, count]);
        for (j, rec) in self.records.iter().enumerate() {
            for (i, &v) in rec.iter().enumerate() {
                y.set(i, j, v);
            }
        }
        let x = model.reconstruct(&y, active)?;
        deblockize(&columns_to_blocks(&x, self.geometry())?, &self.layout)
    }

    /// The same file re-sampled at `r <= R_S`: every record is cut to the
    /// shorter prefix. Byte-identical to encoding at `r` directly.
    pub fn truncate(&self, r: Ratio) -> Result<Self> {
        let active = r.active_rows(self.geometry().n());
        if r.value() > self.max_ratio.value() {
            return Err(Error::RatioExceedsMax {
                ratio: r.value(),
                max: self.max_ratio.value(),
            });
        }
        if active > self.prefix_len {
            return Err(Error::Contract(format!(
                "cannot truncate a file sampled at {} to the larger ratio {r}",
                self.sampled_ratio
            )));
        }
        Ok(MeasurementFile {
            sampled_ratio: r,
            prefix_len: active,
            records: self.records.iter().map(|rec| rec[..active].to_vec()).collect(),
            ..self.clone()
        })
    }

    pub fn payload_len(&self) -> usize {
        self.records.len() * self.prefix_len * 8
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let l = &self.layout;
        let mut out = Vec::with_capacity(HEADER_LEN + self.payload_len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let u32s = |out: &mut Vec<u8>, vals: &[usize]| {
            for &v in vals {
                out.extend_from_slice(&(v as u32).to_le_bytes());
            }
        };
        u32s(&mut out, &[l.geometry.height, l.geometry.width]);
        out.extend_from_slice(&self.max_ratio.value().to_le_bytes());
        out.extend_from_slice(&self.sampled_ratio.value().to_le_bytes());
        u32s(
            &mut out,
            &[
                l.grid_rows,
                l.grid_cols,
                l.image_height,
                l.image_width,
                l.pad_rows(),
                l.pad_cols(),
                self.prefix_len,
            ],
        );
        for rec in &self.records {
            for v in rec {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut rd = Reader::new(bytes);
        if rd.take(4)? != MAGIC {
            return Err(Error::Parse {
                offset: 0,
                msg: "not an SDCM measurement file (bad magic)".into(),
            });
        }
        let version = rd.u32()?;
        if version != VERSION {
            return Err(Error::Parse {
                offset: 4,
                msg: format!("unsupported measurement file version {version}"),
            });
        }
        let geometry = BlockGeometry::new(rd.u32()? as usize, rd.u32()? as usize)?;
        let max_ratio = Ratio::new(rd.f64()?)?;
        let sampled_ratio = Ratio::new(rd.f64()?)?;
        let mut next = || rd.u32().map(|v| v as usize);
        let (grid_rows, grid_cols) = (next()?, next()?);
        let (image_height, image_width) = (next()?, next()?);
        let (pad_bottom, pad_right, prefix_len) = (next()?, next()?, next()?);
        let layout = BlockLayout::for_image(image_height, image_width, geometry)?;
        if layout.grid_rows != grid_rows
            || layout.grid_cols != grid_cols
            || layout.pad_rows() != pad_bottom
            || layout.pad_cols() != pad_right
        {
            return Err(Error::Format(format!(
                "block grid {grid_rows}x{grid_cols} with padding {pad_bottom}/{pad_right} does not match a {image_height}x{image_width} image in {geometry} blocks"
            )));
        }
        if sampled_ratio.value() > max_ratio.value() {
            return Err(Error::Format(format!("R_S {sampled_ratio} exceeds R_M {max_ratio}")));
        }
        if prefix_len != sampled_ratio.active_rows(geometry.n()) {
            return Err(Error::Format(format!(
                "prefix length {prefix_len} does not match R_S {sampled_ratio} for N={}",
                geometry.n()
            )));
        }
        let records = (0..layout.block_count())
            .map(|_| rd.f64s(prefix_len))
            .collect::<Result<Vec<_>>>()?;
        if !rd.remaining().is_empty() {
            return Err(Error::Parse {
                offset: rd.pos,
                msg: format!("{} trailing bytes after the last block record", rd.remaining().len()),
            });
        }
        Ok(MeasurementFile {
            max_ratio,
            sampled_ratio,
            layout,
            prefix_len,
            records,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        MeasurementFile::from_bytes(&bytes)
    }
}
