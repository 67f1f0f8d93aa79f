//! Image ingestion and output: Netpbm graymaps (P2/P5), BT.601 luminance,
//! random patch extraction and source-disjoint dataset splits.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;

use crate::cs::BlockGeometry;
use crate::error::{Error, Result};
use crate::rng::{stream_rng, Stream};
use crate::tensor::Tensor;

/// Grayscale image with pixels in `[0, 1]`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct GrayImage {
    height: usize,
    width: usize,
    pixels: Vec<f64>,
}

impl GrayImage {
    pub fn new(height: usize, width: usize, pixels: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || pixels.len() != height * width {
            return Err(Error::shape("gray image", &[height, width], &[pixels.len()]));
        }
        if let Some(p) = pixels.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(Error::Domain(format!("pixel value {p} outside [0, 1]")));
        }
        Ok(GrayImage {
            height,
            width,
            pixels,
        })
    }

    /// Clamps every value into `[0, 1]`. Non-finite input is rejected.
    pub fn from_tensor_clamped(t: &Tensor) -> Result<Self> {
        let (h, w) = t.dims2("gray image")?;
        if !t.is_finite() {
            return Err(Error::NonFinite { op: "gray image" });
        }
        GrayImage::new(h, w, t.data().iter().map(|v| v.clamp(0.0, 1.0)).collect())
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.pixels[row * self.width + col]
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![self.height, self.width], self.pixels.clone()).expect("valid shape")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PgmMode {
    /// ASCII `P2`.
    Plain,
    /// Binary `P5`.
    Raw,
}

/// Header token reader that tracks byte offsets for error messages.
struct HeaderReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl HeaderReader<'_> {
    fn skip_space_and_comments(&mut self) {
        while self.pos < self.bytes.len() {
            match self.bytes[self.pos] {
                b'#' => {
                    while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                        self.pos += 1;
                    }
                }
                c if c.is_ascii_whitespace() => self.pos += 1,
                _ => break,
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<u32> {
        self.skip_space_and_comments();
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if start == self.pos {
            let msg = if start >= self.bytes.len() {
                format!("unexpected end of file while reading {what}")
            } else {
                format!("expected {what}, found byte 0x{:02x}", self.bytes[start])
            };
            return Err(Error::Parse { offset: start, msg });
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .expect("ascii digits")
            .parse::<u32>()
            .map_err(|e| Error::Parse {
                offset: start,
                msg: format!("invalid {what}: {e}"),
            })
    }
}

/// Parses a P2 or P5 graymap and scales samples to `[0, 1]`.
pub fn parse_pgm(bytes: &[u8]) -> Result<GrayImage> {
    if bytes.len() < 2 || bytes[0] != b'P' {
        return Err(Error::Parse {
            offset: 0,
            msg: "missing Netpbm magic number".into(),
        });
    }
    let mode = match bytes[1] {
        b'2' => PgmMode::Plain,
        b'5' => PgmMode::Raw,
        other => {
            return Err(Error::Parse {
                offset: 1,
                msg: format!("unsupported magic 'P{}' (expected P2 or P5)", other as char),
            })
        }
    };
    let mut rd = HeaderReader { bytes, pos: 2 };
    let width = rd.number("width")? as usize;
    let height = rd.number("height")? as usize;
    let maxval_offset = rd.pos;
    let maxval = rd.number("maxval")?;
    if width == 0 || height == 0 {
        return Err(Error::Parse {
            offset: 2,
            msg: format!("zero image dimension {width}x{height}"),
        });
    }
    if maxval == 0 || maxval > 65535 {
        return Err(Error::Parse {
            offset: maxval_offset,
            msg: format!("maxval {maxval} outside [1, 65535]"),
        });
    }
    let count = width * height;
    let scale = f64::from(maxval);
    let samples: Vec<u32> = match mode {
        PgmMode::Plain => {
            let mut v = Vec::with_capacity(count);
            for _ in 0..count {
                v.push(rd.number("pixel value")?);
            }
            v
        }
        PgmMode::Raw => {
            // Exactly one whitespace byte separates maxval from the raster.
            if rd.pos >= bytes.len() || !bytes[rd.pos].is_ascii_whitespace() {
                return Err(Error::Parse {
                    offset: rd.pos,
                    msg: "expected single whitespace before raster".into(),
                });
            }
            let start = rd.pos + 1;
            let width_bytes = if maxval < 256 { 1 } else { 2 };
            let expected = count * width_bytes;
            let available = bytes.len() - start;
            if available < expected {
                return Err(Error::Parse {
                    offset: bytes.len(),
                    msg: format!("truncated raster: expected {expected} bytes, found {available}"),
                });
            }
            let raster = &bytes[start..start + expected];
            if width_bytes == 1 {
                raster.iter().map(|&b| u32::from(b)).collect()
            } else {
                raster
                    .chunks_exact(2)
                    .map(|c| u32::from(u16::from_be_bytes([c[0], c[1]])))
                    .collect()
            }
        }
    };
    if let Some(i) = samples.iter().position(|&s| s > maxval) {
        return Err(Error::Parse {
            offset: rd.pos,
            msg: format!("sample {} at pixel {i} exceeds maxval {maxval}", samples[i]),
        });
    }
    GrayImage::new(height, width, samples.iter().map(|&s| f64::from(s) / scale).collect())
}

pub fn load_pgm(path: impl AsRef<Path>) -> Result<GrayImage> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_pgm(&bytes)
}

/// 8-bit quantization, round half up after clamping to `[0, 1]`.
pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0 + 0.5).floor() as u8
}

/// Encodes an image as an 8-bit graymap. P2 output keeps lines at most 70
/// characters long.
pub fn encode_pgm(img: &GrayImage, mode: PgmMode) -> Result<Vec<u8>> {
    if img.pixels.iter().any(|p| !p.is_finite()) {
        return Err(Error::NonFinite { op: "save_pgm" });
    }
    let magic = match mode {
        PgmMode::Plain => "P2",
        PgmMode::Raw => "P5",
    };
    let mut out = format!("{magic}\n{} {}\n255\n", img.width, img.height).into_bytes();
    match mode {
        PgmMode::Raw => out.extend(img.pixels.iter().map(|&p| quantize(p))),
        PgmMode::Plain => {
            let mut line = String::new();
            for &p in &img.pixels {
                let tok = quantize(p).to_string();
                if !line.is_empty() && line.len() + 1 + tok.len() > 70 {
                    out.extend_from_slice(line.as_bytes());
                    out.push(b'\n');
                    line.clear();
                }
                if !line.is_empty() {
                    line.push(' ');
                }
                let _ = write!(line, "{tok}");
            }
            out.extend_from_slice(line.as_bytes());
            out.push(b'\n');
        }
    }
    Ok(out)
}

pub fn save_pgm(img: &GrayImage, path: impl AsRef<Path>, mode: PgmMode) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_pgm(img, mode)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// BT.601 luma `0.299 R + 0.587 G + 0.114 B`.
pub fn rgb_to_luminance(r: &Tensor, g: &Tensor, b: &Tensor) -> Result<GrayImage> {
    r.expect_same_shape(g, "rgb_to_luminance")?;
    r.expect_same_shape(b, "rgb_to_luminance")?;
    let (h, w) = r.dims2("rgb_to_luminance")?;
    let y = r
        .data()
        .iter()
        .zip(g.data())
        .zip(b.data())
        // Integer weights keep pure white at exactly 1.
        .map(|((&r, &g), &b)| ((299.0 * r + 587.0 * g + 114.0 * b) / 1000.0).clamp(0.0, 1.0))
        .collect();
    GrayImage::new(h, w, y)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Patch {
    /// `H x L` block.
    pub block: Tensor,
    pub source: usize,
    pub row: usize,
    pub col: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PatchDataset {
    pub geometry: BlockGeometry,
    pub split: Split,
    pub patches: Vec<Patch>,
}

impl PatchDataset {
    pub fn len(&self) -> usize {
        self.patches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patches.is_empty()
    }

    pub fn blocks(&self) -> Vec<Tensor> {
        self.patches.iter().map(|p| p.block.clone()).collect()
    }
}

/// Draws `count` blocks: source image uniformly, then a uniform offset that
/// keeps the block inside the image.
pub fn extract_patches(
    images: &[GrayImage],
    geometry: BlockGeometry,
    count: usize,
    split: Split,
    seed: u64,
) -> Result<PatchDataset> {
    if let Some((i, img)) = images
        .iter()
        .enumerate()
        .find(|(_, im)| im.height < geometry.height || im.width < geometry.width)
    {
        return Err(Error::Domain(format!(
            "image {i} ({}x{}) is smaller than the {geometry} block",
            img.height, img.width
        )));
    }
    if count > 0 && images.is_empty() {
        return Err(Error::EmptyDataset("no source images for patch extraction".into()));
    }
    let mut rng = stream_rng(seed, Stream::Patches);
    let (bh, bw) = (geometry.height, geometry.width);
    let patches = (0..count)
        .map(|_| {
            let source = rng.random_range(0..images.len());
            let img = &images[source];
            let row = rng.random_range(0..=img.height - bh);
            let col = rng.random_range(0..=img.width - bw);
            let mut data = Vec::with_capacity(bh * bw);
            for r in 0..bh {
                let start = (row + r) * img.width + col;
                data.extend_from_slice(&img.pixels[start..start + bw]);
            }
            Patch {
                block: Tensor::new(vec![bh, bw], data).expect("block shape"),
                source,
                row,
                col,
            }
        })
        .collect();
    Ok(PatchDataset {
        geometry,
        split,
        patches,
    })
}

/// Source files assigned to disjoint splits.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SourceSplit {
    pub train: Vec<PathBuf>,
    pub val: Vec<PathBuf>,
    pub test: Vec<PathBuf>,
}

/// Sorts `paths`, shuffles them with the run seed, and deals the first
/// `val_count` to validation, the next `test_count` to test, the rest to
/// training.
pub fn split_sources(mut paths: Vec<PathBuf>, seed: u64, val_count: usize, test_count: usize) -> Result<SourceSplit> {
    paths.sort();
    paths.dedup();
    if paths.len() <= val_count + test_count {
        return Err(Error::EmptyDataset(format!(
            "{} images cannot fill {val_count} validation + {test_count} test + at least one training image",
            paths.len()
        )));
    }
    paths.shuffle(&mut stream_rng(seed, Stream::Split));
    let test = paths.split_off(paths.len() - test_count);
    let val = paths.split_off(paths.len() - val_count);
    let mut split = SourceSplit {
        train: paths,
        val,
        test,
    };
    split.train.sort();
    split.val.sort();
    split.test.sort();
    Ok(split)
}

/// Every `*.pgm` file directly inside `dir`, sorted by name.
pub fn list_pgm_files(dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.is_file()
                && p.extension()
                    .is_some_and(|e| e.eq_ignore_ascii_case("pgm"))
        })
        .collect();
    files.sort();
    Ok(files)
}

/// Reads a manifest of image paths, one per line, relative to the manifest's
/// directory. Blank lines and `#` comments are ignored.
pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(|l| base.join(l))
        .collect())
}
