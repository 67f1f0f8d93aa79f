//! PSNR, SSIM, and ratio-sweep evaluation.
//!
//! Images live in `[0, 1]`, so the PSNR peak is 1. SSIM uses the usual
//! single-scale parameters: an 11x11 Gaussian window with sigma 1.5,
//! `K1 = 0.01`, `K2 = 0.03`, dynamic range 1, averaged over every window
//! position that lies fully inside the image.

use std::io::Write;
use std::path::Path;

use crate::cs::Ratio;
use crate::data::GrayImage;
use crate::error::{Error, Result};
use crate::pipeline::ScalableModel;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

/// Drops larger than this between consecutive sweep ratios are reported.
pub const TREND_TOLERANCE_DB: f64 = 0.5;

/// One-line description of the metric conventions, written into outputs.
pub fn metric_conventions() -> String {
    format!(
        "psnr_peak=1.0 ssim_window={SSIM_WINDOW} ssim_sigma={SSIM_SIGMA} ssim_k1={SSIM_K1} ssim_k2={SSIM_K2} ssim_range=1.0"
    )
}

pub fn mse(x: &GrayImage, y: &GrayImage) -> Result<f64> {
    expect_same_size(x, y, "mse")?;
    let n = x.pixels().len() as f64;
    Ok(x.pixels()
        .iter()
        .zip(y.pixels())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / n)
}

/// `10 log10(1 / mse)`; `+inf` for `mse == 0`.
pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        -10.0 * mse.log10()
    }
}

pub fn psnr(x: &GrayImage, y: &GrayImage) -> Result<f64> {
    Ok(psnr_from_mse(mse(x, y)?))
}

/// Normalized 1-D Gaussian taps; the 2-D window is their outer product.
pub fn gaussian_taps(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let raw: Vec<f64> = (0..size)
        .map(|i| {
            let d = i as f64 - c;
            (-(d * d) / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / total).collect()
}

/// Separable "valid" filtering of a row-major plane with `taps` on both axes.
fn filter_valid(plane: &[f64], h: usize, w: usize, taps: &[f64]) -> Vec<f64> {
    let k = taps.len();
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut horiz = vec![0.0; h * ow];
    for r in 0..h {
        let row = &plane[r * w..(r + 1) * w];
        for c in 0..ow {
            let mut acc = 0.0;
            for (t, &v) in taps.iter().zip(&row[c..c + k]) {
                acc += t * v;
            }
            horiz[r * ow + c] = acc;
        }
    }
    let mut out = vec![0.0; oh * ow];
    for r in 0..oh {
        for c in 0..ow {
            let mut acc = 0.0;
            for (i, t) in taps.iter().enumerate() {
                acc += t * horiz[(r + i) * ow + c];
            }
            out[r * ow + c] = acc;
        }
    }
    out
}

/// Mean SSIM over all fully-contained 11x11 windows.
pub fn ssim(x: &GrayImage, y: &GrayImage) -> Result<f64> {
    expect_same_size(x, y, "ssim")?;
    let (h, w) = (x.height(), x.width());
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Domain(format!(
            "ssim needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {h}x{w}"
        )));
    }
    let taps = gaussian_taps(SSIM_WINDOW, SSIM_SIGMA);
    let (xp, yp) = (x.pixels(), y.pixels());
    let xx: Vec<f64> = xp.iter().map(|v| v * v).collect();
    let yy: Vec<f64> = yp.iter().map(|v| v * v).collect();
    let xy: Vec<f64> = xp.iter().zip(yp).map(|(a, b)| a * b).collect();
    let mu_x = filter_valid(xp, h, w, &taps);
    let mu_y = filter_valid(yp, h, w, &taps);
    let e_xx = filter_valid(&xx, h, w, &taps);
    let e_yy = filter_valid(&yy, h, w, &taps);
    let e_xy = filter_valid(&xy, h, w, &taps);
    let c1 = (SSIM_K1 * 1.0).powi(2);
    let c2 = (SSIM_K2 * 1.0).powi(2);
    let mut total = 0.0;
    for i in 0..mu_x.len() {
        let (mx, my) = (mu_x[i], mu_y[i]);
        let vx = e_xx[i] - mx * mx;
        let vy = e_yy[i] - my * my;
        let cov = e_xy[i] - mx * my;
        total += ssim_term(mx, my, vx, vy, cov, c1, c2);
    }
    Ok(total / mu_x.len() as f64)
}

/// Local SSIM from window statistics. Written so that identical inputs give
/// exactly 1.
pub(crate) fn ssim_term(mx: f64, my: f64, vx: f64, vy: f64, cov: f64, c1: f64, c2: f64) -> f64 {
    let num = (2.0 * mx * my + c1) * (2.0 * cov + c2);
    let den = (mx * mx + my * my + c1) * (vx + vy + c2);
    num / den
}

fn expect_same_size(x: &GrayImage, y: &GrayImage, op: &'static str) -> Result<()> {
    if x.height() != y.height() || x.width() != y.width() {
        return Err(Error::shape(op, &[x.height(), x.width()], &[y.height(), y.width()]));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub ratio: Ratio,
    pub image: String,
    pub psnr_db: f64,
    pub ssim: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepSummary {
    pub ratio: Ratio,
    pub mean_psnr_db: f64,
    pub mean_ssim: f64,
}

/// A consecutive pair of sweep ratios where mean PSNR fell by more than
/// [`TREND_TOLERANCE_DB`].
#[derive(Clone, Debug, PartialEq)]
pub struct TrendViolation {
    pub lower: Ratio,
    pub higher: Ratio,
    pub drop_db: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepResult {
    pub ratios: Vec<Ratio>,
    pub rows: Vec<SweepRow>,
    pub summary: Vec<SweepSummary>,
    pub trend_violations: Vec<TrendViolation>,
}

/// Samples and reconstructs every image at each ratio (`R_S = R_R = r`),
/// scoring the clamped, cropped reconstruction against the original.
pub fn sweep(model: &ScalableModel, images: &[(String, GrayImage)], ratios: &[Ratio]) -> Result<SweepResult> {
    if images.is_empty() {
        return Err(Error::EmptyDataset("sweep needs at least one image".into()));
    }
    let mut ratios = ratios.to_vec();
    ratios.sort_by(|a, b| a.value().total_cmp(&b.value()));
    for &r in &ratios {
        model.active(r)?;
    }
    let mut rows = Vec::new();
    let mut summary = Vec::new();
    for &r in &ratios {
        let mut psnr_sum = 0.0;
        let mut ssim_sum = 0.0;
        for (name, img) in images {
            let recon = GrayImage::from_tensor_clamped(&model.reconstruct_image(&img.to_tensor(), r, r)?)?;
            let p = psnr(img, &recon)?;
            let s = ssim(img, &recon)?;
            psnr_sum += p;
            ssim_sum += s;
            rows.push(SweepRow {
                ratio: r,
                image: name.clone(),
                psnr_db: p,
                ssim: s,
            });
        }
        let n = images.len() as f64;
        summary.push(SweepSummary {
            ratio: r,
            mean_psnr_db: psnr_sum / n,
            mean_ssim: ssim_sum / n,
        });
    }
    let trend_violations = summary
        .windows(2)
        .filter_map(|w| {
            let drop = w[0].mean_psnr_db - w[1].mean_psnr_db;
            (drop > TREND_TOLERANCE_DB).then_some(TrendViolation {
                lower: w[0].ratio,
                higher: w[1].ratio,
                drop_db: drop,
            })
        })
        .collect();
    Ok(SweepResult {
        ratios,
        rows,
        summary,
        trend_violations,
    })
}

impl SweepResult {
    pub fn write_detail_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut out = format!("# {}\nratio,image,psnr_db,ssim\n", metric_conventions());
        for r in &self.rows {
            out.push_str(&format!("{},{},{},{}\n", r.ratio, r.image, r.psnr_db, r.ssim));
        }
        write_file(path.as_ref(), out.as_bytes())
    }

    pub fn write_summary_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut out = format!("# {}\nratio,mean_psnr_db,mean_ssim\n", metric_conventions());
        for s in &self.summary {
            out.push_str(&format!("{},{},{}\n", s.ratio, s.mean_psnr_db, s.mean_ssim));
        }
        write_file(path.as_ref(), out.as_bytes())
    }

    /// Whitespace-separated `ratio mean_psnr mean_ssim` lines.
    pub fn write_plot_data(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut out = String::from("# ratio mean_psnr mean_ssim\n");
        for s in &self.summary {
            out.push_str(&format!("{} {} {}\n", s.ratio, s.mean_psnr_db, s.mean_ssim));
        }
        write_file(path.as_ref(), out.as_bytes())
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}
