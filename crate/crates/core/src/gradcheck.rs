//! Central finite-difference checking of analytic gradients.
//!
//! The checker only ever calls the loss function forward, so it is an
//! oracle that does not share code with any backward rule.

use crate::error::Result;
use crate::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-6;

/// Result for one parameter tensor.
#[derive(Clone, Debug)]
pub struct TensorCheck {
    pub name: String,
    /// `||analytic - numeric|| / max(||analytic||, ||numeric||)` over the
    /// checked entries.
    pub rel_error: f64,
    pub max_abs_error: f64,
    pub checked: usize,
    /// Entries whose `±h` evaluations landed on a different smooth piece.
    pub skipped: usize,
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub tensors: Vec<TensorCheck>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.tensors.iter().fold(0.0, |m, t| m.max(t.rel_error))
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.tensors.iter().all(|t| t.rel_error < tol && t.checked > 0)
    }

    pub fn worst(&self) -> Option<&TensorCheck> {
        self.tensors
            .iter()
            .max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
    }
}

/// Compares `analytic[i]` against central differences of `eval` with step `h`.
///
/// `eval` receives the full parameter set and returns the loss together with
/// a branch signature (see [`crate::autodiff::Tape::branch_signature`]);
/// entries whose perturbed evaluations change the signature straddle a kink
/// and are skipped.
pub fn check<F>(
    names: &[String],
    params: &[Tensor],
    analytic: &[Tensor],
    h: f64,
    mut eval: F,
) -> Result<GradCheckReport>
where
    F: FnMut(&[Tensor]) -> Result<(f64, u64)>,
{
    let mut work: Vec<Tensor> = params.to_vec();
    let (_, base_sig) = eval(&work)?;
    let mut report = GradCheckReport::default();
    for (i, name) in names.iter().enumerate() {
        let mut diff2 = 0.0;
        let mut an2 = 0.0;
        let mut nu2 = 0.0;
        let mut max_abs: f64 = 0.0;
        let mut checked = 0;
        let mut skipped = 0;
        for j in 0..params[i].numel() {
            let orig = params[i].data()[j];
            work[i].data_mut()[j] = orig + h;
            let (plus, sig_p) = eval(&work)?;
            work[i].data_mut()[j] = orig - h;
            let (minus, sig_m) = eval(&work)?;
            work[i].data_mut()[j] = orig;
            if sig_p != base_sig || sig_m != base_sig {
                skipped += 1;
                continue;
            }
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic[i].data()[j];
            diff2 += (a - numeric) * (a - numeric);
            an2 += a * a;
            nu2 += numeric * numeric;
            max_abs = max_abs.max((a - numeric).abs());
            checked += 1;
        }
        let denom = an2.sqrt().max(nu2.sqrt());
        let rel_error = if denom == 0.0 { 0.0 } else { diff2.sqrt() / denom };
        report.tensors.push(TensorCheck {
            name: name.clone(),
            rel_error,
            max_abs_error: max_abs,
            checked,
            skipped,
        });
    }
    Ok(report)
}
