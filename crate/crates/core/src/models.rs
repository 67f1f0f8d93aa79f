//! Reconstruction networks.
//!
//! Two families share one calling convention: blocks travel as columns of an
//! `N x batch` matrix.
//!
//! * [`MlpReconstructor`] maps the linear estimate `X0` to `X0 + MLP(X0)`
//!   and never looks at the measurement.
//! * [`UnfoldedReconstructor`] runs `K` phases. Each phase takes a gradient
//!   step on `||y - (M ⊙ A) x||^2` with the *masked* sampling matrix, then
//!   applies a learned analysis / soft-threshold / synthesis correction:
//!
//! ```text
//! r   = x + rho * (M ⊙ A)^T (y - (M ⊙ A) x)
//! x'  = r + W_syn * soft(W_ana * r, theta)
//! ```

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::cs::{gaussian_init, MaskedSampling};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_PHASES: usize = 4;
pub const RHO_INIT: f64 = 0.5;
pub const THETA_INIT: f64 = 0.01;

/// Architecture of a reconstructor, independent of its weights.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ModelSpec {
    /// Hidden layer widths; input and output width is `N`.
    Mlp { hidden: Vec<usize> },
    Unfolded { phases: usize },
}

impl ModelSpec {
    /// `[N, 4N, N]`.
    pub fn default_mlp(n: usize) -> Self {
        ModelSpec::Mlp { hidden: vec![4 * n] }
    }

    pub fn default_unfolded() -> Self {
        ModelSpec::Unfolded {
            phases: DEFAULT_PHASES,
        }
    }

    pub fn family_name(&self) -> &'static str {
        match self {
            ModelSpec::Mlp { .. } => "mlp",
            ModelSpec::Unfolded { .. } => "unfolded",
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            ModelSpec::Mlp { hidden } if hidden.is_empty() || hidden.contains(&0) => Err(
                Error::Domain("MLP needs at least one hidden layer of positive width".into()),
            ),
            ModelSpec::Unfolded { phases: 0 } => {
                Err(Error::Domain("unfolded model needs at least one phase".into()))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenseLayer {
    pub weight: Tensor,
    pub bias: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MlpReconstructor {
    layers: Vec<DenseLayer>,
}

impl MlpReconstructor {
    /// Hidden layers get Gaussian weights with variance `1/fan_in`; the output
    /// layer starts at zero so the residual network starts as the identity.
    pub fn new<R: Rng + ?Sized>(n: usize, hidden: &[usize], rng: &mut R) -> Result<Self> {
        ModelSpec::Mlp {
            hidden: hidden.to_vec(),
        }
        .validate()?;
        let mut widths = vec![n];
        widths.extend_from_slice(hidden);
        widths.push(n);
        let last = widths.len() - 2;
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(l, w)| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let weight = if l == last {
                    Tensor::zeros(&[fan_out, fan_in])
                } else {
                    gaussian_init(fan_out, fan_in, 1.0 / fan_in as f64, rng)
                };
                DenseLayer {
                    weight,
                    bias: Tensor::zeros(&[fan_out]),
                }
            })
            .collect();
        Ok(MlpReconstructor { layers })
    }

    pub fn layers(&self) -> &[DenseLayer] {
        &self.layers
    }

    pub fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.layers[0].weight.cols()];
        w.extend(self.layers.iter().map(|l| l.weight.rows()));
        w
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct UnfoldedPhase {
    pub rho: Tensor,
    pub analysis: Tensor,
    pub synthesis: Tensor,
    pub theta: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct UnfoldedReconstructor {
    phases: Vec<UnfoldedPhase>,
}

impl UnfoldedReconstructor {
    pub fn new<R: Rng + ?Sized>(n: usize, phases: usize, rng: &mut R) -> Result<Self> {
        ModelSpec::Unfolded { phases }.validate()?;
        let phases = (0..phases)
            .map(|_| UnfoldedPhase {
                rho: Tensor::scalar(RHO_INIT),
                analysis: gaussian_init(n, n, 1.0 / n as f64, rng),
                synthesis: Tensor::zeros(&[n, n]),
                theta: Tensor::scalar(THETA_INIT),
            })
            .collect();
        Ok(UnfoldedReconstructor { phases })
    }

    pub fn phases(&self) -> &[UnfoldedPhase] {
        &self.phases
    }

    pub fn phases_mut(&mut self) -> &mut [UnfoldedPhase] {
        &mut self.phases
    }
}

/// Trainable reconstructor `Θ`.
#[derive(Clone, Debug, PartialEq)]
pub enum Reconstructor {
    Mlp(MlpReconstructor),
    Unfolded(UnfoldedReconstructor),
}

impl Reconstructor {
    pub fn new<R: Rng + ?Sized>(spec: &ModelSpec, n: usize, rng: &mut R) -> Result<Self> {
        Ok(match spec {
            ModelSpec::Mlp { hidden } => Reconstructor::Mlp(MlpReconstructor::new(n, hidden, rng)?),
            ModelSpec::Unfolded { phases } => {
                Reconstructor::Unfolded(UnfoldedReconstructor::new(n, *phases, rng)?)
            }
        })
    }

    pub fn spec(&self) -> ModelSpec {
        match self {
            Reconstructor::Mlp(m) => {
                let w = m.widths();
                ModelSpec::Mlp {
                    hidden: w[1..w.len() - 1].to_vec(),
                }
            }
            Reconstructor::Unfolded(u) => ModelSpec::Unfolded {
                phases: u.phases.len(),
            },
        }
    }

    /// Parameters in their stable checkpoint order.
    pub fn param_list(&self) -> Vec<(String, &Tensor)> {
        match self {
            Reconstructor::Mlp(m) => m
                .layers
                .iter()
                .enumerate()
                .flat_map(|(l, layer)| {
                    [
                        (format!("layer{l}.weight"), &layer.weight),
                        (format!("layer{l}.bias"), &layer.bias),
                    ]
                })
                .collect(),
            Reconstructor::Unfolded(u) => u
                .phases
                .iter()
                .enumerate()
                .flat_map(|(k, p)| {
                    let k = k + 1;
                    [
                        (format!("phase{k}.rho"), &p.rho),
                        (format!("phase{k}.analysis"), &p.analysis),
                        (format!("phase{k}.synthesis"), &p.synthesis),
                        (format!("phase{k}.theta"), &p.theta),
                    ]
                })
                .collect(),
        }
    }

    /// Mutable view in the same order as [`Reconstructor::param_list`].
    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        match self {
            Reconstructor::Mlp(m) => m
                .layers
                .iter_mut()
                .flat_map(|l| [&mut l.weight, &mut l.bias])
                .collect(),
            Reconstructor::Unfolded(u) => u
                .phases
                .iter_mut()
                .flat_map(|p| [&mut p.rho, &mut p.analysis, &mut p.synthesis, &mut p.theta])
                .collect(),
        }
    }

    /// Keeps soft thresholds non-negative after an optimizer step.
    pub fn project(&mut self) {
        if let Reconstructor::Unfolded(u) = self {
            for p in &mut u.phases {
                let t = &mut p.theta.data_mut()[0];
                if *t < 0.0 {
                    *t = 0.0;
                }
            }
        }
    }

    /// Registers every parameter on `tape`, as trainable leaves or constants.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundReconstructor {
        let mut put = |t: &Tensor| {
            if trainable {
                tape.leaf(t.clone())
            } else {
                tape.constant(t.clone())
            }
        };
        match self {
            Reconstructor::Mlp(m) => BoundReconstructor::Mlp(
                m.layers
                    .iter()
                    .map(|l| BoundDense {
                        weight: put(&l.weight),
                        bias: put(&l.bias),
                    })
                    .collect(),
            ),
            Reconstructor::Unfolded(u) => BoundReconstructor::Unfolded(
                u.phases
                    .iter()
                    .map(|p| BoundPhase {
                        rho: put(&p.rho),
                        analysis: put(&p.analysis),
                        synthesis: put(&p.synthesis),
                        theta: put(&p.theta),
                    })
                    .collect(),
            ),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct BoundDense {
    pub weight: Var,
    pub bias: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct BoundPhase {
    pub rho: Var,
    pub analysis: Var,
    pub synthesis: Var,
    pub theta: Var,
}

/// Reconstructor parameters as tape variables.
#[derive(Clone, Debug)]
pub enum BoundReconstructor {
    Mlp(Vec<BoundDense>),
    Unfolded(Vec<BoundPhase>),
}

impl BoundReconstructor {
    /// Variables in [`Reconstructor::param_list`] order.
    pub fn vars(&self) -> Vec<Var> {
        match self {
            BoundReconstructor::Mlp(layers) => {
                layers.iter().flat_map(|l| [l.weight, l.bias]).collect()
            }
            BoundReconstructor::Unfolded(phases) => phases
                .iter()
                .flat_map(|p| [p.rho, p.analysis, p.synthesis, p.theta])
                .collect(),
        }
    }

    /// Runs the reconstructor on a batch of initial estimates `x0` (`N x B`).
    /// `sampling` and `y` are only read by the unfolded family.
    pub fn forward(&self, tape: &mut Tape, x0: Var, y: Var, sampling: MaskedSampling<'_>) -> Result<Var> {
        match self {
            BoundReconstructor::Mlp(layers) => forward_tra(tape, x0, layers),
            BoundReconstructor::Unfolded(phases) => forward_unf(tape, x0, y, sampling, phases),
        }
    }
}

/// `X̂ = X0 + MLP(X0)` with ReLU between layers.
pub fn forward_tra(tape: &mut Tape, x0: Var, layers: &[BoundDense]) -> Result<Var> {
    let mut h = x0;
    for (l, layer) in layers.iter().enumerate() {
        let z = tape.matmul(layer.weight, h)?;
        let z = tape.add_bias(z, layer.bias)?;
        h = if l + 1 < layers.len() { tape.relu(z)? } else { z };
    }
    tape.add(x0, h)
}

/// One unfolded phase.
pub fn forward_phase(
    tape: &mut Tape,
    x_prev: Var,
    y: Var,
    sampling: MaskedSampling<'_>,
    phase: &BoundPhase,
) -> Result<Var> {
    let ax = sampling.apply(tape, x_prev)?;
    let residual = tape.sub(y, ax)?;
    let step = sampling.adjoint(tape, residual)?;
    let step = tape.mul_scalar(step, phase.rho)?;
    let r = tape.add(x_prev, step)?;
    let z = tape.matmul(phase.analysis, r)?;
    let s = tape.soft_threshold(z, phase.theta)?;
    let correction = tape.matmul(phase.synthesis, s)?;
    tape.add(r, correction)
}

pub fn forward_unf(
    tape: &mut Tape,
    x0: Var,
    y: Var,
    sampling: MaskedSampling<'_>,
    phases: &[BoundPhase],
) -> Result<Var> {
    phases
        .iter()
        .try_fold(x0, |x, phase| forward_phase(tape, x, y, sampling, phase))
}
