//! Filtered DDIM inversion: schedules, the inversion step, the per-step
//! contraction constant, and Monte-Carlo error propagation.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bilateral::{bilateral_filter, BilateralParams, Latent2D};
use crate::error::{Error, Result};
use crate::tensor::{spectral_norm_lenient, Matrix, RandomSpec};

/// `1 − ᾱ_t` at or below this is treated as zero.
pub const SINGULAR_EPS: f64 = 1e-12;

/// Per-step `α_t` for `t = 1..=T`, with cumulative products `ᾱ_t`.
///
/// `α_0 := 1` and `ᾱ_0 := 1`, so the last inversion step adds no noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiffusionSchedule {
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
}

impl DiffusionSchedule {
    pub fn from_alphas(alpha: Vec<f64>) -> Result<Self> {
        if alpha.is_empty() {
            return Err(Error::InvalidArgument("schedule needs at least one step".into()));
        }
        if let Some(bad) = alpha.iter().find(|a| !(**a > 0.0 && **a <= 1.0)) {
            return Err(Error::InvalidArgument(format!("alpha {bad} outside (0, 1]")));
        }
        let alpha_bar = alpha
            .iter()
            .scan(1.0, |acc, a| {
                *acc *= a;
                Some(*acc)
            })
            .collect();
        Ok(Self { alpha, alpha_bar })
    }

    pub fn constant(steps: usize, alpha: f64) -> Result<Self> {
        Self::from_alphas(vec![alpha; steps])
    }

    pub fn steps(&self) -> usize {
        self.alpha.len()
    }

    /// `α_t` for `0 ≤ t ≤ T`.
    pub fn alpha(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha[t - 1]
        }
    }

    /// `ᾱ_t` for `0 ≤ t ≤ T`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bar[t - 1]
        }
    }

    fn check_step(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(Error::InvalidArgument(format!(
                "step {t} outside 1..={}",
                self.steps()
            )));
        }
        Ok(())
    }

    /// `(1 − α_t) / √(1 − ᾱ_t)`, zero when `α_t = 1`.
    pub fn eps_coefficient(&self, t: usize) -> Result<f64> {
        self.check_step(t)?;
        eps_coefficient(self.alpha(t), self.alpha_bar(t), t)
    }
}

fn eps_coefficient(alpha: f64, alpha_bar: f64, t: usize) -> Result<f64> {
    if alpha == 1.0 {
        return Ok(0.0);
    }
    let one_minus_bar = 1.0 - alpha_bar;
    if one_minus_bar <= SINGULAR_EPS {
        return Err(Error::SingularSchedule {
            t,
            one_minus_alpha_bar: one_minus_bar,
        });
    }
    Ok((1.0 - alpha) / one_minus_bar.sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum PredictorKind {
    Zero,
    ScaledIdentity { c: f64 },
    RandomLinear { seed: u64, target_spectral_norm: f64 },
}

/// Noise predictor with a certified Lipschitz constant; it ignores the timestep.
#[derive(Debug, Clone, PartialEq)]
pub struct LipschitzPredictor {
    kind: PredictorKind,
    matrix: Option<Matrix>,
    l_eps: f64,
}

impl LipschitzPredictor {
    pub fn zero() -> Self {
        Self {
            kind: PredictorKind::Zero,
            matrix: None,
            l_eps: 0.0,
        }
    }

    pub fn scaled_identity(c: f64) -> Self {
        Self {
            kind: PredictorKind::ScaledIdentity { c },
            matrix: None,
            l_eps: c.abs(),
        }
    }

    /// Random Gaussian `dim×dim` map rescaled to the target spectral norm;
    /// `l_eps` is the re-measured norm of the stored matrix.
    pub fn random_linear(seed: u64, dim: usize, target_spectral_norm: f64) -> Result<Self> {
        if dim == 0 || !(target_spectral_norm >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "random-linear predictor needs dim > 0 and target >= 0, got {dim}, {target_spectral_norm}"
            )));
        }
        let raw = RandomSpec::gaussian(seed).sampler().gaussian_matrix(dim, dim);
        let norm = spectral_norm_lenient(&raw);
        let matrix = raw.scaled(if norm > 0.0 { target_spectral_norm / norm } else { 0.0 });
        let l_eps = spectral_norm_lenient(&matrix);
        Ok(Self {
            kind: PredictorKind::RandomLinear {
                seed,
                target_spectral_norm,
            },
            matrix: Some(matrix),
            l_eps,
        })
    }

    /// Builds the predictor described by `kind` for latents of `dim` pixels.
    pub fn from_kind(kind: PredictorKind, dim: usize) -> Result<Self> {
        match kind {
            PredictorKind::Zero => Ok(Self::zero()),
            PredictorKind::ScaledIdentity { c } => Ok(Self::scaled_identity(c)),
            PredictorKind::RandomLinear {
                seed,
                target_spectral_norm,
            } => Self::random_linear(seed, dim, target_spectral_norm),
        }
    }

    pub fn kind(&self) -> PredictorKind {
        self.kind
    }

    pub fn l_eps(&self) -> f64 {
        self.l_eps
    }

    pub fn matrix(&self) -> Option<&Matrix> {
        self.matrix.as_ref()
    }

    /// Entry `(i, j)` of the predictor viewed as a linear map.
    pub fn coefficient(&self, i: usize, j: usize) -> f64 {
        match (&self.kind, &self.matrix) {
            (PredictorKind::ScaledIdentity { c }, _) => {
                if i == j {
                    *c
                } else {
                    0.0
                }
            }
            (PredictorKind::RandomLinear { .. }, Some(m)) => m.get(i, j),
            _ => 0.0,
        }
    }

    pub fn apply(&self, x: &Latent2D) -> Result<Latent2D> {
        let (h, w) = x.shape();
        match &self.kind {
            PredictorKind::Zero => Latent2D::filled(h, w, 0.0),
            PredictorKind::ScaledIdentity { c } => Ok(x.map(|v| c * v)),
            PredictorKind::RandomLinear { .. } => {
                let m = self.matrix.as_ref().expect("random-linear carries its matrix");
                Latent2D::new(h, w, m.matvec(x.data())?)
            }
        }
    }
}

/// One filtered inversion step:
/// `x_{t−1} = (B(x_t) − k ε(B(x_t))) / √α_t + √(1 − α_{t−1}) z`,
/// with `k = (1 − α_t) / √(1 − ᾱ_t)`.
pub fn ddim_inversion_step(
    x_t: &Latent2D,
    sched: &DiffusionSchedule,
    t: usize,
    pred: &LipschitzPredictor,
    z: &Latent2D,
    p: &BilateralParams,
) -> Result<Latent2D> {
    x_t.check_same_shape(z)?;
    let k = sched.eps_coefficient(t)?;
    let filtered = bilateral_filter(x_t, p)?;
    let eps = pred.apply(&filtered)?;
    let inv_sqrt_alpha = 1.0 / sched.alpha(t).sqrt();
    let noise_scale = (1.0 - sched.alpha(t - 1)).sqrt();
    let core = filtered.zip_with(&eps, |x, e| inv_sqrt_alpha * (x - k * e))?;
    core.zip_with(z, |c, zi| c + noise_scale * zi)
}

/// Noiseless, unfiltered step used for the ideal trajectory.
pub fn ideal_step(
    x_t: &Latent2D,
    sched: &DiffusionSchedule,
    t: usize,
    pred: &LipschitzPredictor,
) -> Result<Latent2D> {
    let k = sched.eps_coefficient(t)?;
    let eps = pred.apply(x_t)?;
    let inv_sqrt_alpha = 1.0 / sched.alpha(t).sqrt();
    x_t.zip_with(&eps, |x, e| inv_sqrt_alpha * (x - k * e))
}

/// `x_{t+1} = x_t + ε_t − θ(x_t, t)`.
pub fn decoder_step(x_t: &Latent2D, eps_t: &Latent2D, theta_out: &Latent2D) -> Result<Latent2D> {
    let residual = eps_t.zip_with(theta_out, |e, th| e - th)?;
    x_t.zip_with(&residual, |x, r| x + r)
}

/// `1/√α + (1 − α) / √(α (1 − ᾱ)) · L_ε`, exactly 1 when `α = 1`.
pub fn contraction_factor(alpha: f64, alpha_bar: f64, l_eps: f64) -> Result<f64> {
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(Error::InvalidArgument(format!("alpha {alpha} outside (0, 1]")));
    }
    if l_eps < 0.0 {
        return Err(Error::InvalidArgument(format!("L_eps {l_eps} is negative")));
    }
    if alpha == 1.0 {
        return Ok(1.0);
    }
    let one_minus_bar = 1.0 - alpha_bar;
    if one_minus_bar <= SINGULAR_EPS {
        return Err(Error::SingularSchedule {
            t: 0,
            one_minus_alpha_bar: one_minus_bar,
        });
    }
    Ok(1.0 / alpha.sqrt() + (1.0 - alpha) / (alpha * one_minus_bar).sqrt() * l_eps)
}

pub fn contraction_constant(sched: &DiffusionSchedule, t: usize, l_eps: f64) -> Result<f64> {
    sched.check_step(t)?;
    contraction_factor(sched.alpha(t), sched.alpha_bar(t), l_eps).map_err(|e| match e {
        Error::SingularSchedule {
            one_minus_alpha_bar, ..
        } => Error::SingularSchedule {
            t,
            one_minus_alpha_bar,
        },
        other => other,
    })
}

/// Straight-line per-pixel re-implementation of the filtered inversion step,
/// sharing no code with [`ddim_inversion_step`]; used as its oracle.
#[allow(clippy::needless_range_loop)]
pub mod reference {
    use super::*;

    pub fn inversion_step(
        x_t: &Latent2D,
        sched: &DiffusionSchedule,
        t: usize,
        pred: &LipschitzPredictor,
        z: &Latent2D,
        p: &BilateralParams,
    ) -> Vec<f64> {
        let (h, w) = x_t.shape();
        let n = h * w;
        let r = p.radius as i64;
        let x = x_t.data();
        let mut filtered = vec![0.0; n];
        for i in 0..h as i64 {
            for j in 0..w as i64 {
                let xc = x[(i * w as i64 + j) as usize];
                let mut num = 0.0;
                let mut den = 0.0;
                for di in -r..=r {
                    for dj in -r..=r {
                        let (a, b) = (i + di, j + dj);
                        if a < 0 || b < 0 || a >= h as i64 || b >= w as i64 {
                            continue;
                        }
                        let xn = x[(a * w as i64 + b) as usize];
                        let gs = (-((di * di + dj * dj) as f64)
                            / (2.0 * p.sigma_spatial * p.sigma_spatial))
                            .exp();
                        let gi = (-((xn - xc) * (xn - xc))
                            / (2.0 * p.sigma_intensity * p.sigma_intensity))
                            .exp();
                        num += gs * gi * xn;
                        den += gs * gi;
                    }
                }
                filtered[(i * w as i64 + j) as usize] = num / den;
            }
        }
        let a_t = sched.alpha(t);
        let a_bar = sched.alpha_bar(t);
        let a_prev = sched.alpha(t - 1);
        let mut out = vec![0.0; n];
        for i in 0..n {
            let mut eps = 0.0;
            for j in 0..n {
                eps += pred.coefficient(i, j) * filtered[j];
            }
            let k = if a_t == 1.0 { 0.0 } else { (1.0 - a_t) / (1.0 - a_bar).sqrt() };
            out[i] = (filtered[i] - k * eps) / a_t.sqrt() + (1.0 - a_prev).sqrt() * z.data()[i];
        }
        out
    }
}

/// Inputs for [`simulate_error_propagation`].
#[derive(Debug, Clone)]
pub struct ErrorPropagationSetup {
    pub schedule: DiffusionSchedule,
    pub params: BilateralParams,
    pub predictor: LipschitzPredictor,
    /// Initial error norm `‖x_T − x̄_T‖₂`.
    pub delta: f64,
    pub shape: (usize, usize),
    pub trials: usize,
    /// Constant value of the ideal latent `x̄_T`.
    pub ideal_level: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepError {
    /// Step index t; the entry describes the error after the t → t−1 update.
    pub t: usize,
    pub mean_error: f64,
    /// `C_t · (measured mean at t) + √(1 − α_{t−1}) · √d`
    pub bound: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorPropagationReport {
    pub per_step: Vec<StepError>,
    pub initial_error: f64,
    pub final_error: f64,
    /// Larger of `bound_forward` and `bound_unrolled`.
    pub final_bound: f64,
    /// `C^T δ + √d Σ_t C^{t−1} √(1 − α_{t−1})`
    pub bound_forward: f64,
    /// `C^T δ + √d Σ_t C^{T−t} √(1 − α_{t−1})`
    pub bound_unrolled: f64,
    /// Largest per-step contraction constant over the schedule.
    pub contraction_constant: f64,
    pub dimension: usize,
    pub trials: usize,
    pub pass: bool,
}

/// Monte-Carlo slack on expected-error comparisons.
pub const MC_SLACK: f64 = 0.05;

/// Runs paired ideal / noisy trajectories from `t = T` down to 0 and checks
/// the per-step and unrolled expected-error bounds with 5% slack.
pub fn simulate_error_propagation(
    setup: &ErrorPropagationSetup,
    spec: &RandomSpec,
) -> Result<ErrorPropagationReport> {
    if setup.trials < 10 {
        return Err(Error::InvalidArgument(format!(
            "error propagation needs at least 10 trials, got {}",
            setup.trials
        )));
    }
    if !(setup.delta >= 0.0) {
        return Err(Error::InvalidArgument(format!("delta {} is negative", setup.delta)));
    }
    let sched = &setup.schedule;
    let steps = sched.steps();
    let (h, w) = setup.shape;
    let d = h * w;
    let l_eps = setup.predictor.l_eps();
    let constants = (1..=steps)
        .map(|t| contraction_constant(sched, t, l_eps))
        .collect::<Result<Vec<_>>>()?;

    // errors[k] is ‖x_{T−k} − x̄_{T−k}‖ for k = 0..=T
    let runs = (0..setup.trials as u64)
        .into_par_iter()
        .map(|i| {
            let mut s = spec.for_trial(i).sampler();
            let mut ideal = Latent2D::filled(h, w, setup.ideal_level)?;
            let dir = s.unit_vector(d);
            let mut x = ideal.zip_with(
                &Latent2D::new(h, w, dir)?,
                |a, u| a + setup.delta * u,
            )?;
            let mut errors = Vec::with_capacity(steps + 1);
            errors.push(x.sub(&ideal)?.l2_norm());
            for t in (1..=steps).rev() {
                let z = Latent2D::new(h, w, s.gaussians(d))?;
                x = ddim_inversion_step(&x, sched, t, &setup.predictor, &z, &setup.params)?;
                ideal = ideal_step(&ideal, sched, t, &setup.predictor)?;
                errors.push(x.sub(&ideal)?.l2_norm());
            }
            Ok(errors)
        })
        .collect::<Result<Vec<_>>>()?;

    let n = setup.trials as f64;
    let means: Vec<f64> = (0..=steps)
        .map(|k| runs.iter().map(|r| r[k]).sum::<f64>() / n)
        .collect();
    let sqrt_d = (d as f64).sqrt();
    let mut per_step = Vec::with_capacity(steps);
    for (k, t) in (1..=steps).rev().enumerate() {
        let noise = (1.0 - sched.alpha(t - 1)).sqrt() * sqrt_d;
        per_step.push(StepError {
            t,
            mean_error: means[k + 1],
            bound: constants[t - 1] * means[k] + noise,
        });
    }

    let c = constants.iter().copied().fold(0.0, f64::max);
    let head = c.powi(steps as i32) * setup.delta;
    let mut forward = 0.0;
    let mut unrolled = 0.0;
    for t in 1..=steps {
        let noise = (1.0 - sched.alpha(t - 1)).sqrt();
        forward += c.powi(t as i32 - 1) * noise;
        unrolled += c.powi((steps - t) as i32) * noise;
    }
    let bound_forward = head + sqrt_d * forward;
    let bound_unrolled = head + sqrt_d * unrolled;
    let final_bound = bound_forward.max(bound_unrolled);
    let final_error = means[steps];
    let pass = per_step
        .iter()
        .all(|s| s.mean_error <= s.bound * (1.0 + MC_SLACK))
        && final_error <= final_bound * (1.0 + MC_SLACK);
    Ok(ErrorPropagationReport {
        per_step,
        initial_error: means[0],
        final_error,
        final_bound,
        bound_forward,
        bound_unrolled,
        contraction_constant: c,
        dimension: d,
        trials: setup.trials,
        pass,
    })
}
