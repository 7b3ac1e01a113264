//! Temporal consistency loss over a frame sequence, its gradient, the
//! second-difference quadratic form, and the diffusion / total losses.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::report::{Comparison, VerificationReport};
use crate::similarity::{cosine_sim, cosine_sim_grad};
use crate::tensor::{
    frobenius_norm, min_eigenvalue_sym, FeatureTensor, FrameSequence, Matrix, NormWindow,
    RandomSpec, JACOBI_MAX_DIM,
};

pub const MIN_FRAMES: usize = 3;

/// Consecutive-frame similarities `s_t = Sim(F_t, F_{t+1})`, length T−1.
#[derive(Debug, Clone, PartialEq)]
pub struct SimVector {
    values: Vec<f64>,
    frame_count: usize,
}

impl SimVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        let frame_count = values.len() + 1;
        if frame_count < MIN_FRAMES {
            return Err(Error::TooFewFrames {
                frames: frame_count,
                min: MIN_FRAMES,
            });
        }
        if let Some(bad) = values.iter().find(|v| !(v.abs() <= 1.0 + 1e-12)) {
            return Err(Error::InvalidArgument(format!(
                "similarity {bad} outside [-1, 1]"
            )));
        }
        Ok(Self { values, frame_count })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn frame_count(&self) -> usize {
        self.frame_count
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }
}

fn validate(seq: &FrameSequence) -> Result<()> {
    if seq.len() < MIN_FRAMES {
        return Err(Error::TooFewFrames {
            frames: seq.len(),
            min: MIN_FRAMES,
        });
    }
    if let Some(index) = seq.frames().iter().position(|f| frobenius_norm(f) == 0.0) {
        return Err(Error::DegenerateFrame { index });
    }
    Ok(())
}

pub fn sims(seq: &FrameSequence) -> Result<SimVector> {
    validate(seq)?;
    let values = seq
        .frames()
        .windows(2)
        .map(|w| cosine_sim(&w[0], &w[1]))
        .collect::<Result<Vec<_>>>()?;
    SimVector::new(values)
}

/// `(1/(T−1)) Σ_{t=2}^{T−1} (s_t − s_{t−1})²`.
pub fn temporal_loss(seq: &FrameSequence) -> Result<f64> {
    let s = sims(seq)?;
    let t = s.frame_count as f64;
    let sum: f64 = s.values.windows(2).map(|w| (w[1] - w[0]).powi(2)).sum();
    Ok(sum / (t - 1.0))
}

/// Per-frame gradient of [`temporal_loss`].
///
/// Each similarity `s_j` depends on frame j (first slot) and frame j+1
/// (second slot), so both receive a contribution weighted by `∂L/∂s_j`.
pub fn temporal_loss_grad(seq: &FrameSequence) -> Result<Vec<FeatureTensor>> {
    let s = sims(seq)?;
    let weights = sim_weights(&s);
    let frames = seq.frames();
    let mut grads = frames
        .iter()
        .map(|f| FeatureTensor::zeros(f.shape()))
        .collect::<Result<Vec<_>>>()?;
    for (j, w) in weights.iter().enumerate() {
        if *w == 0.0 {
            continue;
        }
        let first = cosine_sim_grad(&frames[j], &frames[j + 1])?;
        let second = cosine_sim_grad(&frames[j + 1], &frames[j])?;
        grads[j] = grads[j].add_scaled(*w, &first)?;
        grads[j + 1] = grads[j + 1].add_scaled(*w, &second)?;
    }
    Ok(grads)
}

/// `∂L/∂s = (2/(T−1)) Dᵀ D s`, written out without materializing D.
fn sim_weights(s: &SimVector) -> Vec<f64> {
    let scale = 2.0 / (s.frame_count as f64 - 1.0);
    let n = s.values.len();
    let mut w = vec![0.0; n];
    for i in 0..n - 1 {
        let diff = s.values[i + 1] - s.values[i];
        w[i + 1] += scale * diff;
        w[i] -= scale * diff;
    }
    w
}

/// Frobenius norm of the stacked gradient.
pub fn gradient_norm(grads: &[FeatureTensor]) -> f64 {
    grads
        .iter()
        .map(|g| g.data().iter().map(|v| v * v).sum::<f64>())
        .sum::<f64>()
        .sqrt()
}

/// The (T−2)×(T−1) matrix with rows `(…, −1, 1, …)`.
pub fn second_difference_matrix(frames: usize) -> Result<Matrix> {
    if frames < MIN_FRAMES {
        return Err(Error::TooFewFrames {
            frames,
            min: MIN_FRAMES,
        });
    }
    let mut d = Matrix::zeros(frames - 2, frames - 1);
    for i in 0..frames - 2 {
        d.set(i, i, -1.0);
        d.set(i, i + 1, 1.0);
    }
    Ok(d)
}

/// `(1/(T−1)) ‖D s‖²`.
pub fn loss_from_sims(s: &SimVector) -> f64 {
    let d = second_difference_matrix(s.frame_count).expect("SimVector guarantees T >= 3");
    let ds = d.matvec(&s.values).expect("D has T-1 columns");
    ds.iter().map(|v| v * v).sum::<f64>() / (s.frame_count as f64 - 1.0)
}

pub const CONVEXITY_ATOL: f64 = 1e-10;

/// Minimum eigenvalue of `DᵀD`; passes iff it is ≥ −1e-10.
pub fn certify_convexity(frames: usize) -> Result<VerificationReport> {
    if !(MIN_FRAMES..=JACOBI_MAX_DIM + 2).contains(&frames) {
        return Err(Error::InvalidArgument(format!(
            "convexity check supports 3 <= T <= {}, got {frames}",
            JACOBI_MAX_DIM + 2
        )));
    }
    let dtd = second_difference_matrix(frames)?.gram();
    let min_eig = min_eigenvalue_sym(&dtd)?;
    Ok(VerificationReport::compare(
        format!("convexity-T{frames}"),
        min_eig,
        0.0,
        Comparison::AtLeastAbsolute,
        CONVEXITY_ATOL,
    )
    .detail("frames", frames as f64))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LipschitzReport {
    pub trials: usize,
    /// Largest observed `‖∇L(F) − ∇L(G)‖ / ‖F − G‖`.
    pub max_ratio: f64,
    /// `16 / m`
    pub bound: f64,
    /// `8 (T−2) / (m (T−1))`, reported only.
    pub stated_bound: f64,
    /// Largest stacked gradient norm seen at the sampled base points.
    pub max_frame_grad_norm: f64,
    /// `16 (T−2) / (m (T−1))`, the per-frame gradient-norm ceiling.
    pub frame_grad_bound: f64,
    pub norm_window: NormWindow,
    pub pass: bool,
}

/// Ratio `‖∇L(F) − ∇L(G)‖ / ‖F − G‖`, or `None` when `F == G`.
pub fn gradient_difference_ratio(f: &FrameSequence, g: &FrameSequence) -> Result<Option<f64>> {
    let dist = f.stacked_distance(g)?;
    if dist == 0.0 {
        return Ok(None);
    }
    let gf = temporal_loss_grad(f)?;
    let gg = temporal_loss_grad(g)?;
    let mut sum = 0.0;
    for (a, b) in gf.iter().zip(&gg) {
        let d = a.distance(b)?;
        sum += d * d;
    }
    Ok(Some(sum.sqrt() / dist))
}

/// Perturbation size relative to the norm floor; well inside the `0.1·m` cap.
const PERTURBATION_SCALE: f64 = 1e-4;
/// Direction refinements per trial after the initial random direction.
const REFINEMENT_STEPS: usize = 8;

/// Empirical Lipschitz constant of the temporal-loss gradient.
///
/// Each trial draws a base sequence `F` in the norm window and a random
/// direction `u`, then evaluates pairs `(F, F + h u)`. The direction is
/// refined by repeatedly setting `u` to the normalized gradient difference
/// (power iteration on the local Hessian), so the ratio approaches the local
/// supremum rather than a random-direction average.
pub fn estimate_lipschitz(
    spec: &RandomSpec,
    frames: usize,
    shape: [usize; 3],
    trials: usize,
) -> Result<LipschitzReport> {
    if trials == 0 {
        return Err(Error::InvalidArgument("trials must be at least 1".into()));
    }
    if frames < MIN_FRAMES {
        return Err(Error::TooFewFrames {
            frames,
            min: MIN_FRAMES,
        });
    }
    let window = spec
        .norm_window
        .ok_or_else(|| Error::InvalidArgument("Lipschitz estimate needs a norm window".into()))?;
    let h = PERTURBATION_SCALE * window.min;
    let per_trial = (0..trials as u64)
        .into_par_iter()
        .map(|i| {
            let mut s = spec.for_trial(i).sampler();
            let f = s.sequence(frames, shape)?;
            let gf = temporal_loss_grad(&f)?;
            let n = f.len() * f.frames()[0].len();
            let mut u = split(&s.unit_vector(n), shape)?;
            let mut best: f64 = 0.0;
            for _ in 0..=REFINEMENT_STEPS {
                let g = f.add_scaled(h, &u)?;
                let gg = temporal_loss_grad(&g)?;
                let diff = gg
                    .iter()
                    .zip(&gf)
                    .map(|(a, b)| a.sub(b))
                    .collect::<Result<Vec<_>>>()?;
                let dist = f.stacked_distance(&g)?;
                if dist == 0.0 {
                    break;
                }
                let dn = gradient_norm(&diff);
                best = best.max(dn / dist);
                if dn == 0.0 {
                    break;
                }
                u = diff.iter().map(|d| d.scaled(1.0 / dn)).collect();
            }
            let grad_max = gf.iter().map(frobenius_norm).fold(0.0, f64::max);
            Ok((best, grad_max))
        })
        .collect::<Result<Vec<_>>>()?;
    let max_ratio = per_trial.iter().map(|p| p.0).fold(0.0, f64::max);
    let max_frame_grad_norm = per_trial.iter().map(|p| p.1).fold(0.0, f64::max);
    let t = frames as f64;
    let bound = 16.0 / window.min;
    Ok(LipschitzReport {
        trials,
        max_ratio,
        bound,
        stated_bound: 8.0 * (t - 2.0) / (window.min * (t - 1.0)),
        max_frame_grad_norm,
        frame_grad_bound: 16.0 * (t - 2.0) / (window.min * (t - 1.0)),
        norm_window: window,
        pass: max_ratio <= bound * (1.0 + 1e-6),
    })
}

fn split(flat: &[f64], shape: [usize; 3]) -> Result<Vec<FeatureTensor>> {
    let n = shape.iter().product::<usize>();
    flat.chunks(n)
        .map(|c| FeatureTensor::new(shape, c.to_vec()))
        .collect()
}

/// Single-sample `‖ε − ε_θ‖²` (sum of squares, no averaging).
pub fn diffusion_loss(eps_true: &FeatureTensor, eps_pred: &FeatureTensor) -> Result<f64> {
    let d = eps_true.sub(eps_pred)?;
    Ok(d.data().iter().map(|v| v * v).sum())
}

/// Weights of the combined objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub temporal: f64,
    pub diffusion: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            temporal: 1.0,
            diffusion: 0.01,
        }
    }
}

pub fn total_loss(l_temporal: f64, l_diffusion: f64, weights: LossWeights) -> f64 {
    weights.temporal * l_temporal + weights.diffusion * l_diffusion
}
