//! Plain gradient descent on the temporal consistency loss, with the frame
//! tensors themselves as parameters.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::temporal::{gradient_norm, sims, temporal_loss, temporal_loss_grad};
use crate::tensor::{frobenius_norm, FrameSequence};

/// Frames whose norm drops below this are treated as collapsed.
pub const COLLAPSE_NORM: f64 = 1e-8;
pub const DEFAULT_GRAD_TOL: f64 = 1e-7;
pub const DEFAULT_STEPS: usize = 1000;
pub const DEFAULT_SAFETY: f64 = 0.9;
const MONOTONE_SLACK: f64 = 1e-12;

/// Record of one descent run. Entry k of each series describes iterate k,
/// so a run of n steps carries n+1 entries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DescentTrajectory {
    pub losses: Vec<f64>,
    pub grad_norms: Vec<f64>,
    pub mean_sims: Vec<f64>,
    pub eta: f64,
    pub steps: usize,
    pub monotone: bool,
    pub converged: bool,
}

impl DescentTrajectory {
    fn new(eta: f64) -> Self {
        Self {
            losses: Vec::new(),
            grad_norms: Vec::new(),
            mean_sims: Vec::new(),
            eta,
            steps: 0,
            monotone: true,
            converged: false,
        }
    }

    fn finish(&mut self) {
        self.monotone = self
            .losses
            .windows(2)
            .all(|w| w[1] <= w[0] + MONOTONE_SLACK);
    }

    /// Largest violation of
    /// `loss(k+1) ≤ loss(k) − η(1 − ηL/2)‖∇(k)‖²` over recorded steps;
    /// non-positive means the inequality held everywhere.
    pub fn max_sufficient_decrease_excess(&self, lipschitz: f64) -> f64 {
        let factor = self.eta * (1.0 - self.eta * lipschitz / 2.0);
        self.losses
            .windows(2)
            .zip(&self.grad_norms)
            .map(|(w, g)| w[1] - (w[0] - factor * g * g))
            .fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Moves every frame by `−η ∇_{F_t} L`.
pub fn descent_step(seq: &FrameSequence, eta: f64) -> Result<FrameSequence> {
    if !(eta.is_finite() && eta >= 0.0) {
        return Err(Error::InvalidArgument(format!("step size {eta} must be finite and nonnegative")));
    }
    let grads = temporal_loss_grad(seq)?;
    step_with(seq, &grads, eta)
}

fn step_with(seq: &FrameSequence, grads: &[crate::tensor::FeatureTensor], eta: f64) -> Result<FrameSequence> {
    let next = seq.add_scaled(-eta, grads)?;
    if let Some(frame) = next.frames().iter().position(|f| frobenius_norm(f) < COLLAPSE_NORM) {
        return Err(Error::DegenerateIterate {
            frame,
            step: None,
            partial: None,
        });
    }
    Ok(next)
}

/// `2 / L`, the exclusive upper limit on stable step sizes.
pub fn max_stable_eta(lipschitz: f64) -> Result<f64> {
    if !(lipschitz > 0.0) || !lipschitz.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "Lipschitz constant must be positive and finite, got {lipschitz}"
        )));
    }
    Ok(2.0 / lipschitz)
}

/// Iterates [`descent_step`] up to `steps` times, stopping early once the
/// stacked gradient norm falls below `grad_tol`.
pub fn run_descent(seq0: &FrameSequence, eta: f64, steps: usize, grad_tol: f64) -> Result<DescentTrajectory> {
    if steps == 0 {
        return Err(Error::InvalidArgument("steps must be at least 1".into()));
    }
    if !(eta.is_finite() && eta >= 0.0) {
        return Err(Error::InvalidArgument(format!("step size {eta} must be finite and nonnegative")));
    }
    let mut traj = DescentTrajectory::new(eta);
    let mut seq = seq0.clone();
    for k in 0..=steps {
        let grads = temporal_loss_grad(&seq)?;
        let gnorm = gradient_norm(&grads);
        traj.losses.push(temporal_loss(&seq)?);
        traj.grad_norms.push(gnorm);
        traj.mean_sims.push(sims(&seq)?.mean());
        if gnorm < grad_tol {
            traj.converged = true;
            break;
        }
        if k == steps {
            break;
        }
        seq = match step_with(&seq, &grads, eta) {
            Ok(next) => next,
            Err(Error::DegenerateIterate { frame, .. }) => {
                traj.finish();
                return Err(Error::DegenerateIterate {
                    frame,
                    step: Some(k),
                    partial: Some(Box::new(traj)),
                });
            }
            Err(e) => return Err(e),
        };
        traj.steps = k + 1;
    }
    traj.finish();
    Ok(traj)
}

/// Mean consecutive cosine similarity at every iterate of a fixed-length run.
pub fn toy_similarity_trajectory(seq0: &FrameSequence, eta: f64, steps: usize) -> Result<Vec<f64>> {
    Ok(run_descent(seq0, eta, steps, 0.0)?.mean_sims)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::temporal::estimate_lipschitz;
    use crate::tensor::{FeatureTensor, NormWindow, RandomSpec};

    fn window() -> NormWindow {
        NormWindow::new(0.5, 2.0).unwrap()
    }

    #[test]
    fn identical_frames_are_a_fixed_point() {
        let f = FeatureTensor::vector(vec![1.0, 2.0, -0.5]).unwrap();
        let s = FrameSequence::new(vec![f; 4]).unwrap();
        assert_eq!(descent_step(&s, 0.3).unwrap(), s);
        let traj = run_descent(&s, 0.3, 10, DEFAULT_GRAD_TOL).unwrap();
        assert_eq!(traj.losses, vec![0.0]);
        assert!(traj.converged && traj.steps == 0);
        assert_eq!(toy_similarity_trajectory(&s, 0.3, 5).unwrap(), vec![1.0; 6]);
    }

    #[test]
    fn zero_step_size_leaves_sequence_unchanged() {
        let s = RandomSpec::gaussian(2).sampler().sequence(4, [2, 2, 2]).unwrap();
        assert_eq!(descent_step(&s, 0.0).unwrap(), s);
        let series = toy_similarity_trajectory(&s, 0.0, 4).unwrap();
        assert!(series.iter().all(|m| *m == series[0]));
    }

    #[test]
    fn small_step_decreases_loss() {
        let spec = RandomSpec::gaussian(0).with_window(window());
        for seed in 0..100 {
            let s = spec.for_trial(seed).sampler().sequence(4, [2, 2, 3]).unwrap();
            let before = temporal_loss(&s).unwrap();
            let after = temporal_loss(&descent_step(&s, 0.01).unwrap()).unwrap();
            assert!(after <= before + 1e-15, "seed {seed}: {after} > {before}");
        }
    }

    #[test]
    fn max_stable_eta_examples() {
        assert_eq!(max_stable_eta(16.0).unwrap(), 0.125);
        assert_eq!(max_stable_eta(2.0).unwrap(), 1.0);
        assert_eq!(max_stable_eta(16.0 / 0.5).unwrap(), 0.0625);
        assert!(max_stable_eta(0.0).is_err());
        assert!(max_stable_eta(-1.0).is_err());
    }

    #[test]
    fn descent_below_threshold_is_monotone() {
        let spec = RandomSpec::gaussian(77).with_window(window());
        let l_hat = estimate_lipschitz(&spec, 5, [2, 2, 3], 100).unwrap().max_ratio;
        let eta = DEFAULT_SAFETY * max_stable_eta(l_hat).unwrap();
        for seed in 0..5 {
            let s = spec.for_trial(1000 + seed).sampler().sequence(5, [2, 2, 3]).unwrap();
            let traj = run_descent(&s, eta, 300, DEFAULT_GRAD_TOL).unwrap();
            assert!(traj.monotone, "seed {seed}");
            assert!(traj.max_sufficient_decrease_excess(l_hat) <= 1e-8);
            assert!(traj.losses.iter().all(|l| *l >= 0.0));
        }
    }

    #[test]
    fn large_step_is_recorded_not_rejected() {
        let spec = RandomSpec::gaussian(78).with_window(window());
        let s = spec.sampler().sequence(5, [2, 2, 3]).unwrap();
        let traj = run_descent(&s, 50.0 * 0.0625, 50, DEFAULT_GRAD_TOL).unwrap();
        assert!(traj.losses.iter().all(|l| l.is_finite()));
    }

    #[test]
    fn determinism() {
        let spec = RandomSpec::gaussian(5).with_window(window());
        let s = spec.sampler().sequence(5, [2, 2, 3]).unwrap();
        let a = run_descent(&s, 0.05, 100, DEFAULT_GRAD_TOL).unwrap();
        let b = run_descent(&s, 0.05, 100, DEFAULT_GRAD_TOL).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn rejects_bad_arguments() {
        let s = RandomSpec::gaussian(5).sampler().sequence(3, [1, 2, 1]).unwrap();
        assert!(run_descent(&s, 0.1, 0, 1e-7).is_err());
        assert!(run_descent(&s, f64::NAN, 3, 1e-7).is_err());
        assert!(descent_step(&s, -1.0).is_err());
    }
}
