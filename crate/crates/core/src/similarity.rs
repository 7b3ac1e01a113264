//! Cosine similarity between feature maps and its closed-form gradient.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Operand, Result};
use crate::tensor::{frobenius_norm, inner_product, FeatureTensor, NormWindow, RandomSpec};

/// Rounding excursions beyond [-1, 1] up to this size are clamped away.
const CLAMP_SLACK: f64 = 1e-12;

fn norms(f: &FeatureTensor, g: &FeatureTensor) -> Result<(f64, f64, f64)> {
    let fg = inner_product(f, g)?;
    let nf = frobenius_norm(f);
    if nf == 0.0 {
        return Err(Error::ZeroNorm { operand: Operand::First });
    }
    let ng = frobenius_norm(g);
    if ng == 0.0 {
        return Err(Error::ZeroNorm { operand: Operand::Second });
    }
    Ok((fg, nf, ng))
}

/// `⟨f, g⟩ / (‖f‖ ‖g‖)`.
pub fn cosine_sim(f: &FeatureTensor, g: &FeatureTensor) -> Result<f64> {
    let (fg, nf, ng) = norms(f, g)?;
    let sim = fg / (nf * ng);
    if sim.abs() > 1.0 + CLAMP_SLACK {
        return Err(Error::Inconsistency(format!(
            "cosine similarity {sim} outside [-1, 1]"
        )));
    }
    Ok(sim.clamp(-1.0, 1.0))
}

/// Gradient of [`cosine_sim`] with respect to its first argument:
/// `g / (‖f‖‖g‖) - ⟨f,g⟩ / (‖f‖³‖g‖) · f`.
///
/// The gradient with respect to the second argument is `cosine_sim_grad(g, f)`.
pub fn cosine_sim_grad(f: &FeatureTensor, g: &FeatureTensor) -> Result<FeatureTensor> {
    let (fg, nf, ng) = norms(f, g)?;
    let a = 1.0 / (nf * ng);
    let b = fg / (nf.powi(3) * ng);
    let data = f
        .data()
        .iter()
        .zip(g.data())
        .map(|(fi, gi)| a * gi - b * fi)
        .collect();
    FeatureTensor::new(f.shape(), data)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimGradReport {
    pub trials: usize,
    pub max_grad_norm: f64,
    /// Certified window bound `2 / m`.
    pub bound: f64,
    /// The literal `2 / M` form, recorded but not asserted.
    pub stated_bound: f64,
    /// Largest `‖∇‖ · ‖f‖ / 2`; the per-sample bound holds iff this is ≤ 1.
    pub max_per_sample_ratio: f64,
    pub norm_window: NormWindow,
    pub pass: bool,
}

/// Samples `trials` pairs with norms in the sampler's window and checks
/// `max ‖∇Sim‖ ≤ 2/m`.
pub fn certify_sim_grad_bound(
    spec: &RandomSpec,
    shape: [usize; 3],
    trials: usize,
) -> Result<SimGradReport> {
    if trials == 0 {
        return Err(Error::InvalidArgument("trials must be at least 1".into()));
    }
    let window = spec
        .norm_window
        .ok_or_else(|| Error::InvalidArgument("gradient bound needs a norm window".into()))?;
    let samples = (0..trials as u64)
        .into_par_iter()
        .map(|i| {
            let mut s = spec.for_trial(i).sampler();
            let f = s.tensor(shape)?;
            let g = s.tensor(shape)?;
            let norm = cosine_sim_grad(&f, &g)?.frobenius_norm();
            Ok((norm, norm * f.frobenius_norm() / 2.0))
        })
        .collect::<Result<Vec<_>>>()?;
    let max_grad_norm = samples.iter().map(|s| s.0).fold(0.0, f64::max);
    let max_per_sample_ratio = samples.iter().map(|s| s.1).fold(0.0, f64::max);
    let bound = 2.0 / window.min;
    Ok(SimGradReport {
        trials,
        max_grad_norm,
        bound,
        stated_bound: 2.0 / window.max,
        max_per_sample_ratio,
        norm_window: window,
        pass: max_grad_norm <= bound * (1.0 + 1e-9),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::fd_gradient;
    use crate::tensor::max_rtol;

    fn v(data: &[f64]) -> FeatureTensor {
        FeatureTensor::vector(data.to_vec()).unwrap()
    }

    #[test]
    fn similarity_examples() {
        assert_eq!(cosine_sim(&v(&[1.0, 0.0]), &v(&[0.0, 1.0])).unwrap(), 0.0);
        let f = v(&[0.3, -2.0, 5.0]);
        assert!((cosine_sim(&f, &f).unwrap() - 1.0).abs() < 1e-15);
        let s = cosine_sim(&v(&[1.0, 1.0]), &v(&[1.0, 0.0])).unwrap();
        assert!((s - 0.7071067811865475).abs() < 1e-15);
    }

    #[test]
    fn zero_norm_names_operand() {
        let z = v(&[0.0, 0.0]);
        let a = v(&[1.0, 0.0]);
        assert!(matches!(
            cosine_sim(&z, &a),
            Err(Error::ZeroNorm { operand: Operand::First })
        ));
        assert!(matches!(
            cosine_sim_grad(&a, &z),
            Err(Error::ZeroNorm { operand: Operand::Second })
        ));
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        assert!(matches!(
            cosine_sim(&v(&[1.0]), &v(&[1.0, 2.0])),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn gradient_examples() {
        let g = cosine_sim_grad(&v(&[1.0, 0.0]), &v(&[0.0, 1.0])).unwrap();
        assert_eq!(g.data(), &[0.0, 1.0]);
        let f = v(&[0.6, 0.8]);
        let g = cosine_sim_grad(&f, &f).unwrap();
        assert!(g.data().iter().all(|x| x.abs() < 1e-15));
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut s = RandomSpec::gaussian(99).sampler();
        let f = s.tensor([3, 3, 2]).unwrap();
        let g = s.tensor([3, 3, 2]).unwrap();
        let closed = cosine_sim_grad(&f, &g).unwrap();
        let fd = fd_gradient(|x| cosine_sim(x, &g), &f, 1e-6).unwrap();
        assert!(max_rtol(closed.data(), fd.data()) <= 1e-5);
    }

    #[test]
    fn single_orthogonal_pair_norm() {
        let g = cosine_sim_grad(&v(&[1.0, 0.0]), &v(&[0.0, 1.0])).unwrap();
        assert_eq!(g.frobenius_norm(), 1.0);
        assert!(g.frobenius_norm() <= 2.0);
    }

    #[test]
    fn certify_unit_window() {
        let spec = RandomSpec::gaussian(1).with_window(NormWindow::new(1.0, 1.0).unwrap());
        let r = certify_sim_grad_bound(&spec, [4, 4, 3], 1000).unwrap();
        assert_eq!(r.bound, 2.0);
        assert!(r.pass && r.max_grad_norm <= 2.0);
        assert!(r.max_per_sample_ratio <= 1.0 + 1e-12);
    }

    #[test]
    fn certify_wide_window() {
        let spec = RandomSpec::gaussian(2).with_window(NormWindow::new(0.5, 2.0).unwrap());
        let r = certify_sim_grad_bound(&spec, [4, 4, 3], 1000).unwrap();
        assert_eq!(r.bound, 4.0);
        assert_eq!(r.stated_bound, 1.0);
        assert!(r.pass);
    }

    #[test]
    fn certify_requires_window_and_trials() {
        assert!(certify_sim_grad_bound(&RandomSpec::gaussian(0), [1, 2, 1], 10).is_err());
        let spec = RandomSpec::gaussian(0).with_window(NormWindow::new(1.0, 1.0).unwrap());
        assert!(certify_sim_grad_bound(&spec, [1, 2, 1], 0).is_err());
    }
}
