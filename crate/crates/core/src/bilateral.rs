//! Edge-preserving bilateral filtering of single-channel 2-D latents.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::report::{Comparison, VerificationReport};
use crate::tensor::RandomSpec;

#[derive(Debug, Clone, PartialEq)]
pub struct Latent2D {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Latent2D {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::InvalidShape(format!("latent {height}x{width} is empty")));
        }
        if data.len() != height * width {
            return Err(Error::InvalidShape(format!(
                "latent {height}x{width} needs {} values, got {}",
                height * width,
                data.len()
            )));
        }
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Result<Self> {
        Self::new(height, width, vec![value; height * width])
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.width + col]
    }

    pub fn check_same_shape(&self, other: &Self) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::ShapeMismatch {
                left: vec![self.height, self.width],
                right: vec![other.height, other.width],
            });
        }
        Ok(())
    }

    /// Elementwise combination of two latents of equal shape.
    pub fn zip_with(&self, other: &Self, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        self.check_same_shape(other)?;
        Ok(Self {
            height: self.height,
            width: self.width,
            data: self.data.iter().zip(&other.data).map(|(a, b)| f(*a, *b)).collect(),
        })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|v| f(*v)).collect(),
        }
    }

    pub fn l2_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, |a, b| a - b)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Boundary {
    /// The square window is truncated to in-bounds pixels.
    Clamp,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BilateralParams {
    pub sigma_spatial: f64,
    pub sigma_intensity: f64,
    pub radius: usize,
    pub boundary: Boundary,
}

impl BilateralParams {
    pub fn new(sigma_spatial: f64, sigma_intensity: f64, radius: usize) -> Result<Self> {
        let p = Self {
            sigma_spatial,
            sigma_intensity,
            radius,
            boundary: Boundary::Clamp,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_spatial > 0.0 && self.sigma_intensity > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "bilateral sigmas must be positive, got spatial={} intensity={}",
                self.sigma_spatial, self.sigma_intensity
            )));
        }
        Ok(())
    }
}

impl Default for BilateralParams {
    fn default() -> Self {
        Self {
            sigma_spatial: 2.0,
            sigma_intensity: 0.5,
            radius: 2,
            boundary: Boundary::Clamp,
        }
    }
}

/// Normalized weights `(neighbor index, w)` for output pixel `(row, col)`.
pub fn bilateral_weights(x: &Latent2D, p: &BilateralParams, row: usize, col: usize) -> Vec<(usize, f64)> {
    let r = p.radius;
    let center = x.get(row, col);
    let two_ss = 2.0 * p.sigma_spatial * p.sigma_spatial;
    let two_si = 2.0 * p.sigma_intensity * p.sigma_intensity;
    let mut out = Vec::with_capacity((2 * r + 1).pow(2));
    let mut total = 0.0;
    for nr in row.saturating_sub(r)..=(row + r).min(x.height - 1) {
        for nc in col.saturating_sub(r)..=(col + r).min(x.width - 1) {
            let dr = nr as f64 - row as f64;
            let dc = nc as f64 - col as f64;
            let di = x.get(nr, nc) - center;
            let w = (-(dr * dr + dc * dc) / two_ss).exp() * (-(di * di) / two_si).exp();
            total += w;
            out.push((nr * x.width + nc, w));
        }
    }
    for (_, w) in &mut out {
        *w /= total;
    }
    out
}

pub fn bilateral_filter(x: &Latent2D, p: &BilateralParams) -> Result<Latent2D> {
    p.validate()?;
    if p.radius > x.height.min(x.width) {
        return Err(Error::InvalidArgument(format!(
            "radius {} exceeds latent extent {}x{}",
            p.radius, x.height, x.width
        )));
    }
    if p.radius == 0 {
        return Ok(x.clone());
    }
    let mut data = Vec::with_capacity(x.len());
    for row in 0..x.height {
        for col in 0..x.width {
            // offsets from the center keep constant regions exactly fixed
            let center = x.get(row, col);
            let shift: f64 = bilateral_weights(x, p, row, col)
                .into_iter()
                .map(|(i, w)| w * (x.data[i] - center))
                .sum();
            data.push(center + shift);
        }
    }
    Latent2D::new(x.height, x.width, data)
}

/// Channelwise filtering of a multi-channel latent.
pub fn bilateral_filter_channels(channels: &[Latent2D], p: &BilateralParams) -> Result<Vec<Latent2D>> {
    channels.iter().map(|c| bilateral_filter(c, p)).collect()
}

/// Worst deviation from 1 of any pixel's weight sum, and the smallest weight.
pub fn weight_diagnostics(x: &Latent2D, p: &BilateralParams) -> (f64, f64) {
    let mut worst_sum: f64 = 0.0;
    let mut min_weight = f64::INFINITY;
    for row in 0..x.height {
        for col in 0..x.width {
            let w = bilateral_weights(x, p, row, col);
            let s: f64 = w.iter().map(|(_, v)| v).sum();
            worst_sum = worst_sum.max((s - 1.0).abs());
            min_weight = w.iter().map(|(_, v)| *v).fold(min_weight, f64::min);
        }
    }
    (worst_sum, min_weight)
}

pub const NONEXPANSIVE_ATOL: f64 = 1e-12;

/// `‖B(x) − x̄‖₂ / ‖x − x̄‖₂`, defined as 0 when both sides vanish.
pub fn error_ratio(x: &Latent2D, ideal: &Latent2D, p: &BilateralParams) -> Result<f64> {
    let before = x.sub(ideal)?.l2_norm();
    let after = bilateral_filter(x, p)?.sub(ideal)?.l2_norm();
    if before == 0.0 {
        return Ok(if after == 0.0 { 0.0 } else { f64::INFINITY });
    }
    Ok(after / before)
}

/// Non-expansiveness around a constant ideal latent, plus a diagnostic for
/// general ideal latents.
///
/// (a) `x̄` is a random constant image and `x = x̄ + noise`; asserts
/// `‖B(x) − x̄‖_∞ ≤ ‖x − x̄‖_∞ + 1e-12` and
/// `‖B(x) − x̄‖₂ ≤ √(HW)·‖x − x̄‖_∞`.
/// (b) `x̄` is a random image; the ratio `‖B(x) − x̄‖₂ / ‖x − x̄‖₂` is only
/// recorded in `details`.
pub fn certify_nonexpansive(
    p: &BilateralParams,
    spec: &RandomSpec,
    shape: (usize, usize),
    trials: usize,
) -> Result<VerificationReport> {
    if trials == 0 {
        return Err(Error::InvalidArgument("trials must be at least 1".into()));
    }
    let (h, w) = shape;
    let n = h * w;
    let mut max_inf_excess = f64::NEG_INFINITY;
    let mut l2_ok = true;
    let mut general_max_ratio: f64 = 0.0;
    for i in 0..trials as u64 {
        let mut s = spec.for_trial(i).sampler();
        let level = s.gaussian();
        let ideal = Latent2D::filled(h, w, level)?;
        let noise = s.unit_vector(n);
        let x = Latent2D::new(h, w, ideal.data.iter().zip(&noise).map(|(a, b)| a + b).collect())?;
        let err_in = x.sub(&ideal)?.max_abs();
        let out = bilateral_filter(&x, p)?.sub(&ideal)?;
        max_inf_excess = max_inf_excess.max(out.max_abs() - err_in);
        l2_ok &= out.l2_norm() <= (n as f64).sqrt() * err_in + NONEXPANSIVE_ATOL;

        let ideal = Latent2D::new(h, w, s.gaussians(n))?;
        let scale = 0.1;
        let x = Latent2D::new(
            h,
            w,
            ideal.data.iter().zip(s.gaussians(n)).map(|(a, b)| a + scale * b).collect(),
        )?;
        general_max_ratio = general_max_ratio.max(error_ratio(&x, &ideal, p)?);
    }
    Ok(VerificationReport::compare(
        "bilateral-nonexpansive",
        max_inf_excess,
        0.0,
        Comparison::AtMostAbsolute,
        NONEXPANSIVE_ATOL,
    )
    .trials(trials)
    .seed(spec.seed)
    .require(l2_ok, "l2 error within sqrt(HW) times sup error")
    .detail("general_regime_max_l2_ratio", general_max_ratio)
    .note("measured = max(‖B(x)−x̄‖∞ − ‖x−x̄‖∞) over constant ideals; general-regime ratio is diagnostic only"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::max_rtol;

    fn random_latent(seed: u64, h: usize, w: usize) -> Latent2D {
        Latent2D::new(h, w, RandomSpec::gaussian(seed).sampler().gaussians(h * w)).unwrap()
    }

    #[test]
    fn constant_image_is_fixed() {
        let x = Latent2D::filled(6, 5, 0.7).unwrap();
        assert_eq!(bilateral_filter(&x, &BilateralParams::default()).unwrap(), x);
    }

    #[test]
    fn radius_zero_is_identity() {
        let x = random_latent(1, 5, 5);
        let p = BilateralParams::new(1.0, 0.3, 0).unwrap();
        assert_eq!(bilateral_filter(&x, &p).unwrap(), x);
    }

    #[test]
    fn huge_intensity_sigma_is_a_spatial_gaussian() {
        let x = random_latent(2, 7, 6);
        let p = BilateralParams::new(1.5, 1e12, 2).unwrap();
        let got = bilateral_filter(&x, &p).unwrap();
        // straight Gaussian-window convolution with truncated borders
        let mut expected = Vec::new();
        for r in 0..7i64 {
            for c in 0..6i64 {
                let (mut num, mut den) = (0.0, 0.0);
                for dr in -2i64..=2 {
                    for dc in -2i64..=2 {
                        let (nr, nc) = (r + dr, c + dc);
                        if nr < 0 || nc < 0 || nr >= 7 || nc >= 6 {
                            continue;
                        }
                        let g = (-((dr * dr + dc * dc) as f64) / (2.0 * 1.5 * 1.5)).exp();
                        num += g * x.get(nr as usize, nc as usize);
                        den += g;
                    }
                }
                expected.push(num / den);
            }
        }
        assert!(max_rtol(got.data(), &expected) <= 1e-6);
    }

    #[test]
    fn weights_are_a_partition_of_unity() {
        for seed in 0..20 {
            let x = random_latent(seed, 8, 8);
            let (worst, min_w) = weight_diagnostics(&x, &BilateralParams::default());
            assert!(worst <= 1e-12 && min_w >= 0.0);
        }
    }

    #[test]
    fn rejects_bad_params() {
        assert!(BilateralParams::new(0.0, 1.0, 1).is_err());
        assert!(BilateralParams::new(1.0, -1.0, 1).is_err());
        let x = random_latent(3, 2, 2);
        let p = BilateralParams::new(1.0, 1.0, 3).unwrap();
        assert!(bilateral_filter(&x, &p).is_err());
    }

    #[test]
    fn nonexpansive_constant_regime() {
        let r = certify_nonexpansive(&BilateralParams::default(), &RandomSpec::gaussian(4), (8, 8), 500).unwrap();
        assert!(r.pass, "{r:?}");
        assert!(r.details["general_regime_max_l2_ratio"].is_finite());
    }

    #[test]
    fn identical_inputs_give_zero_ratio() {
        let ideal = Latent2D::filled(5, 5, -0.4).unwrap();
        assert_eq!(error_ratio(&ideal, &ideal, &BilateralParams::default()).unwrap(), 0.0);
    }

    #[test]
    fn step_image_ratio_is_recorded() {
        let ideal = Latent2D::new(6, 6, (0..36).map(|i| if i % 6 < 3 { 0.0 } else { 1.0 }).collect()).unwrap();
        let mut s = RandomSpec::gaussian(12).sampler();
        let x = ideal.zip_with(&Latent2D::new(6, 6, s.gaussians(36)).unwrap(), |a, b| a + 0.01 * b).unwrap();
        let ratio = error_ratio(&x, &ideal, &BilateralParams::default()).unwrap();
        assert!(ratio.is_finite() && ratio > 0.0);
    }

    #[test]
    fn channelwise_filter_matches_per_channel_calls() {
        let a = random_latent(10, 4, 4);
        let b = random_latent(11, 4, 4);
        let p = BilateralParams::default();
        let both = bilateral_filter_channels(&[a.clone(), b.clone()], &p).unwrap();
        assert_eq!(both[0], bilateral_filter(&a, &p).unwrap());
        assert_eq!(both[1], bilateral_filter(&b, &p).unwrap());
    }
}
