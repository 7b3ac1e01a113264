//! Dense small-tensor and small-matrix primitives.
//!
//! Everything here is sized for desk-scale verification: tensors of a few
//! hundred entries and matrices up to 256×256. Tensors are stored row-major
//! (H, then W, then C) and every norm treats them as one flat vector.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Relative error `|lhs - rhs| / max(1, |rhs|)`, the library-wide tolerance convention.
pub fn rtol(lhs: f64, rhs: f64) -> f64 {
    (lhs - rhs).abs() / rhs.abs().max(1.0)
}

/// Largest [`rtol`] over paired slices.
pub fn max_rtol(lhs: &[f64], rhs: &[f64]) -> f64 {
    lhs.iter()
        .zip(rhs)
        .map(|(a, b)| rtol(*a, *b))
        .fold(0.0, f64::max)
}

/// A dense real tensor of shape H×W×C.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTensor {
    shape: [usize; 3],
    data: Vec<f64>,
}

impl FeatureTensor {
    pub fn new(shape: [usize; 3], data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::InvalidShape(format!(
                "tensor shape {shape:?} has a zero extent"
            )));
        }
        let expected = shape.iter().product::<usize>();
        if data.len() != expected {
            return Err(Error::InvalidShape(format!(
                "shape {shape:?} needs {expected} values, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    /// A 1×n×1 tensor, convenient for vector-like examples.
    pub fn vector(data: Vec<f64>) -> Result<Self> {
        Self::new([1, data.len(), 1], data)
    }

    pub fn zeros(shape: [usize; 3]) -> Result<Self> {
        Self::new(shape, vec![0.0; shape.iter().product()])
    }

    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn frobenius_norm(&self) -> f64 {
        frobenius_norm(self)
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            shape: self.shape,
            data: self.data.iter().map(|v| v * factor).collect(),
        }
    }

    /// `self + factor * other`.
    pub fn add_scaled(&self, factor: f64, other: &Self) -> Result<Self> {
        check_same_shape(self, other)?;
        Ok(Self {
            shape: self.shape,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| a + factor * b)
                .collect(),
        })
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.add_scaled(-1.0, other)
    }

    /// Frobenius distance between two tensors of equal shape.
    pub fn distance(&self, other: &Self) -> Result<f64> {
        Ok(self.sub(other)?.frobenius_norm())
    }
}

fn check_same_shape(a: &FeatureTensor, b: &FeatureTensor) -> Result<()> {
    if a.shape != b.shape {
        return Err(Error::ShapeMismatch {
            left: a.shape.to_vec(),
            right: b.shape.to_vec(),
        });
    }
    Ok(())
}

pub fn frobenius_norm(t: &FeatureTensor) -> f64 {
    t.data.iter().map(|v| v * v).sum::<f64>().sqrt()
}

pub fn inner_product(a: &FeatureTensor, b: &FeatureTensor) -> Result<f64> {
    check_same_shape(a, b)?;
    Ok(a.data.iter().zip(&b.data).map(|(x, y)| x * y).sum())
}

/// Ordered list of frames sharing one shape.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameSequence {
    frames: Vec<FeatureTensor>,
}

impl FrameSequence {
    pub fn new(frames: Vec<FeatureTensor>) -> Result<Self> {
        let Some(first) = frames.first() else {
            return Err(Error::TooFewFrames { frames: 0, min: 1 });
        };
        let shape = first.shape();
        if let Some(bad) = frames.iter().find(|f| f.shape() != shape) {
            return Err(Error::ShapeMismatch {
                left: shape.to_vec(),
                right: bad.shape().to_vec(),
            });
        }
        Ok(Self { frames })
    }

    pub fn frames(&self) -> &[FeatureTensor] {
        &self.frames
    }

    pub fn into_frames(self) -> Vec<FeatureTensor> {
        self.frames
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn shape(&self) -> [usize; 3] {
        self.frames[0].shape()
    }

    /// Norm of the whole sequence viewed as one stacked vector.
    pub fn stacked_norm(&self) -> f64 {
        self.frames
            .iter()
            .map(|f| f.data().iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    pub fn stacked_distance(&self, other: &Self) -> Result<f64> {
        if self.len() != other.len() {
            return Err(Error::DimensionMismatch(format!(
                "sequences of length {} and {}",
                self.len(),
                other.len()
            )));
        }
        let mut sum = 0.0;
        for (a, b) in self.frames.iter().zip(&other.frames) {
            let d = a.distance(b)?;
            sum += d * d;
        }
        Ok(sum.sqrt())
    }

    /// `self + factor * direction`, frame by frame.
    pub fn add_scaled(&self, factor: f64, direction: &[FeatureTensor]) -> Result<Self> {
        if direction.len() != self.len() {
            return Err(Error::DimensionMismatch(format!(
                "direction has {} frames, sequence has {}",
                direction.len(),
                self.len()
            )));
        }
        let frames = self
            .frames
            .iter()
            .zip(direction)
            .map(|(f, d)| f.add_scaled(factor, d))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { frames })
    }
}

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    /// Builds a matrix; a zero extent is allowed only for empty blocks.
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::InvalidShape(format!(
                "{rows}x{cols} matrix needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn diag(values: &[f64]) -> Self {
        let n = values.len();
        let mut m = Self::zeros(n, n);
        for (i, v) in values.iter().enumerate() {
            m.data[i * n + i] = *v;
        }
        m
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::InvalidShape("ragged rows".into()));
        }
        Self::new(rows.len(), cols, rows.concat())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.rows == 0 || self.cols == 0
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, value: f64) {
        self.data[i * self.cols + j] = value;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn transpose(&self) -> Self {
        let mut t = Self::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        t
    }

    pub fn matmul(&self, other: &Self) -> Result<Self> {
        if self.cols != other.rows {
            return Err(Error::DimensionMismatch(format!(
                "cannot multiply {}x{} by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Self::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                if a == 0.0 {
                    continue;
                }
                let src = &other.data[k * other.cols..(k + 1) * other.cols];
                let dst = &mut out.data[i * other.cols..(i + 1) * other.cols];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += a * s;
                }
            }
        }
        Ok(out)
    }

    pub fn matvec(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.cols {
            return Err(Error::DimensionMismatch(format!(
                "cannot apply {}x{} matrix to vector of length {}",
                self.rows,
                self.cols,
                v.len()
            )));
        }
        Ok((0..self.rows)
            .map(|i| self.row(i).iter().zip(v).map(|(a, b)| a * b).sum())
            .collect())
    }

    /// `selfᵀ self`, filled symmetrically.
    pub fn gram(&self) -> Self {
        let n = self.cols;
        let mut g = Self::zeros(n, n);
        for i in 0..n {
            for j in i..n {
                let mut s = 0.0;
                for r in 0..self.rows {
                    s += self.data[r * n + i] * self.data[r * n + j];
                }
                g.data[i * n + j] = s;
                g.data[j * n + i] = s;
            }
        }
        g
    }

    pub fn add_scaled(&self, factor: f64, other: &Self) -> Result<Self> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(Error::ShapeMismatch {
                left: vec![self.rows, self.cols],
                right: vec![other.rows, other.cols],
            });
        }
        Ok(Self {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| a + factor * b)
                .collect(),
        })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.add_scaled(1.0, other)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.add_scaled(-1.0, other)
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v * factor).collect(),
        }
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Stacks blocks vertically; all blocks must share a column count.
    pub fn vstack(blocks: &[&Matrix]) -> Result<Self> {
        let cols = blocks.first().map_or(0, |b| b.cols);
        if let Some(bad) = blocks.iter().find(|b| b.cols != cols) {
            return Err(Error::DimensionMismatch(format!(
                "block with {} columns stacked onto {} columns",
                bad.cols, cols
            )));
        }
        let rows = blocks.iter().map(|b| b.rows).sum();
        let data = blocks.iter().flat_map(|b| b.data.iter().copied()).collect();
        Self::new(rows, cols, data)
    }

    /// Copy of rows `start..end`.
    pub fn row_block(&self, start: usize, end: usize) -> Self {
        Self {
            rows: end - start,
            cols: self.cols,
            data: self.data[start * self.cols..end * self.cols].to_vec(),
        }
    }

    pub fn max_asymmetry(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for i in 0..self.rows {
            for j in (i + 1)..self.cols {
                worst = worst.max((self.get(i, j) - self.get(j, i)).abs());
            }
        }
        worst
    }
}

/// Outcome of power iteration, available even when the iteration stalls.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpectralEstimate {
    pub value: f64,
    pub residual: f64,
    pub iterations: usize,
    pub converged: bool,
}

const POWER_TOL: f64 = 1e-9;
const POWER_MAX_ITER: usize = 10_000;

/// Largest singular value by power iteration on `mᵀm`, never failing.
pub fn spectral_norm_estimate(m: &Matrix) -> SpectralEstimate {
    let n = m.cols;
    // Fixed, irregular start vector: deterministic and unlikely to be
    // orthogonal to the dominant singular direction.
    let mut v: Vec<f64> = (0..n)
        .map(|i| 1.0 + ((i as f64 + 1.0) * 0.618_033_988_75).fract())
        .collect();
    normalize(&mut v);
    let mut lambda = 0.0;
    let mut residual = f64::INFINITY;
    for it in 1..=POWER_MAX_ITER {
        let mv = m.matvec(&v).expect("start vector has one entry per column");
        let w = m.transpose_matvec(&mv);
        lambda = dot(&v, &w);
        if lambda <= f64::MIN_POSITIVE {
            return SpectralEstimate {
                value: 0.0,
                residual: 0.0,
                iterations: it,
                converged: true,
            };
        }
        residual = w
            .iter()
            .zip(&v)
            .map(|(wi, vi)| (wi - lambda * vi).powi(2))
            .sum::<f64>()
            .sqrt()
            / lambda;
        v = w;
        normalize(&mut v);
        if residual <= POWER_TOL {
            return SpectralEstimate {
                value: lambda.sqrt(),
                residual,
                iterations: it,
                converged: true,
            };
        }
    }
    SpectralEstimate {
        value: lambda.max(0.0).sqrt(),
        residual,
        iterations: POWER_MAX_ITER,
        converged: false,
    }
}

pub fn spectral_norm(m: &Matrix) -> Result<f64> {
    if m.is_empty() {
        return Err(Error::InvalidShape("spectral norm of an empty matrix".into()));
    }
    let est = spectral_norm_estimate(m);
    if est.converged {
        Ok(est.value)
    } else {
        Err(Error::NoConvergence {
            estimate: est.value,
            residual: est.residual,
            iterations: est.iterations,
        })
    }
}

/// [`spectral_norm`], falling back to the stalled estimate on non-convergence.
pub fn spectral_norm_lenient(m: &Matrix) -> f64 {
    spectral_norm_estimate(m).value
}

impl Matrix {
    fn transpose_matvec(&self, v: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.cols];
        for (i, vi) in v.iter().enumerate() {
            for (o, a) in out.iter_mut().zip(self.row(i)) {
                *o += a * vi;
            }
        }
        out
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn normalize(v: &mut [f64]) {
    let n = dot(v, v).sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
}

const SYMMETRY_ATOL: f64 = 1e-12;
const JACOBI_MAX_SWEEPS: usize = 100;
pub const JACOBI_MAX_DIM: usize = 256;

/// All eigenvalues of a symmetric matrix by cyclic Jacobi rotations, ascending.
pub fn symmetric_eigenvalues(s: &Matrix) -> Result<Vec<f64>> {
    if s.rows != s.cols || s.rows == 0 {
        return Err(Error::InvalidShape(format!(
            "eigenvalues need a nonempty square matrix, got {}x{}",
            s.rows, s.cols
        )));
    }
    if s.rows > JACOBI_MAX_DIM {
        return Err(Error::InvalidShape(format!(
            "Jacobi eigen-solver is capped at {JACOBI_MAX_DIM}, got {}",
            s.rows
        )));
    }
    let max_asymmetry = s.max_asymmetry();
    if max_asymmetry > SYMMETRY_ATOL {
        return Err(Error::Asymmetric { max_asymmetry });
    }
    let n = s.rows;
    let mut a = s.data.clone();
    let scale: f64 = a.iter().map(|v| v * v).sum::<f64>().max(f64::MIN_POSITIVE);
    for _ in 0..JACOBI_MAX_SWEEPS {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i * n + j].powi(2))
            .sum();
        if off <= 1e-30 * scale {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[p * n + q];
                if apq.abs() <= f64::MIN_POSITIVE {
                    continue;
                }
                let theta = (a[q * n + q] - a[p * n + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let sn = t * c;
                for k in 0..n {
                    let akp = a[k * n + p];
                    let akq = a[k * n + q];
                    a[k * n + p] = c * akp - sn * akq;
                    a[k * n + q] = sn * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[p * n + k];
                    let aqk = a[q * n + k];
                    a[p * n + k] = c * apk - sn * aqk;
                    a[q * n + k] = sn * apk + c * aqk;
                }
            }
        }
    }
    let mut eig: Vec<f64> = (0..n).map(|i| a[i * n + i]).collect();
    eig.sort_by(f64::total_cmp);
    Ok(eig)
}

pub fn min_eigenvalue_sym(s: &Matrix) -> Result<f64> {
    Ok(symmetric_eigenvalues(s)?[0])
}

pub fn min_singular_value(m: &Matrix) -> Result<f64> {
    if m.is_empty() {
        return Err(Error::InvalidShape("singular value of an empty matrix".into()));
    }
    Ok(min_eigenvalue_sym(&m.gram())?.max(0.0).sqrt())
}

/// Low-rank adapted features `W0 x + B (A x)` applied at every spatial site,
/// where the channel axis of `x` is the d-vector.
pub fn lora_features(x: &FeatureTensor, w0: &Matrix, a: &Matrix, b: &Matrix) -> Result<FeatureTensor> {
    let d = x.shape()[2];
    let r = a.rows;
    if w0.rows != d || w0.cols != d || a.cols != d || b.rows != d || b.cols != r {
        return Err(Error::DimensionMismatch(format!(
            "adapter chain needs W0 {d}x{d}, A rx{d}, B {d}xr; got W0 {}x{}, A {}x{}, B {}x{}",
            w0.rows, w0.cols, a.rows, a.cols, b.rows, b.cols
        )));
    }
    let mut out = Vec::with_capacity(x.len());
    for site in x.data().chunks(d) {
        let base = w0.matvec(site)?;
        let low = b.matvec(&a.matvec(site)?)?;
        out.extend(base.iter().zip(&low).map(|(u, v)| u + v));
    }
    FeatureTensor::new(x.shape(), out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum Distribution {
    UnitGaussian,
    Uniform { lo: f64, hi: f64 },
}

/// Samples are rescaled so their Frobenius norm lies in `[min, max]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormWindow {
    pub min: f64,
    pub max: f64,
}

impl NormWindow {
    pub fn new(min: f64, max: f64) -> Result<Self> {
        if !(min > 0.0 && min <= max && max.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "norm window needs 0 < m <= M, got ({min}, {max})"
            )));
        }
        Ok(Self { min, max })
    }
}

/// Seeded description of a random sample stream.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RandomSpec {
    pub seed: u64,
    pub distribution: Distribution,
    pub norm_window: Option<NormWindow>,
}

impl RandomSpec {
    pub fn gaussian(seed: u64) -> Self {
        Self {
            seed,
            distribution: Distribution::UnitGaussian,
            norm_window: None,
        }
    }

    pub fn with_window(mut self, window: NormWindow) -> Self {
        self.norm_window = Some(window);
        self
    }

    /// Per-trial stream: seed XOR trial index.
    pub fn for_trial(&self, trial: u64) -> Self {
        Self {
            seed: self.seed ^ trial,
            ..*self
        }
    }

    pub fn sampler(&self) -> Sampler {
        Sampler {
            rng: ChaCha8Rng::seed_from_u64(self.seed),
            spec: *self,
        }
    }
}

pub struct Sampler {
    rng: ChaCha8Rng,
    spec: RandomSpec,
}

impl Sampler {
    pub fn gaussian(&mut self) -> f64 {
        self.rng.sample(StandardNormal)
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        if lo == hi {
            return lo;
        }
        self.rng.random_range(lo..hi)
    }

    /// One draw from the base distribution.
    pub fn draw(&mut self) -> f64 {
        match self.spec.distribution {
            Distribution::UnitGaussian => self.gaussian(),
            Distribution::Uniform { lo, hi } => self.uniform(lo, hi),
        }
    }

    pub fn draws(&mut self, n: usize) -> Vec<f64> {
        (0..n).map(|_| self.draw()).collect()
    }

    pub fn gaussians(&mut self, n: usize) -> Vec<f64> {
        (0..n).map(|_| self.gaussian()).collect()
    }

    /// Uniformly distributed direction on the unit sphere.
    pub fn unit_vector(&mut self, n: usize) -> Vec<f64> {
        loop {
            let mut v = self.gaussians(n);
            if dot(&v, &v) > 0.0 {
                normalize(&mut v);
                return v;
            }
        }
    }

    /// Base-distribution tensor, rescaled into the norm window when one is set.
    pub fn tensor(&mut self, shape: [usize; 3]) -> Result<FeatureTensor> {
        let n = shape.iter().product();
        let data = loop {
            let mut data = self.draws(n);
            if let Some(w) = self.spec.norm_window {
                let norm = dot(&data, &data).sqrt();
                if norm == 0.0 {
                    continue;
                }
                let target = self.uniform(w.min, w.max);
                data.iter_mut().for_each(|v| *v *= target / norm);
            }
            break data;
        };
        FeatureTensor::new(shape, data)
    }

    pub fn sequence(&mut self, frames: usize, shape: [usize; 3]) -> Result<FrameSequence> {
        FrameSequence::new((0..frames).map(|_| self.tensor(shape)).collect::<Result<_>>()?)
    }

    /// Base-distribution matrix; the norm window does not apply.
    pub fn matrix(&mut self, rows: usize, cols: usize) -> Matrix {
        Matrix {
            rows,
            cols,
            data: self.draws(rows * cols),
        }
    }

    pub fn gaussian_matrix(&mut self, rows: usize, cols: usize) -> Matrix {
        Matrix {
            rows,
            cols,
            data: self.gaussians(rows * cols),
        }
    }
}
