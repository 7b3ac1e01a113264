//! Token embedding assembly, single-head cross-attention, the two-term
//! error decomposition and the alignment bound.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{min_singular_value, spectral_norm_lenient, Matrix, RandomSpec, Sampler};

/// Smallest singular value accepted for an invertible projection.
pub const INVERTIBLE_EPS: f64 = 1e-10;
pub const DECOMPOSITION_ATOL: f64 = 1e-10;
pub const TERM_SLACK: f64 = 1e-9;
pub const ALIGNMENT_RTOL: f64 = 1e-6;
const MAX_ATTEMPTS: usize = 100;

/// Shared rows, per-frame rows and a conditional block, stacked in that order.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenEmbedding {
    pub t_share: Matrix,
    pub z_unshare: Matrix,
    pub cond_block: Matrix,
}

impl TokenEmbedding {
    pub fn new(t_share: Matrix, z_unshare: Matrix, cond_block: Matrix) -> Self {
        Self {
            t_share,
            z_unshare,
            cond_block,
        }
    }

    pub fn token_count(&self) -> usize {
        self.t_share.rows() + self.z_unshare.rows() + self.cond_block.rows()
    }
}

/// `[T_share; Z_unshare; C(Z)]`. An empty block (zero rows) is skipped.
pub fn build_final_embedding(tok: &TokenEmbedding) -> Result<Matrix> {
    let blocks: Vec<&Matrix> = [&tok.t_share, &tok.z_unshare, &tok.cond_block]
        .into_iter()
        .filter(|b| b.rows() > 0)
        .collect();
    if blocks.is_empty() {
        return Err(Error::InvalidShape("token embedding has no rows".into()));
    }
    Matrix::vstack(&blocks)
}

/// Query, key and value maps, all `d×d`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionSet {
    pub w_q: Matrix,
    pub w_k: Matrix,
    pub w_v: Matrix,
    /// `σ_min(W_V)`
    pub delta: f64,
}

impl ProjectionSet {
    /// Validated set: square, equal sizes, every matrix invertible.
    pub fn new(w_q: Matrix, w_k: Matrix, w_v: Matrix) -> Result<Self> {
        let set = Self::new_unchecked(w_q, w_k, w_v)?;
        for (name, m) in [("W_Q", &set.w_q), ("W_K", &set.w_k), ("W_V", &set.w_v)] {
            let s = min_singular_value(m)?;
            if !(s > INVERTIBLE_EPS) {
                return Err(Error::InvalidArgument(format!(
                    "{name} is not invertible (min singular value {s:e})"
                )));
            }
        }
        Ok(set)
    }

    /// Skips the invertibility check; shapes are still validated.
    pub fn new_unchecked(w_q: Matrix, w_k: Matrix, w_v: Matrix) -> Result<Self> {
        let d = w_q.rows();
        if d == 0 {
            return Err(Error::InvalidShape("projection dimension is zero".into()));
        }
        for m in [&w_q, &w_k, &w_v] {
            if m.rows() != d || m.cols() != d {
                return Err(Error::DimensionMismatch(format!(
                    "projections must all be {d}x{d}, got {}x{}",
                    m.rows(),
                    m.cols()
                )));
            }
        }
        let delta = min_singular_value(&w_v)?;
        Ok(Self { w_q, w_k, w_v, delta })
    }

    pub fn identity(d: usize) -> Result<Self> {
        Self::new(Matrix::identity(d), Matrix::identity(d), Matrix::identity(d))
    }

    pub fn dim(&self) -> usize {
        self.w_q.rows()
    }
}

/// Numerically stable softmax of every row.
pub fn row_softmax(logits: &Matrix) -> Matrix {
    let mut out = logits.clone();
    let cols = logits.cols();
    for row in out.data_mut().chunks_mut(cols.max(1)) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        row.iter_mut().for_each(|v| *v /= sum);
    }
    out
}

fn check_width(name: &str, m: &Matrix, d: usize) -> Result<()> {
    if m.cols() != d {
        return Err(Error::DimensionMismatch(format!(
            "{name} has {} columns, projections expect {d}",
            m.cols()
        )));
    }
    Ok(())
}

/// `softmax(Q Kᵀ / √d)` with `Q = X W_Q`, `K = Z W_K`.
pub fn attention_weights(x_t: &Matrix, z_final: &Matrix, proj: &ProjectionSet) -> Result<Matrix> {
    let d = proj.dim();
    check_width("X_t", x_t, d)?;
    check_width("Z_final", z_final, d)?;
    let q = x_t.matmul(&proj.w_q)?;
    let k = z_final.matmul(&proj.w_k)?;
    let logits = q.matmul(&k.transpose())?.scaled(1.0 / (d as f64).sqrt());
    Ok(row_softmax(&logits))
}

/// `X̃ = softmax(X W_Q (Z W_K)ᵀ / √d) Z W_V`.
pub fn cross_attention(x_t: &Matrix, z_final: &Matrix, proj: &ProjectionSet) -> Result<Matrix> {
    let s = attention_weights(x_t, z_final, proj)?;
    s.matmul(&z_final.matmul(&proj.w_v)?)
}

/// `x_{t−1} = x_t − α_t ε(x_t, x̃_t)` for an arbitrary noise map `ε`.
pub fn denoise_step_with<F>(x_t: &Matrix, x_tilde: &Matrix, alpha_t: f64, pred: F) -> Result<Matrix>
where
    F: Fn(&Matrix, &Matrix) -> Result<Matrix>,
{
    if x_t.rows() != x_tilde.rows() || x_t.cols() != x_tilde.cols() {
        return Err(Error::ShapeMismatch {
            left: vec![x_t.rows(), x_t.cols()],
            right: vec![x_tilde.rows(), x_tilde.cols()],
        });
    }
    let eps = pred(x_t, x_tilde)?;
    x_t.add_scaled(-alpha_t, &eps)
}

/// [`denoise_step_with`] using the elementwise mean of `x_t` and `x̃_t` as the noise map.
pub fn denoise_step(x_t: &Matrix, x_tilde: &Matrix, alpha_t: f64) -> Result<Matrix> {
    denoise_step_with(x_t, x_tilde, alpha_t, |a, b| Ok(a.add(b)?.scaled(0.5)))
}

/// Term A `(S − S*) V*` and Term B `S ΔZ W_V`, where `S` attends from
/// `x_t` to `z_final` and `S*` from `x_star` to `z_star`.
pub fn decompose_error(
    x_t: &Matrix,
    x_star: &Matrix,
    z_final: &Matrix,
    z_star: &Matrix,
    proj: &ProjectionSet,
) -> Result<(Matrix, Matrix)> {
    if z_final.rows() != z_star.rows() || x_t.rows() != x_star.rows() {
        return Err(Error::DimensionMismatch(format!(
            "X_t/X* rows {}/{} and Z/Z* rows {}/{} must agree",
            x_t.rows(),
            x_star.rows(),
            z_final.rows(),
            z_star.rows()
        )));
    }
    let s = attention_weights(x_t, z_final, proj)?;
    let s_star = attention_weights(x_star, z_star, proj)?;
    let v_star = z_star.matmul(&proj.w_v)?;
    let term_a = s.sub(&s_star)?.matmul(&v_star)?;
    let delta_z = z_final.sub(z_star)?;
    let term_b = s.matmul(&delta_z.matmul(&proj.w_v)?)?;
    Ok((term_a, term_b))
}

/// Both forms of the alignment constant.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GammaConstant {
    /// `L ‖W_K‖₂ ‖W_V‖₂ / δ`
    pub gamma: f64,
    /// `L C ‖W_Q‖₂ ‖W_K‖₂ ‖W_V‖₂ + ‖W_V‖₂`
    pub unsimplified: f64,
}

pub fn gamma_constant(proj: &ProjectionSet, l_softmax: f64, c: f64) -> Result<GammaConstant> {
    if !(proj.delta > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "gamma needs sigma_min(W_V) > 0, got {}",
            proj.delta
        )));
    }
    if !(l_softmax > 0.0) {
        return Err(Error::InvalidArgument(format!("L_softmax {l_softmax} must be positive")));
    }
    let nq = spectral_norm_lenient(&proj.w_q);
    let nk = spectral_norm_lenient(&proj.w_k);
    let nv = spectral_norm_lenient(&proj.w_v);
    Ok(GammaConstant {
        gamma: l_softmax * nk * nv / proj.delta,
        unsimplified: l_softmax * c * nq * nk * nv + nv,
    })
}

const LOGIT_PERTURBATION: f64 = 1e-4;

/// Largest observed `‖softmax(A) − softmax(B)‖_F / ‖A − B‖_F` over random
/// `rows×keys` logits with `B` a small perturbation of `A`.
pub fn estimate_softmax_lipschitz(rows: usize, keys: usize, trials: usize, spec: &RandomSpec) -> Result<f64> {
    if trials == 0 || rows == 0 || keys == 0 {
        return Err(Error::InvalidArgument("softmax estimate needs positive sizes and trials".into()));
    }
    let ratios = (0..trials as u64)
        .into_par_iter()
        .map(|i| {
            let mut s = spec.for_trial(i).sampler();
            let a = s.gaussian_matrix(rows, keys).scaled(s.uniform(0.1, 3.0));
            let dir = s.gaussian_matrix(rows, keys);
            let b = a.add_scaled(LOGIT_PERTURBATION / dir.frobenius_norm().max(f64::MIN_POSITIVE), &dir)?;
            let dist = a.sub(&b)?.frobenius_norm();
            if dist == 0.0 {
                return Ok(0.0);
            }
            Ok(row_softmax(&a).sub(&row_softmax(&b))?.frobenius_norm() / dist)
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(ratios.into_iter().fold(0.0, f64::max))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum ProjectionKind {
    Identity,
    /// `I + spread · G / √d` with `G` standard Gaussian.
    NearIdentity { spread: f64 },
}

/// Random alignment instances: an ideal pair `(X*, Z*)` and a perturbation `ΔZ`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AlignmentGenerator {
    pub d: usize,
    pub n_s: usize,
    pub n_u: usize,
    pub n_c: usize,
    /// Query rows `M`.
    pub queries: usize,
    pub projections: ProjectionKind,
    /// `‖X_t‖_F` as a fraction of `√d`.
    pub query_norm_fraction: f64,
    /// `‖Z*‖_F`
    pub token_norm: f64,
    /// `‖ΔZ‖_F`
    pub delta_z_norm: f64,
}

impl Default for AlignmentGenerator {
    fn default() -> Self {
        Self {
            d: 4,
            n_s: 4,
            n_u: 4,
            n_c: 0,
            queries: 6,
            projections: ProjectionKind::NearIdentity { spread: 0.3 },
            query_norm_fraction: 1.0,
            token_norm: 1.0,
            delta_z_norm: 0.1,
        }
    }
}

/// One generated instance.
#[derive(Debug, Clone)]
pub struct AlignmentInstance {
    pub proj: ProjectionSet,
    pub x_t: Matrix,
    pub z_star: Matrix,
    pub z_final: Matrix,
}

impl AlignmentGenerator {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.queries == 0 {
            return Err(Error::InvalidArgument("d and M must be positive".into()));
        }
        if self.n_s < self.d || self.n_u < self.d {
            return Err(Error::InvalidArgument(format!(
                "token sufficiency needs N_s >= d and N_u >= d, got N_s={}, N_u={}, d={}",
                self.n_s, self.n_u, self.d
            )));
        }
        if !(self.query_norm_fraction > 0.0 && self.query_norm_fraction <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "query norm fraction {} outside (0, 1]",
                self.query_norm_fraction
            )));
        }
        if !(self.token_norm > 0.0) || !(self.delta_z_norm >= 0.0) {
            return Err(Error::InvalidArgument("token and perturbation norms must be nonnegative".into()));
        }
        if let ProjectionKind::NearIdentity { spread } = self.projections {
            if !(spread >= 0.0) {
                return Err(Error::InvalidArgument(format!("projection spread {spread} is negative")));
            }
        }
        Ok(())
    }

    pub fn token_count(&self) -> usize {
        self.n_s + self.n_u + self.n_c
    }

    fn projections(&self, s: &mut Sampler) -> Result<ProjectionSet> {
        let d = self.d;
        match self.projections {
            ProjectionKind::Identity => ProjectionSet::identity(d),
            ProjectionKind::NearIdentity { spread } => {
                let mut last = String::new();
                for _ in 0..MAX_ATTEMPTS {
                    let mut draw = || {
                        Matrix::identity(d)
                            .add_scaled(spread / (d as f64).sqrt(), &s.gaussian_matrix(d, d))
                    };
                    let (q, k, v) = (draw()?, draw()?, draw()?);
                    match ProjectionSet::new(q, k, v) {
                        Ok(p) => return Ok(p),
                        Err(e) => last = e.to_string(),
                    }
                }
                Err(Error::GeneratorFailure {
                    attempts: MAX_ATTEMPTS,
                    reason: last,
                })
            }
        }
    }

    pub fn scaled_gaussian(s: &mut Sampler, rows: usize, cols: usize, norm: f64) -> Matrix {
        let m = s.gaussian_matrix(rows, cols);
        let n = m.frobenius_norm();
        if n == 0.0 {
            m
        } else {
            m.scaled(norm / n)
        }
    }

    /// Token matrix assembled from random shared, per-frame and conditional blocks.
    pub fn tokens(&self, s: &mut Sampler, norm: f64) -> Result<Matrix> {
        let d = self.d;
        let tok = TokenEmbedding::new(
            s.gaussian_matrix(self.n_s, d),
            s.gaussian_matrix(self.n_u, d),
            s.gaussian_matrix(self.n_c, d),
        );
        let z = build_final_embedding(&tok)?;
        let n = z.frobenius_norm();
        Ok(z.scaled(norm / n))
    }

    pub fn instance(&self, s: &mut Sampler) -> Result<AlignmentInstance> {
        self.validate()?;
        let proj = self.projections(s)?;
        let x_norm = self.query_norm_fraction * (self.d as f64).sqrt();
        let x_t = Self::scaled_gaussian(s, self.queries, self.d, x_norm);
        let z_star = self.tokens(s, self.token_norm)?;
        let dz = Self::scaled_gaussian(s, self.token_count(), self.d, self.delta_z_norm);
        let z_final = z_star.add(&dz)?;
        Ok(AlignmentInstance {
            proj,
            x_t,
            z_star,
            z_final,
        })
    }
}

/// Worst-case summary over all trials of [`certify_alignment_bound`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentReport {
    /// Error of the trial with the largest `error / bound`.
    pub error: f64,
    pub delta_z: f64,
    pub gamma: f64,
    pub bound: f64,
    pub gamma_unsimplified: f64,
    pub term_a_norm: f64,
    pub term_b_norm: f64,
    /// Largest decomposition residual over all trials.
    pub residual: f64,
    /// Largest `‖Term B‖ − ‖W_V‖₂‖ΔZ‖` over all trials.
    pub term_b_excess: f64,
    /// Largest Term A excess over its empirical-constant bound.
    pub term_a_excess: f64,
    pub worst_ratio: f64,
    pub l_softmax_estimate: f64,
    pub l_softmax_used: f64,
    pub trials: usize,
    pub pass: bool,
}

impl AlignmentReport {
    /// Re-evaluates `pass` under explicit tolerances.
    pub fn pass_with(&self, alignment_rtol: f64, decomposition: f64, term_slack: f64) -> bool {
        self.worst_ratio <= 1.0 + alignment_rtol && self.residual <= decomposition && self.term_b_excess <= term_slack
    }
}

struct TrialOutcome {
    error: f64,
    delta_z: f64,
    gamma: GammaConstant,
    term_a: f64,
    term_b: f64,
    residual: f64,
    term_b_excess: f64,
    term_a_excess: f64,
}

fn alignment_trial(inst: &AlignmentInstance, l_softmax: f64) -> Result<TrialOutcome> {
    let proj = &inst.proj;
    let d = proj.dim() as f64;
    // the ideal pair is X* = CA(X_t, Z*), so X_t plays both query roles
    let x_star_out = cross_attention(&inst.x_t, &inst.z_star, proj)?;
    let x_tilde = cross_attention(&inst.x_t, &inst.z_final, proj)?;
    let (term_a, term_b) = decompose_error(&inst.x_t, &inst.x_t, &inst.z_final, &inst.z_star, proj)?;
    let diff = x_tilde.sub(&x_star_out)?;
    let residual = diff.sub(&term_a.add(&term_b)?)?.frobenius_norm();
    let delta_z = inst.z_final.sub(&inst.z_star)?.frobenius_norm();
    let nv = spectral_norm_lenient(&proj.w_v);
    let v_star = inst.z_star.matmul(&proj.w_v)?;
    let term_a_bound = l_softmax
        * spectral_norm_lenient(&proj.w_q)
        * spectral_norm_lenient(&proj.w_k)
        * spectral_norm_lenient(&v_star)
        * delta_z
        * (inst.x_t.frobenius_norm() / d.sqrt()).max(1.0);
    let term_a_norm = term_a.frobenius_norm();
    let term_b_norm = term_b.frobenius_norm();
    Ok(TrialOutcome {
        error: diff.frobenius_norm(),
        delta_z,
        gamma: gamma_constant(proj, l_softmax, spectral_norm_lenient(&inst.z_star))?,
        term_a: term_a_norm,
        term_b: term_b_norm,
        residual,
        term_b_excess: term_b_norm - nv * delta_z,
        term_a_excess: term_a_norm - term_a_bound,
    })
}

/// Checks `‖X̃ − X*‖_F ≤ γ‖ΔZ‖_F`, the decomposition identity and both term
/// bounds on `trials` generated instances.
pub fn certify_alignment_bound(
    gen: &AlignmentGenerator,
    spec: &RandomSpec,
    trials: usize,
    l_softmax_trials: usize,
) -> Result<AlignmentReport> {
    gen.validate()?;
    if trials == 0 {
        return Err(Error::InvalidArgument("trials must be at least 1".into()));
    }
    let l_estimate =
        estimate_softmax_lipschitz(gen.queries, gen.token_count(), l_softmax_trials.max(1), &spec.for_trial(u64::MAX))?;
    let l_used = l_estimate.max(1.0);
    let outcomes = (0..trials as u64)
        .into_par_iter()
        .map(|i| {
            let mut s = spec.for_trial(i).sampler();
            alignment_trial(&gen.instance(&mut s)?, l_used)
        })
        .collect::<Result<Vec<_>>>()?;

    let ratio = |o: &TrialOutcome| {
        let bound = o.gamma.gamma * o.delta_z;
        if bound > 0.0 {
            o.error / bound
        } else if o.error == 0.0 {
            0.0
        } else {
            f64::INFINITY
        }
    };
    let worst = outcomes
        .iter()
        .max_by(|a, b| ratio(a).total_cmp(&ratio(b)))
        .expect("at least one trial");
    let residual = outcomes.iter().map(|o| o.residual).fold(0.0, f64::max);
    let term_b_excess = outcomes.iter().map(|o| o.term_b_excess).fold(f64::NEG_INFINITY, f64::max);
    let term_a_excess = outcomes.iter().map(|o| o.term_a_excess).fold(f64::NEG_INFINITY, f64::max);
    let bound_ok = outcomes
        .iter()
        .all(|o| o.error <= o.gamma.gamma * o.delta_z * (1.0 + ALIGNMENT_RTOL));
    Ok(AlignmentReport {
        error: worst.error,
        delta_z: worst.delta_z,
        gamma: worst.gamma.gamma,
        bound: worst.gamma.gamma * worst.delta_z,
        gamma_unsimplified: worst.gamma.unsimplified,
        term_a_norm: worst.term_a,
        term_b_norm: worst.term_b,
        residual,
        term_b_excess,
        term_a_excess,
        worst_ratio: ratio(worst),
        l_softmax_estimate: l_estimate,
        l_softmax_used: l_used,
        trials,
        pass: bound_ok && residual <= DECOMPOSITION_ATOL && term_b_excess <= TERM_SLACK,
    })
}

/// Worst-case decomposition and term-bound measurements.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecompositionReport {
    /// Largest `‖(X̃ − X*) − (A + B)‖_F` with independent query matrices.
    pub max_residual: f64,
    /// Largest `‖Term B‖_F − ‖W_V‖₂‖ΔZ‖_F`.
    pub max_term_b_excess: f64,
    /// Largest Term A excess over its empirical-constant bound (shared queries).
    pub max_term_a_excess: f64,
    pub trials: usize,
}

/// Checks the two-term identity on instances whose ideal queries are drawn
/// independently, and both term bounds on the shared-query pair.
pub fn certify_decomposition(
    gen: &AlignmentGenerator,
    spec: &RandomSpec,
    trials: usize,
    l_softmax: f64,
) -> Result<DecompositionReport> {
    gen.validate()?;
    if trials == 0 {
        return Err(Error::InvalidArgument("trials must be at least 1".into()));
    }
    let rows = (0..trials as u64)
        .into_par_iter()
        .map(|i| {
            let mut s = spec.for_trial(i).sampler();
            let inst = gen.instance(&mut s)?;
            let x_norm = gen.query_norm_fraction * (gen.d as f64).sqrt();
            let x_star = AlignmentGenerator::scaled_gaussian(&mut s, gen.queries, gen.d, x_norm);
            let lhs = cross_attention(&inst.x_t, &inst.z_final, &inst.proj)?
                .sub(&cross_attention(&x_star, &inst.z_star, &inst.proj)?)?;
            let (a, b) = decompose_error(&inst.x_t, &x_star, &inst.z_final, &inst.z_star, &inst.proj)?;
            let residual = lhs.sub(&a.add(&b)?)?.frobenius_norm();
            let shared = alignment_trial(&inst, l_softmax)?;
            Ok((residual, shared.term_b_excess, shared.term_a_excess))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(DecompositionReport {
        max_residual: rows.iter().map(|r| r.0).fold(0.0, f64::max),
        max_term_b_excess: rows.iter().map(|r| r.1).fold(f64::NEG_INFINITY, f64::max),
        max_term_a_excess: rows.iter().map(|r| r.2).fold(f64::NEG_INFINITY, f64::max),
        trials,
    })
}

/// Outcome of the token-sufficiency descent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SufficiencyRun {
    /// `‖X̃ − X*‖_F` at every iterate, step 0 included.
    pub errors: Vec<f64>,
    pub final_error: f64,
    pub initial_min_singular_value: f64,
}

/// Gradient of `‖CA(X, Z) − target‖_F²` with respect to `Z`.
pub fn alignment_loss_grad(x_t: &Matrix, z: &Matrix, target: &Matrix, proj: &ProjectionSet) -> Result<(f64, Matrix)> {
    let d = proj.dim() as f64;
    let s = attention_weights(x_t, z, proj)?;
    let v = z.matmul(&proj.w_v)?;
    let q = x_t.matmul(&proj.w_q)?;
    let r = s.matmul(&v)?.sub(target)?;
    let loss = r.frobenius_norm().powi(2);
    let g = r.scaled(2.0);
    // value path
    let dv = s.transpose().matmul(&g)?;
    let mut dz = dv.matmul(&proj.w_v.transpose())?;
    // softmax path
    let ds = g.matmul(&v.transpose())?;
    let mut da = Matrix::zeros(s.rows(), s.cols());
    for i in 0..s.rows() {
        let dot: f64 = (0..s.cols()).map(|k| ds.get(i, k) * s.get(i, k)).sum();
        for j in 0..s.cols() {
            da.set(i, j, s.get(i, j) * (ds.get(i, j) - dot));
        }
    }
    let dk = da.transpose().matmul(&q)?.scaled(1.0 / d.sqrt());
    dz = dz.add(&dk.matmul(&proj.w_k.transpose())?)?;
    Ok((loss, dz))
}

/// Parameters of [`token_sufficiency_experiment`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SufficiencySetup {
    pub generator: AlignmentGenerator,
    pub steps: usize,
    pub eta: f64,
    /// Start the descent at `Z*` instead of a random token matrix.
    pub start_at_ideal: bool,
}

/// Fixes a target `X* = CA(X, Z*)`, starts from a random full-rank token
/// matrix and descends `‖CA(X, Z) − X*‖_F²` over `Z`.
pub fn token_sufficiency_experiment(setup: &SufficiencySetup, spec: &RandomSpec) -> Result<SufficiencyRun> {
    let gen = &setup.generator;
    gen.validate()?;
    if !(setup.eta > 0.0 && setup.eta.is_finite()) {
        return Err(Error::InvalidArgument(format!("step size {} must be positive", setup.eta)));
    }
    let mut s = spec.sampler();
    let inst = gen.instance(&mut s)?;
    let target = cross_attention(&inst.x_t, &inst.z_star, &inst.proj)?;
    let (mut z, sigma) = if setup.start_at_ideal {
        let sigma = min_singular_value(&inst.z_star)?;
        (inst.z_star.clone(), sigma)
    } else {
        let mut found = None;
        for _ in 0..MAX_ATTEMPTS {
            let z = gen.tokens(&mut s, gen.token_norm)?;
            let sigma = min_singular_value(&z)?;
            if sigma > INVERTIBLE_EPS {
                found = Some((z, sigma));
                break;
            }
        }
        found.ok_or(Error::RankDeficient { attempts: MAX_ATTEMPTS })?
    };
    if !(sigma > INVERTIBLE_EPS) {
        return Err(Error::RankDeficient { attempts: 1 });
    }
    let mut errors = Vec::with_capacity(setup.steps + 1);
    for k in 0..=setup.steps {
        let (loss, grad) = alignment_loss_grad(&inst.x_t, &z, &target, &inst.proj)?;
        errors.push(loss.sqrt());
        if k == setup.steps {
            break;
        }
        z = z.add_scaled(-setup.eta, &grad)?;
    }
    Ok(SufficiencyRun {
        final_error: *errors.last().expect("at least one iterate"),
        errors,
        initial_min_singular_value: sigma,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::max_rtol;

    fn rand(seed: u64, r: usize, c: usize) -> Matrix {
        RandomSpec::gaussian(seed).sampler().gaussian_matrix(r, c)
    }

    #[test]
    fn embedding_stacks_in_order() {
        let a = Matrix::from_rows(&[vec![1.0, 2.0]]).unwrap();
        let b = Matrix::from_rows(&[vec![3.0, 4.0]]).unwrap();
        let c = Matrix::from_rows(&[vec![5.0, 6.0]]).unwrap();
        let z = build_final_embedding(&TokenEmbedding::new(a.clone(), b.clone(), c)).unwrap();
        assert_eq!(z.data(), &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let z = build_final_embedding(&TokenEmbedding::new(a, b, Matrix::zeros(0, 2))).unwrap();
        assert_eq!(z.rows(), 2);
    }

    #[test]
    fn embedding_rows_follow_sources() {
        let tok = TokenEmbedding::new(rand(1, 3, 4), rand(2, 5, 4), rand(3, 2, 4));
        let z = build_final_embedding(&tok).unwrap();
        assert_eq!(z.rows(), tok.token_count());
        for i in 0..10 {
            let src = match i {
                0..=2 => tok.t_share.row(i),
                3..=7 => tok.z_unshare.row(i - 3),
                _ => tok.cond_block.row(i - 8),
            };
            assert_eq!(z.row(i), src);
        }
    }

    #[test]
    fn embedding_width_mismatch() {
        let tok = TokenEmbedding::new(rand(1, 3, 4), rand(2, 5, 3), Matrix::zeros(0, 4));
        assert!(build_final_embedding(&tok).is_err());
    }

    #[test]
    fn single_key_copies_value_row() {
        let p = ProjectionSet::new(rand(1, 3, 3), rand(2, 3, 3), rand(3, 3, 3)).unwrap();
        let z = rand(4, 1, 3);
        let out = cross_attention(&rand(5, 4, 3), &z, &p).unwrap();
        let v = z.matmul(&p.w_v).unwrap();
        for i in 0..4 {
            assert!(max_rtol(out.row(i), v.row(0)) <= 1e-15);
        }
    }

    #[test]
    fn zero_query_map_gives_uniform_attention() {
        let p = ProjectionSet::new_unchecked(Matrix::zeros(3, 3), rand(2, 3, 3), rand(3, 3, 3)).unwrap();
        let z = rand(4, 5, 3);
        let out = cross_attention(&rand(5, 2, 3), &z, &p).unwrap();
        let v = z.matmul(&p.w_v).unwrap();
        for j in 0..3 {
            let mean: f64 = (0..5).map(|i| v.get(i, j)).sum::<f64>() / 5.0;
            for i in 0..2 {
                assert!((out.get(i, j) - mean).abs() <= 1e-14);
            }
        }
        assert!(ProjectionSet::new(Matrix::zeros(3, 3), rand(2, 3, 3), rand(3, 3, 3)).is_err());
    }

    #[test]
    fn matches_per_row_scalar_oracle() {
        let d = 4;
        let p = ProjectionSet::new(rand(1, d, d), rand(2, d, d), rand(3, d, d)).unwrap();
        let x = rand(4, 3, d);
        let z = rand(5, 5, d);
        let out = cross_attention(&x, &z, &p).unwrap();
        let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(u, v)| u * v).sum::<f64>();
        let project = |row: &[f64], w: &Matrix| -> Vec<f64> {
            (0..d).map(|j| (0..d).map(|k| row[k] * w.get(k, j)).sum()).collect()
        };
        for i in 0..3 {
            let q = project(x.row(i), &p.w_q);
            let logits: Vec<f64> = (0..5).map(|l| dot(&q, &project(z.row(l), &p.w_k)) / 2.0).collect();
            let exps: Vec<f64> = logits.iter().map(|v| v.exp()).collect();
            let total: f64 = exps.iter().sum();
            let mut expected = vec![0.0; d];
            for (l, e) in exps.iter().enumerate() {
                let v = project(z.row(l), &p.w_v);
                for (acc, vj) in expected.iter_mut().zip(&v) {
                    *acc += e / total * vj;
                }
            }
            assert!(max_rtol(out.row(i), &expected) <= 1e-12);
        }
    }

    #[test]
    fn attention_rows_are_stochastic() {
        for seed in 0..20 {
            let p = ProjectionSet::new(rand(seed, 4, 4), rand(seed + 1, 4, 4), rand(seed + 2, 4, 4)).unwrap();
            let s = attention_weights(&rand(seed + 3, 6, 4).scaled(3.0), &rand(seed + 4, 9, 4), &p).unwrap();
            for i in 0..6 {
                assert!((s.row(i).iter().sum::<f64>() - 1.0).abs() <= 1e-12);
                assert!(s.row(i).iter().all(|w| *w >= 0.0));
            }
        }
    }

    #[test]
    fn dimension_mismatch() {
        let p = ProjectionSet::identity(3).unwrap();
        assert!(cross_attention(&rand(1, 2, 4), &rand(2, 3, 3), &p).is_err());
        assert!(ProjectionSet::new(Matrix::identity(3), Matrix::identity(2), Matrix::identity(3)).is_err());
    }

    #[test]
    fn denoise_examples() {
        let x = rand(1, 3, 4);
        let xt = rand(2, 3, 4);
        assert_eq!(denoise_step(&x, &xt, 0.0).unwrap(), x);
        let zero = denoise_step_with(&x, &xt, 0.7, |a, _| Ok(Matrix::zeros(a.rows(), a.cols()))).unwrap();
        assert_eq!(zero, x);
        let out = denoise_step(&x, &xt, 0.3).unwrap();
        for i in 0..12 {
            let expected = x.data()[i] - 0.3 * ((x.data()[i] + xt.data()[i]) * 0.5);
            assert_eq!(out.data()[i], expected);
        }
        assert!(denoise_step(&x, &rand(2, 4, 3), 0.3).is_err());
    }

    #[test]
    fn decomposition_examples() {
        let p = ProjectionSet::new(rand(1, 4, 4), rand(2, 4, 4), rand(3, 4, 4)).unwrap();
        let x = rand(4, 6, 4);
        let z = rand(5, 8, 4);
        let (a, b) = decompose_error(&x, &x, &z, &z, &p).unwrap();
        assert!(a.data().iter().chain(b.data()).all(|v| *v == 0.0));
        let (_, b) = decompose_error(&x, &rand(6, 6, 4), &z, &z, &p).unwrap();
        assert!(b.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn decomposition_identity_on_random_instances() {
        for seed in 0..50 {
            let p = ProjectionSet::new(rand(seed, 4, 4), rand(seed + 100, 4, 4), rand(seed + 200, 4, 4)).unwrap();
            let (x, xs) = (rand(seed + 300, 6, 4), rand(seed + 400, 6, 4));
            let (z, zs) = (rand(seed + 500, 8, 4), rand(seed + 600, 8, 4));
            let (a, b) = decompose_error(&x, &xs, &z, &zs, &p).unwrap();
            // independent forward passes through the scalar oracle path
            let lhs = cross_attention(&x, &z, &p).unwrap().sub(&cross_attention(&xs, &zs, &p).unwrap()).unwrap();
            let residual = lhs.sub(&a.add(&b).unwrap()).unwrap().frobenius_norm();
            assert!(residual <= 1e-10, "seed {seed}: {residual:e}");
        }
    }

    #[test]
    fn gamma_examples() {
        let p = ProjectionSet::new(Matrix::identity(2), Matrix::diag(&[2.0, 1.0]), Matrix::diag(&[3.0, 0.5])).unwrap();
        assert!((gamma_constant(&p, 1.0, 1.0).unwrap().gamma - 12.0).abs() < 1e-9);
        let id = ProjectionSet::identity(4).unwrap();
        let g = gamma_constant(&id, 1.0, 2.0).unwrap();
        assert!((g.gamma - 1.0).abs() < 1e-9);
        assert!((g.unsimplified - 3.0).abs() < 1e-9);
        let q = rand(7, 3, 3);
        let base = ProjectionSet::new(q.clone(), rand(8, 3, 3), rand(9, 3, 3)).unwrap();
        let doubled = ProjectionSet::new(q, base.w_k.clone(), base.w_v.scaled(2.0)).unwrap();
        let (g1, g2) = (gamma_constant(&base, 1.0, 1.0).unwrap(), gamma_constant(&doubled, 1.0, 1.0).unwrap());
        assert!((g1.gamma - g2.gamma).abs() <= 1e-9 * g1.gamma);
        let singular = ProjectionSet::new_unchecked(Matrix::identity(2), Matrix::identity(2), Matrix::zeros(2, 2)).unwrap();
        assert!(gamma_constant(&singular, 1.0, 1.0).is_err());
    }

    #[test]
    fn softmax_lipschitz_estimates() {
        let spec = RandomSpec::gaussian(3);
        assert_eq!(estimate_softmax_lipschitz(4, 1, 50, &spec).unwrap(), 0.0);
        let l = estimate_softmax_lipschitz(4, 8, 1000, &spec).unwrap();
        assert!(l > 0.0 && l <= 1.0 + 1e-6, "{l}");
        assert!(estimate_softmax_lipschitz(4, 8, 0, &spec).is_err());
    }

    #[test]
    fn zero_perturbation_passes_trivially() {
        let gen = AlignmentGenerator {
            delta_z_norm: 0.0,
            ..Default::default()
        };
        let r = certify_alignment_bound(&gen, &RandomSpec::gaussian(1), 20, 100).unwrap();
        assert_eq!(r.error, 0.0);
        assert!(r.pass);
    }

    #[test]
    fn identity_projection_bound() {
        let gen = AlignmentGenerator {
            projections: ProjectionKind::Identity,
            ..Default::default()
        };
        let r = certify_alignment_bound(&gen, &RandomSpec::gaussian(42), 200, 1000).unwrap();
        assert!((r.gamma - r.l_softmax_used).abs() < 1e-9);
        assert!(r.pass, "{r:?}");
        assert!(r.term_a_excess <= TERM_SLACK);
    }

    #[test]
    fn near_identity_projection_bound() {
        let r = certify_alignment_bound(&AlignmentGenerator::default(), &RandomSpec::gaussian(42), 200, 1000).unwrap();
        assert!(r.pass, "{r:?}");
        assert!(r.residual <= DECOMPOSITION_ATOL);
        assert!(r.term_a_excess <= TERM_SLACK);
    }

    #[test]
    fn decomposition_certificate() {
        let r = certify_decomposition(&AlignmentGenerator::default(), &RandomSpec::gaussian(8), 200, 1.0).unwrap();
        assert!(r.max_residual <= DECOMPOSITION_ATOL);
        assert!(r.max_term_b_excess <= TERM_SLACK);
        assert!(r.max_term_a_excess <= TERM_SLACK);
    }

    #[test]
    fn insufficient_tokens_rejected() {
        let gen = AlignmentGenerator {
            n_s: 2,
            ..Default::default()
        };
        assert!(certify_alignment_bound(&gen, &RandomSpec::gaussian(1), 10, 10).is_err());
    }

    #[test]
    fn analytic_gradient_matches_finite_differences() {
        let p = ProjectionSet::new(rand(1, 3, 3), rand(2, 3, 3), rand(3, 3, 3)).unwrap();
        let x = rand(4, 4, 3).scaled(0.5);
        let z = rand(5, 6, 3).scaled(0.5);
        let target = rand(6, 4, 3);
        let (_, grad) = alignment_loss_grad(&x, &z, &target, &p).unwrap();
        let h = 1e-6;
        for idx in 0..z.data().len() {
            let mut plus = z.clone();
            plus.data_mut()[idx] += h;
            let mut minus = z.clone();
            minus.data_mut()[idx] -= h;
            let fp = alignment_loss_grad(&x, &plus, &target, &p).unwrap().0;
            let fm = alignment_loss_grad(&x, &minus, &target, &p).unwrap().0;
            let fd = (fp - fm) / (2.0 * h);
            assert!((grad.data()[idx] - fd).abs() <= 1e-6 * fd.abs().max(1.0), "{idx}");
        }
    }

    #[test]
    fn sufficiency_from_ideal_starts_at_zero() {
        let setup = SufficiencySetup {
            generator: AlignmentGenerator::default(),
            steps: 5,
            eta: 0.05,
            start_at_ideal: true,
        };
        let run = token_sufficiency_experiment(&setup, &RandomSpec::gaussian(3)).unwrap();
        assert_eq!(run.errors[0], 0.0);
        assert!(run.initial_min_singular_value > INVERTIBLE_EPS);
    }

    #[test]
    fn sufficiency_descent_reaches_alignment() {
        let setup = SufficiencySetup {
            generator: AlignmentGenerator {
                queries: 1,
                ..Default::default()
            },
            steps: 2000,
            eta: 0.05,
            start_at_ideal: false,
        };
        for seed in 0..5 {
            let run = token_sufficiency_experiment(&setup, &RandomSpec::gaussian(seed)).unwrap();
            assert_eq!(run.errors.len(), 2001);
            assert!(run.final_error < 1e-3, "seed {seed}: {}", run.final_error);
        }
    }
}
