//! Finite-difference oracle and the check-suite runner.

use std::time::Instant;

use crate::attention::{
    certify_alignment_bound, certify_decomposition, estimate_softmax_lipschitz, token_sufficiency_experiment,
    AlignmentGenerator, SufficiencyRun, SufficiencySetup,
};
use crate::bilateral::{bilateral_filter, certify_nonexpansive, weight_diagnostics, BilateralParams, Latent2D};
use crate::config::{CheckId, SuiteConfig, TrialCounts};
use crate::ddim::{
    ddim_inversion_step, reference, simulate_error_propagation, DiffusionSchedule, ErrorPropagationReport,
    ErrorPropagationSetup, LipschitzPredictor,
};
use crate::descent::{max_stable_eta, run_descent, toy_similarity_trajectory};
use crate::error::{Error, Result};
use crate::report::{Comparison, VerificationReport};
use crate::similarity::{certify_sim_grad_bound, cosine_sim, cosine_sim_grad};
use crate::temporal::{certify_convexity, estimate_lipschitz, temporal_loss, temporal_loss_grad};
use crate::tensor::{max_rtol, FeatureTensor, FrameSequence, RandomSpec};

/// Central differences `(f(x + h e_i) − f(x − h e_i)) / 2h` for every coordinate.
pub fn fd_gradient<F>(f: F, x: &FeatureTensor, h: f64) -> Result<FeatureTensor>
where
    F: Fn(&FeatureTensor) -> Result<f64>,
{
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::InvalidArgument(format!("step {h} must be positive")));
    }
    let mut probe = x.clone();
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = probe.data()[i];
        let wrap = |source| Error::Evaluation {
            coordinate: i,
            source: Box::new(source),
        };
        probe.data_mut()[i] = orig + h;
        let plus = f(&probe).map_err(wrap)?;
        probe.data_mut()[i] = orig - h;
        let minus = f(&probe).map_err(wrap)?;
        probe.data_mut()[i] = orig;
        out.push((plus - minus) / (2.0 * h));
    }
    FeatureTensor::new(x.shape(), out)
}

/// Runs `f` for each trial index in parallel and returns results in index order.
pub fn fan_out<T, F>(trials: usize, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(u64) -> Result<T> + Sync + Send,
{
    use rayon::prelude::*;
    (0..trials as u64).into_par_iter().map(f).collect()
}

/// Largest componentwise relative error between a closed-form and a
/// finite-difference gradient of the temporal loss, over all frames.
pub fn temporal_fd_rtol(seq: &FrameSequence, h: f64) -> Result<f64> {
    let closed = temporal_loss_grad(seq)?;
    let mut worst: f64 = 0.0;
    for (t, grad) in closed.iter().enumerate() {
        let fd = fd_gradient(
            |x| {
                let mut frames = seq.frames().to_vec();
                frames[t] = x.clone();
                temporal_loss(&FrameSequence::new(frames)?)
            },
            &seq.frames()[t],
            h,
        )?;
        worst = worst.max(max_rtol(grad.data(), fd.data()));
    }
    Ok(worst)
}

/// Seed for one check: the suite seed with the check index in the high word,
/// so per-trial streams (`seed ^ trial`) never collide across checks.
pub fn check_seed(seed: u64, check: CheckId) -> u64 {
    seed ^ ((check.index() as u64 + 1) << 40)
}

/// Runs the enabled checks in declared order. A check that errors yields a
/// failed report carrying the error text; the suite itself never aborts.
pub fn run_suite(config: &SuiteConfig) -> Result<Vec<VerificationReport>> {
    config.validate()?;
    let mut ddim_cache = None;
    let mut reports = Vec::new();
    for check in config.enabled_checks() {
        let start = Instant::now();
        let seed = check_seed(config.seed, check);
        let outcome = match check {
            CheckId::DdimPerStepBound | CheckId::DdimEndToEndBound => {
                if ddim_cache.is_none() {
                    ddim_cache = Some(ddim_propagation(config, check_seed(config.seed, CheckId::DdimPerStepBound)));
                }
                match ddim_cache.as_ref().expect("filled above") {
                    Ok(r) => Ok(ddim_report(config, check, r)),
                    Err(e) => Err(Error::Inconsistency(e.to_string())),
                }
            }
            _ => run_check(config, check, seed),
        };
        let mut report = outcome.unwrap_or_else(|e| {
            VerificationReport::compare(check.name(), f64::NAN, f64::NAN, Comparison::AtMostAbsolute, 0.0)
                .require(false, &format!("check errored: {e}"))
        });
        report.check_id = check.name().to_string();
        report.seed = seed;
        report.wall_time_ms = start.elapsed().as_millis();
        reports.push(report);
    }
    Ok(reports)
}

fn run_check(c: &SuiteConfig, check: CheckId, seed: u64) -> Result<VerificationReport> {
    let tol = &c.tolerances;
    let n = &c.trials;
    let report = match check {
        CheckId::SimGradFd => {
            let spec = RandomSpec::gaussian(seed).with_window(c.norm_window);
            let worst = fan_out(n.sim_grad_fd, |i| {
                let mut s = spec.for_trial(i).sampler();
                let f = s.tensor(c.tensor_shape)?;
                let g = s.tensor(c.tensor_shape)?;
                let closed = cosine_sim_grad(&f, &g)?;
                let fd = fd_gradient(|x| cosine_sim(x, &g), &f, tol.fd_step)?;
                Ok(max_rtol(closed.data(), fd.data()))
            })?
            .into_iter()
            .fold(0.0, f64::max);
            VerificationReport::compare(check.name(), worst, tol.fd_rtol, Comparison::AtMostAbsolute, 0.0)
                .trials(n.sim_grad_fd)
                .note("measured = max componentwise rtol of closed-form vs central-difference gradient")
        }
        CheckId::SimGradBound => {
            let spec = RandomSpec::gaussian(seed).with_window(c.bound_window);
            let r = certify_sim_grad_bound(&spec, c.tensor_shape, n.sim_grad_bound)?;
            VerificationReport::compare(check.name(), r.max_grad_norm, r.bound, Comparison::AtMostRelative, 1e-9)
                .trials(r.trials)
                .detail("stated_bound", r.stated_bound)
                .detail("max_per_sample_ratio", r.max_per_sample_ratio)
                .note("bound = 2/m over the bound window")
        }
        CheckId::TemporalGradFd => {
            let spec = RandomSpec::gaussian(seed).with_window(c.norm_window);
            let worst = fan_out(n.temporal_grad_fd, |i| {
                let seq = spec.for_trial(i).sampler().sequence(c.frames, c.tensor_shape)?;
                temporal_fd_rtol(&seq, tol.fd_step)
            })?
            .into_iter()
            .fold(0.0, f64::max);
            VerificationReport::compare(check.name(), worst, tol.fd_rtol, Comparison::AtMostAbsolute, 0.0)
                .trials(n.temporal_grad_fd)
                .detail("frames", c.frames as f64)
        }
        CheckId::TemporalLipschitz => {
            let spec = RandomSpec::gaussian(seed).with_window(c.bound_window);
            let r = estimate_lipschitz(&spec, c.frames, c.tensor_shape, n.lipschitz)?;
            VerificationReport::compare(check.name(), r.max_ratio, r.bound, Comparison::AtMostRelative, 1e-6)
                .trials(r.trials)
                .detail("stated_bound", r.stated_bound)
                .detail("max_frame_grad_norm", r.max_frame_grad_norm)
                .detail("frame_grad_bound", r.frame_grad_bound)
                .require(
                    r.max_frame_grad_norm <= r.frame_grad_bound * (1.0 + 1e-9),
                    "frame gradient norm within 16(T-2)/(m(T-1))",
                )
                .note("bound = 16/m; measured = max gradient-difference ratio over refined perturbation pairs")
        }
        CheckId::Convexity => {
            let mut worst = f64::INFINITY;
            let mut report = None::<VerificationReport>;
            for &t in &c.convexity_frames {
                let r = certify_convexity(t)?;
                worst = worst.min(r.measured);
                report = Some(match report {
                    None => VerificationReport::compare(check.name(), 0.0, 0.0, Comparison::AtLeastAbsolute, tol.convexity),
                    Some(acc) => acc,
                }
                .detail(&format!("min_eig_T{t}"), r.measured));
            }
            let mut report = report.expect("validated non-empty");
            report.measured = worst;
            report.pass = Comparison::AtLeastAbsolute.holds(worst, 0.0, tol.convexity);
            report.trials(c.convexity_frames.len()).note("measured = min eigenvalue of DᵀD over all frame counts")
        }
        CheckId::DescentMonotone => descent_check(c, seed)?,
        CheckId::BilateralWeights => {
            let [h, w] = c.latent_shape;
            let p = &c.bilateral;
            let spec = RandomSpec::gaussian(seed);
            let diag = fan_out(n.bilateral_weights, |i| {
                let x = Latent2D::new(h, w, spec.for_trial(i).sampler().gaussians(h * w))?;
                Ok(weight_diagnostics(&x, p))
            })?;
            let worst = diag.iter().map(|d| d.0).fold(0.0, f64::max);
            let min_weight = diag.iter().map(|d| d.1).fold(f64::INFINITY, f64::min);
            let constant = Latent2D::filled(h, w, 0.37)?;
            let x = Latent2D::new(h, w, spec.for_trial(u64::MAX).sampler().gaussians(h * w))?;
            let identity = BilateralParams { radius: 0, ..*p };
            VerificationReport::compare(check.name(), worst, tol.weight_sum, Comparison::AtMostAbsolute, 0.0)
                .trials(n.bilateral_weights)
                .detail("min_weight", min_weight)
                .require(min_weight >= 0.0, "weights nonnegative")
                .require(bilateral_filter(&constant, p)? == constant, "constant image is a fixed point")
                .require(bilateral_filter(&x, &identity)? == x, "radius 0 is the identity")
                .note("measured = worst |sum of weights - 1|")
        }
        CheckId::BilateralNonexpansive => {
            let [h, w] = c.latent_shape;
            let mut r = certify_nonexpansive(&c.bilateral, &RandomSpec::gaussian(seed), (h, w), n.nonexpansive)?;
            r.tolerance = tol.nonexpansive;
            r.pass = r.pass && Comparison::AtMostAbsolute.holds(r.measured, r.bound, tol.nonexpansive);
            r
        }
        CheckId::DdimStepOracle => ddim_oracle_check(c, seed)?,
        CheckId::AttentionDecomposition => {
            let spec = RandomSpec::gaussian(seed);
            let l_hat = softmax_estimate(c, &spec)?;
            let r = certify_decomposition(&c.attention, &spec, n.attention, l_hat.max(1.0))?;
            VerificationReport::compare(check.name(), r.max_residual, tol.decomposition, Comparison::AtMostAbsolute, 0.0)
                .trials(r.trials)
                .detail("max_term_b_excess", r.max_term_b_excess)
                .detail("max_term_a_excess", r.max_term_a_excess)
                .require(r.max_term_b_excess <= tol.term_slack, "Term B within ‖W_V‖₂‖ΔZ‖_F")
                .note("measured = max residual of the two-term identity; Term A bound reported in details")
        }
        CheckId::AttentionAlignment => {
            let spec = RandomSpec::gaussian(seed);
            let r = certify_alignment_bound(&c.attention, &spec, n.attention, n.softmax_lipschitz)?;
            let all_within = r.pass_with(tol.alignment_rtol, tol.decomposition, tol.term_slack);
            VerificationReport::compare(check.name(), r.worst_ratio, 1.0, Comparison::AtMostRelative, tol.alignment_rtol)
                .trials(r.trials)
                .detail("error", r.error)
                .detail("delta_z", r.delta_z)
                .detail("gamma", r.gamma)
                .detail("gamma_unsimplified", r.gamma_unsimplified)
                .detail("bound", r.bound)
                .detail("l_softmax_estimate", r.l_softmax_estimate)
                .detail("l_softmax_used", r.l_softmax_used)
                .detail("sqrt_d", (c.attention.d as f64).sqrt())
                .require(all_within, "every trial within γ‖ΔZ‖_F, decomposition and Term B")
                .note("measured = worst error / (γ‖ΔZ‖_F) over trials")
        }
        CheckId::TokenSufficiency => {
            let runs = sufficiency_runs(c, seed, c.sufficiency.queries)?;
            let worst = runs.iter().map(|r| r.final_error).fold(0.0, f64::max);
            let wide = sufficiency_runs(c, seed, c.attention.queries)?;
            let wide_worst = wide.iter().map(|r| r.final_error).fold(0.0, f64::max);
            VerificationReport::compare(check.name(), worst, tol.sufficiency_target, Comparison::AtMostAbsolute, 0.0)
                .trials(runs.len())
                .require(worst < tol.sufficiency_target, "final error strictly below target")
                .detail("queries", c.sufficiency.queries as f64)
                .detail("diagnostic_queries", c.attention.queries as f64)
                .detail("diagnostic_worst_final_error", wide_worst)
                .note("measured = worst final alignment error over seeds")
        }
        CheckId::DdimPerStepBound | CheckId::DdimEndToEndBound => unreachable!("handled by run_suite"),
    };
    Ok(report)
}

fn softmax_estimate(c: &SuiteConfig, spec: &RandomSpec) -> Result<f64> {
    estimate_softmax_lipschitz(
        c.attention.queries,
        c.attention.token_count(),
        c.trials.softmax_lipschitz,
        &spec.for_trial(u64::MAX),
    )
}

/// Step size `safety · 2 / L̂` with `L̂` estimated on the suite's norm window.
pub fn descent_step_size(c: &SuiteConfig, seed: u64) -> Result<(f64, f64)> {
    let spec = RandomSpec::gaussian(seed).with_window(c.norm_window);
    let l_hat = estimate_lipschitz(&spec, c.frames, c.tensor_shape, c.trials.descent_lipschitz)?.max_ratio;
    Ok((c.descent.safety * max_stable_eta(l_hat)?, l_hat))
}

fn descent_check(c: &SuiteConfig, seed: u64) -> Result<VerificationReport> {
    let (eta, l_hat) = descent_step_size(c, seed)?;
    let spec = RandomSpec::gaussian(seed ^ (1 << 32)).with_window(c.norm_window);
    let runs = fan_out(c.trials.descent_runs, |i| {
        let seq = spec.for_trial(i).sampler().sequence(c.frames, c.tensor_shape)?;
        run_descent(&seq, eta, c.descent.steps, c.descent.grad_tol)
    })?;
    let max_increase = runs
        .iter()
        .flat_map(|r| r.losses.windows(2).map(|w| w[1] - w[0]))
        .fold(f64::NEG_INFINITY, f64::max);
    let decrease_excess = runs
        .iter()
        .map(|r| r.max_sufficient_decrease_excess(l_hat))
        .fold(f64::NEG_INFINITY, f64::max);
    let converged = runs.iter().filter(|r| r.converged).count();
    let final_loss = runs.iter().map(|r| *r.losses.last().expect("nonempty")).fold(0.0, f64::max);
    Ok(VerificationReport::compare(
        CheckId::DescentMonotone.name(),
        max_increase,
        0.0,
        Comparison::AtMostAbsolute,
        c.tolerances.monotone_slack,
    )
    .trials(runs.len())
    .detail("eta", eta)
    .detail("lipschitz_estimate", l_hat)
    .detail("max_sufficient_decrease_excess", decrease_excess)
    .detail("converged_runs", converged as f64)
    .detail("max_final_loss", final_loss)
    .require(
        decrease_excess <= c.tolerances.sufficient_decrease_slack,
        "sufficient decrease at every step",
    )
    .note("measured = max loss(k+1) - loss(k) over all runs and steps"))
}

fn ddim_oracle_check(c: &SuiteConfig, seed: u64) -> Result<VerificationReport> {
    let [h, w] = c.latent_shape;
    let spec = RandomSpec::gaussian(seed);
    let worst = fan_out(c.trials.ddim_oracle, |i| {
        let mut s = spec.for_trial(i).sampler();
        let steps = 1 + (s.uniform(0.0, 10.0) as usize);
        let alphas = (0..steps).map(|_| s.uniform(0.5, 1.0)).collect();
        let sched = DiffusionSchedule::from_alphas(alphas)?;
        let t = 1 + (s.uniform(0.0, steps as f64) as usize).min(steps - 1);
        let radius = (s.uniform(0.0, 3.0) as usize).min(h.min(w));
        let p = BilateralParams::new(s.uniform(0.5, 3.0), s.uniform(0.1, 2.0), radius)?;
        let pred = LipschitzPredictor::random_linear(seed ^ i, h * w, s.uniform(0.0, 2.0))?;
        let x = Latent2D::new(h, w, s.gaussians(h * w))?;
        let z = Latent2D::new(h, w, s.gaussians(h * w))?;
        let fast = ddim_inversion_step(&x, &sched, t, &pred, &z, &p)?;
        let slow = reference::inversion_step(&x, &sched, t, &pred, &z, &p);
        Ok(max_rtol(fast.data(), &slow))
    })?
    .into_iter()
    .fold(0.0, f64::max);
    Ok(VerificationReport::compare(
        CheckId::DdimStepOracle.name(),
        worst,
        c.tolerances.ddim_oracle_rtol,
        Comparison::AtMostAbsolute,
        0.0,
    )
    .trials(c.trials.ddim_oracle)
    .note("measured = max rtol of the filtered step against the scalar reimplementation"))
}

/// Runs the Monte-Carlo error-propagation simulation for the suite config.
pub fn ddim_propagation(c: &SuiteConfig, seed: u64) -> Result<ErrorPropagationReport> {
    let [h, w] = c.latent_shape;
    let setup = ErrorPropagationSetup {
        schedule: c.schedule.build()?,
        params: c.bilateral,
        predictor: LipschitzPredictor::from_kind(c.ddim.predictor, h * w)?,
        delta: c.ddim.delta,
        shape: (h, w),
        trials: c.trials.ddim_error,
        ideal_level: c.ddim.ideal_level,
    };
    simulate_error_propagation(&setup, &RandomSpec::gaussian(seed))
}

fn ddim_report(c: &SuiteConfig, check: CheckId, r: &ErrorPropagationReport) -> VerificationReport {
    let slack = c.tolerances.monte_carlo_slack;
    let base = match check {
        CheckId::DdimPerStepBound => {
            let worst = r
                .per_step
                .iter()
                .map(|s| if s.bound > 0.0 { s.mean_error / s.bound } else if s.mean_error == 0.0 { 0.0 } else { f64::INFINITY })
                .fold(0.0, f64::max);
            VerificationReport::compare(check.name(), worst, 1.0, Comparison::AtMostRelative, slack)
                .note("measured = worst mean error / (C·prev + √(1−α_{t−1})·√d) over steps")
        }
        _ => VerificationReport::compare(check.name(), r.final_error, r.final_bound, Comparison::AtMostRelative, slack)
            .detail("bound_forward", r.bound_forward)
            .detail("bound_unrolled", r.bound_unrolled)
            .note("bound = larger of the two unrolled forms"),
    };
    base.trials(r.trials)
        .detail("contraction_constant", r.contraction_constant)
        .detail("dimension", r.dimension as f64)
        .detail("initial_error", r.initial_error)
}

/// One token-sufficiency descent per seed, with `queries` query rows.
pub fn sufficiency_runs(c: &SuiteConfig, seed: u64, queries: usize) -> Result<Vec<SufficiencyRun>> {
    let setup = SufficiencySetup {
        generator: AlignmentGenerator {
            queries,
            ..c.attention
        },
        steps: c.sufficiency.steps,
        eta: c.sufficiency.eta,
        start_at_ideal: false,
    };
    let spec = RandomSpec::gaussian(seed);
    fan_out(c.trials.sufficiency_seeds, |i| {
        token_sufficiency_experiment(&setup, &spec.for_trial(i))
    })
}

/// Mean consecutive similarity at every descent iterate for one random sequence.
pub fn similarity_trajectory(c: &SuiteConfig) -> Result<Vec<f64>> {
    let seed = check_seed(c.seed, CheckId::DescentMonotone);
    let (eta, _) = descent_step_size(c, seed)?;
    let spec = RandomSpec::gaussian(seed ^ (1 << 32)).with_window(c.norm_window);
    let seq = spec.sampler().sequence(c.frames, c.tensor_shape)?;
    toy_similarity_trajectory(&seq, eta, c.descent.steps)
}

/// Per-step alignment errors of the first token-sufficiency seed.
pub fn token_sufficiency_series(c: &SuiteConfig) -> Result<Vec<f64>> {
    let seed = check_seed(c.seed, CheckId::TokenSufficiency);
    let runs = sufficiency_runs(
        &SuiteConfig {
            trials: TrialCounts {
                sufficiency_seeds: 1,
                ..c.trials
            },
            ..c.clone()
        },
        seed,
        c.sufficiency.queries,
    )?;
    Ok(runs.into_iter().next().expect("one seed").errors)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(seed: u64) -> FeatureTensor {
        RandomSpec::gaussian(seed).sampler().tensor([2, 3, 2]).unwrap()
    }

    #[test]
    fn quadratic_gradient_is_identity() {
        let x = sample(1);
        let h = 1e-4;
        let g = fd_gradient(|v| Ok(0.5 * v.frobenius_norm().powi(2)), &x, h).unwrap();
        assert!(max_rtol(g.data(), x.data()) <= h * h);
    }

    #[test]
    fn constant_function_has_zero_gradient() {
        let g = fd_gradient(|_| Ok(3.25), &sample(2), 1e-6).unwrap();
        assert!(g.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn richardson_ratio_on_smooth_function() {
        let x = sample(3);
        let f = |v: &FeatureTensor| Ok(v.data().iter().map(|a| a.sin()).sum::<f64>());
        let exact: Vec<f64> = x.data().iter().map(|a| a.cos()).collect();
        let err = |h: f64| {
            let g = fd_gradient(f, &x, h).unwrap();
            g.data().iter().zip(&exact).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
        };
        let ratio = err(1e-2) / err(5e-3);
        assert!((3.0..=5.0).contains(&ratio), "{ratio}");
    }

    #[test]
    fn cosine_gradient_consistent_across_steps() {
        let f = sample(4);
        let g = sample(5);
        let closed = cosine_sim_grad(&f, &g).unwrap();
        for h in [1e-6, 5e-7] {
            let fd = fd_gradient(|x| cosine_sim(x, &g), &f, h).unwrap();
            assert!(max_rtol(closed.data(), fd.data()) <= 1e-4);
        }
    }

    #[test]
    fn evaluation_errors_carry_coordinate() {
        let x = FeatureTensor::vector(vec![0.0, 1e-9]).unwrap();
        let zero = FeatureTensor::vector(vec![0.0, 0.0]).unwrap();
        let err = fd_gradient(|v| cosine_sim(v, &zero), &x, 1e-6).unwrap_err();
        assert!(matches!(err, Error::Evaluation { coordinate: 0, .. }));
        assert!(fd_gradient(|_| Ok(0.0), &x, 0.0).is_err());
    }

    #[test]
    fn empty_check_list_gives_no_reports() {
        let c = SuiteConfig {
            checks: Some(vec![]),
            ..SuiteConfig::default()
        };
        assert!(run_suite(&c).unwrap().is_empty());
    }

    #[test]
    fn invalid_config_is_rejected_before_running() {
        let c = SuiteConfig {
            frames: 1,
            ..SuiteConfig::default()
        };
        assert!(matches!(run_suite(&c), Err(Error::Config(_))));
    }

    #[test]
    fn failing_check_is_reported_not_raised() {
        let mut c = SuiteConfig {
            checks: Some(vec![CheckId::SimGradFd]),
            ..SuiteConfig::default()
        };
        c.tolerances.fd_rtol = 0.0;
        let reports = run_suite(&c).unwrap();
        assert_eq!(reports.len(), 1);
        assert!(!reports[0].pass);
    }

    #[test]
    fn check_seeds_are_distinct() {
        let mut seeds: Vec<u64> = CheckId::ALL.iter().map(|c| check_seed(42, *c)).collect();
        seeds.sort();
        seeds.dedup();
        assert_eq!(seeds.len(), CheckId::ALL.len());
    }
}
