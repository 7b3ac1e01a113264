//! Suite configuration: JSON-loadable, every field defaulted and validated.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::attention::AlignmentGenerator;
use crate::bilateral::BilateralParams;
use crate::ddim::{DiffusionSchedule, PredictorKind};
use crate::error::{Error, Result};
use crate::temporal::{LossWeights, MIN_FRAMES};
use crate::tensor::{NormWindow, JACOBI_MAX_DIM};

/// Registered checks, in the order the suite runs them.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CheckId {
    SimGradFd,
    SimGradBound,
    TemporalGradFd,
    TemporalLipschitz,
    Convexity,
    DescentMonotone,
    BilateralWeights,
    BilateralNonexpansive,
    DdimStepOracle,
    DdimPerStepBound,
    DdimEndToEndBound,
    AttentionDecomposition,
    AttentionAlignment,
    TokenSufficiency,
}

impl CheckId {
    pub const ALL: [CheckId; 14] = [
        CheckId::SimGradFd,
        CheckId::SimGradBound,
        CheckId::TemporalGradFd,
        CheckId::TemporalLipschitz,
        CheckId::Convexity,
        CheckId::DescentMonotone,
        CheckId::BilateralWeights,
        CheckId::BilateralNonexpansive,
        CheckId::DdimStepOracle,
        CheckId::DdimPerStepBound,
        CheckId::DdimEndToEndBound,
        CheckId::AttentionDecomposition,
        CheckId::AttentionAlignment,
        CheckId::TokenSufficiency,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CheckId::SimGradFd => "sim-grad-fd",
            CheckId::SimGradBound => "sim-grad-bound",
            CheckId::TemporalGradFd => "temporal-grad-fd",
            CheckId::TemporalLipschitz => "temporal-lipschitz",
            CheckId::Convexity => "convexity",
            CheckId::DescentMonotone => "descent-monotone",
            CheckId::BilateralWeights => "bilateral-weights",
            CheckId::BilateralNonexpansive => "bilateral-nonexpansive",
            CheckId::DdimStepOracle => "ddim-step-oracle",
            CheckId::DdimPerStepBound => "ddim-per-step-bound",
            CheckId::DdimEndToEndBound => "ddim-end-to-end-bound",
            CheckId::AttentionDecomposition => "attention-decomposition",
            CheckId::AttentionAlignment => "attention-alignment",
            CheckId::TokenSufficiency => "token-sufficiency",
        }
    }

    /// Position in [`CheckId::ALL`].
    pub fn index(self) -> usize {
        CheckId::ALL.iter().position(|c| *c == self).expect("registered")
    }
}

impl fmt::Display for CheckId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CheckId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        CheckId::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown check id `{s}`")))
    }
}

/// `α_t` as one constant or an explicit list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum AlphaSpec {
    Constant(f64),
    List(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub alpha: AlphaSpec,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            steps: 10,
            alpha: AlphaSpec::Constant(0.99),
        }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<DiffusionSchedule> {
        match &self.alpha {
            AlphaSpec::Constant(a) => DiffusionSchedule::constant(self.steps, *a),
            AlphaSpec::List(list) => {
                if list.len() != self.steps {
                    return Err(Error::Config(format!(
                        "schedule lists {} alphas for {} steps",
                        list.len(),
                        self.steps
                    )));
                }
                DiffusionSchedule::from_alphas(list.clone())
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrialCounts {
    pub sim_grad_fd: usize,
    pub sim_grad_bound: usize,
    pub temporal_grad_fd: usize,
    pub lipschitz: usize,
    /// Trials behind the `L̂` that sets the descent step size.
    pub descent_lipschitz: usize,
    pub descent_runs: usize,
    pub bilateral_weights: usize,
    pub nonexpansive: usize,
    pub ddim_oracle: usize,
    pub ddim_error: usize,
    pub attention: usize,
    pub softmax_lipschitz: usize,
    pub sufficiency_seeds: usize,
}

impl Default for TrialCounts {
    fn default() -> Self {
        Self {
            sim_grad_fd: 100,
            sim_grad_bound: 1000,
            temporal_grad_fd: 50,
            lipschitz: 500,
            descent_lipschitz: 200,
            descent_runs: 20,
            bilateral_weights: 20,
            nonexpansive: 500,
            ddim_oracle: 50,
            ddim_error: 200,
            attention: 200,
            softmax_lipschitz: 1000,
            sufficiency_seeds: 5,
        }
    }
}

impl TrialCounts {
    /// Sets every Monte-Carlo trial count to `n`; run and seed counts are kept.
    pub fn override_all(&mut self, n: usize) {
        self.sim_grad_fd = n;
        self.sim_grad_bound = n;
        self.temporal_grad_fd = n;
        self.lipschitz = n;
        self.descent_lipschitz = n;
        self.bilateral_weights = n;
        self.nonexpansive = n;
        self.ddim_oracle = n;
        self.ddim_error = n;
        self.attention = n;
        self.softmax_lipschitz = n;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Tolerances {
    pub fd_step: f64,
    pub fd_rtol: f64,
    pub convexity: f64,
    pub monotone_slack: f64,
    pub sufficient_decrease_slack: f64,
    pub weight_sum: f64,
    pub nonexpansive: f64,
    pub ddim_oracle_rtol: f64,
    pub monte_carlo_slack: f64,
    pub decomposition: f64,
    pub term_slack: f64,
    pub alignment_rtol: f64,
    pub sufficiency_target: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Self {
            fd_step: 1e-6,
            fd_rtol: 1e-4,
            convexity: 1e-10,
            monotone_slack: 1e-12,
            sufficient_decrease_slack: 1e-8,
            weight_sum: 1e-12,
            nonexpansive: 1e-12,
            ddim_oracle_rtol: 1e-12,
            monte_carlo_slack: 0.05,
            decomposition: 1e-10,
            term_slack: 1e-9,
            alignment_rtol: 1e-6,
            sufficiency_target: 1e-3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DescentConfig {
    pub steps: usize,
    /// Fraction of `2 / L̂` used as the step size.
    pub safety: f64,
    pub grad_tol: f64,
}

impl Default for DescentConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            safety: 0.9,
            grad_tol: 1e-7,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DdimConfig {
    pub predictor: PredictorKind,
    /// Initial error norm `δ`.
    pub delta: f64,
    pub ideal_level: f64,
}

impl Default for DdimConfig {
    fn default() -> Self {
        Self {
            predictor: PredictorKind::RandomLinear {
                seed: 7,
                target_spectral_norm: 0.5,
            },
            delta: 0.1,
            ideal_level: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SufficiencyConfig {
    /// Query rows for the descent; the alignment check uses `attention.queries`.
    pub queries: usize,
    pub steps: usize,
    pub eta: f64,
}

impl Default for SufficiencyConfig {
    fn default() -> Self {
        Self {
            queries: 1,
            steps: 2000,
            eta: 0.05,
        }
    }
}

/// Full suite configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SuiteConfig {
    pub seed: u64,
    /// Window for gradient, descent and similarity checks.
    pub norm_window: NormWindow,
    /// Window for the gradient-norm and Lipschitz ceilings.
    pub bound_window: NormWindow,
    pub frames: usize,
    pub tensor_shape: [usize; 3],
    pub latent_shape: [usize; 2],
    pub convexity_frames: Vec<usize>,
    pub schedule: ScheduleConfig,
    pub bilateral: BilateralParams,
    pub ddim: DdimConfig,
    pub attention: AlignmentGenerator,
    pub sufficiency: SufficiencyConfig,
    pub descent: DescentConfig,
    pub loss_weights: LossWeights,
    pub trials: TrialCounts,
    pub tolerances: Tolerances,
    /// Checks to run; `None` runs all of them.
    pub checks: Option<Vec<CheckId>>,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            norm_window: NormWindow { min: 0.5, max: 2.0 },
            bound_window: NormWindow { min: 1.0, max: 1.0 },
            frames: 5,
            tensor_shape: [4, 4, 3],
            latent_shape: [8, 8],
            convexity_frames: vec![3, 4, 8, 16, 64],
            schedule: ScheduleConfig::default(),
            bilateral: BilateralParams::default(),
            ddim: DdimConfig::default(),
            attention: AlignmentGenerator::default(),
            sufficiency: SufficiencyConfig::default(),
            descent: DescentConfig::default(),
            loss_weights: LossWeights::default(),
            trials: TrialCounts::default(),
            tolerances: Tolerances::default(),
            checks: None,
        }
    }
}

fn positive(name: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::Config(format!("{name} must be positive and finite, got {v}")))
    }
}

fn at_least(name: &str, v: usize, min: usize) -> Result<()> {
    if v >= min {
        Ok(())
    } else {
        Err(Error::Config(format!("{name} must be at least {min}, got {v}")))
    }
}

impl SuiteConfig {
    /// Parses and validates a JSON document.
    pub fn from_json(text: &str) -> Result<Self> {
        let config: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn enabled_checks(&self) -> Vec<CheckId> {
        match &self.checks {
            None => CheckId::ALL.to_vec(),
            Some(list) => CheckId::ALL.into_iter().filter(|c| list.contains(c)).collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let cfg = |e: Error| match e {
            Error::Config(_) => e,
            other => Error::Config(other.to_string()),
        };
        for (name, w) in [("norm_window", self.norm_window), ("bound_window", self.bound_window)] {
            NormWindow::new(w.min, w.max).map_err(|e| Error::Config(format!("{name}: {e}")))?;
        }
        at_least("frames", self.frames, MIN_FRAMES)?;
        if self.tensor_shape.contains(&0) {
            return Err(Error::Config(format!("tensor_shape {:?} has a zero extent", self.tensor_shape)));
        }
        if self.latent_shape.contains(&0) {
            return Err(Error::Config(format!("latent_shape {:?} has a zero extent", self.latent_shape)));
        }
        for &t in &self.convexity_frames {
            if !(MIN_FRAMES..=JACOBI_MAX_DIM + 2).contains(&t) {
                return Err(Error::Config(format!(
                    "convexity frame count {t} outside {MIN_FRAMES}..={}",
                    JACOBI_MAX_DIM + 2
                )));
            }
        }
        if self.convexity_frames.is_empty() {
            return Err(Error::Config("convexity_frames is empty".into()));
        }
        at_least("schedule.steps", self.schedule.steps, 1)?;
        self.schedule.build().map_err(cfg)?;
        self.bilateral.validate().map_err(cfg)?;
        let [h, w] = self.latent_shape;
        if self.bilateral.radius > h.min(w) {
            return Err(Error::Config(format!(
                "bilateral radius {} exceeds latent extent {h}x{w}",
                self.bilateral.radius
            )));
        }
        if !(self.ddim.delta >= 0.0 && self.ddim.delta.is_finite()) {
            return Err(Error::Config(format!("ddim.delta {} must be nonnegative", self.ddim.delta)));
        }
        match self.ddim.predictor {
            PredictorKind::ScaledIdentity { c } if !c.is_finite() => {
                return Err(Error::Config("ddim predictor scale must be finite".into()))
            }
            PredictorKind::RandomLinear {
                target_spectral_norm, ..
            } if !(target_spectral_norm >= 0.0 && target_spectral_norm.is_finite()) => {
                return Err(Error::Config("ddim predictor norm must be nonnegative".into()))
            }
            _ => {}
        }
        self.attention.validate().map_err(cfg)?;
        at_least("sufficiency.queries", self.sufficiency.queries, 1)?;
        at_least("sufficiency.steps", self.sufficiency.steps, 1)?;
        positive("sufficiency.eta", self.sufficiency.eta)?;
        at_least("descent.steps", self.descent.steps, 1)?;
        if !(self.descent.safety > 0.0 && self.descent.safety < 1.0) {
            return Err(Error::Config(format!(
                "descent.safety {} must lie in (0, 1)",
                self.descent.safety
            )));
        }
        if !(self.descent.grad_tol >= 0.0) {
            return Err(Error::Config("descent.grad_tol must be nonnegative".into()));
        }
        let t = &self.trials;
        for (name, n) in [
            ("sim_grad_fd", t.sim_grad_fd),
            ("sim_grad_bound", t.sim_grad_bound),
            ("temporal_grad_fd", t.temporal_grad_fd),
            ("lipschitz", t.lipschitz),
            ("descent_lipschitz", t.descent_lipschitz),
            ("descent_runs", t.descent_runs),
            ("bilateral_weights", t.bilateral_weights),
            ("nonexpansive", t.nonexpansive),
            ("ddim_oracle", t.ddim_oracle),
            ("attention", t.attention),
            ("softmax_lipschitz", t.softmax_lipschitz),
            ("sufficiency_seeds", t.sufficiency_seeds),
        ] {
            at_least(&format!("trials.{name}"), n, 1)?;
        }
        at_least("trials.ddim_error", t.ddim_error, 10)?;
        let tol = &self.tolerances;
        positive("tolerances.fd_step", tol.fd_step)?;
        for (name, v) in [
            ("fd_rtol", tol.fd_rtol),
            ("convexity", tol.convexity),
            ("monotone_slack", tol.monotone_slack),
            ("sufficient_decrease_slack", tol.sufficient_decrease_slack),
            ("weight_sum", tol.weight_sum),
            ("nonexpansive", tol.nonexpansive),
            ("ddim_oracle_rtol", tol.ddim_oracle_rtol),
            ("monte_carlo_slack", tol.monte_carlo_slack),
            ("decomposition", tol.decomposition),
            ("term_slack", tol.term_slack),
            ("alignment_rtol", tol.alignment_rtol),
            ("sufficiency_target", tol.sufficiency_target),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("tolerances.{name} must be nonnegative, got {v}")));
            }
        }
        for (name, v) in [
            ("temporal", self.loss_weights.temporal),
            ("diffusion", self.loss_weights.diffusion),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("loss_weights.{name} must be nonnegative")));
            }
        }
        Ok(())
    }
}
