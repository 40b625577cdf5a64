//! Environment configuration files and construction of every run component from them.
//!
//! Configs are TOML. See `envs/*.toml` for the shipped environments and the README for the
//! field-by-field schema.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::erm::{refined_delta_max, SolverOptions};
use crate::error::{Error, Result};
use crate::loss::{GlmLoss, LossSpec, LsLoss};
use crate::policy::{
    auto_burn_in, certify_constants, first_positive_m, CertStatus, Certificate, CertifyOptions,
    EpsilonSchedule, ExplorationKernel, Policy,
};
use crate::response::{FeatureMap, GlmSpec, LeastSquaresSpec, Link, ResponseModel, RewardFunction};
use crate::types::{ActionInterval, ModelConstants, ParameterVector, Segment, SegmentSpace};

/// Shipped environments, by name.
pub const SHIPPED: &[(&str, &str)] = &[
    ("logit-2seg", include_str!("../envs/logit-2seg.toml")),
    ("gauss-1seg", include_str!("../envs/gauss-1seg.toml")),
];

/// Multiplier in the exploration-scale lower bound `c_lo >= 30 C_H / rho_H`.
pub const THEORY_SCALE_FACTOR: f64 = 30.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvironmentConfig {
    pub name: String,
    pub segments: Vec<Segment>,
    pub actions: ActionsConfig,
    pub model: ModelConfig,
    #[serde(default)]
    pub reward: RewardConfig,
    #[serde(default)]
    pub exploration: ExplorationConfig,
    pub schedule: ScheduleConfig,
    pub policy: PolicyConfig,
    #[serde(default)]
    pub erm: ErmConfig,
    #[serde(default)]
    pub certify: CertifyConfig,
    pub run: RunConfig,
    #[serde(default)]
    pub diagnostics: DiagnosticsConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ActionsConfig {
    pub lo: f64,
    pub hi: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LinkKind {
    Logistic,
    Gaussian,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossChoice {
    Glm,
    LeastSquares,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub link: LinkKind,
    /// Response variance; Gaussian link only.
    pub variance: Option<f64>,
    pub theta_star: Vec<f64>,
    /// Bound `W` on the reachable natural parameter.
    pub w_bound: f64,
    pub loss: LossChoice,
    /// `[y_lo, y_hi]`: simulated Gaussian responses are clamped here; also the least-squares bounds.
    pub response_bounds: Option<[f64; 2]>,
    /// `c1` of the least-squares loss, in `(0, 1 / (y_hi - y_lo))`.
    pub ls_c1: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardChoice {
    Margin,
    Zero,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RewardConfig {
    pub kind: RewardChoice,
    pub scale: f64,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self {
            kind: RewardChoice::Margin,
            scale: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelChoice {
    Uniform,
    Grid,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExplorationConfig {
    pub kind: KernelChoice,
    #[serde(default)]
    pub points: Vec<f64>,
}

impl Default for ExplorationConfig {
    fn default() -> Self {
        Self {
            kind: KernelChoice::Uniform,
            points: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    pub c: f64,
    pub c_lo: f64,
    pub c_hi: f64,
    /// Forced-exploration steps; omitted means the first `T` with a positive exploration margin.
    pub burn_in: Option<u64>,
    /// Last `T` of the construction-time sandwich scan (at least `run.t_max`).
    #[serde(default = "default_schedule_horizon")]
    pub horizon: u64,
    /// Fail the certificate when `c_lo < 30 C_H / rho_H`.
    #[serde(default = "default_true")]
    pub enforce_theory_constant: bool,
}

fn default_schedule_horizon() -> u64 {
    100_000
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicyConfig {
    /// Step size; omitted means `eta_fraction / L_a`.
    pub eta: Option<f64>,
    #[serde(default = "default_eta_fraction")]
    pub eta_fraction: f64,
    /// Initial action per segment (or one value for all).
    pub initial: Vec<f64>,
}

fn default_eta_fraction() -> f64 {
    0.9
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ErmConfig {
    pub tolerance: f64,
    pub max_iterations: usize,
    /// Re-solve when `t - last >= max(1, floor(refit_growth * t))`; 0 re-solves every step.
    pub refit_growth: f64,
}

impl Default for ErmConfig {
    fn default() -> Self {
        Self {
            tolerance: 1e-8,
            max_iterations: 100,
            refit_growth: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CertifyConfig {
    pub probe: usize,
    pub theta_samples: usize,
    pub theta_probe: usize,
    pub seed: u64,
}

impl Default for CertifyConfig {
    fn default() -> Self {
        let d = CertifyOptions::default();
        Self {
            probe: d.probe,
            theta_samples: d.theta_samples,
            theta_probe: d.theta_probe,
            seed: d.seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub t_max: u64,
    #[serde(default)]
    pub checkpoints: Vec<u64>,
    #[serde(default = "default_seeds")]
    pub seeds: u64,
    #[serde(default)]
    pub base_seed: u64,
    /// Action grid of the greedy baseline.
    #[serde(default = "default_greedy_grid")]
    pub greedy_grid: usize,
}

fn default_seeds() -> u64 {
    1
}

fn default_greedy_grid() -> usize {
    101
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiagnosticsConfig {
    /// Confidence level of the plain estimation-error bound.
    pub delta: f64,
    /// Confidence level of the exploration-aware bound, in `(0, 3 / pi^2]`.
    pub delta_refined: f64,
}

impl Default for DiagnosticsConfig {
    fn default() -> Self {
        Self {
            delta: 0.05,
            delta_refined: 0.01,
        }
    }
}

impl EnvironmentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configs serialize")
    }

    /// Loads a config from a path, or a shipped environment by name.
    pub fn load(path_or_name: &str) -> Result<Self> {
        let path = Path::new(path_or_name);
        if path.is_file() {
            return Self::from_toml(&std::fs::read_to_string(path)?);
        }
        match shipped(path_or_name) {
            Some(text) => Self::from_toml(text),
            None => Err(Error::Config(format!(
                "{path_or_name:?} is neither a config file nor a shipped environment ({})",
                SHIPPED
                    .iter()
                    .map(|(n, _)| *n)
                    .collect::<Vec<_>>()
                    .join(", ")
            ))),
        }
    }

    /// Seeds `base_seed .. base_seed + seeds`.
    pub fn seed_list(&self) -> Vec<u64> {
        (0..self.run.seeds)
            .map(|i| self.run.base_seed + i)
            .collect()
    }
}

pub fn shipped(name: &str) -> Option<&'static str> {
    SHIPPED.iter().find(|(n, _)| *n == name).map(|(_, t)| *t)
}

/// Everything a run needs, built and certified from one config.
#[derive(Debug, Clone)]
pub struct Environment {
    pub config: EnvironmentConfig,
    pub model: ResponseModel,
    pub reward: RewardFunction,
    pub kernel: ExplorationKernel,
    pub loss: LossSpec,
    pub schedule: EpsilonSchedule,
    pub certificate: Certificate,
    pub eta: f64,
    pub initial_policy: Policy,
    pub solver: SolverOptions,
}

impl Environment {
    pub fn constants(&self) -> &ModelConstants {
        &self.certificate.constants
    }

    pub fn name(&self) -> &str {
        &self.config.name
    }

    pub fn dim(&self) -> usize {
        self.model.dim()
    }

    /// Per-segment `(a*, r̄*)` under the true parameter.
    pub fn optimal_actions(&self) -> &[(f64, f64)] {
        &self.certificate.optimal_actions
    }
}

/// Builds every component and certifies it. Fails on any certificate failure.
pub fn build_environment(config: &EnvironmentConfig) -> Result<Environment> {
    let (cert, env) = assemble(config)?;
    if !cert.passed() {
        let reasons: Vec<String> = cert
            .failures()
            .map(|i| format!("{} = {}: {}", i.name, i.value, i.detail))
            .collect();
        return Err(Error::Certificate(reasons.join("; ")));
    }
    Ok(env.expect("a passing certificate implies a complete environment"))
}

/// Runs construction and certification, returning the certificate even when items fail.
pub fn certify_environment(config: &EnvironmentConfig) -> Result<Certificate> {
    Ok(assemble(config)?.0)
}

fn check_finite(field: &str, v: f64) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::invariant(field, format!("{v} is not finite")))
    }
}

fn assemble(config: &EnvironmentConfig) -> Result<(Certificate, Option<Environment>)> {
    let space = SegmentSpace::new(config.segments.clone())?;
    let interval = ActionInterval::new(config.actions.lo, config.actions.hi)?;
    let features = FeatureMap::segment_affine(space.len());
    let m = &config.model;
    check_finite("model.w_bound", m.w_bound)?;
    if m.w_bound <= 0.0 {
        return Err(Error::invariant("model.w_bound", "W must be > 0"));
    }

    let link = match m.link {
        LinkKind::Logistic => {
            if m.variance.is_some() {
                return Err(Error::invariant(
                    "model.variance",
                    "only meaningful for the gaussian link",
                ));
            }
            Link::Logistic
        }
        LinkKind::Gaussian => {
            let v = m.variance.ok_or_else(|| {
                Error::invariant("model.variance", "required for the gaussian link")
            })?;
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::invariant(
                    "model.variance",
                    format!("{v} must be > 0"),
                ));
            }
            Link::Gaussian { variance: v }
        }
    };
    let glm = GlmSpec::new(features, link)?;
    let theta_star = ParameterVector::new(m.theta_star.clone()).map_err(|e| match e {
        Error::NonFinite(msg) => Error::invariant("model.theta_star", msg),
        other => other,
    })?;
    let truncation = match (link, m.response_bounds) {
        (Link::Gaussian { .. }, Some([lo, hi])) => Some((lo, hi)),
        (Link::Gaussian { .. }, None) => {
            return Err(Error::invariant(
                "model.response_bounds",
                "required for the gaussian link",
            ));
        }
        (_, _) => None,
    };
    let model = ResponseModel::new(glm, theta_star, interval, space.clone(), truncation)?;
    model.check_containment(m.w_bound, config.certify.probe.max(2))?;

    let loss = match m.loss {
        LossChoice::Glm => LossSpec::Glm(GlmLoss::new(glm, m.w_bound)?),
        LossChoice::LeastSquares => {
            let Some([y_lo, y_hi]) = m.response_bounds else {
                return Err(Error::invariant(
                    "model.response_bounds",
                    "required for the least-squares loss",
                ));
            };
            let c1 = m.ls_c1.ok_or_else(|| {
                Error::invariant("model.ls_c1", "required for the least-squares loss")
            })?;
            if link
                != (Link::Gaussian {
                    variance: m.variance.unwrap_or(0.0),
                })
            {
                return Err(Error::invariant(
                    "model.loss",
                    "least squares needs the gaussian link, whose mean is affine in theta",
                ));
            }
            let spec = LeastSquaresSpec::affine(features, y_lo, y_hi, c1)?;
            spec.check_sandwich(&space, &interval, config.certify.probe.max(2))?;
            for x in 0..space.len() {
                for a in interval.grid(config.certify.probe.max(2)) {
                    let mu = spec.mean(model.truth().as_slice(), x, a);
                    if mu < y_lo || mu > y_hi {
                        return Err(Error::invariant(
                            "model.theta_star",
                            format!(
                                "mean {mu} outside [{y_lo}, {y_hi}] at segment {:?}, action {a}",
                                space.id(x)
                            ),
                        ));
                    }
                }
            }
            LossSpec::LeastSquares(LsLoss::new(spec)?)
        }
    };

    let reward = match config.reward.kind {
        RewardChoice::Margin => RewardFunction::margin(
            &space,
            &interval,
            config.reward.scale,
            model.response_abs_max(),
        )?,
        RewardChoice::Zero => RewardFunction::zero(),
    };
    let kernel = match config.exploration.kind {
        KernelChoice::Uniform => {
            if !config.exploration.points.is_empty() {
                return Err(Error::invariant(
                    "exploration.points",
                    "only meaningful for a grid kernel",
                ));
            }
            ExplorationKernel::uniform(interval)
        }
        KernelChoice::Grid => ExplorationKernel::grid(config.exploration.points.clone(), interval)?,
    };

    let diag = config.diagnostics;
    if !(diag.delta > 0.0 && diag.delta < 1.0) {
        return Err(Error::invariant(
            "diagnostics.delta",
            format!("{} must lie in (0, 1)", diag.delta),
        ));
    }
    if !(diag.delta_refined > 0.0 && diag.delta_refined <= refined_delta_max()) {
        return Err(Error::invariant(
            "diagnostics.delta_refined",
            format!("{} must lie in (0, 3/pi^2]", diag.delta_refined),
        ));
    }
    let erm = config.erm;
    if !(erm.tolerance > 0.0
        && erm.max_iterations >= 1
        && erm.refit_growth >= 0.0
        && erm.refit_growth < 1.0)
    {
        return Err(Error::invariant(
            "erm",
            "need tolerance > 0, max_iterations >= 1 and refit_growth in [0, 1)",
        ));
    }
    let run = &config.run;
    if let Some(&t) = run.checkpoints.iter().find(|&&t| t > run.t_max || t == 0) {
        return Err(Error::invariant(
            "run.checkpoints",
            format!("checkpoint {t} beyond horizon t_max = {}", run.t_max),
        ));
    }
    if run.greedy_grid < 2 {
        return Err(Error::invariant(
            "run.greedy_grid",
            "need at least two grid points",
        ));
    }

    let options = CertifyOptions {
        probe: config.certify.probe,
        theta_samples: config.certify.theta_samples,
        theta_probe: config.certify.theta_probe,
        seed: config.certify.seed,
    };
    let mut cert = certify_constants(&model, &reward, &kernel, &loss, m.w_bound, options)?;
    let consts = cert.constants;
    let d = model.dim();

    let eta_max = 1.0 / consts.l_a;
    let eta = match config.policy.eta {
        Some(eta) => eta,
        None => config.policy.eta_fraction * eta_max,
    };
    let eta_ok = eta > 0.0 && eta <= eta_max;
    cert.push(
        "eta",
        format!("{eta:.6e}"),
        format!("step size must lie in (0, 1/L_a] = (0, {eta_max:.6e}]"),
        if eta_ok {
            CertStatus::Pass
        } else {
            CertStatus::Fail
        },
    );

    let s = config.schedule;
    let burn_in = match s.burn_in {
        Some(b) => b,
        None => auto_burn_in(&consts, d, diag.delta_refined)?,
    };
    let horizon = s.horizon.max(run.t_max).max(1);
    let schedule = match EpsilonSchedule::new(s.c, s.c_lo, s.c_hi, d, burn_in, horizon) {
        Ok(schedule) => {
            let (lo, hi) = schedule.ratio_range();
            cert.push(
                "schedule.sandwich",
                format!("[{lo:.6}, {hi:.6}]"),
                format!(
                    "S(T) / (sqrt(T) ln(dT)) over T in [{}, {horizon}] within [{}, {}], c = {}, burn-in {burn_in}",
                    burn_in + 1,
                    s.c_lo,
                    s.c_hi,
                    schedule.c()
                ),
                CertStatus::Pass,
            );
            Some(schedule)
        }
        Err(e) => {
            cert.push(
                "schedule.sandwich",
                "violated",
                e.to_string(),
                CertStatus::Fail,
            );
            None
        }
    };

    let theory_min = THEORY_SCALE_FACTOR * consts.c_h / consts.rho_h;
    let theory_ok = s.c_lo >= theory_min;
    cert.push(
        "schedule.theory_constant",
        format!("c_lo = {} vs 30 C_H / rho_H = {theory_min:.6e}", s.c_lo),
        if theory_ok {
            "exploration-scale lower bound of the regret guarantee holds".to_string()
        } else if s.enforce_theory_constant {
            "c_lo is below the exploration-scale lower bound 30 C_H / rho_H of the regret guarantee"
                .to_string()
        } else {
            "c_lo is below 30 C_H / rho_H; waived by schedule.enforce_theory_constant = false"
                .to_string()
        },
        match (theory_ok, s.enforce_theory_constant) {
            (true, _) => CertStatus::Pass,
            (false, true) => CertStatus::Fail,
            (false, false) => CertStatus::Waived,
        },
    );

    if let Some(schedule) = &schedule {
        let first = first_positive_m(schedule, &consts, diag.delta_refined, horizon.min(10_000))?;
        cert.push(
            "margin.first_positive_T",
            first.map_or("none".to_string(), |t| t.to_string()),
            format!(
                "first T <= {} with a positive exploration margin M",
                horizon.min(10_000)
            ),
            CertStatus::Info,
        );
    }

    if let Err(e) = consts.validate() {
        cert.push("constants", "invalid", e.to_string(), CertStatus::Fail);
    }

    let initial = match config.policy.initial.as_slice() {
        [a] => vec![*a; space.len()],
        table if table.len() == space.len() => table.to_vec(),
        table => {
            return Err(Error::invariant(
                "policy.initial",
                format!("expected 1 or {} actions, got {}", space.len(), table.len()),
            ));
        }
    };
    let initial_policy = Policy::new(initial, interval)?;

    let env = schedule.map(|schedule| Environment {
        config: config.clone(),
        model,
        reward,
        kernel,
        loss,
        schedule,
        certificate: cert.clone(),
        eta,
        initial_policy,
        solver: SolverOptions {
            tolerance: erm.tolerance,
            max_iterations: erm.max_iterations,
        },
    });
    Ok((cert, env))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn logit() -> EnvironmentConfig {
        EnvironmentConfig::load("logit-2seg").unwrap()
    }

    fn fast(mut c: EnvironmentConfig) -> EnvironmentConfig {
        c.certify.theta_samples = 20;
        c
    }

    #[test]
    fn shipped_configs_round_trip() {
        for (name, text) in SHIPPED {
            let c = EnvironmentConfig::from_toml(text).unwrap();
            assert_eq!(&c.name, name);
            assert_eq!(EnvironmentConfig::from_toml(&c.to_toml()).unwrap(), c);
        }
    }

    #[test]
    fn shipped_environments_build() {
        for (name, _) in SHIPPED {
            let env = build_environment(&fast(EnvironmentConfig::load(name).unwrap())).unwrap();
            assert!(env.certificate.passed(), "{name}\n{}", env.certificate);
            assert!(env.constants().gamma_a > 0.0);
            for &(a, _) in env.optimal_actions() {
                let iv = env.model.interval();
                assert!(
                    a > iv.lo() + 1e-3 && a < iv.hi() - 1e-3,
                    "{name}: boundary optimum {a}"
                );
            }
        }
    }

    #[test]
    fn build_is_deterministic() {
        let a = build_environment(&fast(logit())).unwrap();
        let b = build_environment(&fast(logit())).unwrap();
        assert_eq!(a.certificate, b.certificate);
        assert_eq!(a.schedule, b.schedule);
    }

    #[test]
    fn escaping_truth_rejected_with_location() {
        let mut c = logit();
        c.model.theta_star[0] = 9.0;
        let err = build_environment(&c).unwrap_err().to_string();
        assert!(
            err.contains("model.theta_star") && err.contains("segment") && err.contains("action"),
            "{err}"
        );
    }

    #[test]
    fn oversized_step_rejected() {
        let mut c = fast(logit());
        let env = build_environment(&c).unwrap();
        c.policy.eta = Some(2.0 / env.constants().l_a);
        let err = build_environment(&c).unwrap_err().to_string();
        assert!(err.contains("eta"), "{err}");
    }

    #[test]
    fn theory_constant_enforced_on_request() {
        let mut c = fast(logit());
        c.schedule.enforce_theory_constant = true;
        let err = build_environment(&c).unwrap_err().to_string();
        assert!(err.contains("30 C_H / rho_H"), "{err}");
        let cert = certify_environment(&c).unwrap();
        assert_eq!(
            cert.item("schedule.theory_constant").unwrap().status,
            CertStatus::Fail
        );
    }

    #[test]
    fn degenerate_kernel_rejected() {
        let mut c = logit();
        c.exploration = ExplorationConfig {
            kind: KernelChoice::Grid,
            points: vec![0.7],
        };
        let err = build_environment(&c).unwrap_err().to_string();
        assert!(err.contains("exploration.points"), "{err}");
    }

    #[test]
    fn checkpoint_beyond_horizon_rejected() {
        let mut c = logit();
        c.run.t_max = 50;
        c.run.checkpoints = vec![100];
        let err = build_environment(&c).unwrap_err().to_string();
        assert!(
            err.contains("checkpoint beyond horizon") || err.contains("beyond horizon"),
            "{err}"
        );
    }

    #[test]
    fn unknown_fields_and_names_rejected() {
        let text = shipped("logit-2seg")
            .unwrap()
            .replace("[run]", "[run]\nbogus = 1");
        assert!(matches!(
            EnvironmentConfig::from_toml(&text),
            Err(Error::Parse(_))
        ));
        assert!(matches!(
            EnvironmentConfig::load("no-such-env"),
            Err(Error::Config(_))
        ));
    }
}
