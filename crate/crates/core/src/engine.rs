//! The epsilon-policy-gradient loop against a simulated environment, baselines, regret
//! accounting, replications and bound diagnostics.

use std::cell::RefCell;
use std::fmt;
use std::time::{Duration, Instant};

use rayon::prelude::*;

use crate::env::Environment;
use crate::erm::{confidence_bound, exploration_margin, ErmState, SolverReport};
use crate::error::{Error, Result};
use crate::linalg;
use crate::policy::Policy;
use crate::random::RandomStream;
use crate::response::{golden_section_min, ResponseModel, RewardFunction};
use crate::types::{ModelConstants, Observation, ParameterVector, SegmentId};

pub const ORACLE_GRID: usize = 1001;
pub const ORACLE_WIDTH: f64 = 1e-10;
/// Slack in the per-step descent-recursion check.
pub const RECURSION_TOLERANCE: f64 = 1e-12;

const STREAM_SEGMENTS: u64 = 1;
const STREAM_XI: u64 = 2;
const STREAM_EXPLORE: u64 = 3;
const STREAM_RESPONSE: u64 = 4;

/// Maximizer of `r̄_theta(x, .)`: 1001-point scan, golden-section refinement, lowest action on ties.
pub fn oracle_best_action(
    model: &ResponseModel,
    reward: &RewardFunction,
    theta: &ParameterVector,
    x: SegmentId,
) -> Result<(f64, f64)> {
    best_action_raw(model, reward, theta.as_slice(), x)
}

pub(crate) fn best_action_raw(
    model: &ResponseModel,
    reward: &RewardFunction,
    theta: &[f64],
    x: SegmentId,
) -> Result<(f64, f64)> {
    let grid = model.interval().grid(ORACLE_GRID);
    let (mut best_i, mut best_v) = (0, model.expected_reward_raw(theta, reward, x, grid[0])?);
    for (i, &a) in grid.iter().enumerate().skip(1) {
        let v = model.expected_reward_raw(theta, reward, x, a)?;
        if v > best_v {
            best_i = i;
            best_v = v;
        }
    }
    let lo = grid[best_i.saturating_sub(1)];
    let hi = grid[(best_i + 1).min(grid.len() - 1)];
    let failure = RefCell::new(None);
    let (a, neg) = golden_section_min(
        |a| match model.expected_reward_raw(theta, reward, x, a) {
            Ok(v) => -v,
            Err(e) => {
                failure.borrow_mut().get_or_insert(e);
                f64::INFINITY
            }
        },
        lo,
        hi,
        ORACLE_WIDTH,
    );
    if let Some(e) = failure.into_inner() {
        return Err(e);
    }
    let v = -neg;
    let grid_a = grid[best_i];
    if v > best_v || (v == best_v && a < grid_a) {
        Ok((a, v))
    } else {
        Ok((grid_a, best_v))
    }
}

/// Greedy action on an evenly spaced grid, lowest action on ties.
pub fn greedy_grid_action(
    model: &ResponseModel,
    reward: &RewardFunction,
    theta: &[f64],
    x: SegmentId,
    points: usize,
) -> Result<f64> {
    let mut best = (f64::NAN, f64::NEG_INFINITY);
    for a in model.interval().grid(points) {
        let v = model.expected_reward_raw(theta, reward, x, a)?;
        if v > best.1 {
            best = (a, v);
        }
    }
    Ok(best.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Algorithm {
    /// Epsilon-policy-gradient.
    Epg,
    /// Same loop, exploiting with the grid argmax of the estimated model.
    EpsGreedy,
    /// Always explore.
    PureExplore,
    /// Always play the true per-segment optimum.
    Oracle,
}

impl Algorithm {
    pub const ALL: [Algorithm; 4] = [
        Algorithm::Epg,
        Algorithm::EpsGreedy,
        Algorithm::PureExplore,
        Algorithm::Oracle,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Algorithm::Epg => "epg",
            Algorithm::EpsGreedy => "eps-greedy",
            Algorithm::PureExplore => "pure-explore",
            Algorithm::Oracle => "oracle",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|a| a.name() == s)
    }

    /// Whether exploitation reads the estimate (and so needs it refreshed while running).
    fn uses_estimate(&self) -> bool {
        matches!(self, Algorithm::Epg | Algorithm::EpsGreedy)
    }
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Which diagnostics to compute on emitted rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Diagnostics {
    pub confidence: bool,
    pub refined: bool,
    pub recursion: bool,
}

impl Default for Diagnostics {
    fn default() -> Self {
        Self {
            confidence: true,
            refined: true,
            recursion: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOptions {
    pub algorithm: Algorithm,
    pub t_max: u64,
    /// Steps at which a row is emitted; `t_max` is always added.
    pub checkpoints: Vec<u64>,
    /// Emit a row at every step.
    pub full_trace: bool,
    pub diagnostics: Diagnostics,
    /// Re-solve cadence: `t - last >= max(1, floor(refit_growth * t))`.
    pub refit_growth: f64,
    /// Use this parameter instead of the ERM estimate.
    pub fixed_theta: Option<ParameterVector>,
    /// Constant exploration probability replacing the schedule.
    pub epsilon_override: Option<f64>,
    pub greedy_grid: usize,
}

impl RunOptions {
    /// Options taken from the environment's `[run]` and `[erm]` sections.
    pub fn from_env(env: &Environment, algorithm: Algorithm) -> Self {
        Self {
            algorithm,
            t_max: env.config.run.t_max,
            checkpoints: env.config.run.checkpoints.clone(),
            full_trace: false,
            diagnostics: Diagnostics::default(),
            refit_growth: env.config.erm.refit_growth,
            fixed_theta: None,
            epsilon_override: None,
            greedy_grid: env.config.run.greedy_grid,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(&t) = self.checkpoints.iter().find(|&&t| t > self.t_max || t == 0) {
            return Err(Error::invariant(
                "checkpoints",
                format!("checkpoint {t} beyond horizon t_max = {}", self.t_max),
            ));
        }
        if !(self.refit_growth >= 0.0 && self.refit_growth < 1.0) {
            return Err(Error::invariant("refit_growth", "must lie in [0, 1)"));
        }
        if let Some(e) = self.epsilon_override {
            if !(0.0..=1.0).contains(&e) {
                return Err(Error::invariant("epsilon", format!("{e} outside [0, 1]")));
            }
        }
        if self.greedy_grid < 2 {
            return Err(Error::invariant("greedy_grid", "need at least two points"));
        }
        Ok(())
    }

    fn row_steps(&self) -> Vec<u64> {
        let mut steps = self.checkpoints.clone();
        if self.t_max > 0 {
            steps.push(self.t_max);
        }
        steps.sort_unstable();
        steps.dedup();
        steps
    }
}

/// One emitted row of a run trace.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRecord {
    pub t: u64,
    pub x: SegmentId,
    pub explored: bool,
    pub a: f64,
    pub y: f64,
    pub regret_increment: f64,
    pub cum_regret: f64,
    pub theta_err_sq: f64,
    pub rho_min_v: f64,
    pub thm31_bound: Option<f64>,
    pub thm31_ok: Option<bool>,
    /// `None` when the exploration margin is not positive (bound not applicable).
    pub thm32_bound: Option<f64>,
    pub thm32_applicable: Option<bool>,
    /// No recursion violation since the previous row; `None` when there is no policy to check.
    pub lemma44_ok: Option<bool>,
}

impl TraceRecord {
    pub fn thm32_violated(&self) -> bool {
        matches!(self.thm32_bound, Some(b) if self.theta_err_sq > b)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct SolverSummary {
    pub fits: u64,
    pub total_iterations: u64,
    pub max_iterations: usize,
    pub gradient_steps: u64,
    pub max_final_grad_norm: f64,
}

impl SolverSummary {
    fn absorb(&mut self, r: &SolverReport) {
        self.fits += 1;
        self.total_iterations += r.iterations as u64;
        self.max_iterations = self.max_iterations.max(r.iterations);
        self.gradient_steps += r.gradient_steps as u64;
        self.max_final_grad_norm = self.max_final_grad_norm.max(r.final_grad_norm);
    }
}

/// Per-run output. `records` holds emitted rows (all steps when full tracing).
#[derive(Debug, Clone, PartialEq)]
pub struct RunTrace {
    pub algorithm: Algorithm,
    pub seed: u64,
    pub t_max: u64,
    pub records: Vec<TraceRecord>,
    pub final_regret: f64,
    pub final_policy: Option<Policy>,
    pub final_theta: ParameterVector,
    pub solver: SolverSummary,
    pub explore_steps: u64,
    pub recursion_checks: u64,
    pub recursion_violations: u64,
    /// First violating `(t, segment, lhs, rhs)`.
    pub first_recursion_violation: Option<(u64, SegmentId, f64, f64)>,
}

impl RunTrace {
    /// Row at step `t`, if one was emitted.
    pub fn at(&self, t: u64) -> Option<&TraceRecord> {
        self.records.iter().find(|r| r.t == t)
    }
}

/// A run aborted by an error, with everything recorded up to the failure.
#[derive(Debug)]
pub struct RunFailure {
    pub t: u64,
    pub error: Error,
    pub trace: Box<RunTrace>,
}

impl fmt::Display for RunFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "run aborted at t = {}: {}", self.t, self.error)
    }
}

impl std::error::Error for RunFailure {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        Some(&self.error)
    }
}

/// Error bound that accounts for exploration; `None` when `M <= 0` (not applicable).
///
/// `(8 d ln(2 + C_H (2T + 6L)) + 16 ln(2T^2/delta) + 2 |theta*|^2) / M`, `L = ln(2 d T^2 / delta)`.
pub fn exploration_error_bound(
    t: u64,
    delta: f64,
    consts: &ModelConstants,
    sum_eps: f64,
    d: usize,
    theta_star_norm_sq: f64,
) -> Result<Option<f64>> {
    let m = exploration_margin(sum_eps, t, delta, consts, d)?;
    if m <= 0.0 {
        return Ok(None);
    }
    let tf = t as f64;
    let l = (2.0 * d as f64 * tf * tf / delta).ln();
    let num = 8.0 * d as f64 * (2.0 + consts.c_h * (2.0 * tf + 6.0 * l)).ln()
        + 16.0 * (2.0 * tf * tf / delta).ln()
        + 2.0 * theta_star_norm_sq;
    Ok(Some(num / m))
}

/// Sequential state of one run.
pub struct RunState<'a> {
    env: &'a Environment,
    options: RunOptions,
    erm: ErmState,
    policy: Policy,
    segments: RandomStream,
    xi: RandomStream,
    explore: RandomStream,
    response: RandomStream,
    t: u64,
    last_refit: u64,
    fresh: bool,
    cum_regret: f64,
    prev_gap: Vec<f64>,
    greedy_cache: Option<Vec<f64>>,
    recursion_ok_since_row: bool,
    trace: RunTrace,
}

impl<'a> RunState<'a> {
    pub fn new(env: &'a Environment, options: RunOptions, seed: u64) -> Result<Self> {
        options.validate()?;
        let master = RandomStream::from_seed(seed);
        let policy = env.initial_policy.clone();
        let theta = options
            .fixed_theta
            .clone()
            .unwrap_or_else(|| ParameterVector::zeros(env.dim()));
        let prev_gap = (0..policy.len())
            .map(|x| {
                env.optimal_actions()[x].1
                    - env
                        .model
                        .expected_reward_raw(
                            env.model.truth().as_slice(),
                            &env.reward,
                            x,
                            policy.action(x),
                        )
                        .unwrap_or(f64::NAN)
            })
            .collect();
        let mut erm = ErmState::new(env.dim());
        if let Some(t) = &options.fixed_theta {
            erm.set_theta(t.clone());
        }
        Ok(Self {
            env,
            erm,
            segments: master.substream(STREAM_SEGMENTS),
            xi: master.substream(STREAM_XI),
            explore: master.substream(STREAM_EXPLORE),
            response: master.substream(STREAM_RESPONSE),
            t: 0,
            last_refit: 0,
            fresh: true,
            cum_regret: 0.0,
            prev_gap,
            greedy_cache: None,
            recursion_ok_since_row: true,
            trace: RunTrace {
                algorithm: options.algorithm,
                seed,
                t_max: options.t_max,
                records: Vec::new(),
                final_regret: 0.0,
                final_policy: (options.algorithm == Algorithm::Epg).then(|| policy.clone()),
                final_theta: theta,
                solver: SolverSummary::default(),
                explore_steps: 0,
                recursion_checks: 0,
                recursion_violations: 0,
                first_recursion_violation: None,
            },
            policy,
            options,
        })
    }

    pub fn t(&self) -> u64 {
        self.t
    }

    pub fn theta(&self) -> &ParameterVector {
        self.erm.theta()
    }

    pub fn policy(&self) -> &Policy {
        &self.policy
    }

    pub fn erm(&self) -> &ErmState {
        &self.erm
    }

    fn epsilon(&self, t: u64) -> f64 {
        match (self.options.algorithm, self.options.epsilon_override) {
            (Algorithm::PureExplore, _) => 1.0,
            (Algorithm::Oracle, _) => 0.0,
            (_, Some(e)) => e,
            _ => self.env.schedule.epsilon_at(t),
        }
    }

    fn sum_epsilon(&self, t: u64) -> f64 {
        match (self.options.algorithm, self.options.epsilon_override) {
            (Algorithm::PureExplore, _) => t as f64,
            (Algorithm::Oracle, _) => 0.0,
            (_, Some(e)) => e * t as f64,
            _ => self.env.schedule.partial_sum(t),
        }
    }

    fn refit(&mut self) -> Result<()> {
        if self.options.fixed_theta.is_some() || self.fresh {
            return Ok(());
        }
        let report = self.erm.refit(&self.env.loss, self.env.solver)?;
        self.trace.solver.absorb(&report);
        self.last_refit = self.t;
        self.fresh = true;
        self.greedy_cache = None;
        Ok(())
    }

    fn refit_due(&self, t: u64) -> bool {
        let gap = ((self.options.refit_growth * t as f64).floor() as u64).max(1);
        t - self.last_refit >= gap
    }

    /// One iteration of the loop: segment, coin, action, response, estimate, policy step.
    ///
    /// Checkpoints always re-solve. Other emitted rows re-solve only when the estimate does not
    /// drive decisions, so full tracing never changes the trajectory.
    pub fn step(&mut self, emit_row: bool, checkpoint: bool) -> Result<Option<TraceRecord>> {
        let env = self.env;
        let t = self.t + 1;
        let x = env.model.space().sample(&mut self.segments);
        let xi = self.xi.uniform_open();
        // Drawn every step so exploration actions stay aligned across algorithms.
        let u = self.explore.uniform();
        let explored = xi < self.epsilon(t);
        let a = if explored {
            env.kernel.action_from_uniform(u)
        } else {
            match self.options.algorithm {
                Algorithm::Epg => self.policy.action(x),
                Algorithm::EpsGreedy => self.greedy_action(x)?,
                Algorithm::Oracle => env.optimal_actions()[x].0,
                Algorithm::PureExplore => unreachable!("pure exploration always explores"),
            }
        };
        let y = env.model.sample_response(x, a, &mut self.response)?;
        self.t = t;
        self.erm.ingest(
            Observation {
                t,
                x,
                a,
                y,
                explored,
            },
            &env.loss,
        )?;
        self.fresh = false;
        if explored {
            self.trace.explore_steps += 1;
        }
        let checkpoint = checkpoint || t == self.options.t_max;
        let row_due = emit_row || checkpoint;
        let refit = if self.options.algorithm.uses_estimate() {
            checkpoint || self.refit_due(t)
        } else {
            row_due
        };
        if refit {
            self.refit()?;
        }

        let theta_star = env.model.truth().as_slice();
        let theta_err_sq = self.erm.theta().distance_sq(env.model.truth());
        if self.options.algorithm == Algorithm::Epg {
            self.policy.pg_step(
                &env.model,
                &env.reward,
                self.erm.theta().as_slice(),
                env.eta,
            )?;
            if self.options.diagnostics.recursion {
                self.check_recursion(t, theta_err_sq)?;
            }
        }

        let realized = env
            .model
            .expected_reward_raw(theta_star, &env.reward, x, a)?;
        let increment = env.optimal_actions()[x].1 - realized;
        self.cum_regret += increment;

        if !row_due {
            return Ok(None);
        }
        let record = self.record(t, x, explored, a, y, increment, theta_err_sq)?;
        self.trace.records.push(record.clone());
        Ok(Some(record))
    }

    fn greedy_action(&mut self, x: SegmentId) -> Result<f64> {
        if self.greedy_cache.is_none() {
            let env = self.env;
            let theta = self.erm.theta().as_slice();
            let actions = (0..env.model.space().len())
                .map(|s| {
                    greedy_grid_action(&env.model, &env.reward, theta, s, self.options.greedy_grid)
                })
                .collect::<Result<Vec<_>>>()?;
            self.greedy_cache = Some(actions);
        }
        Ok(self.greedy_cache.as_ref().expect("filled above")[x])
    }

    fn check_recursion(&mut self, t: u64, theta_err_sq: f64) -> Result<()> {
        let env = self.env;
        let c = env.constants();
        let contraction = 1.0 - c.gamma_a * env.eta;
        let noise = 0.5 * env.eta * c.l_theta * c.l_theta * theta_err_sq;
        for x in 0..self.policy.len() {
            let gap = env.optimal_actions()[x].1
                - env.model.expected_reward_raw(
                    env.model.truth().as_slice(),
                    &env.reward,
                    x,
                    self.policy.action(x),
                )?;
            let rhs = contraction * self.prev_gap[x] + noise;
            self.trace.recursion_checks += 1;
            if gap > rhs + RECURSION_TOLERANCE {
                self.trace.recursion_violations += 1;
                self.recursion_ok_since_row = false;
                self.trace
                    .first_recursion_violation
                    .get_or_insert((t, x, gap, rhs));
            }
            self.prev_gap[x] = gap;
        }
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn record(
        &mut self,
        t: u64,
        x: SegmentId,
        explored: bool,
        a: f64,
        y: f64,
        increment: f64,
        theta_err_sq: f64,
    ) -> Result<TraceRecord> {
        let env = self.env;
        let diag = self.options.diagnostics;
        let delta = env.config.diagnostics;
        let v = self.erm.v();
        let rho_min_v = linalg::min_eigenvalue(v);
        let (thm31_bound, thm31_ok) = if diag.confidence {
            let b = confidence_bound(v, env.model.truth(), delta.delta)?;
            (Some(b), Some(theta_err_sq <= b))
        } else {
            (None, None)
        };
        let (thm32_bound, thm32_applicable) = if diag.refined {
            let b = exploration_error_bound(
                t,
                delta.delta_refined,
                env.constants(),
                self.sum_epsilon(t),
                env.dim(),
                env.model.truth().as_vector().norm_squared(),
            )?;
            (b, Some(b.is_some()))
        } else {
            (None, None)
        };
        let lemma44_ok = (self.options.algorithm == Algorithm::Epg && diag.recursion)
            .then_some(self.recursion_ok_since_row);
        self.recursion_ok_since_row = true;
        Ok(TraceRecord {
            t,
            x,
            explored,
            a,
            y,
            regret_increment: increment,
            cum_regret: self.cum_regret,
            theta_err_sq,
            rho_min_v,
            thm31_bound,
            thm31_ok,
            thm32_bound,
            thm32_applicable,
            lemma44_ok,
        })
    }

    fn finish(mut self) -> RunTrace {
        self.trace.final_regret = self.cum_regret;
        self.trace.final_theta = self.erm.theta().clone();
        if self.options.algorithm == Algorithm::Epg {
            self.trace.final_policy = Some(self.policy.clone());
        }
        self.trace
    }
}

/// Runs `options.t_max` steps, passing every emitted row to `sink` as it is produced.
///
/// With full tracing only checkpoint rows are kept in the returned trace.
pub fn run_with_sink(
    env: &Environment,
    options: &RunOptions,
    seed: u64,
    sink: &mut dyn FnMut(&TraceRecord) -> Result<()>,
) -> std::result::Result<RunTrace, RunFailure> {
    let rows = options.row_steps();
    let mut state = match RunState::new(env, options.clone(), seed) {
        Ok(s) => s,
        Err(error) => {
            return Err(RunFailure {
                t: 0,
                error,
                trace: Box::new(empty_trace(env, options, seed)),
            })
        }
    };
    let mut next_row = 0;
    for t in 1..=options.t_max {
        let checkpoint = rows.get(next_row) == Some(&t);
        if checkpoint {
            next_row += 1;
        }
        match state.step(checkpoint || options.full_trace, checkpoint) {
            Ok(Some(record)) => {
                if options.full_trace && !checkpoint {
                    state.trace.records.pop();
                }
                if let Err(error) = sink(&record) {
                    return Err(RunFailure {
                        t,
                        error,
                        trace: Box::new(state.finish()),
                    });
                }
            }
            Ok(None) => {}
            Err(error) => {
                return Err(RunFailure {
                    t,
                    error,
                    trace: Box::new(state.finish()),
                })
            }
        }
    }
    Ok(state.finish())
}

fn empty_trace(env: &Environment, options: &RunOptions, seed: u64) -> RunTrace {
    RunTrace {
        algorithm: options.algorithm,
        seed,
        t_max: options.t_max,
        records: Vec::new(),
        final_regret: 0.0,
        final_policy: None,
        final_theta: ParameterVector::zeros(env.dim()),
        solver: SolverSummary::default(),
        explore_steps: 0,
        recursion_checks: 0,
        recursion_violations: 0,
        first_recursion_violation: None,
    }
}

/// Runs and keeps every emitted row in memory.
pub fn run(
    env: &Environment,
    options: &RunOptions,
    seed: u64,
) -> std::result::Result<RunTrace, RunFailure> {
    let mut rows = Vec::new();
    let mut trace = run_with_sink(env, options, seed, &mut |r| {
        rows.push(r.clone());
        Ok(())
    })?;
    trace.records = rows;
    Ok(trace)
}

/// The greedy baseline: same loop, exploiting with the grid argmax of the current estimate.
pub fn baseline_epsilon_greedy(
    env: &Environment,
    options: &RunOptions,
    seed: u64,
) -> std::result::Result<RunTrace, RunFailure> {
    let options = RunOptions {
        algorithm: Algorithm::EpsGreedy,
        ..options.clone()
    };
    run(env, &options, seed)
}

/// Least-squares fit of `log(mean regret)` against `log T`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SlopeFit {
    pub slope: f64,
    pub intercept: f64,
    pub std_error: f64,
    pub points: usize,
}

/// Ordinary least squares of `ln y` on `ln t`; needs at least two points with `y > 0`.
pub fn log_log_slope(points: &[(u64, f64)]) -> Option<SlopeFit> {
    let pts: Vec<(f64, f64)> = points
        .iter()
        .filter(|(t, y)| *t > 0 && *y > 0.0)
        .map(|&(t, y)| ((t as f64).ln(), y.ln()))
        .collect();
    let n = pts.len();
    if n < 2 {
        return None;
    }
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n as f64;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n as f64;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    if sxx == 0.0 {
        return None;
    }
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let std_error = if n > 2 {
        let sse: f64 = pts
            .iter()
            .map(|p| (p.1 - intercept - slope * p.0).powi(2))
            .sum();
        (sse / (n - 2) as f64 / sxx).sqrt()
    } else {
        0.0
    };
    Some(SlopeFit {
        slope,
        intercept,
        std_error,
        points: n,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CheckpointStats {
    pub t: u64,
    pub n: usize,
    pub mean: f64,
    pub median: f64,
    pub std_dev: f64,
    /// Normal-approximation 95% interval for the mean.
    pub ci_lo: f64,
    pub ci_hi: f64,
}

fn stats(t: u64, mut values: Vec<f64>) -> CheckpointStats {
    let n = values.len();
    let mean = values.iter().sum::<f64>() / n as f64;
    let var = if n > 1 {
        values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64
    } else {
        0.0
    };
    values.sort_by(f64::total_cmp);
    let median = if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    };
    let half = 1.96 * (var / n as f64).sqrt();
    CheckpointStats {
        t,
        n,
        mean,
        median,
        std_dev: var.sqrt(),
        ci_lo: mean - half,
        ci_hi: mean + half,
    }
}

/// Violation counts over replications at one step.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct CoverageCount {
    pub t: u64,
    pub checked: usize,
    pub violations: usize,
    /// Replications where the bound was not applicable.
    pub not_applicable: usize,
}

impl CoverageCount {
    pub fn rate(&self) -> f64 {
        if self.checked == 0 {
            0.0
        } else {
            self.violations as f64 / self.checked as f64
        }
    }
}

#[derive(Debug, Clone)]
pub struct ExperimentResult {
    pub algorithm: Algorithm,
    /// Successful replications, sorted by seed.
    pub traces: Vec<RunTrace>,
    /// Failed replications `(seed, message)`, sorted by seed.
    pub failures: Vec<(u64, String)>,
    pub checkpoints: Vec<CheckpointStats>,
    pub slope: Option<SlopeFit>,
    pub confidence: CoverageCount,
    pub refined: CoverageCount,
    pub recursion_violations: u64,
    pub recursion_checks: u64,
    /// Not part of any deterministic output.
    pub wall_clock: Duration,
}

impl ExperimentResult {
    pub fn final_regrets(&self) -> Vec<(u64, f64)> {
        self.traces
            .iter()
            .map(|t| (t.seed, t.final_regret))
            .collect()
    }

    pub fn mean_at(&self, t: u64) -> Option<f64> {
        self.checkpoints.iter().find(|c| c.t == t).map(|c| c.mean)
    }
}

/// Reduces traces (any order) into an [`ExperimentResult`]; reductions run in seed order.
pub fn reduce(
    algorithm: Algorithm,
    mut traces: Vec<RunTrace>,
    mut failures: Vec<(u64, String)>,
    wall_clock: Duration,
) -> ExperimentResult {
    traces.sort_by_key(|t| t.seed);
    failures.sort_by_key(|f| f.0);
    let steps: Vec<u64> = traces
        .first()
        .map(|t| t.records.iter().map(|r| r.t).collect())
        .unwrap_or_default();
    let checkpoints: Vec<CheckpointStats> = steps
        .iter()
        .map(|&s| {
            let values = traces
                .iter()
                .map(|tr| tr.at(s).map_or(f64::NAN, |r| r.cum_regret))
                .collect();
            stats(s, values)
        })
        .collect();
    let slope = log_log_slope(
        &checkpoints
            .iter()
            .map(|c| (c.t, c.mean))
            .collect::<Vec<_>>(),
    );
    let t_end = steps.last().copied().unwrap_or(0);
    let mut confidence = CoverageCount {
        t: t_end,
        ..Default::default()
    };
    let mut refined = confidence;
    for tr in &traces {
        if let Some(r) = tr.at(t_end) {
            if let Some(ok) = r.thm31_ok {
                confidence.checked += 1;
                confidence.violations += usize::from(!ok);
            }
            match r.thm32_bound {
                Some(_) => {
                    refined.checked += 1;
                    refined.violations += usize::from(r.thm32_violated());
                }
                None if r.thm32_applicable == Some(false) => refined.not_applicable += 1,
                None => {}
            }
        }
    }
    ExperimentResult {
        algorithm,
        recursion_violations: traces.iter().map(|t| t.recursion_violations).sum(),
        recursion_checks: traces.iter().map(|t| t.recursion_checks).sum(),
        traces,
        failures,
        checkpoints,
        slope,
        confidence,
        refined,
        wall_clock,
    }
}

/// Independent runs over `seeds`, at most `jobs` in parallel (0 = all cores).
pub fn run_replications(
    env: &Environment,
    options: &RunOptions,
    seeds: &[u64],
    jobs: usize,
) -> Result<ExperimentResult> {
    if seeds.is_empty() {
        return Err(Error::Config("at least one seed is required".into()));
    }
    options.validate()?;
    let start = Instant::now();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let outcomes: Vec<std::result::Result<RunTrace, (u64, String)>> = pool.install(|| {
        seeds
            .par_iter()
            .map(|&seed| run(env, options, seed).map_err(|f| (seed, f.to_string())))
            .collect()
    });
    let mut traces = Vec::new();
    let mut failures = Vec::new();
    for o in outcomes {
        match o {
            Ok(t) => traces.push(t),
            Err(f) => failures.push(f),
        }
    }
    Ok(reduce(options.algorithm, traces, failures, start.elapsed()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{build_environment, EnvironmentConfig};
    use crate::response::{FeatureMap, GlmSpec, Link};
    use crate::types::{ActionInterval, Segment, SegmentSpace};
    use std::sync::OnceLock;

    fn env() -> &'static Environment {
        static ENV: OnceLock<Environment> = OnceLock::new();
        ENV.get_or_init(|| {
            let mut c = EnvironmentConfig::load("logit-2seg").unwrap();
            c.certify.theta_samples = 50;
            build_environment(&c).unwrap()
        })
    }

    fn options(algorithm: Algorithm, t_max: u64) -> RunOptions {
        RunOptions {
            t_max,
            checkpoints: vec![],
            refit_growth: 0.05,
            ..RunOptions::from_env(env(), algorithm)
        }
    }

    fn single(theta: Vec<f64>) -> (ResponseModel, RewardFunction) {
        let space = SegmentSpace::new(vec![Segment {
            id: "s".into(),
            weight: 1.0,
            cost: 0.2,
        }])
        .unwrap();
        let interval = ActionInterval::new(0.2, 1.2).unwrap();
        let glm = GlmSpec::new(FeatureMap::segment_affine(1), Link::Logistic).unwrap();
        let model = ResponseModel::new(
            glm,
            ParameterVector::new(theta).unwrap(),
            interval,
            space.clone(),
            None,
        )
        .unwrap();
        let reward = RewardFunction::margin(&space, &interval, 1.0, 1.0).unwrap();
        (model, reward)
    }

    #[test]
    fn oracle_monotone_hits_upper_bound() {
        let (model, reward) = single(vec![0.4, 0.0]);
        let (a, v) = oracle_best_action(&model, &reward, model.truth(), 0).unwrap();
        assert_eq!(a, 1.2);
        assert!((v - crate::response::sigmoid(0.4) * 1.0).abs() < 1e-15);
    }

    #[test]
    fn oracle_interior_is_stationary() {
        let (model, reward) = single(vec![2.0, -3.0]);
        let (a, _) = oracle_best_action(&model, &reward, model.truth(), 0).unwrap();
        assert!(a > 0.2 && a < 1.2);
        assert!(
            model
                .grad_a_expected_reward(model.truth(), &reward, 0, a)
                .unwrap()
                .abs()
                <= 1e-6
        );
    }

    #[test]
    fn oracle_invariant_to_reward_scale() {
        let (model, reward) = single(vec![2.0, -3.0]);
        let scaled = RewardFunction::margin(model.space(), model.interval(), 7.5, 1.0).unwrap();
        let a = oracle_best_action(&model, &reward, model.truth(), 0)
            .unwrap()
            .0;
        let b = oracle_best_action(&model, &scaled, model.truth(), 0)
            .unwrap()
            .0;
        assert!((a - b).abs() < 1e-8);
    }

    #[test]
    fn empty_horizon() {
        let trace = run(env(), &options(Algorithm::Epg, 0), 1).unwrap();
        assert!(trace.records.is_empty());
        assert_eq!(trace.final_regret, 0.0);
    }

    #[test]
    fn forced_and_greedy_branches() {
        let mut o = options(Algorithm::Epg, 200);
        o.full_trace = true;
        o.epsilon_override = Some(1.0);
        let trace = run(env(), &o, 3).unwrap();
        assert!(trace.records.iter().all(|r| r.explored));
        assert_eq!(trace.explore_steps, 200);

        o.epsilon_override = Some(0.0);
        o.algorithm = Algorithm::EpsGreedy;
        o.fixed_theta = Some(env().model.truth().clone());
        let trace = run(env(), &o, 3).unwrap();
        for r in &trace.records {
            assert!(!r.explored);
            let (a_star, _) = env().optimal_actions()[r.x];
            assert!((r.a - a_star).abs() <= 1e-2 + 1e-12);
        }
    }

    #[test]
    fn fixed_policy_exploits_deterministically() {
        let mut o = options(Algorithm::Epg, 50);
        o.full_trace = true;
        o.epsilon_override = Some(0.0);
        o.fixed_theta = Some(env().model.truth().clone());
        let mut state = RunState::new(env(), o, 8).unwrap();
        for _ in 0..50 {
            let before = state.policy().clone();
            let r = state.step(true, false).unwrap().unwrap();
            assert_eq!(r.a, before.action(r.x));
        }
    }

    #[test]
    fn same_seed_same_trace() {
        let mut o = options(Algorithm::Epg, 300);
        o.full_trace = true;
        let a = run(env(), &o, 17).unwrap();
        let b = run(env(), &o, 17).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn coupled_exploration_across_algorithms() {
        let mut o = options(Algorithm::Epg, 400);
        o.full_trace = true;
        let epg = run(env(), &o, 5).unwrap();
        let greedy = baseline_epsilon_greedy(env(), &o, 5).unwrap();
        for (p, q) in epg.records.iter().zip(&greedy.records) {
            assert_eq!(p.x, q.x);
            assert_eq!(p.explored, q.explored);
            if p.explored {
                assert_eq!(p.a, q.a);
            }
        }
    }

    #[test]
    fn regret_increments_non_negative() {
        let mut o = options(Algorithm::Epg, 500);
        o.full_trace = true;
        let trace = run(env(), &o, 2).unwrap();
        let mut prev = 0.0;
        for r in &trace.records {
            assert!(r.regret_increment >= -1e-12);
            assert!(r.cum_regret >= prev - 1e-12);
            prev = r.cum_regret;
        }
    }

    #[test]
    fn oracle_algorithm_has_negligible_regret() {
        let trace = run(env(), &options(Algorithm::Oracle, 2000), 4).unwrap();
        assert!(trace.final_regret.abs() <= 1e-6 * 2000.0);
    }

    #[test]
    fn exact_model_exploitation_has_bounded_regret() {
        let e = env();
        let c = e.constants();
        let sup = e.reward.sup_bound();
        let bound = 2.0 * sup / (c.gamma_a * e.eta);
        for t_max in [1000, 4000] {
            let mut o = options(Algorithm::Epg, t_max);
            o.epsilon_override = Some(0.0);
            o.fixed_theta = Some(e.model.truth().clone());
            let trace = run(e, &o, 11).unwrap();
            assert!(
                trace.final_regret <= bound,
                "{} > {bound}",
                trace.final_regret
            );
            assert_eq!(trace.recursion_violations, 0);
        }
    }

    #[test]
    fn refined_bound_properties() {
        let c = *env().constants();
        let d = env().dim();
        let theta_sq = env().model.truth().as_vector().norm_squared();
        if let (Some(a), Some(b)) = (
            exploration_error_bound(1, 0.01, &c, 1.0, d, theta_sq).unwrap(),
            exploration_error_bound(1, 0.1, &c, 1.0, d, theta_sq).unwrap(),
        ) {
            assert!(a > b);
        }
        // Large C_H drives M negative: not applicable rather than a violation.
        let hard = ModelConstants { c_h: 10.0, ..c };
        assert_eq!(
            exploration_error_bound(100, 0.01, &hard, 100.0, d, theta_sq).unwrap(),
            None
        );
    }

    #[test]
    fn slope_fit_recovers_power_law() {
        let pts: Vec<(u64, f64)> = [5_000u64, 10_000, 20_000, 50_000]
            .iter()
            .map(|&t| (t, 3.0 * (t as f64).powf(0.5)))
            .collect();
        let fit = log_log_slope(&pts).unwrap();
        assert!((fit.slope - 0.5).abs() < 1e-12 && fit.std_error < 1e-10);
        assert!(log_log_slope(&pts[..1]).is_none());
    }

    #[test]
    fn replications_order_independent_and_singleton() {
        let o = RunOptions {
            checkpoints: vec![100, 200],
            ..options(Algorithm::Epg, 300)
        };
        let a = run_replications(env(), &o, &[3, 1, 2], 1).unwrap();
        let b = run_replications(env(), &o, &[2, 3, 1], 1).unwrap();
        assert_eq!(a.checkpoints, b.checkpoints);
        assert_eq!(a.final_regrets(), b.final_regrets());
        assert_eq!(a.final_regrets().len(), 3);

        let one = run_replications(env(), &o, &[2], 1).unwrap();
        let trace = run(env(), &o, 2).unwrap();
        assert_eq!(one.checkpoints.last().unwrap().mean, trace.final_regret);
        assert_eq!(one.checkpoints.last().unwrap().median, trace.final_regret);
        assert!(run_replications(env(), &o, &[], 1).is_err());
    }

    #[test]
    fn checkpoint_beyond_horizon_rejected() {
        let o = RunOptions {
            checkpoints: vec![100],
            ..options(Algorithm::Epg, 50)
        };
        let err = run(env(), &o, 1).unwrap_err().to_string();
        assert!(err.contains("beyond horizon"), "{err}");
    }
}
