//! The acceptance suite: eleven end-to-end checks on the shipped environments.
//!
//! Each criterion runs independently; a failure (or panic) in one does not stop the others.

use std::fmt;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use nalgebra::DVector;

use crate::engine::{run, run_replications, Algorithm, ExperimentResult, RunOptions};
use crate::env::{build_environment, Environment, EnvironmentConfig, SHIPPED};
use crate::erm::{ErmState, SolverOptions};
use crate::error::{Error, Result};
use crate::linalg;
use crate::loss::{check_subgaussian_compatibility, GlmLoss, LossSpec};
use crate::output::{write_checkpoints, write_trace};
use crate::policy::{last_positive_m, EpsilonSchedule};
use crate::random::RandomStream;
use crate::response::{FeatureMap, GlmSpec, Link, ResponseModel};
use crate::types::{ActionInterval, Observation, ParameterVector, Segment, SegmentSpace};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scale {
    /// Documented scales and tolerances.
    Full,
    /// Reduced horizons and replication counts with widened tolerances.
    Smoke,
}

impl Scale {
    fn pick<T>(self, full: T, smoke: T) -> T {
        match self {
            Scale::Full => full,
            Scale::Smoke => smoke,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CriterionOutcome {
    pub id: usize,
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub elapsed: Duration,
}

impl fmt::Display for CriterionOutcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "[{}] {:>2}. {}: {} ({:.1}s)",
            if self.passed { "PASS" } else { "FAIL" },
            self.id,
            self.name,
            self.detail,
            self.elapsed.as_secs_f64()
        )
    }
}

pub const CRITERIA: [&str; 11] = [
    "regret rate",
    "linear-regret control",
    "confidence-bound coverage",
    "exploration-aware bound coverage",
    "hessian dominance",
    "sub-gaussian compatibility",
    "erm oracle equivalence",
    "gradient fidelity",
    "descent recursion",
    "determinism",
    "schedule sandwich",
];

struct Context {
    scale: Scale,
    jobs: usize,
    logit: Option<Environment>,
    gauss: Option<Environment>,
    epg: Option<ExperimentResult>,
    pure: Option<ExperimentResult>,
}

impl Context {
    fn logit(&mut self) -> Result<&Environment> {
        if self.logit.is_none() {
            self.logit = Some(build_environment(&EnvironmentConfig::load("logit-2seg")?)?);
        }
        Ok(self.logit.as_ref().expect("set above"))
    }

    fn gauss(&mut self) -> Result<&Environment> {
        if self.gauss.is_none() {
            self.gauss = Some(build_environment(&EnvironmentConfig::load("gauss-1seg")?)?);
        }
        Ok(self.gauss.as_ref().expect("set above"))
    }

    fn regret_options(&mut self, algorithm: Algorithm) -> Result<(RunOptions, Vec<u64>)> {
        let scale = self.scale;
        let env = self.logit()?;
        let mut o = RunOptions::from_env(env, algorithm);
        o.t_max = scale.pick(50_000, 5_000);
        o.checkpoints = scale.pick(
            vec![5_000, 10_000, 20_000, 50_000],
            vec![500, 1_000, 2_000, 5_000],
        );
        let seeds = (1..=scale.pick(20, 5)).collect();
        Ok((o, seeds))
    }

    fn epg(&mut self) -> Result<&ExperimentResult> {
        if self.epg.is_none() {
            let (o, seeds) = self.regret_options(Algorithm::Epg)?;
            let jobs = self.jobs;
            self.epg = Some(run_replications(self.logit()?, &o, &seeds, jobs)?);
        }
        Ok(self.epg.as_ref().expect("set above"))
    }

    fn pure(&mut self) -> Result<&ExperimentResult> {
        if self.pure.is_none() {
            let (o, seeds) = self.regret_options(Algorithm::PureExplore)?;
            let jobs = self.jobs;
            self.pure = Some(run_replications(self.logit()?, &o, &seeds, jobs)?);
        }
        Ok(self.pure.as_ref().expect("set above"))
    }
}

fn no_failures(r: &ExperimentResult) -> Result<()> {
    match r.failures.first() {
        None => Ok(()),
        Some((seed, msg)) => Err(Error::Config(format!(
            "{} of {} replications failed; seed {seed}: {msg}",
            r.failures.len(),
            r.failures.len() + r.traces.len()
        ))),
    }
}

type Check = fn(&mut Context) -> Result<(bool, String)>;

/// Runs all criteria, calling `report` after each one.
pub fn run_acceptance(
    scale: Scale,
    jobs: usize,
    report: &mut dyn FnMut(&CriterionOutcome),
) -> Vec<CriterionOutcome> {
    let checks: [Check; 11] = [
        regret_rate,
        linear_control,
        confidence_coverage,
        refined_coverage,
        hessian_dominance,
        subgaussian_compatibility,
        erm_oracle,
        gradient_fidelity,
        descent_recursion,
        determinism,
        schedule_sandwich,
    ];
    let mut ctx = Context {
        scale,
        jobs,
        logit: None,
        gauss: None,
        epg: None,
        pure: None,
    };
    let mut outcomes = Vec::new();
    for (i, check) in checks.iter().enumerate() {
        let start = Instant::now();
        let (passed, detail) = match catch_unwind(AssertUnwindSafe(|| check(&mut ctx))) {
            Ok(Ok(r)) => r,
            Ok(Err(e)) => (false, format!("error: {e}")),
            Err(p) => {
                let msg = p
                    .downcast_ref::<String>()
                    .cloned()
                    .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_default();
                (false, format!("panicked: {msg}"))
            }
        };
        let outcome = CriterionOutcome {
            id: i + 1,
            name: CRITERIA[i],
            passed,
            detail,
            elapsed: start.elapsed(),
        };
        report(&outcome);
        outcomes.push(outcome);
    }
    outcomes
}

fn regret_rate(ctx: &mut Context) -> Result<(bool, String)> {
    let (lo, hi) = ctx.scale.pick((0.35, 0.65), (0.25, 0.75));
    let r = ctx.epg()?;
    no_failures(r)?;
    let fit = r
        .slope
        .ok_or_else(|| Error::Config("no positive regret to fit".into()))?;
    Ok((
        fit.slope >= lo && fit.slope <= hi,
        format!(
            "epg slope {:.4} +/- {:.4} over T = {:?} ({} seeds), band [{lo}, {hi}]",
            fit.slope,
            fit.std_error,
            r.checkpoints.iter().map(|c| c.t).collect::<Vec<_>>(),
            r.traces.len()
        ),
    ))
}

fn linear_control(ctx: &mut Context) -> Result<(bool, String)> {
    let (lo, hi) = ctx.scale.pick((0.9, 1.1), (0.85, 1.15));
    let pure = ctx.pure()?.clone();
    no_failures(&pure)?;
    let epg = ctx.epg()?;
    no_failures(epg)?;
    let fit = pure
        .slope
        .ok_or_else(|| Error::Config("no positive regret to fit".into()))?;
    let t_end = pure.checkpoints.last().map(|c| c.t).unwrap_or(0);
    let ratio = epg.mean_at(t_end).unwrap_or(f64::NAN) / pure.mean_at(t_end).unwrap_or(f64::NAN);
    Ok((
        fit.slope >= lo && fit.slope <= hi && ratio <= 0.5,
        format!(
            "pure-exploration slope {:.4} (band [{lo}, {hi}]); epg/pure mean regret at T = {t_end}: {ratio:.4} (<= 0.5)",
            fit.slope
        ),
    ))
}

fn binomial_threshold(p: f64, n: usize) -> f64 {
    p + 3.0 * (p * (1.0 - p) / n as f64).sqrt()
}

fn confidence_coverage(ctx: &mut Context) -> Result<(bool, String)> {
    let (reps, t_max) = ctx.scale.pick((200, 2000), (40, 500));
    let jobs = ctx.jobs;
    let env = ctx.logit()?;
    let delta = env.config.diagnostics.delta;
    let mut o = RunOptions::from_env(env, Algorithm::PureExplore);
    o.t_max = t_max;
    o.checkpoints = vec![];
    o.diagnostics.refined = false;
    o.diagnostics.recursion = false;
    let seeds: Vec<u64> = (1..=reps).collect();
    let r = run_replications(env, &o, &seeds, jobs)?;
    no_failures(&r)?;
    let threshold = binomial_threshold(delta, r.confidence.checked);
    Ok((
        r.confidence.checked == reps as usize && r.confidence.rate() <= threshold,
        format!(
            "violation frequency {:.4} ({} of {}) at T = {t_max}, delta = {delta}, threshold {threshold:.4}",
            r.confidence.rate(),
            r.confidence.violations,
            r.confidence.checked
        ),
    ))
}

fn refined_coverage(ctx: &mut Context) -> Result<(bool, String)> {
    const HORIZON: u64 = 10_000;
    let reps = ctx.scale.pick(200, 40);
    let jobs = ctx.jobs;
    let env = ctx.logit()?;
    let delta = env.config.diagnostics.delta_refined;
    let Some(t_star) = last_positive_m(&env.schedule, env.constants(), delta, HORIZON)? else {
        return Ok((
            false,
            format!("exploration margin M is not positive for any T <= {HORIZON}"),
        ));
    };
    let mut o = RunOptions::from_env(env, Algorithm::Epg);
    o.t_max = t_star;
    o.checkpoints = vec![];
    o.diagnostics.confidence = false;
    let seeds: Vec<u64> = (1..=reps).collect();
    let r = run_replications(env, &o, &seeds, jobs)?;
    no_failures(&r)?;
    let p = std::f64::consts::PI.powi(2) / 3.0 * delta;
    let threshold = binomial_threshold(p, r.refined.checked.max(1));
    Ok((
        r.refined.checked == reps as usize && r.refined.rate() <= threshold,
        format!(
            "at T = {t_star} (largest T <= {HORIZON} with M > 0): violation frequency {:.4} ({} of {}), threshold {threshold:.4}",
            r.refined.rate(),
            r.refined.violations,
            r.refined.checked
        ),
    ))
}

fn random_point(env: &Environment, rng: &mut RandomStream) -> (usize, f64) {
    let iv = env.model.interval();
    let x = (rng.uniform() * env.model.space().len() as f64) as usize;
    (
        x.min(env.model.space().len() - 1),
        iv.lo() + rng.uniform() * iv.width(),
    )
}

fn random_response(loss: &LossSpec, rng: &mut RandomStream) -> f64 {
    match loss {
        LossSpec::Glm(_) => f64::from(u8::from(rng.uniform() < 0.5)),
        LossSpec::LeastSquares(l) => l.spec.y_lo + rng.uniform() * (l.spec.y_hi - l.spec.y_lo),
    }
}

fn random_theta(d: usize, scale: f64, rng: &mut RandomStream) -> ParameterVector {
    ParameterVector::new(
        (0..d)
            .map(|_| scale * (2.0 * rng.uniform() - 1.0))
            .collect(),
    )
    .expect("finite")
}

fn hessian_dominance(ctx: &mut Context) -> Result<(bool, String)> {
    let n = ctx.scale.pick(10_000, 1_000);
    let mut worst = Vec::new();
    for env in [ctx.logit()?.clone(), ctx.gauss()?.clone()] {
        let mut rng = RandomStream::from_seed(501);
        let mut min_eig = f64::INFINITY;
        for _ in 0..n {
            let theta = random_theta(env.dim(), 6.0, &mut rng);
            let (x, a) = random_point(&env, &mut rng);
            let y = random_response(&env.loss, &mut rng);
            let (_, _, hess) = env.loss.evaluate(&theta, x, a, y)?;
            min_eig = min_eig.min(linalg::min_eigenvalue(&(hess - env.loss.info_matrix(x, a))));
        }
        worst.push((env.name().to_string(), min_eig));
    }
    Ok((
        worst.iter().all(|(_, e)| *e >= -1e-9),
        format!(
            "{n} samples per loss family; min eigenvalue of hess - H: {}",
            worst
                .iter()
                .map(|(n, e)| format!("{n} {e:.3e}"))
                .collect::<Vec<_>>()
                .join(", ")
        ),
    ))
}

fn subgaussian_compatibility(ctx: &mut Context) -> Result<(bool, String)> {
    let n = ctx.scale.pick(10_000, 1_000);
    let env = ctx.logit()?;
    let mut rng = RandomStream::from_seed(601);
    let mut failures = 0;
    let mut worst: f64 = 0.0;
    for _ in 0..n {
        let (x, a) = random_point(env, &mut rng);
        let mut lambda = DVector::from_fn(env.dim(), |_, _| rng.standard_normal());
        let norm = lambda.norm();
        lambda *= 10.0 * rng.uniform() / norm;
        let c = check_subgaussian_compatibility(&env.model, &env.loss, x, a, &lambda)?;
        if !c.ok {
            failures += 1;
        }
        worst = worst.max(c.lhs / c.rhs);
    }
    Ok((
        failures == 0,
        format!("{n} samples with |lambda| <= 10: {failures} failures, max lhs/rhs {worst:.6}"),
    ))
}

/// Brute-force minimizer: `1e-2` grid over `[-3, 3]^2`, then repeated 21 x 21 zooms.
fn grid_minimizer(objective: impl Fn(f64, f64) -> f64) -> (f64, f64) {
    let mut best = (0.0, 0.0, f64::INFINITY);
    for i in 0..=600 {
        for j in 0..=600 {
            let (u, v) = (-3.0 + i as f64 * 0.01, -3.0 + j as f64 * 0.01);
            let f = objective(u, v);
            if f < best.2 {
                best = (u, v, f);
            }
        }
    }
    let mut h = 0.01;
    while h > 1e-9 {
        let (cu, cv) = (best.0, best.1);
        for i in -10..=10 {
            for j in -10..=10 {
                let (u, v) = (cu + i as f64 * h / 10.0, cv + j as f64 * h / 10.0);
                let f = objective(u, v);
                if f < best.2 {
                    best = (u, v, f);
                }
            }
        }
        h /= 10.0;
    }
    (best.0, best.1)
}

fn erm_oracle(ctx: &mut Context) -> Result<(bool, String)> {
    let datasets = ctx.scale.pick(20, 5);
    let space = SegmentSpace::new(vec![Segment {
        id: "mini".into(),
        weight: 1.0,
        cost: 0.3,
    }])?;
    let interval = ActionInterval::new(0.2, 1.2)?;
    let glm = GlmSpec::new(FeatureMap::segment_affine(1), Link::Logistic)?;
    let model = ResponseModel::new(
        glm,
        ParameterVector::new(vec![1.0, -2.0])?,
        interval,
        space,
        None,
    )?;
    let loss = LossSpec::Glm(GlmLoss::new(glm, 3.0)?);
    let mut worst: f64 = 0.0;
    let mut on_box_edge = false;
    for k in 0..datasets {
        let mut rng = RandomStream::from_seed(700 + k);
        let mut state = ErmState::new(2);
        let mut data = Vec::new();
        for t in 0..50 {
            let a = interval.lo() + rng.uniform() * interval.width();
            let y = model.sample_response(0, a, &mut rng)?;
            data.push((a, y));
            state.ingest(
                Observation {
                    t: t + 1,
                    x: 0,
                    a,
                    y,
                    explored: true,
                },
                &loss,
            )?;
        }
        let (newton, _) =
            state.fit_from(&loss, &ParameterVector::zeros(2), SolverOptions::default())?;
        // Scalar objective through the index w = u + v a; no derivatives involved.
        let (u, v) = grid_minimizer(|u, v| {
            data.iter()
                .map(|&(a, y)| loss.index_terms(u + v * a, y).0)
                .sum::<f64>()
                + 0.5 * (u * u + v * v)
        });
        on_box_edge |= u.abs() >= 3.0 - 1e-6 || v.abs() >= 3.0 - 1e-6;
        worst = worst
            .max(((newton.as_slice()[0] - u).powi(2) + (newton.as_slice()[1] - v).powi(2)).sqrt());
    }
    Ok((
        worst <= 1e-4 && !on_box_edge,
        format!("{datasets} datasets of 50 observations: max |theta_newton - theta_grid| = {worst:.3e} (<= 1e-4)"),
    ))
}

fn gradient_fidelity(ctx: &mut Context) -> Result<(bool, String)> {
    const N: usize = 1000;
    const H: f64 = 1e-5;
    const TOL: f64 = 1e-6;
    // Relative error with a floor so that near-zero gradients are compared absolutely.
    let rel = |g: f64, fd: f64| (g - fd).abs() / g.abs().max(1e-2);
    let mut lines = Vec::new();
    let mut ok = true;
    for env in [ctx.logit()?.clone(), ctx.gauss()?.clone()] {
        let mut rng = RandomStream::from_seed(801);
        let iv = *env.model.interval();
        let mut worst_a: f64 = 0.0;
        let mut worst_theta: f64 = 0.0;
        for _ in 0..N {
            let (x, _) = random_point(&env, &mut rng);
            let a = iv.lo() + H + rng.uniform() * (iv.width() - 2.0 * H);
            let theta = env.model.truth();
            let g = env.model.grad_a_expected_reward(theta, &env.reward, x, a)?;
            let fd = (env.model.expected_reward(theta, &env.reward, x, a + H)?
                - env.model.expected_reward(theta, &env.reward, x, a - H)?)
                / (2.0 * H);
            worst_a = worst_a.max(rel(g, fd));

            let theta = random_theta(env.dim(), 3.0, &mut rng);
            let y = random_response(&env.loss, &mut rng);
            let (_, grad, _) = env.loss.evaluate(&theta, x, a, y)?;
            let mut fd = DVector::zeros(env.dim());
            for j in 0..env.dim() {
                let mut up = theta.as_slice().to_vec();
                let mut down = up.clone();
                up[j] += H;
                down[j] -= H;
                fd[j] = (env.loss.evaluate(&ParameterVector::new(up)?, x, a, y)?.0
                    - env.loss.evaluate(&ParameterVector::new(down)?, x, a, y)?.0)
                    / (2.0 * H);
            }
            worst_theta = worst_theta.max((&grad - &fd).norm() / grad.norm().max(1e-2));
        }
        ok &= worst_a <= TOL && worst_theta <= TOL;
        lines.push(format!(
            "{}: action gradient {worst_a:.2e}, loss gradient {worst_theta:.2e}",
            env.name()
        ));
    }
    Ok((
        ok,
        format!(
            "{N} points each, max relative error (<= {TOL:e}); {}",
            lines.join("; ")
        ),
    ))
}

fn descent_recursion(ctx: &mut Context) -> Result<(bool, String)> {
    let r = ctx.epg()?;
    no_failures(r)?;
    let first = r
        .traces
        .iter()
        .find_map(|t| t.first_recursion_violation.map(|v| (t.seed, v)));
    let detail = match first {
        None => format!(
            "{} runs, {} per-step per-segment checks, no violations",
            r.traces.len(),
            r.recursion_checks
        ),
        Some((seed, (t, x, lhs, rhs))) => format!(
            "{} violations in {} checks; first: seed {seed}, t = {t}, segment {x}, {lhs:.6e} > {rhs:.6e}",
            r.recursion_violations, r.recursion_checks
        ),
    };
    Ok((
        r.recursion_violations == 0 && r.recursion_checks > 0,
        detail,
    ))
}

fn determinism(ctx: &mut Context) -> Result<(bool, String)> {
    let jobs = ctx.jobs;
    let env = ctx.logit()?;
    let mut o = RunOptions::from_env(env, Algorithm::Epg);
    o.t_max = 3000;
    o.checkpoints = vec![1000, 2000];
    o.full_trace = true;
    let mut csv = Vec::new();
    for _ in 0..2 {
        let trace = run(env, &o, 42).map_err(|f| f.error)?;
        let mut buf = Vec::new();
        write_trace(&mut buf, &trace, env.model.space())?;
        csv.push(buf);
    }
    o.full_trace = false;
    let mut tables = Vec::new();
    for seeds in [[3u64, 1, 2], [2, 3, 1]] {
        let r = run_replications(env, &o, &seeds, jobs)?;
        let mut buf = Vec::new();
        write_checkpoints(&mut buf, &r)?;
        tables.push(buf);
    }
    let traces_equal = csv[0] == csv[1];
    let tables_equal = tables[0] == tables[1];
    Ok((
        traces_equal && tables_equal,
        format!(
            "repeated full trace ({} bytes) identical: {traces_equal}; permuted-seed checkpoint table identical: {tables_equal}",
            csv[0].len()
        ),
    ))
}

fn schedule_sandwich(_ctx: &mut Context) -> Result<(bool, String)> {
    const HORIZON: u64 = 100_000;
    let mut parts = Vec::new();
    let mut ok = true;
    for (name, _) in SHIPPED {
        let config = EnvironmentConfig::load(name)?;
        let s = config.schedule;
        let d = 2 * config.segments.len();
        let burn_in = s.burn_in.ok_or_else(|| {
            Error::Config(format!(
                "{name}: shipped environments set burn_in explicitly"
            ))
        })?;
        let schedule = EpsilonSchedule::new(s.c, s.c_lo, s.c_hi, d, burn_in, HORIZON)?;
        // Independent rescan of the partial sums.
        let mut sum = 0.0;
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for t in 1..=HORIZON {
            sum += schedule.epsilon_at(t);
            if t > burn_in {
                let r = sum / ((t as f64).sqrt() * (d as f64 * t as f64).ln());
                lo = lo.min(r);
                hi = hi.max(r);
            }
        }
        ok &= lo >= s.c_lo && hi <= s.c_hi;
        parts.push(format!(
            "{name}: ratio in [{lo:.4}, {hi:.4}] within [{}, {}] over T in [{}, {HORIZON}]",
            s.c_lo,
            s.c_hi,
            burn_in + 1
        ));
    }
    Ok((ok, parts.join("; ")))
}
