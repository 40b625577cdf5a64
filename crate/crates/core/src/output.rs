//! CSV traces, checkpoint tables and flat key-value summaries.

use std::fmt::Display;
use std::io::{self, BufRead, Write};

use crate::engine::{ExperimentResult, RunTrace, TraceRecord};
use crate::env::Environment;
use crate::types::SegmentSpace;

pub const TRACE_COLUMNS: [&str; 14] = [
    "t",
    "x",
    "explored",
    "a",
    "y",
    "regret_increment",
    "cum_regret",
    "theta_err_sq",
    "rho_min_V",
    "thm31_bound",
    "thm31_ok",
    "thm32_bound",
    "thm32_applicable",
    "lemma44_ok",
];

pub const CHECKPOINT_COLUMNS: [&str; 7] = ["t", "n", "mean", "median", "std_dev", "ci_lo", "ci_hi"];

fn opt<T: Display>(v: Option<T>) -> String {
    v.map_or_else(|| "NA".to_string(), |v| v.to_string())
}

fn flag(v: bool) -> u8 {
    u8::from(v)
}

pub fn trace_header() -> String {
    TRACE_COLUMNS.join(",")
}

/// One CSV line (without newline). Floats use the shortest round-trip representation.
pub fn trace_line(r: &TraceRecord, space: &SegmentSpace) -> String {
    format!(
        "{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
        r.t,
        space.id(r.x),
        flag(r.explored),
        r.a,
        r.y,
        r.regret_increment,
        r.cum_regret,
        r.theta_err_sq,
        r.rho_min_v,
        opt(r.thm31_bound),
        opt(r.thm31_ok.map(flag)),
        opt(r.thm32_bound),
        opt(r.thm32_applicable.map(flag)),
        opt(r.lemma44_ok.map(flag)),
    )
}

/// Streams trace rows as CSV.
pub struct TraceWriter<'a, W: Write> {
    out: W,
    space: &'a SegmentSpace,
}

impl<'a, W: Write> TraceWriter<'a, W> {
    pub fn new(mut out: W, space: &'a SegmentSpace) -> io::Result<Self> {
        writeln!(out, "{}", trace_header())?;
        Ok(Self { out, space })
    }

    pub fn write(&mut self, r: &TraceRecord) -> io::Result<()> {
        writeln!(self.out, "{}", trace_line(r, self.space))
    }

    pub fn finish(mut self) -> io::Result<W> {
        self.out.flush()?;
        Ok(self.out)
    }
}

pub fn write_trace<W: Write>(out: W, trace: &RunTrace, space: &SegmentSpace) -> io::Result<()> {
    let mut w = TraceWriter::new(out, space)?;
    for r in &trace.records {
        w.write(r)?;
    }
    w.finish().map(|_| ())
}

pub fn write_checkpoints<W: Write>(mut out: W, result: &ExperimentResult) -> io::Result<()> {
    writeln!(out, "{}", CHECKPOINT_COLUMNS.join(","))?;
    for c in &result.checkpoints {
        writeln!(
            out,
            "{},{},{},{},{},{},{}",
            c.t, c.n, c.mean, c.median, c.std_dev, c.ci_lo, c.ci_hi
        )?;
    }
    out.flush()
}

/// Ordered `key = value` lines.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Summary {
    entries: Vec<(String, String)>,
}

impl Summary {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, key: impl Into<String>, value: impl Display) -> &mut Self {
        self.entries.push((key.into(), value.to_string()));
        self
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn write<W: Write>(&self, mut out: W) -> io::Result<()> {
        for (k, v) in &self.entries {
            writeln!(out, "{k} = {v}")?;
        }
        out.flush()
    }

    pub fn render(&self) -> String {
        let mut buf = Vec::new();
        self.write(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("utf-8")
    }

    /// Parses text produced by [`Summary::write`].
    pub fn parse(text: &str) -> Self {
        let entries = text
            .lines()
            .filter_map(|l| l.split_once(" = "))
            .map(|(k, v)| (k.to_string(), v.to_string()))
            .collect();
        Self { entries }
    }
}

fn environment_entries(s: &mut Summary, env: &Environment) {
    let c = env.constants();
    s.add("environment", env.name())
        .add("d", env.dim())
        .add("eta", env.eta)
        .add("schedule.c", env.schedule.c())
        .add("schedule.burn_in", env.schedule.burn_in())
        .add("const.c1", c.c1)
        .add("const.c2", c.c2)
        .add("const.rho_H", c.rho_h)
        .add("const.C_H", c.c_h)
        .add("const.L_a", c.l_a)
        .add("const.gamma_a", c.gamma_a)
        .add("const.L_theta", c.l_theta);
}

pub fn run_summary(env: &Environment, trace: &RunTrace) -> Summary {
    let mut s = Summary::new();
    environment_entries(&mut s, env);
    s.add("algorithm", trace.algorithm)
        .add("seed", trace.seed)
        .add("t_max", trace.t_max)
        .add("final_regret", trace.final_regret)
        .add("explore_steps", trace.explore_steps)
        .add("final_theta", format!("{:?}", trace.final_theta.as_slice()))
        .add(
            "theta_err_sq",
            trace.final_theta.distance_sq(env.model.truth()),
        );
    if let Some(p) = &trace.final_policy {
        s.add("final_policy", format!("{:?}", p.actions()));
    }
    for r in &trace.records {
        s.add(format!("regret@{}", r.t), r.cum_regret);
    }
    if let Some(last) = trace.records.last() {
        s.add("thm31_ok", opt(last.thm31_ok.map(flag)))
            .add("thm32_applicable", opt(last.thm32_applicable.map(flag)))
            .add("thm32_violated", flag(last.thm32_violated()));
    }
    s.add("recursion_checks", trace.recursion_checks)
        .add("recursion_violations", trace.recursion_violations)
        .add("solver.fits", trace.solver.fits)
        .add("solver.total_iterations", trace.solver.total_iterations)
        .add("solver.max_iterations", trace.solver.max_iterations)
        .add("solver.gradient_steps", trace.solver.gradient_steps);
    s
}

/// Deterministic fields only; wall-clock time is reported separately by the caller.
pub fn replicate_summary(env: &Environment, result: &ExperimentResult) -> Summary {
    let mut s = Summary::new();
    environment_entries(&mut s, env);
    s.add("algorithm", result.algorithm)
        .add("n", result.traces.len())
        .add("failures", result.failures.len());
    for (seed, msg) in &result.failures {
        s.add(format!("failure.seed{seed}"), msg);
    }
    for (seed, r) in result.final_regrets() {
        s.add(format!("final_regret.seed{seed}"), r);
    }
    for c in &result.checkpoints {
        s.add(format!("mean_regret@{}", c.t), c.mean);
    }
    match result.slope {
        Some(f) => {
            s.add("slope", f.slope)
                .add("slope_std_error", f.std_error)
                .add("slope_points", f.points);
        }
        None => {
            s.add("slope", "NA");
        }
    }
    s.add("confidence.t", result.confidence.t)
        .add("confidence.violation_rate", result.confidence.rate())
        .add("refined.checked", result.refined.checked)
        .add("refined.not_applicable", result.refined.not_applicable)
        .add("refined.violation_rate", result.refined.rate())
        .add("recursion_violations", result.recursion_violations)
        .add("recursion_checks", result.recursion_checks);
    s
}

/// First difference between two line-oriented inputs: `(line number, left, right)`.
pub fn first_difference<A: BufRead, B: BufRead>(
    a: A,
    b: B,
) -> io::Result<Option<(usize, String, String)>> {
    let mut left = a.lines();
    let mut right = b.lines();
    let mut n = 0;
    loop {
        n += 1;
        match (left.next().transpose()?, right.next().transpose()?) {
            (None, None) => return Ok(None),
            (l, r) if l != r => {
                return Ok(Some((
                    n,
                    l.unwrap_or_else(|| "<eof>".into()),
                    r.unwrap_or_else(|| "<eof>".into()),
                )))
            }
            _ => {}
        }
    }
}
