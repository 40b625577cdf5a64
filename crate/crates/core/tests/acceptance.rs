//! Acceptance suite entry point. Prints one line per criterion and exits nonzero on any failure.
//!
//! `EPG_ACCEPTANCE=smoke` selects the reduced scale; `EPG_JOBS` sets the worker count.

use std::process::ExitCode;

use epg_core::acceptance::{run_acceptance, Scale};

fn main() -> ExitCode {
    let scale = match std::env::var("EPG_ACCEPTANCE").as_deref() {
        Ok("smoke") => Scale::Smoke,
        _ => Scale::Full,
    };
    let jobs = std::env::var("EPG_JOBS")
        .ok()
        .and_then(|j| j.parse().ok())
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    println!("acceptance suite ({scale:?} scale, {jobs} jobs)");
    let outcomes = run_acceptance(scale, jobs, &mut |o| println!("{o}"));
    let failed = outcomes.iter().filter(|o| !o.passed).count();
    println!("{} passed, {failed} failed", outcomes.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
