//! Runtime verification suites: oracle comparisons, identities, structural
//! invariants and finite-difference gradient checks for every block.
//!
//! Each suite returns a report of named checks with the measured error and
//! its tolerance. [`CHECKLIST`] maps every module invariant to the check that
//! covers it; [`coverage`] confirms that each listed check ran and passed.

use std::fmt;
use std::time::{Duration, Instant};

use crate::error::{Error, Result};
use crate::gradcheck::{self, Objective, GRAD_TOL};
use crate::params::ParamStore;

mod checklist;
mod objectives;
pub mod oracles;
mod prims;
mod suites;

pub use checklist::{coverage, ChecklistItem, Coverage, CHECKLIST};
pub use prims::{Prim, PrimObjective};

/// Sampled coordinates per gradient check.
pub const GRAD_COORDS: usize = 40;
/// Minimum sampled coordinates for a composite block.
pub const MIN_BLOCK_COORDS: usize = 30;

pub const SUITES: [&str; 9] = [
    "tensor",
    "attention",
    "ssm",
    "wavelet",
    "hdmamba",
    "pipeline",
    "losses",
    "data",
    "cli",
];

#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub name: String,
    pub measured: f64,
    pub tolerance: f64,
    pub passed: bool,
    pub detail: String,
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let tag = if self.passed { "PASS" } else { "FAIL" };
        write!(
            f,
            "{tag} {:<44} measured {:<11.3e} tol {:<9.1e}",
            self.name, self.measured, self.tolerance
        )?;
        if !self.detail.is_empty() {
            write!(f, " {}", self.detail)?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct SuiteReport {
    pub suite: String,
    pub checks: Vec<Check>,
    pub elapsed: Duration,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &Check> {
        self.checks.iter().filter(|c| !c.passed)
    }

    pub fn get(&self, name: &str) -> Option<&Check> {
        self.checks.iter().find(|c| c.name == name)
    }
}

impl fmt::Display for SuiteReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "suite {} ({} checks, {:.1}s)",
            self.suite,
            self.checks.len(),
            self.elapsed.as_secs_f64()
        )?;
        for c in &self.checks {
            writeln!(f, "  {c}")?;
        }
        let failed = self.failures().count();
        write!(
            f,
            "  => {}",
            if failed == 0 {
                "ok".to_string()
            } else {
                format!("{failed} failed")
            }
        )
    }
}

/// Fault injection for exercising the harness itself.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Options {
    /// Name of a primitive (as in [`Prim::name`]) whose gradient check is run
    /// with a deliberately wrong backward rule.
    pub corrupt_backward: Option<String>,
}

/// Outcome of one check before it is named.
pub(crate) struct Measure {
    value: f64,
    tol: f64,
    detail: String,
}

impl Measure {
    /// Passes when `value <= tol`.
    pub(crate) fn within(value: f64, tol: f64) -> Self {
        Self {
            value,
            tol,
            detail: String::new(),
        }
    }

    pub(crate) fn truth(ok: bool) -> Self {
        Self::within(if ok { 0.0 } else { 1.0 }, 0.0)
    }

    /// Passes when `r` is an error; the message becomes the detail.
    pub(crate) fn rejects<T>(r: Result<T>) -> Self {
        match r {
            Err(e) => Self::truth(true).note(e.to_string()),
            Ok(_) => Self::truth(false).note("accepted invalid input"),
        }
    }

    pub(crate) fn note(mut self, detail: impl Into<String>) -> Self {
        self.detail = detail.into();
        self
    }
}

/// Collects named checks; an error inside a check fails only that check.
pub(crate) struct Recorder {
    checks: Vec<Check>,
}

impl Recorder {
    fn new() -> Self {
        Self { checks: Vec::new() }
    }

    pub(crate) fn check(&mut self, name: impl Into<String>, f: impl FnOnce() -> Result<Measure>) {
        let name = name.into();
        let check = match f() {
            Ok(m) => Check {
                passed: m.value <= m.tol,
                name,
                measured: m.value,
                tolerance: m.tol,
                detail: m.detail,
            },
            Err(e) => Check {
                name,
                measured: f64::NAN,
                tolerance: f64::NAN,
                passed: false,
                detail: format!("error: {e}"),
            },
        };
        log::debug!("{check}");
        self.checks.push(check);
    }

    /// Finite-difference gradient check of `obj` over parameters under `prefix`.
    pub(crate) fn grad<O: Objective>(&mut self, name: impl Into<String>, obj: &O, store: &ParamStore, prefix: &str, min_coords: usize) {
        self.check(name, || grad_measure(obj, store, prefix, min_coords));
    }
}

pub(crate) fn grad_measure<O: Objective>(obj: &O, store: &ParamStore, prefix: &str, min_coords: usize) -> Result<Measure> {
    let rep = gradcheck::check(obj, store, prefix, GRAD_COORDS, 0x6a09)?;
    let mut detail = format!("{} coords", rep.coords);
    if let Some((name, i, a, n)) = &rep.worst {
        detail.push_str(&format!("; worst {name}[{i}] analytic {a:.6e} numeric {n:.6e}"));
    }
    if rep.coords < min_coords {
        return Ok(Measure::truth(false).note(format!("only {} coordinates, need {min_coords}", rep.coords)));
    }
    Ok(Measure::within(rep.rel_err, GRAD_TOL).note(detail))
}

pub fn run_suite(name: &str, opts: &Options) -> Result<SuiteReport> {
    let start = Instant::now();
    let mut r = Recorder::new();
    match name {
        "tensor" => suites::tensor(&mut r, opts),
        "attention" => suites::attention(&mut r),
        "ssm" => suites::ssm(&mut r),
        "wavelet" => suites::wavelet(&mut r),
        "hdmamba" => suites::hdmamba(&mut r),
        "pipeline" => suites::pipeline(&mut r),
        "losses" => suites::losses(&mut r),
        "data" => suites::data(&mut r),
        "cli" => suites::cli(&mut r),
        other => {
            return Err(Error::Config(format!(
                "unknown suite `{other}` (expected one of {} or all)",
                SUITES.join(", ")
            )))
        }
    }
    Ok(SuiteReport {
        suite: name.to_string(),
        checks: r.checks,
        elapsed: start.elapsed(),
    })
}

/// Runs the named suite, or every suite for `"all"`.
pub fn run(selection: &str, opts: &Options) -> Result<Vec<SuiteReport>> {
    if selection == "all" {
        SUITES.iter().map(|s| run_suite(s, opts)).collect()
    } else {
        Ok(vec![run_suite(selection, opts)?])
    }
}
