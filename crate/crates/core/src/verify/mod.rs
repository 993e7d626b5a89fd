//! Machine checks of invariance, equivariance, gradients and the fast
//! geometric routines against brute-force oracles.

mod audits;
mod gradcheck;
mod oracles;

use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use audits::{
    audit_network_invariance, lrf_equivariance_audits, reduction_audit, run_suite, conv_invariance_audits,
    AuditConfig, NetworkAudit, NETWORK_TOL,
};
pub use gradcheck::{finite_diff_check, toy_gradcheck, GradCheck, ParamGradError};
pub use oracles::{brute_force_oracles, brute_knn, brute_radius, kpconv_double_sum};

use crate::autodiff::Tensor;
use crate::error::Result;
use crate::geometry::{Point3, Rotation3};

/// Outcome of one check.
#[derive(Clone, Debug, PartialEq)]
pub struct AuditReport {
    pub check: String,
    /// Evaluated (non-excluded) trials.
    pub trials: usize,
    pub max_dev: f64,
    pub tol: f64,
    pub pass: bool,
    /// Inputs excluded because their frames were flagged degenerate (or,
    /// for gradient checks, because a perturbation crossed a kink).
    pub degenerate: usize,
}

impl AuditReport {
    pub fn new(check: impl Into<String>, trials: usize, max_dev: f64, tol: f64, degenerate: usize) -> Self {
        Self {
            check: check.into(),
            trials,
            max_dev,
            tol,
            pass: trials > 0 && max_dev <= tol,
            degenerate,
        }
    }

    pub fn line(&self) -> String {
        format!(
            "{:<44} {} trials={} max_dev={:.3e} tol={:.1e} degenerate={}",
            self.check,
            if self.pass { "PASS" } else { "FAIL" },
            self.trials,
            self.max_dev,
            self.tol,
            self.degenerate
        )
    }
}

/// Whether a check is expected to pass or, as a negative control, to fail.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Expect {
    Pass,
    Fail,
}

/// Reports with their expectations.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AuditSuite {
    pub entries: Vec<(AuditReport, Expect)>,
}

impl AuditSuite {
    pub const CSV_HEADER: &'static str = "check,trials,max_dev,tol,pass,degenerate,expected";

    pub fn push(&mut self, report: AuditReport, expect: Expect) {
        self.entries.push((report, expect));
    }

    pub fn extend(&mut self, reports: impl IntoIterator<Item = (AuditReport, Expect)>) {
        self.entries.extend(reports);
    }

    /// True when every check met its expectation.
    pub fn ok(&self) -> bool {
        self.entries
            .iter()
            .all(|(r, e)| r.pass == (*e == Expect::Pass))
    }

    pub fn text(&self) -> String {
        let mut s = String::new();
        for (r, e) in &self.entries {
            let tag = match (e, r.pass) {
                (Expect::Pass, _) => "",
                (Expect::Fail, false) => "  (negative control, failed as expected)",
                (Expect::Fail, true) => "  (negative control passed: tolerance is vacuous)",
            };
            writeln!(s, "{}{tag}", r.line()).expect("writing to a string");
        }
        writeln!(s, "suite: {}", if self.ok() { "OK" } else { "FAILED" }).expect("writing to a string");
        s
    }

    pub fn csv(&self) -> String {
        let mut s = format!("{}\n", Self::CSV_HEADER);
        for (r, e) in &self.entries {
            writeln!(
                s,
                "{},{},{:e},{:e},{},{},{}",
                r.check,
                r.trials,
                r.max_dev,
                r.tol,
                r.pass,
                r.degenerate,
                if *e == Expect::Pass { "pass" } else { "fail" }
            )
            .expect("writing to a string");
        }
        s
    }
}

/// `max|a − b| / (1 + max|b|)`; shape mismatches count as infinite.
pub fn relative_deviation(a: &Tensor, reference: &Tensor) -> f64 {
    if a.shape() != reference.shape() {
        return f64::INFINITY;
    }
    let d = a
        .data()
        .iter()
        .zip(reference.data())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max);
    d / (1.0 + reference.max_abs())
}

/// Samples `inputs` inputs from `generate` (which returns `None` for inputs
/// with degenerate frames; those are counted and skipped) and checks
/// `f(R·in) = f(in)` for `rotations` random rotations. `f` receives the
/// input and the rotation to apply to it.
pub fn audit_invariance<I>(
    check: &str,
    inputs: usize,
    rotations: usize,
    tol: f64,
    seed: u64,
    mut generate: impl FnMut(&mut ChaCha8Rng) -> Result<Option<I>>,
    f: impl Fn(&I, &Rotation3) -> Result<Tensor>,
) -> Result<AuditReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut trials, mut degenerate, mut worst) = (0, 0, 0.0f64);
    for _ in 0..inputs {
        let Some(input) = generate(&mut rng)? else {
            degenerate += 1;
            continue;
        };
        let base = f(&input, &Rotation3::identity())?;
        for _ in 0..rotations {
            let r = crate::geometry::sample_uniform_rotation(&mut rng);
            worst = worst.max(relative_deviation(&f(&input, &r)?, &base));
            trials += 1;
        }
    }
    Ok(AuditReport::new(check, trials, worst, tol, degenerate))
}

/// Like [`audit_invariance`] for maps returning 3-vectors (points, or frame
/// columns): checks `f(R·in) = R·f(in)` with the deviation measured as
/// `max‖Δ‖ / (1 + max‖f(in)‖)`.
pub fn audit_equivariance<I>(
    check: &str,
    inputs: usize,
    rotations: usize,
    tol: f64,
    seed: u64,
    mut generate: impl FnMut(&mut ChaCha8Rng) -> Result<Option<I>>,
    f: impl Fn(&I, &Rotation3) -> Result<Vec<Point3>>,
) -> Result<AuditReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut trials, mut degenerate, mut worst) = (0, 0, 0.0f64);
    for _ in 0..inputs {
        let Some(input) = generate(&mut rng)? else {
            degenerate += 1;
            continue;
        };
        let base = f(&input, &Rotation3::identity())?;
        let scale = 1.0 + base.iter().map(|v| v.norm()).fold(0.0, f64::max);
        for _ in 0..rotations {
            let r = crate::geometry::sample_uniform_rotation(&mut rng);
            let moved = f(&input, &r)?;
            let dev = if moved.len() != base.len() {
                f64::INFINITY
            } else {
                moved
                    .iter()
                    .zip(&base)
                    .map(|(m, b)| (m - r.apply(b)).norm())
                    .fold(0.0, f64::max)
            };
            worst = worst.max(dev / scale);
            trials += 1;
        }
    }
    Ok(AuditReport::new(check, trials, worst, tol, degenerate))
}
