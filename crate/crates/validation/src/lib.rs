//! Verdict bookkeeping for the acceptance run: each criterion runs under a
//! time limit and prints exactly one `PASS` or `FAIL` line.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::{Duration, Instant};

/// Measured result of one criterion before the time limit is applied.
#[derive(Debug, Clone, PartialEq)]
pub struct Outcome {
    pub passed: bool,
    pub detail: String,
}

impl Outcome {
    pub fn new(passed: bool, detail: impl Into<String>) -> Self {
        Self {
            passed,
            detail: detail.into(),
        }
    }

    /// Joins several sub-checks; the outcome passes only if all do.
    pub fn all(parts: impl IntoIterator<Item = Outcome>) -> Self {
        let parts: Vec<Outcome> = parts.into_iter().collect();
        let passed = parts.iter().all(|p| p.passed);
        let detail = parts
            .iter()
            .map(|p| {
                if p.passed {
                    p.detail.clone()
                } else {
                    format!("{} [failed]", p.detail)
                }
            })
            .collect::<Vec<_>>()
            .join("; ");
        Self { passed, detail }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Verdict {
    pub name: String,
    pub passed: bool,
    pub elapsed: Duration,
    pub limit: Duration,
    pub detail: String,
}

impl Verdict {
    pub fn line(&self) -> String {
        format!(
            "{} {} ({:.2}s, limit {}s): {}",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.elapsed.as_secs_f64(),
            self.limit.as_secs(),
            self.detail
        )
    }
}

#[derive(Debug, Default)]
pub struct Scoreboard {
    verdicts: Vec<Verdict>,
}

impl Scoreboard {
    pub fn new() -> Self {
        Self::default()
    }

    /// Runs `check`, prints its verdict line and records it. A panic counts
    /// as a failure, and so does overrunning `limit`.
    pub fn run(&mut self, name: &str, limit: Duration, check: impl FnOnce() -> Outcome) -> &Verdict {
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|payload| {
            let message = payload
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| payload.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "unknown panic".into());
            Outcome::new(false, format!("panicked: {message}"))
        });
        let elapsed = start.elapsed();
        let in_time = elapsed < limit;
        let detail = if in_time {
            outcome.detail
        } else {
            format!("{} [over time]", outcome.detail)
        };
        let verdict = Verdict {
            name: name.to_string(),
            passed: outcome.passed && in_time,
            elapsed,
            limit,
            detail,
        };
        println!("{}", verdict.line());
        self.verdicts.push(verdict);
        self.verdicts.last().expect("just pushed")
    }

    pub fn verdicts(&self) -> &[Verdict] {
        &self.verdicts
    }

    pub fn passed(&self) -> usize {
        self.verdicts.iter().filter(|v| v.passed).count()
    }

    /// Prints the tally; success only when every criterion passed.
    pub fn finish(self) -> ExitCode {
        println!("acceptance: {}/{} criteria passed", self.passed(), self.verdicts.len());
        if self.passed() == self.verdicts.len() {
            ExitCode::SUCCESS
        } else {
            ExitCode::FAILURE
        }
    }
}
