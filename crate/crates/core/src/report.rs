//! Named pass/fail checks with their maximum deviations.

use std::fmt;

/// One named check of a verification report.
#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: String,
    pub max_deviation: f64,
    pub pass: bool,
}

/// Per-check maximum deviations, printed as `name max_deviation=… status=…` lines.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Report {
    pub checks: Vec<Check>,
}

impl Report {
    pub fn push(&mut self, name: &str, max_deviation: f64, tol: f64) {
        let pass = max_deviation.is_finite() && max_deviation <= tol;
        self.checks.push(Check { name: name.to_string(), max_deviation, pass });
    }

    pub fn all_pass(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }

    pub fn get(&self, name: &str) -> Option<&Check> {
        self.checks.iter().find(|c| c.name == name)
    }

    pub fn extend(&mut self, prefix: &str, other: Report) {
        for mut c in other.checks {
            c.name = format!("{prefix}{}", c.name);
            self.checks.push(c);
        }
    }
}

impl fmt::Display for Report {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for c in &self.checks {
            writeln!(
                f,
                "{} max_deviation={:.3e} status={}",
                c.name,
                c.max_deviation,
                if c.pass { "pass" } else { "fail" }
            )?;
        }
        Ok(())
    }
}
