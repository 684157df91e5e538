//! Brute-force oracles and finite-difference gradient checks shared by the
//! integration tests and the acceptance target.

#![allow(dead_code)]

pub mod gradcheck;
pub mod invariants;
pub mod oracles;

/// Outcome of running a check over many random instances.
#[derive(Debug, Clone)]
pub struct Tally {
    pub name: &'static str,
    pub instances: usize,
    pub failures: Vec<String>,
    /// Largest absolute deviation seen (0 for exact checks).
    pub max_err: f64,
}

impl Tally {
    pub fn new(name: &'static str) -> Self {
        Self {
            name,
            instances: 0,
            failures: Vec::new(),
            max_err: 0.0,
        }
    }

    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }

    pub fn record(&mut self, err: f64, tol: f64, context: impl FnOnce() -> String) {
        self.instances += 1;
        self.max_err = self.max_err.max(err);
        // NaN errors fail too.
        if err.is_nan() || err > tol {
            self.failures.push(format!("err {err:e} > {tol:e}: {}", context()));
        }
    }

    pub fn assert_ok(&self) {
        assert!(
            self.passed(),
            "{}: {} of {} instances failed, first: {}",
            self.name,
            self.failures.len(),
            self.instances,
            self.failures[0]
        );
    }
}
