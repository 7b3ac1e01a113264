use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

/// How `measured` is compared against `bound`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Comparison {
    /// `measured <= bound * (1 + tolerance)`
    AtMostRelative,
    /// `measured <= bound + tolerance`
    AtMostAbsolute,
    /// `measured >= bound - tolerance`
    AtLeastAbsolute,
}

impl Comparison {
    pub fn holds(self, measured: f64, bound: f64, tolerance: f64) -> bool {
        match self {
            Comparison::AtMostRelative => measured <= bound * (1.0 + tolerance),
            Comparison::AtMostAbsolute => measured <= bound + tolerance,
            Comparison::AtLeastAbsolute => measured >= bound - tolerance,
        }
    }
}

/// Outcome of one named check.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerificationReport {
    pub check_id: String,
    pub pass: bool,
    pub measured: f64,
    pub bound: f64,
    pub comparison: Comparison,
    pub tolerance: f64,
    pub trials: usize,
    pub seed: u64,
    /// Not serialized: reports must replay byte-identically.
    #[serde(skip)]
    pub wall_time_ms: u128,
    pub notes: String,
    pub details: BTreeMap<String, f64>,
}

impl VerificationReport {
    /// Builds a report whose `pass` is the comparison outcome.
    pub fn compare(
        check_id: impl Into<String>,
        measured: f64,
        bound: f64,
        comparison: Comparison,
        tolerance: f64,
    ) -> Self {
        Self {
            check_id: check_id.into(),
            pass: comparison.holds(measured, bound, tolerance),
            measured,
            bound,
            comparison,
            tolerance,
            trials: 1,
            seed: 0,
            wall_time_ms: 0,
            notes: String::new(),
            details: BTreeMap::new(),
        }
    }

    pub fn trials(mut self, trials: usize) -> Self {
        self.trials = trials;
        self
    }

    pub fn seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn note(mut self, note: impl Into<String>) -> Self {
        let note = note.into();
        if self.notes.is_empty() {
            self.notes = note;
        } else {
            self.notes.push_str("; ");
            self.notes.push_str(&note);
        }
        self
    }

    pub fn detail(mut self, key: &str, value: f64) -> Self {
        self.details.insert(key.to_string(), value);
        self
    }

    /// Folds an extra sub-check into `pass`.
    pub fn require(mut self, ok: bool, what: &str) -> Self {
        if !ok {
            self.pass = false;
            self = self.note(format!("failed: {what}"));
        }
        self
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn comparisons() {
        assert!(Comparison::AtMostRelative.holds(2.0, 2.0, 0.0));
        assert!(Comparison::AtMostRelative.holds(2.0 + 1e-10, 2.0, 1e-9));
        assert!(!Comparison::AtMostRelative.holds(2.1, 2.0, 1e-9));
        assert!(Comparison::AtMostAbsolute.holds(1e-13, 0.0, 1e-12));
        assert!(Comparison::AtLeastAbsolute.holds(-1e-11, 0.0, 1e-10));
        assert!(!Comparison::AtLeastAbsolute.holds(-1e-9, 0.0, 1e-10));
    }

    #[test]
    fn require_demotes_pass() {
        let r = VerificationReport::compare("x", 0.0, 1.0, Comparison::AtMostRelative, 0.0);
        assert!(r.pass);
        let r = r.require(false, "side condition");
        assert!(!r.pass);
        assert!(r.notes.contains("side condition"));
    }
}
