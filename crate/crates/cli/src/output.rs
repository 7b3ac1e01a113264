use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use anyhow::{Context, Result};
use serde::Serialize;
use tcv_core::{SuiteConfig, VerificationReport};

use crate::Format;

#[derive(Serialize)]
struct SuiteSummary<'a> {
    name: &'a str,
    total: usize,
    passed: usize,
    failed: usize,
    pass: bool,
}

/// Top-level JSON document: `{"suite", "reports", "config_echo"}`.
#[derive(Serialize)]
pub struct SuiteOutput<'a> {
    suite: SuiteSummary<'a>,
    reports: &'a [VerificationReport],
    config_echo: &'a SuiteConfig,
}

/// Floats at 17 significant digits; non-finite values spelled out.
fn float(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.16e}")
    } else {
        v.to_string()
    }
}

fn write_file(dir: &Path, name: &str, contents: &str) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let path = dir.join(name);
    fs::write(&path, contents).with_context(|| format!("writing {}", path.display()))
}

impl<'a> SuiteOutput<'a> {
    pub fn new(name: &'a str, reports: &'a [VerificationReport], config: &'a SuiteConfig) -> Self {
        let passed = reports.iter().filter(|r| r.pass).count();
        Self {
            suite: SuiteSummary {
                name,
                total: reports.len(),
                passed,
                failed: reports.len() - passed,
                pass: passed == reports.len(),
            },
            reports,
            config_echo: config,
        }
    }

    pub fn all_pass(&self) -> bool {
        self.suite.pass
    }

    pub fn json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn csv(&self) -> String {
        let mut out = String::from("check_id,pass,measured,bound,comparison,tolerance,trials,seed\n");
        for r in self.reports {
            let comparison = serde_json::to_value(r.comparison)
                .ok()
                .and_then(|v| v.as_str().map(str::to_owned))
                .unwrap_or_default();
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{}",
                r.check_id,
                r.pass,
                float(r.measured),
                float(r.bound),
                comparison,
                float(r.tolerance),
                r.trials,
                r.seed
            );
        }
        out
    }

    /// JSON goes to stdout; with `--out`, files are written as well. A CSV-only
    /// run without `--out` prints the CSV instead.
    pub fn emit(&self, format: Format, out: Option<&Path>) -> Result<()> {
        if format.json() {
            let json = self.json()?;
            print!("{json}");
            if let Some(dir) = out {
                write_file(dir, "report.json", &json)?;
            }
        }
        if format.csv() {
            let csv = self.csv();
            match out {
                Some(dir) => write_file(dir, "reports.csv", &csv)?,
                None if !format.json() => print!("{csv}"),
                None => {}
            }
        }
        Ok(())
    }
}

/// One named column indexed by step.
pub struct Series {
    name: &'static str,
    column: &'static str,
    values: Vec<f64>,
}

#[derive(Serialize)]
struct SeriesDoc<'a> {
    experiment: &'a str,
    column: &'a str,
    values: &'a [f64],
    config_echo: &'a SuiteConfig,
}

impl Series {
    pub fn new(name: &'static str, column: &'static str, values: Vec<f64>) -> Self {
        Self { name, column, values }
    }

    pub fn csv(&self) -> String {
        let mut out = format!("step,{}\n", self.column);
        for (k, v) in self.values.iter().enumerate() {
            let _ = writeln!(out, "{k},{}", float(*v));
        }
        out
    }

    /// The CSV file is always written under `--out`; stdout carries JSON when
    /// requested and the CSV otherwise.
    pub fn emit(&self, format: Format, out: Option<&Path>, config: &SuiteConfig) -> Result<()> {
        let csv = self.csv();
        if format.json() {
            let doc = SeriesDoc {
                experiment: self.name,
                column: self.column,
                values: &self.values,
                config_echo: config,
            };
            let json = serde_json::to_string_pretty(&doc)? + "\n";
            print!("{json}");
            if let Some(dir) = out {
                write_file(dir, &format!("{}.json", self.name), &json)?;
            }
        }
        match out {
            Some(dir) => write_file(dir, &format!("{}.csv", self.name), &csv)?,
            None if !format.json() => print!("{csv}"),
            None => {}
        }
        Ok(())
    }
}
