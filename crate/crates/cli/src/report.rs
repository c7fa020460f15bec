//! Deterministic reports: a header, informational fields and named checks.
//!
//! Nothing time- or thread-dependent is recorded, so two runs with the same
//! input, seed and flags produce byte-identical text and JSON.

use std::fmt::Write as _;

use serde::Serialize;
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, Copy, Serialize)]
pub struct Tolerances {
    /// Solver stopping tolerance.
    pub solver: f64,
    /// Slack added to every certified bound before comparison.
    pub slack: f64,
    /// Monte Carlo acceptance width in standard errors.
    pub mc_sigmas: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Self {
            solver: 1e-10,
            slack: 1e-9,
            mc_sigmas: 4.0,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
#[serde(untagged)]
pub enum Value {
    Num(f64),
    Nums(Vec<f64>),
    Int(u64),
    Text(String),
}

#[derive(Debug, Clone, Serialize)]
pub struct Field {
    pub key: String,
    pub value: Value,
}

#[derive(Debug, Clone, Serialize)]
pub struct Check {
    pub name: String,
    pub certified_bound: Option<f64>,
    pub measured: Option<f64>,
    pub pass: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub detail: Option<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct Report {
    pub command: String,
    pub input: String,
    pub input_sha256: String,
    pub seed: u64,
    pub tolerances: Tolerances,
    pub fields: Vec<Field>,
    pub checks: Vec<Check>,
    pub pass: bool,
}

impl Report {
    pub fn new(command: &str, input: &str, bytes: &[u8], seed: u64, tolerances: Tolerances) -> Self {
        Self {
            command: command.to_string(),
            input: input.to_string(),
            input_sha256: hex::encode(Sha256::digest(bytes)),
            seed,
            tolerances,
            fields: Vec::new(),
            checks: Vec::new(),
            pass: true,
        }
    }

    pub fn field(&mut self, key: impl Into<String>, value: Value) {
        self.fields.push(Field { key: key.into(), value });
    }

    pub fn num(&mut self, key: impl Into<String>, v: f64) {
        self.field(key, Value::Num(v));
    }

    pub fn nums(&mut self, key: impl Into<String>, v: &[f64]) {
        self.field(key, Value::Nums(v.to_vec()));
    }

    pub fn int(&mut self, key: impl Into<String>, v: usize) {
        self.field(key, Value::Int(v as u64));
    }

    pub fn text(&mut self, key: impl Into<String>, v: impl Into<String>) {
        self.field(key, Value::Text(v.into()));
    }

    fn push(&mut self, check: Check) {
        self.pass &= check.pass;
        self.checks.push(check);
    }

    /// `measured <= bound + slack`.
    pub fn bounded(&mut self, name: impl Into<String>, bound: f64, measured: f64) {
        let pass = measured <= bound + self.tolerances.slack;
        self.push(Check {
            name: name.into(),
            certified_bound: Some(bound),
            measured: Some(measured),
            pass,
            detail: None,
        });
    }

    /// A check whose verdict comes from the library.
    pub fn verdict(&mut self, name: impl Into<String>, bound: Option<f64>, measured: Option<f64>, pass: bool) {
        self.push(Check {
            name: name.into(),
            certified_bound: bound,
            measured,
            pass,
            detail: None,
        });
    }

    /// A check that could not be carried out; always a failure.
    pub fn failed(&mut self, name: impl Into<String>, detail: impl Into<String>) {
        self.push(Check {
            name: name.into(),
            certified_bound: None,
            measured: None,
            pass: false,
            detail: Some(detail.into()),
        });
    }

    pub fn failing(&self) -> Vec<&str> {
        self.checks.iter().filter(|c| !c.pass).map(|c| c.name.as_str()).collect()
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("reports serialize");
        s.push('\n');
        s
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let t = &self.tolerances;
        let _ = writeln!(out, "command: {}", self.command);
        let _ = writeln!(out, "input: {}", self.input);
        let _ = writeln!(out, "input sha256: {}", self.input_sha256);
        let _ = writeln!(out, "seed: {}", self.seed);
        let _ = writeln!(
            out,
            "tolerances: solver {} slack {} mc {} sigma",
            num(t.solver),
            num(t.slack),
            num(t.mc_sigmas)
        );
        out.push('\n');
        for f in &self.fields {
            let v = match &f.value {
                Value::Num(x) => num(*x),
                Value::Nums(xs) => format!("[{}]", xs.iter().map(|x| num(*x)).collect::<Vec<_>>().join(", ")),
                Value::Int(i) => i.to_string(),
                Value::Text(s) => s.clone(),
            };
            let _ = writeln!(out, "{}: {v}", f.key);
        }
        if !self.fields.is_empty() {
            out.push('\n');
        }
        for c in &self.checks {
            let mut line = format!("[{}] {}", if c.pass { "PASS" } else { "FAIL" }, c.name);
            if let Some(b) = c.certified_bound {
                let _ = write!(line, "  bound {}", num(b));
            }
            if let Some(m) = c.measured {
                let _ = write!(line, "  measured {}", num(m));
            }
            if let Some(d) = &c.detail {
                let _ = write!(line, "  ({d})");
            }
            let _ = writeln!(out, "{line}");
        }
        let passed = self.checks.iter().filter(|c| c.pass).count();
        let _ = writeln!(
            out,
            "\n{}: {passed}/{} checks passed",
            if self.pass { "PASS" } else { "FAIL" },
            self.checks.len()
        );
        out
    }
}

/// Fixed decimals in the ordinary range, scientific notation outside it.
pub fn num(x: f64) -> String {
    if x.is_infinite() {
        return if x > 0.0 { "inf".into() } else { "-inf".into() };
    }
    if x.is_nan() {
        return "nan".into();
    }
    let a = x.abs();
    if a == 0.0 {
        "0".into()
    } else if (1e-4..1e6).contains(&a) {
        format!("{x:.9}")
    } else {
        format!("{x:.6e}")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn numbers_render_stably() {
        assert_eq!(num(4.0 / 3.0), "1.333333333");
        assert_eq!(num(0.0), "0");
        assert_eq!(num(-0.0), "0");
        assert_eq!(num(1e-12), "1.000000e-12");
        assert_eq!(num(f64::INFINITY), "inf");
    }

    #[test]
    fn failing_checks_flip_the_verdict() {
        let mut r = Report::new("solve", "x.toml", b"abc", 0, Tolerances::default());
        r.bounded("ok", 1.0, 1.0 + 5e-10);
        assert!(r.pass);
        r.bounded("bad", 1.0, 1.1);
        assert!(!r.pass);
        assert_eq!(r.failing(), vec!["bad"]);
        assert_eq!(r.input_sha256, "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
        assert!(r.to_text().contains("[FAIL] bad  bound 1.000000000  measured 1.100000000"));
    }
}
