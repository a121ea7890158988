//! JSON scenario files.
//!
//! A scenario is a UTF-8 JSON object. Matrix entries and signal components
//! are expression strings in `t` (plain numbers are accepted too):
//!
//! ```json
//! {
//!   "name": "example",
//!   "A": [["0", "1"], ["-1", "-0.1*sin(t)"]],
//!   "F": [["0"], ["1"]],
//!   "D": [["0"], ["1"]],
//!   "C": [["1", "0"]],
//!   "w_bar": 1.0,
//!   "u": ["0"],
//!   "w": ["sin(t)"],
//!   "x0": [1, 0],
//!   "xt0": [0, 0],
//!   "feedback": [[0.5, 1.0]],
//!   "observer": { "k": 1, "p": 10, "q0": "identity" },
//!   "differentiator": { "order": 1, "L": 5, "discretization": "euler" },
//!   "settle": { "threshold": 1e-3, "dwell": 0.5 },
//!   "step": { "h": 1e-3, "t0": 0, "t_end": 20 },
//!   "noise": { "sigma": 0, "seed": 1 }
//! }
//! ```
//!
//! `F`, `u`, `feedback`, `xt0`, `differentiator`, `settle` and `noise` are
//! optional. `q0` may also be `{ "random_seed": 7 }`.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde_json::{Map, Value};

use crate::cascade::{DifferentiatorSpec, NoiseConfig};
use crate::expr::{Expr, MatrixExpr};
use crate::hosm::{Discretization, SettleOptions};
use crate::integrators::StepConfig;
use crate::lyapunov::{identity_frame, random_frame};
use crate::observer::{ObserverConfig, Plant};
use crate::system::{LtvSystem, Signal};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FramePolicy {
    Identity,
    Random(u64),
}

impl FramePolicy {
    pub fn frame(self, n: usize, k: usize) -> DMatrix<f64> {
        match self {
            FramePolicy::Identity => identity_frame(n, k),
            FramePolicy::Random(seed) => random_frame(n, k, seed),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Scenario {
    pub name: String,
    pub plant: Plant,
    pub x0: DVector<f64>,
    pub xt0: DVector<f64>,
    pub k: usize,
    pub p: f64,
    pub frame: FramePolicy,
    pub differentiator: DifferentiatorSpec,
    pub settle: SettleOptions,
    pub noise: NoiseConfig,
    pub step: StepConfig,
}

impl Scenario {
    pub fn n(&self) -> usize {
        self.plant.sys.n()
    }

    pub fn sys(&self) -> &LtvSystem {
        &self.plant.sys
    }

    /// Observer configuration for the scenario's `k`, `p`, frame policy and step.
    pub fn observer_config(&self) -> Result<ObserverConfig> {
        Ok(ObserverConfig::new(self.n(), self.p, self.k, self.step)?.with_frame(self.frame.frame(self.n(), self.k)))
    }
}

fn err(path: &str, message: impl Into<String>) -> Error {
    Error::Scenario { path: path.to_string(), message: message.into() }
}

fn join(path: &str, key: &str) -> String {
    if path.is_empty() {
        key.to_string()
    } else {
        format!("{path}.{key}")
    }
}

fn as_object<'a>(v: &'a Value, path: &str) -> Result<&'a Map<String, Value>> {
    v.as_object().ok_or_else(|| err(path, "expected an object"))
}

fn as_array<'a>(v: &'a Value, path: &str) -> Result<&'a Vec<Value>> {
    v.as_array().ok_or_else(|| err(path, "expected an array"))
}

fn as_f64(v: &Value, path: &str) -> Result<f64> {
    let x = v.as_f64().ok_or_else(|| err(path, "expected a number"))?;
    if !x.is_finite() {
        return Err(err(path, "expected a finite number"));
    }
    Ok(x)
}

fn as_usize(v: &Value, path: &str) -> Result<usize> {
    v.as_u64().map(|x| x as usize).ok_or_else(|| err(path, "expected a non-negative integer"))
}

fn expr(v: &Value, path: &str) -> Result<Expr> {
    match v {
        Value::String(s) => Expr::parse(s).map_err(|e| err(path, e.to_string())),
        Value::Number(_) => Ok(Expr::num(as_f64(v, path)?)),
        _ => Err(err(path, "expected an expression string or a number")),
    }
}

/// Matrix of expressions; entry paths are reported 1-based as `A[i][j]`.
fn matrix_expr(v: &Value, name: &str) -> Result<MatrixExpr> {
    let rows = as_array(v, name)?;
    let cols = match rows.first() {
        Some(r) => as_array(r, &format!("{name}[1]"))?.len(),
        None => 0,
    };
    let mut entries = Vec::with_capacity(rows.len() * cols);
    for (i, row) in rows.iter().enumerate() {
        let rpath = format!("{name}[{}]", i + 1);
        let row = as_array(row, &rpath)?;
        if row.len() != cols {
            return Err(Error::DimensionMismatch {
                name: name.to_string(),
                expected: format!("{cols} entries in row {}", i + 1),
                found: row.len().to_string(),
            });
        }
        for (j, cell) in row.iter().enumerate() {
            entries.push(expr(cell, &format!("{name}[{}][{}]", i + 1, j + 1))?);
        }
    }
    Ok(MatrixExpr::new(rows.len(), cols, entries))
}

fn numeric_matrix(v: &Value, name: &str) -> Result<DMatrix<f64>> {
    let m = matrix_expr(v, name)?;
    if !m.is_constant() {
        return Err(err(name, "expected constant entries"));
    }
    m.eval(0.0)
}

fn signal(v: &Value, name: &str) -> Result<Signal> {
    let items = as_array(v, name)?;
    items.iter().enumerate().map(|(i, c)| expr(c, &format!("{name}[{}]", i + 1))).collect::<Result<Vec<_>>>().map(Signal)
}

fn vector(v: &Value, name: &str, len: usize) -> Result<DVector<f64>> {
    let items = as_array(v, name)?;
    if items.len() != len {
        return Err(Error::DimensionMismatch { name: name.to_string(), expected: len.to_string(), found: items.len().to_string() });
    }
    let vals = items.iter().enumerate().map(|(i, x)| as_f64(x, &format!("{name}[{}]", i + 1))).collect::<Result<Vec<_>>>()?;
    Ok(DVector::from_vec(vals))
}

fn required<'a>(obj: &'a Map<String, Value>, key: &str, path: &str) -> Result<&'a Value> {
    obj.get(key).ok_or_else(|| err(&join(path, key), "missing required key"))
}

fn check_keys(obj: &Map<String, Value>, allowed: &[&str], path: &str) -> Result<()> {
    for key in obj.keys() {
        if !allowed.contains(&key.as_str()) {
            return Err(err(&join(path, key), "unknown key"));
        }
    }
    Ok(())
}

/// Parses a scenario document.
pub fn parse_scenario(text: &str) -> Result<Scenario> {
    let root: Value = serde_json::from_str(text).map_err(|e| err("", format!("invalid JSON at line {}, column {}: {e}", e.line(), e.column())))?;
    let obj = as_object(&root, "")?;
    check_keys(
        obj,
        &["name", "description", "A", "F", "D", "C", "w_bar", "u", "w", "x0", "xt0", "feedback", "observer", "differentiator", "settle", "step", "noise"],
        "",
    )?;
    let name = match obj.get("name") {
        Some(v) => v.as_str().ok_or_else(|| err("name", "expected a string"))?.to_string(),
        None => String::from("scenario"),
    };
    let a = matrix_expr(required(obj, "A", "")?, "A")?;
    let n = a.rows();
    if n == 0 {
        return Err(err("A", "state dimension must be positive"));
    }
    let f = match obj.get("F") {
        Some(v) => matrix_expr(v, "F")?,
        None => MatrixExpr::zeros(n, 0),
    };
    let d = matrix_expr(required(obj, "D", "")?, "D")?;
    let c = matrix_expr(required(obj, "C", "")?, "C")?;
    let w_bar = as_f64(required(obj, "w_bar", "")?, "w_bar")?;
    let sys = LtvSystem::new(a, f, d, c, w_bar)?;

    let u = match obj.get("u") {
        Some(v) => signal(v, "u")?,
        None => Signal::zeros(sys.q()),
    };
    let w = signal(required(obj, "w", "")?, "w")?;
    let feedback = obj.get("feedback").map(|v| numeric_matrix(v, "feedback")).transpose()?;
    let x0 = vector(required(obj, "x0", "")?, "x0", n)?;
    let xt0 = match obj.get("xt0") {
        Some(v) => vector(v, "xt0", n)?,
        None => DVector::zeros(n),
    };
    let plant = Plant::new(sys, u, w, feedback)?;

    let obs = as_object(required(obj, "observer", "")?, "observer")?;
    check_keys(obs, &["k", "p", "q0"], "observer")?;
    let k = as_usize(required(obs, "k", "observer")?, "observer.k")?;
    let p = as_f64(required(obs, "p", "observer")?, "observer.p")?;
    let frame = match obs.get("q0") {
        None => FramePolicy::Identity,
        Some(Value::String(s)) if s == "identity" => FramePolicy::Identity,
        Some(Value::Object(m)) if m.len() == 1 && m.contains_key("random_seed") => {
            FramePolicy::Random(as_usize(&m["random_seed"], "observer.q0.random_seed")? as u64)
        }
        Some(_) => return Err(err("observer.q0", "expected \"identity\" or {\"random_seed\": <int>}")),
    };
    if k == 0 || k > n {
        return Err(err("observer.k", format!("must lie in 1..={n}")));
    }
    if !(p > 0.0) {
        return Err(err("observer.p", "must be positive"));
    }

    let mut differentiator = DifferentiatorSpec::default();
    if let Some(v) = obj.get("differentiator") {
        let dobj = as_object(v, "differentiator")?;
        check_keys(dobj, &["order", "L", "gains", "discretization"], "differentiator")?;
        if let Some(o) = dobj.get("order") {
            differentiator.order = Some(as_usize(o, "differentiator.order")?);
        }
        if let Some(l) = dobj.get("L") {
            differentiator.lipschitz = as_f64(l, "differentiator.L")?;
            if !(differentiator.lipschitz > 0.0) {
                return Err(err("differentiator.L", "must be positive"));
            }
        }
        if let Some(g) = dobj.get("gains") {
            let gains = as_array(g, "differentiator.gains")?
                .iter()
                .enumerate()
                .map(|(i, x)| as_f64(x, &format!("differentiator.gains[{}]", i + 1)))
                .collect::<Result<Vec<_>>>()?;
            differentiator.gains = Some(gains);
        }
        if let Some(dv) = dobj.get("discretization") {
            differentiator.discretization = match dv.as_str() {
                Some("euler") => Discretization::Euler,
                Some("taylor") => Discretization::Taylor,
                _ => return Err(err("differentiator.discretization", "expected \"euler\" or \"taylor\"")),
            };
        }
    }

    let mut settle = SettleOptions::default();
    if let Some(v) = obj.get("settle") {
        let sobj = as_object(v, "settle")?;
        check_keys(sobj, &["threshold", "dwell"], "settle")?;
        if let Some(x) = sobj.get("threshold") {
            settle.threshold = as_f64(x, "settle.threshold")?;
        }
        if let Some(x) = sobj.get("dwell") {
            settle.dwell = as_f64(x, "settle.dwell")?;
        }
    }

    let sobj = as_object(required(obj, "step", "")?, "step")?;
    check_keys(sobj, &["h", "t0", "t_end"], "step")?;
    let h = match sobj.get("h") {
        Some(v) => as_f64(v, "step.h")?,
        None => StepConfig::default().h,
    };
    let t0 = match sobj.get("t0") {
        Some(v) => as_f64(v, "step.t0")?,
        None => 0.0,
    };
    let t_end = as_f64(required(sobj, "t_end", "step")?, "step.t_end")?;
    let step = StepConfig::new(h, t0, t_end).map_err(|e| err("step", e.to_string()))?;

    let mut noise = NoiseConfig::default();
    if let Some(v) = obj.get("noise") {
        let nobj = as_object(v, "noise")?;
        check_keys(nobj, &["sigma", "seed"], "noise")?;
        if let Some(x) = nobj.get("sigma") {
            noise.sigma = as_f64(x, "noise.sigma")?;
            if noise.sigma < 0.0 {
                return Err(err("noise.sigma", "must be non-negative"));
            }
        }
        if let Some(x) = nobj.get("seed") {
            noise.seed = as_usize(x, "noise.seed")? as u64;
        }
    }

    Ok(Scenario { name, plant, x0, xt0, k, p, frame, differentiator, settle, noise, step })
}

/// Reads and parses a scenario file.
pub fn load_scenario(path: impl AsRef<Path>) -> Result<Scenario> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| err("", format!("cannot read {}: {e}", path.display())))?;
    parse_scenario(&text)
}

#[cfg(test)]
mod tests {
    use super::*;

    const SMALL: &str = r#"{
        "A": [["0", "1"], ["-1", "-0.1*sin(t)"]],
        "D": [["0"], ["1"]],
        "C": [["1", "0"]],
        "w_bar": 1,
        "w": ["sin(t)"],
        "x0": [1, 0],
        "observer": {"k": 1, "p": 10},
        "step": {"t_end": 1}
    }"#;

    #[test]
    fn parses_minimal() {
        let s = parse_scenario(SMALL).unwrap();
        assert_eq!(s.n(), 2);
        assert_eq!(s.sys().q(), 0);
        assert_eq!(s.step.h, 1e-3);
        assert_eq!(s.frame, FramePolicy::Identity);
    }

    #[test]
    fn reports_expression_position() {
        let bad = SMALL.replace("\"-0.1*sin(t)\"", "\"0.23*sn(0.5*t)\"");
        match parse_scenario(&bad) {
            Err(Error::Scenario { path, .. }) => assert_eq!(path, "A[2][2]"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn reports_non_square_a() {
        let bad = SMALL.replace(r#"[["0", "1"], ["-1", "-0.1*sin(t)"]]"#, r#"[["0", "1"]]"#);
        match parse_scenario(&bad) {
            Err(Error::DimensionMismatch { name, .. }) => assert_eq!(name, "A"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn reports_missing_and_unknown_keys() {
        let bad = SMALL.replace("\"w_bar\": 1,", "");
        assert!(matches!(parse_scenario(&bad), Err(Error::Scenario { path, .. }) if path == "w_bar"));
        let bad = SMALL.replace("\"k\": 1", "\"k\": 1, \"gain\": 2");
        assert!(matches!(parse_scenario(&bad), Err(Error::Scenario { path, .. }) if path == "observer.gain"));
    }
}
