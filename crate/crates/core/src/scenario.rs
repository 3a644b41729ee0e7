//! Scenario documents (JSON) and their validated runtime form.
//!
//! Matrices are row-major nested arrays. Box bounds are `[lo, hi]` pairs with
//! `null` for an absent side. Rate, speed, step and horizon must be given
//! explicitly.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::erg::{ErgParams, WMode};
use crate::error::{Error, Result};
use crate::flow::{FlowParams, InitMode, Stepper};
use crate::linalg::{from_rows, Mat, Vector};
use crate::lti::{ConstraintRow, ContinuousPlant, PolytopicConstraints};
use crate::ocp::CostWeights;
use crate::terminal::TerminalOptions;

type Rows = Vec<Vec<f64>>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioFile {
    pub name: String,
    pub plant: PlantSection,
    #[serde(default)]
    pub constraints: ConstraintSection,
    pub cost: CostSection,
    pub horizon: HorizonSection,
    pub flow: FlowSection,
    pub erg: ErgSection,
    #[serde(default)]
    pub terminal: TerminalSection,
    pub gamma: Vec<f64>,
    pub r0: Vec<f64>,
    pub xi0: Vec<f64>,
    pub t_end: f64,
    #[serde(default)]
    pub h_plant: Option<f64>,
    pub log_interval: f64,
    #[serde(default)]
    pub output: OutputSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlantSection {
    pub a: Rows,
    pub b: Rows,
    pub c: Rows,
    pub d: Rows,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConstraintSection {
    #[serde(default)]
    pub state_box: Vec<[Option<f64>; 2]>,
    #[serde(default)]
    pub input_box: Vec<[Option<f64>; 2]>,
    #[serde(default)]
    pub state_rows: Vec<ConstraintRow>,
    #[serde(default)]
    pub input_rows: Vec<ConstraintRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostSection {
    pub q: Rows,
    #[serde(default)]
    pub u: Option<Rows>,
    pub r: Rows,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HorizonSection {
    pub steps: usize,
    pub tau: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlowSection {
    pub alpha: f64,
    #[serde(default)]
    pub init: InitMode,
    #[serde(default)]
    pub stepper: Stepper,
    #[serde(default)]
    pub h_flow: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ErgSection {
    pub enabled: bool,
    pub kappa: f64,
    pub eta: f64,
    pub delta: Vec<f64>,
    pub zeta: Vec<f64>,
    #[serde(default)]
    pub w_mode: WMode,
    #[serde(default)]
    pub w: Option<Rows>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TerminalSection {
    #[serde(default = "default_lyapunov_epsilon")]
    pub lyapunov_epsilon: f64,
    #[serde(default)]
    pub include_terminal_rows: bool,
    /// `ε` of the step-size check; diagnostic only.
    #[serde(default = "default_check_epsilon")]
    pub check_epsilon: f64,
}

fn default_lyapunov_epsilon() -> f64 {
    TerminalOptions::default().lyapunov_epsilon
}

fn default_check_epsilon() -> f64 {
    0.5
}

impl Default for TerminalSection {
    fn default() -> Self {
        Self {
            lyapunov_epsilon: default_lyapunov_epsilon(),
            include_terminal_rows: false,
            check_epsilon: default_check_epsilon(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    #[serde(default)]
    pub csv: Option<String>,
    #[serde(default)]
    pub plot: bool,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_strict_tolerance")]
    pub strict_tolerance: f64,
}

fn default_strict_tolerance() -> f64 {
    1e-3
}

impl Default for OutputSection {
    fn default() -> Self {
        Self {
            csv: None,
            plot: false,
            seed: 0,
            strict_tolerance: default_strict_tolerance(),
        }
    }
}

/// Validated scenario ready to simulate.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub name: String,
    pub plant: ContinuousPlant,
    pub constraints: PolytopicConstraints,
    pub weights: CostWeights,
    pub horizon: usize,
    pub tau: f64,
    pub flow: FlowParams,
    pub init: InitMode,
    pub stepper: Stepper,
    pub h_flow: Option<f64>,
    pub erg_enabled: bool,
    pub erg: ErgParams,
    pub terminal: TerminalOptions,
    pub include_terminal_rows: bool,
    pub check_epsilon: f64,
    pub gamma: Vector,
    pub r0: Vector,
    pub xi0: Vector,
    pub t_end: f64,
    pub h_plant: f64,
    pub log_interval: f64,
    pub output: OutputSection,
}

impl ScenarioFile {
    pub fn from_json_str(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    /// Parses a document after applying `key=value` overrides.
    pub fn from_json_with_overrides(text: &str, overrides: &[String]) -> Result<Self> {
        // validate the file itself first so errors carry line and column
        let parsed = Self::from_json_str(text)?;
        if overrides.is_empty() {
            return Ok(parsed);
        }
        let mut value: Value = serde_json::from_str(text)?;
        for ov in overrides {
            apply_override(&mut value, ov)?;
        }
        serde_json::from_value(value).map_err(|e| Error::Scenario(format!("after overrides: {e}")))
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json_with_overrides(&text, overrides)
    }

    pub fn to_json_pretty(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn build(&self) -> Result<Scenario> {
        let bad = |what: &str, e: Error| Error::Scenario(format!("{what}: {e}"));
        let plant = ContinuousPlant::new(
            from_rows(&self.plant.a).map_err(|e| bad("plant.a", e))?,
            from_rows(&self.plant.b).map_err(|e| bad("plant.b", e))?,
            from_rows(&self.plant.c).map_err(|e| bad("plant.c", e))?,
            from_rows(&self.plant.d).map_err(|e| bad("plant.d", e))?,
        )
        .map_err(|e| bad("plant", e))?;
        let (n, m, l) = (plant.n(), plant.m(), plant.l());

        let cs = &self.constraints;
        if !cs.state_box.is_empty() && cs.state_box.len() != n {
            return Err(Error::Scenario(format!("constraints.state_box has {} entries, expected {n}", cs.state_box.len())));
        }
        if !cs.input_box.is_empty() && cs.input_box.len() != m {
            return Err(Error::Scenario(format!("constraints.input_box has {} entries, expected {m}", cs.input_box.len())));
        }
        let to_pairs = |b: &[[Option<f64>; 2]]| -> Vec<(f64, f64)> {
            b.iter()
                .map(|[lo, hi]| (lo.unwrap_or(f64::NEG_INFINITY), hi.unwrap_or(f64::INFINITY)))
                .collect()
        };
        let boxed = PolytopicConstraints::from_boxes(&pad(to_pairs(&cs.state_box), n), &pad(to_pairs(&cs.input_box), m))
            .map_err(|e| bad("constraints", e))?;
        let mut state_rows = boxed.state_rows().to_vec();
        state_rows.extend(cs.state_rows.iter().cloned());
        let mut input_rows = boxed.input_rows().to_vec();
        input_rows.extend(cs.input_rows.iter().cloned());
        let constraints = PolytopicConstraints::new(n, m, state_rows, input_rows).map_err(|e| bad("constraints", e))?;

        let q = from_rows(&self.cost.q).map_err(|e| bad("cost.q", e))?;
        let r = from_rows(&self.cost.r).map_err(|e| bad("cost.r", e))?;
        let u = match &self.cost.u {
            Some(rows) => from_rows(rows).map_err(|e| bad("cost.u", e))?,
            None => Mat::zeros(n, m),
        };
        let weights = CostWeights::new(q, u, r).map_err(|e| bad("cost", e))?;
        if weights.n() != n || weights.m() != m {
            return Err(Error::Scenario("cost matrices do not match the plant dimensions".into()));
        }

        if self.horizon.steps == 0 {
            return Err(Error::Scenario("horizon.steps must be at least 1".into()));
        }
        if !(self.horizon.tau > 0.0) {
            return Err(Error::Scenario("horizon.tau must be positive".into()));
        }
        let flow = FlowParams::new(self.flow.alpha).map_err(|e| bad("flow.alpha", e))?;
        if let Some(h) = self.flow.h_flow {
            if !(h > 0.0) {
                return Err(Error::Scenario("flow.h_flow must be positive".into()));
            }
        }

        let nh = constraints.total();
        if self.erg.delta.len() != nh || self.erg.zeta.len() != nh {
            return Err(Error::Scenario(format!(
                "erg.delta and erg.zeta need one entry per constraint row ({nh}), got {} and {}",
                self.erg.delta.len(),
                self.erg.zeta.len()
            )));
        }
        let w = match &self.erg.w {
            Some(rows) => from_rows(rows).map_err(|e| bad("erg.w", e))?,
            None => Mat::identity(l, l),
        };
        let erg = ErgParams::new(self.erg.kappa, self.erg.eta, self.erg.delta.clone(), self.erg.zeta.clone(), w, self.erg.w_mode)
            .map_err(|e| bad("erg", e))?;

        let vector = |name: &str, v: &[f64], len: usize| -> Result<Vector> {
            if v.len() != len {
                return Err(Error::Scenario(format!("{name} has {} entries, expected {len}", v.len())));
            }
            Ok(Vector::from_vec(v.to_vec()))
        };
        let gamma = vector("gamma", &self.gamma, l)?;
        let r0 = vector("r0", &self.r0, l)?;
        let xi0 = vector("xi0", &self.xi0, n)?;
        if !(self.t_end > 0.0) {
            return Err(Error::Scenario("t_end must be positive".into()));
        }
        if !(self.log_interval > 0.0) {
            return Err(Error::Scenario("log_interval must be positive".into()));
        }
        let h_plant = self.h_plant.unwrap_or(self.horizon.tau / 50.0);
        if !(h_plant > 0.0) {
            return Err(Error::Scenario("h_plant must be positive".into()));
        }
        if !(self.terminal.lyapunov_epsilon > 0.0) {
            return Err(Error::Scenario("terminal.lyapunov_epsilon must be positive".into()));
        }
        Ok(Scenario {
            name: self.name.clone(),
            plant,
            constraints,
            weights,
            horizon: self.horizon.steps,
            tau: self.horizon.tau,
            flow,
            init: self.flow.init,
            stepper: self.flow.stepper,
            h_flow: self.flow.h_flow,
            erg_enabled: self.erg.enabled,
            erg,
            terminal: TerminalOptions {
                lyapunov_epsilon: self.terminal.lyapunov_epsilon,
            },
            include_terminal_rows: self.terminal.include_terminal_rows,
            check_epsilon: self.terminal.check_epsilon,
            gamma,
            r0,
            xi0,
            t_end: self.t_end,
            h_plant,
            log_interval: self.log_interval,
            output: self.output.clone(),
        })
    }
}

fn pad(mut pairs: Vec<(f64, f64)>, len: usize) -> Vec<(f64, f64)> {
    if pairs.is_empty() {
        pairs = vec![(f64::NEG_INFINITY, f64::INFINITY); len];
    }
    pairs
}

/// Applies `a.b.0.c=value`. The value is parsed as JSON and kept as a string
/// when that fails. Every path segment must already exist except the last.
pub fn apply_override(doc: &mut Value, spec: &str) -> Result<()> {
    let (path, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Scenario(format!("override '{spec}' is not of the form key=value")))?;
    let value: Value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let parts: Vec<&str> = path.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Scenario(format!("override key '{path}' has an empty segment")));
    }
    let mut cur = doc;
    for (i, part) in parts.iter().enumerate() {
        let last = i + 1 == parts.len();
        cur = match cur {
            Value::Object(map) => {
                if last {
                    map.insert((*part).to_string(), value);
                    return Ok(());
                }
                map.entry((*part).to_string()).or_insert_with(|| Value::Object(Default::default()))
            }
            Value::Array(items) => {
                let idx: usize = part
                    .parse()
                    .map_err(|_| Error::Scenario(format!("override segment '{part}' must index an array")))?;
                let len = items.len();
                let slot = items
                    .get_mut(idx)
                    .ok_or_else(|| Error::Scenario(format!("override index {idx} out of range ({len} entries)")))?;
                if last {
                    *slot = value;
                    return Ok(());
                }
                slot
            }
            _ => return Err(Error::Scenario(format!("override path '{path}' descends into a scalar"))),
        };
    }
    Ok(())
}
