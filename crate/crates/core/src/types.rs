//! Domain types shared by the solver, sampler and auditor.

use serde::{Deserialize, Serialize};

use crate::error::{BalanceError, Result};

/// One labeled record: sensitive-attribute indicators `s`, label indicators `y`
/// and a positive utility `u`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Example {
    pub id: String,
    pub s: Vec<u8>,
    pub y: Vec<u8>,
    #[serde(default = "default_utility")]
    pub u: f64,
}

pub(crate) fn default_utility() -> f64 {
    1.0
}

impl Example {
    pub fn new(id: impl Into<String>, s: Vec<u8>, y: Vec<u8>, u: f64) -> Self {
        Self {
            id: id.into(),
            s,
            y,
            u,
        }
    }
}

/// Problem definition: target prevalences and constraint tolerances.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BalanceSpec {
    /// Number of sensitive attributes.
    pub m: usize,
    /// Number of labels. Zero means representation constraints only.
    pub c: usize,
    /// Target prevalence per attribute.
    pub pi: Vec<f64>,
    /// Association tolerance.
    pub eps_d: f64,
    /// Representation tolerance.
    pub eps_r: f64,
    /// Optional row-major (attribute outer, label inner) mask of active
    /// association pairs. `None` constrains every pair.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub assoc_mask: Option<Vec<bool>>,
}

impl BalanceSpec {
    pub fn new(pi: Vec<f64>, c: usize, eps_d: f64, eps_r: f64) -> Result<Self> {
        let spec = Self {
            m: pi.len(),
            c,
            pi,
            eps_d,
            eps_r,
            assoc_mask: None,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Restrict association constraints to the pairs flagged in `mask`.
    pub fn with_assoc_mask(mut self, mask: Vec<bool>) -> Result<Self> {
        self.assoc_mask = Some(mask);
        self.validate()?;
        Ok(self)
    }

    /// Restrict association constraints to the listed attributes (all labels).
    pub fn with_assoc_attrs(self, attrs: &[usize]) -> Result<Self> {
        let (m, c) = (self.m, self.c);
        if let Some(&bad) = attrs.iter().find(|&&k| k >= m) {
            return Err(BalanceError::InvalidSpec(format!(
                "association attribute {bad} out of range (m = {m})"
            )));
        }
        let mut mask = vec![false; m * c];
        for &k in attrs {
            mask[k * c..(k + 1) * c].iter_mut().for_each(|b| *b = true);
        }
        self.with_assoc_mask(mask)
    }

    pub fn validate(&self) -> Result<()> {
        if self.m == 0 {
            return Err(BalanceError::InvalidSpec("need at least one attribute".into()));
        }
        if self.pi.len() != self.m {
            return Err(BalanceError::DimensionMismatch {
                what: "pi",
                got: self.pi.len(),
                expected: self.m,
            });
        }
        if let Some(p) = self.pi.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(BalanceError::InvalidSpec(format!("target {p} outside [0, 1]")));
        }
        for (name, eps) in [("eps_d", self.eps_d), ("eps_r", self.eps_r)] {
            if !(0.0..1.0).contains(&eps) {
                return Err(BalanceError::InvalidSpec(format!("{name} = {eps} outside [0, 1)")));
            }
        }
        if let Some(mask) = &self.assoc_mask {
            if mask.len() != self.m * self.c {
                return Err(BalanceError::DimensionMismatch {
                    what: "assoc_mask",
                    got: mask.len(),
                    expected: self.m * self.c,
                });
            }
        }
        Ok(())
    }

    /// Length of the bias vector, `2m(c+1)`.
    pub fn bias_len(&self) -> usize {
        2 * self.m * (self.c + 1)
    }

    pub fn pair_active(&self, k: usize, r: usize) -> bool {
        self.assoc_mask
            .as_ref()
            .is_none_or(|mask| mask[k * self.c + r])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    /// `tau0 / sqrt(t)`.
    #[default]
    InverseSqrt,
    Constant,
}

impl std::str::FromStr for Schedule {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "inverse_sqrt" | "inverse-sqrt" | "invsqrt" => Ok(Self::InverseSqrt),
            "constant" => Ok(Self::Constant),
            other => Err(format!("unknown schedule '{other}' (expected inverse_sqrt or constant)")),
        }
    }
}

/// Solver hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hyperparams {
    /// Average weight; the subsampling rate when `q_max = 1`.
    pub eta: f64,
    /// Maximum weight.
    pub q_max: f64,
    /// Enforcement level on the bias hinges; bounds the dual variables.
    pub v_level: f64,
    /// Base learning rate.
    pub tau0: f64,
    #[serde(default)]
    pub schedule: Schedule,
}

impl Hyperparams {
    pub const DEFAULT_TAU0: f64 = 0.1;

    pub fn new(eta: f64, q_max: f64, v_level: f64) -> Result<Self> {
        let hp = Self {
            eta,
            q_max,
            v_level,
            tau0: Self::DEFAULT_TAU0,
            schedule: Schedule::InverseSqrt,
        };
        hp.validate()?;
        Ok(hp)
    }

    pub fn with_tau0(mut self, tau0: f64) -> Result<Self> {
        self.tau0 = tau0;
        self.validate()?;
        Ok(self)
    }

    pub fn with_schedule(mut self, schedule: Schedule) -> Self {
        self.schedule = schedule;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let finite_pos = |x: f64| x.is_finite() && x > 0.0;
        if !finite_pos(self.eta) || !finite_pos(self.q_max) || self.eta > self.q_max {
            return Err(BalanceError::InvalidHyperparams(format!(
                "need 0 < eta <= q_max, got eta = {}, q_max = {}",
                self.eta, self.q_max
            )));
        }
        if !finite_pos(self.v_level) {
            return Err(BalanceError::InvalidHyperparams(format!(
                "enforcement level must be positive, got {}",
                self.v_level
            )));
        }
        if !finite_pos(self.tau0) {
            return Err(BalanceError::InvalidHyperparams(format!(
                "tau0 must be positive, got {}",
                self.tau0
            )));
        }
        Ok(())
    }

    /// Learning rate for the update taken at step counter `t`.
    pub fn learning_rate(&self, t: u64) -> f64 {
        match self.schedule {
            Schedule::InverseSqrt => self.tau0 / (t.max(1) as f64).sqrt(),
            Schedule::Constant => self.tau0,
        }
    }
}

/// Dual variables of the balancing problem plus the problem they belong to.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverState {
    /// Multipliers of the bias constraints, each in `[0, v_level]`.
    pub v: Vec<f64>,
    /// Multiplier of the mean-weight constraint.
    pub mu: f64,
    /// Number of updates applied so far.
    pub t: u64,
    pub spec: BalanceSpec,
    pub hp: Hyperparams,
}

impl SolverState {
    pub fn new(spec: BalanceSpec, hp: Hyperparams) -> Result<Self> {
        spec.validate()?;
        hp.validate()?;
        Ok(Self {
            v: vec![0.0; spec.bias_len()],
            mu: 0.0,
            t: 0,
            spec,
            hp,
        })
    }
}

/// An example together with its weight and hinge multipliers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightedExample {
    pub example: Example,
    pub q: f64,
    pub alpha: f64,
    pub beta: f64,
    pub kept: bool,
}

/// Checks `e` against the invariants of `spec` and hands it back unchanged.
pub fn validate_example(e: Example, spec: &BalanceSpec) -> Result<Example> {
    if e.s.len() != spec.m {
        return Err(BalanceError::DimensionMismatch {
            what: "s",
            got: e.s.len(),
            expected: spec.m,
        });
    }
    if e.y.len() != spec.c {
        return Err(BalanceError::DimensionMismatch {
            what: "y",
            got: e.y.len(),
            expected: spec.c,
        });
    }
    check_binary("s", &e.s)?;
    check_binary("y", &e.y)?;
    if !(e.u.is_finite() && e.u > 0.0) {
        return Err(BalanceError::NonPositiveUtility(e.u));
    }
    Ok(e)
}

fn check_binary(what: &'static str, xs: &[u8]) -> Result<()> {
    match xs.iter().position(|&x| x > 1) {
        Some(index) => Err(BalanceError::NonBinaryEntry {
            what,
            index,
            value: f64::from(xs[index]),
        }),
        None => Ok(()),
    }
}
