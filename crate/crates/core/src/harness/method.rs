use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::constraints::ConstraintSet;
use crate::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackboneKind {
    Tabular,
    Heuristic,
}

impl fmt::Display for BackboneKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BackboneKind::Tabular => "tabular",
            BackboneKind::Heuristic => "heuristic",
        })
    }
}

impl FromStr for BackboneKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "tabular" => Ok(BackboneKind::Tabular),
            "heuristic" => Ok(BackboneKind::Heuristic),
            _ => Err(Error::Parse(format!("unknown backbone `{s}`"))),
        }
    }
}

/// One compared method: a backbone plus its safety layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSpec {
    pub name: String,
    pub backbone: BackboneKind,
    pub shield_enabled: bool,
    pub constraint_set: ConstraintSet,
    pub lambda: f64,
    /// Thresholds frozen at the mid-level entry and `tau = d / T`.
    pub fixed_constraints: bool,
}

impl MethodSpec {
    pub fn unconstrained(backbone: BackboneKind) -> Self {
        Self {
            name: "unconstrained".into(),
            backbone,
            shield_enabled: false,
            constraint_set: ConstraintSet::NONE,
            lambda: 0.0,
            fixed_constraints: false,
        }
    }

    pub fn fixed(backbone: BackboneKind, lambda: f64) -> Self {
        Self {
            name: "fixed".into(),
            backbone,
            shield_enabled: true,
            constraint_set: ConstraintSet { cb: true, as_: false, sh: true },
            lambda,
            fixed_constraints: true,
        }
    }

    pub fn adaptive(backbone: BackboneKind, set: ConstraintSet, lambda: f64) -> Self {
        Self {
            name: set.to_string(),
            backbone,
            shield_enabled: true,
            constraint_set: set,
            lambda,
            fixed_constraints: false,
        }
    }

    pub fn named(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }

    pub fn validate(&self) -> Result<(), Error> {
        if self.lambda < 0.0 || !self.lambda.is_finite() {
            return Err(Error::Config(format!("method {}: lambda must be finite and non-negative", self.name)));
        }
        if self.constraint_set.is_empty() && (self.shield_enabled || self.lambda != 0.0) {
            return Err(Error::Config(format!("method {}: an unconstrained method has no shield and lambda 0", self.name)));
        }
        if self.shield_enabled && self.constraint_set.is_empty() {
            return Err(Error::Config(format!("method {}: shield without constraints", self.name)));
        }
        if self.fixed_constraints && self.constraint_set != (ConstraintSet { cb: true, as_: false, sh: true }) {
            return Err(Error::Config(format!("method {}: fixed constraints are CB+SH", self.name)));
        }
        Ok(())
    }

    /// File-name friendly form of the method name.
    pub fn slug(&self) -> String {
        self.name.chars().map(|c| if c.is_ascii_alphanumeric() || c == '_' { c } else { '-' }).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constructors_are_valid() {
        MethodSpec::unconstrained(BackboneKind::Tabular).validate().unwrap();
        MethodSpec::fixed(BackboneKind::Tabular, 5.0).validate().unwrap();
        for s in ConstraintSet::non_empty_subsets() {
            MethodSpec::adaptive(BackboneKind::Heuristic, s, 5.0).validate().unwrap();
        }
    }

    #[test]
    fn invariants_enforced() {
        let mut m = MethodSpec::unconstrained(BackboneKind::Tabular);
        m.lambda = 1.0;
        assert!(m.validate().is_err());
        let mut m = MethodSpec::fixed(BackboneKind::Tabular, 5.0);
        m.constraint_set = ConstraintSet::FULL;
        assert!(m.validate().is_err());
    }

    #[test]
    fn slugs() {
        assert_eq!(MethodSpec::adaptive(BackboneKind::Tabular, ConstraintSet::FULL, 5.0).slug(), "CB-AS-SH");
    }
}
