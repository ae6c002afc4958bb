//! Hyper-parameter spaces and assignments.

use std::collections::BTreeMap;
use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum HpValue {
    Bool(bool),
    Int(i64),
    Real(f64),
    Text(String),
}

impl HpValue {
    pub fn as_f64(&self) -> Option<f64> {
        match self {
            HpValue::Int(i) => Some(*i as f64),
            HpValue::Real(x) => Some(*x),
            _ => None,
        }
    }

    /// Bitwise equality (reals compared by bit pattern).
    pub fn bit_eq(&self, other: &HpValue) -> bool {
        match (self, other) {
            (HpValue::Real(a), HpValue::Real(b)) => a.to_bits() == b.to_bits(),
            _ => self == other,
        }
    }
}

impl fmt::Display for HpValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            HpValue::Bool(b) => write!(f, "{b}"),
            HpValue::Int(i) => write!(f, "{i}"),
            HpValue::Real(x) => write!(f, "{x}"),
            HpValue::Text(s) => write!(f, "{s}"),
        }
    }
}

impl From<f64> for HpValue {
    fn from(x: f64) -> Self {
        HpValue::Real(x)
    }
}

impl From<i64> for HpValue {
    fn from(x: i64) -> Self {
        HpValue::Int(x)
    }
}

impl From<&str> for HpValue {
    fn from(x: &str) -> Self {
        HpValue::Text(x.to_string())
    }
}

impl From<bool> for HpValue {
    fn from(x: bool) -> Self {
        HpValue::Bool(x)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scale {
    #[default]
    Linear,
    Log,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum HpDomain {
    Categorical {
        values: Vec<HpValue>,
    },
    Integer {
        lo: i64,
        hi: i64,
    },
    Real {
        lo: f64,
        hi: f64,
        #[serde(default)]
        scale: Scale,
    },
}

impl HpDomain {
    fn validate(&self, name: &str) -> Result<()> {
        let bad = |reason: &str| {
            Err(Error::BadHyperparam {
                name: name.to_string(),
                reason: reason.to_string(),
            })
        };
        match self {
            HpDomain::Categorical { values } if values.is_empty() => bad("no categorical values"),
            HpDomain::Integer { lo, hi } if lo > hi => bad("lo > hi"),
            HpDomain::Real { lo, hi, .. } if !(lo <= hi) || !lo.is_finite() || !hi.is_finite() => {
                bad("real range must be finite with lo <= hi")
            }
            HpDomain::Real {
                lo,
                scale: Scale::Log,
                ..
            } if *lo <= 0.0 => bad("log scale requires lo > 0"),
            _ => Ok(()),
        }
    }

    pub fn contains(&self, v: &HpValue) -> bool {
        match (self, v) {
            (HpDomain::Categorical { values }, v) => values.iter().any(|c| c.bit_eq(v)),
            (HpDomain::Integer { lo, hi }, HpValue::Int(i)) => lo <= i && i <= hi,
            (HpDomain::Real { lo, hi, .. }, HpValue::Real(x)) => *lo <= *x && *x <= *hi,
            _ => false,
        }
    }

    /// Uniform draw (log-uniform for log-scale reals).
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> HpValue {
        match self {
            HpDomain::Categorical { values } => values[rng.random_range(0..values.len())].clone(),
            HpDomain::Integer { lo, hi } => HpValue::Int(rng.random_range(*lo..=*hi)),
            HpDomain::Real { lo, hi, scale } => {
                if lo == hi {
                    return HpValue::Real(*lo);
                }
                HpValue::Real(match scale {
                    Scale::Linear => rng.random_range(*lo..=*hi),
                    Scale::Log => rng.random_range(lo.ln()..=hi.ln()).exp().clamp(*lo, *hi),
                })
            }
        }
    }

    pub fn is_singleton(&self) -> bool {
        match self {
            HpDomain::Categorical { values } => values.len() == 1,
            HpDomain::Integer { lo, hi } => lo == hi,
            HpDomain::Real { lo, hi, .. } => lo == hi,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HpEntry {
    pub name: String,
    pub domain: HpDomain,
}

/// An ordered, named list of hyper-parameter domains.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct HyperparamSpace {
    entries: Vec<HpEntry>,
}

impl HyperparamSpace {
    pub fn new(entries: Vec<HpEntry>) -> Result<Self> {
        let space = Self { entries };
        space.validate()?;
        Ok(space)
    }

    pub fn builder() -> SpaceBuilder {
        SpaceBuilder::default()
    }

    pub fn validate(&self) -> Result<()> {
        for (i, e) in self.entries.iter().enumerate() {
            if self.entries[..i].iter().any(|o| o.name == e.name) {
                return Err(Error::BadHyperparam {
                    name: e.name.clone(),
                    reason: "duplicate name".into(),
                });
            }
            e.domain.validate(&e.name)?;
        }
        Ok(())
    }

    pub fn entries(&self) -> &[HpEntry] {
        &self.entries
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn domain(&self, name: &str) -> Option<&HpDomain> {
        self.entries.iter().find(|e| e.name == name).map(|e| &e.domain)
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> HyperparamAssignment {
        HyperparamAssignment {
            values: self
                .entries
                .iter()
                .map(|e| (e.name.clone(), e.domain.sample(rng)))
                .collect(),
        }
    }

    /// True iff `h` names exactly these entries and every value is in its domain.
    pub fn contains(&self, h: &HyperparamAssignment) -> bool {
        h.values.len() == self.entries.len()
            && self
                .entries
                .iter()
                .all(|e| h.values.get(&e.name).is_some_and(|v| e.domain.contains(v)))
    }
}

#[derive(Debug, Default)]
pub struct SpaceBuilder {
    entries: Vec<HpEntry>,
}

impl SpaceBuilder {
    pub fn categorical(mut self, name: &str, values: Vec<HpValue>) -> Self {
        self.entries.push(HpEntry {
            name: name.into(),
            domain: HpDomain::Categorical { values },
        });
        self
    }

    pub fn integer(mut self, name: &str, lo: i64, hi: i64) -> Self {
        self.entries.push(HpEntry {
            name: name.into(),
            domain: HpDomain::Integer { lo, hi },
        });
        self
    }

    pub fn real(mut self, name: &str, lo: f64, hi: f64) -> Self {
        self.entries.push(HpEntry {
            name: name.into(),
            domain: HpDomain::Real {
                lo,
                hi,
                scale: Scale::Linear,
            },
        });
        self
    }

    pub fn log_real(mut self, name: &str, lo: f64, hi: f64) -> Self {
        self.entries.push(HpEntry {
            name: name.into(),
            domain: HpDomain::Real {
                lo,
                hi,
                scale: Scale::Log,
            },
        });
        self
    }

    pub fn build(self) -> Result<HyperparamSpace> {
        HyperparamSpace::new(self.entries)
    }
}

/// A concrete choice of hyper-parameter values, keyed by name.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct HyperparamAssignment {
    pub values: BTreeMap<String, HpValue>,
}

impl HyperparamAssignment {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with(mut self, name: &str, v: impl Into<HpValue>) -> Self {
        self.values.insert(name.to_string(), v.into());
        self
    }

    pub fn get(&self, name: &str) -> Option<&HpValue> {
        self.values.get(name)
    }

    pub fn bit_eq(&self, other: &Self) -> bool {
        self.values.len() == other.values.len()
            && self
                .values
                .iter()
                .zip(&other.values)
                .all(|((ka, va), (kb, vb))| ka == kb && va.bit_eq(vb))
    }

    fn wrong(name: &str, want: &str, got: &HpValue) -> Error {
        Error::BadHyperparam {
            name: name.into(),
            reason: format!("expected {want}, got {got}"),
        }
    }

    pub fn f64_or(&self, name: &str, default: f64) -> Result<f64> {
        match self.values.get(name) {
            None => Ok(default),
            Some(v) => v.as_f64().ok_or_else(|| Self::wrong(name, "a number", v)),
        }
    }

    pub fn usize_or(&self, name: &str, default: usize) -> Result<usize> {
        match self.values.get(name) {
            None => Ok(default),
            Some(HpValue::Int(i)) if *i >= 0 => Ok(*i as usize),
            Some(HpValue::Real(x)) if *x >= 0.0 && x.fract() == 0.0 => Ok(*x as usize),
            Some(v) => Err(Self::wrong(name, "a non-negative integer", v)),
        }
    }

    pub fn str_or<'a>(&'a self, name: &str, default: &'a str) -> Result<&'a str> {
        match self.values.get(name) {
            None => Ok(default),
            Some(HpValue::Text(s)) => Ok(s),
            Some(v) => Err(Self::wrong(name, "a string", v)),
        }
    }

    pub fn bool_or(&self, name: &str, default: bool) -> Result<bool> {
        match self.values.get(name) {
            None => Ok(default),
            Some(HpValue::Bool(b)) => Ok(*b),
            Some(v) => Err(Self::wrong(name, "a boolean", v)),
        }
    }

    /// Fails on any key outside `known`.
    pub fn check_known(&self, known: &[&str]) -> Result<()> {
        match self.values.keys().find(|k| !known.contains(&k.as_str())) {
            Some(k) => Err(Error::UnknownHyperparam(k.clone())),
            None => Ok(()),
        }
    }
}
