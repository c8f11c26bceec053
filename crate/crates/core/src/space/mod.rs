//! Conditional search spaces: the DSL, structural codes, flat subspaces and
//! configuration sampling.
//!
//! A space is a forest of hyperparameters. Choice- and int-kind
//! hyperparameters may carry a `submodule`: under a choice the submodule maps
//! each activating literal to its child hyperparameters, under an int the
//! children are replicated once per unit of the sampled value. Every joint
//! assignment of these structure-determining variables is one flat
//! [`Subspace`].

mod codec;
mod enumerate;
pub mod fixtures;
mod parse;
pub(crate) mod sample;
mod yaml;

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub use codec::{config_from_json, config_to_json, deserialize_config, serialize_config};
pub use sample::normalize_value;

/// Upper bound on the number of enumerated subspaces.
pub const MAX_SUBSPACES: usize = 100_000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SpaceError {
    #[error("syntax error at {line}:{col}: {msg}")]
    Syntax { line: usize, col: usize, msg: String },
    #[error("unknown kind `{kind}` at {line}:{col}")]
    UnknownKind { line: usize, col: usize, kind: String },
    #[error("submodule key `{key}` at {line}:{col} is not in the range of `{param}`")]
    BadChildKey {
        line: usize,
        col: usize,
        key: String,
        param: String,
    },
    #[error("empty range for `{param}` at {line}:{col}")]
    EmptyRange { line: usize, col: usize, param: String },
    #[error("duplicate name `{name}` at {line}:{col}")]
    DuplicateName { line: usize, col: usize, name: String },
    #[error("invalid definition at {line}:{col}: {msg}")]
    Invalid { line: usize, col: usize, msg: String },
    #[error("space expands to more than {MAX_SUBSPACES} subspaces")]
    TooManySubspaces,
    #[error("invalid subspace id {0}")]
    InvalidSubspace(usize),
    #[error("value {value} out of range for `{key}`")]
    OutOfRange { key: String, value: String },
    #[error("unknown hyperparameter `{0}`")]
    UnknownHyperparameter(String),
    #[error("missing hyperparameter `{0}`")]
    MissingHyperparameter(String),
    #[error("malformed configuration: {0}")]
    Malformed(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamKind {
    Choice,
    Int,
    Float,
    PowerInt2,
}

impl fmt::Display for ParamKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ParamKind::Choice => "choice",
            ParamKind::Int => "int",
            ParamKind::Float => "float",
            ParamKind::PowerInt2 => "powerint2",
        })
    }
}

/// A literal hyperparameter value.
#[derive(Debug, Clone, PartialEq)]
pub enum Value {
    Int(i64),
    Float(f64),
    Text(String),
}

impl Value {
    /// Interprets a DSL literal; quoted literals are always text.
    pub fn from_literal(text: &str, quoted: bool) -> Value {
        if !quoted {
            if let Ok(i) = text.parse::<i64>() {
                return Value::Int(i);
            }
            if let Ok(x) = text.parse::<f64>() {
                if x.is_finite() {
                    return Value::Float(x);
                }
            }
        }
        Value::Text(text.to_string())
    }

    pub fn as_f64(&self) -> Option<f64> {
        match self {
            Value::Int(i) => Some(*i as f64),
            Value::Float(x) => Some(*x),
            Value::Text(_) => None,
        }
    }

    pub fn to_json(&self) -> serde_json::Value {
        match self {
            Value::Int(i) => serde_json::Value::from(*i),
            Value::Float(x) => serde_json::Number::from_f64(*x)
                .map(serde_json::Value::Number)
                .unwrap_or(serde_json::Value::Null),
            Value::Text(s) => serde_json::Value::String(s.clone()),
        }
    }

    pub fn from_json(v: &serde_json::Value) -> Option<Value> {
        match v {
            serde_json::Value::Number(n) => n
                .as_i64()
                .map(Value::Int)
                .or_else(|| n.as_f64().map(Value::Float)),
            serde_json::Value::String(s) => Some(Value::Text(s.clone())),
            _ => None,
        }
    }
}

impl fmt::Display for Value {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Value::Int(i) => write!(f, "{i}"),
            Value::Float(x) => write!(f, "{x}"),
            Value::Text(s) => write!(f, "{s:?}"),
        }
    }
}

/// Domain of a hyperparameter. Int and powerint2 bounds are `[lo, hi)`,
/// float bounds are `[lo, hi]`. A powerint2 value is `2^e` with `e` in the
/// exponent bounds.
#[derive(Debug, Clone, PartialEq)]
pub enum Domain {
    Choice(Vec<Value>),
    Int { lo: i64, hi: i64 },
    Float { lo: f64, hi: f64 },
    PowerInt2 { lo: i64, hi: i64 },
}

impl Domain {
    pub fn kind(&self) -> ParamKind {
        match self {
            Domain::Choice(_) => ParamKind::Choice,
            Domain::Int { .. } => ParamKind::Int,
            Domain::Float { .. } => ParamKind::Float,
            Domain::PowerInt2 { .. } => ParamKind::PowerInt2,
        }
    }

    /// True for domains with finitely many values.
    pub fn is_discrete(&self) -> bool {
        !matches!(self, Domain::Float { .. })
    }

    pub fn contains(&self, v: &Value) -> bool {
        normalize_value(self, v).is_ok()
    }
}

/// Children attached through a `submodule`.
#[derive(Debug, Clone, PartialEq)]
pub enum Children {
    None,
    /// Choice parent: activating literal → child hyperparameters, in document order.
    Branches(Vec<(Value, Vec<HyperparamSpec>)>),
    /// Int parent: children replicated once per unit of the parent's value.
    Replicated(Vec<HyperparamSpec>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct HyperparamSpec {
    pub name: String,
    pub domain: Domain,
    pub children: Children,
}

impl HyperparamSpec {
    pub fn kind(&self) -> ParamKind {
        self.domain.kind()
    }

    pub fn is_structural(&self) -> bool {
        !matches!(self.children, Children::None)
    }
}

/// One scalar position of a subspace.
#[derive(Debug, Clone, PartialEq)]
pub struct Slot {
    /// Key in a configuration's raw map: `name`, or `name[i]` for replicas.
    pub key: String,
    pub name: String,
    pub domain: Domain,
    pub index: u32,
    /// Name of the structure-determining hyperparameter that activated this slot.
    pub father: Option<String>,
    pub id_code: u32,
    pub idx_code: u32,
    pub father_code: u32,
    /// Fixed value for the decision variables of the subspace.
    pub fixed: Option<Value>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Subspace {
    /// 1-based.
    pub id: usize,
    pub decisions: BTreeMap<String, Value>,
    pub slots: Vec<Slot>,
}

impl Subspace {
    pub fn dimension(&self) -> usize {
        self.slots.len()
    }

    pub fn free_slots(&self) -> impl Iterator<Item = &Slot> {
        self.slots.iter().filter(|s| s.fixed.is_none())
    }
}

/// Structural codes and normalized value of one hyperparameter occurrence.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Token {
    pub id_code: u32,
    pub idx_code: u32,
    pub father_code: u32,
    pub norm_value: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Configuration {
    pub subspace_id: usize,
    pub tokens: Vec<Token>,
    pub raw: BTreeMap<String, Value>,
}

#[derive(Debug, Clone)]
pub struct SearchSpace {
    pub roots: Vec<HyperparamSpec>,
    /// Identity codes `1..=M`, assigned in depth-first pre-order of first occurrence.
    pub id_codes: BTreeMap<String, u32>,
    pub subspaces: Vec<Subspace>,
    pub source_text: String,
    /// Largest replica index any slot can carry.
    pub max_index: u32,
}

impl SearchSpace {
    pub fn parse(document: &str) -> Result<SearchSpace, SpaceError> {
        let roots = parse::parse_specs(document)?;
        let mut id_codes = BTreeMap::new();
        let mut max_index = 0;
        assign_codes(&roots, &mut id_codes, &mut max_index);
        let subspaces = enumerate::enumerate(&roots, &id_codes)?;
        Ok(SearchSpace {
            roots,
            id_codes,
            subspaces,
            source_text: document.to_string(),
            max_index,
        })
    }

    /// Number of distinct identity codes, `M`.
    pub fn n_identities(&self) -> usize {
        self.id_codes.len()
    }

    pub fn subspace(&self, id: usize) -> Result<&Subspace, SpaceError> {
        id.checked_sub(1)
            .and_then(|i| self.subspaces.get(i))
            .ok_or(SpaceError::InvalidSubspace(id))
    }

    /// Hex SHA-256 of the source document.
    pub fn fingerprint(&self) -> String {
        let digest = Sha256::digest(self.source_text.as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Builds a configuration of `subspace_id` from raw values, validating
    /// that exactly the subspace's slots are present and in range.
    pub fn make_config(
        &self,
        subspace_id: usize,
        mut raw: BTreeMap<String, Value>,
    ) -> Result<Configuration, SpaceError> {
        let sub = self.subspace(subspace_id)?;
        if let Some(extra) = raw.keys().find(|k| !sub.slots.iter().any(|s| &s.key == *k)) {
            return Err(SpaceError::UnknownHyperparameter(extra.clone()));
        }
        let mut tokens = Vec::with_capacity(sub.slots.len());
        for slot in &sub.slots {
            let v = raw
                .get_mut(&slot.key)
                .ok_or_else(|| SpaceError::MissingHyperparameter(slot.key.clone()))?;
            if let (Domain::Float { .. }, Value::Int(i)) = (&slot.domain, &*v) {
                *v = Value::Float(*i as f64);
            }
            let v = &*v;
            if let Some(fixed) = &slot.fixed {
                if !values_match(fixed, v) {
                    return Err(SpaceError::OutOfRange {
                        key: slot.key.clone(),
                        value: v.to_string(),
                    });
                }
            }
            tokens.push(sample::token_for(slot, v)?);
        }
        Ok(Configuration {
            subspace_id,
            tokens,
            raw,
        })
    }

    /// Finds the subspace whose decisions agree with `raw` and whose slot
    /// keys are exactly the keys of `raw`.
    pub fn locate(&self, raw: &BTreeMap<String, Value>) -> Option<usize> {
        self.subspaces
            .iter()
            .find(|s| {
                s.slots.len() == raw.len()
                    && s.slots.iter().all(|slot| match (raw.get(&slot.key), &slot.fixed) {
                        (Some(v), Some(f)) => values_match(f, v),
                        (Some(_), None) => true,
                        (None, _) => false,
                    })
            })
            .map(|s| s.id)
    }
}

pub(crate) fn values_match(a: &Value, b: &Value) -> bool {
    match (a, b) {
        (Value::Text(x), Value::Text(y)) => x == y,
        (Value::Text(_), _) | (_, Value::Text(_)) => false,
        _ => a.as_f64() == b.as_f64(),
    }
}

fn assign_codes(specs: &[HyperparamSpec], codes: &mut BTreeMap<String, u32>, max_index: &mut u32) {
    for spec in specs {
        let next = codes.len() as u32 + 1;
        codes.entry(spec.name.clone()).or_insert(next);
        match &spec.children {
            Children::None => {}
            Children::Branches(branches) => {
                for (_, kids) in branches {
                    assign_codes(kids, codes, max_index);
                }
            }
            Children::Replicated(kids) => {
                if let Domain::Int { hi, .. } = spec.domain {
                    *max_index = (*max_index).max((hi - 1).max(0) as u32);
                }
                assign_codes(kids, codes, max_index);
            }
        }
    }
}
