//! Scalar values, the value type lattice and coercion rules shared by every
//! layer of the highway.

use std::cmp::Ordering;
use std::fmt;
use std::hash::{Hash, Hasher};
use std::str::FromStr;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ValueType {
    Boolean,
    Integer,
    Decimal,
    Text,
    Timestamp,
}

impl ValueType {
    pub fn as_str(self) -> &'static str {
        match self {
            ValueType::Boolean => "BOOLEAN",
            ValueType::Integer => "INTEGER",
            ValueType::Decimal => "DECIMAL",
            ValueType::Text => "TEXT",
            ValueType::Timestamp => "TIMESTAMP",
        }
    }

    pub fn is_numeric(self) -> bool {
        matches!(self, ValueType::Integer | ValueType::Decimal)
    }

    /// Position on the chain BOOLEAN < INTEGER < DECIMAL < TEXT. TIMESTAMP
    /// sits beside the chain and only meets TEXT.
    fn rank(self) -> Option<u8> {
        match self {
            ValueType::Boolean => Some(1),
            ValueType::Integer => Some(2),
            ValueType::Decimal => Some(3),
            ValueType::Text => Some(4),
            ValueType::Timestamp => None,
        }
    }

    /// Least upper bound of two types.
    pub fn lub(self, other: ValueType) -> ValueType {
        if self == other {
            return self;
        }
        match (self.rank(), other.rank()) {
            (Some(a), Some(b)) => {
                if a >= b {
                    self
                } else {
                    other
                }
            }
            _ => ValueType::Text,
        }
    }

    /// Least upper bound where `None` stands for the bottom (all-null) type.
    pub fn lub_opt(a: Option<ValueType>, b: Option<ValueType>) -> Option<ValueType> {
        match (a, b) {
            (None, x) | (x, None) => x,
            (Some(a), Some(b)) => Some(a.lub(b)),
        }
    }

    /// True when every value of `self` can be represented in `target`.
    pub fn widens_to(self, target: ValueType) -> bool {
        self.lub(target) == target
    }
}

impl fmt::Display for ValueType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ValueType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "BOOLEAN" => Ok(ValueType::Boolean),
            "INTEGER" => Ok(ValueType::Integer),
            "DECIMAL" => Ok(ValueType::Decimal),
            "TEXT" => Ok(ValueType::Text),
            "TIMESTAMP" => Ok(ValueType::Timestamp),
            other => Err(Error::Type(format!("unknown value type {other:?}"))),
        }
    }
}

/// A single scalar cell.
#[derive(Debug, Clone)]
pub enum Value {
    Null,
    Bool(bool),
    Int(i64),
    Dec(f64),
    Text(String),
    Timestamp(String),
}

impl Value {
    pub fn is_null(&self) -> bool {
        matches!(self, Value::Null)
    }

    pub fn value_type(&self) -> Option<ValueType> {
        match self {
            Value::Null => None,
            Value::Bool(_) => Some(ValueType::Boolean),
            Value::Int(_) => Some(ValueType::Integer),
            Value::Dec(_) => Some(ValueType::Decimal),
            Value::Text(_) => Some(ValueType::Text),
            Value::Timestamp(_) => Some(ValueType::Timestamp),
        }
    }

    pub fn as_f64(&self) -> Option<f64> {
        match self {
            Value::Int(i) => Some(*i as f64),
            Value::Dec(d) => Some(*d),
            _ => None,
        }
    }

    /// Text rendering used by `||`, casts to TEXT and widening to TEXT.
    pub fn render(&self) -> Option<String> {
        match self {
            Value::Null => None,
            Value::Bool(b) => Some(b.to_string()),
            Value::Int(i) => Some(i.to_string()),
            Value::Dec(d) => Some(format_decimal(*d)),
            Value::Text(t) | Value::Timestamp(t) => Some(t.clone()),
        }
    }

    /// Converts a value into `target` along the widening lattice. Narrowing
    /// conversions are refused.
    pub fn widen_to(&self, target: ValueType) -> Result<Value> {
        let Some(from) = self.value_type() else {
            return Ok(Value::Null);
        };
        if from == target {
            return Ok(self.clone());
        }
        if !from.widens_to(target) {
            return Err(Error::Type(format!("cannot widen {from} value to {target}")));
        }
        Ok(match (self, target) {
            (Value::Bool(b), ValueType::Integer) => Value::Int(*b as i64),
            (Value::Bool(b), ValueType::Decimal) => Value::Dec(if *b { 1.0 } else { 0.0 }),
            (Value::Int(i), ValueType::Decimal) => Value::Dec(*i as f64),
            (v, ValueType::Text) => Value::Text(v.render().unwrap_or_default()),
            _ => unreachable!("widening pairs are exhaustive"),
        })
    }

    /// Explicit conversion used by `cast`; failures yield null.
    pub fn cast_to(&self, target: ValueType) -> Value {
        if self.is_null() {
            return Value::Null;
        }
        if let Ok(v) = self.widen_to(target) {
            return v;
        }
        match (self, target) {
            (Value::Dec(d), ValueType::Integer) if d.is_finite() => {
                let t = d.trunc();
                if t >= i64::MIN as f64 && t <= i64::MAX as f64 {
                    Value::Int(t as i64)
                } else {
                    Value::Null
                }
            }
            (Value::Int(i), ValueType::Boolean) => Value::Bool(*i != 0),
            (Value::Text(t), ty) | (Value::Timestamp(t), ty) => {
                parse_text_as(t, ty).unwrap_or(Value::Null)
            }
            _ => Value::Null,
        }
    }

    pub fn to_json(&self) -> serde_json::Value {
        match self {
            Value::Null => serde_json::Value::Null,
            Value::Bool(b) => serde_json::Value::Bool(*b),
            Value::Int(i) => serde_json::Value::from(*i),
            Value::Dec(d) => serde_json::Number::from_f64(*d)
                .map(serde_json::Value::Number)
                .unwrap_or(serde_json::Value::Null),
            Value::Text(t) | Value::Timestamp(t) => serde_json::Value::String(t.clone()),
        }
    }

    /// Reads a JSON cell written by [`Value::to_json`] back under a declared type.
    pub fn from_json_typed(json: &serde_json::Value, ty: ValueType) -> Result<Value> {
        let raw = json_to_value(json);
        match raw {
            Value::Null => Ok(Value::Null),
            v => coerce_observed(&v, ty),
        }
    }
}

/// Coerces an observed value into a declared type. Text is parsed; other
/// values must widen.
pub fn coerce_observed(v: &Value, ty: ValueType) -> Result<Value> {
    match v {
        Value::Null => Ok(Value::Null),
        Value::Text(t) if ty != ValueType::Text => parse_text_as(t, ty)
            .ok_or_else(|| Error::Type(format!("{t:?} is not a valid {ty}"))),
        Value::Timestamp(t) if ty == ValueType::Timestamp => Ok(Value::Timestamp(t.clone())),
        other => other.widen_to(ty),
    }
}

/// Untyped JSON to value: integers stay integers, strings keep text unless
/// they have timestamp shape, nested structures become their JSON text.
pub fn json_to_value(json: &serde_json::Value) -> Value {
    match json {
        serde_json::Value::Null => Value::Null,
        serde_json::Value::Bool(b) => Value::Bool(*b),
        serde_json::Value::Number(n) => match n.as_i64() {
            Some(i) => Value::Int(i),
            None => Value::Dec(n.as_f64().unwrap_or(f64::NAN)),
        },
        serde_json::Value::String(s) => {
            if is_timestamp(s) {
                Value::Timestamp(s.clone())
            } else {
                Value::Text(s.clone())
            }
        }
        other => Value::Text(other.to_string()),
    }
}

pub fn format_decimal(d: f64) -> String {
    if d.is_finite() && d.fract() == 0.0 && d.abs() < 1e15 {
        format!("{d:.1}")
    } else {
        d.to_string()
    }
}

fn timestamp_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(
            r"^\d{4}-\d{2}-\d{2}([T ]\d{2}:\d{2}(:\d{2}(\.\d{1,9})?)?(Z|[+-]\d{2}:?\d{2})?)?$",
        )
        .expect("static regex")
    })
}

fn integer_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"^[+-]?\d+$").expect("static regex"))
}

fn decimal_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(r"^[+-]?(\d+\.\d*|\.\d+|\d+)([eE][+-]?\d+)?$").expect("static regex")
    })
}

pub fn is_timestamp(s: &str) -> bool {
    timestamp_re().is_match(s)
}

/// Classifies one textual cell: empty means null, otherwise the narrowest
/// type whose syntax matches.
pub fn classify_text(s: &str) -> Option<ValueType> {
    if s.is_empty() {
        return None;
    }
    if s == "true" || s == "false" {
        return Some(ValueType::Boolean);
    }
    if integer_re().is_match(s) && s.parse::<i64>().is_ok() {
        return Some(ValueType::Integer);
    }
    if decimal_re().is_match(s) {
        return Some(ValueType::Decimal);
    }
    if is_timestamp(s) {
        return Some(ValueType::Timestamp);
    }
    Some(ValueType::Text)
}

/// Parses text under a declared type; `None` when the text does not fit.
pub fn parse_text_as(s: &str, ty: ValueType) -> Option<Value> {
    match ty {
        ValueType::Text => Some(Value::Text(s.to_string())),
        ValueType::Boolean => match s {
            "true" => Some(Value::Bool(true)),
            "false" => Some(Value::Bool(false)),
            _ => None,
        },
        ValueType::Integer => match s {
            "true" => Some(Value::Int(1)),
            "false" => Some(Value::Int(0)),
            _ if integer_re().is_match(s) => s.parse::<i64>().ok().map(Value::Int),
            _ => None,
        },
        ValueType::Decimal => match s {
            "true" => Some(Value::Dec(1.0)),
            "false" => Some(Value::Dec(0.0)),
            _ if decimal_re().is_match(s) => s.parse::<f64>().ok().map(Value::Dec),
            _ => None,
        },
        ValueType::Timestamp => is_timestamp(s).then(|| Value::Timestamp(s.to_string())),
    }
}

impl PartialEq for Value {
    fn eq(&self, other: &Self) -> bool {
        match (self, other) {
            (Value::Null, Value::Null) => true,
            (Value::Bool(a), Value::Bool(b)) => a == b,
            (Value::Int(a), Value::Int(b)) => a == b,
            (Value::Dec(a), Value::Dec(b)) => canonical_bits(*a) == canonical_bits(*b),
            (Value::Text(a), Value::Text(b)) => a == b,
            (Value::Timestamp(a), Value::Timestamp(b)) => a == b,
            _ => false,
        }
    }
}

impl Eq for Value {}

fn canonical_bits(d: f64) -> u64 {
    if d == 0.0 {
        0
    } else if d.is_nan() {
        f64::NAN.to_bits()
    } else {
        d.to_bits()
    }
}

impl Hash for Value {
    fn hash<H: Hasher>(&self, state: &mut H) {
        std::mem::discriminant(self).hash(state);
        match self {
            Value::Null => {}
            Value::Bool(b) => b.hash(state),
            Value::Int(i) => i.hash(state),
            Value::Dec(d) => canonical_bits(*d).hash(state),
            Value::Text(t) | Value::Timestamp(t) => t.hash(state),
        }
    }
}

impl Value {
    fn type_rank(&self) -> u8 {
        match self {
            Value::Bool(_) => 0,
            Value::Int(_) | Value::Dec(_) => 1,
            Value::Text(_) => 2,
            Value::Timestamp(_) => 3,
            Value::Null => 4,
        }
    }
}

/// Total order used for sorting: values ascend, nulls last; numbers compare
/// across INTEGER and DECIMAL.
impl Ord for Value {
    fn cmp(&self, other: &Self) -> Ordering {
        match (self, other) {
            (Value::Null, Value::Null) => Ordering::Equal,
            (Value::Bool(a), Value::Bool(b)) => a.cmp(b),
            (Value::Int(a), Value::Int(b)) => a.cmp(b),
            (Value::Text(a), Value::Text(b)) => a.cmp(b),
            (Value::Timestamp(a), Value::Timestamp(b)) => a.cmp(b),
            (a, b) if a.type_rank() == 1 && b.type_rank() == 1 => {
                let (x, y) = (a.as_f64().unwrap(), b.as_f64().unwrap());
                x.total_cmp(&y)
                    .then_with(|| matches!(a, Value::Dec(_)).cmp(&matches!(b, Value::Dec(_))))
            }
            (a, b) => a.type_rank().cmp(&b.type_rank()),
        }
    }
}

impl PartialOrd for Value {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl fmt::Display for Value {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.render() {
            Some(s) => f.write_str(&s),
            None => f.write_str("null"),
        }
    }
}
