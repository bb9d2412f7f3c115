//! Numbers produced by estimators: exact integers when every weight is an
//! integer, floating point otherwise.

use std::fmt;

/// Largest magnitude at which an `f64` still represents every integer.
pub(crate) const F64_EXACT_INT: f64 = 9_007_199_254_740_992.0;

#[derive(Clone, Copy, Debug)]
pub enum Value {
    Int(i64),
    Real(f64),
}

impl Value {
    pub const ZERO: Value = Value::Int(0);

    pub fn to_f64(self) -> f64 {
        match self {
            Value::Int(v) => v as f64,
            Value::Real(v) => v,
        }
    }

    pub fn is_int(self) -> bool {
        matches!(self, Value::Int(_))
    }

    pub fn as_int(self) -> Option<i64> {
        match self {
            Value::Int(v) => Some(v),
            Value::Real(_) => None,
        }
    }

    /// Equality that is exact between integers and within `tol` (absolute or
    /// relative, whichever is looser) otherwise.
    pub fn approx_eq(self, other: Value, tol: f64) -> bool {
        match (self, other) {
            (Value::Int(a), Value::Int(b)) => a == b,
            (a, b) => close(a.to_f64(), b.to_f64(), tol),
        }
    }
}

pub(crate) fn close(a: f64, b: f64, tol: f64) -> bool {
    let diff = (a - b).abs();
    diff <= tol || diff <= tol * a.abs().max(b.abs())
}

/// `v` as an `i64` if it is an integer an `f64` represents exactly.
pub(crate) fn exact_int(v: f64) -> Option<i64> {
    if v.fract() == 0.0 && v.abs() < F64_EXACT_INT {
        Some(v as i64)
    } else {
        None
    }
}

/// Stays exact while both sides are integers and nothing overflows.
impl std::ops::Add for Value {
    type Output = Value;

    fn add(self, other: Value) -> Value {
        match (self, other) {
            (Value::Int(a), Value::Int(b)) => match a.checked_add(b) {
                Some(s) => Value::Int(s),
                None => Value::Real(a as f64 + b as f64),
            },
            (a, b) => Value::Real(a.to_f64() + b.to_f64()),
        }
    }
}

impl PartialEq for Value {
    fn eq(&self, other: &Self) -> bool {
        match (*self, *other) {
            (Value::Int(a), Value::Int(b)) => a == b,
            (a, b) => a.to_f64() == b.to_f64(),
        }
    }
}

impl From<i64> for Value {
    fn from(v: i64) -> Self {
        Value::Int(v)
    }
}

impl From<f64> for Value {
    fn from(v: f64) -> Self {
        Value::Real(v)
    }
}

impl fmt::Display for Value {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Value::Int(v) => write!(f, "{v}"),
            Value::Real(v) => write!(f, "{v:?}"),
        }
    }
}
