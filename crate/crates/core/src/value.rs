//! Runtime values flowing through full runs, converters and solvers.

use crate::types::{Dim, SemanticType};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Atom {
    pub z: f64,
    pub pos: [f64; 3],
    pub vel: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Value {
    Scalar(f64),
    Tensor { shape: Vec<usize>, data: Vec<f64> },
    List(Vec<Value>),
    Atom(Atom),
    Image { h: usize, w: usize, c: usize, data: Vec<f64> },
    Label { k: usize, class: usize },
    Tuple(Vec<Value>),
}

impl Value {
    pub fn vector(data: Vec<f64>) -> Value {
        Value::Tensor { shape: vec![data.len()], data }
    }

    /// Does this value inhabit `ty`? Wildcard dims accept any size.
    pub fn conforms(&self, ty: &SemanticType) -> bool {
        let dim_ok = |d: &Dim, n: usize| match d {
            Dim::Wild => true,
            Dim::Fixed(v) => *v as usize == n,
        };
        match (self, ty) {
            (Value::Scalar(_), SemanticType::Scalar { .. }) => true,
            (Value::Tensor { shape, data }, SemanticType::Tensor { shape: want }) => {
                shape.len() == want.len()
                    && shape.iter().zip(want).all(|(n, d)| dim_ok(d, *n))
                    && shape.iter().product::<usize>() == data.len()
            }
            (Value::List(items), SemanticType::List { elem }) => items.iter().all(|v| v.conforms(elem)),
            (Value::Atom(_), SemanticType::Atom) => true,
            (Value::Image { h, w, c, data }, SemanticType::Image { h: th, w: tw, c: tc }) => {
                dim_ok(th, *h) && dim_ok(tw, *w) && dim_ok(tc, *c) && h * w * c == data.len()
            }
            (Value::Label { k, class }, SemanticType::Label { k: tk }) => dim_ok(tk, *k) && class < k,
            (Value::Tuple(items), SemanticType::Tuple { items: tys }) => {
                items.len() == tys.len() && items.iter().zip(tys).all(|(v, t)| v.conforms(t))
            }
            _ => false,
        }
    }

    /// Human-readable type of the value, used in diagnostics.
    pub fn type_name(&self) -> String {
        match self {
            Value::Scalar(_) => "Scalar".into(),
            Value::Tensor { shape, .. } => format!(
                "Tensor[{}]",
                shape.iter().map(|d| d.to_string()).collect::<Vec<_>>().join(",")
            ),
            Value::List(items) => match items.first() {
                Some(v) => format!("List[{}]", v.type_name()),
                None => "List[?]".into(),
            },
            Value::Atom(_) => "Atom".into(),
            Value::Image { h, w, c, .. } => format!("Image[{h},{w},{c}]"),
            Value::Label { k, .. } => format!("Label[{k}]"),
            Value::Tuple(items) => format!(
                "Tuple[{}]",
                items.iter().map(Value::type_name).collect::<Vec<_>>().join(",")
            ),
        }
    }

    /// Flat numeric encoding handed to solvers. Labels become one-hot rows,
    /// atoms `[z, pos, vel]`.
    pub fn features(&self) -> Vec<f64> {
        let mut out = Vec::new();
        self.write_features(&mut out);
        out
    }

    fn write_features(&self, out: &mut Vec<f64>) {
        match self {
            Value::Scalar(v) => out.push(*v),
            Value::Tensor { data, .. } | Value::Image { data, .. } => out.extend_from_slice(data),
            Value::Label { k, class } => {
                out.extend((0..*k).map(|i| if i == *class { 1.0 } else { 0.0 }))
            }
            Value::Atom(a) => {
                out.push(a.z);
                out.extend_from_slice(&a.pos);
                out.extend_from_slice(&a.vel);
            }
            Value::List(items) | Value::Tuple(items) => {
                items.iter().for_each(|v| v.write_features(out))
            }
        }
    }

    /// Rebuilds a value with the same structure as `self` from a flat
    /// feature vector (the inverse of [`Value::features`] for numeric kinds).
    pub fn with_features(&self, flat: &[f64]) -> Option<Value> {
        let mut pos = 0;
        let v = self.rebuild(flat, &mut pos)?;
        (pos == flat.len()).then_some(v)
    }

    fn rebuild(&self, flat: &[f64], pos: &mut usize) -> Option<Value> {
        let mut take = |n: usize| -> Option<Vec<f64>> {
            let s = flat.get(*pos..*pos + n)?.to_vec();
            *pos += n;
            Some(s)
        };
        Some(match self {
            Value::Scalar(_) => Value::Scalar(take(1)?[0]),
            Value::Tensor { shape, data } => Value::Tensor { shape: shape.clone(), data: take(data.len())? },
            Value::Image { h, w, c, data } => {
                Value::Image { h: *h, w: *w, c: *c, data: take(data.len())? }
            }
            Value::Label { .. } => return None,
            Value::Atom(_) => {
                let s = take(7)?;
                Value::Atom(Atom { z: s[0], pos: [s[1], s[2], s[3]], vel: [s[4], s[5], s[6]] })
            }
            Value::List(items) => {
                Value::List(items.iter().map(|v| v.rebuild(flat, pos)).collect::<Option<_>>()?)
            }
            Value::Tuple(items) => {
                Value::Tuple(items.iter().map(|v| v.rebuild(flat, pos)).collect::<Option<_>>()?)
            }
        })
    }

    pub fn as_list(&self) -> Option<&[Value]> {
        match self {
            Value::List(v) => Some(v),
            _ => None,
        }
    }
}
