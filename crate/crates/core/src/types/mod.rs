//! Semantic types, unification and converter-chain search.

pub mod convert;

use crate::sail::ast::{DimExpr, TypeExpr};
use crate::sail::parser::{parse_type_expr, ParseError};
use serde::{Deserialize, Serialize};
use std::fmt;
use thiserror::Error;

pub use convert::{
    apply_chain, pullback_chain, Chain, ConversionError, ConversionStep, ConverterEdge,
    ConverterGraph, ConverterKernel, KernelRegistry, NoPath,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Dim {
    Fixed(u64),
    Wild,
}

impl fmt::Display for Dim {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Dim::Fixed(v) => write!(f, "{v}"),
            Dim::Wild => f.write_str("?"),
        }
    }
}

impl From<DimExpr> for Dim {
    fn from(d: DimExpr) -> Dim {
        match d {
            DimExpr::Fixed(v) => Dim::Fixed(v),
            DimExpr::Wild => Dim::Wild,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SemanticType {
    Scalar { unit: String },
    Tensor { shape: Vec<Dim> },
    List { elem: Box<SemanticType> },
    Atom,
    Image { h: Dim, w: Dim, c: Dim },
    Label { k: Dim },
    Tuple { items: Vec<SemanticType> },
}

impl SemanticType {
    pub fn scalar() -> SemanticType {
        SemanticType::Scalar { unit: String::new() }
    }

    pub fn tensor(dims: &[Option<u64>]) -> SemanticType {
        SemanticType::Tensor {
            shape: dims.iter().map(|d| d.map(Dim::Fixed).unwrap_or(Dim::Wild)).collect(),
        }
    }

    pub fn vector(n: u64) -> SemanticType {
        SemanticType::Tensor { shape: vec![Dim::Fixed(n)] }
    }

    pub fn list(elem: SemanticType) -> SemanticType {
        SemanticType::List { elem: Box::new(elem) }
    }

    pub fn label(k: u64) -> SemanticType {
        SemanticType::Label { k: Dim::Fixed(k) }
    }

    pub fn parse(text: &str) -> Result<SemanticType, ParseError> {
        parse_type_expr(text).map(SemanticType::from)
    }

    /// True when no wildcard dimension remains anywhere in the type.
    pub fn is_ground(&self) -> bool {
        let g = |d: &Dim| matches!(d, Dim::Fixed(_));
        match self {
            SemanticType::Scalar { .. } | SemanticType::Atom => true,
            SemanticType::Tensor { shape } => shape.iter().all(g),
            SemanticType::List { elem } => elem.is_ground(),
            SemanticType::Image { h, w, c } => g(h) && g(w) && g(c),
            SemanticType::Label { k } => g(k),
            SemanticType::Tuple { items } => items.iter().all(SemanticType::is_ground),
        }
    }

    /// Number of scalar elements in one value of this type, if static.
    pub fn element_count(&self) -> Option<u64> {
        let f = |d: &Dim| match d {
            Dim::Fixed(v) => Some(*v),
            Dim::Wild => None,
        };
        match self {
            SemanticType::Scalar { .. } => Some(1),
            SemanticType::Atom => Some(7),
            SemanticType::Tensor { shape } => shape.iter().map(f).product(),
            SemanticType::Image { h, w, c } => Some(f(h)? * f(w)? * f(c)?),
            SemanticType::Label { k } => f(k),
            SemanticType::List { .. } => None,
            SemanticType::Tuple { items } => items.iter().map(SemanticType::element_count).sum(),
        }
    }
}

impl From<TypeExpr> for SemanticType {
    fn from(t: TypeExpr) -> SemanticType {
        match t {
            TypeExpr::Scalar => SemanticType::scalar(),
            TypeExpr::Atom => SemanticType::Atom,
            TypeExpr::Tensor(d) => SemanticType::Tensor { shape: d.into_iter().map(Dim::from).collect() },
            TypeExpr::List(inner) => SemanticType::list((*inner).into()),
            TypeExpr::Image(h, w, c) => SemanticType::Image { h: h.into(), w: w.into(), c: c.into() },
            TypeExpr::Label(k) => SemanticType::Label { k: k.into() },
        }
    }
}

impl From<&TypeExpr> for SemanticType {
    fn from(t: &TypeExpr) -> SemanticType {
        t.clone().into()
    }
}

impl fmt::Display for SemanticType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let join = |d: &[Dim]| d.iter().map(Dim::to_string).collect::<Vec<_>>().join(",");
        match self {
            SemanticType::Scalar { unit } if unit.is_empty() => f.write_str("Scalar"),
            SemanticType::Scalar { unit } => write!(f, "Scalar<{unit}>"),
            SemanticType::Tensor { shape } => write!(f, "Tensor[{}]", join(shape)),
            SemanticType::List { elem } => write!(f, "List[{elem}]"),
            SemanticType::Atom => f.write_str("Atom"),
            SemanticType::Image { h, w, c } => write!(f, "Image[{h},{w},{c}]"),
            SemanticType::Label { k } => write!(f, "Label[{k}]"),
            SemanticType::Tuple { items } => write!(
                f,
                "Tuple[{}]",
                items.iter().map(|t| t.to_string()).collect::<Vec<_>>().join(",")
            ),
        }
    }
}

impl Serialize for Side {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(match self {
            Side::Left => "left",
            Side::Right => "right",
        })
    }
}

/// Which operand of [`unify`] a wildcard binding belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Left,
    Right,
}

impl Side {
    fn flip(self) -> Side {
        match self {
            Side::Left => Side::Right,
            Side::Right => Side::Left,
        }
    }
}

/// One wildcard resolved to a concrete dimension, addressed by its
/// structural path (e.g. `shape[0]`, `elem.k`).
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct DimBinding {
    pub path: String,
    pub side: Side,
    pub value: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Substitution {
    pub bindings: Vec<DimBinding>,
    /// The most specific type compatible with both operands.
    pub unified: SemanticType,
}

impl Substitution {
    pub fn is_empty(&self) -> bool {
        self.bindings.is_empty()
    }

    /// The same substitution seen from `unify(b, a)`.
    pub fn flipped(&self) -> Substitution {
        Substitution {
            bindings: self
                .bindings
                .iter()
                .map(|b| DimBinding { side: b.side.flip(), ..b.clone() })
                .collect(),
            unified: self.unified.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("type mismatch at `{path}`: {left} vs {right}")]
pub struct Mismatch {
    pub path: String,
    pub left: String,
    pub right: String,
}

/// Structural unification of two semantic types.
pub fn unify(a: &SemanticType, b: &SemanticType) -> Result<Substitution, Mismatch> {
    let mut bindings = Vec::new();
    let unified = unify_at(a, b, "", &mut bindings)?;
    Ok(Substitution { bindings, unified })
}

fn join(path: &str, seg: &str) -> String {
    if path.is_empty() {
        seg.to_string()
    } else {
        format!("{path}.{seg}")
    }
}

fn unify_dim(a: Dim, b: Dim, path: String, out: &mut Vec<DimBinding>) -> Result<Dim, Mismatch> {
    match (a, b) {
        (Dim::Wild, Dim::Wild) => Ok(Dim::Wild),
        (Dim::Wild, Dim::Fixed(v)) => {
            out.push(DimBinding { path, side: Side::Left, value: v });
            Ok(Dim::Fixed(v))
        }
        (Dim::Fixed(v), Dim::Wild) => {
            out.push(DimBinding { path, side: Side::Right, value: v });
            Ok(Dim::Fixed(v))
        }
        (Dim::Fixed(x), Dim::Fixed(y)) if x == y => Ok(Dim::Fixed(x)),
        (x, y) => Err(Mismatch { path, left: x.to_string(), right: y.to_string() }),
    }
}

fn unify_at(
    a: &SemanticType,
    b: &SemanticType,
    path: &str,
    out: &mut Vec<DimBinding>,
) -> Result<SemanticType, Mismatch> {
    use SemanticType as T;
    let mismatch = || Mismatch {
        path: if path.is_empty() { "<root>".into() } else { path.into() },
        left: a.to_string(),
        right: b.to_string(),
    };
    Ok(match (a, b) {
        (T::Scalar { unit: u }, T::Scalar { unit: v }) => {
            if u.is_empty() || v.is_empty() || u == v {
                T::Scalar { unit: if u.is_empty() { v.clone() } else { u.clone() } }
            } else {
                return Err(mismatch());
            }
        }
        (T::Atom, T::Atom) => T::Atom,
        (T::Tensor { shape: x }, T::Tensor { shape: y }) => {
            if x.len() != y.len() {
                return Err(mismatch());
            }
            let shape = x
                .iter()
                .zip(y)
                .enumerate()
                .map(|(i, (p, q))| unify_dim(*p, *q, join(path, &format!("shape[{i}]")), out))
                .collect::<Result<_, _>>()?;
            T::Tensor { shape }
        }
        (T::List { elem: x }, T::List { elem: y }) => {
            T::List { elem: Box::new(unify_at(x, y, &join(path, "elem"), out)?) }
        }
        (T::Image { h, w, c }, T::Image { h: h2, w: w2, c: c2 }) => T::Image {
            h: unify_dim(*h, *h2, join(path, "h"), out)?,
            w: unify_dim(*w, *w2, join(path, "w"), out)?,
            c: unify_dim(*c, *c2, join(path, "c"), out)?,
        },
        (T::Label { k }, T::Label { k: k2 }) => T::Label { k: unify_dim(*k, *k2, join(path, "k"), out)? },
        (T::Tuple { items: x }, T::Tuple { items: y }) => {
            if x.len() != y.len() {
                return Err(mismatch());
            }
            let items = x
                .iter()
                .zip(y)
                .enumerate()
                .map(|(i, (p, q))| unify_at(p, q, &join(path, &i.to_string()), out))
                .collect::<Result<_, _>>()?;
            T::Tuple { items }
        }
        _ => return Err(mismatch()),
    })
}
