//! The computation tape recorded by a dry run.

use crate::sail::ast::Literal;
use crate::sail::Span;
use crate::types::SemanticType;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Arg {
    Node(usize),
    Lit(Literal),
    Type(SemanticType),
    Unknown,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TapeNode {
    pub id: usize,
    pub prim: String,
    pub args: Vec<Arg>,
    /// Result type, when the primitive produces a typed value.
    pub ty: Option<SemanticType>,
    /// (input, output) types for task and prediction nodes.
    pub io: Option<(SemanticType, SemanticType)>,
    pub span: Span,
}

impl TapeNode {
    pub fn object(&self) -> &str {
        self.prim.split('.').next().unwrap_or("")
    }

    pub fn method(&self) -> &str {
        self.prim.split('.').nth(1).unwrap_or("")
    }

    pub fn literal_args(&self) -> Vec<Option<&Literal>> {
        self.args
            .iter()
            .map(|a| match a {
                Arg::Lit(l) => Some(l),
                _ => None,
            })
            .collect()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TapeGraph {
    pub nodes: Vec<TapeNode>,
}

impl TapeGraph {
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Data-dependency edges `(source, consumer)`.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for n in &self.nodes {
            for a in &n.args {
                if let Arg::Node(src) = a {
                    out.push((*src, n.id));
                }
            }
        }
        out
    }

    pub fn is_topological(&self) -> bool {
        self.nodes.iter().enumerate().all(|(i, n)| n.id == i)
            && self.edges().iter().all(|(a, b)| a < b)
    }

    pub fn node(&self, id: usize) -> Option<&TapeNode> {
        self.nodes.get(id)
    }

    pub fn consumers(&self, id: usize) -> impl Iterator<Item = &TapeNode> {
        self.nodes.iter().filter(move |n| n.args.contains(&Arg::Node(id)))
    }

    pub fn by_object<'a>(&'a self, object: &'a str) -> impl Iterator<Item = &'a TapeNode> {
        self.nodes.iter().filter(move |n| n.object() == object)
    }
}
