//! Dry-run and full-run evaluation of module bodies.
//!
//! A dry run binds every data source to a single symbolic element, walks both
//! arms of conditions it cannot decide, and records each primitive call on a
//! tape. Metadata (tasks, I/O types, environment tag, ...) is read off that
//! tape. A full run executes the same body over real data and emits one
//! event per `Train`/`Test`/`Gradient` call.

pub mod tape;

use crate::data::{DataBindings, DataError, GeneratorRegistry, SourceCall, SYNTHETIC};
use crate::sail::ast::*;
use crate::sail::printer::render_expr;
use crate::sail::Span;
use crate::types::SemanticType;
use crate::value::Value;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::rc::Rc;
pub use tape::{Arg, TapeGraph, TapeNode};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EvalError {
    #[error("{span}: unbound identifier `{name}`")]
    Unbound { name: String, span: Span },
    #[error("{span}: {message}")]
    Type { message: String, span: Span },
    #[error("{span}: foreach must iterate a data source or Data.range")]
    NotASource { span: Span },
    #[error("{span}: unknown primitive `{name}`")]
    UnknownPrimitive { name: String, span: Span },
    #[error("{span}: no field `{field}` on {on}")]
    MissingField { field: String, on: String, span: Span },
    #[error("{span}: `{name}` takes {want} argument(s), got {got}")]
    Arity { name: String, want: String, got: usize, span: Span },
    #[error("{span}: condition cannot be decided during a full run")]
    Indeterminate { span: Span },
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum FullRunError {
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("{span}: {reason}")]
    Failed { reason: String, span: Span },
    #[error("dry run failed: {0}")]
    DryRunFailed(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum InferenceError {
    #[error("tape has no task or prediction nodes")]
    NoIoNodes,
    #[error("ambiguous I/O types: {0} vs {1}")]
    Ambiguous(String, String),
}

/// A data source seen during a dry run. `n` is unknown when it depends on a
/// hyperparameter that is still symbolic.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceInfo {
    pub node: usize,
    pub generator: String,
    pub split: String,
    pub n: Option<usize>,
    pub input: SemanticType,
    pub output: SemanticType,
    /// Primitives consuming elements of this source.
    pub feeds: BTreeSet<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Relationship {
    pub kind: ModuleKind,
    pub name: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModuleMetadata {
    pub kind: ModuleKind,
    pub name: String,
    pub field: Option<String>,
    pub tasks: BTreeSet<String>,
    pub input: Option<SemanticType>,
    pub output: Option<SemanticType>,
    pub suggestions: BTreeMap<String, Vec<Literal>>,
    pub relationships: Vec<Relationship>,
    pub meta: BTreeMap<String, Literal>,
    /// Parameter values that were concrete during the run.
    pub params: BTreeMap<String, Literal>,
    pub tag: Option<String>,
    /// At least one `Train.*` call is on the tape.
    pub trains: bool,
    pub sources: Vec<SourceInfo>,
    /// (src, dst) declared by a converter body.
    pub convert: Option<(SemanticType, SemanticType)>,
    pub returned: Option<String>,
    pub failed: bool,
    pub reason: Option<String>,
}

impl ModuleMetadata {
    fn empty(m: &ModuleDecl) -> ModuleMetadata {
        ModuleMetadata {
            kind: m.kind,
            name: m.name.clone(),
            field: m.meta_str("field").map(String::from),
            tasks: BTreeSet::new(),
            input: None,
            output: None,
            suggestions: m
                .params
                .iter()
                .filter_map(|p| p.suggest.clone().map(|s| (p.name.clone(), s)))
                .collect(),
            relationships: m.requires.iter().map(|r| Relationship { kind: r.kind, name: r.name.clone() }).collect(),
            meta: m.meta.clone(),
            params: BTreeMap::new(),
            tag: None,
            trains: false,
            sources: Vec::new(),
            convert: None,
            returned: None,
            failed: false,
            reason: None,
        }
    }

    pub fn meta_f64(&self, key: &str) -> Option<f64> {
        self.meta.get(key).and_then(|l| match l {
            Literal::Num(v) => Some(*v),
            Literal::Bool(b) => Some(*b as u8 as f64),
            Literal::Str(_) => None,
        })
    }

    pub fn meta_bool(&self, key: &str) -> Option<bool> {
        self.meta.get(key).and_then(Literal::as_bool)
    }

    pub fn meta_str(&self, key: &str) -> Option<&str> {
        self.meta.get(key).and_then(Literal::as_str)
    }
}

/// Metadata of earlier tuple members plus this module's parameter bindings.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EvalContext {
    pub stack: Vec<ModuleMetadata>,
    pub params: BTreeMap<String, Literal>,
    pub seed: u64,
}

impl EvalContext {
    pub fn new(seed: u64) -> EvalContext {
        EvalContext { seed, ..EvalContext::default() }
    }

    pub fn find(&self, kind: ModuleKind) -> Option<&ModuleMetadata> {
        self.stack.iter().rev().find(|m| m.kind == kind)
    }

    pub fn with(&self, m: ModuleMetadata) -> EvalContext {
        let mut c = self.clone();
        c.stack.push(m);
        c
    }
}

/// One executed `Train`/`Test`/`Gradient` call.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrimitiveEvent {
    pub node: usize,
    pub prim: String,
    pub args: Vec<Value>,
    pub iter: usize,
}

impl PrimitiveEvent {
    pub fn object(&self) -> &str {
        self.prim.split('.').next().unwrap_or("")
    }

    pub fn method(&self) -> &str {
        self.prim.split('.').nth(1).unwrap_or("")
    }

    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("events serialize")
    }
}

#[derive(Debug, Clone, PartialEq)]
enum EVal {
    Num(f64),
    Bool(bool),
    Str(String),
    Type(SemanticType),
    Record(Rc<BTreeMap<String, EVal>>),
    /// A typed value whose contents are not known (dry runs).
    Sym { ty: SemanticType, node: Option<usize> },
    /// A concrete data value (full runs).
    Data { v: Value, node: Option<usize> },
    Source { node: usize, call: SourceCall, n: Option<usize> },
    Range(Option<u64>),
    Unknown { node: Option<usize> },
}

impl EVal {
    fn unknown() -> EVal {
        EVal::Unknown { node: None }
    }

    fn describe(&self) -> String {
        match self {
            EVal::Num(_) => "number".into(),
            EVal::Bool(_) => "bool".into(),
            EVal::Str(_) => "string".into(),
            EVal::Type(_) => "type".into(),
            EVal::Record(_) => "record".into(),
            EVal::Sym { ty, .. } => format!("symbolic {ty}"),
            EVal::Data { v, .. } => v.type_name(),
            EVal::Source { .. } => "data source".into(),
            EVal::Range(_) => "range".into(),
            EVal::Unknown { .. } => "unknown".into(),
        }
    }

    fn is_unknown(&self) -> bool {
        matches!(self, EVal::Unknown { .. } | EVal::Sym { .. })
    }

    fn node(&self) -> Option<usize> {
        match self {
            EVal::Sym { node, .. } | EVal::Data { node, .. } | EVal::Unknown { node } => *node,
            EVal::Source { node, .. } => Some(*node),
            _ => None,
        }
    }

    /// Semantic type of a value-like operand, if it has one.
    fn sem_type(&self) -> Option<SemanticType> {
        match self {
            EVal::Sym { ty, .. } => Some(ty.clone()),
            EVal::Num(_) => Some(SemanticType::scalar()),
            EVal::Data { v, .. } => value_type(v),
            _ => None,
        }
    }

    fn as_num(&self) -> Option<f64> {
        match self {
            EVal::Num(v) => Some(*v),
            EVal::Data { v: Value::Scalar(x), .. } => Some(*x),
            _ => None,
        }
    }

    fn from_literal(l: &Literal) -> EVal {
        match l {
            Literal::Num(v) => EVal::Num(*v),
            Literal::Str(s) => EVal::Str(s.clone()),
            Literal::Bool(b) => EVal::Bool(*b),
        }
    }

    fn to_arg(&self) -> Arg {
        match self {
            EVal::Num(v) => Arg::Lit(Literal::Num(*v)),
            EVal::Bool(b) => Arg::Lit(Literal::Bool(*b)),
            EVal::Str(s) => Arg::Lit(Literal::Str(s.clone())),
            EVal::Type(t) => Arg::Type(t.clone()),
            other => match other.node() {
                Some(n) => Arg::Node(n),
                None => match other.sem_type() {
                    Some(t) => Arg::Type(t),
                    None => Arg::Unknown,
                },
            },
        }
    }
}

/// Best-effort static type of a runtime value (lists take their first
/// element's type).
pub fn value_type(v: &Value) -> Option<SemanticType> {
    use crate::types::Dim;
    Some(match v {
        Value::Scalar(_) => SemanticType::scalar(),
        Value::Tensor { shape, .. } => {
            SemanticType::Tensor { shape: shape.iter().map(|d| Dim::Fixed(*d as u64)).collect() }
        }
        Value::List(items) => SemanticType::list(value_type(items.first()?)?),
        Value::Atom(_) => SemanticType::Atom,
        Value::Image { h, w, c, .. } => SemanticType::Image {
            h: Dim::Fixed(*h as u64),
            w: Dim::Fixed(*w as u64),
            c: Dim::Fixed(*c as u64),
        },
        Value::Label { k, .. } => SemanticType::label(*k as u64),
        Value::Tuple(items) => {
            SemanticType::Tuple { items: items.iter().map(value_type).collect::<Option<_>>()? }
        }
    })
}

fn record_of(m: &ModuleMetadata) -> EVal {
    let mut r: BTreeMap<String, EVal> =
        m.meta.iter().map(|(k, v)| (k.clone(), EVal::from_literal(v))).collect();
    r.insert("name".into(), EVal::Str(m.name.clone()));
    r.insert("kind".into(), EVal::Str(m.kind.keyword().into()));
    r.insert("trains".into(), EVal::Bool(m.trains));
    r.insert("failed".into(), EVal::Bool(m.failed));
    if let Some(f) = &m.field {
        r.insert("field".into(), EVal::Str(f.clone()));
    }
    if let Some(t) = &m.tag {
        r.insert("tag".into(), EVal::Str(t.clone()));
    }
    if let Some(t) = &m.input {
        r.insert("input".into(), EVal::Type(t.clone()));
    }
    if let Some(t) = &m.output {
        r.insert("output".into(), EVal::Type(t.clone()));
    }
    EVal::Record(Rc::new(r))
}

enum Flow {
    Normal,
    Fail { reason: String, span: Span },
    Return(String),
}

struct Interp<'a> {
    module: &'a ModuleDecl,
    ctx: &'a EvalContext,
    data: Option<&'a dyn DataBindings>,
    generators: GeneratorRegistry,
    scopes: Vec<HashMap<String, EVal>>,
    tape: Vec<TapeNode>,
    /// Call-site offset -> node id, taken from the dry run in full runs.
    sites: HashMap<usize, usize>,
    events: Vec<PrimitiveEvent>,
    iters: Vec<usize>,
    declared_input: Option<SemanticType>,
    tag: Option<String>,
    convert: Option<(SemanticType, SemanticType)>,
    sources: Vec<SourceInfo>,
    params: BTreeMap<String, Literal>,
}

impl<'a> Interp<'a> {
    fn new(module: &'a ModuleDecl, ctx: &'a EvalContext, data: Option<&'a dyn DataBindings>) -> Interp<'a> {
        Interp {
            module,
            ctx,
            data,
            generators: GeneratorRegistry::builtin(),
            scopes: vec![HashMap::new()],
            tape: Vec::new(),
            sites: HashMap::new(),
            events: Vec::new(),
            iters: Vec::new(),
            declared_input: None,
            tag: None,
            convert: None,
            sources: Vec::new(),
            params: BTreeMap::new(),
        }
    }

    fn full(&self) -> bool {
        self.data.is_some()
    }

    fn lookup(&mut self, name: &str, span: Span) -> Result<EVal, EvalError> {
        for s in self.scopes.iter().rev() {
            if let Some(v) = s.get(name) {
                return Ok(v.clone());
            }
        }
        let Some(p) = self.module.param(name) else {
            return Err(EvalError::Unbound { name: name.into(), span });
        };
        if let Some(v) = self.ctx.params.get(name) {
            self.params.insert(name.into(), v.clone());
            return Ok(EVal::from_literal(v));
        }
        // suggested parameters stay symbolic until a grid point binds them
        if p.suggest.is_some() && !self.full() {
            return Ok(EVal::unknown());
        }
        match (&p.default, &p.suggest) {
            (Some(d), _) => {
                self.params.insert(name.into(), d.clone());
                Ok(EVal::from_literal(d))
            }
            (None, Some(s)) if self.full() => {
                self.params.insert(name.into(), s[0].clone());
                Ok(EVal::from_literal(&s[0]))
            }
            _ if !self.full() => Ok(EVal::unknown()),
            _ => Err(EvalError::Unbound { name: name.into(), span }),
        }
    }

    fn record(
        &mut self,
        call: &Call,
        args: &[EVal],
        ty: Option<SemanticType>,
        io: Option<(SemanticType, SemanticType)>,
    ) -> usize {
        if self.full() {
            return self.sites.get(&call.span.offset).copied().unwrap_or(usize::MAX);
        }
        let id = self.tape.len();
        self.tape.push(TapeNode {
            id,
            prim: call.qualified(),
            args: args.iter().map(EVal::to_arg).collect(),
            ty,
            io,
            span: call.span,
        });
        id
    }

    fn block(&mut self, stmts: &[Stmt]) -> Result<Flow, FullRunError> {
        self.scopes.push(HashMap::new());
        let r = self.stmts(stmts);
        self.scopes.pop();
        r
    }

    fn stmts(&mut self, stmts: &[Stmt]) -> Result<Flow, FullRunError> {
        for s in stmts {
            match self.stmt(s)? {
                Flow::Normal => {}
                other => return Ok(other),
            }
        }
        Ok(Flow::Normal)
    }

    fn stmt(&mut self, s: &Stmt) -> Result<Flow, FullRunError> {
        match &s.kind {
            StmtKind::Let { name, value } => {
                let v = self.expr(value)?;
                self.scopes.last_mut().expect("scope").insert(name.clone(), v);
            }
            StmtKind::Call(c) => {
                self.call(c)?;
            }
            StmtKind::Return(e) => {
                let v = self.expr(e)?;
                let shown = match v {
                    EVal::Num(x) => Literal::Num(x).to_string(),
                    EVal::Str(x) => Literal::Str(x).to_string(),
                    EVal::Bool(x) => x.to_string(),
                    EVal::Type(t) => t.to_string(),
                    _ => render_expr(e),
                };
                return Ok(Flow::Return(shown));
            }
            StmtKind::FailWhen { cond, reason } => {
                let c = self.expr(cond)?;
                let fire = match c {
                    EVal::Bool(b) => b,
                    ref v if v.is_unknown() => false,
                    other => return Err(type_err(format!("fail condition is {}", other.describe()), cond.span).into()),
                };
                if fire {
                    let reason = reason.clone().unwrap_or_else(|| format!("fail when {}", render_expr(cond)));
                    return Ok(Flow::Fail { reason, span: s.span });
                }
            }
            StmtKind::If { cond, then, otherwise } => {
                let c = self.expr(cond)?;
                match c {
                    EVal::Bool(true) => return self.block(then),
                    EVal::Bool(false) => {
                        if let Some(b) = otherwise {
                            return self.block(b);
                        }
                    }
                    ref v if v.is_unknown() => {
                        if self.full() {
                            return Err(EvalError::Indeterminate { span: cond.span }.into());
                        }
                        // undecidable: both arms go on the tape
                        if let f @ (Flow::Fail { .. } | Flow::Return(_)) = self.block(then)? {
                            return Ok(f);
                        }
                        if let Some(b) = otherwise {
                            return self.block(b);
                        }
                    }
                    other => return Err(type_err(format!("if condition is {}", other.describe()), cond.span).into()),
                }
            }
            StmtKind::ForEach { var, source, body } => {
                let src = self.expr(source)?;
                return self.foreach(var, src, body, source.span);
            }
        }
        Ok(Flow::Normal)
    }

    fn foreach(&mut self, var: &str, src: EVal, body: &[Stmt], span: Span) -> Result<Flow, FullRunError> {
        let items: Vec<EVal> = match (&src, self.data) {
            (EVal::Source { node, call, .. }, None) => {
                vec![EVal::Sym { ty: call.element_type(), node: Some(*node) }]
            }
            (EVal::Source { node, call, .. }, Some(data)) => {
                let want = call.element_type();
                let elems = data.bind(call)?;
                for (i, e) in elems.iter().enumerate() {
                    if !e.conforms(&want) {
                        return Err(DataError::IllTyped {
                            source_name: call.generator.clone(),
                            index: i,
                            expected: want.to_string(),
                            actual: e.type_name(),
                        }
                        .into());
                    }
                }
                elems.into_iter().map(|v| EVal::Data { v, node: Some(*node) }).collect()
            }
            (EVal::Range(Some(n)), Some(_)) => (0..*n).map(|i| EVal::Num(i as f64)).collect(),
            (EVal::Range(_), _) => vec![EVal::unknown()],
            _ => return Err(EvalError::NotASource { span }.into()),
        };
        for (i, item) in items.into_iter().enumerate() {
            self.iters.push(i);
            self.scopes.push(HashMap::from([(var.to_string(), item)]));
            let r = self.stmts(body);
            self.scopes.pop();
            self.iters.pop();
            match r? {
                Flow::Normal => {}
                other => return Ok(other),
            }
        }
        Ok(Flow::Normal)
    }

    fn expr(&mut self, e: &Expr) -> Result<EVal, EvalError> {
        Ok(match &e.kind {
            ExprKind::Lit(l) => EVal::from_literal(l),
            ExprKind::Ident(n) => self.lookup(n, e.span)?,
            ExprKind::Type(t) => EVal::Type(t.into()),
            ExprKind::Unary { op, expr } => {
                let v = self.expr(expr)?;
                match (op, v) {
                    (UnaryOp::Not, EVal::Bool(b)) => EVal::Bool(!b),
                    (UnaryOp::Neg, ref v) if v.as_num().is_some() => EVal::Num(-v.as_num().unwrap_or(0.0)),
                    (_, v) if v.is_unknown() => EVal::unknown(),
                    (op, v) => {
                        return Err(type_err(format!("cannot apply {op:?} to {}", v.describe()), e.span))
                    }
                }
            }
            ExprKind::Binary { op, lhs, rhs } => {
                let a = self.expr(lhs)?;
                let b = self.expr(rhs)?;
                binary(*op, a, b, e.span)?
            }
            ExprKind::Field { base, field } => {
                let b = self.expr(base)?;
                self.field(b, field, e.span)?
            }
            ExprKind::Call(c) => self.call(c)?,
        })
    }

    fn field(&self, base: EVal, field: &str, span: Span) -> Result<EVal, EvalError> {
        let idx = match field {
            "x" => Some(0),
            "y" => Some(1),
            _ => None,
        };
        let missing = |on: String| EvalError::MissingField { field: field.into(), on, span };
        match base {
            EVal::Record(r) => r.get(field).cloned().ok_or_else(|| missing("record".into())),
            EVal::Unknown { .. } => Ok(EVal::unknown()),
            EVal::Sym { ty: SemanticType::Tuple { items }, node } => match idx.and_then(|i| items.get(i)) {
                Some(t) => Ok(EVal::Sym { ty: t.clone(), node }),
                None => Err(missing("tuple".into())),
            },
            EVal::Data { v: Value::Tuple(items), node } => match idx.and_then(|i| items.get(i)) {
                Some(v) => Ok(EVal::Data { v: v.clone(), node }),
                None => Err(missing("tuple".into())),
            },
            other => Err(missing(other.describe())),
        }
    }

    fn call(&mut self, c: &Call) -> Result<EVal, EvalError> {
        let args: Vec<EVal> = c.args.iter().map(|a| self.expr(a)).collect::<Result<_, _>>()?;
        let arity = |want: &str, ok: bool| {
            if ok {
                Ok(())
            } else {
                Err(EvalError::Arity { name: c.qualified(), want: want.into(), got: args.len(), span: c.span })
            }
        };
        match c.object {
            WellKnown::Train | WellKnown::Test | WellKnown::Gradient => {
                let io = match (args.first().and_then(EVal::sem_type), args.get(1).and_then(EVal::sem_type)) {
                    (Some(a), Some(b)) if c.object != WellKnown::Gradient => Some((a, b)),
                    _ => None,
                };
                let node = self.record(c, &args, None, io);
                if self.full() {
                    let vals = args
                        .iter()
                        .map(|a| event_value(a, c.span))
                        .collect::<Result<Vec<_>, _>>()?;
                    self.events.push(PrimitiveEvent {
                        node,
                        prim: c.qualified(),
                        args: vals,
                        iter: self.iters.last().copied().unwrap_or(0),
                    });
                }
                Ok(EVal::Unknown { node: Some(node) })
            }
            WellKnown::Data => self.data_call(c, args),
            WellKnown::Env => self.env_call(c, args),
            WellKnown::Model => {
                let ty_arg = |i: usize| match args.get(i) {
                    Some(EVal::Type(t)) => Some(t.clone()),
                    _ => None,
                };
                match c.method.as_str() {
                    "input" => {
                        arity("1", args.len() == 1)?;
                        let t = ty_arg(0).ok_or_else(|| type_err("Model.input expects a type".into(), c.span))?;
                        self.declared_input = Some(t.clone());
                        let node = self.record(c, &args, Some(t.clone()), None);
                        Ok(EVal::Sym { ty: t, node: Some(node) })
                    }
                    "Predict" | "Classify" => {
                        arity("2", args.len() == 2)?;
                        let out = ty_arg(1);
                        let inp = self.declared_input.clone().or_else(|| args[0].sem_type());
                        let io = inp.zip(out.clone());
                        let node = self.record(c, &args, out.clone(), io);
                        Ok(match out {
                            Some(ty) => EVal::Sym { ty, node: Some(node) },
                            None => EVal::Unknown { node: Some(node) },
                        })
                    }
                    "Convert" => {
                        arity("2", args.len() == 2)?;
                        let (Some(a), Some(b)) = (ty_arg(0), ty_arg(1)) else {
                            return Err(type_err("Model.Convert expects two types".into(), c.span));
                        };
                        self.convert = Some((a.clone(), b.clone()));
                        self.record(c, &args, Some(b), None);
                        Ok(EVal::unknown())
                    }
                    "Dense" | "Tanh" | "Softmax" | "Sum" | "Sub" => {
                        let inner = args.first().and_then(EVal::sem_type);
                        let ty = match c.method.as_str() {
                            "Dense" => {
                                arity("2", args.len() == 2)?;
                                args[1].as_num().map(|w| SemanticType::vector(w as u64))
                            }
                            "Sum" => match inner {
                                Some(SemanticType::List { elem }) => Some(*elem),
                                _ => None,
                            },
                            "Sub" => {
                                arity("2", args.len() == 2)?;
                                ty_arg(1).map(SemanticType::list)
                            }
                            _ => inner,
                        };
                        let node = self.record(c, &args, ty.clone(), None);
                        Ok(match ty {
                            Some(ty) => EVal::Sym { ty, node: Some(node) },
                            None => EVal::Unknown { node: Some(node) },
                        })
                    }
                    _ => Err(EvalError::UnknownPrimitive { name: c.qualified(), span: c.span }),
                }
            }
        }
    }

    fn data_call(&mut self, c: &Call, args: Vec<EVal>) -> Result<EVal, EvalError> {
        let size = |v: &EVal| -> Result<Option<usize>, EvalError> {
            match v {
                v if v.is_unknown() => Ok(None),
                v => match v.as_num() {
                    Some(x) if x >= 0.0 && x.fract() == 0.0 => Ok(Some(x as usize)),
                    _ => Err(type_err(format!("data size must be a non-negative integer, got {}", v.describe()), c.span)),
                },
            }
        };
        let bad_arity = |want: &str| EvalError::Arity {
            name: c.qualified(),
            want: want.into(),
            got: args.len(),
            span: c.span,
        };
        if c.method == "range" {
            if args.len() != 1 {
                return Err(bad_arity("1"));
            }
            let n = size(&args[0])?;
            self.record(c, &args, None, None);
            return Ok(EVal::Range(n.map(|x| x as u64)));
        }
        let (split, input, output) = if c.method == SYNTHETIC {
            match args.as_slice() {
                [_, EVal::Type(a), EVal::Type(b)] => ("all".to_string(), a.clone(), b.clone()),
                _ => return Err(bad_arity("3 (n, input type, output type)")),
            }
        } else {
            let g = self
                .generators
                .get(&c.method)
                .ok_or_else(|| EvalError::UnknownPrimitive { name: c.qualified(), span: c.span })?;
            let split = match args.get(1) {
                Some(EVal::Str(s)) => s.clone(),
                None => "all".into(),
                Some(other) => return Err(type_err(format!("split must be a string, got {}", other.describe()), c.span)),
            };
            if args.is_empty() || args.len() > 2 {
                return Err(bad_arity("1 or 2 (n, split)"));
            }
            let (i, o) = g.element_types();
            (split, i, o)
        };
        let n = size(&args[0])?;
        if self.full() && n.is_none() {
            return Err(EvalError::Indeterminate { span: c.span });
        }
        let call = SourceCall { generator: c.method.clone(), n: n.unwrap_or(0), split, input, output };
        let node = self.record(c, &args, Some(SemanticType::list(call.element_type())), None);
        if !self.full() {
            self.sources.push(SourceInfo {
                node,
                generator: call.generator.clone(),
                split: call.split.clone(),
                n,
                input: call.input.clone(),
                output: call.output.clone(),
                feeds: BTreeSet::new(),
            });
        }
        Ok(EVal::Source { node, call, n })
    }

    fn env_call(&mut self, c: &Call, args: Vec<EVal>) -> Result<EVal, EvalError> {
        let kind = match c.method.as_str() {
            "problem" => Some(ModuleKind::Problem),
            "model" => Some(ModuleKind::Model),
            "hardware" => Some(ModuleKind::Hardware),
            "software" => Some(ModuleKind::Software),
            "metric" => Some(ModuleKind::Metric),
            "ranking" => Some(ModuleKind::Ranking),
            _ => None,
        };
        let result = if let Some(k) = kind {
            match self.ctx.find(k) {
                Some(m) => record_of(m),
                None => EVal::unknown(),
            }
        } else {
            match c.method.as_str() {
                "has_task" => match (args.first(), self.ctx.find(ModuleKind::Problem)) {
                    (Some(EVal::Str(t)), Some(p)) => EVal::Bool(p.tasks.contains(t)),
                    (Some(EVal::Str(_)), None) => EVal::unknown(),
                    _ => return Err(type_err("Env.has_task expects a task name".into(), c.span)),
                },
                "tag" => {
                    match args.first() {
                        Some(EVal::Str(t)) => self.tag = Some(t.clone()),
                        Some(v) if v.is_unknown() => {}
                        _ => return Err(type_err("Env.tag expects a string".into(), c.span)),
                    }
                    EVal::unknown()
                }
                "seed" => EVal::Num(self.ctx.seed as f64),
                _ => return Err(EvalError::UnknownPrimitive { name: c.qualified(), span: c.span }),
            }
        };
        self.record(c, &args, None, None);
        Ok(result)
    }
}

fn type_err(message: String, span: Span) -> EvalError {
    EvalError::Type { message, span }
}

fn event_value(a: &EVal, span: Span) -> Result<Value, EvalError> {
    match a {
        EVal::Data { v, .. } => Ok(v.clone()),
        EVal::Num(x) => Ok(Value::Scalar(*x)),
        EVal::Bool(b) => Ok(Value::Scalar(*b as u8 as f64)),
        other => Err(type_err(format!("cannot pass {} to a data primitive", other.describe()), span)),
    }
}

fn binary(op: BinaryOp, a: EVal, b: EVal, span: Span) -> Result<EVal, EvalError> {
    use BinaryOp::*;
    match op {
        And | Or => {
            let (x, y) = (bool_or_unknown(&a, span)?, bool_or_unknown(&b, span)?);
            return Ok(match (op, x, y) {
                (And, Some(false), _) | (And, _, Some(false)) => EVal::Bool(false),
                (Or, Some(true), _) | (Or, _, Some(true)) => EVal::Bool(true),
                (_, Some(p), Some(q)) => EVal::Bool(if op == And { p && q } else { p || q }),
                _ => EVal::unknown(),
            });
        }
        _ => {}
    }
    if a.is_unknown() || b.is_unknown() {
        return Ok(EVal::unknown());
    }
    if let (Some(x), Some(y)) = (a.as_num(), b.as_num()) {
        return Ok(match op {
            Add => EVal::Num(x + y),
            Sub => EVal::Num(x - y),
            Mul => EVal::Num(x * y),
            Div => EVal::Num(x / y),
            Eq => EVal::Bool(x == y),
            Ne => EVal::Bool(x != y),
            Lt => EVal::Bool(x < y),
            Le => EVal::Bool(x <= y),
            Gt => EVal::Bool(x > y),
            Ge => EVal::Bool(x >= y),
            And | Or => unreachable!("handled above"),
        });
    }
    let eq = match (&a, &b) {
        (EVal::Str(x), EVal::Str(y)) => Some(x == y),
        (EVal::Bool(x), EVal::Bool(y)) => Some(x == y),
        (EVal::Type(x), EVal::Type(y)) => Some(x == y),
        _ => None,
    };
    match (op, eq) {
        (Eq, Some(v)) => Ok(EVal::Bool(v)),
        (Ne, Some(v)) => Ok(EVal::Bool(!v)),
        _ => Err(type_err(
            format!("cannot apply `{}` to {} and {}", op.symbol(), a.describe(), b.describe()),
            span,
        )),
    }
}

fn bool_or_unknown(v: &EVal, span: Span) -> Result<Option<bool>, EvalError> {
    match v {
        EVal::Bool(b) => Ok(Some(*b)),
        v if v.is_unknown() => Ok(None),
        other => Err(type_err(format!("expected bool, got {}", other.describe()), span)),
    }
}

/// Upper bound on tape length: every call site is recorded at most once.
pub fn tape_bound(module: &ModuleDecl) -> usize {
    let mut n = 0;
    visit_calls(&module.body, &mut |_| n += 1);
    n
}

/// Symbolic execution of a module body.
pub fn dry_run(module: &ModuleDecl, ctx: &EvalContext) -> Result<(ModuleMetadata, TapeGraph), EvalError> {
    let mut it = Interp::new(module, ctx, None);
    let flow = match it.block(&module.body) {
        Ok(f) => f,
        Err(FullRunError::Eval(e)) => return Err(e),
        Err(other) => unreachable!("dry runs touch no data: {other}"),
    };
    let tape = TapeGraph { nodes: std::mem::take(&mut it.tape) };
    let mut meta = ModuleMetadata::empty(module);
    for n in &tape.nodes {
        if matches!(n.object(), "Train" | "Test") {
            meta.tasks.insert(n.method().to_string());
            meta.trains |= n.object() == "Train";
        }
    }
    for mut s in std::mem::take(&mut it.sources) {
        s.feeds = tape.consumers(s.node).map(|n| n.prim.clone()).collect();
        meta.sources.push(s);
    }
    if matches!(module.kind, ModuleKind::Problem | ModuleKind::Model) {
        if let Ok((i, o)) = infer_io_types(&tape) {
            meta.input = Some(i);
            meta.output = Some(o);
        }
    }
    meta.tag = it.tag.take();
    meta.convert = it.convert.take();
    meta.params = std::mem::take(&mut it.params);
    match flow {
        Flow::Normal => {}
        Flow::Return(v) => meta.returned = Some(v),
        Flow::Fail { reason, .. } => {
            meta.failed = true;
            meta.reason = Some(reason);
        }
    }
    Ok((meta, tape))
}

/// Executes a module over bound data, returning its primitive events in
/// execution order.
pub fn full_run(
    module: &ModuleDecl,
    ctx: &EvalContext,
    bindings: &dyn DataBindings,
) -> Result<Vec<PrimitiveEvent>, FullRunError> {
    let (meta, tape) = dry_run(module, ctx)?;
    if meta.failed {
        return Err(FullRunError::DryRunFailed(meta.reason.unwrap_or_default()));
    }
    let mut it = Interp::new(module, ctx, Some(bindings));
    it.sites = tape.nodes.iter().map(|n| (n.span.offset, n.id)).collect();
    match it.block(&module.body)? {
        Flow::Fail { reason, span } => Err(FullRunError::Failed { reason, span }),
        Flow::Normal | Flow::Return(_) => Ok(it.events),
    }
}

/// I/O types of a tape: taken from `Test.*` nodes when present, else from
/// `Train.*` nodes, else from `Model.Predict`/`Model.Classify`.
pub fn infer_io_types(tape: &TapeGraph) -> Result<(SemanticType, SemanticType), InferenceError> {
    let class = |pred: &dyn Fn(&TapeNode) -> bool| -> Vec<&(SemanticType, SemanticType)> {
        tape.nodes.iter().filter(|n| pred(n)).filter_map(|n| n.io.as_ref()).collect()
    };
    let tiers = [
        class(&|n| n.object() == "Test"),
        class(&|n| n.object() == "Train"),
        class(&|n| n.object() == "Model"),
    ];
    let chosen = tiers.into_iter().find(|t| !t.is_empty()).ok_or(InferenceError::NoIoNodes)?;
    let first = chosen[0];
    for other in &chosen[1..] {
        if *other != first {
            return Err(InferenceError::Ambiguous(
                format!("{} -> {}", first.0, first.1),
                format!("{} -> {}", other.0, other.1),
            ));
        }
    }
    Ok(first.clone())
}
