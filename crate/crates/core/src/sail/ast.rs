use super::lexer::Span;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt;

/// The seven module entry-point kinds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModuleKind {
    Problem,
    Model,
    Metric,
    Ranking,
    Software,
    Hardware,
    Converter,
}

impl ModuleKind {
    pub const ALL: [ModuleKind; 7] = [
        ModuleKind::Problem,
        ModuleKind::Model,
        ModuleKind::Metric,
        ModuleKind::Ranking,
        ModuleKind::Software,
        ModuleKind::Hardware,
        ModuleKind::Converter,
    ];

    pub fn keyword(self) -> &'static str {
        match self {
            ModuleKind::Problem => "problem",
            ModuleKind::Model => "model",
            ModuleKind::Metric => "metric",
            ModuleKind::Ranking => "ranking",
            ModuleKind::Software => "software",
            ModuleKind::Hardware => "hardware",
            ModuleKind::Converter => "converter",
        }
    }

    pub fn from_keyword(s: &str) -> Option<ModuleKind> {
        ModuleKind::ALL.into_iter().find(|k| k.keyword() == s)
    }
}

impl fmt::Display for ModuleKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.keyword())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Literal {
    Num(f64),
    Str(String),
    Bool(bool),
}

impl Literal {
    pub fn as_f64(&self) -> Option<f64> {
        match self {
            Literal::Num(v) => Some(*v),
            _ => None,
        }
    }

    pub fn as_str(&self) -> Option<&str> {
        match self {
            Literal::Str(s) => Some(s),
            _ => None,
        }
    }

    pub fn as_bool(&self) -> Option<bool> {
        match self {
            Literal::Bool(b) => Some(*b),
            _ => None,
        }
    }
}

impl fmt::Display for Literal {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&super::printer::render_literal(self))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DimExpr {
    Fixed(u64),
    Wild,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TypeExpr {
    Scalar,
    Tensor(Vec<DimExpr>),
    List(Box<TypeExpr>),
    Atom,
    Image(DimExpr, DimExpr, DimExpr),
    Label(DimExpr),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamDecl {
    pub name: String,
    pub ty: TypeExpr,
    pub default: Option<Literal>,
    pub suggest: Option<Vec<Literal>>,
    pub span: Span,
}

/// An explicit `requires KIND "name"` relationship.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Requirement {
    pub kind: ModuleKind,
    pub name: String,
    pub span: Span,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum WellKnown {
    Train,
    Test,
    Model,
    Env,
    Data,
    Gradient,
}

impl WellKnown {
    pub fn from_ident(s: &str) -> Option<WellKnown> {
        Some(match s {
            "Train" => WellKnown::Train,
            "Test" => WellKnown::Test,
            "Model" => WellKnown::Model,
            "Env" => WellKnown::Env,
            "Data" => WellKnown::Data,
            "Gradient" => WellKnown::Gradient,
            _ => return None,
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            WellKnown::Train => "Train",
            WellKnown::Test => "Test",
            WellKnown::Model => "Model",
            WellKnown::Env => "Env",
            WellKnown::Data => "Data",
            WellKnown::Gradient => "Gradient",
        }
    }
}

/// `Object.method(args)` on one of the well-known global objects.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Call {
    pub object: WellKnown,
    pub method: String,
    pub args: Vec<Expr>,
    pub span: Span,
}

impl Call {
    pub fn qualified(&self) -> String {
        format!("{}.{}", self.object.name(), self.method)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum UnaryOp {
    Not,
    Neg,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BinaryOp {
    Or,
    And,
    Eq,
    Ne,
    Lt,
    Le,
    Gt,
    Ge,
    Add,
    Sub,
    Mul,
    Div,
}

impl BinaryOp {
    pub fn symbol(self) -> &'static str {
        match self {
            BinaryOp::Or => "||",
            BinaryOp::And => "&&",
            BinaryOp::Eq => "==",
            BinaryOp::Ne => "!=",
            BinaryOp::Lt => "<",
            BinaryOp::Le => "<=",
            BinaryOp::Gt => ">",
            BinaryOp::Ge => ">=",
            BinaryOp::Add => "+",
            BinaryOp::Sub => "-",
            BinaryOp::Mul => "*",
            BinaryOp::Div => "/",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Expr {
    pub kind: ExprKind,
    pub span: Span,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ExprKind {
    Lit(Literal),
    Ident(String),
    Unary { op: UnaryOp, expr: Box<Expr> },
    Binary { op: BinaryOp, lhs: Box<Expr>, rhs: Box<Expr> },
    Field { base: Box<Expr>, field: String },
    Type(TypeExpr),
    Call(Call),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stmt {
    pub kind: StmtKind,
    pub span: Span,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum StmtKind {
    Let { name: String, value: Expr },
    ForEach { var: String, source: Expr, body: Vec<Stmt> },
    If { cond: Expr, then: Vec<Stmt>, otherwise: Option<Vec<Stmt>> },
    FailWhen { cond: Expr, reason: Option<String> },
    Call(Call),
    Return(Expr),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModuleDecl {
    pub kind: ModuleKind,
    pub name: String,
    pub params: Vec<ParamDecl>,
    pub meta: BTreeMap<String, Literal>,
    pub requires: Vec<Requirement>,
    pub body: Vec<Stmt>,
    pub span: Span,
}

impl ModuleDecl {
    pub fn param(&self, name: &str) -> Option<&ParamDecl> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn meta_str(&self, key: &str) -> Option<&str> {
        self.meta.get(key).and_then(Literal::as_str)
    }

    /// Copy with every span zeroed, for structural comparison.
    pub fn without_spans(&self) -> ModuleDecl {
        let mut m = self.clone();
        m.span = Span::default();
        for p in &mut m.params {
            p.span = Span::default();
        }
        for r in &mut m.requires {
            r.span = Span::default();
        }
        m.body.iter_mut().for_each(clear_stmt);
        m
    }
}

fn clear_stmt(s: &mut Stmt) {
    s.span = Span::default();
    match &mut s.kind {
        StmtKind::Let { value, .. } => clear_expr(value),
        StmtKind::ForEach { source, body, .. } => {
            clear_expr(source);
            body.iter_mut().for_each(clear_stmt);
        }
        StmtKind::If { cond, then, otherwise } => {
            clear_expr(cond);
            then.iter_mut().for_each(clear_stmt);
            if let Some(b) = otherwise {
                b.iter_mut().for_each(clear_stmt);
            }
        }
        StmtKind::FailWhen { cond, .. } => clear_expr(cond),
        StmtKind::Call(c) => clear_call(c),
        StmtKind::Return(e) => clear_expr(e),
    }
}

fn clear_call(c: &mut Call) {
    c.span = Span::default();
    c.args.iter_mut().for_each(clear_expr);
}

fn clear_expr(e: &mut Expr) {
    e.span = Span::default();
    match &mut e.kind {
        ExprKind::Unary { expr, .. } => clear_expr(expr),
        ExprKind::Binary { lhs, rhs, .. } => {
            clear_expr(lhs);
            clear_expr(rhs);
        }
        ExprKind::Field { base, .. } => clear_expr(base),
        ExprKind::Call(c) => clear_call(c),
        ExprKind::Lit(_) | ExprKind::Ident(_) | ExprKind::Type(_) => {}
    }
}

/// Walks every primitive call in a statement list, in source order.
pub fn visit_calls<'a>(stmts: &'a [Stmt], f: &mut dyn FnMut(&'a Call)) {
    fn expr<'a>(e: &'a Expr, f: &mut dyn FnMut(&'a Call)) {
        match &e.kind {
            ExprKind::Unary { expr: inner, .. } => expr(inner, f),
            ExprKind::Binary { lhs, rhs, .. } => {
                expr(lhs, f);
                expr(rhs, f);
            }
            ExprKind::Field { base, .. } => expr(base, f),
            ExprKind::Call(c) => call(c, f),
            ExprKind::Lit(_) | ExprKind::Ident(_) | ExprKind::Type(_) => {}
        }
    }
    fn call<'a>(c: &'a Call, f: &mut dyn FnMut(&'a Call)) {
        c.args.iter().for_each(|a| expr(a, f));
        f(c);
    }
    for s in stmts {
        match &s.kind {
            StmtKind::Let { value, .. } => expr(value, f),
            StmtKind::ForEach { source, body, .. } => {
                expr(source, f);
                visit_calls(body, f);
            }
            StmtKind::If { cond, then, otherwise } => {
                expr(cond, f);
                visit_calls(then, f);
                if let Some(b) = otherwise {
                    visit_calls(b, f);
                }
            }
            StmtKind::FailWhen { cond, .. } => expr(cond, f),
            StmtKind::Call(c) => call(c, f),
            StmtKind::Return(e) => expr(e, f),
        }
    }
}
