use super::ast::*;
use super::lexer::{tokenize, LexError, Span, Token, TokenKind};
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ParseError {
    #[error(transparent)]
    Lex(#[from] LexError),
    #[error("{span}: expected {}, found {found}", expected.join(" or "))]
    Unexpected {
        span: Span,
        expected: Vec<String>,
        found: String,
        /// From the innermost construct still open (statement, item or
        /// bracket) to the offending token; an unclosed `(` shows up here
        /// long before the parser trips over it.
        context: Span,
    },
    #[error("{span}: duplicate module name {name:?} (first defined at {first})")]
    DuplicateModule { name: String, span: Span, first: Span },
    #[error("{span}: {message}")]
    Invalid { span: Span, message: String },
}

impl ParseError {
    pub fn span(&self) -> Span {
        match self {
            ParseError::Lex(e) => e.span(),
            ParseError::Unexpected { span, .. }
            | ParseError::DuplicateModule { span, .. }
            | ParseError::Invalid { span, .. } => *span,
        }
    }

    pub fn context(&self) -> Span {
        match self {
            ParseError::Unexpected { context, .. } => *context,
            other => other.span(),
        }
    }
}

type PResult<T> = Result<T, ParseError>;

const TYPE_NAMES: [&str; 6] = ["Scalar", "Tensor", "List", "Atom", "Image", "Label"];

/// Parses a whole `.sail` file into its module declarations.
pub fn parse(text: &str) -> PResult<Vec<ModuleDecl>> {
    let tokens = tokenize(text)?;
    let eof = eof_span(text);
    let mut p = Parser { tokens, pos: 0, eof, open: Vec::new() };
    let mut out: Vec<ModuleDecl> = Vec::new();
    while !p.at_end() {
        let m = p.module()?;
        if let Some(first) = out.iter().find(|o| o.name == m.name) {
            return Err(ParseError::DuplicateModule {
                name: m.name.clone(),
                span: m.span,
                first: first.span,
            });
        }
        out.push(m);
    }
    Ok(out)
}

/// Parses a standalone type expression such as `Tensor[?, 3]`.
pub fn parse_type_expr(text: &str) -> PResult<TypeExpr> {
    let tokens = tokenize(text)?;
    let mut p = Parser { tokens, pos: 0, eof: eof_span(text), open: Vec::new() };
    let t = p.type_expr()?;
    if !p.at_end() {
        return p.error(&["end of type"]);
    }
    Ok(t)
}

fn eof_span(text: &str) -> Span {
    let line = text.matches('\n').count() as u32 + 1;
    let last = text.rsplit('\n').next().unwrap_or("");
    Span { offset: text.len(), line, col: last.chars().count() as u32 + 1, len: 0 }
}

struct Parser {
    tokens: Vec<Token>,
    pos: usize,
    eof: Span,
    /// Starts of the constructs being parsed, innermost last.
    open: Vec<Span>,
}

fn kind_of(t: &TokenKind) -> Option<ModuleKind> {
    Some(match t {
        TokenKind::KwProblem => ModuleKind::Problem,
        TokenKind::KwModel => ModuleKind::Model,
        TokenKind::KwMetric => ModuleKind::Metric,
        TokenKind::KwRanking => ModuleKind::Ranking,
        TokenKind::KwSoftware => ModuleKind::Software,
        TokenKind::KwHardware => ModuleKind::Hardware,
        TokenKind::KwConverter => ModuleKind::Converter,
        _ => return None,
    })
}

const KIND_WORDS: [&str; 7] =
    ["problem", "model", "metric", "ranking", "software", "hardware", "converter"];

impl Parser {
    fn at_end(&self) -> bool {
        self.pos >= self.tokens.len()
    }

    fn peek(&self) -> Option<&TokenKind> {
        self.tokens.get(self.pos).map(|t| &t.kind)
    }

    fn peek_at(&self, n: usize) -> Option<&TokenKind> {
        self.tokens.get(self.pos + n).map(|t| &t.kind)
    }

    fn span(&self) -> Span {
        self.tokens.get(self.pos).map(|t| t.span).unwrap_or(self.eof)
    }

    fn prev_span(&self) -> Span {
        self.pos.checked_sub(1).and_then(|i| self.tokens.get(i)).map(|t| t.span).unwrap_or(self.eof)
    }

    fn error<T>(&self, expected: &[&str]) -> PResult<T> {
        let found = match self.peek() {
            Some(k) => k.describe(),
            None => "end of input".to_string(),
        };
        let span = self.span();
        Err(ParseError::Unexpected {
            span,
            expected: expected.iter().map(|s| s.to_string()).collect(),
            found,
            context: self.open.last().map_or(span, |o| o.to(span)),
        })
    }

    fn enter(&mut self) {
        let at = self.span();
        self.open.push(at);
    }

    fn leave(&mut self) {
        self.open.pop();
    }

    fn eat(&mut self, kind: &TokenKind) -> bool {
        if self.peek() == Some(kind) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    fn expect(&mut self, kind: TokenKind) -> PResult<Span> {
        if self.peek() == Some(&kind) {
            self.pos += 1;
            Ok(self.prev_span())
        } else {
            self.error(&[&format!("`{}`", kind.text())])
        }
    }

    fn ident(&mut self) -> PResult<String> {
        match self.peek() {
            Some(TokenKind::Ident(s)) => {
                let s = s.clone();
                self.pos += 1;
                Ok(s)
            }
            _ => self.error(&["identifier"]),
        }
    }

    /// Identifier after `.`; keywords are allowed here so `Env.model()` works.
    fn member_name(&mut self) -> PResult<String> {
        let name = match self.peek() {
            Some(TokenKind::Ident(s)) => s.clone(),
            Some(k) if k.text().chars().all(|c| c.is_ascii_alphabetic()) && is_keyword(k) => {
                k.text()
            }
            _ => return self.error(&["member name"]),
        };
        self.pos += 1;
        Ok(name)
    }

    fn string(&mut self) -> PResult<String> {
        match self.peek() {
            Some(TokenKind::Str(s)) => {
                let s = s.clone();
                self.pos += 1;
                Ok(s)
            }
            _ => self.error(&["string"]),
        }
    }

    fn module(&mut self) -> PResult<ModuleDecl> {
        let start = self.span();
        let kind = match self.peek().and_then(kind_of) {
            Some(k) => k,
            None => return self.error(&KIND_WORDS),
        };
        self.pos += 1;
        let name = self.string()?;
        let brace = self.expect(TokenKind::LBrace)?;
        self.open.push(brace);
        let mut params: Vec<ParamDecl> = Vec::new();
        let mut meta = BTreeMap::new();
        let mut requires = Vec::new();
        let mut body = Vec::new();
        loop {
            match self.peek() {
                Some(TokenKind::RBrace) => break,
                None => return self.error(&["`}`"]),
                Some(TokenKind::KwMeta) => {
                    let at = self.span();
                    self.enter();
                    self.pos += 1;
                    let key = self.ident()?;
                    self.expect(TokenKind::Assign)?;
                    let value = self.literal()?;
                    self.leave();
                    if meta.insert(key.clone(), value).is_some() {
                        return Err(ParseError::Invalid {
                            span: at.to(self.prev_span()),
                            message: format!("duplicate meta key `{key}`"),
                        });
                    }
                }
                Some(TokenKind::KwParam) => {
                    let p = self.param()?;
                    if params.iter().any(|q| q.name == p.name) {
                        return Err(ParseError::Invalid {
                            span: p.span,
                            message: format!("duplicate param `{}`", p.name),
                        });
                    }
                    params.push(p);
                }
                Some(TokenKind::KwRequires) => {
                    let at = self.span();
                    self.enter();
                    self.pos += 1;
                    let kind = match self.peek().and_then(kind_of) {
                        Some(k) => k,
                        None => return self.error(&KIND_WORDS),
                    };
                    self.pos += 1;
                    let name = self.string()?;
                    self.leave();
                    requires.push(Requirement { kind, name, span: at.to(self.prev_span()) });
                }
                Some(k) if kind_of(k).is_some() => {
                    return Err(ParseError::Invalid {
                        span: self.span(),
                        message: "modules cannot be nested".to_string(),
                    })
                }
                Some(_) => body.push(self.stmt()?),
            }
        }
        self.expect(TokenKind::RBrace)?;
        self.leave();
        Ok(ModuleDecl { kind, name, params, meta, requires, body, span: start.to(self.prev_span()) })
    }

    fn param(&mut self) -> PResult<ParamDecl> {
        self.enter();
        let start = self.expect(TokenKind::KwParam)?;
        let name = self.ident()?;
        self.expect(TokenKind::Colon)?;
        let ty = self.type_expr()?;
        let default = if self.eat(&TokenKind::Assign) { Some(self.literal()?) } else { None };
        let suggest = if self.eat(&TokenKind::KwSuggest) {
            let bracket = self.expect(TokenKind::LBracket)?;
            self.open.push(bracket);
            let mut vals = vec![self.literal()?];
            while self.eat(&TokenKind::Comma) {
                vals.push(self.literal()?);
            }
            self.expect(TokenKind::RBracket)?;
            self.leave();
            Some(vals)
        } else {
            None
        };
        self.leave();
        Ok(ParamDecl { name, ty, default, suggest, span: start.to(self.prev_span()) })
    }

    fn literal(&mut self) -> PResult<Literal> {
        let neg = self.eat(&TokenKind::Minus);
        let lit = match self.peek() {
            Some(TokenKind::Int(v)) => Literal::Num(*v as f64),
            Some(TokenKind::Float(v)) => Literal::Num(*v),
            Some(TokenKind::Str(s)) if !neg => Literal::Str(s.clone()),
            Some(TokenKind::KwTrue) if !neg => Literal::Bool(true),
            Some(TokenKind::KwFalse) if !neg => Literal::Bool(false),
            _ if neg => return self.error(&["number"]),
            _ => return self.error(&["literal"]),
        };
        self.pos += 1;
        Ok(match lit {
            Literal::Num(v) if neg => Literal::Num(-v),
            other => other,
        })
    }

    fn dim(&mut self) -> PResult<DimExpr> {
        match self.peek() {
            Some(TokenKind::Int(v)) => {
                let v = *v;
                self.pos += 1;
                Ok(DimExpr::Fixed(v))
            }
            Some(TokenKind::Question) => {
                self.pos += 1;
                Ok(DimExpr::Wild)
            }
            _ => self.error(&["integer", "`?`"]),
        }
    }

    fn type_expr(&mut self) -> PResult<TypeExpr> {
        let start = self.span();
        self.enter();
        let name = match self.peek() {
            Some(TokenKind::Ident(s)) if TYPE_NAMES.contains(&s.as_str()) => s.clone(),
            _ => return self.error(&TYPE_NAMES),
        };
        self.pos += 1;
        let t = match name.as_str() {
            "Scalar" => TypeExpr::Scalar,
            "Atom" => TypeExpr::Atom,
            "Tensor" => {
                self.expect(TokenKind::LBracket)?;
                let mut dims = vec![self.dim()?];
                while self.eat(&TokenKind::Comma) {
                    dims.push(self.dim()?);
                }
                self.expect(TokenKind::RBracket)?;
                if dims.len() > 4 {
                    return Err(ParseError::Invalid {
                        span: start.to(self.prev_span()),
                        message: "tensor rank is limited to 4".to_string(),
                    });
                }
                TypeExpr::Tensor(dims)
            }
            "List" => {
                self.expect(TokenKind::LBracket)?;
                let inner = self.type_expr()?;
                self.expect(TokenKind::RBracket)?;
                TypeExpr::List(Box::new(inner))
            }
            "Image" => {
                self.expect(TokenKind::LBracket)?;
                let h = self.dim()?;
                self.expect(TokenKind::Comma)?;
                let w = self.dim()?;
                self.expect(TokenKind::Comma)?;
                let c = self.dim()?;
                self.expect(TokenKind::RBracket)?;
                TypeExpr::Image(h, w, c)
            }
            _ => {
                self.expect(TokenKind::LBracket)?;
                let k = self.dim()?;
                self.expect(TokenKind::RBracket)?;
                TypeExpr::Label(k)
            }
        };
        self.leave();
        Ok(t)
    }

    fn block(&mut self) -> PResult<Vec<Stmt>> {
        let brace = self.expect(TokenKind::LBrace)?;
        self.open.push(brace);
        let mut out = Vec::new();
        loop {
            match self.peek() {
                Some(TokenKind::RBrace) => break,
                None => return self.error(&["`}`"]),
                Some(_) => out.push(self.stmt()?),
            }
        }
        self.expect(TokenKind::RBrace)?;
        self.leave();
        Ok(out)
    }

    fn stmt(&mut self) -> PResult<Stmt> {
        let start = self.span();
        self.enter();
        let kind = match self.peek() {
            Some(TokenKind::KwLet) => {
                self.pos += 1;
                let name = self.ident()?;
                self.expect(TokenKind::Assign)?;
                StmtKind::Let { name, value: self.expr()? }
            }
            Some(TokenKind::KwForeach) => {
                self.pos += 1;
                let var = self.ident()?;
                self.expect(TokenKind::KwIn)?;
                let source = self.expr()?;
                let body = self.block()?;
                StmtKind::ForEach { var, source, body }
            }
            Some(TokenKind::KwIf) => {
                self.pos += 1;
                let cond = self.expr()?;
                let then = self.block()?;
                let otherwise = if self.eat(&TokenKind::KwElse) { Some(self.block()?) } else { None };
                StmtKind::If { cond, then, otherwise }
            }
            Some(TokenKind::KwFail) => {
                self.pos += 1;
                self.expect(TokenKind::KwWhen)?;
                let cond = self.expr()?;
                let reason =
                    if self.eat(&TokenKind::KwBecause) { Some(self.string()?) } else { None };
                StmtKind::FailWhen { cond, reason }
            }
            Some(TokenKind::KwReturn) => {
                self.pos += 1;
                StmtKind::Return(self.expr()?)
            }
            Some(TokenKind::Ident(s))
                if WellKnown::from_ident(s).is_some() && self.peek_at(1) == Some(&TokenKind::Dot) =>
            {
                StmtKind::Call(self.call()?)
            }
            _ => {
                return self.error(&[
                    "`let`",
                    "`foreach`",
                    "`if`",
                    "`fail`",
                    "`return`",
                    "primitive call",
                    "`meta`",
                    "`param`",
                    "`requires`",
                ])
            }
        };
        self.leave();
        Ok(Stmt { kind, span: start.to(self.prev_span()) })
    }

    fn call(&mut self) -> PResult<Call> {
        let start = self.span();
        let object = match self.peek() {
            Some(TokenKind::Ident(s)) => match WellKnown::from_ident(s) {
                Some(o) => o,
                None => return self.error(&["well-known object"]),
            },
            _ => return self.error(&["well-known object"]),
        };
        self.pos += 1;
        self.expect(TokenKind::Dot)?;
        let method = self.member_name()?;
        let paren = self.expect(TokenKind::LParen)?;
        self.open.push(paren);
        let mut args = Vec::new();
        if !self.eat(&TokenKind::RParen) {
            args.push(self.expr()?);
            while self.eat(&TokenKind::Comma) {
                args.push(self.expr()?);
            }
            self.expect(TokenKind::RParen)?;
        }
        self.leave();
        Ok(Call { object, method, args, span: start.to(self.prev_span()) })
    }

    fn expr(&mut self) -> PResult<Expr> {
        self.binary(0)
    }

    fn binary(&mut self, level: usize) -> PResult<Expr> {
        const LEVELS: [&[(TokenKind, BinaryOp)]; 5] = [
            &[(TokenKind::OrOr, BinaryOp::Or)],
            &[(TokenKind::AndAnd, BinaryOp::And)],
            &[
                (TokenKind::EqEq, BinaryOp::Eq),
                (TokenKind::NotEq, BinaryOp::Ne),
                (TokenKind::Le, BinaryOp::Le),
                (TokenKind::Lt, BinaryOp::Lt),
                (TokenKind::Ge, BinaryOp::Ge),
                (TokenKind::Gt, BinaryOp::Gt),
            ],
            &[(TokenKind::Plus, BinaryOp::Add), (TokenKind::Minus, BinaryOp::Sub)],
            &[(TokenKind::Star, BinaryOp::Mul), (TokenKind::Slash, BinaryOp::Div)],
        ];
        if level == LEVELS.len() {
            return self.unary();
        }
        let mut lhs = self.binary(level + 1)?;
        loop {
            let op = LEVELS[level].iter().find(|(t, _)| self.peek() == Some(t)).map(|(_, op)| *op);
            let Some(op) = op else { break };
            self.pos += 1;
            let rhs = self.binary(level + 1)?;
            let span = lhs.span.to(rhs.span);
            lhs = Expr { kind: ExprKind::Binary { op, lhs: Box::new(lhs), rhs: Box::new(rhs) }, span };
            // comparisons do not chain
            if level == 2 {
                break;
            }
        }
        Ok(lhs)
    }

    fn unary(&mut self) -> PResult<Expr> {
        let start = self.span();
        match self.peek() {
            Some(TokenKind::Bang) => {
                self.pos += 1;
                let inner = self.unary()?;
                let span = start.to(inner.span);
                Ok(Expr { kind: ExprKind::Unary { op: UnaryOp::Not, expr: Box::new(inner) }, span })
            }
            Some(TokenKind::Minus) => {
                if matches!(self.peek_at(1), Some(TokenKind::Int(_) | TokenKind::Float(_))) {
                    let lit = self.literal()?;
                    return self.postfix(Expr { kind: ExprKind::Lit(lit), span: start.to(self.prev_span()) });
                }
                self.pos += 1;
                let inner = self.unary()?;
                let span = start.to(inner.span);
                Ok(Expr { kind: ExprKind::Unary { op: UnaryOp::Neg, expr: Box::new(inner) }, span })
            }
            _ => {
                let base = self.primary()?;
                self.postfix(base)
            }
        }
    }

    fn postfix(&mut self, mut base: Expr) -> PResult<Expr> {
        while self.eat(&TokenKind::Dot) {
            let field = self.member_name()?;
            let span = base.span.to(self.prev_span());
            base = Expr { kind: ExprKind::Field { base: Box::new(base), field }, span };
        }
        Ok(base)
    }

    fn primary(&mut self) -> PResult<Expr> {
        let start = self.span();
        let kind = match self.peek() {
            Some(TokenKind::Int(_) | TokenKind::Float(_) | TokenKind::Str(_))
            | Some(TokenKind::KwTrue | TokenKind::KwFalse) => ExprKind::Lit(self.literal()?),
            Some(TokenKind::LParen) => {
                self.enter();
                self.pos += 1;
                let inner = self.expr()?;
                self.expect(TokenKind::RParen)?;
                self.leave();
                return Ok(inner);
            }
            Some(TokenKind::Ident(s)) => {
                if TYPE_NAMES.contains(&s.as_str()) {
                    ExprKind::Type(self.type_expr()?)
                } else if WellKnown::from_ident(s).is_some()
                    && self.peek_at(1) == Some(&TokenKind::Dot)
                {
                    ExprKind::Call(self.call()?)
                } else {
                    ExprKind::Ident(self.ident()?)
                }
            }
            _ => return self.error(&["expression"]),
        };
        Ok(Expr { kind, span: start.to(self.prev_span()) })
    }
}

fn is_keyword(k: &TokenKind) -> bool {
    !matches!(
        k,
        TokenKind::Ident(_) | TokenKind::Int(_) | TokenKind::Float(_) | TokenKind::Str(_)
    )
}
