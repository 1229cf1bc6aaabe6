//! Canonical printer and canonical JSON for parsed modules.

use super::ast::*;
use super::lexer::{format_float, quote};
use std::fmt::Write;

pub fn render_literal(lit: &Literal) -> String {
    match lit {
        Literal::Num(v) => render_number(*v),
        Literal::Str(s) => quote(s),
        Literal::Bool(b) => b.to_string(),
    }
}

fn render_number(v: f64) -> String {
    if v.fract() == 0.0 && v.abs() < 1e15 {
        format!("{}", v as i64)
    } else {
        format_float(v)
    }
}

fn render_dim(d: &DimExpr) -> String {
    match d {
        DimExpr::Fixed(v) => v.to_string(),
        DimExpr::Wild => "?".to_string(),
    }
}

pub fn render_type(t: &TypeExpr) -> String {
    match t {
        TypeExpr::Scalar => "Scalar".into(),
        TypeExpr::Atom => "Atom".into(),
        TypeExpr::Tensor(dims) => {
            format!("Tensor[{}]", dims.iter().map(render_dim).collect::<Vec<_>>().join(", "))
        }
        TypeExpr::List(inner) => format!("List[{}]", render_type(inner)),
        TypeExpr::Image(h, w, c) => {
            format!("Image[{}, {}, {}]", render_dim(h), render_dim(w), render_dim(c))
        }
        TypeExpr::Label(k) => format!("Label[{}]", render_dim(k)),
    }
}

pub fn render_call(c: &Call) -> String {
    let args: Vec<String> = c.args.iter().map(render_expr).collect();
    format!("{}.{}({})", c.object.name(), c.method, args.join(", "))
}

pub fn render_expr(e: &Expr) -> String {
    match &e.kind {
        ExprKind::Lit(l) => render_literal(l),
        ExprKind::Ident(s) => s.clone(),
        ExprKind::Unary { op: UnaryOp::Not, expr } => format!("!({})", render_expr(expr)),
        ExprKind::Unary { op: UnaryOp::Neg, expr } => format!("-({})", render_expr(expr)),
        ExprKind::Binary { op, lhs, rhs } => {
            format!("({} {} {})", render_expr(lhs), op.symbol(), render_expr(rhs))
        }
        ExprKind::Field { base, field } => match base.kind {
            ExprKind::Ident(_) | ExprKind::Field { .. } | ExprKind::Call(_) | ExprKind::Binary { .. } => {
                format!("{}.{}", render_expr(base), field)
            }
            // `-x.y` and `1.y` would bind differently
            _ => format!("({}).{}", render_expr(base), field),
        },
        ExprKind::Type(t) => render_type(t),
        ExprKind::Call(c) => render_call(c),
    }
}

fn render_block(out: &mut String, stmts: &[Stmt], depth: usize) {
    for s in stmts {
        render_stmt(out, s, depth);
    }
}

fn render_stmt(out: &mut String, s: &Stmt, depth: usize) {
    let pad = "  ".repeat(depth);
    match &s.kind {
        StmtKind::Let { name, value } => {
            let _ = writeln!(out, "{pad}let {name} = {}", render_expr(value));
        }
        StmtKind::ForEach { var, source, body } => {
            let _ = writeln!(out, "{pad}foreach {var} in {} {{", render_expr(source));
            render_block(out, body, depth + 1);
            let _ = writeln!(out, "{pad}}}");
        }
        StmtKind::If { cond, then, otherwise } => {
            let _ = writeln!(out, "{pad}if {} {{", render_expr(cond));
            render_block(out, then, depth + 1);
            match otherwise {
                Some(b) => {
                    let _ = writeln!(out, "{pad}}} else {{");
                    render_block(out, b, depth + 1);
                    let _ = writeln!(out, "{pad}}}");
                }
                None => {
                    let _ = writeln!(out, "{pad}}}");
                }
            }
        }
        StmtKind::FailWhen { cond, reason } => {
            let _ = write!(out, "{pad}fail when {}", render_expr(cond));
            if let Some(r) = reason {
                let _ = write!(out, " because {}", quote(r));
            }
            out.push('\n');
        }
        StmtKind::Call(c) => {
            let _ = writeln!(out, "{pad}{}", render_call(c));
        }
        StmtKind::Return(e) => {
            let _ = writeln!(out, "{pad}return {}", render_expr(e));
        }
    }
}

/// Prints modules in canonical form: meta (sorted), params, requires, body.
pub fn render(decls: &[ModuleDecl]) -> String {
    let mut out = String::new();
    for (i, m) in decls.iter().enumerate() {
        if i > 0 {
            out.push('\n');
        }
        let _ = writeln!(out, "{} {} {{", m.kind.keyword(), quote(&m.name));
        for (k, v) in &m.meta {
            let _ = writeln!(out, "  meta {k} = {}", render_literal(v));
        }
        for p in &m.params {
            let _ = write!(out, "  param {}: {}", p.name, render_type(&p.ty));
            if let Some(d) = &p.default {
                let _ = write!(out, " = {}", render_literal(d));
            }
            if let Some(s) = &p.suggest {
                let vals: Vec<String> = s.iter().map(render_literal).collect();
                let _ = write!(out, " suggest [{}]", vals.join(", "));
            }
            out.push('\n');
        }
        for r in &m.requires {
            let _ = writeln!(out, "  requires {} {}", r.kind.keyword(), quote(&r.name));
        }
        render_block(&mut out, &m.body, 1);
        out.push_str("}\n");
    }
    out
}

/// Deterministic JSON encoding of an AST; field order follows the type
/// definitions and map keys are sorted.
pub fn ast_to_canonical_json(decls: &[ModuleDecl]) -> String {
    serde_json::to_string(decls).expect("AST serialization is infallible")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sail::parse;

    #[test]
    fn empty_renders_empty_json_list() {
        assert_eq!(ast_to_canonical_json(&[]), "[]");
    }

    #[test]
    fn render_then_parse_is_structural_identity() {
        let src = r#"
problem "p" {
  param n: Scalar = 10 suggest [10, 50]
  meta field = "x"
  let d = Data.synthetic(n, Tensor[2], Scalar)
  foreach s in d {
    if s.y > -1.5 && !(n == 3) { Train.Predict(s.x, s.y) } else { Test.Compare(s.x, -(s.y)) }
  }
  fail when Env.model().name == "m" because "no \"m\""
  return 1e-12
}
"#;
        let a = parse(src).unwrap();
        let printed = render(&a);
        let b = parse(&printed).unwrap();
        let strip = |v: &[ModuleDecl]| v.iter().map(ModuleDecl::without_spans).collect::<Vec<_>>();
        assert_eq!(strip(&a), strip(&b), "{printed}");
        // printing is a fixpoint after one round
        assert_eq!(printed, render(&b));
    }
}
