use serde::{Deserialize, Serialize};
use std::fmt;
use thiserror::Error;

/// Location of a token or AST node inside a source text.
///
/// `offset` is a byte offset, `line`/`col` are 1-based and `col` counts
/// characters, `len` counts bytes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct Span {
    pub offset: usize,
    pub line: u32,
    pub col: u32,
    pub len: usize,
}

impl Span {
    pub fn end(&self) -> usize {
        self.offset + self.len
    }

    /// Smallest span covering both `self` and `other`.
    pub fn to(self, other: Span) -> Span {
        if other.end() <= self.offset {
            return self;
        }
        Span { len: other.end() - self.offset, ..self }
    }
}

impl fmt::Display for Span {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.line, self.col)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TokenKind {
    KwProblem,
    KwModel,
    KwMetric,
    KwRanking,
    KwSoftware,
    KwHardware,
    KwConverter,
    KwMeta,
    KwParam,
    KwRequires,
    KwSuggest,
    KwLet,
    KwForeach,
    KwIn,
    KwIf,
    KwElse,
    KwFail,
    KwWhen,
    KwBecause,
    KwReturn,
    KwTrue,
    KwFalse,
    Ident(String),
    Int(u64),
    Float(f64),
    Str(String),
    LBrace,
    RBrace,
    LParen,
    RParen,
    LBracket,
    RBracket,
    Comma,
    Colon,
    Dot,
    Question,
    Assign,
    EqEq,
    NotEq,
    Lt,
    Le,
    Gt,
    Ge,
    Plus,
    Minus,
    Star,
    Slash,
    Bang,
    AndAnd,
    OrOr,
}

impl TokenKind {
    pub fn describe(&self) -> String {
        match self {
            TokenKind::Ident(s) => format!("identifier `{s}`"),
            TokenKind::Int(v) => format!("integer `{v}`"),
            TokenKind::Float(v) => format!("number `{v}`"),
            TokenKind::Str(s) => format!("string {s:?}"),
            other => format!("`{}`", other.text()),
        }
    }

    /// Source text of fixed tokens; literal-carrying tokens render their value.
    pub fn text(&self) -> String {
        let s = match self {
            TokenKind::KwProblem => "problem",
            TokenKind::KwModel => "model",
            TokenKind::KwMetric => "metric",
            TokenKind::KwRanking => "ranking",
            TokenKind::KwSoftware => "software",
            TokenKind::KwHardware => "hardware",
            TokenKind::KwConverter => "converter",
            TokenKind::KwMeta => "meta",
            TokenKind::KwParam => "param",
            TokenKind::KwRequires => "requires",
            TokenKind::KwSuggest => "suggest",
            TokenKind::KwLet => "let",
            TokenKind::KwForeach => "foreach",
            TokenKind::KwIn => "in",
            TokenKind::KwIf => "if",
            TokenKind::KwElse => "else",
            TokenKind::KwFail => "fail",
            TokenKind::KwWhen => "when",
            TokenKind::KwBecause => "because",
            TokenKind::KwReturn => "return",
            TokenKind::KwTrue => "true",
            TokenKind::KwFalse => "false",
            TokenKind::Ident(s) => return s.clone(),
            TokenKind::Int(v) => return v.to_string(),
            TokenKind::Float(v) => return format_float(*v),
            TokenKind::Str(s) => return quote(s),
            TokenKind::LBrace => "{",
            TokenKind::RBrace => "}",
            TokenKind::LParen => "(",
            TokenKind::RParen => ")",
            TokenKind::LBracket => "[",
            TokenKind::RBracket => "]",
            TokenKind::Comma => ",",
            TokenKind::Colon => ":",
            TokenKind::Dot => ".",
            TokenKind::Question => "?",
            TokenKind::Assign => "=",
            TokenKind::EqEq => "==",
            TokenKind::NotEq => "!=",
            TokenKind::Lt => "<",
            TokenKind::Le => "<=",
            TokenKind::Gt => ">",
            TokenKind::Ge => ">=",
            TokenKind::Plus => "+",
            TokenKind::Minus => "-",
            TokenKind::Star => "*",
            TokenKind::Slash => "/",
            TokenKind::Bang => "!",
            TokenKind::AndAnd => "&&",
            TokenKind::OrOr => "||",
        };
        s.to_string()
    }
}

/// Renders a float so that the lexer reads back the same value.
pub fn format_float(v: f64) -> String {
    let s = format!("{v:?}");
    if s.contains('.') || s.contains('e') || s.contains("inf") || s.contains("NaN") {
        s
    } else {
        format!("{s}.0")
    }
}

pub fn quote(s: &str) -> String {
    let mut out = String::with_capacity(s.len() + 2);
    out.push('"');
    for c in s.chars() {
        match c {
            '"' => out.push_str("\\\""),
            '\\' => out.push_str("\\\\"),
            '\n' => out.push_str("\\n"),
            '\t' => out.push_str("\\t"),
            c => out.push(c),
        }
    }
    out.push('"');
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct Token {
    pub kind: TokenKind,
    pub span: Span,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LexError {
    #[error("{span}: illegal character {ch:?}")]
    IllegalChar { ch: char, span: Span },
    #[error("{span}: unterminated string literal")]
    UnterminatedString { span: Span },
    #[error("{span}: invalid escape sequence")]
    BadEscape { span: Span },
    #[error("{span}: malformed number `{text}`")]
    BadNumber { text: String, span: Span },
}

impl LexError {
    pub fn span(&self) -> Span {
        match self {
            LexError::IllegalChar { span, .. }
            | LexError::UnterminatedString { span }
            | LexError::BadEscape { span }
            | LexError::BadNumber { span, .. } => *span,
        }
    }
}

fn keyword(word: &str) -> Option<TokenKind> {
    Some(match word {
        "problem" => TokenKind::KwProblem,
        "model" => TokenKind::KwModel,
        "metric" => TokenKind::KwMetric,
        "ranking" => TokenKind::KwRanking,
        "software" => TokenKind::KwSoftware,
        "hardware" => TokenKind::KwHardware,
        "converter" => TokenKind::KwConverter,
        "meta" => TokenKind::KwMeta,
        "param" => TokenKind::KwParam,
        "requires" => TokenKind::KwRequires,
        "suggest" => TokenKind::KwSuggest,
        "let" => TokenKind::KwLet,
        "foreach" => TokenKind::KwForeach,
        "in" => TokenKind::KwIn,
        "if" => TokenKind::KwIf,
        "else" => TokenKind::KwElse,
        "fail" => TokenKind::KwFail,
        "when" => TokenKind::KwWhen,
        "because" => TokenKind::KwBecause,
        "return" => TokenKind::KwReturn,
        "true" => TokenKind::KwTrue,
        "false" => TokenKind::KwFalse,
        _ => return None,
    })
}

struct Cursor<'a> {
    src: &'a str,
    pos: usize,
    line: u32,
    col: u32,
}

impl<'a> Cursor<'a> {
    fn peek(&self) -> Option<char> {
        self.src[self.pos..].chars().next()
    }

    fn peek2(&self) -> Option<char> {
        let mut it = self.src[self.pos..].chars();
        it.next();
        it.next()
    }

    fn bump(&mut self) -> Option<char> {
        let c = self.peek()?;
        self.pos += c.len_utf8();
        if c == '\n' {
            self.line += 1;
            self.col = 1;
        } else {
            self.col += 1;
        }
        Some(c)
    }

    fn mark(&self) -> Span {
        Span { offset: self.pos, line: self.line, col: self.col, len: 0 }
    }

    fn close(&self, start: Span) -> Span {
        Span { len: self.pos - start.offset, ..start }
    }
}

/// Splits SAIL source into tokens. Whitespace and `//` comments are dropped.
pub fn tokenize(text: &str) -> Result<Vec<Token>, LexError> {
    let mut cur = Cursor { src: text, pos: 0, line: 1, col: 1 };
    let mut out = Vec::new();
    while let Some(c) = cur.peek() {
        if c.is_whitespace() {
            cur.bump();
            continue;
        }
        if c == '/' && cur.peek2() == Some('/') {
            while let Some(c) = cur.peek() {
                if c == '\n' {
                    break;
                }
                cur.bump();
            }
            continue;
        }
        let start = cur.mark();
        let kind = if c.is_ascii_alphabetic() || c == '_' {
            let begin = cur.pos;
            while matches!(cur.peek(), Some(c) if c.is_ascii_alphanumeric() || c == '_') {
                cur.bump();
            }
            let word = &text[begin..cur.pos];
            keyword(word).unwrap_or_else(|| TokenKind::Ident(word.to_string()))
        } else if c.is_ascii_digit() {
            lex_number(&mut cur, start)?
        } else if c == '"' {
            lex_string(&mut cur, start)?
        } else {
            cur.bump();
            let two = |cur: &mut Cursor, next: char, yes: TokenKind, no: Option<TokenKind>| {
                if cur.peek() == Some(next) {
                    cur.bump();
                    Some(yes)
                } else {
                    no
                }
            };
            let kind = match c {
                '{' => Some(TokenKind::LBrace),
                '}' => Some(TokenKind::RBrace),
                '(' => Some(TokenKind::LParen),
                ')' => Some(TokenKind::RParen),
                '[' => Some(TokenKind::LBracket),
                ']' => Some(TokenKind::RBracket),
                ',' => Some(TokenKind::Comma),
                ':' => Some(TokenKind::Colon),
                '.' => Some(TokenKind::Dot),
                '?' => Some(TokenKind::Question),
                '+' => Some(TokenKind::Plus),
                '-' => Some(TokenKind::Minus),
                '*' => Some(TokenKind::Star),
                '/' => Some(TokenKind::Slash),
                '=' => two(&mut cur, '=', TokenKind::EqEq, Some(TokenKind::Assign)),
                '!' => two(&mut cur, '=', TokenKind::NotEq, Some(TokenKind::Bang)),
                '<' => two(&mut cur, '=', TokenKind::Le, Some(TokenKind::Lt)),
                '>' => two(&mut cur, '=', TokenKind::Ge, Some(TokenKind::Gt)),
                '&' => two(&mut cur, '&', TokenKind::AndAnd, None),
                '|' => two(&mut cur, '|', TokenKind::OrOr, None),
                _ => None,
            };
            match kind {
                Some(k) => k,
                None => {
                    return Err(LexError::IllegalChar {
                        ch: c,
                        span: Span { len: c.len_utf8(), ..start },
                    })
                }
            }
        };
        out.push(Token { kind, span: cur.close(start) });
    }
    Ok(out)
}

fn lex_number(cur: &mut Cursor, start: Span) -> Result<TokenKind, LexError> {
    let begin = cur.pos;
    let mut is_float = false;
    while matches!(cur.peek(), Some(c) if c.is_ascii_digit()) {
        cur.bump();
    }
    if cur.peek() == Some('.') && matches!(cur.peek2(), Some(c) if c.is_ascii_digit()) {
        is_float = true;
        cur.bump();
        while matches!(cur.peek(), Some(c) if c.is_ascii_digit()) {
            cur.bump();
        }
    }
    if matches!(cur.peek(), Some('e' | 'E')) {
        let save = (cur.pos, cur.line, cur.col);
        cur.bump();
        if matches!(cur.peek(), Some('+' | '-')) {
            cur.bump();
        }
        if matches!(cur.peek(), Some(c) if c.is_ascii_digit()) {
            is_float = true;
            while matches!(cur.peek(), Some(c) if c.is_ascii_digit()) {
                cur.bump();
            }
        } else {
            (cur.pos, cur.line, cur.col) = save;
        }
    }
    let text = &cur.src[begin..cur.pos];
    let bad = || LexError::BadNumber { text: text.to_string(), span: cur.close(start) };
    if is_float {
        text.parse::<f64>().map(TokenKind::Float).map_err(|_| bad())
    } else {
        text.parse::<u64>().map(TokenKind::Int).map_err(|_| bad())
    }
}

fn lex_string(cur: &mut Cursor, start: Span) -> Result<TokenKind, LexError> {
    cur.bump();
    let mut s = String::new();
    loop {
        match cur.bump() {
            None | Some('\n') => {
                return Err(LexError::UnterminatedString { span: cur.close(start) })
            }
            Some('"') => return Ok(TokenKind::Str(s)),
            Some('\\') => {
                let esc = cur.mark();
                match cur.bump() {
                    Some('"') => s.push('"'),
                    Some('\\') => s.push('\\'),
                    Some('n') => s.push('\n'),
                    Some('t') => s.push('\t'),
                    None => return Err(LexError::UnterminatedString { span: cur.close(start) }),
                    Some(_) => return Err(LexError::BadEscape { span: cur.close(esc) }),
                }
            }
            Some(c) => s.push(c),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn kinds(src: &str) -> Vec<TokenKind> {
        tokenize(src).unwrap().into_iter().map(|t| t.kind).collect()
    }

    #[test]
    fn empty_input() {
        assert!(tokenize("").unwrap().is_empty());
        assert!(tokenize("  // only a comment\n").unwrap().is_empty());
    }

    #[test]
    fn module_header() {
        assert_eq!(
            kinds(r#"problem "p" {}"#),
            vec![
                TokenKind::KwProblem,
                TokenKind::Str("p".into()),
                TokenKind::LBrace,
                TokenKind::RBrace
            ]
        );
    }

    #[test]
    fn illegal_char_reports_position() {
        let err = tokenize("@").unwrap_err();
        assert_eq!(err.span().line, 1);
        assert_eq!(err.span().col, 1);
        let err = tokenize("model \"m\" {\n  let x = #\n}").unwrap_err();
        assert_eq!((err.span().line, err.span().col), (2, 11));
    }

    #[test]
    fn unterminated_string() {
        assert!(matches!(tokenize("\"abc"), Err(LexError::UnterminatedString { .. })));
    }

    #[test]
    fn numbers_and_operators() {
        assert_eq!(
            kinds("16 0.1 1e9 2.5e-3 <= != && ||"),
            vec![
                TokenKind::Int(16),
                TokenKind::Float(0.1),
                TokenKind::Float(1e9),
                TokenKind::Float(2.5e-3),
                TokenKind::Le,
                TokenKind::NotEq,
                TokenKind::AndAnd,
                TokenKind::OrOr
            ]
        );
        // `x.y` must not lex as a float
        assert_eq!(
            kinds("s.x"),
            vec![TokenKind::Ident("s".into()), TokenKind::Dot, TokenKind::Ident("x".into())]
        );
    }

    #[test]
    fn float_text_round_trips() {
        for v in [16.0, 0.1, 1e9, 2.5e-3, 1e-12] {
            let text = format_float(v);
            assert_eq!(kinds(&text), vec![TokenKind::Float(v)], "{text}");
        }
    }
}
