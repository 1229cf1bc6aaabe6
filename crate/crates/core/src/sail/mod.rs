//! The SAIL module language: lexer, parser, canonical printer.

pub mod ast;
pub mod lexer;
pub mod parser;
pub mod printer;

pub use ast::{ModuleDecl, ModuleKind};
pub use lexer::{tokenize, LexError, Span, Token, TokenKind};
pub use parser::{parse, ParseError};
pub use printer::{ast_to_canonical_json, render};
