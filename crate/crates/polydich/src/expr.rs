//! Closed-form scalar expressions for system definitions.
//!
//! System files describe matrix entries as expressions in the time variable
//! (`n` for sequences, `t` for coefficient fields) and, for perturbations,
//! the state variables `x1..xd`. The grammar is deliberately small:
//! `+ - * / ^`, `exp`, `log`, parentheses and numeric literals. No symbolic
//! simplification happens; evaluation is plain `f64` arithmetic, so repeated
//! evaluation at the same point is bit-identical.

use std::fmt;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Num(f64),
    Var(usize),
    Neg(Box<Expr>),
    Add(Box<Expr>, Box<Expr>),
    Sub(Box<Expr>, Box<Expr>),
    Mul(Box<Expr>, Box<Expr>),
    Div(Box<Expr>, Box<Expr>),
    Pow(Box<Expr>, Box<Expr>),
    Exp(Box<Expr>),
    Log(Box<Expr>),
}

impl Expr {
    /// Parses `src` against the ordered list of allowed variable names.
    pub fn parse(src: &str, vars: &[&str]) -> Result<Expr> {
        let tokens = tokenize(src)?;
        let mut p = Parser {
            tokens,
            pos: 0,
            vars,
            src,
        };
        let e = p.expression(0)?;
        if p.pos != p.tokens.len() {
            return Err(p.error("unexpected trailing input"));
        }
        Ok(e)
    }

    /// Evaluates with `values[i]` bound to the i-th variable name.
    pub fn eval(&self, values: &[f64]) -> f64 {
        match self {
            Expr::Num(v) => *v,
            Expr::Var(i) => values[*i],
            Expr::Neg(a) => -a.eval(values),
            Expr::Add(a, b) => a.eval(values) + b.eval(values),
            Expr::Sub(a, b) => a.eval(values) - b.eval(values),
            Expr::Mul(a, b) => a.eval(values) * b.eval(values),
            Expr::Div(a, b) => a.eval(values) / b.eval(values),
            Expr::Pow(a, b) => a.eval(values).powf(b.eval(values)),
            Expr::Exp(a) => a.eval(values).exp(),
            Expr::Log(a) => a.eval(values).ln(),
        }
    }
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Expr::Num(v) => write!(f, "{v}"),
            Expr::Var(i) => write!(f, "#{i}"),
            Expr::Neg(a) => write!(f, "(-{a})"),
            Expr::Add(a, b) => write!(f, "({a} + {b})"),
            Expr::Sub(a, b) => write!(f, "({a} - {b})"),
            Expr::Mul(a, b) => write!(f, "({a} * {b})"),
            Expr::Div(a, b) => write!(f, "({a} / {b})"),
            Expr::Pow(a, b) => write!(f, "({a} ^ {b})"),
            Expr::Exp(a) => write!(f, "exp({a})"),
            Expr::Log(a) => write!(f, "log({a})"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Num(f64),
    Ident(String),
    Plus,
    Minus,
    Star,
    Slash,
    Caret,
    LParen,
    RParen,
}

fn tokenize(src: &str) -> Result<Vec<Tok>> {
    let mut out = Vec::new();
    let bytes = src.as_bytes();
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i] as char;
        match c {
            ' ' | '\t' | '\n' | '\r' => i += 1,
            '+' => {
                out.push(Tok::Plus);
                i += 1;
            }
            '-' => {
                out.push(Tok::Minus);
                i += 1;
            }
            '*' => {
                out.push(Tok::Star);
                i += 1;
            }
            '/' => {
                out.push(Tok::Slash);
                i += 1;
            }
            '^' => {
                out.push(Tok::Caret);
                i += 1;
            }
            '(' => {
                out.push(Tok::LParen);
                i += 1;
            }
            ')' => {
                out.push(Tok::RParen);
                i += 1;
            }
            '0'..='9' | '.' => {
                let start = i;
                while i < bytes.len() {
                    let d = bytes[i] as char;
                    if d.is_ascii_digit() || d == '.' {
                        i += 1;
                    } else if (d == 'e' || d == 'E')
                        && i + 1 < bytes.len()
                        && ((bytes[i + 1] as char).is_ascii_digit()
                            || bytes[i + 1] == b'+'
                            || bytes[i + 1] == b'-')
                    {
                        i += 2;
                    } else {
                        break;
                    }
                }
                let text = &src[start..i];
                let v: f64 = text
                    .parse()
                    .map_err(|_| Error::Expr(format!("bad number `{text}` at byte {start}")))?;
                out.push(Tok::Num(v));
            }
            c if c.is_ascii_alphabetic() || c == '_' => {
                let start = i;
                while i < bytes.len() {
                    let d = bytes[i] as char;
                    if d.is_ascii_alphanumeric() || d == '_' {
                        i += 1;
                    } else {
                        break;
                    }
                }
                out.push(Tok::Ident(src[start..i].to_string()));
            }
            other => {
                return Err(Error::Expr(format!(
                    "unexpected character `{other}` at byte {i} in `{src}`"
                )))
            }
        }
    }
    Ok(out)
}

struct Parser<'a> {
    tokens: Vec<Tok>,
    pos: usize,
    vars: &'a [&'a str],
    src: &'a str,
}

impl Parser<'_> {
    fn error(&self, msg: &str) -> Error {
        Error::Expr(format!("{msg} (token {} of `{}`)", self.pos, self.src))
    }

    fn peek(&self) -> Option<&Tok> {
        self.tokens.get(self.pos)
    }

    fn bump(&mut self) -> Option<Tok> {
        let t = self.tokens.get(self.pos).cloned();
        if t.is_some() {
            self.pos += 1;
        }
        t
    }

    // Precedence climbing; `^` binds tightest and associates right.
    fn expression(&mut self, min_bp: u8) -> Result<Expr> {
        let mut lhs = match self.bump() {
            Some(Tok::Num(v)) => Expr::Num(v),
            Some(Tok::Ident(name)) => self.ident(&name)?,
            Some(Tok::Minus) => Expr::Neg(Box::new(self.expression(5)?)),
            Some(Tok::Plus) => self.expression(5)?,
            Some(Tok::LParen) => {
                let e = self.expression(0)?;
                match self.bump() {
                    Some(Tok::RParen) => e,
                    _ => return Err(self.error("expected `)`")),
                }
            }
            _ => return Err(self.error("expected a value")),
        };
        loop {
            let (lbp, rbp) = match self.peek() {
                Some(Tok::Plus) | Some(Tok::Minus) => (1, 2),
                Some(Tok::Star) | Some(Tok::Slash) => (3, 4),
                Some(Tok::Caret) => (7, 6),
                _ => break,
            };
            if lbp < min_bp {
                break;
            }
            let op = self.bump().unwrap();
            let rhs = self.expression(rbp)?;
            lhs = match op {
                Tok::Plus => Expr::Add(Box::new(lhs), Box::new(rhs)),
                Tok::Minus => Expr::Sub(Box::new(lhs), Box::new(rhs)),
                Tok::Star => Expr::Mul(Box::new(lhs), Box::new(rhs)),
                Tok::Slash => Expr::Div(Box::new(lhs), Box::new(rhs)),
                Tok::Caret => Expr::Pow(Box::new(lhs), Box::new(rhs)),
                _ => unreachable!(),
            };
        }
        Ok(lhs)
    }

    fn ident(&mut self, name: &str) -> Result<Expr> {
        if name == "exp" || name == "log" {
            match self.bump() {
                Some(Tok::LParen) => {}
                _ => return Err(self.error("function call needs `(`")),
            }
            let arg = self.expression(0)?;
            match self.bump() {
                Some(Tok::RParen) => {}
                _ => return Err(self.error("expected `)` after function argument")),
            }
            return Ok(if name == "exp" {
                Expr::Exp(Box::new(arg))
            } else {
                Expr::Log(Box::new(arg))
            });
        }
        match self.vars.iter().position(|v| *v == name) {
            Some(i) => Ok(Expr::Var(i)),
            None => Err(Error::Expr(format!(
                "unknown identifier `{name}` in `{}` (allowed: {:?})",
                self.src, self.vars
            ))),
        }
    }
}
