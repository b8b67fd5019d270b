//! Closed-form expression trees for custom generator entries.
//!
//! Grammar: `+ - * /`, `tanh`, `sech`, `exp`, real constants, the variable
//! `z`, unary minus and parentheses. Keeping models as expression trees makes
//! them analytic by construction and gives exact symbolic derivatives.

use crate::linalg::C64;
use std::fmt;
use thiserror::Error;

#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Const(f64),
    Z,
    Neg(Box<Expr>),
    Add(Box<Expr>, Box<Expr>),
    Sub(Box<Expr>, Box<Expr>),
    Mul(Box<Expr>, Box<Expr>),
    Div(Box<Expr>, Box<Expr>),
    Tanh(Box<Expr>),
    Sech(Box<Expr>),
    Exp(Box<Expr>),
}

#[derive(Debug, Clone, Error, PartialEq)]
pub enum ParseError {
    #[error("unexpected character '{0}' at byte {1}")]
    UnexpectedChar(char, usize),
    #[error("unexpected end of expression")]
    UnexpectedEnd,
    #[error("expected '{0}' at byte {1}")]
    Expected(char, usize),
    #[error("unknown identifier '{0}'")]
    UnknownIdent(String),
    #[error("trailing input at byte {0}")]
    Trailing(usize),
}

fn sech(z: C64) -> C64 {
    C64::new(1.0, 0.0) / z.cosh()
}

impl Expr {
    pub fn eval(&self, z: C64) -> C64 {
        match self {
            Expr::Const(c) => C64::new(*c, 0.0),
            Expr::Z => z,
            Expr::Neg(e) => -e.eval(z),
            Expr::Add(a, b) => a.eval(z) + b.eval(z),
            Expr::Sub(a, b) => a.eval(z) - b.eval(z),
            Expr::Mul(a, b) => a.eval(z) * b.eval(z),
            Expr::Div(a, b) => a.eval(z) / b.eval(z),
            Expr::Tanh(e) => e.eval(z).tanh(),
            Expr::Sech(e) => sech(e.eval(z)),
            Expr::Exp(e) => e.eval(z).exp(),
        }
    }

    /// Symbolic derivative with respect to z.
    pub fn derivative(&self) -> Expr {
        use Expr::*;
        match self {
            Const(_) => Const(0.0),
            Z => Const(1.0),
            Neg(e) => Neg(Box::new(e.derivative())),
            Add(a, b) => Add(Box::new(a.derivative()), Box::new(b.derivative())),
            Sub(a, b) => Sub(Box::new(a.derivative()), Box::new(b.derivative())),
            Mul(a, b) => Add(
                Box::new(Mul(Box::new(a.derivative()), b.clone())),
                Box::new(Mul(a.clone(), Box::new(b.derivative()))),
            ),
            Div(a, b) => Div(
                Box::new(Sub(
                    Box::new(Mul(Box::new(a.derivative()), b.clone())),
                    Box::new(Mul(a.clone(), Box::new(b.derivative()))),
                )),
                Box::new(Mul(b.clone(), b.clone())),
            ),
            // tanh' = sech²
            Tanh(e) => Mul(
                Box::new(Mul(Box::new(Sech(e.clone())), Box::new(Sech(e.clone())))),
                Box::new(e.derivative()),
            ),
            // sech' = -sech·tanh
            Sech(e) => Neg(Box::new(Mul(
                Box::new(Mul(Box::new(Sech(e.clone())), Box::new(Tanh(e.clone())))),
                Box::new(e.derivative()),
            ))),
            Exp(e) => Mul(Box::new(Exp(e.clone())), Box::new(e.derivative())),
        }
    }

    pub fn parse(input: &str) -> Result<Expr, ParseError> {
        let mut p = Parser {
            bytes: input.as_bytes(),
            pos: 0,
        };
        let e = p.expr()?;
        p.skip_ws();
        if p.pos != p.bytes.len() {
            return Err(ParseError::Trailing(p.pos));
        }
        Ok(e)
    }
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Expr::Const(c) => write!(f, "{c}"),
            Expr::Z => write!(f, "z"),
            Expr::Neg(e) => write!(f, "(-{e})"),
            Expr::Add(a, b) => write!(f, "({a} + {b})"),
            Expr::Sub(a, b) => write!(f, "({a} - {b})"),
            Expr::Mul(a, b) => write!(f, "({a} * {b})"),
            Expr::Div(a, b) => write!(f, "({a} / {b})"),
            Expr::Tanh(e) => write!(f, "tanh({e})"),
            Expr::Sech(e) => write!(f, "sech({e})"),
            Expr::Exp(e) => write!(f, "exp({e})"),
        }
    }
}

struct Parser<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Parser<'a> {
    fn skip_ws(&mut self) {
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
    }

    fn peek(&mut self) -> Option<u8> {
        self.skip_ws();
        self.bytes.get(self.pos).copied()
    }

    fn expr(&mut self) -> Result<Expr, ParseError> {
        let mut lhs = self.term()?;
        loop {
            match self.peek() {
                Some(b'+') => {
                    self.pos += 1;
                    let rhs = self.term()?;
                    lhs = Expr::Add(Box::new(lhs), Box::new(rhs));
                }
                Some(b'-') => {
                    self.pos += 1;
                    let rhs = self.term()?;
                    lhs = Expr::Sub(Box::new(lhs), Box::new(rhs));
                }
                _ => return Ok(lhs),
            }
        }
    }

    fn term(&mut self) -> Result<Expr, ParseError> {
        let mut lhs = self.factor()?;
        loop {
            match self.peek() {
                Some(b'*') => {
                    self.pos += 1;
                    let rhs = self.factor()?;
                    lhs = Expr::Mul(Box::new(lhs), Box::new(rhs));
                }
                Some(b'/') => {
                    self.pos += 1;
                    let rhs = self.factor()?;
                    lhs = Expr::Div(Box::new(lhs), Box::new(rhs));
                }
                _ => return Ok(lhs),
            }
        }
    }

    fn factor(&mut self) -> Result<Expr, ParseError> {
        match self.peek() {
            None => Err(ParseError::UnexpectedEnd),
            Some(b'-') => {
                self.pos += 1;
                Ok(Expr::Neg(Box::new(self.factor()?)))
            }
            Some(b'+') => {
                self.pos += 1;
                self.factor()
            }
            Some(b'(') => {
                self.pos += 1;
                let e = self.expr()?;
                if self.peek() != Some(b')') {
                    return Err(ParseError::Expected(')', self.pos));
                }
                self.pos += 1;
                Ok(e)
            }
            Some(c) if c.is_ascii_digit() || c == b'.' => self.number(),
            Some(c) if c.is_ascii_alphabetic() => self.ident(),
            Some(c) => Err(ParseError::UnexpectedChar(c as char, self.pos)),
        }
    }

    fn number(&mut self) -> Result<Expr, ParseError> {
        self.skip_ws();
        let start = self.pos;
        while self.pos < self.bytes.len() {
            let c = self.bytes[self.pos];
            if c.is_ascii_digit() || c == b'.' {
                self.pos += 1;
            } else if (c == b'e' || c == b'E')
                && self.pos > start
                && self
                    .bytes
                    .get(self.pos + 1)
                    .is_some_and(|&d| d.is_ascii_digit() || d == b'+' || d == b'-')
            {
                self.pos += 2;
            } else {
                break;
            }
        }
        let s = std::str::from_utf8(&self.bytes[start..self.pos]).unwrap();
        s.parse::<f64>()
            .map(Expr::Const)
            .map_err(|_| ParseError::UnexpectedChar(self.bytes[start] as char, start))
    }

    fn ident(&mut self) -> Result<Expr, ParseError> {
        self.skip_ws();
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_alphanumeric() {
            self.pos += 1;
        }
        let name = std::str::from_utf8(&self.bytes[start..self.pos]).unwrap();
        match name {
            "z" => Ok(Expr::Z),
            "tanh" | "sech" | "exp" => {
                if self.peek() != Some(b'(') {
                    return Err(ParseError::Expected('(', self.pos));
                }
                self.pos += 1;
                let arg = self.expr()?;
                if self.peek() != Some(b')') {
                    return Err(ParseError::Expected(')', self.pos));
                }
                self.pos += 1;
                Ok(match name {
                    "tanh" => Expr::Tanh(Box::new(arg)),
                    "sech" => Expr::Sech(Box::new(arg)),
                    _ => Expr::Exp(Box::new(arg)),
                })
            }
            other => Err(ParseError::UnknownIdent(other.to_string())),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_and_eval() {
        let e = Expr::parse("tanh(z) * 0.5 + (1 - sech(z)) / 2").unwrap();
        let z = C64::new(0.3, 0.1);
        let expect = z.tanh() * 0.5 + (C64::new(1.0, 0.0) - sech(z)) / 2.0;
        assert!((e.eval(z) - expect).norm() < 1e-15);
    }

    #[test]
    fn derivative_matches_finite_difference() {
        let e = Expr::parse("exp(-z*z) * tanh(2*z) - sech(z)").unwrap();
        let d = e.derivative();
        let z = C64::new(0.4, -0.2);
        let h = 1e-6;
        let fd = (e.eval(z + C64::new(h, 0.0)) - e.eval(z - C64::new(h, 0.0))) / (2.0 * h);
        assert!((d.eval(z) - fd).norm() < 1e-8);
    }

    #[test]
    fn parse_errors_are_reported() {
        assert!(Expr::parse("tanh z").is_err());
        assert!(Expr::parse("2 +").is_err());
        assert!(Expr::parse("cos(z)").is_err());
        assert!(Expr::parse("1 2").is_err());
    }
}
