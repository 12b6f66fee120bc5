//! Arithmetic expressions by recursive descent.
//!
//! ```text
//! expr   := term (('+' | '-') term)*
//! term   := factor (('*' | '/') factor)*
//! factor := power
//! power  := unary ('^' power)?
//! unary  := '-' unary | atom
//! atom   := number | '(' expr ')'
//! ```
//!
//! `^` is right-associative and unary minus binds tighter than `^`, so
//! `-2^2` is 4.

use std::fmt;

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CalcError {
    #[error("parse error at position {position}: expected {expected}")]
    ParseError { position: usize, expected: String },
    #[error("division by zero")]
    DivisionByZero,
    #[error("overflow: result is not finite")]
    Overflow,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
    Pow,
}

impl BinOp {
    fn symbol(self) -> char {
        match self {
            BinOp::Add => '+',
            BinOp::Sub => '-',
            BinOp::Mul => '*',
            BinOp::Div => '/',
            BinOp::Pow => '^',
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Num(f64),
    Neg(Box<Expr>),
    Bin(BinOp, Box<Expr>, Box<Expr>),
}

/// Prints fully parenthesized, so parsing the output rebuilds the same tree.
impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Expr::Num(v) if *v < 0.0 || (*v == 0.0 && v.is_sign_negative()) => write!(f, "(-{})", -v),
            Expr::Num(v) => write!(f, "{v}"),
            Expr::Neg(e) => write!(f, "(-{e})"),
            Expr::Bin(op, l, r) => write!(f, "({l}{}{r})", op.symbol()),
        }
    }
}

fn finite(v: f64) -> Result<f64, CalcError> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(CalcError::Overflow)
    }
}

impl Expr {
    pub fn eval(&self) -> Result<f64, CalcError> {
        match self {
            Expr::Num(v) => finite(*v),
            Expr::Neg(e) => Ok(-e.eval()?),
            Expr::Bin(op, l, r) => {
                let (a, b) = (l.eval()?, r.eval()?);
                finite(match op {
                    BinOp::Add => a + b,
                    BinOp::Sub => a - b,
                    BinOp::Mul => a * b,
                    BinOp::Div if b == 0.0 => return Err(CalcError::DivisionByZero),
                    BinOp::Div => a / b,
                    BinOp::Pow => a.powf(b),
                })
            }
        }
    }
}

struct Parser<'a> {
    src: &'a [u8],
    pos: usize,
}

impl Parser<'_> {
    fn skip_ws(&mut self) {
        while self.src.get(self.pos).is_some_and(u8::is_ascii_whitespace) {
            self.pos += 1;
        }
    }

    fn peek(&mut self) -> Option<u8> {
        self.skip_ws();
        self.src.get(self.pos).copied()
    }

    fn fail<T>(&self, expected: &str) -> Result<T, CalcError> {
        Err(CalcError::ParseError {
            position: self.pos,
            expected: expected.into(),
        })
    }

    fn expr(&mut self) -> Result<Expr, CalcError> {
        let mut lhs = self.term()?;
        while let Some(c @ (b'+' | b'-')) = self.peek() {
            self.pos += 1;
            let op = if c == b'+' { BinOp::Add } else { BinOp::Sub };
            lhs = Expr::Bin(op, Box::new(lhs), Box::new(self.term()?));
        }
        Ok(lhs)
    }

    fn term(&mut self) -> Result<Expr, CalcError> {
        let mut lhs = self.power()?;
        while let Some(c @ (b'*' | b'/')) = self.peek() {
            self.pos += 1;
            let op = if c == b'*' { BinOp::Mul } else { BinOp::Div };
            lhs = Expr::Bin(op, Box::new(lhs), Box::new(self.power()?));
        }
        Ok(lhs)
    }

    fn power(&mut self) -> Result<Expr, CalcError> {
        let base = self.unary()?;
        if self.peek() == Some(b'^') {
            self.pos += 1;
            let exponent = self.power()?;
            return Ok(Expr::Bin(BinOp::Pow, Box::new(base), Box::new(exponent)));
        }
        Ok(base)
    }

    fn unary(&mut self) -> Result<Expr, CalcError> {
        if self.peek() == Some(b'-') {
            self.pos += 1;
            return Ok(Expr::Neg(Box::new(self.unary()?)));
        }
        self.atom()
    }

    fn atom(&mut self) -> Result<Expr, CalcError> {
        match self.peek() {
            Some(b'(') => {
                self.pos += 1;
                let e = self.expr()?;
                if self.peek() != Some(b')') {
                    return self.fail("')'");
                }
                self.pos += 1;
                Ok(e)
            }
            Some(c) if c.is_ascii_digit() || c == b'.' => self.number(),
            _ => self.fail("number or '('"),
        }
    }

    fn number(&mut self) -> Result<Expr, CalcError> {
        let start = self.pos;
        let digits = |p: &mut Self| {
            let s = p.pos;
            while p.src.get(p.pos).is_some_and(u8::is_ascii_digit) {
                p.pos += 1;
            }
            p.pos - s
        };
        let mut n = digits(self);
        if self.src.get(self.pos) == Some(&b'.') {
            self.pos += 1;
            n += digits(self);
        }
        if n == 0 {
            self.pos = start;
            return self.fail("digit");
        }
        if matches!(self.src.get(self.pos), Some(b'e' | b'E')) {
            let mark = self.pos;
            self.pos += 1;
            if matches!(self.src.get(self.pos), Some(b'+' | b'-')) {
                self.pos += 1;
            }
            if digits(self) == 0 {
                self.pos = mark + 1;
                return self.fail("exponent digits");
            }
        }
        let text = std::str::from_utf8(&self.src[start..self.pos]).expect("ascii lexeme");
        let v: f64 = text.parse().map_err(|_| CalcError::ParseError {
            position: start,
            expected: "number".into(),
        })?;
        Ok(Expr::Num(v))
    }
}

pub fn parse(src: &str) -> Result<Expr, CalcError> {
    let mut p = Parser {
        src: src.as_bytes(),
        pos: 0,
    };
    let e = p.expr()?;
    if p.peek().is_some() {
        return p.fail("operator or end of input");
    }
    Ok(e)
}

pub fn calc_eval(src: &str) -> Result<f64, CalcError> {
    parse(src)?.eval()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pos(src: &str) -> usize {
        match calc_eval(src) {
            Err(CalcError::ParseError { position, .. }) => position,
            other => panic!("{src}: expected a parse error, got {other:?}"),
        }
    }

    #[test]
    fn fixed_cases() {
        assert_eq!(calc_eval("2+3*4"), Ok(14.0));
        assert_eq!(calc_eval("(1+2)^3"), Ok(27.0));
        assert_eq!(calc_eval("2^3^2"), Ok(512.0));
        assert_eq!(calc_eval("10/4"), Ok(2.5));
        assert_eq!(calc_eval("1/0"), Err(CalcError::DivisionByZero));
        assert_eq!(pos("2+"), 2);
    }

    #[test]
    fn unary_minus_binds_tighter_than_power() {
        assert_eq!(calc_eval("-2^2"), Ok(4.0));
        assert_eq!(calc_eval("2^-1"), Ok(0.5));
        assert_eq!(calc_eval("--3"), Ok(3.0));
        assert_eq!(calc_eval("1 - -1"), Ok(2.0));
    }

    #[test]
    fn left_associative_arithmetic() {
        assert_eq!(calc_eval("10-4-3"), Ok(3.0));
        assert_eq!(calc_eval("64/4/2"), Ok(8.0));
        assert_eq!(calc_eval(" 1.5e2 + .5 "), Ok(150.5));
    }

    #[test]
    fn errors() {
        assert_eq!(calc_eval("10^400"), Err(CalcError::Overflow));
        assert_eq!(calc_eval("0^-1"), Err(CalcError::Overflow));
        assert_eq!(pos(""), 0);
        assert_eq!(pos("(1+2"), 4);
        assert_eq!(pos("2 3"), 2);
        assert_eq!(pos("1e"), 2);
        assert_eq!(pos("abc"), 0);
        assert_eq!(pos("."), 0);
    }

    #[test]
    fn display_reparses_to_the_same_tree() {
        let e = Expr::Bin(
            BinOp::Pow,
            Box::new(Expr::Neg(Box::new(Expr::Num(2.0)))),
            Box::new(Expr::Bin(BinOp::Sub, Box::new(Expr::Num(-0.5)), Box::new(Expr::Num(3.0)))),
        );
        let printed = e.to_string();
        let back = parse(&printed).unwrap();
        assert_eq!(back.eval(), e.eval());
    }
}
