//! Random arithmetic expressions with a reference evaluator and a printer that
//! uses the fewest parentheses the grammar allows.

use arbor_core::tools::{BinOp, Expr};
use rand::rngs::StdRng;
use rand::Rng;

pub fn random_expr(rng: &mut StdRng, depth: u32) -> Expr {
    if depth == 0 || rng.gen_bool(0.25) {
        // integers and short decimals print exactly
        let v = if rng.gen_bool(0.5) {
            rng.gen_range(0..20) as f64
        } else {
            rng.gen_range(0..400) as f64 / 8.0
        };
        return Expr::Num(v);
    }
    match rng.gen_range(0..11) {
        0 => Expr::Neg(Box::new(random_expr(rng, depth - 1))),
        k => {
            let op = [BinOp::Add, BinOp::Sub, BinOp::Mul, BinOp::Div, BinOp::Pow][(k - 1) % 5];
            let r = if op == BinOp::Pow {
                // keep powers small so most trees stay finite
                Expr::Num(rng.gen_range(0..4) as f64)
            } else {
                random_expr(rng, depth - 1)
            };
            Expr::Bin(op, Box::new(random_expr(rng, depth - 1)), Box::new(r))
        }
    }
}

/// `None` when evaluation divides by zero or leaves the finite range.
pub fn reference_eval(e: &Expr) -> Option<f64> {
    let v = match e {
        Expr::Num(v) => *v,
        Expr::Neg(a) => -reference_eval(a)?,
        Expr::Bin(op, a, b) => {
            let (x, y) = (reference_eval(a)?, reference_eval(b)?);
            match op {
                BinOp::Add => x + y,
                BinOp::Sub => x - y,
                BinOp::Mul => x * y,
                BinOp::Div if y == 0.0 => return None,
                BinOp::Div => x / y,
                BinOp::Pow => x.powf(y),
            }
        }
    };
    v.is_finite().then_some(v)
}

fn prec(e: &Expr) -> u8 {
    match e {
        Expr::Bin(BinOp::Add | BinOp::Sub, ..) => 1,
        Expr::Bin(BinOp::Mul | BinOp::Div, ..) => 2,
        Expr::Bin(BinOp::Pow, ..) => 3,
        Expr::Neg(_) => 4,
        Expr::Num(_) => 5,
    }
}

/// Minimal-parenthesis rendering: `+ - * /` associate left, `^` right, and
/// unary minus binds tighter than a power's base.
pub fn print_minimal(e: &Expr) -> String {
    let wrap = |s: String, yes: bool| if yes { format!("({s})") } else { s };
    match e {
        Expr::Num(v) => format!("{v}"),
        Expr::Neg(a) => format!("-{}", wrap(print_minimal(a), prec(a) < 4)),
        Expr::Bin(op, a, b) => {
            let p = prec(e);
            let right_assoc = *op == BinOp::Pow;
            let l = wrap(print_minimal(a), prec(a) < p || (right_assoc && prec(a) == p));
            let r = wrap(print_minimal(b), prec(b) < p || (!right_assoc && prec(b) == p));
            let sym = match op {
                BinOp::Add => "+",
                BinOp::Sub => "-",
                BinOp::Mul => "*",
                BinOp::Div => "/",
                BinOp::Pow => "^",
            };
            format!("{l} {sym} {r}")
        }
    }
}

pub fn close(a: f64, b: f64, rel: f64) -> bool {
    a == b || (a - b).abs() <= rel * a.abs().max(b.abs())
}
