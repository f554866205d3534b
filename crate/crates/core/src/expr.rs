//! Arithmetic expressions for coefficient fields and nonlinearities.
//!
//! Expressions are parsed once against a fixed variable list and evaluated on
//! any [`Scalar`], so the same source string serves both the solver (plain
//! `f64`) and the tangent/adjoint code (dual numbers).
//!
//! Grammar: `+ - * / ^`, unary minus, parentheses, numeric literals, the
//! constants `pi` and `e`, and the functions `sin cos tan exp ln log sqrt abs
//! tanh`.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq)]
enum Node {
    Num(f64),
    Var(usize),
    Neg(Box<Node>),
    Add(Box<Node>, Box<Node>),
    Sub(Box<Node>, Box<Node>),
    Mul(Box<Node>, Box<Node>),
    Div(Box<Node>, Box<Node>),
    Pow(Box<Node>, Box<Node>),
    Call(Func, Box<Node>),
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Func {
    Sin,
    Cos,
    Tan,
    Exp,
    Ln,
    Sqrt,
    Abs,
    Tanh,
}

/// A parsed expression bound to an ordered list of variable names.
#[derive(Clone, Debug)]
pub struct Expr {
    src: String,
    root: Node,
    nvars: usize,
}

impl PartialEq for Expr {
    fn eq(&self, other: &Self) -> bool {
        self.root == other.root && self.nvars == other.nvars
    }
}

impl Expr {
    pub fn parse(src: &str, vars: &[&str]) -> Result<Self> {
        let tokens = lex(src)?;
        let mut p = Parser { tokens, pos: 0, vars, src };
        let root = p.expr()?;
        if p.pos != p.tokens.len() {
            return Err(Error::Expr(format!("unexpected trailing input in `{src}`")));
        }
        Ok(Self { src: src.to_string(), root, nvars: vars.len() })
    }

    pub fn constant(v: f64, vars: &[&str]) -> Self {
        Self { src: format!("{v}"), root: Node::Num(v), nvars: vars.len() }
    }

    pub fn source(&self) -> &str {
        &self.src
    }

    /// True iff the expression references variable number `k`.
    pub fn uses(&self, k: usize) -> bool {
        fn walk(n: &Node, k: usize) -> bool {
            match n {
                Node::Num(_) => false,
                Node::Var(i) => *i == k,
                Node::Neg(a) | Node::Call(_, a) => walk(a, k),
                Node::Add(a, b) | Node::Sub(a, b) | Node::Mul(a, b) | Node::Div(a, b) | Node::Pow(a, b) => {
                    walk(a, k) || walk(b, k)
                }
            }
        }
        walk(&self.root, k)
    }

    /// Returns the literal value if the expression is a single number.
    pub fn as_constant(&self) -> Option<f64> {
        match self.root {
            Node::Num(v) => Some(v),
            _ => None,
        }
    }

    pub fn is_zero(&self) -> bool {
        self.as_constant() == Some(0.0)
    }

    pub fn eval<S: Scalar>(&self, vars: &[S]) -> S {
        debug_assert!(vars.len() >= self.nvars);
        eval_node(&self.root, vars)
    }
}

fn eval_node<S: Scalar>(n: &Node, vars: &[S]) -> S {
    match n {
        Node::Num(v) => S::cst(*v),
        Node::Var(i) => vars[*i],
        Node::Neg(a) => -eval_node(a, vars),
        Node::Add(a, b) => eval_node(a, vars) + eval_node(b, vars),
        Node::Sub(a, b) => eval_node(a, vars) - eval_node(b, vars),
        Node::Mul(a, b) => eval_node(a, vars) * eval_node(b, vars),
        Node::Div(a, b) => eval_node(a, vars) / eval_node(b, vars),
        Node::Pow(a, b) => {
            let base = eval_node(a, vars);
            match **b {
                Node::Num(p) if p.fract() == 0.0 && p.abs() < 64.0 => base.powi(p as i32),
                Node::Num(p) => base.powf(p),
                _ => (eval_node(b, vars) * base.ln()).exp(),
            }
        }
        Node::Call(f, a) => {
            let x = eval_node(a, vars);
            match f {
                Func::Sin => x.sin(),
                Func::Cos => x.cos(),
                Func::Tan => x.sin() / x.cos(),
                Func::Exp => x.exp(),
                Func::Ln => x.ln(),
                Func::Sqrt => x.sqrt(),
                Func::Abs => x.abs(),
                Func::Tanh => x.tanh(),
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
enum Tok {
    Num(f64),
    Ident(String),
    Op(char),
}

fn lex(src: &str) -> Result<Vec<Tok>> {
    let chars: Vec<char> = src.chars().collect();
    let mut out = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        if c.is_whitespace() {
            i += 1;
        } else if c.is_ascii_digit() || c == '.' {
            let start = i;
            while i < chars.len() && (chars[i].is_ascii_digit() || chars[i] == '.') {
                i += 1;
            }
            if i < chars.len() && (chars[i] == 'e' || chars[i] == 'E') {
                let mut j = i + 1;
                if j < chars.len() && (chars[j] == '+' || chars[j] == '-') {
                    j += 1;
                }
                if j < chars.len() && chars[j].is_ascii_digit() {
                    i = j;
                    while i < chars.len() && chars[i].is_ascii_digit() {
                        i += 1;
                    }
                }
            }
            let text: String = chars[start..i].iter().collect();
            let v = text.parse::<f64>().map_err(|_| Error::Expr(format!("bad number `{text}` in `{src}`")))?;
            out.push(Tok::Num(v));
        } else if c.is_ascii_alphabetic() || c == '_' {
            let start = i;
            while i < chars.len() && (chars[i].is_ascii_alphanumeric() || chars[i] == '_') {
                i += 1;
            }
            out.push(Tok::Ident(chars[start..i].iter().collect()));
        } else if "+-*/^()".contains(c) {
            out.push(Tok::Op(c));
            i += 1;
        } else {
            return Err(Error::Expr(format!("unexpected character `{c}` in `{src}`")));
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
    fn peek_op(&self) -> Option<char> {
        match self.tokens.get(self.pos) {
            Some(Tok::Op(c)) => Some(*c),
            _ => None,
        }
    }

    fn expect(&mut self, c: char) -> Result<()> {
        if self.peek_op() == Some(c) {
            self.pos += 1;
            Ok(())
        } else {
            Err(Error::Expr(format!("expected `{c}` in `{}`", self.src)))
        }
    }

    fn expr(&mut self) -> Result<Node> {
        let mut lhs = self.term()?;
        while let Some(op @ ('+' | '-')) = self.peek_op() {
            self.pos += 1;
            let rhs = self.term()?;
            lhs = if op == '+' { Node::Add(lhs.into(), rhs.into()) } else { Node::Sub(lhs.into(), rhs.into()) };
        }
        Ok(lhs)
    }

    fn term(&mut self) -> Result<Node> {
        let mut lhs = self.unary()?;
        while let Some(op @ ('*' | '/')) = self.peek_op() {
            self.pos += 1;
            let rhs = self.unary()?;
            lhs = if op == '*' { Node::Mul(lhs.into(), rhs.into()) } else { Node::Div(lhs.into(), rhs.into()) };
        }
        Ok(lhs)
    }

    fn unary(&mut self) -> Result<Node> {
        match self.peek_op() {
            Some('-') => {
                self.pos += 1;
                match self.unary()? {
                    Node::Num(v) => Ok(Node::Num(-v)),
                    n => Ok(Node::Neg(n.into())),
                }
            }
            Some('+') => {
                self.pos += 1;
                self.unary()
            }
            _ => self.power(),
        }
    }

    fn power(&mut self) -> Result<Node> {
        let base = self.atom()?;
        if self.peek_op() == Some('^') {
            self.pos += 1;
            let exp = self.unary()?;
            return Ok(Node::Pow(base.into(), exp.into()));
        }
        Ok(base)
    }

    fn atom(&mut self) -> Result<Node> {
        let tok = self.tokens.get(self.pos).cloned();
        self.pos += 1;
        match tok {
            Some(Tok::Num(v)) => Ok(Node::Num(v)),
            Some(Tok::Op('(')) => {
                let e = self.expr()?;
                self.expect(')')?;
                Ok(e)
            }
            Some(Tok::Ident(name)) => {
                if self.peek_op() == Some('(') {
                    let f = match name.as_str() {
                        "sin" => Func::Sin,
                        "cos" => Func::Cos,
                        "tan" => Func::Tan,
                        "exp" => Func::Exp,
                        "ln" | "log" => Func::Ln,
                        "sqrt" => Func::Sqrt,
                        "abs" => Func::Abs,
                        "tanh" => Func::Tanh,
                        _ => return Err(Error::Expr(format!("unknown function `{name}` in `{}`", self.src))),
                    };
                    self.pos += 1;
                    let arg = self.expr()?;
                    self.expect(')')?;
                    return Ok(Node::Call(f, arg.into()));
                }
                if let Some(k) = self.vars.iter().position(|v| *v == name) {
                    return Ok(Node::Var(k));
                }
                match name.as_str() {
                    "pi" => Ok(Node::Num(std::f64::consts::PI)),
                    "e" => Ok(Node::Num(std::f64::consts::E)),
                    _ => Err(Error::Expr(format!(
                        "unknown variable `{name}` in `{}` (allowed: {})",
                        self.src,
                        self.vars.join(", ")
                    ))),
                }
            }
            _ => Err(Error::Expr(format!("unexpected end or token in `{}`", self.src))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scalar::Dual;

    const V: &[&str] = &["t", "x", "y"];

    #[test]
    fn precedence_and_functions() {
        let e = Expr::parse("1 + 2*x^2 - sin(pi*x)/2", V).unwrap();
        let x: f64 = 0.25;
        let want = 1.0 + 2.0 * x * x - (std::f64::consts::PI * x).sin() / 2.0;
        assert!((e.eval(&[0.0, x, 0.0]) - want).abs() < 1e-15);
        assert_eq!(Expr::parse("-2^2", V).unwrap().eval(&[0.0f64; 3]), -4.0);
        assert_eq!(Expr::parse("2^-1", V).unwrap().eval(&[0.0f64; 3]), 0.5);
        assert_eq!(Expr::parse("1.5e2", V).unwrap().as_constant(), Some(150.0));
    }

    #[test]
    fn dependency_tracking() {
        let e = Expr::parse("x*cos(t)", V).unwrap();
        assert!(e.uses(0) && e.uses(1) && !e.uses(2));
        assert!(Expr::parse("0", V).unwrap().is_zero());
    }

    #[test]
    fn derivative_through_dual() {
        let e = Expr::parse("sin(x)*x", V).unwrap();
        let x = 0.4;
        let r = e.eval(&[Dual::constant(0.0), Dual::var(x, 1), Dual::constant(0.0)]);
        assert!((r.d[1] - (x.cos() * x + x.sin())).abs() < 1e-15);
    }

    #[test]
    fn rejects_unknown_names() {
        assert!(Expr::parse("z + 1", V).is_err());
        assert!(Expr::parse("foo(x)", V).is_err());
        assert!(Expr::parse("(x", V).is_err());
        assert!(Expr::parse("x x", V).is_err());
    }
}
