//! Scalar math expressions: parsing, evaluation, symbolic differentiation.
//!
//! Expressions are finite ASTs over real literals, named variables, the four
//! arithmetic operators, right-associative `^`, unary minus, and the function
//! set `sin cos exp ln sqrt abs`. The names `pi` and `e` are reserved
//! constants. The grammar with its precedence table is documented in
//! `docs/expr-grammar.md`.
//!
//! Expressions are immutable after parsing and safe to evaluate from several
//! threads at once. Differentiation is total on the whitelist (away from the
//! domain edges of `ln`, `sqrt`, `abs`); results are left unsimplified apart
//! from constant folding.

use std::fmt;
use thiserror::Error;

/// Whitelisted unary functions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Func {
    Sin,
    Cos,
    Exp,
    Ln,
    Sqrt,
    Abs,
}

impl Func {
    fn name(self) -> &'static str {
        match self {
            Func::Sin => "sin",
            Func::Cos => "cos",
            Func::Exp => "exp",
            Func::Ln => "ln",
            Func::Sqrt => "sqrt",
            Func::Abs => "abs",
        }
    }

    fn from_name(name: &str) -> Option<Func> {
        Some(match name {
            "sin" => Func::Sin,
            "cos" => Func::Cos,
            "exp" => Func::Exp,
            "ln" => Func::Ln,
            "sqrt" => Func::Sqrt,
            "abs" => Func::Abs,
            _ => return None,
        })
    }
}

/// Expression AST.
#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Lit(f64),
    Var(String),
    Neg(Box<Expr>),
    Add(Box<Expr>, Box<Expr>),
    Sub(Box<Expr>, Box<Expr>),
    Mul(Box<Expr>, Box<Expr>),
    Div(Box<Expr>, Box<Expr>),
    Pow(Box<Expr>, Box<Expr>),
    Call(Func, Box<Expr>),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ExprError {
    #[error("syntax error at offset {offset}: expected {expected}")]
    Syntax { offset: usize, expected: String },
    #[error("unknown function `{name}` at offset {offset}")]
    UnknownFunction { name: String, offset: usize },
    #[error("unbound variable `{0}`")]
    Unbound(String),
    #[error("domain error: {0}")]
    Domain(String),
}

/// Variable bindings for evaluation. A handful of variables is the norm, so
/// lookups are linear scans.
#[derive(Debug, Clone, Default)]
pub struct Bindings {
    vars: Vec<(String, f64)>,
}

impl Bindings {
    pub fn new() -> Self {
        Self::default()
    }

    /// Bind `name` to `value`, replacing any previous binding of the same
    /// name so that each identifier is bound at most once.
    pub fn set(mut self, name: &str, value: f64) -> Self {
        if let Some(slot) = self.vars.iter_mut().find(|(n, _)| n == name) {
            slot.1 = value;
        } else {
            self.vars.push((name.to_string(), value));
        }
        self
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.vars.iter().find(|(n, _)| n == name).map(|(_, v)| *v)
    }
}

// ---------------------------------------------------------------------------
// Lexer
// ---------------------------------------------------------------------------

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
    Eof,
}

struct Lexer<'a> {
    src: &'a [u8],
    pos: usize,
}

impl<'a> Lexer<'a> {
    fn new(src: &'a str) -> Self {
        Lexer {
            src: src.as_bytes(),
            pos: 0,
        }
    }

    fn skip_ws(&mut self) {
        while self.pos < self.src.len() && self.src[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
    }

    /// Next token together with its starting byte offset.
    fn next(&mut self) -> Result<(Tok, usize), ExprError> {
        self.skip_ws();
        let start = self.pos;
        if self.pos >= self.src.len() {
            return Ok((Tok::Eof, start));
        }
        let c = self.src[self.pos];
        let tok = match c {
            b'+' => {
                self.pos += 1;
                Tok::Plus
            }
            b'-' => {
                self.pos += 1;
                Tok::Minus
            }
            b'*' => {
                self.pos += 1;
                Tok::Star
            }
            b'/' => {
                self.pos += 1;
                Tok::Slash
            }
            b'^' => {
                self.pos += 1;
                Tok::Caret
            }
            b'(' => {
                self.pos += 1;
                Tok::LParen
            }
            b')' => {
                self.pos += 1;
                Tok::RParen
            }
            b'0'..=b'9' | b'.' => {
                let mut end = self.pos;
                while end < self.src.len()
                    && (self.src[end].is_ascii_digit() || self.src[end] == b'.')
                {
                    end += 1;
                }
                // optional exponent part
                if end < self.src.len() && (self.src[end] == b'e' || self.src[end] == b'E') {
                    let mut e = end + 1;
                    if e < self.src.len() && (self.src[e] == b'+' || self.src[e] == b'-') {
                        e += 1;
                    }
                    if e < self.src.len() && self.src[e].is_ascii_digit() {
                        while e < self.src.len() && self.src[e].is_ascii_digit() {
                            e += 1;
                        }
                        end = e;
                    }
                }
                let text = std::str::from_utf8(&self.src[self.pos..end]).unwrap();
                let v: f64 = text.parse().map_err(|_| ExprError::Syntax {
                    offset: start,
                    expected: "number".to_string(),
                })?;
                self.pos = end;
                Tok::Num(v)
            }
            b'a'..=b'z' | b'A'..=b'Z' | b'_' => {
                let mut end = self.pos;
                while end < self.src.len()
                    && (self.src[end].is_ascii_alphanumeric() || self.src[end] == b'_')
                {
                    end += 1;
                }
                let name = std::str::from_utf8(&self.src[self.pos..end])
                    .unwrap()
                    .to_string();
                self.pos = end;
                Tok::Ident(name)
            }
            _ => {
                return Err(ExprError::Syntax {
                    offset: start,
                    expected: format!("token, found `{}`", c as char),
                })
            }
        };
        Ok((tok, start))
    }
}

// ---------------------------------------------------------------------------
// Parser: expr := term (('+'|'-') term)*
//         term := unary (('*'|'/') unary)*
//         unary := '-' unary | power
//         power := atom ('^' unary)?            (right-associative)
//         atom := NUMBER | IDENT | IDENT '(' expr ')' | '(' expr ')'
// ---------------------------------------------------------------------------

struct Parser<'a> {
    lexer: Lexer<'a>,
    cur: Tok,
    cur_at: usize,
}

impl<'a> Parser<'a> {
    fn new(src: &'a str) -> Result<Self, ExprError> {
        let mut lexer = Lexer::new(src);
        let (cur, cur_at) = lexer.next()?;
        Ok(Parser { lexer, cur, cur_at })
    }

    fn bump(&mut self) -> Result<(), ExprError> {
        let (t, at) = self.lexer.next()?;
        self.cur = t;
        self.cur_at = at;
        Ok(())
    }

    fn expr(&mut self) -> Result<Expr, ExprError> {
        let mut lhs = self.term()?;
        loop {
            match self.cur {
                Tok::Plus => {
                    self.bump()?;
                    let rhs = self.term()?;
                    lhs = Expr::Add(Box::new(lhs), Box::new(rhs));
                }
                Tok::Minus => {
                    self.bump()?;
                    let rhs = self.term()?;
                    lhs = Expr::Sub(Box::new(lhs), Box::new(rhs));
                }
                _ => return Ok(lhs),
            }
        }
    }

    fn term(&mut self) -> Result<Expr, ExprError> {
        let mut lhs = self.unary()?;
        loop {
            match self.cur {
                Tok::Star => {
                    self.bump()?;
                    let rhs = self.unary()?;
                    lhs = Expr::Mul(Box::new(lhs), Box::new(rhs));
                }
                Tok::Slash => {
                    self.bump()?;
                    let rhs = self.unary()?;
                    lhs = Expr::Div(Box::new(lhs), Box::new(rhs));
                }
                _ => return Ok(lhs),
            }
        }
    }

    fn unary(&mut self) -> Result<Expr, ExprError> {
        if self.cur == Tok::Minus {
            self.bump()?;
            let inner = self.unary()?;
            Ok(Expr::Neg(Box::new(inner)))
        } else {
            self.power()
        }
    }

    fn power(&mut self) -> Result<Expr, ExprError> {
        let base = self.atom()?;
        if self.cur == Tok::Caret {
            self.bump()?;
            // exponent may itself carry a sign or another power
            let exp = self.unary()?;
            Ok(Expr::Pow(Box::new(base), Box::new(exp)))
        } else {
            Ok(base)
        }
    }

    fn atom(&mut self) -> Result<Expr, ExprError> {
        match self.cur.clone() {
            Tok::Num(v) => {
                self.bump()?;
                Ok(Expr::Lit(v))
            }
            Tok::Ident(name) => {
                let at = self.cur_at;
                self.bump()?;
                if self.cur == Tok::LParen {
                    let func = Func::from_name(&name)
                        .ok_or(ExprError::UnknownFunction { name, offset: at })?;
                    self.bump()?;
                    let arg = self.expr()?;
                    if self.cur != Tok::RParen {
                        return Err(ExprError::Syntax {
                            offset: self.cur_at,
                            expected: "`)`".to_string(),
                        });
                    }
                    self.bump()?;
                    Ok(Expr::Call(func, Box::new(arg)))
                } else {
                    match name.as_str() {
                        "pi" => Ok(Expr::Lit(std::f64::consts::PI)),
                        "e" => Ok(Expr::Lit(std::f64::consts::E)),
                        _ => Ok(Expr::Var(name)),
                    }
                }
            }
            Tok::LParen => {
                self.bump()?;
                let inner = self.expr()?;
                if self.cur != Tok::RParen {
                    return Err(ExprError::Syntax {
                        offset: self.cur_at,
                        expected: "`)`".to_string(),
                    });
                }
                self.bump()?;
                Ok(inner)
            }
            _ => Err(ExprError::Syntax {
                offset: self.cur_at,
                expected: "expression".to_string(),
            }),
        }
    }
}

/// Parse `text` into an expression tree.
pub fn parse(text: &str) -> Result<Expr, ExprError> {
    let mut p = Parser::new(text)?;
    let e = p.expr()?;
    if p.cur != Tok::Eof {
        return Err(ExprError::Syntax {
            offset: p.cur_at,
            expected: "end of input".to_string(),
        });
    }
    Ok(e)
}

/// Evaluate a closed expression under `b`. IEEE double arithmetic; `ln` of a
/// nonpositive argument, `sqrt` of a negative one and division by zero are
/// reported as domain errors rather than silent NaNs.
pub fn eval(e: &Expr, b: &Bindings) -> Result<f64, ExprError> {
    match e {
        Expr::Lit(v) => Ok(*v),
        Expr::Var(name) => b.get(name).ok_or_else(|| ExprError::Unbound(name.clone())),
        Expr::Neg(u) => Ok(-eval(u, b)?),
        Expr::Add(u, v) => Ok(eval(u, b)? + eval(v, b)?),
        Expr::Sub(u, v) => Ok(eval(u, b)? - eval(v, b)?),
        Expr::Mul(u, v) => Ok(eval(u, b)? * eval(v, b)?),
        Expr::Div(u, v) => {
            let num = eval(u, b)?;
            let den = eval(v, b)?;
            if den == 0.0 {
                return Err(ExprError::Domain("division by zero".to_string()));
            }
            Ok(num / den)
        }
        Expr::Pow(u, v) => {
            let base = eval(u, b)?;
            let exp = eval(v, b)?;
            if base == 0.0 && exp < 0.0 {
                return Err(ExprError::Domain(
                    "zero base with negative exponent".to_string(),
                ));
            }
            if base < 0.0 && exp.fract() != 0.0 {
                return Err(ExprError::Domain(
                    "negative base with non-integer exponent".to_string(),
                ));
            }
            Ok(base.powf(exp))
        }
        Expr::Call(f, u) => {
            let x = eval(u, b)?;
            match f {
                Func::Sin => Ok(x.sin()),
                Func::Cos => Ok(x.cos()),
                Func::Exp => Ok(x.exp()),
                Func::Ln => {
                    if x <= 0.0 {
                        Err(ExprError::Domain(format!("ln of nonpositive argument {x}")))
                    } else {
                        Ok(x.ln())
                    }
                }
                Func::Sqrt => {
                    if x < 0.0 {
                        Err(ExprError::Domain(format!("sqrt of negative argument {x}")))
                    } else {
                        Ok(x.sqrt())
                    }
                }
                Func::Abs => Ok(x.abs()),
            }
        }
    }
}

// Constant-folding constructors. These keep repeated differentiation from
// drowning in `0 * …` and `… + 0` debris; no further rewriting is done.

fn lit(v: f64) -> Expr {
    Expr::Lit(v)
}

fn add(a: Expr, b: Expr) -> Expr {
    match (&a, &b) {
        (Expr::Lit(x), Expr::Lit(y)) => lit(x + y),
        (Expr::Lit(x), _) if *x == 0.0 => b,
        (_, Expr::Lit(y)) if *y == 0.0 => a,
        _ => Expr::Add(Box::new(a), Box::new(b)),
    }
}

fn sub(a: Expr, b: Expr) -> Expr {
    match (&a, &b) {
        (Expr::Lit(x), Expr::Lit(y)) => lit(x - y),
        (_, Expr::Lit(y)) if *y == 0.0 => a,
        (Expr::Lit(x), _) if *x == 0.0 => Expr::Neg(Box::new(b)),
        _ => Expr::Sub(Box::new(a), Box::new(b)),
    }
}

fn mul(a: Expr, b: Expr) -> Expr {
    match (&a, &b) {
        (Expr::Lit(x), Expr::Lit(y)) => lit(x * y),
        (Expr::Lit(x), _) if *x == 0.0 => lit(0.0),
        (_, Expr::Lit(y)) if *y == 0.0 => lit(0.0),
        (Expr::Lit(x), _) if *x == 1.0 => b,
        (_, Expr::Lit(y)) if *y == 1.0 => a,
        _ => Expr::Mul(Box::new(a), Box::new(b)),
    }
}

fn div(a: Expr, b: Expr) -> Expr {
    match (&a, &b) {
        (Expr::Lit(x), Expr::Lit(y)) if *y != 0.0 => lit(x / y),
        (_, Expr::Lit(y)) if *y == 1.0 => a,
        _ => Expr::Div(Box::new(a), Box::new(b)),
    }
}

fn neg(a: Expr) -> Expr {
    match &a {
        Expr::Lit(x) => lit(-x),
        _ => Expr::Neg(Box::new(a)),
    }
}

fn pow(a: Expr, b: Expr) -> Expr {
    match (&a, &b) {
        (_, Expr::Lit(y)) if *y == 1.0 => a,
        (_, Expr::Lit(y)) if *y == 0.0 => lit(1.0),
        (Expr::Lit(x), Expr::Lit(y))
            if !(*x < 0.0 && y.fract() != 0.0) && !(*x == 0.0 && *y < 0.0) =>
        {
            lit(x.powf(*y))
        }
        _ => Expr::Pow(Box::new(a), Box::new(b)),
    }
}

/// Exact symbolic derivative of `e` with respect to `var`. The result may be
/// unsimplified but evaluates correctly wherever `e` does.
pub fn differentiate(e: &Expr, var: &str) -> Expr {
    match e {
        Expr::Lit(_) => lit(0.0),
        Expr::Var(name) => {
            if name == var {
                lit(1.0)
            } else {
                lit(0.0)
            }
        }
        Expr::Neg(u) => neg(differentiate(u, var)),
        Expr::Add(u, v) => add(differentiate(u, var), differentiate(v, var)),
        Expr::Sub(u, v) => sub(differentiate(u, var), differentiate(v, var)),
        Expr::Mul(u, v) => {
            let du = differentiate(u, var);
            let dv = differentiate(v, var);
            add(mul(du, (**v).clone()), mul((**u).clone(), dv))
        }
        Expr::Div(u, v) => {
            let du = differentiate(u, var);
            let dv = differentiate(v, var);
            let num = sub(mul(du, (**v).clone()), mul((**u).clone(), dv));
            let den = pow((**v).clone(), lit(2.0));
            div(num, den)
        }
        Expr::Pow(u, w) => {
            let du = differentiate(u, var);
            match &**w {
                // power rule with a constant exponent keeps ln out of scope
                Expr::Lit(c) => mul(mul(lit(*c), pow((**u).clone(), lit(c - 1.0))), du),
                _ => {
                    // d(u^w) = u^w (w' ln u + w u'/u)
                    let dw = differentiate(w, var);
                    let term1 = mul(dw, Expr::Call(Func::Ln, Box::new((**u).clone())));
                    let term2 = mul((**w).clone(), div(du, (**u).clone()));
                    mul(e.clone(), add(term1, term2))
                }
            }
        }
        Expr::Call(f, u) => {
            let du = differentiate(u, var);
            let u = (**u).clone();
            match f {
                Func::Sin => mul(Expr::Call(Func::Cos, Box::new(u)), du),
                Func::Cos => neg(mul(Expr::Call(Func::Sin, Box::new(u)), du)),
                Func::Exp => mul(Expr::Call(Func::Exp, Box::new(u)), du),
                Func::Ln => div(du, u),
                Func::Sqrt => div(du, mul(lit(2.0), Expr::Call(Func::Sqrt, Box::new(u)))),
                Func::Abs => mul(div(u.clone(), Expr::Call(Func::Abs, Box::new(u))), du),
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Pretty-printing with minimal parentheses
// ---------------------------------------------------------------------------

fn prec(e: &Expr) -> u8 {
    match e {
        Expr::Add(..) | Expr::Sub(..) => 1,
        Expr::Mul(..) | Expr::Div(..) => 2,
        Expr::Neg(..) => 3,
        Expr::Pow(..) => 4,
        _ => 5,
    }
}

fn write_at(e: &Expr, min: u8, f: &mut fmt::Formatter<'_>) -> fmt::Result {
    let p = prec(e);
    if p < min {
        write!(f, "(")?;
    }
    match e {
        Expr::Lit(v) => {
            if *v < 0.0 || (*v == 0.0 && v.is_sign_negative()) {
                // negative literals print parenthesized so output reparses
                write!(f, "({v})")?;
            } else {
                write!(f, "{v}")?;
            }
        }
        Expr::Var(name) => write!(f, "{name}")?,
        Expr::Neg(u) => {
            write!(f, "-")?;
            write_at(u, 3, f)?;
        }
        Expr::Add(u, v) => {
            write_at(u, 1, f)?;
            write!(f, " + ")?;
            write_at(v, 2, f)?;
        }
        Expr::Sub(u, v) => {
            write_at(u, 1, f)?;
            write!(f, " - ")?;
            write_at(v, 2, f)?;
        }
        Expr::Mul(u, v) => {
            write_at(u, 2, f)?;
            write!(f, "*")?;
            write_at(v, 3, f)?;
        }
        Expr::Div(u, v) => {
            write_at(u, 2, f)?;
            write!(f, "/")?;
            write_at(v, 3, f)?;
        }
        Expr::Pow(u, v) => {
            write_at(u, 5, f)?;
            write!(f, "^")?;
            write_at(v, 4, f)?;
        }
        Expr::Call(func, u) => {
            write!(f, "{}(", func.name())?;
            write_at(u, 0, f)?;
            write!(f, ")")?;
        }
    }
    if p < min {
        write!(f, ")")?;
    }
    Ok(())
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write_at(self, 0, f)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn b(t: f64) -> Bindings {
        Bindings::new().set("t", t)
    }

    fn bts(t: f64, s: f64) -> Bindings {
        Bindings::new().set("t", t).set("s", s)
    }

    #[test]
    fn parse_simple_division() {
        let e = parse("t/2").unwrap();
        assert_eq!(
            e,
            Expr::Div(Box::new(Expr::Var("t".into())), Box::new(Expr::Lit(2.0)))
        );
    }

    #[test]
    fn parse_precedence() {
        let e = parse("2*t - s^2").unwrap();
        assert_eq!(
            e,
            Expr::Sub(
                Box::new(Expr::Mul(
                    Box::new(Expr::Lit(2.0)),
                    Box::new(Expr::Var("t".into()))
                )),
                Box::new(Expr::Pow(
                    Box::new(Expr::Var("s".into())),
                    Box::new(Expr::Lit(2.0))
                ))
            )
        );
    }

    #[test]
    fn parse_unbalanced_paren_offset() {
        match parse("ln(") {
            Err(ExprError::Syntax { offset, .. }) => assert_eq!(offset, 3),
            other => panic!("expected syntax error, got {other:?}"),
        }
    }

    #[test]
    fn parse_unknown_function() {
        match parse("tan(t)") {
            Err(ExprError::UnknownFunction { name, .. }) => assert_eq!(name, "tan"),
            other => panic!("expected unknown function, got {other:?}"),
        }
    }

    #[test]
    fn parse_empty_input() {
        assert!(matches!(
            parse(""),
            Err(ExprError::Syntax { offset: 0, .. })
        ));
    }

    #[test]
    fn power_is_right_associative_and_binds_over_unary_minus() {
        let e = parse("2^3^2").unwrap();
        assert_eq!(eval(&e, &Bindings::new()).unwrap(), 512.0);
        let e = parse("-2^2").unwrap();
        assert_eq!(eval(&e, &Bindings::new()).unwrap(), -4.0);
        let e = parse("2^-1").unwrap();
        assert_eq!(eval(&e, &Bindings::new()).unwrap(), 0.5);
    }

    #[test]
    fn eval_examples() {
        assert_eq!(eval(&parse("t/2").unwrap(), &b(1.0)).unwrap(), 0.5);
        assert_eq!(
            eval(&parse("exp(0)*3").unwrap(), &Bindings::new()).unwrap(),
            3.0
        );
        assert!(matches!(
            eval(&parse("ln(t)").unwrap(), &b(0.0)),
            Err(ExprError::Domain(_))
        ));
        assert!(matches!(
            eval(&parse("t/2").unwrap(), &Bindings::new()),
            Err(ExprError::Unbound(_))
        ));
        assert!(matches!(
            eval(&parse("1/t").unwrap(), &b(0.0)),
            Err(ExprError::Domain(_))
        ));
    }

    #[test]
    fn constants() {
        assert!(
            (eval(&parse("pi").unwrap(), &Bindings::new()).unwrap() - std::f64::consts::PI).abs()
                < 1e-15
        );
        assert!(
            (eval(&parse("e").unwrap(), &Bindings::new()).unwrap() - std::f64::consts::E).abs()
                < 1e-15
        );
    }

    #[test]
    fn derivative_examples() {
        let d = differentiate(&parse("t^2").unwrap(), "t");
        assert!((eval(&d, &b(3.0)).unwrap() - 6.0).abs() < 1e-12);

        let d = differentiate(&parse("sin(t*s)").unwrap(), "t");
        assert!((eval(&d, &bts(0.0, 5.0)).unwrap() - 5.0).abs() < 1e-12);

        let d = differentiate(&parse("c").unwrap(), "t");
        assert_eq!(eval(&d, &Bindings::new().set("c", 7.0)).unwrap(), 0.0);
    }

    #[test]
    fn derivative_of_quotient_and_sqrt() {
        let d = differentiate(&parse("1/t").unwrap(), "t");
        assert!((eval(&d, &b(2.0)).unwrap() - (-0.25)).abs() < 1e-12);
        let d = differentiate(&parse("sqrt(t)").unwrap(), "t");
        assert!((eval(&d, &b(4.0)).unwrap() - 0.25).abs() < 1e-12);
    }

    #[test]
    fn derivative_of_general_power() {
        // d/dt t^t = t^t (ln t + 1)
        let d = differentiate(&parse("t^t").unwrap(), "t");
        let t = 1.7f64;
        let expect = t.powf(t) * (t.ln() + 1.0);
        assert!((eval(&d, &b(t)).unwrap() - expect).abs() < 1e-10);
    }

    // Small expression generator for the property suites. Division and
    // powers are excluded from the differentiation check to keep finite
    // differences well away from singular points.
    fn smooth_expr() -> impl Strategy<Value = Expr> {
        let leaf = prop_oneof![
            (-2.0..2.0f64).prop_map(Expr::Lit),
            Just(Expr::Var("t".into())),
            Just(Expr::Var("s".into())),
        ];
        leaf.prop_recursive(3, 24, 2, |inner| {
            prop_oneof![
                (inner.clone(), inner.clone())
                    .prop_map(|(a, b)| Expr::Add(Box::new(a), Box::new(b))),
                (inner.clone(), inner.clone())
                    .prop_map(|(a, b)| Expr::Sub(Box::new(a), Box::new(b))),
                (inner.clone(), inner.clone())
                    .prop_map(|(a, b)| Expr::Mul(Box::new(a), Box::new(b))),
                inner
                    .clone()
                    .prop_map(|a| Expr::Call(Func::Sin, Box::new(a))),
                inner
                    .clone()
                    .prop_map(|a| Expr::Call(Func::Cos, Box::new(a))),
                inner.prop_map(|a| Expr::Call(Func::Exp, Box::new(a))),
            ]
        })
    }

    fn any_expr() -> impl Strategy<Value = Expr> {
        let leaf = prop_oneof![
            (-2.0..2.0f64).prop_map(Expr::Lit),
            Just(Expr::Var("t".into())),
            Just(Expr::Var("s".into())),
        ];
        leaf.prop_recursive(3, 24, 2, |inner| {
            prop_oneof![
                (inner.clone(), inner.clone())
                    .prop_map(|(a, b)| Expr::Add(Box::new(a), Box::new(b))),
                (inner.clone(), inner.clone())
                    .prop_map(|(a, b)| Expr::Sub(Box::new(a), Box::new(b))),
                (inner.clone(), inner.clone())
                    .prop_map(|(a, b)| Expr::Mul(Box::new(a), Box::new(b))),
                (inner.clone(), inner.clone())
                    .prop_map(|(a, b)| Expr::Div(Box::new(a), Box::new(b))),
                (inner.clone(), (1.0..3.0f64))
                    .prop_map(|(a, k)| Expr::Pow(Box::new(a), Box::new(Expr::Lit(k.round())))),
                inner.clone().prop_map(|a| Expr::Neg(Box::new(a))),
                inner
                    .clone()
                    .prop_map(|a| Expr::Call(Func::Sin, Box::new(a))),
                inner
                    .clone()
                    .prop_map(|a| Expr::Call(Func::Abs, Box::new(a))),
                inner.prop_map(|a| Expr::Call(Func::Exp, Box::new(a))),
            ]
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(128))]

        // Central finite differences agree with the symbolic derivative to
        // 1e-5 relative tolerance away from huge values.
        #[test]
        fn derivative_matches_finite_differences(
            e in smooth_expr(),
            t in -1.0..1.0f64,
            s in -1.0..1.0f64,
        ) {
            let d = differentiate(&e, "t");
            let h = 1e-6;
            let fp = eval(&e, &bts(t + h, s)).unwrap();
            let fm = eval(&e, &bts(t - h, s)).unwrap();
            let fd = (fp - fm) / (2.0 * h);
            let sym = eval(&d, &bts(t, s)).unwrap();
            let scale = 1.0f64.max(sym.abs()).max(fd.abs());
            // discard numerically hopeless samples (huge exp towers)
            prop_assume!(scale < 1e6);
            prop_assert!((sym - fd).abs() <= 1e-5 * scale,
                "sym={sym} fd={fd} expr={e}");
        }

        // Pretty-printing then reparsing preserves evaluation.
        #[test]
        fn print_parse_roundtrip(
            e in any_expr(),
            t in -2.0..2.0f64,
            s in -2.0..2.0f64,
        ) {
            let printed = e.to_string();
            let back = parse(&printed).unwrap_or_else(|err| {
                panic!("failed to reparse `{printed}`: {err}")
            });
            let bind = bts(t, s);
            match (eval(&e, &bind), eval(&back, &bind)) {
                (Ok(a), Ok(bv)) => {
                    let scale = 1.0f64.max(a.abs());
                    prop_assert!((a - bv).abs() <= 1e-12 * scale,
                        "orig={a} reparsed={bv} printed={printed}");
                }
                (Err(_), Err(_)) => {}
                (a, bv) => prop_assert!(false, "divergent results {a:?} vs {bv:?} for `{printed}`"),
            }
        }
    }
}
