//! A small expression grammar for inline coefficient descriptions.
//!
//! Configs stay declarative: arithmetic (`+ - * / ^`), `clip`, `sin`, `cos`,
//! `exp`, `abs`, `sqrt` over the scalar variables `t`, `x`, `u`, the joint
//! cloud's means `xbar` and `ubar`, and `pimom(p)` (the p-th moment of the
//! current node of the state-law path). Anything richer is registered
//! programmatically, not through config files.

use std::fmt;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Var {
    T,
    X,
    U,
    XBar,
    UBar,
}

impl fmt::Display for Var {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Var::T => "t",
            Var::X => "x",
            Var::U => "u",
            Var::XBar => "xbar",
            Var::UBar => "ubar",
        };
        write!(f, "{s}")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Func1 {
    Sin,
    Cos,
    Exp,
    Abs,
    Sqrt,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Num(f64),
    Var(Var),
    Neg(Box<Expr>),
    Add(Box<Expr>, Box<Expr>),
    Sub(Box<Expr>, Box<Expr>),
    Mul(Box<Expr>, Box<Expr>),
    Div(Box<Expr>, Box<Expr>),
    Pow(Box<Expr>, Box<Expr>),
    Call(Func1, Box<Expr>),
    Clip(Box<Expr>, Box<Expr>, Box<Expr>),
    /// p-th moment of the current state-law node; the order is a literal.
    PiMom(f64),
}

impl Expr {
    pub fn eval(&self, ctx: &ExprInputs) -> f64 {
        match self {
            Expr::Num(v) => *v,
            Expr::Var(Var::T) => ctx.t,
            Expr::Var(Var::X) => ctx.x,
            Expr::Var(Var::U) => ctx.u,
            Expr::Var(Var::XBar) => ctx.xbar,
            Expr::Var(Var::UBar) => ctx.ubar,
            Expr::Neg(e) => -e.eval(ctx),
            Expr::Add(a, b) => a.eval(ctx) + b.eval(ctx),
            Expr::Sub(a, b) => a.eval(ctx) - b.eval(ctx),
            Expr::Mul(a, b) => a.eval(ctx) * b.eval(ctx),
            Expr::Div(a, b) => a.eval(ctx) / b.eval(ctx),
            Expr::Pow(a, b) => a.eval(ctx).powf(b.eval(ctx)),
            Expr::Call(f, e) => {
                let v = e.eval(ctx);
                match f {
                    Func1::Sin => v.sin(),
                    Func1::Cos => v.cos(),
                    Func1::Exp => v.exp(),
                    Func1::Abs => v.abs(),
                    Func1::Sqrt => v.sqrt(),
                }
            }
            Expr::Clip(e, lo, hi) => e.eval(ctx).clamp(lo.eval(ctx), hi.eval(ctx)),
            Expr::PiMom(p) => (ctx.pimom)(*p),
        }
    }

    /// Variables referenced anywhere in the expression.
    pub fn variables(&self) -> Vec<&'static str> {
        let mut out = Vec::new();
        self.collect_vars(&mut out);
        out.sort();
        out.dedup();
        out
    }

    fn collect_vars(&self, out: &mut Vec<&'static str>) {
        match self {
            Expr::Num(_) => {}
            Expr::Var(v) => out.push(match v {
                Var::T => "t",
                Var::X => "x",
                Var::U => "u",
                Var::XBar => "xbar",
                Var::UBar => "ubar",
            }),
            Expr::Neg(e) | Expr::Call(_, e) => e.collect_vars(out),
            Expr::Add(a, b) | Expr::Sub(a, b) | Expr::Mul(a, b) | Expr::Div(a, b) | Expr::Pow(a, b) => {
                a.collect_vars(out);
                b.collect_vars(out);
            }
            Expr::Clip(a, b, c) => {
                a.collect_vars(out);
                b.collect_vars(out);
                c.collect_vars(out);
            }
            Expr::PiMom(_) => out.push("pimom"),
        }
    }
}

/// Evaluation inputs with a closure-backed `pimom`.
pub struct ExprInputs<'a> {
    pub t: f64,
    pub x: f64,
    pub u: f64,
    pub xbar: f64,
    pub ubar: f64,
    pub pimom: &'a dyn Fn(f64) -> f64,
}

#[derive(Debug, thiserror::Error, PartialEq)]
#[error("expression parse error at position {position}: {message}")]
pub struct ParseError {
    pub position: usize,
    pub message: String,
}

struct Parser<'a> {
    src: &'a [u8],
    pos: usize,
}

/// Parses the inline coefficient grammar.
pub fn parse_expr(src: &str) -> Result<Expr, ParseError> {
    let mut p = Parser {
        src: src.as_bytes(),
        pos: 0,
    };
    let e = p.expr()?;
    p.skip_ws();
    if p.pos != p.src.len() {
        return Err(p.err("trailing input"));
    }
    Ok(e)
}

impl<'a> Parser<'a> {
    fn err(&self, message: &str) -> ParseError {
        ParseError {
            position: self.pos,
            message: message.to_string(),
        }
    }

    fn skip_ws(&mut self) {
        while self.pos < self.src.len() && self.src[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
    }

    fn peek(&mut self) -> Option<u8> {
        self.skip_ws();
        self.src.get(self.pos).copied()
    }

    fn expect(&mut self, c: u8) -> Result<(), ParseError> {
        if self.peek() == Some(c) {
            self.pos += 1;
            Ok(())
        } else {
            Err(self.err(&format!("expected `{}`", c as char)))
        }
    }

    fn expr(&mut self) -> Result<Expr, ParseError> {
        let mut lhs = self.term()?;
        loop {
            match self.peek() {
                Some(b'+') => {
                    self.pos += 1;
                    lhs = Expr::Add(Box::new(lhs), Box::new(self.term()?));
                }
                Some(b'-') => {
                    self.pos += 1;
                    lhs = Expr::Sub(Box::new(lhs), Box::new(self.term()?));
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
                    lhs = Expr::Mul(Box::new(lhs), Box::new(self.factor()?));
                }
                Some(b'/') => {
                    self.pos += 1;
                    lhs = Expr::Div(Box::new(lhs), Box::new(self.factor()?));
                }
                _ => return Ok(lhs),
            }
        }
    }

    // Unary minus binds looser than `^`: -x^2 is -(x^2).
    fn factor(&mut self) -> Result<Expr, ParseError> {
        if self.peek() == Some(b'-') {
            self.pos += 1;
            return Ok(Expr::Neg(Box::new(self.factor()?)));
        }
        self.power()
    }

    fn power(&mut self) -> Result<Expr, ParseError> {
        let base = self.primary()?;
        if self.peek() == Some(b'^') {
            self.pos += 1;
            // Right-associative; the exponent may itself be signed.
            let exp = self.factor()?;
            return Ok(Expr::Pow(Box::new(base), Box::new(exp)));
        }
        Ok(base)
    }

    fn primary(&mut self) -> Result<Expr, ParseError> {
        match self.peek() {
            Some(b'(') => {
                self.pos += 1;
                let e = self.expr()?;
                self.expect(b')')?;
                Ok(e)
            }
            Some(c) if c.is_ascii_digit() || c == b'.' => self.number(),
            Some(c) if c.is_ascii_alphabetic() => self.ident(),
            _ => Err(self.err("expected a number, variable, function, or `(`")),
        }
    }

    fn number(&mut self) -> Result<Expr, ParseError> {
        self.skip_ws();
        let start = self.pos;
        while self.pos < self.src.len() {
            let c = self.src[self.pos];
            if c.is_ascii_digit() || c == b'.' {
                self.pos += 1;
            } else if (c == b'e' || c == b'E') && self.pos > start {
                self.pos += 1;
                if matches!(self.src.get(self.pos), Some(b'+') | Some(b'-')) {
                    self.pos += 1;
                }
            } else {
                break;
            }
        }
        let text = std::str::from_utf8(&self.src[start..self.pos]).unwrap();
        text.parse::<f64>()
            .map(Expr::Num)
            .map_err(|_| self.err(&format!("bad number `{text}`")))
    }

    fn ident(&mut self) -> Result<Expr, ParseError> {
        self.skip_ws();
        let start = self.pos;
        while self.pos < self.src.len()
            && (self.src[self.pos].is_ascii_alphanumeric() || self.src[self.pos] == b'_')
        {
            self.pos += 1;
        }
        let name = std::str::from_utf8(&self.src[start..self.pos]).unwrap();
        match name {
            "t" => Ok(Expr::Var(Var::T)),
            "x" => Ok(Expr::Var(Var::X)),
            "u" => Ok(Expr::Var(Var::U)),
            "xbar" => Ok(Expr::Var(Var::XBar)),
            "ubar" => Ok(Expr::Var(Var::UBar)),
            "sin" | "cos" | "exp" | "abs" | "sqrt" => {
                let f = match name {
                    "sin" => Func1::Sin,
                    "cos" => Func1::Cos,
                    "exp" => Func1::Exp,
                    "abs" => Func1::Abs,
                    _ => Func1::Sqrt,
                };
                self.expect(b'(')?;
                let arg = self.expr()?;
                self.expect(b')')?;
                Ok(Expr::Call(f, Box::new(arg)))
            }
            "clip" => {
                self.expect(b'(')?;
                let a = self.expr()?;
                self.expect(b',')?;
                let lo = self.expr()?;
                self.expect(b',')?;
                let hi = self.expr()?;
                self.expect(b')')?;
                Ok(Expr::Clip(Box::new(a), Box::new(lo), Box::new(hi)))
            }
            "pimom" => {
                self.expect(b'(')?;
                let p = self.expr()?;
                self.expect(b')')?;
                match p {
                    Expr::Num(v) if v > 0.0 => Ok(Expr::PiMom(v)),
                    _ => Err(self.err("pimom expects a positive numeric literal")),
                }
            }
            other => Err(self.err(&format!("unknown identifier `{other}`"))),
        }
    }
}
