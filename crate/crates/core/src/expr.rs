//! A small arithmetic expression language in one variable `x`.
//!
//! Grammar (lowest to highest precedence):
//!
//! ```text
//! expr    := term (('+' | '-') term)*
//! term    := unary (('*' | '/') unary)*
//! unary   := '-' unary | power
//! power   := atom ('^' unary)?
//! atom    := number | 'x' | constant | func '(' expr (',' expr)* ')' | '(' expr ')'
//! ```
//!
//! Functions: `exp`, `log`, `sqrt`, `abs`, `sin`, `cos` (one argument) and
//! `min`, `max` (two or more arguments). Constants: `pi`, `e`.

use std::fmt;

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ExprError {
    #[error("unexpected token `{token}` at offset {offset}")]
    UnexpectedToken { token: String, offset: usize },
    #[error("unexpected end of expression")]
    UnexpectedEnd,
    #[error("unknown identifier `{0}`")]
    UnknownIdentifier(String),
    #[error("function `{name}` takes {expected} argument(s), got {got}")]
    Arity {
        name: String,
        expected: &'static str,
        got: usize,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Func {
    Exp,
    Log,
    Sqrt,
    Abs,
    Sin,
    Cos,
    Min,
    Max,
}

impl Func {
    fn lookup(name: &str) -> Option<Func> {
        Some(match name {
            "exp" => Func::Exp,
            "log" | "ln" => Func::Log,
            "sqrt" => Func::Sqrt,
            "abs" => Func::Abs,
            "sin" => Func::Sin,
            "cos" => Func::Cos,
            "min" => Func::Min,
            "max" => Func::Max,
            _ => return None,
        })
    }

    fn name(self) -> &'static str {
        match self {
            Func::Exp => "exp",
            Func::Log => "log",
            Func::Sqrt => "sqrt",
            Func::Abs => "abs",
            Func::Sin => "sin",
            Func::Cos => "cos",
            Func::Min => "min",
            Func::Max => "max",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Node {
    Num(f64),
    Var,
    Neg(Box<Node>),
    Add(Box<Node>, Box<Node>),
    Sub(Box<Node>, Box<Node>),
    Mul(Box<Node>, Box<Node>),
    Div(Box<Node>, Box<Node>),
    Pow(Box<Node>, Box<Node>),
    Call(Func, Vec<Node>),
}

impl Node {
    fn eval(&self, x: f64) -> f64 {
        match self {
            Node::Num(v) => *v,
            Node::Var => x,
            Node::Neg(a) => -a.eval(x),
            Node::Add(a, b) => a.eval(x) + b.eval(x),
            Node::Sub(a, b) => a.eval(x) - b.eval(x),
            Node::Mul(a, b) => a.eval(x) * b.eval(x),
            Node::Div(a, b) => a.eval(x) / b.eval(x),
            Node::Pow(a, b) => {
                let base = a.eval(x);
                let exp = b.eval(x);
                // integer exponents go through powi so that (-2)^2 works
                if exp.fract() == 0.0 && exp.abs() < 64.0 {
                    base.powi(exp as i32)
                } else {
                    base.powf(exp)
                }
            }
            Node::Call(f, args) => {
                let first = args[0].eval(x);
                match f {
                    Func::Exp => first.exp(),
                    Func::Log => first.ln(),
                    Func::Sqrt => first.sqrt(),
                    Func::Abs => first.abs(),
                    Func::Sin => first.sin(),
                    Func::Cos => first.cos(),
                    Func::Min => args[1..].iter().fold(first, |m, a| m.min(a.eval(x))),
                    Func::Max => args[1..].iter().fold(first, |m, a| m.max(a.eval(x))),
                }
            }
        }
    }
}

/// A parsed expression. Keeps its source text so documents round-trip.
#[derive(Debug, Clone)]
pub struct Expr {
    source: String,
    root: Node,
}

impl PartialEq for Expr {
    fn eq(&self, other: &Self) -> bool {
        self.source == other.source
    }
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.source)
    }
}

impl Expr {
    pub fn parse(source: &str) -> Result<Expr, ExprError> {
        let tokens = tokenize(source)?;
        let mut parser = Parser { tokens, pos: 0 };
        let root = parser.expr()?;
        if let Some(tok) = parser.peek() {
            return Err(ExprError::UnexpectedToken {
                token: tok.kind.to_string(),
                offset: tok.offset,
            });
        }
        Ok(Expr {
            source: source.trim().to_string(),
            root,
        })
    }

    pub fn eval(&self, x: f64) -> f64 {
        self.root.eval(x)
    }

    pub fn source(&self) -> &str {
        &self.source
    }
}

#[derive(Debug, Clone, PartialEq)]
enum TokKind {
    Num(f64),
    Ident(String),
    Op(char),
    LParen,
    RParen,
    Comma,
}

impl fmt::Display for TokKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TokKind::Num(v) => write!(f, "{v}"),
            TokKind::Ident(s) => f.write_str(s),
            TokKind::Op(c) => write!(f, "{c}"),
            TokKind::LParen => f.write_str("("),
            TokKind::RParen => f.write_str(")"),
            TokKind::Comma => f.write_str(","),
        }
    }
}

#[derive(Debug, Clone)]
struct Token {
    kind: TokKind,
    offset: usize,
}

fn tokenize(src: &str) -> Result<Vec<Token>, ExprError> {
    let bytes = src.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i] as char;
        if c.is_ascii_whitespace() {
            i += 1;
            continue;
        }
        let start = i;
        if c.is_ascii_digit() || c == '.' {
            while i < bytes.len() && ((bytes[i] as char).is_ascii_digit() || bytes[i] == b'.') {
                i += 1;
            }
            // exponent part, e.g. 1e-3
            if i < bytes.len() && (bytes[i] == b'e' || bytes[i] == b'E') {
                let mut j = i + 1;
                if j < bytes.len() && (bytes[j] == b'+' || bytes[j] == b'-') {
                    j += 1;
                }
                if j < bytes.len() && (bytes[j] as char).is_ascii_digit() {
                    i = j;
                    while i < bytes.len() && (bytes[i] as char).is_ascii_digit() {
                        i += 1;
                    }
                }
            }
            let text = &src[start..i];
            let v: f64 = text.parse().map_err(|_| ExprError::UnexpectedToken {
                token: text.to_string(),
                offset: start,
            })?;
            out.push(Token {
                kind: TokKind::Num(v),
                offset: start,
            });
            continue;
        }
        if c.is_ascii_alphabetic() || c == '_' {
            while i < bytes.len() && ((bytes[i] as char).is_ascii_alphanumeric() || bytes[i] == b'_')
            {
                i += 1;
            }
            out.push(Token {
                kind: TokKind::Ident(src[start..i].to_string()),
                offset: start,
            });
            continue;
        }
        let ch = src[start..].chars().next().unwrap_or('?');
        let kind = match ch {
            '+' | '-' | '*' | '/' | '^' => TokKind::Op(ch),
            // unicode minus shows up when people paste formulas
            '\u{2212}' => TokKind::Op('-'),
            '(' => TokKind::LParen,
            ')' => TokKind::RParen,
            ',' => TokKind::Comma,
            _ => {
                return Err(ExprError::UnexpectedToken {
                    token: ch.to_string(),
                    offset: start,
                });
            }
        };
        i += ch.len_utf8();
        out.push(Token {
            kind,
            offset: start,
        });
    }
    Ok(out)
}

struct Parser {
    tokens: Vec<Token>,
    pos: usize,
}

impl Parser {
    fn peek(&self) -> Option<&Token> {
        self.tokens.get(self.pos)
    }

    fn next(&mut self) -> Result<Token, ExprError> {
        let tok = self.tokens.get(self.pos).cloned().ok_or(ExprError::UnexpectedEnd)?;
        self.pos += 1;
        Ok(tok)
    }

    fn eat_op(&mut self, op: char) -> bool {
        if matches!(self.peek(), Some(Token { kind: TokKind::Op(c), .. }) if *c == op) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    fn expect(&mut self, kind: TokKind) -> Result<(), ExprError> {
        let tok = self.next()?;
        if tok.kind == kind {
            Ok(())
        } else {
            Err(ExprError::UnexpectedToken {
                token: tok.kind.to_string(),
                offset: tok.offset,
            })
        }
    }

    fn expr(&mut self) -> Result<Node, ExprError> {
        let mut lhs = self.term()?;
        loop {
            if self.eat_op('+') {
                lhs = Node::Add(Box::new(lhs), Box::new(self.term()?));
            } else if self.eat_op('-') {
                lhs = Node::Sub(Box::new(lhs), Box::new(self.term()?));
            } else {
                return Ok(lhs);
            }
        }
    }

    fn term(&mut self) -> Result<Node, ExprError> {
        let mut lhs = self.unary()?;
        loop {
            if self.eat_op('*') {
                lhs = Node::Mul(Box::new(lhs), Box::new(self.unary()?));
            } else if self.eat_op('/') {
                lhs = Node::Div(Box::new(lhs), Box::new(self.unary()?));
            } else {
                return Ok(lhs);
            }
        }
    }

    fn unary(&mut self) -> Result<Node, ExprError> {
        if self.eat_op('-') {
            return Ok(Node::Neg(Box::new(self.unary()?)));
        }
        if self.eat_op('+') {
            return self.unary();
        }
        self.power()
    }

    fn power(&mut self) -> Result<Node, ExprError> {
        let base = self.atom()?;
        if self.eat_op('^') {
            // right associative, binds tighter than unary minus on the left
            let exp = self.unary()?;
            return Ok(Node::Pow(Box::new(base), Box::new(exp)));
        }
        Ok(base)
    }

    fn atom(&mut self) -> Result<Node, ExprError> {
        let tok = self.next()?;
        match tok.kind {
            TokKind::Num(v) => Ok(Node::Num(v)),
            TokKind::LParen => {
                let inner = self.expr()?;
                self.expect(TokKind::RParen)?;
                Ok(inner)
            }
            TokKind::Ident(name) => match name.as_str() {
                "x" => Ok(Node::Var),
                "pi" => Ok(Node::Num(std::f64::consts::PI)),
                "e" => Ok(Node::Num(std::f64::consts::E)),
                _ => {
                    let func =
                        Func::lookup(&name).ok_or_else(|| ExprError::UnknownIdentifier(name.clone()))?;
                    self.expect(TokKind::LParen)?;
                    let mut args = vec![self.expr()?];
                    while matches!(self.peek(), Some(Token { kind: TokKind::Comma, .. })) {
                        self.pos += 1;
                        args.push(self.expr()?);
                    }
                    self.expect(TokKind::RParen)?;
                    let ok = match func {
                        Func::Min | Func::Max => args.len() >= 2,
                        _ => args.len() == 1,
                    };
                    if !ok {
                        return Err(ExprError::Arity {
                            name: func.name().to_string(),
                            expected: if matches!(func, Func::Min | Func::Max) {
                                "at least 2"
                            } else {
                                "1"
                            },
                            got: args.len(),
                        });
                    }
                    Ok(Node::Call(func, args))
                }
            },
            other => Err(ExprError::UnexpectedToken {
                token: other.to_string(),
                offset: tok.offset,
            }),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ev(s: &str, x: f64) -> f64 {
        Expr::parse(s).unwrap().eval(x)
    }

    #[test]
    fn precedence_and_associativity() {
        assert_eq!(ev("1 + 2 * 3", 0.0), 7.0);
        assert_eq!(ev("2 ^ 3 ^ 2", 0.0), 512.0);
        assert_eq!(ev("-x^2", 3.0), -9.0);
        assert_eq!(ev("(1 - x) * x", 0.25), 0.1875);
        assert_eq!(ev("8 / 4 / 2", 0.0), 1.0);
    }

    #[test]
    fn functions_and_constants() {
        assert!((ev("exp(log(x))", 2.5) - 2.5).abs() < 1e-15);
        assert_eq!(ev("min(x, 1, 0.3)", 2.0), 0.3);
        assert_eq!(ev("max(x, 1)", 2.0), 2.0);
        assert_eq!(ev("abs(-x)", 2.0), 2.0);
        assert!((ev("sin(pi/2)", 0.0) - 1.0).abs() < 1e-15);
        assert_eq!(ev("1e-3 * 2", 0.0), 0.002);
        assert_eq!(ev("x \u{2212} 1", 3.0), 2.0);
    }

    #[test]
    fn errors() {
        assert!(matches!(Expr::parse("1 +"), Err(ExprError::UnexpectedEnd)));
        assert!(matches!(
            Expr::parse("foo(x)"),
            Err(ExprError::UnknownIdentifier(_))
        ));
        assert!(matches!(Expr::parse("min(x)"), Err(ExprError::Arity { .. })));
        assert!(matches!(
            Expr::parse("1 $ 2"),
            Err(ExprError::UnexpectedToken { .. })
        ));
        assert!(matches!(
            Expr::parse("(1 + 2"),
            Err(ExprError::UnexpectedEnd)
        ));
    }
}
