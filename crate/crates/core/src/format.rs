//! Line-oriented problem file reader.
//!
//! ```text
//! # comment
//! horizon 1
//! state x init 1
//! control u box -1 1
//! param a box 0 2
//! criterion integral "-(x^2 + u^2)"
//! constraint ode x "u"
//! ```

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::expr::{self, Expr, ExprError};

#[derive(Debug, Clone, PartialEq, Error)]
#[error("line {line}, column {column}: {message}")]
pub struct FormatError {
    pub line: usize,
    pub column: usize,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ControlSetDecl {
    Box { lo: f64, hi: f64 },
    Set(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq)]
pub enum CriterionDecl {
    Integral(Expr),
    Terminal { expr: Expr, at: f64 },
    Maximin(Expr),
}

#[derive(Debug, Clone, PartialEq)]
pub enum ConstraintDecl {
    Ode { state: String, rhs: Expr },
    Integral(Expr),
    Pointwise(Expr),
    Terminal { expr: Expr, at: f64 },
    Volterra { state: String, integrand: Expr },
    Fredholm { state: String, integrand: Expr },
    Convolution { state: String, control: String, kernel: Expr },
    Inequality(Expr),
}

/// A declaration together with the line it came from.
#[derive(Debug, Clone, PartialEq)]
pub struct Located<T> {
    pub line: usize,
    pub item: T,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ProblemFile {
    pub horizon: Option<Located<f64>>,
    pub states: Vec<Located<(String, Option<f64>)>>,
    pub controls: Vec<Located<(String, ControlSetDecl)>>,
    pub params: Vec<Located<(String, Option<(f64, f64)>)>>,
    pub criteria: Vec<Located<CriterionDecl>>,
    pub constraints: Vec<Located<ConstraintDecl>>,
}

#[derive(Debug, Clone)]
struct Word {
    text: String,
    column: usize,
    quoted: bool,
}

fn split_words(line: &str, line_no: usize) -> Result<Vec<Word>, FormatError> {
    let chars: Vec<char> = line.chars().collect();
    let mut words = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        if c == '#' {
            break;
        }
        if c.is_whitespace() {
            i += 1;
            continue;
        }
        if c == '"' {
            let start = i + 1;
            let mut j = start;
            while j < chars.len() && chars[j] != '"' {
                j += 1;
            }
            if j == chars.len() {
                return Err(FormatError {
                    line: line_no,
                    column: i + 1,
                    message: "unterminated string".into(),
                });
            }
            words.push(Word {
                text: chars[start..j].iter().collect(),
                column: start + 1,
                quoted: true,
            });
            i = j + 1;
            continue;
        }
        let start = i;
        while i < chars.len() && !chars[i].is_whitespace() && chars[i] != '"' && chars[i] != '#' {
            i += 1;
        }
        words.push(Word {
            text: chars[start..i].iter().collect(),
            column: start + 1,
            quoted: false,
        });
    }
    Ok(words)
}

struct LineCursor<'a> {
    line: usize,
    words: &'a [Word],
    pos: usize,
    end_column: usize,
}

impl<'a> LineCursor<'a> {
    fn err(&self, column: usize, message: impl Into<String>) -> FormatError {
        FormatError {
            line: self.line,
            column,
            message: message.into(),
        }
    }

    fn here(&self) -> usize {
        self.words.get(self.pos).map_or(self.end_column, |w| w.column)
    }

    fn word(&mut self, what: &str) -> Result<&'a Word, FormatError> {
        let w = self
            .words
            .get(self.pos)
            .ok_or_else(|| self.err(self.end_column, format!("expected {}", what)))?;
        if w.quoted {
            return Err(self.err(w.column, format!("expected {}, found a quoted expression", what)));
        }
        self.pos += 1;
        Ok(w)
    }

    fn keyword(&mut self, kw: &str) -> Result<(), FormatError> {
        let col = self.here();
        let w = self.word(&format!("`{}`", kw))?;
        if w.text != kw {
            return Err(self.err(col, format!("expected `{}`, found `{}`", kw, w.text)));
        }
        Ok(())
    }

    fn number(&mut self, what: &str) -> Result<f64, FormatError> {
        let w = self.word(what)?;
        w.text
            .parse::<f64>()
            .ok()
            .filter(|v| v.is_finite())
            .ok_or_else(|| self.err(w.column, format!("expected {} (a number), found `{}`", what, w.text)))
    }

    fn ident(&mut self, what: &str) -> Result<String, FormatError> {
        let w = self.word(what)?;
        let ok = w
            .text
            .chars()
            .next()
            .is_some_and(|c| c.is_alphabetic() || c == '_')
            && w.text.chars().all(|c| c.is_alphanumeric() || c == '_');
        if !ok {
            return Err(self.err(w.column, format!("expected {} (an identifier), found `{}`", what, w.text)));
        }
        Ok(w.text.clone())
    }

    fn expr(&mut self) -> Result<Expr, FormatError> {
        let w = self
            .words
            .get(self.pos)
            .filter(|w| w.quoted)
            .ok_or_else(|| self.err(self.here(), "expected a quoted expression"))?;
        self.pos += 1;
        expr::parse(&w.text).map_err(|e| {
            let (column, message) = match e {
                ExprError::Syntax { column, message, .. } => (column, message),
                ExprError::UnknownFunction { ref name, column, .. } => {
                    (column, format!("unknown function `{}`", name))
                }
                other => (1, other.to_string()),
            };
            self.err(w.column + column - 1, message)
        })
    }

    fn finish(&self) -> Result<(), FormatError> {
        match self.words.get(self.pos) {
            None => Ok(()),
            Some(w) => Err(self.err(w.column, format!("unexpected trailing `{}`", w.text))),
        }
    }

    fn rest_numbers(&mut self, what: &str) -> Result<Vec<f64>, FormatError> {
        let mut out = Vec::new();
        while self.pos < self.words.len() {
            out.push(self.number(what)?);
        }
        Ok(out)
    }
}

pub fn parse_problem(text: &str) -> Result<ProblemFile, FormatError> {
    let mut file = ProblemFile::default();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let words = split_words(raw, line)?;
        if words.is_empty() {
            continue;
        }
        let mut cur = LineCursor {
            line,
            words: &words,
            pos: 0,
            end_column: raw.chars().count() + 1,
        };
        let head_col = cur.here();
        let head = cur.word("a directive")?.text.clone();
        match head.as_str() {
            "horizon" => {
                let col = cur.here();
                let t = cur.number("horizon length")?;
                if file.horizon.is_some() {
                    return Err(cur.err(head_col, "duplicate `horizon`"));
                }
                if t <= 0.0 {
                    return Err(cur.err(col, "horizon must be positive"));
                }
                file.horizon = Some(Located { line, item: t });
            }
            "state" => {
                let name = cur.ident("state name")?;
                let init = if cur.pos < words.len() {
                    cur.keyword("init")?;
                    Some(cur.number("initial value")?)
                } else {
                    None
                };
                file.states.push(Located { line, item: (name, init) });
            }
            "control" => {
                let name = cur.ident("control name")?;
                let col = cur.here();
                let kind = cur.word("`box` or `set`")?.text.clone();
                let set = match kind.as_str() {
                    "box" => {
                        let lo = cur.number("lower bound")?;
                        let hi = cur.number("upper bound")?;
                        if lo > hi {
                            return Err(cur.err(col, "box lower bound exceeds upper bound"));
                        }
                        ControlSetDecl::Box { lo, hi }
                    }
                    "set" => {
                        let vals = cur.rest_numbers("set element")?;
                        if vals.is_empty() {
                            return Err(cur.err(col, "control set must be nonempty"));
                        }
                        ControlSetDecl::Set(vals)
                    }
                    other => return Err(cur.err(col, format!("expected `box` or `set`, found `{}`", other))),
                };
                file.controls.push(Located { line, item: (name, set) });
            }
            "param" => {
                let name = cur.ident("parameter name")?;
                let bounds = if cur.pos < words.len() {
                    let col = cur.here();
                    cur.keyword("box")?;
                    let lo = cur.number("lower bound")?;
                    let hi = cur.number("upper bound")?;
                    if lo > hi {
                        return Err(cur.err(col, "box lower bound exceeds upper bound"));
                    }
                    Some((lo, hi))
                } else {
                    None
                };
                file.params.push(Located { line, item: (name, bounds) });
            }
            "criterion" => {
                let col = cur.here();
                let kind = cur.word("criterion kind")?.text.clone();
                let decl = match kind.as_str() {
                    "integral" => CriterionDecl::Integral(cur.expr()?),
                    "maximin" => CriterionDecl::Maximin(cur.expr()?),
                    "terminal" => {
                        let expr = cur.expr()?;
                        cur.keyword("at")?;
                        let at = cur.number("event time")?;
                        CriterionDecl::Terminal { expr, at }
                    }
                    other => {
                        return Err(cur.err(
                            col,
                            format!("unknown criterion kind `{}` (integral, terminal, maximin)", other),
                        ))
                    }
                };
                file.criteria.push(Located { line, item: decl });
            }
            "constraint" => {
                let col = cur.here();
                let kind = cur.word("constraint kind")?.text.clone();
                let decl = match kind.as_str() {
                    "ode" => {
                        let state = cur.ident("state name")?;
                        ConstraintDecl::Ode { state, rhs: cur.expr()? }
                    }
                    "integral" => ConstraintDecl::Integral(cur.expr()?),
                    "pointwise" => ConstraintDecl::Pointwise(cur.expr()?),
                    "terminal" => {
                        let expr = cur.expr()?;
                        cur.keyword("at")?;
                        let at = cur.number("event time")?;
                        ConstraintDecl::Terminal { expr, at }
                    }
                    "volterra" => {
                        let state = cur.ident("state name")?;
                        ConstraintDecl::Volterra { state, integrand: cur.expr()? }
                    }
                    "fredholm" => {
                        let state = cur.ident("state name")?;
                        ConstraintDecl::Fredholm { state, integrand: cur.expr()? }
                    }
                    "convolution" => {
                        let state = cur.ident("state name")?;
                        let control = cur.ident("control name")?;
                        cur.keyword("kernel")?;
                        ConstraintDecl::Convolution { state, control, kernel: cur.expr()? }
                    }
                    "ineq" => ConstraintDecl::Inequality(cur.expr()?),
                    other => return Err(cur.err(col, format!("unknown constraint kind `{}`", other))),
                };
                file.constraints.push(Located { line, item: decl });
            }
            other => return Err(cur.err(head_col, format!("unknown directive `{}`", other))),
        }
        cur.finish()?;
    }
    Ok(file)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reads_lq_file() {
        let f = parse_problem(
            "# LQ\nhorizon 1\nstate x init 1\ncontrol u box -1 1\ncriterion integral \"-(x^2+u^2)\"  # cost\nconstraint ode x \"u\"\n",
        )
        .unwrap();
        assert_eq!(f.horizon.unwrap().item, 1.0);
        assert_eq!(f.states[0].item, ("x".to_string(), Some(1.0)));
        assert_eq!(f.controls[0].item.1, ControlSetDecl::Box { lo: -1.0, hi: 1.0 });
        assert_eq!(f.criteria.len(), 1);
        assert!(matches!(f.constraints[0].item, ConstraintDecl::Ode { .. }));
    }

    #[test]
    fn errors_are_located() {
        let e = parse_problem("horizon 1\nconstraint ode x \"u*\"\n").unwrap_err();
        assert_eq!((e.line, e.column), (2, 21));
        let e = parse_problem("horizon one\n").unwrap_err();
        assert_eq!((e.line, e.column), (1, 9));
        let e = parse_problem("control u box 2 1\n").unwrap_err();
        assert_eq!(e.line, 1);
        let e = parse_problem("frobnicate\n").unwrap_err();
        assert_eq!((e.line, e.column), (1, 1));
        assert!(parse_problem("state x init 1 extra\n").is_err());
        assert!(parse_problem("criterion integral \"x\n").is_err());
    }

    #[test]
    fn reads_every_constraint_kind() {
        let f = parse_problem(
            "constraint integral \"u\"\nconstraint pointwise \"x-u\"\nconstraint terminal \"x-1\" at 1\n\
             constraint volterra x \"u\"\nconstraint fredholm x \"u*t*tau\"\n\
             constraint convolution x u kernel \"exp(-s)\"\nconstraint ineq \"x\"\ncontrol v set -1 0 1\n",
        )
        .unwrap();
        assert_eq!(f.constraints.len(), 7);
        assert_eq!(f.controls[0].item.1, ControlSetDecl::Set(vec![-1.0, 0.0, 1.0]));
    }
}
