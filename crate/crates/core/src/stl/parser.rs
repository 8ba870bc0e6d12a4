//! Recursive-descent parser for the concrete formula syntax.
//!
//! ```text
//! PHI    := TERM ('&&' TERM)*
//! TERM   := 'G' WINDOW '(' PSI ')' | 'F' WINDOW '(' PSI ')' | PSI 'U' WINDOW PSI
//! WINDOW := '[' NUMBER ',' NUMBER ']'
//! PSI    := PRED ('&' PRED)*
//! PRED   := 'ball' '(' VEXPR ',' NUMBER ')' | 'affine' '(' WEXPR ',' NUMBER ')'
//! VEXPR  := ['-'] VTERM (('+'|'-') VTERM)*
//! VTERM  := NAME | '[' NUMBER (',' NUMBER)* ']'
//! WEXPR  := ['-'] WTERM (('+'|'-') WTERM)*
//! WTERM  := NAME ':' '[' NUMBER (',' NUMBER)* ']' | '[' NUMBER (',' NUMBER)* ']'
//! ```
//!
//! Names refer to state slices or constant vectors declared in a [`SliceEnv`]
//! (scenario files declare them per task group). A ball expression containing
//! no state slice is read as a center: `ball([0,0], 5)` is the full-state
//! predicate `5 - ||x - [0,0]||`.
//!
//! Disjunction, negation, and nested temporal operators are outside the
//! fragment and rejected.

use nalgebra::{DMatrix, DVector};
use std::collections::BTreeMap;

use super::ast::{BoolFormula, Formula, Interval, Predicate, VecExpr, VecTerm};
use super::StlError;

/// Name bindings for formula parsing: state slices into the stacked group
/// state, and constant vectors.
#[derive(Debug, Clone, Default)]
pub struct SliceEnv {
    group_dim: usize,
    slices: BTreeMap<String, (usize, usize)>,
    constants: BTreeMap<String, DVector<f64>>,
}

impl SliceEnv {
    pub fn new(group_dim: usize) -> Self {
        Self {
            group_dim,
            slices: BTreeMap::new(),
            constants: BTreeMap::new(),
        }
    }

    pub fn group_dim(&self) -> usize {
        self.group_dim
    }

    pub fn add_slice(
        &mut self,
        name: impl Into<String>,
        start: usize,
        len: usize,
    ) -> Result<(), StlError> {
        let name = name.into();
        if len == 0 || start + len > self.group_dim {
            return Err(StlError::InvalidSlice {
                name,
                start,
                len,
                group_dim: self.group_dim,
            });
        }
        if self.slices.contains_key(&name) || self.constants.contains_key(&name) {
            return Err(StlError::DuplicateName(name));
        }
        self.slices.insert(name, (start, len));
        Ok(())
    }

    pub fn add_constant(
        &mut self,
        name: impl Into<String>,
        value: DVector<f64>,
    ) -> Result<(), StlError> {
        let name = name.into();
        if self.slices.contains_key(&name) || self.constants.contains_key(&name) {
            return Err(StlError::DuplicateName(name));
        }
        self.constants.insert(name, value);
        Ok(())
    }
}

/// Parses a formula against the given name bindings.
pub fn parse_formula(text: &str, env: &SliceEnv) -> Result<Formula, StlError> {
    let mut p = Parser {
        input: text,
        pos: 0,
        env,
        pred_count: 0,
    };
    let phi = p.phi()?;
    p.skip_ws();
    if p.pos < p.input.len() {
        return Err(p.err("unexpected trailing input"));
    }
    Ok(phi)
}

struct Parser<'a> {
    input: &'a str,
    pos: usize,
    env: &'a SliceEnv,
    pred_count: usize,
}

impl<'a> Parser<'a> {
    fn err(&self, message: impl Into<String>) -> StlError {
        StlError::Parse {
            message: message.into(),
            position: self.pos,
        }
    }

    fn skip_ws(&mut self) {
        while let Some(c) = self.peek() {
            if c.is_whitespace() {
                self.pos += c.len_utf8();
            } else {
                break;
            }
        }
    }

    fn peek(&self) -> Option<char> {
        self.input[self.pos..].chars().next()
    }

    fn starts_with(&self, pat: &str) -> bool {
        self.input[self.pos..].starts_with(pat)
    }

    fn expect(&mut self, c: char) -> Result<(), StlError> {
        self.skip_ws();
        if self.peek() == Some(c) {
            self.pos += c.len_utf8();
            Ok(())
        } else {
            Err(self.err(format!("expected `{c}`")))
        }
    }

    fn ident(&mut self) -> Option<String> {
        self.skip_ws();
        let rest = &self.input[self.pos..];
        let end = rest
            .char_indices()
            .find(|(_, c)| !(c.is_alphanumeric() || *c == '_'))
            .map(|(i, _)| i)
            .unwrap_or(rest.len());
        if end == 0 || !rest.chars().next().unwrap().is_alphabetic() {
            return None;
        }
        self.pos += end;
        Some(rest[..end].to_string())
    }

    fn number(&mut self) -> Result<f64, StlError> {
        self.skip_ws();
        let rest = &self.input[self.pos..];
        let mut end = 0;
        let bytes = rest.as_bytes();
        if end < bytes.len() && (bytes[end] == b'+' || bytes[end] == b'-') {
            end += 1;
        }
        while end < bytes.len()
            && (bytes[end].is_ascii_digit()
                || bytes[end] == b'.'
                || bytes[end] == b'e'
                || bytes[end] == b'E'
                || ((bytes[end] == b'+' || bytes[end] == b'-')
                    && (bytes[end - 1] == b'e' || bytes[end - 1] == b'E')))
        {
            end += 1;
        }
        let token = &rest[..end];
        let value: f64 = token
            .parse()
            .map_err(|_| self.err("expected a number"))?;
        self.pos += end;
        Ok(value)
    }

    fn vector_literal(&mut self) -> Result<DVector<f64>, StlError> {
        self.expect('[')?;
        let mut entries = vec![self.number()?];
        loop {
            self.skip_ws();
            if self.peek() == Some(',') {
                self.pos += 1;
                entries.push(self.number()?);
            } else {
                break;
            }
        }
        self.expect(']')?;
        Ok(DVector::from_vec(entries))
    }

    fn window(&mut self) -> Result<Interval, StlError> {
        self.expect('[')?;
        let a = self.number()?;
        self.expect(',')?;
        let b = self.number()?;
        self.expect(']')?;
        Interval::new(a, b)
    }

    fn reject_unsupported(&self) -> Result<(), StlError> {
        if self.starts_with("||") {
            return Err(self.err("disjunction is outside the supported fragment"));
        }
        if self.starts_with("!") {
            return Err(self.err(
                "negation has no token; negate the predicate function instead \
                 (affine weights/offset flip sign)",
            ));
        }
        Ok(())
    }

    fn phi(&mut self) -> Result<Formula, StlError> {
        let mut formula = self.term()?;
        loop {
            self.skip_ws();
            self.reject_unsupported()?;
            if self.starts_with("&&") {
                self.pos += 2;
                let rhs = self.term()?;
                formula = Formula::And(Box::new(formula), Box::new(rhs));
            } else {
                break;
            }
        }
        Ok(formula)
    }

    fn term(&mut self) -> Result<Formula, StlError> {
        self.skip_ws();
        self.reject_unsupported()?;
        let save = self.pos;
        if let Some(id) = self.ident() {
            match id.as_str() {
                "G" | "F" => {
                    let iv = self.window()?;
                    self.expect('(')?;
                    let psi = self.psi()?;
                    self.expect(')')?;
                    return Ok(if id == "G" {
                        Formula::Always(iv, psi)
                    } else {
                        Formula::Eventually(iv, psi)
                    });
                }
                "ball" | "affine" => {
                    self.pos = save;
                    let lhs = self.psi()?;
                    self.skip_ws();
                    let save_u = self.pos;
                    match self.ident().as_deref() {
                        Some("U") => {}
                        _ => {
                            self.pos = save_u;
                            return Err(self.err(
                                "expected `U[a,b]` after a predicate conjunction; bare \
                                 predicates only appear under G, F, or U",
                            ));
                        }
                    }
                    let iv = self.window()?;
                    let rhs = self.psi()?;
                    return Ok(Formula::Until(iv, lhs, rhs));
                }
                other => {
                    return Err(self.err(format!(
                        "expected `G`, `F`, `ball`, or `affine`, found `{other}`"
                    )))
                }
            }
        }
        Err(self.err("expected a temporal operator or predicate"))
    }

    fn psi(&mut self) -> Result<BoolFormula, StlError> {
        let mut conjuncts = vec![self.pred()?];
        loop {
            self.skip_ws();
            if self.peek() == Some('&') && !self.starts_with("&&") {
                self.pos += 1;
                conjuncts.push(self.pred()?);
            } else {
                break;
            }
        }
        BoolFormula::new(conjuncts)
    }

    fn pred(&mut self) -> Result<Predicate, StlError> {
        self.skip_ws();
        self.reject_unsupported()?;
        let save = self.pos;
        let id = self
            .ident()
            .ok_or_else(|| self.err("expected `ball` or `affine`"))?;
        match id.as_str() {
            "ball" => {
                self.expect('(')?;
                let expr = self.vexpr(false)?;
                self.expect(',')?;
                let radius = self.number()?;
                self.expect(')')?;
                self.build_ball(expr, radius)
            }
            "affine" => {
                self.expect('(')?;
                let expr = self.vexpr(true)?;
                self.expect(',')?;
                let offset = self.number()?;
                self.expect(')')?;
                self.build_affine(expr, offset)
            }
            "G" | "F" => {
                self.pos = save;
                Err(self.err(
                    "temporal operators cannot be nested inside a predicate conjunction",
                ))
            }
            other => {
                self.pos = save;
                Err(self.err(format!("expected `ball` or `affine`, found `{other}`")))
            }
        }
    }

    /// Parses a signed sum of vector terms. `placed` selects the affine
    /// variant, where a name must carry a `:[...]` weight block.
    fn vexpr(&mut self, placed: bool) -> Result<VecExpr, StlError> {
        let mut terms = Vec::new();
        self.skip_ws();
        let mut neg = if self.peek() == Some('-') {
            self.pos += 1;
            true
        } else {
            false
        };
        loop {
            terms.push((neg, self.vterm(placed)?));
            self.skip_ws();
            match self.peek() {
                Some('+') => {
                    self.pos += 1;
                    neg = false;
                }
                Some('-') => {
                    self.pos += 1;
                    neg = true;
                }
                _ => break,
            }
        }
        Ok(VecExpr { terms })
    }

    fn vterm(&mut self, placed: bool) -> Result<VecTerm, StlError> {
        self.skip_ws();
        if self.peek() == Some('[') {
            return Ok(VecTerm::Lit(self.vector_literal()?));
        }
        let at = self.pos;
        let name = self
            .ident()
            .ok_or_else(|| self.err("expected a name or `[...]` literal"))?;
        if placed {
            self.expect(':').map_err(|_| StlError::Parse {
                message: format!("affine weight block `{name}` needs `:[...]`"),
                position: at,
            })?;
            let weights = self.vector_literal()?;
            let (start, len) = self.lookup_slice(&name, at)?;
            if weights.len() != len {
                return Err(StlError::Parse {
                    message: format!(
                        "weight block for `{name}` has {} entries, slice has {len}",
                        weights.len()
                    ),
                    position: at,
                });
            }
            return Ok(VecTerm::Placed {
                name,
                start,
                weights,
            });
        }
        if let Some((start, len)) = self.env.slices.get(&name).copied() {
            return Ok(VecTerm::Slice { name, start, len });
        }
        if let Some(value) = self.env.constants.get(&name).cloned() {
            return Ok(VecTerm::Lit(value));
        }
        Err(StlError::Parse {
            message: format!("unknown name `{name}`"),
            position: at,
        })
    }

    fn lookup_slice(&self, name: &str, at: usize) -> Result<(usize, usize), StlError> {
        self.env.slices.get(name).copied().ok_or(StlError::Parse {
            message: format!("unknown state slice `{name}`"),
            position: at,
        })
    }

    fn build_ball(&mut self, expr: VecExpr, radius: f64) -> Result<Predicate, StlError> {
        let n = self.env.group_dim;
        let has_slice = expr
            .terms
            .iter()
            .any(|(_, t)| matches!(t, VecTerm::Slice { .. }));
        let pred = if has_slice {
            let ambient = expr
                .terms
                .iter()
                .map(|(_, t)| match t {
                    VecTerm::Slice { len, .. } => *len,
                    VecTerm::Lit(v) => v.len(),
                    VecTerm::Placed { weights, .. } => weights.len(),
                })
                .max()
                .unwrap();
            let mut map = DMatrix::zeros(ambient, n);
            let mut offset = DVector::zeros(ambient);
            for (neg, term) in &expr.terms {
                let sign = if *neg { -1.0 } else { 1.0 };
                match term {
                    VecTerm::Slice { name, start, len } => {
                        if *len != ambient {
                            return Err(self.err(format!(
                                "slice `{name}` has length {len}, expected {ambient}"
                            )));
                        }
                        for k in 0..*len {
                            map[(k, start + k)] += sign;
                        }
                    }
                    VecTerm::Lit(v) => {
                        if v.len() != ambient {
                            return Err(self.err(format!(
                                "constant with {} entries mixed with {ambient}-dimensional slices",
                                v.len()
                            )));
                        }
                        offset += v * sign;
                    }
                    VecTerm::Placed { .. } => {
                        return Err(self.err("placed weight blocks only appear in affine(...)"))
                    }
                }
            }
            Predicate::ball_from_expr(map, offset, radius, expr)
        } else {
            // No state slice named: the expression is the center of a
            // full-state ball.
            let mut center = DVector::zeros(n);
            for (neg, term) in &expr.terms {
                let sign = if *neg { -1.0 } else { 1.0 };
                match term {
                    VecTerm::Lit(v) => {
                        if v.len() != n {
                            return Err(self.err(format!(
                                "ball center has {} entries, state dimension is {n}",
                                v.len()
                            )));
                        }
                        center += v * sign;
                    }
                    _ => unreachable!(),
                }
            }
            Predicate::ball_from_expr(DMatrix::identity(n, n), -center, radius, expr)
        };
        self.pred_count += 1;
        Ok(pred.with_label(format!("mu{}", self.pred_count)))
    }

    fn build_affine(&mut self, expr: VecExpr, offset: f64) -> Result<Predicate, StlError> {
        let n = self.env.group_dim;
        let mut weights = DVector::zeros(n);
        for (neg, term) in &expr.terms {
            let sign = if *neg { -1.0 } else { 1.0 };
            match term {
                VecTerm::Lit(v) => {
                    if v.len() != n {
                        return Err(self.err(format!(
                            "affine weight vector has {} entries, state dimension is {n}",
                            v.len()
                        )));
                    }
                    weights
                        .iter_mut()
                        .zip(v.iter())
                        .for_each(|(w, x)| *w += sign * x);
                }
                VecTerm::Placed {
                    start,
                    weights: block,
                    ..
                } => {
                    for (k, x) in block.iter().enumerate() {
                        weights[start + k] += sign * x;
                    }
                }
                VecTerm::Slice { name, .. } => {
                    return Err(self.err(format!(
                        "affine weight block `{name}` needs `:[...]`"
                    )))
                }
            }
        }
        self.pred_count += 1;
        Ok(Predicate::affine_from_expr(weights, offset, expr).with_label(format!("mu{}", self.pred_count)))
    }
}
