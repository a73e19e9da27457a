//! Finite-domain, finite-trace first-order linear temporal logic.
//!
//! Ground truth for everything else in the crate: compiled networks are
//! verified against `eval`, and the synthetic generator audits its labels
//! with it. Semantics are over a fixed trace of length `T` and entity
//! domain of size `N`:
//!
//! - `G φ`  — φ at every `t'' >= t` (inclusive of `t`)
//! - `F φ`  — φ at some `t'' >= t` (inclusive of `t`)
//! - `φ U ψ` (strict) — some `t' > t` with ψ at `t'` and φ on `[t, t')`
//! - `φ Uw ψ` (weak)  — same with `t' >= t`; ψ at `t` alone suffices
//! - `X φ`  — φ at `t+1`; false at the last step
//! - `XF φ` — φ at some `t' > t`; false at the last step
//!
//! The strict Until is deliberately non-textbook: the rest of the crate
//! treats it as the primary Until, and the weak variant exists to make the
//! difference explicit and testable.
//!
//! Text syntax (see `parse`):
//!
//! ```text
//! formula    = "exists" VAR "." formula
//!            | "forall" VAR "." formula
//!            | ("G" | "F" | "X" | "XF") formula
//!            | until ;
//! until      = disj [ ("U" | "Uw" | "XF") formula ] ;   (* right-assoc *)
//! disj       = conj { "|" conj } ;
//! conj       = negation { "&" negation } ;
//! negation   = "!" negation | "(" formula ")" | atom ;
//! atom       = IDENT [ "(" [ VAR { "," VAR } ] ")" ] ;  (* bare IDENT = nullary *)
//! ```
//!
//! Prefix operators and quantifiers extend to the end of the formula, so
//! `F p1 XF p2` reads as `F (p1 XF p2)`. The infix form `a XF b` is sugar
//! for `a & XF b`.

use std::collections::BTreeMap;
use std::collections::BTreeSet;
use std::fmt;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum LogicError {
    #[error("unbound variable `{0}`")]
    UnboundVariable(String),
    #[error("variable `{0}` shadowed by a nested quantifier")]
    ShadowedVariable(String),
    #[error("time index {t} out of range for trace length {len}")]
    TimeOutOfRange { t: usize, len: usize },
    #[error("unknown predicate `{0}`")]
    UnknownPredicate(String),
    #[error("predicate `{name}` used with {used} argument(s) but declared with {declared}")]
    ArityMismatch {
        name: String,
        used: usize,
        declared: usize,
    },
    #[error("formula has {0} free variables; at most 1 supported here")]
    TooManyFreeVariables(usize),
    #[error("parse error at column {col}: {msg}\n{src}\n{caret}")]
    Parse {
        col: usize,
        msg: String,
        src: String,
        caret: String,
    },
}

pub type Result<T> = std::result::Result<T, LogicError>;

/// Formula AST. Predicates have arity at most 2; arguments are variable
/// names bound by enclosing quantifiers.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Formula {
    Pred { name: String, args: Vec<String> },
    Not(Box<Formula>),
    And(Box<Formula>, Box<Formula>),
    Or(Box<Formula>, Box<Formula>),
    Exists(String, Box<Formula>),
    Forall(String, Box<Formula>),
    Always(Box<Formula>),
    Eventually(Box<Formula>),
    Until { lhs: Box<Formula>, rhs: Box<Formula>, strict: bool },
    Next(Box<Formula>),
    NextEventually(Box<Formula>),
}

impl Formula {
    pub fn pred0(name: &str) -> Formula {
        Formula::Pred {
            name: name.to_string(),
            args: vec![],
        }
    }

    pub fn pred1(name: &str, x: &str) -> Formula {
        Formula::Pred {
            name: name.to_string(),
            args: vec![x.to_string()],
        }
    }

    pub fn pred2(name: &str, x: &str, y: &str) -> Formula {
        Formula::Pred {
            name: name.to_string(),
            args: vec![x.to_string(), y.to_string()],
        }
    }

    pub fn not(f: Formula) -> Formula {
        Formula::Not(Box::new(f))
    }

    pub fn and(a: Formula, b: Formula) -> Formula {
        Formula::And(Box::new(a), Box::new(b))
    }

    pub fn or(a: Formula, b: Formula) -> Formula {
        Formula::Or(Box::new(a), Box::new(b))
    }

    pub fn exists(v: &str, f: Formula) -> Formula {
        Formula::Exists(v.to_string(), Box::new(f))
    }

    pub fn forall(v: &str, f: Formula) -> Formula {
        Formula::Forall(v.to_string(), Box::new(f))
    }

    pub fn always(f: Formula) -> Formula {
        Formula::Always(Box::new(f))
    }

    pub fn eventually(f: Formula) -> Formula {
        Formula::Eventually(Box::new(f))
    }

    pub fn until(lhs: Formula, rhs: Formula) -> Formula {
        Formula::Until {
            lhs: Box::new(lhs),
            rhs: Box::new(rhs),
            strict: true,
        }
    }

    pub fn weak_until(lhs: Formula, rhs: Formula) -> Formula {
        Formula::Until {
            lhs: Box::new(lhs),
            rhs: Box::new(rhs),
            strict: false,
        }
    }

    pub fn next(f: Formula) -> Formula {
        Formula::Next(Box::new(f))
    }

    pub fn next_eventually(f: Formula) -> Formula {
        Formula::NextEventually(Box::new(f))
    }

    /// Free variables in first-use order.
    pub fn free_vars(&self) -> Vec<String> {
        let mut out = Vec::new();
        let mut bound = Vec::new();
        self.collect_free(&mut bound, &mut out);
        out
    }

    fn collect_free(&self, bound: &mut Vec<String>, out: &mut Vec<String>) {
        match self {
            Formula::Pred { args, .. } => {
                for a in args {
                    if !bound.contains(a) && !out.contains(a) {
                        out.push(a.clone());
                    }
                }
            }
            Formula::Not(f)
            | Formula::Always(f)
            | Formula::Eventually(f)
            | Formula::Next(f)
            | Formula::NextEventually(f) => f.collect_free(bound, out),
            Formula::And(a, b) | Formula::Or(a, b) => {
                a.collect_free(bound, out);
                b.collect_free(bound, out);
            }
            Formula::Until { lhs, rhs, .. } => {
                lhs.collect_free(bound, out);
                rhs.collect_free(bound, out);
            }
            Formula::Exists(v, f) | Formula::Forall(v, f) => {
                bound.push(v.clone());
                f.collect_free(bound, out);
                bound.pop();
            }
        }
    }

    /// Checks each variable is bound by exactly one enclosing quantifier
    /// and each predicate use matches the declared arity.
    pub fn validate(&self, sig: &BTreeMap<String, usize>) -> Result<()> {
        self.validate_inner(&mut Vec::new(), sig)
    }

    fn validate_inner(&self, bound: &mut Vec<String>, sig: &BTreeMap<String, usize>) -> Result<()> {
        match self {
            Formula::Pred { name, args } => {
                let declared = *sig
                    .get(name)
                    .ok_or_else(|| LogicError::UnknownPredicate(name.clone()))?;
                if args.len() != declared {
                    return Err(LogicError::ArityMismatch {
                        name: name.clone(),
                        used: args.len(),
                        declared,
                    });
                }
                for a in args {
                    if !bound.contains(a) {
                        return Err(LogicError::UnboundVariable(a.clone()));
                    }
                }
                Ok(())
            }
            Formula::Not(f)
            | Formula::Always(f)
            | Formula::Eventually(f)
            | Formula::Next(f)
            | Formula::NextEventually(f) => f.validate_inner(bound, sig),
            Formula::And(a, b) | Formula::Or(a, b) => {
                a.validate_inner(bound, sig)?;
                b.validate_inner(bound, sig)
            }
            Formula::Until { lhs, rhs, .. } => {
                lhs.validate_inner(bound, sig)?;
                rhs.validate_inner(bound, sig)
            }
            Formula::Exists(v, f) | Formula::Forall(v, f) => {
                if bound.contains(v) {
                    return Err(LogicError::ShadowedVariable(v.clone()));
                }
                bound.push(v.clone());
                let r = f.validate_inner(bound, sig);
                bound.pop();
                r
            }
        }
    }
}

impl fmt::Display for Formula {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Formula::Pred { name, args } => {
                if args.is_empty() {
                    write!(f, "{name}")
                } else {
                    write!(f, "{name}({})", args.join(","))
                }
            }
            Formula::Not(x) => write!(f, "!({x})"),
            Formula::And(a, b) => write!(f, "({a} & {b})"),
            Formula::Or(a, b) => write!(f, "({a} | {b})"),
            Formula::Exists(v, x) => write!(f, "exists {v}. {x}"),
            Formula::Forall(v, x) => write!(f, "forall {v}. {x}"),
            Formula::Always(x) => write!(f, "G ({x})"),
            Formula::Eventually(x) => write!(f, "F ({x})"),
            Formula::Until { lhs, rhs, strict } => {
                let op = if *strict { "U" } else { "Uw" };
                write!(f, "(({lhs}) {op} ({rhs}))")
            }
            Formula::Next(x) => write!(f, "X ({x})"),
            Formula::NextEventually(x) => write!(f, "XF ({x})"),
        }
    }
}

/// Boolean tables for every predicate, grounded over all entities and time
/// steps. Nullary tables are `[T]`, unary `[T][N]`, binary `[T][N][N]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTrace {
    pub t_len: usize,
    pub n_entities: usize,
    tables: BTreeMap<String, PredTable>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct PredTable {
    arity: usize,
    values: Vec<bool>,
}

impl GroundTrace {
    pub fn new(t_len: usize, n_entities: usize) -> Self {
        GroundTrace {
            t_len,
            n_entities,
            tables: BTreeMap::new(),
        }
    }

    fn table_len(&self, arity: usize) -> usize {
        self.t_len * self.n_entities.pow(arity as u32)
    }

    pub fn add_nullary(&mut self, name: &str, values: Vec<bool>) {
        assert_eq!(values.len(), self.t_len, "nullary table must have T cells");
        self.tables
            .insert(name.to_string(), PredTable { arity: 0, values });
    }

    /// `values[t * N + i]`.
    pub fn add_unary(&mut self, name: &str, values: Vec<bool>) {
        assert_eq!(values.len(), self.table_len(1), "unary table must have T*N cells");
        self.tables
            .insert(name.to_string(), PredTable { arity: 1, values });
    }

    /// `values[(t * N + i) * N + j]`.
    pub fn add_binary(&mut self, name: &str, values: Vec<bool>) {
        assert_eq!(values.len(), self.table_len(2), "binary table must have T*N*N cells");
        self.tables
            .insert(name.to_string(), PredTable { arity: 2, values });
    }

    /// Predicate name → arity, for formula validation.
    pub fn signature(&self) -> BTreeMap<String, usize> {
        self.tables
            .iter()
            .map(|(k, v)| (k.clone(), v.arity))
            .collect()
    }

    pub fn lookup(&self, name: &str, t: usize, args: &[usize]) -> Result<bool> {
        let table = self
            .tables
            .get(name)
            .ok_or_else(|| LogicError::UnknownPredicate(name.to_string()))?;
        if args.len() != table.arity {
            return Err(LogicError::ArityMismatch {
                name: name.to_string(),
                used: args.len(),
                declared: table.arity,
            });
        }
        let mut idx = t;
        for &a in args {
            idx = idx * self.n_entities + a;
        }
        Ok(table.values[idx])
    }
}

/// Evaluates `f` at time `t` under variable bindings `env`.
pub fn eval(
    f: &Formula,
    tr: &GroundTrace,
    t: usize,
    env: &BTreeMap<String, usize>,
) -> Result<bool> {
    if t >= tr.t_len {
        return Err(LogicError::TimeOutOfRange {
            t,
            len: tr.t_len,
        });
    }
    match f {
        Formula::Pred { name, args } => {
            let mut idxs = Vec::with_capacity(args.len());
            for a in args {
                idxs.push(
                    *env.get(a)
                        .ok_or_else(|| LogicError::UnboundVariable(a.clone()))?,
                );
            }
            tr.lookup(name, t, &idxs)
        }
        Formula::Not(x) => Ok(!eval(x, tr, t, env)?),
        Formula::And(a, b) => Ok(eval(a, tr, t, env)? && eval(b, tr, t, env)?),
        Formula::Or(a, b) => Ok(eval(a, tr, t, env)? || eval(b, tr, t, env)?),
        Formula::Exists(v, body) => {
            let mut env2 = env.clone();
            for i in 0..tr.n_entities {
                env2.insert(v.clone(), i);
                if eval(body, tr, t, &env2)? {
                    return Ok(true);
                }
            }
            Ok(false)
        }
        Formula::Forall(v, body) => {
            let mut env2 = env.clone();
            for i in 0..tr.n_entities {
                env2.insert(v.clone(), i);
                if !eval(body, tr, t, &env2)? {
                    return Ok(false);
                }
            }
            Ok(true)
        }
        Formula::Always(body) => {
            for t2 in t..tr.t_len {
                if !eval(body, tr, t2, env)? {
                    return Ok(false);
                }
            }
            Ok(true)
        }
        Formula::Eventually(body) => {
            for t2 in t..tr.t_len {
                if eval(body, tr, t2, env)? {
                    return Ok(true);
                }
            }
            Ok(false)
        }
        Formula::Until { lhs, rhs, strict } => {
            let start = if *strict { t + 1 } else { t };
            for t1 in start..tr.t_len {
                if eval(rhs, tr, t1, env)? {
                    let mut held = true;
                    for t2 in t..t1 {
                        if !eval(lhs, tr, t2, env)? {
                            held = false;
                            break;
                        }
                    }
                    if held {
                        return Ok(true);
                    }
                }
            }
            Ok(false)
        }
        Formula::Next(body) => {
            if t + 1 < tr.t_len {
                eval(body, tr, t + 1, env)
            } else {
                Ok(false)
            }
        }
        Formula::NextEventually(body) => {
            for t1 in t + 1..tr.t_len {
                if eval(body, tr, t1, env)? {
                    return Ok(true);
                }
            }
            Ok(false)
        }
    }
}

/// `eval` applied pointwise: over all `t` for closed formulas, over all
/// `(t, entity)` pairs when exactly one variable is free.
#[derive(Debug, Clone, PartialEq)]
pub enum EvalAll {
    /// `v[t]` for a closed formula.
    Closed(Vec<bool>),
    /// `v[t][i]` with the single free variable bound to entity `i`.
    Unary(Vec<Vec<bool>>),
}

pub fn eval_all(f: &Formula, tr: &GroundTrace) -> Result<EvalAll> {
    let free = f.free_vars();
    match free.len() {
        0 => {
            let env = BTreeMap::new();
            let mut out = Vec::with_capacity(tr.t_len);
            for t in 0..tr.t_len {
                out.push(eval(f, tr, t, &env)?);
            }
            Ok(EvalAll::Closed(out))
        }
        1 => {
            let v = &free[0];
            let mut out = Vec::with_capacity(tr.t_len);
            for t in 0..tr.t_len {
                let mut row = Vec::with_capacity(tr.n_entities);
                for i in 0..tr.n_entities {
                    let mut env = BTreeMap::new();
                    env.insert(v.clone(), i);
                    row.push(eval(f, tr, t, &env)?);
                }
                out.push(row);
            }
            Ok(EvalAll::Unary(out))
        }
        n => Err(LogicError::TooManyFreeVariables(n)),
    }
}

/// Predicate signature for trace enumeration: `(name, arity)` pairs.
pub type Signature = Vec<(String, usize)>;

/// Total boolean cells a trace over `sig` holds.
pub fn cell_count(t_len: usize, n_entities: usize, sig: &Signature) -> usize {
    sig.iter()
        .map(|(_, a)| t_len * n_entities.pow(*a as u32))
        .sum()
}

fn trace_from_bits(
    t_len: usize,
    n_entities: usize,
    sig: &Signature,
    mut bit: impl FnMut() -> bool,
) -> GroundTrace {
    let mut tr = GroundTrace::new(t_len, n_entities);
    for (name, arity) in sig {
        let len = t_len * n_entities.pow(*arity as u32);
        let values: Vec<bool> = (0..len).map(|_| bit()).collect();
        match arity {
            0 => tr.add_nullary(name, values),
            1 => tr.add_unary(name, values),
            2 => tr.add_binary(name, values),
            _ => unreachable!("arity <= 2"),
        }
    }
    tr
}

/// Exhaustive enumeration of all `2^cells` traces when `cells <= 20`;
/// otherwise exactly `limit` traces sampled uniformly from a generator
/// seeded with `seed`.
pub fn enumerate_traces(
    t_len: usize,
    n_entities: usize,
    sig: &Signature,
    limit: usize,
    seed: u64,
) -> Vec<GroundTrace> {
    let cells = cell_count(t_len, n_entities, sig);
    if cells <= 20 {
        let total = 1usize << cells;
        (0..total)
            .map(|mask| {
                let mut k = 0;
                trace_from_bits(t_len, n_entities, sig, || {
                    let b = (mask >> k) & 1 == 1;
                    k += 1;
                    b
                })
            })
            .collect()
    } else {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        (0..limit)
            .map(|_| trace_from_bits(t_len, n_entities, sig, || rng.gen::<bool>()))
            .collect()
    }
}

// ---------------------------------------------------------------------------
// Parser

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Ident(String),
    LParen,
    RParen,
    Comma,
    Dot,
    Amp,
    Pipe,
    Bang,
}

struct Lexer {
    toks: Vec<(Tok, usize)>,
}

fn parse_err(src: &str, col: usize, msg: impl Into<String>) -> LogicError {
    LogicError::Parse {
        col,
        msg: msg.into(),
        src: src.to_string(),
        caret: format!("{}^", " ".repeat(col)),
    }
}

impl Lexer {
    fn lex(src: &str) -> Result<Self> {
        let bytes = src.as_bytes();
        let mut toks = Vec::new();
        let mut i = 0;
        while i < bytes.len() {
            let c = bytes[i] as char;
            match c {
                ' ' | '\t' | '\n' | '\r' => i += 1,
                '(' => {
                    toks.push((Tok::LParen, i));
                    i += 1;
                }
                ')' => {
                    toks.push((Tok::RParen, i));
                    i += 1;
                }
                ',' => {
                    toks.push((Tok::Comma, i));
                    i += 1;
                }
                '.' => {
                    toks.push((Tok::Dot, i));
                    i += 1;
                }
                '&' => {
                    toks.push((Tok::Amp, i));
                    i += 1;
                }
                '|' => {
                    toks.push((Tok::Pipe, i));
                    i += 1;
                }
                '!' => {
                    toks.push((Tok::Bang, i));
                    i += 1;
                }
                _ if c.is_ascii_alphanumeric() || c == '_' => {
                    let start = i;
                    while i < bytes.len()
                        && ((bytes[i] as char).is_ascii_alphanumeric() || bytes[i] == b'_')
                    {
                        i += 1;
                    }
                    toks.push((Tok::Ident(src[start..i].to_string()), start));
                }
                _ => return Err(parse_err(src, i, format!("unexpected character `{c}`"))),
            }
        }
        Ok(Lexer { toks })
    }
}

struct Parser<'a> {
    src: &'a str,
    toks: Vec<(Tok, usize)>,
    pos: usize,
}

impl<'a> Parser<'a> {
    fn peek(&self) -> Option<&Tok> {
        self.toks.get(self.pos).map(|(t, _)| t)
    }

    fn col(&self) -> usize {
        self.toks
            .get(self.pos)
            .map(|(_, c)| *c)
            .unwrap_or(self.src.len())
    }

    fn bump(&mut self) -> Option<Tok> {
        let t = self.toks.get(self.pos).map(|(t, _)| t.clone());
        if t.is_some() {
            self.pos += 1;
        }
        t
    }

    fn expect(&mut self, want: Tok, what: &str) -> Result<()> {
        if self.peek() == Some(&want) {
            self.pos += 1;
            Ok(())
        } else {
            Err(parse_err(self.src, self.col(), format!("expected {what}")))
        }
    }

    fn formula(&mut self) -> Result<Formula> {
        if let Some(Tok::Ident(word)) = self.peek() {
            match word.as_str() {
                "exists" | "forall" => {
                    let kw = word.clone();
                    self.bump();
                    let var = match self.bump() {
                        Some(Tok::Ident(v)) if !is_keyword(&v) => v,
                        _ => {
                            return Err(parse_err(
                                self.src,
                                self.col(),
                                "expected variable name after quantifier",
                            ))
                        }
                    };
                    self.expect(Tok::Dot, "`.` after quantified variable")?;
                    let body = self.formula()?;
                    return Ok(if kw == "exists" {
                        Formula::exists(&var, body)
                    } else {
                        Formula::forall(&var, body)
                    });
                }
                "G" | "F" | "X" | "XF" => {
                    let kw = word.clone();
                    self.bump();
                    let body = self.formula()?;
                    return Ok(match kw.as_str() {
                        "G" => Formula::always(body),
                        "F" => Formula::eventually(body),
                        "X" => Formula::next(body),
                        _ => Formula::next_eventually(body),
                    });
                }
                _ => {}
            }
        }
        self.until()
    }

    fn until(&mut self) -> Result<Formula> {
        let lhs = self.disj()?;
        if let Some(Tok::Ident(word)) = self.peek() {
            match word.as_str() {
                "U" => {
                    self.bump();
                    let rhs = self.formula()?;
                    return Ok(Formula::until(lhs, rhs));
                }
                "Uw" => {
                    self.bump();
                    let rhs = self.formula()?;
                    return Ok(Formula::weak_until(lhs, rhs));
                }
                "XF" => {
                    // `a XF b` is shorthand for `a & XF b`.
                    self.bump();
                    let rhs = self.formula()?;
                    return Ok(Formula::and(lhs, Formula::next_eventually(rhs)));
                }
                _ => {}
            }
        }
        Ok(lhs)
    }

    fn disj(&mut self) -> Result<Formula> {
        let mut f = self.conj()?;
        while self.peek() == Some(&Tok::Pipe) {
            self.bump();
            let rhs = self.conj()?;
            f = Formula::or(f, rhs);
        }
        Ok(f)
    }

    fn conj(&mut self) -> Result<Formula> {
        let mut f = self.negation()?;
        while self.peek() == Some(&Tok::Amp) {
            self.bump();
            let rhs = self.negation()?;
            f = Formula::and(f, rhs);
        }
        Ok(f)
    }

    fn negation(&mut self) -> Result<Formula> {
        match self.peek() {
            Some(Tok::Bang) => {
                self.bump();
                Ok(Formula::not(self.negation()?))
            }
            Some(Tok::LParen) => {
                self.bump();
                let f = self.formula()?;
                self.expect(Tok::RParen, "closing `)`")?;
                Ok(f)
            }
            Some(Tok::Ident(w)) if !is_keyword(w) => self.atom(),
            Some(Tok::Ident(w)) if matches!(w.as_str(), "G" | "F" | "X" | "XF") => {
                // Allow prefix operators inside parentheses-free positions
                // such as `p & G q` rejecting nothing: treat as sub-formula.
                self.formula()
            }
            _ => Err(parse_err(
                self.src,
                self.col(),
                "expected predicate, `!`, or `(`",
            )),
        }
    }

    fn atom(&mut self) -> Result<Formula> {
        let name = match self.bump() {
            Some(Tok::Ident(n)) => n,
            _ => unreachable!("caller checked"),
        };
        if self.peek() == Some(&Tok::LParen) {
            self.bump();
            let mut args = Vec::new();
            if self.peek() != Some(&Tok::RParen) {
                loop {
                    match self.bump() {
                        Some(Tok::Ident(v)) if !is_keyword(&v) => args.push(v),
                        _ => {
                            return Err(parse_err(
                                self.src,
                                self.col(),
                                "expected variable name in argument list",
                            ))
                        }
                    }
                    if self.peek() == Some(&Tok::Comma) {
                        self.bump();
                    } else {
                        break;
                    }
                }
            }
            self.expect(Tok::RParen, "closing `)` of argument list")?;
            if args.len() > 2 {
                return Err(parse_err(
                    self.src,
                    self.col(),
                    format!("predicate `{name}` has {} arguments; at most 2 supported", args.len()),
                ));
            }
            Ok(Formula::Pred { name, args })
        } else {
            Ok(Formula::pred0(&name))
        }
    }
}

fn is_keyword(s: &str) -> bool {
    matches!(s, "exists" | "forall" | "G" | "F" | "X" | "XF" | "U" | "Uw")
}

/// Parses the text syntax documented at the top of this module.
pub fn parse(src: &str) -> Result<Formula> {
    let lexer = Lexer::lex(src)?;
    let mut p = Parser {
        src,
        toks: lexer.toks,
        pos: 0,
    };
    let f = p.formula()?;
    if p.pos != p.toks.len() {
        return Err(parse_err(src, p.col(), "unexpected trailing input"));
    }
    // Reject free variables at parse boundary: the CLI only deals in
    // closed formulas.
    let free: BTreeSet<String> = f.free_vars().into_iter().collect();
    if !free.is_empty() {
        return Err(parse_err(
            src,
            0,
            format!(
                "unbound variable(s): {}",
                free.into_iter().collect::<Vec<_>>().join(", ")
            ),
        ));
    }
    Ok(f)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn table1_trace() -> GroundTrace {
        // p=(T,T,F,F), q=(T,F,T,T) over four steps, no entities needed.
        let mut tr = GroundTrace::new(4, 1);
        tr.add_nullary("p", vec![true, true, false, false]);
        tr.add_nullary("q", vec![true, false, true, true]);
        tr
    }

    fn closed(f: &Formula, tr: &GroundTrace) -> Vec<bool> {
        match eval_all(f, tr).unwrap() {
            EvalAll::Closed(v) => v,
            EvalAll::Unary(_) => panic!("expected closed"),
        }
    }

    #[test]
    fn running_example_truth_table() {
        let tr = table1_trace();
        let p = Formula::pred0("p");
        let q = Formula::pred0("q");
        assert_eq!(
            closed(&Formula::always(p.clone()), &tr),
            vec![false, false, false, false]
        );
        assert_eq!(
            closed(&Formula::eventually(p.clone()), &tr),
            vec![true, true, false, false]
        );
        assert_eq!(
            closed(&Formula::always(q.clone()), &tr),
            vec![false, false, true, true]
        );
        assert_eq!(
            closed(&Formula::eventually(q.clone()), &tr),
            vec![true, true, true, true]
        );
        assert_eq!(
            closed(&Formula::until(p, Formula::always(q)), &tr),
            vec![true, true, false, false]
        );
    }

    #[test]
    fn always_on_all_true() {
        let mut tr = GroundTrace::new(5, 1);
        tr.add_nullary("p", vec![true; 5]);
        assert_eq!(
            closed(&Formula::always(Formula::pred0("p")), &tr),
            vec![true; 5]
        );
    }

    #[test]
    fn strict_until_false_at_last_step() {
        // Even with rhs true everywhere: no strictly-later witness exists.
        let mut tr = GroundTrace::new(3, 1);
        tr.add_nullary("p", vec![true; 3]);
        tr.add_nullary("q", vec![true; 3]);
        let f = Formula::until(Formula::pred0("p"), Formula::pred0("q"));
        let out = closed(&f, &tr);
        assert!(!out[2]);
        assert!(out[0] && out[1]);
    }

    #[test]
    fn next_false_at_last_step() {
        let mut tr = GroundTrace::new(2, 1);
        tr.add_nullary("p", vec![true, true]);
        assert_eq!(
            closed(&Formula::next(Formula::pred0("p")), &tr),
            vec![true, false]
        );
    }

    #[test]
    fn exists_unary_cases() {
        // Entity 0 satisfies both predicates at t=0; no entity at t=1.
        let mut tr = GroundTrace::new(2, 2);
        tr.add_unary("q1", vec![true, true, true, false]);
        tr.add_unary("q2", vec![true, false, false, true]);
        let f = Formula::exists(
            "x",
            Formula::and(Formula::pred1("q1", "x"), Formula::pred1("q2", "x")),
        );
        assert_eq!(closed(&f, &tr), vec![true, false]);
    }

    #[test]
    fn eval_all_unary_shape() {
        let mut tr = GroundTrace::new(3, 2);
        tr.add_unary("q", vec![true, false, false, true, true, true]);
        match eval_all(&Formula::pred1("q", "x"), &tr).unwrap() {
            EvalAll::Unary(v) => {
                assert_eq!(v.len(), 3);
                assert_eq!(v[0], vec![true, false]);
                assert_eq!(v[1], vec![false, true]);
            }
            _ => panic!("expected unary"),
        }
    }

    #[test]
    fn two_free_variables_rejected() {
        let mut tr = GroundTrace::new(1, 1);
        tr.add_binary("r", vec![true]);
        assert_eq!(
            eval_all(&Formula::pred2("r", "x", "y"), &tr),
            Err(LogicError::TooManyFreeVariables(2))
        );
    }

    #[test]
    fn eval_errors() {
        let tr = table1_trace();
        let env = BTreeMap::new();
        assert_eq!(
            eval(&Formula::pred0("p"), &tr, 9, &env),
            Err(LogicError::TimeOutOfRange { t: 9, len: 4 })
        );
        assert_eq!(
            eval(&Formula::pred0("zzz"), &tr, 0, &env),
            Err(LogicError::UnknownPredicate("zzz".into()))
        );
        assert_eq!(
            eval(&Formula::pred1("p", "x"), &tr, 0, &env),
            Err(LogicError::UnboundVariable("x".into()))
        );
    }

    #[test]
    fn validate_checks_arity_and_binding() {
        let tr = table1_trace();
        let sig = tr.signature();
        assert_eq!(
            Formula::pred1("p", "x").validate(&sig),
            Err(LogicError::ArityMismatch {
                name: "p".into(),
                used: 1,
                declared: 0
            })
        );
        let shadow = Formula::exists(
            "x",
            Formula::exists("x", Formula::pred0("p")),
        );
        assert_eq!(
            shadow.validate(&sig),
            Err(LogicError::ShadowedVariable("x".into()))
        );
        assert!(Formula::always(Formula::pred0("q")).validate(&sig).is_ok());
    }

    #[test]
    fn enumerate_exhaustive_counts() {
        let sig1: Signature = vec![("q".into(), 1)];
        assert_eq!(enumerate_traces(2, 1, &sig1, 0, 0).len(), 4);
        let sig0: Signature = vec![("p".into(), 0)];
        let traces = enumerate_traces(4, 1, &sig0, 0, 0).into_iter();
        let traces: Vec<_> = traces.collect();
        assert_eq!(traces.len(), 16);
        // Contains the running example's p column.
        let target = vec![true, true, false, false];
        assert!(traces.iter().any(|tr| {
            (0..4).all(|t| tr.lookup("p", t, &[]).unwrap() == target[t])
        }));
    }

    #[test]
    fn enumerate_sampled_deterministic() {
        let sig: Signature = vec![("q".into(), 1)];
        // 30 cells: sampling path.
        let a = enumerate_traces(10, 3, &sig, 50, 7);
        let b = enumerate_traces(10, 3, &sig, 50, 7);
        let c = enumerate_traces(10, 3, &sig, 50, 8);
        assert_eq!(a.len(), 50);
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn g_f_duality_exhaustive() {
        let sig: Signature = vec![("p".into(), 0)];
        let p = Formula::pred0("p");
        let lhs = Formula::not(Formula::always(p.clone()));
        let rhs = Formula::eventually(Formula::not(p));
        for tr in enumerate_traces(5, 1, &sig, 0, 0) {
            assert_eq!(closed(&lhs, &tr), closed(&rhs, &tr));
        }
    }

    #[test]
    fn exists_forall_duality_exhaustive() {
        let sig: Signature = vec![("q".into(), 1)];
        let body = Formula::pred1("q", "x");
        let lhs = Formula::exists("x", body.clone());
        let rhs = Formula::not(Formula::forall("x", Formula::not(body)));
        for tr in enumerate_traces(3, 2, &sig, 0, 0) {
            assert_eq!(closed(&lhs, &tr), closed(&rhs, &tr));
        }
    }

    #[test]
    fn weak_until_vs_strict_exhaustive() {
        // weak(p, q)(t)  ==  q(t) ∨ strict(p, q)(t) when p(t) holds;
        // more precisely weak is true iff q holds at t, or p holds at t and
        // the strict form is true.
        let sig: Signature = vec![("p".into(), 0), ("q".into(), 0)];
        let p = Formula::pred0("p");
        let q = Formula::pred0("q");
        let weak = Formula::weak_until(p.clone(), q.clone());
        let strict = Formula::until(p.clone(), q.clone());
        for tr in enumerate_traces(5, 1, &sig, 0, 0) {
            let w = closed(&weak, &tr);
            let s = closed(&strict, &tr);
            let pv = closed(&p, &tr);
            let qv = closed(&q, &tr);
            for t in 0..5 {
                assert_eq!(w[t], qv[t] || (pv[t] && s[t]), "t={t}");
                // Strict true implies weak true whenever lhs holds at t.
                if s[t] && pv[t] {
                    assert!(w[t]);
                }
            }
        }
    }

    #[test]
    fn parse_running_example() {
        let f = parse("p U G q").unwrap();
        assert_eq!(
            f,
            Formula::until(Formula::pred0("p"), Formula::always(Formula::pred0("q")))
        );
    }

    #[test]
    fn parse_prefix_binds_loosest() {
        // `F p1 XF p2` is F(p1 & XF p2), not (F p1) & ...
        let f = parse("F p1 XF p2").unwrap();
        assert_eq!(
            f,
            Formula::eventually(Formula::and(
                Formula::pred0("p1"),
                Formula::next_eventually(Formula::pred0("p2"))
            ))
        );
    }

    #[test]
    fn parse_quantifiers_and_preds() {
        let f = parse("exists x. q1(x) & q2(x)").unwrap();
        assert_eq!(
            f,
            Formula::exists(
                "x",
                Formula::and(Formula::pred1("q1", "x"), Formula::pred1("q2", "x"))
            )
        );
        let g = parse("forall x. forall y. near(x,y)").unwrap();
        assert_eq!(
            g,
            Formula::forall("x", Formula::forall("y", Formula::pred2("near", "x", "y")))
        );
        let h = parse("G (exists x. !moving(x) | istarget(x))").unwrap();
        assert!(matches!(h, Formula::Always(_)));
    }

    #[test]
    fn parse_precedence_and_or_not() {
        let f = parse("!a & b | c").unwrap();
        // ((!a & b) | c)
        assert_eq!(
            f,
            Formula::or(
                Formula::and(Formula::not(Formula::pred0("a")), Formula::pred0("b")),
                Formula::pred0("c")
            )
        );
    }

    #[test]
    fn parse_weak_until_token() {
        let f = parse("p Uw q").unwrap();
        assert_eq!(f, Formula::weak_until(Formula::pred0("p"), Formula::pred0("q")));
    }

    #[test]
    fn parse_errors_have_caret_position() {
        match parse("p U") {
            Err(LogicError::Parse { col, caret, .. }) => {
                assert_eq!(col, 3);
                assert!(caret.ends_with('^'));
            }
            other => panic!("expected parse error, got {other:?}"),
        }
        assert!(parse("near(x)").is_err(), "free variable must be rejected");
        assert!(parse("p $ q").is_err());
        assert!(parse("(p").is_err());
        assert!(parse("p q").is_err());
    }

    #[test]
    fn display_round_trips_through_parse() {
        for src in [
            "p U G q",
            "F p1 XF p2",
            "exists x. q1(x) & q2(x)",
            "forall x. F (exists y. near(x,y))",
            "G (p | !q)",
            "p Uw q",
            "X p",
        ] {
            let f = parse(src).unwrap();
            let again = parse(&f.to_string()).unwrap();
            assert_eq!(f, again, "round-trip failed for `{src}`");
        }
    }

    proptest! {
        /// Randomized dualities on larger traces than the expensive
        /// exhaustive sweeps cover.
        #[test]
        fn dualities_on_random_traces(seed in 0u64..500) {
            let sig: Signature = vec![("p".into(), 0), ("q".into(), 1)];
            let tr = &enumerate_traces(6, 3, &sig, 1, seed)[0];
            let p = Formula::pred0("p");
            let ex = Formula::exists("x", Formula::pred1("q", "x"));

            let not_g = closed(&Formula::not(Formula::always(p.clone())), tr);
            let f_not = closed(&Formula::eventually(Formula::not(p.clone())), tr);
            prop_assert_eq!(not_g, f_not);

            let dual = Formula::not(Formula::forall(
                "x",
                Formula::not(Formula::pred1("q", "x")),
            ));
            prop_assert_eq!(closed(&ex, tr), closed(&dual, tr));

            // X p == false at last step and equals p shifted otherwise.
            let xp = closed(&Formula::next(p.clone()), tr);
            let pv = closed(&p, tr);
            for t in 0..6 {
                let want = if t + 1 < 6 { pv[t + 1] } else { false };
                prop_assert_eq!(xp[t], want);
            }

            // XF p == X F p.
            let xf = closed(&Formula::next_eventually(p.clone()), tr);
            let x_then_f = closed(&Formula::next(Formula::eventually(p.clone())), tr);
            prop_assert_eq!(xf, x_then_f);
        }
    }
}
