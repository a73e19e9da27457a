//! Exact weight synthesis for formulas of a restricted fragment, the
//! crate's central correctness instrument: a compiled network evaluated in
//! hard (step-activation) mode must agree with the logic oracle on every
//! trace.
//!
//! Supported fragment (a conservative, syntactic restriction):
//!
//! - *State formulas*: a flat AND or OR over atoms, where an atom is a
//!   (possibly negated) nullary predicate or a quantifier `exists x. C` /
//!   `forall x. C` whose body `C` is a flat AND/OR of unary predicates of
//!   the quantified variable.
//! - *Temporal forms* over state formulas s, s_i:
//!   `s` | `G s` | `F s` | `s U <temporal>` (strict) |
//!   `F s1 XF s2 XF ... XF sk` | `XF s1 XF ... XF sk`.
//!
//! Object quantifiers may appear only inside the state formulas — never
//! wrapping a temporal operator.
//!
//! Compilation layout: predicate channels enter through a predicate
//! extractor; relational layers materialize each state formula as a
//! nullary channel via threshold gates (entity max realizes `exists`,
//! negation of max realizes `forall`); the first temporal layer turns
//! suffix maxima into `F`/`G` channels; each `U` or `XF` step occupies
//! one general temporal layer whose gate reads operand channels at the
//! future step and the interval max of the (negated) left operand.

use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::logic::{self, Formula, GroundTrace, Signature};
use crate::model::{
    Activation, Extractor, ModelConfig, ModelError, ModelInput, ModelParams, RrlParams, TrlParams,
};
use crate::tensor::{AffineMap, Tape, Tensor};

pub const DEFAULT_GAIN: f64 = 20.0;

#[derive(Debug, Error)]
pub enum CompileError {
    #[error("unsupported fragment at `{subterm}`: {reason}")]
    Fragment { subterm: String, reason: String },
    #[error("gate construction failed self-verification")]
    GateVerification,
    #[error("gain must be > 0")]
    BadGain,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("logic: {0}")]
    Logic(#[from] logic::LogicError),
}

pub type Result<T> = std::result::Result<T, CompileError>;

fn reject<T>(subterm: &Formula, reason: &str) -> Result<T> {
    Err(CompileError::Fragment {
        subterm: subterm.to_string(),
        reason: reason.to_string(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum CompileMode {
    /// Step activations; exact boolean gates.
    Hard,
    /// Sigmoid activations with the given gate gain.
    Soft { gain: f64 },
}

impl CompileMode {
    pub fn gain(self) -> f64 {
        match self {
            CompileMode::Hard => DEFAULT_GAIN,
            CompileMode::Soft { gain } => gain,
        }
    }
}

/// Where a named formula channel lives in the compiled network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "stage", rename_all = "snake_case")]
pub enum ChannelRef {
    /// Unary channel of relational layer `layer` (0-based).
    RrlQ { layer: usize, channel: usize },
    /// Nullary channel of relational layer `layer`.
    RrlP { layer: usize, channel: usize },
    /// Fresh (non-residual) output channel of temporal layer `layer`.
    TrlNew { layer: usize, channel: usize },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CompiledNet {
    pub params: ModelParams,
    /// Canonical-text subterm -> materialized channel. Bijective onto the
    /// gated channels of the network.
    pub channel_map: BTreeMap<String, ChannelRef>,
    pub mode: CompileMode,
    pub formula: String,
    /// Index of the root channel in the final feature track.
    pub root_position: usize,
}

// ---------------------------------------------------------------------------
// Threshold gates

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GateKind {
    And,
    Or,
}

impl GateKind {
    fn flip(self) -> GateKind {
        match self {
            GateKind::And => GateKind::Or,
            GateKind::Or => GateKind::And,
        }
    }
}

/// One threshold gate over (index, negated) literals: returns the weight
/// column and bias realizing the boolean function, verified exhaustively
/// over all boolean inputs at construction.
pub fn gate_weights(
    kind: GateKind,
    lits: &[(usize, bool)],
    in_width: usize,
    gain: f64,
) -> Result<(Vec<f64>, f64)> {
    if gain <= 0.0 {
        return Err(CompileError::BadGain);
    }
    let mut col = vec![0.0; in_width];
    let mut k = 0usize; // positive literals
    let mut m = 0usize; // negated literals
    for &(idx, neg) in lits {
        assert!(idx < in_width, "literal index in range");
        col[idx] += if neg { -gain } else { gain };
        if neg {
            m += 1;
        } else {
            k += 1;
        }
    }
    let bias = match kind {
        GateKind::And => gain * (0.5 - k as f64),
        GateKind::Or => gain * (m as f64 - 0.5),
    };
    // Exhaustive self-check over all assignments of the literal inputs.
    let l = lits.len();
    assert!(l <= 16, "gates stay small by construction");
    for mask in 0..(1usize << l) {
        let mut pre = bias;
        let mut truth_and = true;
        let mut truth_or = false;
        for (j, &(_, neg)) in lits.iter().enumerate() {
            let v = (mask >> j) & 1 == 1;
            if v {
                pre += if neg { -gain } else { gain };
            }
            let lit = if neg { !v } else { v };
            truth_and &= lit;
            truth_or |= lit;
        }
        let truth = match kind {
            GateKind::And => truth_and,
            GateKind::Or => truth_or,
        };
        if (pre > 0.0) != truth {
            return Err(CompileError::GateVerification);
        }
    }
    Ok((col, bias))
}

/// Column-by-column affine builder for a gate layer.
struct LayerBuilder {
    in_width: usize,
    cols: Vec<(Vec<f64>, f64)>,
}

impl LayerBuilder {
    fn new(in_width: usize) -> Self {
        LayerBuilder {
            in_width,
            cols: Vec::new(),
        }
    }

    fn gate(&mut self, kind: GateKind, lits: &[(usize, bool)], gain: f64) -> Result<usize> {
        let (col, bias) = gate_weights(kind, lits, self.in_width, gain)?;
        self.cols.push((col, bias));
        Ok(self.cols.len() - 1)
    }

    fn identity(&mut self, idx: usize, gain: f64) -> Result<usize> {
        self.gate(GateKind::And, &[(idx, false)], gain)
    }

    fn build(self) -> AffineMap {
        let out = self.cols.len();
        let mut weight = Tensor::zeros(vec![self.in_width, out]);
        let mut bias = Tensor::zeros(vec![out]);
        for (c, (col, b)) in self.cols.iter().enumerate() {
            for (i, v) in col.iter().enumerate() {
                weight.data_mut()[i * out + c] = *v;
            }
            bias.data_mut()[c] = *b;
        }
        AffineMap { weight, bias }
    }
}

// ---------------------------------------------------------------------------
// Fragment analysis

#[derive(Debug, Clone)]
struct UnaryComboA {
    formula: Formula,
    kind: GateKind,
    /// (unary predicate name, negated).
    lits: Vec<(String, bool)>,
}

#[derive(Debug, Clone)]
enum AtomA {
    Nullary { name: String, neg: bool },
    /// `neg XOR exists x. combo`; `forall` is normalized into this form.
    Quant { combo: usize, neg: bool },
}

#[derive(Debug, Clone)]
struct StateA {
    formula: Formula,
    kind: GateKind,
    atoms: Vec<AtomA>,
}

#[derive(Debug, Clone)]
enum TempNode {
    State(usize),
    Always { key: String },
    EventuallyState { key: String },
    Until {
        neg_lhs: usize,
        rhs: Box<TempNode>,
        key: String,
    },
    /// `F s1 XF s2 ... XF sk` when `with_interval`, else
    /// `XF s1 XF ... XF sk`. `steps[i]` pairs the state with the full
    /// subformula it heads (for channel naming).
    Chain {
        with_interval: bool,
        first: Option<usize>,
        steps: Vec<(usize, String)>,
        key: String,
    },
}

#[derive(Debug, Default)]
struct Analysis {
    combos: Vec<UnaryComboA>,
    combo_index: BTreeMap<String, usize>,
    states: Vec<StateA>,
    state_index: BTreeMap<String, usize>,
    preds0: BTreeSet<String>,
    preds1: BTreeSet<String>,
    /// (channel key, source state index, is_always).
    first_gates: Vec<(String, usize, bool)>,
    has_quant: bool,
}

impl Analysis {
    fn register_combo(&mut self, c: UnaryComboA) -> usize {
        let key = c.formula.to_string();
        if let Some(&i) = self.combo_index.get(&key) {
            return i;
        }
        for (name, _) in &c.lits {
            self.preds1.insert(name.clone());
        }
        self.combos.push(c);
        self.combo_index.insert(key, self.combos.len() - 1);
        self.combos.len() - 1
    }

    fn register_state(&mut self, s: StateA) -> usize {
        let key = s.formula.to_string();
        if let Some(&i) = self.state_index.get(&key) {
            return i;
        }
        for a in &s.atoms {
            match a {
                AtomA::Nullary { name, .. } => {
                    self.preds0.insert(name.clone());
                }
                AtomA::Quant { .. } => {
                    self.has_quant = true;
                }
            }
        }
        self.states.push(s);
        self.state_index.insert(key, self.states.len() - 1);
        self.states.len() - 1
    }

    fn register_first_gate(&mut self, key: String, state: usize, is_always: bool) {
        if !self.first_gates.iter().any(|(k, _, _)| *k == key) {
            self.first_gates.push((key, state, is_always));
        }
    }
}

/// Flattens nested applications of one connective, rejecting the other.
fn flatten<'a>(f: &'a Formula, kind: GateKind, out: &mut Vec<&'a Formula>) {
    match (f, kind) {
        (Formula::And(a, b), GateKind::And) | (Formula::Or(a, b), GateKind::Or) => {
            flatten(a, kind, out);
            flatten(b, kind, out);
        }
        _ => out.push(f),
    }
}

fn parse_unary_combo(f: &Formula, var: &str, neg: bool) -> Result<UnaryComboA> {
    let base_kind = match f {
        Formula::And(..) => GateKind::And,
        Formula::Or(..) => GateKind::Or,
        _ => GateKind::And, // single literal
    };
    let kind = if neg { base_kind.flip() } else { base_kind };
    let mut leaves = Vec::new();
    flatten(f, base_kind, &mut leaves);
    let mut lits = Vec::new();
    for leaf in leaves {
        let (inner, mut lneg) = strip_not(leaf);
        lneg ^= neg;
        match inner {
            Formula::Pred { name, args } if args.len() == 1 && args[0] == var => {
                lits.push((name.clone(), lneg));
            }
            Formula::Pred { args, .. } if args.is_empty() => {
                return reject(leaf, "nullary predicates are not supported inside a quantifier body");
            }
            Formula::And(..) | Formula::Or(..) => {
                return reject(f, "quantifier bodies must be a flat AND or flat OR of literals");
            }
            Formula::Always(..)
            | Formula::Eventually(..)
            | Formula::Until { .. }
            | Formula::Next(..)
            | Formula::NextEventually(..) => {
                return reject(
                    leaf,
                    "temporal operators cannot appear under an object quantifier (quantifiers \
                     nest inside temporal scope, not around it)",
                )
            }
            _ => {
                return reject(
                    leaf,
                    "quantifier bodies may only contain unary predicates of the quantified variable",
                )
            }
        }
    }
    let formula_key = if neg {
        Formula::not(f.clone())
    } else {
        f.clone()
    };
    Ok(UnaryComboA {
        formula: formula_key,
        kind,
        lits,
    })
}

/// Peels `Not` wrappers, returning the innermost formula and parity.
fn strip_not(f: &Formula) -> (&Formula, bool) {
    match f {
        Formula::Not(inner) => {
            let (g, n) = strip_not(inner);
            (g, !n)
        }
        _ => (f, false),
    }
}

fn parse_atom(f: &Formula, neg: bool, an: &mut Analysis) -> Result<AtomA> {
    let (inner, n2) = strip_not(f);
    let neg = neg ^ n2;
    match inner {
        Formula::Pred { name, args } if args.is_empty() => Ok(AtomA::Nullary {
            name: name.clone(),
            neg,
        }),
        Formula::Pred { .. } => reject(
            inner,
            "predicates with arguments must appear under a quantifier",
        ),
        Formula::Exists(v, body) => {
            let combo = parse_unary_combo(body, v, false)?;
            let idx = an.register_combo(combo);
            Ok(AtomA::Quant { combo: idx, neg })
        }
        Formula::Forall(v, body) => {
            // forall x. C == !(exists x. !C)
            let combo = parse_unary_combo(body, v, true)?;
            let idx = an.register_combo(combo);
            Ok(AtomA::Quant { combo: idx, neg: !neg })
        }
        Formula::Always(..)
        | Formula::Eventually(..)
        | Formula::Until { .. }
        | Formula::Next(..)
        | Formula::NextEventually(..) => reject(
            inner,
            "temporal operators cannot appear inside a state formula (object quantification \
             nests inside temporal operators, not around them)",
        ),
        Formula::And(..) | Formula::Or(..) => reject(
            f,
            "state formulas must be a flat AND or flat OR (no mixed nesting)",
        ),
        Formula::Not(..) => unreachable!("stripped"),
    }
}

fn parse_state(f: &Formula, neg: bool, an: &mut Analysis) -> Result<StateA> {
    let (core, n2) = strip_not(f);
    let neg = neg ^ n2;
    let base_kind = match core {
        Formula::And(..) => GateKind::And,
        Formula::Or(..) => GateKind::Or,
        _ => {
            // Single atom.
            let atom = parse_atom(core, neg, an)?;
            let formula_key = if neg {
                Formula::not(core.clone())
            } else {
                core.clone()
            };
            return Ok(StateA {
                formula: formula_key,
                kind: GateKind::And,
                atoms: vec![atom],
            });
        }
    };
    let kind = if neg { base_kind.flip() } else { base_kind };
    let mut leaves = Vec::new();
    flatten(core, base_kind, &mut leaves);
    let mut atoms = Vec::new();
    for leaf in leaves {
        if matches!(strip_not(leaf).0, Formula::And(..) | Formula::Or(..)) {
            return reject(f, "state formulas must be a flat AND or flat OR (no mixed nesting)");
        }
        atoms.push(parse_atom(leaf, neg, an)?);
    }
    let formula_key = if neg {
        Formula::not(core.clone())
    } else {
        core.clone()
    };
    Ok(StateA {
        formula: formula_key,
        kind,
        atoms,
    })
}

fn reg_state(f: &Formula, neg: bool, an: &mut Analysis) -> Result<usize> {
    let s = parse_state(f, neg, an)?;
    Ok(an.register_state(s))
}

/// Splits `F s1 XF s2 XF ...` / `XF s1 XF ...` into its chain of states.
/// Returns None if `f` is not shaped like an XF chain body.
fn chain_steps(f: &Formula) -> Option<Vec<&Formula>> {
    // Body shapes: `s` | `s & XF body` | `XF body` handled by caller.
    match f {
        Formula::And(a, b) => {
            if let Formula::NextEventually(inner) = &**b {
                let mut rest = chain_steps(inner)?;
                rest.insert(0, a);
                Some(rest)
            } else {
                None
            }
        }
        _ => Some(vec![f]),
    }
}

fn parse_temporal(f: &Formula, an: &mut Analysis, is_root: bool) -> Result<TempNode> {
    match f {
        Formula::Always(body) => {
            let _ = reg_state(body, false, an)?;
            let neg_body = reg_state(body, true, an)?;
            let key = f.to_string();
            an.register_first_gate(key.clone(), neg_body, true);
            Ok(TempNode::Always { key })
        }
        Formula::Eventually(body) => {
            // Either F(state) or an F-rooted XF chain.
            if let Some(steps) = chain_steps(body) {
                if steps.len() >= 2 {
                    return build_chain(f, &steps, true, an);
                }
            }
            let pos = reg_state(body, false, an)?;
            let key = f.to_string();
            an.register_first_gate(key.clone(), pos, false);
            Ok(TempNode::EventuallyState { key })
        }
        Formula::NextEventually(body) => {
            let steps = match chain_steps(body) {
                Some(s) => s,
                None => return reject(f, "unsupported XF chain shape"),
            };
            build_chain(f, &steps, false, an)
        }
        Formula::Until { lhs, rhs, strict } => {
            if !*strict {
                return reject(f, "only the strict Until is compiled");
            }
            let neg_lhs = reg_state(lhs, true, an)?;
            // The left operand must also denote a valid state; register
            // its positive form so the channel map names it.
            let _ = reg_state(lhs, false, an)?;
            let rhs_node = match &**rhs {
                Formula::Always(..)
                | Formula::Eventually(..)
                | Formula::Until { .. } => parse_temporal(rhs, an, false)?,
                Formula::NextEventually(..) => {
                    return reject(rhs, "XF chains cannot be the right side of Until")
                }
                other => TempNode::State(reg_state(other, false, an)?),
            };
            Ok(TempNode::Until {
                neg_lhs,
                rhs: Box::new(rhs_node),
                key: f.to_string(),
            })
        }
        Formula::Next(..) => reject(f, "bare X is not compiled (use XF)"),
        other => {
            let idx = reg_state(other, false, an)?;
            if !is_root {
                return reject(f, "state formulas may only nest under temporal operators here");
            }
            Ok(TempNode::State(idx))
        }
    }
}

fn build_chain(
    whole: &Formula,
    steps: &[&Formula],
    with_interval: bool,
    an: &mut Analysis,
) -> Result<TempNode> {
    // For `F s1 XF s2 ... XF sk` the first state feeds the interval max;
    // the remaining states are future-step literals. Pure XF chains use
    // all states as future-step literals.
    let mut first = None;
    let mut rest: Vec<(usize, String)> = Vec::new();
    let states: Vec<usize> = steps
        .iter()
        .map(|s| reg_state(s, false, an))
        .collect::<Result<_>>()?;
    let start = if with_interval {
        first = Some(states[0]);
        1
    } else {
        0
    };
    // Channel key for the suffix headed by step i:
    // XF (s_i XF (s_{i+1} XF ... s_k)).
    let sub_key = |i: usize| -> String {
        let mut node = (*steps.last().unwrap()).clone();
        for j in (i..steps.len() - 1).rev() {
            node = Formula::and(steps[j].clone(), Formula::next_eventually(node));
        }
        Formula::next_eventually(node).to_string()
    };
    for (i, &s) in states.iter().enumerate().skip(start) {
        rest.push((s, sub_key(i)));
    }
    Ok(TempNode::Chain {
        with_interval,
        first,
        steps: rest,
        key: whole.to_string(),
    })
}

fn general_layers(node: &TempNode) -> usize {
    match node {
        TempNode::State(_) | TempNode::Always { .. } | TempNode::EventuallyState { .. } => 0,
        TempNode::Until { rhs, .. } => 1 + general_layers(rhs),
        TempNode::Chain { steps, .. } => steps.len(),
    }
}

/// Admissibility check: parses the fragment and validates layer budgets.
/// Returns the required (relational, temporal) depths.
pub fn check_fragment(f: &Formula, cfg: &ModelConfig) -> Result<(usize, usize)> {
    let mut an = Analysis::default();
    let root = parse_temporal(f, &mut an, true)?;
    let k_needed = if an.has_quant { 2 } else { 1 };
    let l_needed = match root {
        TempNode::State(_) => 0,
        ref n => 1 + general_layers(n),
    };
    if k_needed > cfg.k_rrl {
        return reject(
            f,
            &format!(
                "needs {k_needed} relational layers but the configuration has {}",
                cfg.k_rrl
            ),
        );
    }
    if l_needed > cfg.l_trl {
        return reject(
            f,
            &format!(
                "needs {l_needed} temporal layers but the configuration has {}",
                cfg.l_trl
            ),
        );
    }
    Ok((k_needed, l_needed))
}

// ---------------------------------------------------------------------------
// Compilation

pub fn compile(f: &Formula, cfg: &ModelConfig, mode: CompileMode) -> Result<CompiledNet> {
    check_fragment(f, cfg)?;
    let mut an = Analysis::default();
    let root = parse_temporal(f, &mut an, true)?;
    let gain = mode.gain();

    let preds0: Vec<String> = an.preds0.iter().cloned().collect();
    let preds1: Vec<String> = an.preds1.iter().cloned().collect();
    let (d0, d1) = (preds0.len(), preds1.len());
    let mut channel_map: BTreeMap<String, ChannelRef> = BTreeMap::new();

    // ---- Relational stack.
    let state_layer = if an.has_quant { 1 } else { 0 }; // 0-based layer index
    let mut rrls: Vec<RrlParams> = Vec::new();

    if state_layer == 1 {
        // Layer 0: Q gates compute the quantifier bodies; P passes the
        // nullary predicates through.
        let mut qb = LayerBuilder::new(d1 + 0 + 0 + d0); // [Q | maxR.. (d2=0) | P]
        for (ci, combo) in an.combos.iter().enumerate() {
            let lits: Vec<(usize, bool)> = combo
                .lits
                .iter()
                .map(|(name, neg)| {
                    (preds1.iter().position(|p| p == name).expect("registered"), *neg)
                })
                .collect();
            let ch = qb.gate(combo.kind, &lits, gain)?;
            debug_assert_eq!(ch, ci);
            channel_map.insert(
                combo.formula.to_string(),
                ChannelRef::RrlQ { layer: 0, channel: ch },
            );
        }
        let mut pb = LayerBuilder::new(d0 + d1); // [P | maxQ]
        for (i, name) in preds0.iter().enumerate() {
            let ch = pb.identity(i, gain)?;
            channel_map.insert(name.clone(), ChannelRef::RrlP { layer: 0, channel: ch });
        }
        let q_out = an.combos.len();
        let p_out = d0;
        rrls.push(RrlParams {
            nn_p: pb.build(),
            nn_q: qb.build(),
            nn_r: AffineMap::zeros(0 + 2 * d1, 0),
        });

        // Layer 1: state gates over [P_prev | maxQ_prev].
        let mut pb = LayerBuilder::new(p_out + q_out);
        for (si, st) in an.states.iter().enumerate() {
            let lits: Vec<(usize, bool)> = st
                .atoms
                .iter()
                .map(|a| match a {
                    AtomA::Nullary { name, neg } => (
                        preds0.iter().position(|p| p == name).expect("registered"),
                        *neg,
                    ),
                    AtomA::Quant { combo, neg } => (p_out + combo, *neg),
                })
                .collect();
            let ch = pb.gate(st.kind, &lits, gain)?;
            debug_assert_eq!(ch, si);
            channel_map.insert(
                st.formula.to_string(),
                ChannelRef::RrlP { layer: 1, channel: ch },
            );
        }
        rrls.push(RrlParams {
            nn_p: pb.build(),
            nn_q: AffineMap::zeros(q_out + 0 + 0 + p_out, 0),
            nn_r: AffineMap::zeros(0 + 2 * q_out, 0),
        });
    } else {
        // Purely nullary: state gates directly over the raw predicates.
        let mut pb = LayerBuilder::new(d0 + d1);
        for (si, st) in an.states.iter().enumerate() {
            let lits: Vec<(usize, bool)> = st
                .atoms
                .iter()
                .map(|a| match a {
                    AtomA::Nullary { name, neg } => (
                        preds0.iter().position(|p| p == name).expect("registered"),
                        *neg,
                    ),
                    AtomA::Quant { .. } => unreachable!("state_layer 0 has no quantifiers"),
                })
                .collect();
            let ch = pb.gate(st.kind, &lits, gain)?;
            debug_assert_eq!(ch, si);
            channel_map.insert(
                st.formula.to_string(),
                ChannelRef::RrlP { layer: 0, channel: ch },
            );
        }
        rrls.push(RrlParams {
            nn_p: pb.build(),
            nn_q: AffineMap::zeros(d1 + 0 + 0 + d0, 0),
            nn_r: AffineMap::zeros(0 + 2 * d1, 0),
        });
    }

    // Identity padding up to cfg.k_rrl layers.
    let n_states = an.states.len();
    while rrls.len() < cfg.k_rrl {
        let layer = rrls.len();
        let prev_q = rrls.last().unwrap().nn_q.out_dim();
        let mut pb = LayerBuilder::new(n_states + prev_q);
        for i in 0..n_states {
            pb.identity(i, gain)?;
        }
        let _ = layer;
        rrls.push(RrlParams {
            nn_p: pb.build(),
            nn_q: AffineMap::zeros(prev_q + 0 + 0 + n_states, 0),
            nn_r: AffineMap::zeros(0 + 2 * prev_q, 0),
        });
    }

    // ---- Temporal stack. Track each named channel's position in the
    // evolving [T, W] feature vector.
    let mut positions: BTreeMap<String, usize> = an
        .states
        .iter()
        .enumerate()
        .map(|(i, s)| (s.formula.to_string(), i))
        .collect();
    let mut width = n_states;
    let mut trls: Vec<TrlParams> = Vec::new();
    let state_key = |i: usize| an.states[i].formula.to_string();

    if cfg.l_trl > 0 {
        // First temporal layer: suffix-max driven F/G gates.
        let mut fb = LayerBuilder::new(width);
        for (ci, (key, state, is_always)) in an.first_gates.iter().enumerate() {
            let pos = positions[&state_key(*state)];
            let ch = if *is_always {
                // G s = NOT(suffix max of !s).
                fb.gate(GateKind::And, &[(pos, true)], gain)?
            } else {
                fb.identity(pos, gain)?
            };
            debug_assert_eq!(ch, ci);
            channel_map.insert(key.clone(), ChannelRef::TrlNew { layer: 0, channel: ch });
        }
        let out = an.first_gates.len();
        trls.push(TrlParams {
            nn: fb.build(),
            first_layer: true,
        });
        let mut new_positions: BTreeMap<String, usize> = positions
            .iter()
            .map(|(k, v)| (k.clone(), v + out))
            .collect();
        for (ci, (key, _, _)) in an.first_gates.iter().enumerate() {
            new_positions.insert(key.clone(), ci);
        }
        positions = new_positions;
        width += out;
    }

    // General layers, innermost first.
    struct GeneralGate {
        key: String,
        at_lits: Vec<(String, bool)>,
        interval_lits: Vec<(String, bool)>,
    }
    let mut gates: Vec<GeneralGate> = Vec::new();
    fn emit(node: &TempNode, gates: &mut Vec<GeneralGate>, states: &[StateA]) -> String {
        let skey = |i: usize| states[i].formula.to_string();
        match node {
            TempNode::State(i) => skey(*i),
            TempNode::Always { key, .. } | TempNode::EventuallyState { key, .. } => key.clone(),
            TempNode::Until { neg_lhs, rhs, key } => {
                let rhs_key = emit(rhs, gates, states);
                gates.push(GeneralGate {
                    key: key.clone(),
                    at_lits: vec![(rhs_key, false)],
                    interval_lits: vec![(skey(*neg_lhs), true)],
                });
                key.clone()
            }
            TempNode::Chain {
                with_interval,
                first,
                steps,
                key,
            } => {
                // Innermost XF first: channel for XF(s_k), then each
                // enclosing step; the outermost gate is the chain root.
                let mut prev_key: Option<String> = None;
                for (i, (s, sub)) in steps.iter().enumerate().rev() {
                    let is_root = i == 0;
                    let this_key = if is_root { key.clone() } else { sub.clone() };
                    let mut at = vec![(skey(*s), false)];
                    if let Some(p) = prev_key.take() {
                        at.push((p, false));
                    }
                    let interval = if is_root && *with_interval {
                        vec![(skey(first.expect("interval chain has first")), false)]
                    } else {
                        vec![]
                    };
                    gates.push(GeneralGate {
                        key: this_key.clone(),
                        at_lits: at,
                        interval_lits: interval,
                    });
                    prev_key = Some(this_key);
                }
                key.clone()
            }
        }
    }
    let root_key = emit(&root, &mut gates, &an.states);

    for g in &gates {
        let layer = trls.len();
        let mut lb = LayerBuilder::new(2 * width);
        let lits: Vec<(usize, bool)> = g
            .at_lits
            .iter()
            .map(|(k, neg)| (positions[k], *neg))
            .chain(
                g.interval_lits
                    .iter()
                    .map(|(k, neg)| (width + positions[k], *neg)),
            )
            .collect();
        let ch = lb.gate(GateKind::And, &lits, gain)?;
        channel_map.insert(g.key.clone(), ChannelRef::TrlNew { layer, channel: ch });
        trls.push(TrlParams {
            nn: lb.build(),
            first_layer: false,
        });
        let mut new_positions: BTreeMap<String, usize> = positions
            .iter()
            .map(|(k, v)| (k.clone(), v + 1))
            .collect();
        new_positions.insert(g.key.clone(), 0);
        positions = new_positions;
        width += 1;
    }

    // Zero-width padding for unused temporal layers.
    while trls.len() < cfg.l_trl {
        trls.push(TrlParams {
            nn: AffineMap::zeros(2 * width, 0),
            first_layer: false,
        });
    }

    // ---- Head: logit 1 = gain * (root - 0.5), logit 0 its negation.
    let root_position = positions[&root_key];
    let mut head_w = Tensor::zeros(vec![width, 2]);
    head_w.data_mut()[root_position * 2] = -gain;
    head_w.data_mut()[root_position * 2 + 1] = gain;
    let head_b = Tensor::new(vec![2], vec![0.5 * gain, -0.5 * gain]).expect("shape");

    let max_rrl = rrls
        .iter()
        .map(|r| r.nn_p.out_dim().max(r.nn_q.out_dim()))
        .max()
        .unwrap_or(1);
    let max_trl = trls.iter().map(|t| t.nn.out_dim()).max().unwrap_or(0);
    let params = ModelParams {
        config: ModelConfig {
            k_rrl: rrls.len(),
            l_trl: trls.len(),
            rrl_dim: max_rrl.max(1),
            trl_dim: max_trl.max(1),
            classes: 2,
            properties: vec![],
            thresholds_per_property: 1,
        },
        extractor: Extractor::Predicates {
            nullary: preds0,
            unary: preds1,
            binary: vec![],
            thresholds: None,
        },
        rrls,
        trls,
        head: AffineMap {
            weight: head_w,
            bias: head_b,
        },
        activation: match mode {
            CompileMode::Hard => Activation::Step,
            CompileMode::Soft { .. } => Activation::Sigmoid,
        },
    };
    params.validate()?;
    Ok(CompiledNet {
        params,
        channel_map,
        mode,
        formula: f.to_string(),
        root_position,
    })
}

// ---------------------------------------------------------------------------
// Verification against the oracle

#[derive(Debug, Clone, Serialize)]
pub struct VerifyReport {
    pub formula: String,
    pub mode: CompileMode,
    pub traces: usize,
    pub mismatches: usize,
    pub max_dev: f64,
    /// Index (into the enumeration order) of the first mismatching trace.
    pub witness: Option<usize>,
}

fn formula_signature(f: &Formula) -> Signature {
    fn walk(f: &Formula, sig: &mut BTreeMap<String, usize>) {
        match f {
            Formula::Pred { name, args } => {
                sig.insert(name.clone(), args.len());
            }
            Formula::Not(a)
            | Formula::Always(a)
            | Formula::Eventually(a)
            | Formula::Next(a)
            | Formula::NextEventually(a)
            | Formula::Exists(_, a)
            | Formula::Forall(_, a) => walk(a, sig),
            Formula::And(a, b) | Formula::Or(a, b) => {
                walk(a, sig);
                walk(b, sig);
            }
            Formula::Until { lhs, rhs, .. } => {
                walk(lhs, sig);
                walk(rhs, sig);
            }
        }
    }
    let mut sig = BTreeMap::new();
    walk(f, &mut sig);
    sig.into_iter().collect()
}

/// Root activation of the compiled net on one trace, recovered from the
/// positive logit.
pub fn root_activation(net: &CompiledNet, trace: &GroundTrace) -> Result<f64> {
    let mut tape = Tape::new();
    let fwd = net
        .params
        .forward(&mut tape, &ModelInput::Trace(trace, 0))?;
    let logit1 = tape.value(fwd.logits).data()[1];
    Ok(logit1 / net.mode.gain() + 0.5)
}

pub fn verify(
    net: &CompiledNet,
    f: &Formula,
    t_len: usize,
    n_entities: usize,
    limit: usize,
    seed: u64,
) -> Result<VerifyReport> {
    let sig = formula_signature(f);
    let traces = logic::enumerate_traces(t_len, n_entities, &sig, limit, seed);
    let results: Vec<(f64, bool)> = traces
        .par_iter()
        .map(|tr| {
            let truth = logic::eval(f, tr, 0, &BTreeMap::new()).expect("closed formula");
            let act = root_activation(net, tr).expect("forward succeeds");
            (act, truth)
        })
        .collect();
    let mut report = VerifyReport {
        formula: f.to_string(),
        mode: net.mode,
        traces: traces.len(),
        mismatches: 0,
        max_dev: 0.0,
        witness: None,
    };
    for (i, (act, truth)) in results.iter().enumerate() {
        let dev = (act - (*truth as u8 as f64)).abs();
        if dev > report.max_dev {
            report.max_dev = dev;
        }
        if (*act > 0.5) != *truth {
            report.mismatches += 1;
            report.witness.get_or_insert(i);
        }
    }
    Ok(report)
}
