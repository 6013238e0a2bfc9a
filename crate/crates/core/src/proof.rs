//! Sequents, rule instances, and regular ill-founded derivations presented as
//! finite graphs with back-edges: local validation, bounded unfolding,
//! identity derivations, cut composition, JSON and DOT input/output.
//!
//! Rule layouts are canonical: premise sequents are computed from the
//! conclusion and the rule payload, with minor formulas taking the principal
//! formula's place, the tensor context split as a prefix/suffix, and the cut
//! formula rightmost in the left premise / leftmost negated in the right one.
//! Any other arrangement needs explicit `exch` nodes.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::formula::{negate, parse_formula, render_formula, unfold, FixKind, Formula};

pub type NodeId = String;

/// A one-sided sequent: an ordered list of closed formulas.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Sequent(pub Vec<Formula>);

impl Sequent {
    pub fn len(&self) -> usize {
        self.0.len()
    }
    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
    pub fn iter(&self) -> std::slice::Iter<'_, Formula> {
        self.0.iter()
    }
}

impl fmt::Display for Sequent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.0.iter().map(render_formula).collect();
        f.write_str(&parts.join(", "))
    }
}

/// An inference rule instance. Payloads locate the principal formula in the
/// conclusion; `Open` marks a truncation leaf (not a logical rule).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "lowercase")]
pub enum RuleInstance {
    One,
    Bot {
        principal: usize,
    },
    Top {
        principal: usize,
    },
    Tensor {
        principal: usize,
        #[serde(rename = "leftLen")]
        left_len: usize,
    },
    Par {
        principal: usize,
    },
    Plus0 {
        principal: usize,
    },
    Plus1 {
        principal: usize,
    },
    With {
        principal: usize,
    },
    Mu {
        principal: usize,
    },
    Nu {
        principal: usize,
    },
    Cut {
        #[serde(rename = "cutFormula")]
        formula: Formula,
        #[serde(rename = "leftLen")]
        left_len: usize,
    },
    Exch {
        index: usize,
    },
    Open,
}

impl RuleInstance {
    pub fn name(&self) -> &'static str {
        match self {
            RuleInstance::One => "one",
            RuleInstance::Bot { .. } => "bot",
            RuleInstance::Top { .. } => "top",
            RuleInstance::Tensor { .. } => "tensor",
            RuleInstance::Par { .. } => "par",
            RuleInstance::Plus0 { .. } => "plus0",
            RuleInstance::Plus1 { .. } => "plus1",
            RuleInstance::With { .. } => "with",
            RuleInstance::Mu { .. } => "mu",
            RuleInstance::Nu { .. } => "nu",
            RuleInstance::Cut { .. } => "cut",
            RuleInstance::Exch { .. } => "exch",
            RuleInstance::Open => "open",
        }
    }

    /// Index of the principal formula, when the rule has one.
    pub fn principal(&self) -> Option<usize> {
        match self {
            RuleInstance::Bot { principal }
            | RuleInstance::Top { principal }
            | RuleInstance::Tensor { principal, .. }
            | RuleInstance::Par { principal }
            | RuleInstance::Plus0 { principal }
            | RuleInstance::Plus1 { principal }
            | RuleInstance::With { principal }
            | RuleInstance::Mu { principal }
            | RuleInstance::Nu { principal } => Some(*principal),
            RuleInstance::One => Some(0),
            RuleInstance::Cut { .. } | RuleInstance::Exch { .. } | RuleInstance::Open => None,
        }
    }

    pub fn is_cut(&self) -> bool {
        matches!(self, RuleInstance::Cut { .. })
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum RuleError {
    #[error("principal index {index} out of range for sequent of length {len}")]
    PrincipalOutOfRange { index: usize, len: usize },
    #[error("principal formula {found} does not match rule {rule}")]
    PrincipalMismatch { rule: &'static str, found: String },
    #[error("rule one requires the sequent to be exactly `1`")]
    OneShape,
    #[error("leftLen {left_len} out of range ({max} available)")]
    LeftLenOutOfRange { left_len: usize, max: usize },
    #[error("exch index {index} out of range for sequent of length {len}")]
    ExchOutOfRange { index: usize, len: usize },
}

/// Premise sequents determined by a conclusion and a rule instance. This is
/// the single source of truth for rule shapes.
pub fn rule_premises(seq: &Sequent, rule: &RuleInstance) -> Result<Vec<Sequent>, RuleError> {
    let check_principal = |idx: usize| -> Result<&Formula, RuleError> {
        seq.0.get(idx).ok_or(RuleError::PrincipalOutOfRange {
            index: idx,
            len: seq.len(),
        })
    };
    let replace = |idx: usize, with: Vec<Formula>| -> Sequent {
        let mut v = seq.0.clone();
        v.splice(idx..=idx, with);
        Sequent(v)
    };
    let mismatch = |rule: &'static str, f: &Formula| RuleError::PrincipalMismatch {
        rule,
        found: render_formula(f),
    };
    match rule {
        RuleInstance::One => {
            if seq.0 == vec![Formula::One] {
                Ok(vec![])
            } else {
                Err(RuleError::OneShape)
            }
        }
        RuleInstance::Bot { principal } => {
            let f = check_principal(*principal)?;
            if !matches!(f, Formula::Bot) {
                return Err(mismatch("bot", f));
            }
            Ok(vec![replace(*principal, vec![])])
        }
        RuleInstance::Top { principal } => {
            let f = check_principal(*principal)?;
            if !matches!(f, Formula::Top) {
                return Err(mismatch("top", f));
            }
            Ok(vec![])
        }
        RuleInstance::Par { principal } => {
            let f = check_principal(*principal)?;
            if let Formula::Par(a, b) = f {
                let (a, b) = ((**a).clone(), (**b).clone());
                Ok(vec![replace(*principal, vec![a, b])])
            } else {
                Err(mismatch("par", f))
            }
        }
        RuleInstance::Tensor {
            principal,
            left_len,
        } => {
            let f = check_principal(*principal)?;
            if let Formula::Tensor(a, b) = f {
                let (a, b) = ((**a).clone(), (**b).clone());
                let mut ctx = seq.0.clone();
                ctx.remove(*principal);
                if *left_len > ctx.len() {
                    return Err(RuleError::LeftLenOutOfRange {
                        left_len: *left_len,
                        max: ctx.len(),
                    });
                }
                let mut left: Vec<Formula> = ctx[..*left_len].to_vec();
                left.push(a);
                let mut right: Vec<Formula> = ctx[*left_len..].to_vec();
                right.push(b);
                Ok(vec![Sequent(left), Sequent(right)])
            } else {
                Err(mismatch("tensor", f))
            }
        }
        RuleInstance::Plus0 { principal } => {
            let f = check_principal(*principal)?;
            if let Formula::Plus(a, _) = f {
                let a = (**a).clone();
                Ok(vec![replace(*principal, vec![a])])
            } else {
                Err(mismatch("plus0", f))
            }
        }
        RuleInstance::Plus1 { principal } => {
            let f = check_principal(*principal)?;
            if let Formula::Plus(_, b) = f {
                let b = (**b).clone();
                Ok(vec![replace(*principal, vec![b])])
            } else {
                Err(mismatch("plus1", f))
            }
        }
        RuleInstance::With { principal } => {
            let f = check_principal(*principal)?;
            if let Formula::With(a, b) = f {
                let (a, b) = ((**a).clone(), (**b).clone());
                Ok(vec![replace(*principal, vec![a]), replace(*principal, vec![b])])
            } else {
                Err(mismatch("with", f))
            }
        }
        RuleInstance::Mu { principal } => {
            let f = check_principal(*principal)?;
            match unfold(FixKind::Mu, f) {
                Ok(u) => Ok(vec![replace(*principal, vec![u])]),
                Err(_) => Err(mismatch("mu", f)),
            }
        }
        RuleInstance::Nu { principal } => {
            let f = check_principal(*principal)?;
            match unfold(FixKind::Nu, f) {
                Ok(u) => Ok(vec![replace(*principal, vec![u])]),
                Err(_) => Err(mismatch("nu", f)),
            }
        }
        RuleInstance::Cut { formula, left_len } => {
            if *left_len > seq.len() {
                return Err(RuleError::LeftLenOutOfRange {
                    left_len: *left_len,
                    max: seq.len(),
                });
            }
            let mut left: Vec<Formula> = seq.0[..*left_len].to_vec();
            left.push(formula.clone());
            let mut right: Vec<Formula> = vec![negate(formula)];
            right.extend_from_slice(&seq.0[*left_len..]);
            Ok(vec![Sequent(left), Sequent(right)])
        }
        RuleInstance::Exch { index } => {
            if index + 1 >= seq.len() {
                return Err(RuleError::ExchOutOfRange {
                    index: *index,
                    len: seq.len(),
                });
            }
            let mut v = seq.0.clone();
            v.swap(*index, *index + 1);
            Ok(vec![Sequent(v)])
        }
        RuleInstance::Open => Ok(vec![]),
    }
}

/// How an occurrence relates to its ancestor across one rule application.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum AncestryEvent {
    /// Context copy.
    Context,
    /// Minor formula of a principal logical decomposition (non fixed point).
    Principal,
    /// Minor formula of a mu/nu unfolding.
    PrincipalFix,
}

/// Ancestor pairs `(conclusion index, premise index, event)` per premise
/// slot. Cut formula occurrences in cut premises have no conclusion source;
/// they begin internal traces.
pub fn rule_ancestry(
    seq: &Sequent,
    rule: &RuleInstance,
) -> Result<Vec<Vec<(usize, usize, AncestryEvent)>>, RuleError> {
    // validate the shape first
    let premises = rule_premises(seq, rule)?;
    let len = seq.len();
    use AncestryEvent::*;
    let out = match rule {
        RuleInstance::One | RuleInstance::Top { .. } | RuleInstance::Open => vec![],
        RuleInstance::Bot { principal } => {
            let mut pairs = Vec::new();
            for c in 0..len {
                if c < *principal {
                    pairs.push((c, c, Context));
                } else if c > *principal {
                    pairs.push((c, c - 1, Context));
                }
            }
            vec![pairs]
        }
        RuleInstance::Par { principal } => {
            let mut pairs = Vec::new();
            for c in 0..len {
                if c == *principal {
                    pairs.push((c, c, Principal));
                    pairs.push((c, c + 1, Principal));
                } else if c < *principal {
                    pairs.push((c, c, Context));
                } else {
                    pairs.push((c, c + 1, Context));
                }
            }
            vec![pairs]
        }
        RuleInstance::Plus0 { principal } | RuleInstance::Plus1 { principal } => {
            let pairs = (0..len)
                .map(|c| (c, c, if c == *principal { Principal } else { Context }))
                .collect();
            vec![pairs]
        }
        RuleInstance::With { principal } => {
            let pairs: Vec<(usize, usize, AncestryEvent)> = (0..len)
                .map(|c| (c, c, if c == *principal { Principal } else { Context }))
                .collect();
            vec![pairs.clone(), pairs]
        }
        RuleInstance::Mu { principal } | RuleInstance::Nu { principal } => {
            let pairs = (0..len)
                .map(|c| {
                    (
                        c,
                        c,
                        if c == *principal { PrincipalFix } else { Context },
                    )
                })
                .collect();
            vec![pairs]
        }
        RuleInstance::Tensor {
            principal,
            left_len,
        } => {
            let right_ctx = len - 1 - left_len;
            let mut left = Vec::new();
            let mut right = Vec::new();
            for c in 0..len {
                if c == *principal {
                    left.push((c, *left_len, Principal));
                    right.push((c, right_ctx, Principal));
                } else {
                    let k = if c < *principal { c } else { c - 1 };
                    if k < *left_len {
                        left.push((c, k, Context));
                    } else {
                        right.push((c, k - left_len, Context));
                    }
                }
            }
            vec![left, right]
        }
        RuleInstance::Cut { left_len, .. } => {
            let mut left = Vec::new();
            let mut right = Vec::new();
            for c in 0..len {
                if c < *left_len {
                    left.push((c, c, Context));
                } else {
                    right.push((c, c - left_len + 1, Context));
                }
            }
            vec![left, right]
        }
        RuleInstance::Exch { index } => {
            let pairs = (0..len)
                .map(|c| {
                    let t = if c == *index {
                        c + 1
                    } else if c == index + 1 {
                        c - 1
                    } else {
                        c
                    };
                    (c, t, Context)
                })
                .collect();
            vec![pairs]
        }
    };
    debug_assert_eq!(out.len(), premises.len());
    Ok(out)
}

// ---------------------------------------------------------------------------
// Proof graphs
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProofNode {
    pub sequent: Sequent,
    pub rule: RuleInstance,
    pub premises: Vec<NodeId>,
}

/// A regular ill-founded derivation: a finite rooted graph whose premise
/// references may point anywhere (back-edges denote infinite unfolding).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProofGraph {
    pub root: NodeId,
    pub nodes: BTreeMap<NodeId, ProofNode>,
}

impl ProofGraph {
    pub fn node(&self, id: &str) -> Option<&ProofNode> {
        self.nodes.get(id)
    }

    pub fn root_sequent(&self) -> Option<&Sequent> {
        self.nodes.get(&self.root).map(|n| &n.sequent)
    }

    /// Follow premise slots from the root through back-edges.
    pub fn resolve(&self, pos: &[u8]) -> Option<&NodeId> {
        let mut cur = &self.root;
        self.nodes.get(cur)?;
        for &slot in pos {
            let node = self.nodes.get(cur)?;
            cur = node.premises.get(slot as usize)?;
            self.nodes.get(cur)?;
        }
        Some(cur)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Defect {
    pub node: NodeId,
    pub message: String,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub defects: Vec<Defect>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.defects.is_empty()
    }
}

/// Check every node against the rules, including back-edge sequent equality.
pub fn validate_local(g: &ProofGraph) -> ValidationReport {
    let mut defects = Vec::new();
    if !g.nodes.contains_key(&g.root) {
        defects.push(Defect {
            node: g.root.clone(),
            message: "root id does not resolve".into(),
        });
    }
    for (id, node) in &g.nodes {
        for f in node.sequent.iter() {
            if !f.is_closed() {
                defects.push(Defect {
                    node: id.clone(),
                    message: format!("open formula `{f}` in sequent"),
                });
            }
        }
        let expected = match rule_premises(&node.sequent, &node.rule) {
            Ok(e) => e,
            Err(e) => {
                defects.push(Defect {
                    node: id.clone(),
                    message: e.to_string(),
                });
                continue;
            }
        };
        if expected.len() != node.premises.len() {
            defects.push(Defect {
                node: id.clone(),
                message: format!(
                    "rule {} expects {} premises, found {}",
                    node.rule.name(),
                    expected.len(),
                    node.premises.len()
                ),
            });
            continue;
        }
        for (slot, (want, premise_id)) in expected.iter().zip(&node.premises).enumerate() {
            match g.nodes.get(premise_id) {
                None => defects.push(Defect {
                    node: id.clone(),
                    message: format!("premise {slot} references missing node `{premise_id}`"),
                }),
                Some(p) => {
                    if p.sequent != *want {
                        defects.push(Defect {
                            node: id.clone(),
                            message: format!(
                                "premise {slot} sequent mismatch: expected `{want}`, node `{premise_id}` has `{}`",
                                p.sequent
                            ),
                        });
                    }
                }
            }
        }
    }
    defects.sort();
    ValidationReport { defects }
}

// ---------------------------------------------------------------------------
// Finite trees (bounded unfoldings, emitted prefixes)
// ---------------------------------------------------------------------------

/// A position in a tree: the sequence of premise slots from the root.
pub type Pos = Vec<u8>;

pub fn pos_id(pos: &[u8]) -> String {
    if pos.is_empty() {
        "r".to_string()
    } else {
        let parts: Vec<String> = pos.iter().map(|p| p.to_string()).collect();
        format!("r.{}", parts.join("."))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TreeNode {
    pub sequent: Sequent,
    pub rule: RuleInstance,
}

/// A finite, prefix-closed labelled tree. `RuleInstance::Open` marks
/// truncation leaves, distinct from the zero-premise rules.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct FiniteTree {
    pub nodes: BTreeMap<Pos, TreeNode>,
}

impl FiniteTree {
    pub fn root(&self) -> Option<&TreeNode> {
        self.nodes.get(&Vec::new())
    }

    pub fn depth(&self) -> usize {
        self.nodes.keys().map(|p| p.len()).max().unwrap_or(0)
    }

    pub fn contains_cut(&self) -> bool {
        self.nodes.values().any(|n| n.rule.is_cut())
    }

    /// Restrict to positions of length <= depth, re-marking truncated nodes.
    pub fn truncate(&self, depth: usize) -> FiniteTree {
        let mut nodes = BTreeMap::new();
        for (pos, node) in &self.nodes {
            if pos.len() < depth {
                nodes.insert(pos.clone(), node.clone());
            } else if pos.len() == depth {
                let rule = match rule_premises(&node.sequent, &node.rule) {
                    Ok(p) if p.is_empty() => node.rule.clone(),
                    _ => RuleInstance::Open,
                };
                nodes.insert(
                    pos.clone(),
                    TreeNode {
                        sequent: node.sequent.clone(),
                        rule,
                    },
                );
            }
        }
        FiniteTree { nodes }
    }

    /// `self` agrees with `other` on every position of `self` (openLeaf of
    /// `self` may be anything in `other`).
    pub fn is_prefix_of(&self, other: &FiniteTree) -> bool {
        self.nodes.iter().all(|(pos, node)| {
            match other.nodes.get(pos) {
                None => false,
                Some(o) => {
                    node.sequent == o.sequent
                        && (node.rule == RuleInstance::Open || node.rule == o.rule)
                }
            }
        })
    }

    /// View as a proof graph (positions become node ids).
    pub fn to_graph(&self) -> ProofGraph {
        let mut nodes = BTreeMap::new();
        for (pos, node) in &self.nodes {
            let premises = match rule_premises(&node.sequent, &node.rule) {
                Ok(p) => (0..p.len())
                    .map(|i| {
                        let mut child = pos.clone();
                        child.push(i as u8);
                        pos_id(&child)
                    })
                    .collect(),
                Err(_) => vec![],
            };
            nodes.insert(
                pos_id(pos),
                ProofNode {
                    sequent: node.sequent.clone(),
                    rule: node.rule.clone(),
                    premises,
                },
            );
        }
        ProofGraph {
            root: pos_id(&[]),
            nodes,
        }
    }
}

/// Local validity for finite trees, with openLeaf allowances.
pub fn validate_tree(t: &FiniteTree) -> ValidationReport {
    validate_local(&t.to_graph())
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum UnfoldError {
    #[error("graph fails local validation: {0:?}")]
    Invalid(ValidationReport),
}

/// The depth-bounded unfolding of a regular proof graph. Positions at the
/// depth bound whose node still has premises become openLeaf.
pub fn unfold_to_depth(g: &ProofGraph, depth: usize) -> Result<FiniteTree, UnfoldError> {
    let report = validate_local(g);
    if !report.is_valid() {
        return Err(UnfoldError::Invalid(report));
    }
    let mut nodes = BTreeMap::new();
    let mut stack: Vec<(Pos, NodeId)> = vec![(Vec::new(), g.root.clone())];
    while let Some((pos, id)) = stack.pop() {
        let node = &g.nodes[&id];
        if pos.len() == depth {
            let rule = if node.premises.is_empty() {
                node.rule.clone()
            } else {
                RuleInstance::Open
            };
            nodes.insert(
                pos,
                TreeNode {
                    sequent: node.sequent.clone(),
                    rule,
                },
            );
            continue;
        }
        for (slot, premise) in node.premises.iter().enumerate() {
            let mut child = pos.clone();
            child.push(slot as u8);
            stack.push((child, premise.clone()));
        }
        nodes.insert(
            pos,
            TreeNode {
                sequent: node.sequent.clone(),
                rule: node.rule.clone(),
            },
        );
    }
    Ok(FiniteTree { nodes })
}

// ---------------------------------------------------------------------------
// Identity derivations
// ---------------------------------------------------------------------------

struct IdBuilder {
    nodes: BTreeMap<NodeId, ProofNode>,
    memo: BTreeMap<String, NodeId>,
    next: usize,
}

impl IdBuilder {
    fn fresh(&mut self) -> NodeId {
        let id = format!("i{}", self.next);
        self.next += 1;
        id
    }

    fn put(&mut self, id: &NodeId, sequent: Sequent, rule: RuleInstance, premises: Vec<NodeId>) {
        self.nodes.insert(
            id.clone(),
            ProofNode {
                sequent,
                rule,
                premises,
            },
        );
    }

    /// Root node proving `negate(phi), phi`.
    fn build(&mut self, phi: &Formula) -> NodeId {
        let key = phi.canonical_key();
        if let Some(id) = self.memo.get(&key) {
            return id.clone();
        }
        let root = self.fresh();
        self.memo.insert(key, root.clone());
        let np = negate(phi);
        let conclusion = Sequent(vec![np.clone(), phi.clone()]);
        match phi {
            Formula::One => {
                let leaf = self.fresh();
                self.put(&root, conclusion, RuleInstance::Bot { principal: 0 }, vec![leaf.clone()]);
                self.put(&leaf, Sequent(vec![Formula::One]), RuleInstance::One, vec![]);
            }
            Formula::Bot => {
                let leaf = self.fresh();
                self.put(&root, conclusion, RuleInstance::Bot { principal: 1 }, vec![leaf.clone()]);
                self.put(&leaf, Sequent(vec![Formula::One]), RuleInstance::One, vec![]);
            }
            Formula::Top => {
                self.put(&root, conclusion, RuleInstance::Top { principal: 1 }, vec![]);
            }
            Formula::Zero => {
                self.put(&root, conclusion, RuleInstance::Top { principal: 0 }, vec![]);
            }
            Formula::Tensor(a, b) => {
                let mid = self.fresh();
                let mid_seq = Sequent(vec![negate(a), negate(b), phi.clone()]);
                self.put(&root, conclusion, RuleInstance::Par { principal: 0 }, vec![mid.clone()]);
                let left = self.build(a);
                let right = self.build(b);
                self.put(
                    &mid,
                    mid_seq,
                    RuleInstance::Tensor {
                        principal: 2,
                        left_len: 1,
                    },
                    vec![left, right],
                );
            }
            Formula::Par(a, b) => {
                let mid = self.fresh();
                let mid_seq = Sequent(vec![np.clone(), (**a).clone(), (**b).clone()]);
                self.put(&root, conclusion, RuleInstance::Par { principal: 1 }, vec![mid.clone()]);
                let left = self.build(&negate(a));
                let right = self.build(&negate(b));
                self.put(
                    &mid,
                    mid_seq,
                    RuleInstance::Tensor {
                        principal: 0,
                        left_len: 1,
                    },
                    vec![left, right],
                );
            }
            Formula::Plus(a, b) => {
                let l = self.fresh();
                let r = self.fresh();
                self.put(
                    &root,
                    conclusion,
                    RuleInstance::With { principal: 0 },
                    vec![l.clone(), r.clone()],
                );
                let ida = self.build(a);
                self.put(
                    &l,
                    Sequent(vec![negate(a), phi.clone()]),
                    RuleInstance::Plus0 { principal: 1 },
                    vec![ida],
                );
                let idb = self.build(b);
                self.put(
                    &r,
                    Sequent(vec![negate(b), phi.clone()]),
                    RuleInstance::Plus1 { principal: 1 },
                    vec![idb],
                );
            }
            Formula::With(a, b) => {
                let l = self.fresh();
                let r = self.fresh();
                self.put(
                    &root,
                    conclusion,
                    RuleInstance::With { principal: 1 },
                    vec![l.clone(), r.clone()],
                );
                let ida = self.build(a);
                self.put(
                    &l,
                    Sequent(vec![np.clone(), (**a).clone()]),
                    RuleInstance::Plus0 { principal: 0 },
                    vec![ida],
                );
                let idb = self.build(b);
                self.put(
                    &r,
                    Sequent(vec![np.clone(), (**b).clone()]),
                    RuleInstance::Plus1 { principal: 0 },
                    vec![idb],
                );
            }
            Formula::Mu(_, _) => {
                let mid = self.fresh();
                let unf = crate::formula::unfold_any(phi).expect("mu unfolds");
                let nunf = negate(&unf);
                self.put(&root, conclusion, RuleInstance::Nu { principal: 0 }, vec![mid.clone()]);
                let rec = self.build(&unf);
                self.put(
                    &mid,
                    Sequent(vec![nunf, phi.clone()]),
                    RuleInstance::Mu { principal: 1 },
                    vec![rec],
                );
            }
            Formula::Nu(_, _) => {
                let mid = self.fresh();
                let unf = crate::formula::unfold_any(phi).expect("nu unfolds");
                self.put(&root, conclusion, RuleInstance::Nu { principal: 1 }, vec![mid.clone()]);
                let rec = self.build(&unf);
                self.put(
                    &mid,
                    Sequent(vec![np.clone(), unf.clone()]),
                    RuleInstance::Mu { principal: 0 },
                    vec![rec],
                );
            }
            Formula::Var(_) => unreachable!("identity of an open formula"),
        }
        root
    }
}

/// The coinductive identity derivation for `phi`: a regular proof of
/// `negate(phi), phi`, cut-free and progressing.
pub fn identity_proof(phi: &Formula) -> ProofGraph {
    assert!(phi.is_closed(), "identity_proof needs a closed formula");
    let mut b = IdBuilder {
        nodes: BTreeMap::new(),
        memo: BTreeMap::new(),
        next: 0,
    };
    let root = b.build(phi);
    ProofGraph {
        root,
        nodes: b.nodes,
    }
}

// ---------------------------------------------------------------------------
// Cut composition
// ---------------------------------------------------------------------------

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ComposeError {
    #[error("cut formula `{0}` does not occur (uncut) in the conclusion")]
    MissingCutFormula(String),
    #[error("premise derivation concludes `{found}`, expected `{expected}` first")]
    PremiseMismatch { expected: String, found: String },
    #[error("derivation has no root sequent")]
    NoRoot,
}

/// Compose `d` with auxiliary derivations by a chain of consecutive cuts,
/// one per `(e, phi)` pair: `e` must conclude `negate(phi), Delta`. Explicit
/// exch rotations keep each cut formula rightmost in its left premise, and
/// the final conclusion preserves the original formula order when every
/// `Delta` is the singleton `phi` (the identity case).
pub fn compose_cut(d: &ProofGraph, cuts: &[(ProofGraph, Formula)]) -> Result<ProofGraph, ComposeError> {
    if cuts.is_empty() {
        return Ok(d.clone());
    }
    let mut nodes = d.nodes.clone();
    let mut used: BTreeSet<NodeId> = nodes.keys().cloned().collect();
    let mut next_aux = 0usize;
    let mut fresh = move |used: &mut BTreeSet<NodeId>| -> NodeId {
        loop {
            let id = format!("x{next_aux}");
            next_aux += 1;
            if used.insert(id.clone()) {
                return id;
            }
        }
    };

    let mut cur_root = d.root.clone();
    let mut conclusion: Vec<Formula> = d
        .root_sequent()
        .ok_or(ComposeError::NoRoot)?
        .0
        .clone();
    // Which current positions still hold an uncut original conclusion formula.
    let mut cuttable: Vec<bool> = vec![true; conclusion.len()];

    for (i, (e, phi)) in cuts.iter().enumerate() {
        let mut p = conclusion
            .iter()
            .zip(&cuttable)
            .position(|(f, avail)| *avail && f == phi)
            .ok_or_else(|| ComposeError::MissingCutFormula(render_formula(phi)))?;
        let e_conc = e.root_sequent().ok_or(ComposeError::NoRoot)?;
        let want = negate(phi);
        match e_conc.0.first() {
            Some(f) if *f == want => {}
            _ => {
                return Err(ComposeError::PremiseMismatch {
                    expected: render_formula(&want),
                    found: e_conc.to_string(),
                });
            }
        }
        // Merge e's nodes under a unique prefix.
        let prefix = format!("c{i}:");
        for (id, node) in &e.nodes {
            let mut node = node.clone();
            for premise in &mut node.premises {
                *premise = format!("{prefix}{premise}");
            }
            let new_id = format!("{prefix}{id}");
            used.insert(new_id.clone());
            nodes.insert(new_id, node);
        }
        let e_root = format!("{prefix}{}", e.root);

        // Rotate the cut formula to the rightmost position with exch nodes.
        while p + 1 < conclusion.len() {
            conclusion.swap(p, p + 1);
            cuttable.swap(p, p + 1);
            let id = fresh(&mut used);
            nodes.insert(
                id.clone(),
                ProofNode {
                    sequent: Sequent(conclusion.clone()),
                    rule: RuleInstance::Exch { index: p },
                    premises: vec![cur_root.clone()],
                },
            );
            cur_root = id;
            p += 1;
        }

        // The cut node: left premise is the current derivation, right is e.
        let left_len = conclusion.len() - 1;
        let delta = &e_conc.0[1..];
        conclusion.pop();
        cuttable.pop();
        conclusion.extend_from_slice(delta);
        cuttable.extend(std::iter::repeat(false).take(delta.len()));
        let id = fresh(&mut used);
        nodes.insert(
            id.clone(),
            ProofNode {
                sequent: Sequent(conclusion.clone()),
                rule: RuleInstance::Cut {
                    formula: phi.clone(),
                    left_len,
                },
                premises: vec![cur_root.clone(), e_root],
            },
        );
        cur_root = id;
    }

    Ok(ProofGraph {
        root: cur_root,
        nodes,
    })
}

// ---------------------------------------------------------------------------
// JSON and DOT
// ---------------------------------------------------------------------------

#[derive(Debug, Error, PartialEq, Eq)]
#[error("schema error at `{pointer}`: {message}")]
pub struct SchemaError {
    pub pointer: String,
    pub message: String,
}

fn schema_err(pointer: impl Into<String>, message: impl Into<String>) -> SchemaError {
    SchemaError {
        pointer: pointer.into(),
        message: message.into(),
    }
}

/// Load a proof graph from its JSON document form.
pub fn load_proof(doc: &serde_json::Value) -> Result<ProofGraph, SchemaError> {
    let obj = doc
        .as_object()
        .ok_or_else(|| schema_err("", "expected an object"))?;
    let root = obj
        .get("root")
        .ok_or_else(|| schema_err("/root", "missing key"))?
        .as_str()
        .ok_or_else(|| schema_err("/root", "expected a string"))?
        .to_string();
    let nodes_val = obj
        .get("nodes")
        .ok_or_else(|| schema_err("/nodes", "missing key"))?
        .as_object()
        .ok_or_else(|| schema_err("/nodes", "expected an object"))?;
    let mut nodes = BTreeMap::new();
    for (id, nv) in nodes_val {
        let base = format!("/nodes/{id}");
        let node = nv
            .as_object()
            .ok_or_else(|| schema_err(&base, "expected an object"))?;
        let seq_val = node
            .get("sequent")
            .ok_or_else(|| schema_err(format!("{base}/sequent"), "missing key"))?
            .as_array()
            .ok_or_else(|| schema_err(format!("{base}/sequent"), "expected an array"))?;
        let mut sequent = Vec::new();
        for (k, fv) in seq_val.iter().enumerate() {
            let ptr = format!("{base}/sequent/{k}");
            let s = fv
                .as_str()
                .ok_or_else(|| schema_err(&ptr, "expected a formula string"))?;
            let f = parse_formula(s).map_err(|e| schema_err(&ptr, e.to_string()))?;
            sequent.push(f);
        }
        let rule_val = node
            .get("rule")
            .ok_or_else(|| schema_err(format!("{base}/rule"), "missing key"))?
            .as_object()
            .ok_or_else(|| schema_err(format!("{base}/rule"), "expected an object"))?;
        let rule = parse_rule(rule_val, &format!("{base}/rule"))?;
        let prem_val = node
            .get("premises")
            .ok_or_else(|| schema_err(format!("{base}/premises"), "missing key"))?
            .as_array()
            .ok_or_else(|| schema_err(format!("{base}/premises"), "expected an array"))?;
        let mut premises = Vec::new();
        for (k, pv) in prem_val.iter().enumerate() {
            let s = pv.as_str().ok_or_else(|| {
                schema_err(format!("{base}/premises/{k}"), "expected a node id string")
            })?;
            premises.push(s.to_string());
        }
        nodes.insert(
            id.clone(),
            ProofNode {
                sequent: Sequent(sequent),
                rule,
                premises,
            },
        );
    }
    if !nodes.contains_key(&root) {
        return Err(schema_err("/root", format!("root `{root}` not in nodes")));
    }
    Ok(ProofGraph { root, nodes })
}

fn parse_rule(
    rule: &serde_json::Map<String, serde_json::Value>,
    base: &str,
) -> Result<RuleInstance, SchemaError> {
    let name = rule
        .get("name")
        .ok_or_else(|| schema_err(format!("{base}/name"), "missing key"))?
        .as_str()
        .ok_or_else(|| schema_err(format!("{base}/name"), "expected a string"))?;
    let get_usize = |key: &str| -> Result<usize, SchemaError> {
        rule.get(key)
            .ok_or_else(|| schema_err(format!("{base}/{key}"), "missing key"))?
            .as_u64()
            .map(|v| v as usize)
            .ok_or_else(|| schema_err(format!("{base}/{key}"), "expected a non-negative integer"))
    };
    match name {
        "one" => Ok(RuleInstance::One),
        "bot" => Ok(RuleInstance::Bot {
            principal: get_usize("principal")?,
        }),
        "top" => Ok(RuleInstance::Top {
            principal: get_usize("principal")?,
        }),
        "tensor" => Ok(RuleInstance::Tensor {
            principal: get_usize("principal")?,
            left_len: get_usize("leftLen")?,
        }),
        "par" => Ok(RuleInstance::Par {
            principal: get_usize("principal")?,
        }),
        "plus0" => Ok(RuleInstance::Plus0 {
            principal: get_usize("principal")?,
        }),
        "plus1" => Ok(RuleInstance::Plus1 {
            principal: get_usize("principal")?,
        }),
        "plus" => {
            let side = get_usize("side")?;
            let principal = get_usize("principal")?;
            match side {
                0 => Ok(RuleInstance::Plus0 { principal }),
                1 => Ok(RuleInstance::Plus1 { principal }),
                _ => Err(schema_err(format!("{base}/side"), "expected 0 or 1")),
            }
        }
        "with" => Ok(RuleInstance::With {
            principal: get_usize("principal")?,
        }),
        "mu" => Ok(RuleInstance::Mu {
            principal: get_usize("principal")?,
        }),
        "nu" => Ok(RuleInstance::Nu {
            principal: get_usize("principal")?,
        }),
        "cut" => {
            let s = rule
                .get("cutFormula")
                .ok_or_else(|| schema_err(format!("{base}/cutFormula"), "missing key"))?
                .as_str()
                .ok_or_else(|| schema_err(format!("{base}/cutFormula"), "expected a string"))?;
            let formula = parse_formula(s)
                .map_err(|e| schema_err(format!("{base}/cutFormula"), e.to_string()))?;
            Ok(RuleInstance::Cut {
                formula,
                left_len: get_usize("leftLen")?,
            })
        }
        "exch" => Ok(RuleInstance::Exch {
            index: get_usize("index")?,
        }),
        "open" => Ok(RuleInstance::Open),
        other => Err(schema_err(
            format!("{base}/name"),
            format!("unknown rule name `{other}`"),
        )),
    }
}

/// Serialize to the documented JSON schema.
pub fn save_proof(g: &ProofGraph) -> serde_json::Value {
    serde_json::to_value(g).expect("proof graphs serialize")
}

fn dot_escape(s: &str) -> String {
    s.replace('\\', "\\\\").replace('"', "\\\"")
}

/// DOT export: solid edges for the depth-first spanning tree from the root,
/// dashed edges for references to already-visited nodes.
pub fn export_dot(g: &ProofGraph) -> String {
    let mut out = String::from("digraph proof {\n  node [shape=box];\n");
    for (id, node) in &g.nodes {
        out.push_str(&format!(
            "  \"{}\" [label=\"{}: {}\"];\n",
            dot_escape(id),
            dot_escape(id),
            dot_escape(&node.sequent.to_string())
        ));
    }
    let mut visited: BTreeSet<&NodeId> = BTreeSet::new();
    let mut order: Vec<&NodeId> = vec![&g.root];
    let mut edges = String::new();
    while let Some(id) = order.pop() {
        if !visited.insert(id) {
            continue;
        }
        let Some(node) = g.nodes.get(id) else { continue };
        for premise in &node.premises {
            if visited.contains(premise) {
                edges.push_str(&format!(
                    "  \"{}\" -> \"{}\" [style=dashed];\n",
                    dot_escape(id),
                    dot_escape(premise)
                ));
            } else {
                edges.push_str(&format!(
                    "  \"{}\" -> \"{}\";\n",
                    dot_escape(id),
                    dot_escape(premise)
                ));
                order.push(premise);
            }
        }
    }
    // Unreachable nodes still get their edges, all solid-by-visit order.
    for (id, node) in &g.nodes {
        if visited.contains(id) {
            continue;
        }
        for premise in &node.premises {
            edges.push_str(&format!(
                "  \"{}\" -> \"{}\" [style=dashed];\n",
                dot_escape(id),
                dot_escape(premise)
            ));
        }
    }
    out.push_str(&edges);
    out.push_str("}\n");
    out
}

pub fn export_dot_tree(t: &FiniteTree) -> String {
    export_dot(&t.to_graph())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::formula::parse_formula;

    fn p(s: &str) -> Formula {
        parse_formula(s).unwrap()
    }

    #[test]
    fn identity_of_one_is_bot_over_one() {
        let g = identity_proof(&Formula::One);
        assert_eq!(g.nodes.len(), 2);
        let root = g.node(&g.root).unwrap();
        assert_eq!(root.sequent, Sequent(vec![Formula::Bot, Formula::One]));
        assert_eq!(root.rule, RuleInstance::Bot { principal: 0 });
        assert!(validate_local(&g).is_valid());
    }

    #[test]
    fn identity_of_top_is_single_rule() {
        let g = identity_proof(&Formula::Top);
        assert_eq!(g.nodes.len(), 1);
        let root = g.node(&g.root).unwrap();
        assert_eq!(root.sequent, Sequent(vec![Formula::Zero, Formula::Top]));
        assert_eq!(root.rule, RuleInstance::Top { principal: 1 });
        assert!(validate_local(&g).is_valid());
    }

    #[test]
    fn identity_of_mu_x_x_is_two_node_cycle() {
        let g = identity_proof(&p("mu X. X"));
        assert_eq!(g.nodes.len(), 2);
        assert!(validate_local(&g).is_valid());
        let root = g.node(&g.root).unwrap();
        assert_eq!(root.rule, RuleInstance::Nu { principal: 0 });
        let mid = g.node(&root.premises[0]).unwrap();
        assert_eq!(mid.rule, RuleInstance::Mu { principal: 1 });
        // back-edge to the root
        assert_eq!(mid.premises[0], g.root);
    }

    #[test]
    fn identity_node_budget_within_closure() {
        // Additive layers need three rule nodes (with + two plus) against two
        // closure members, so the sharp bound is 2x the closure size; unary
        // and fixed-point layers are one node per member.
        for s in ["1", "mu X. X", "(1 + bot) * top", "mu X. nu Y. (X + Y)"] {
            let phi = p(s);
            let g = identity_proof(&phi);
            let closure = crate::formula::fl_closure(&[phi.clone(), negate(&phi)]);
            assert!(
                g.nodes.len() <= 2 * closure.len(),
                "{s}: {} nodes vs closure {}",
                g.nodes.len(),
                closure.len()
            );
            assert!(validate_local(&g).is_valid());
        }
    }

    #[test]
    fn unfold_depths_are_prefixes() {
        let g = identity_proof(&p("mu X. (1 + X)"));
        for d in 0..10 {
            let a = unfold_to_depth(&g, d).unwrap();
            let b = unfold_to_depth(&g, d + 1).unwrap();
            assert!(a.truncate(d).is_prefix_of(&b));
        }
        let t0 = unfold_to_depth(&g, 0).unwrap();
        assert_eq!(t0.nodes.len(), 1);
    }

    #[test]
    fn unfold_single_nu_loop() {
        // nu X. X self-loop: depth 3 gives a chain of 3 nu rules + openLeaf
        let f = p("nu X. X");
        let mut nodes = BTreeMap::new();
        nodes.insert(
            "l".to_string(),
            ProofNode {
                sequent: Sequent(vec![f.clone()]),
                rule: RuleInstance::Nu { principal: 0 },
                premises: vec!["l".to_string()],
            },
        );
        let g = ProofGraph {
            root: "l".to_string(),
            nodes,
        };
        assert!(validate_local(&g).is_valid());
        let t = unfold_to_depth(&g, 3).unwrap();
        assert_eq!(t.nodes.len(), 4);
        assert_eq!(t.nodes[&vec![0u8, 0, 0]].rule, RuleInstance::Open);
        assert_eq!(t.nodes[&vec![0u8, 0]].rule, RuleInstance::Nu { principal: 0 });
    }

    #[test]
    fn validate_rejects_bad_back_edge() {
        // mu X. X loop that targets a node with a different sequent
        let mu = p("mu X. X");
        let mut nodes = BTreeMap::new();
        nodes.insert(
            "a".to_string(),
            ProofNode {
                sequent: Sequent(vec![mu.clone()]),
                rule: RuleInstance::Mu { principal: 0 },
                premises: vec!["b".to_string()],
            },
        );
        nodes.insert(
            "b".to_string(),
            ProofNode {
                sequent: Sequent(vec![Formula::One]),
                rule: RuleInstance::One,
                premises: vec![],
            },
        );
        let g = ProofGraph {
            root: "a".to_string(),
            nodes,
        };
        let report = validate_local(&g);
        assert_eq!(report.defects.len(), 1);
        assert_eq!(report.defects[0].node, "a");
    }

    #[test]
    fn compose_cut_with_identity_preserves_conclusion() {
        let phi = p("mu X. (1 + X)");
        let d = identity_proof(&phi);
        let before = d.root_sequent().unwrap().clone();
        let composed = compose_cut(&d, &[(identity_proof(&phi), phi.clone())]).unwrap();
        assert!(validate_local(&composed).is_valid());
        assert_eq!(composed.root_sequent().unwrap(), &before);
        // exactly one new cut node
        let cuts = composed
            .nodes
            .values()
            .filter(|n| n.rule.is_cut())
            .count();
        assert_eq!(cuts, 1);
        // empty cut list: unchanged
        assert_eq!(compose_cut(&d, &[]).unwrap(), d);
    }

    #[test]
    fn compose_cut_two_cuts_two_nodes() {
        let phi = p("1");
        let d = identity_proof(&phi); // conclusion bot, 1
        let cuts = vec![
            (identity_proof(&Formula::Bot), Formula::Bot),
            (identity_proof(&Formula::One), Formula::One),
        ];
        let g = compose_cut(&d, &cuts).unwrap();
        assert!(validate_local(&g).is_valid());
        assert_eq!(
            g.root_sequent().unwrap(),
            &Sequent(vec![Formula::Bot, Formula::One])
        );
        assert_eq!(g.nodes.values().filter(|n| n.rule.is_cut()).count(), 2);
    }

    #[test]
    fn json_round_trip_and_schema_errors() {
        let g = identity_proof(&p("mu X. nu Y. (X * Y)"));
        let doc = save_proof(&g);
        let back = load_proof(&doc).unwrap();
        assert_eq!(back, g);

        let e = load_proof(&serde_json::json!({"nodes": {}})).unwrap_err();
        assert_eq!(e.pointer, "/root");
        let e = load_proof(&serde_json::json!({
            "root": "a",
            "nodes": {"a": {"sequent": ["1"], "rule": {"name": "wat"}, "premises": []}}
        }))
        .unwrap_err();
        assert_eq!(e.pointer, "/nodes/a/rule/name");
    }

    #[test]
    fn dot_of_id_one_has_two_node_statements() {
        let g = identity_proof(&Formula::One);
        let dot = export_dot(&g);
        let count = dot.lines().filter(|l| l.contains("[label=")).count();
        assert_eq!(count, 2);
        assert!(dot.contains("->"));
    }
}
