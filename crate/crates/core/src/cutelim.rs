//! Multicut cut elimination: single-step reductions on finite trees, the
//! productive normalizer that streams cut-free prefixes out of regular
//! proofs, the identity wrap, the depth metric and prefix extraction.
//!
//! The normalizer advances a set of work items. An item is a multicut: a
//! hole in the emitted prefix, an ordered list of premise cursors into the
//! lazy unfolding of the source graph, and a pairing of dual cut formulas
//! whose graph over the premises is a tree. Items with a single premise and
//! no pairs are copy tasks streaming an already cut-free region. Each step
//! applies the first case that matches, in order: expansion (a premise root
//! is a cut), commutation (some premise root acts on a formula mapped to the
//! hole conclusion: the rule is emitted below the multicut), or a critical
//! step on a cut pair whose both sides are principal.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::formula::{negate, Formula};
use crate::proof::{
    compose_cut, identity_proof, rule_ancestry, rule_premises, validate_local, AncestryEvent,
    FiniteTree, NodeId, Pos, ProofGraph, RuleInstance, Sequent, TreeNode, ValidationReport,
};

// ---------------------------------------------------------------------------
// Identity wrap
// ---------------------------------------------------------------------------

/// Cut `d` against the identity derivation of each conclusion formula, in
/// order. The composite's conclusion equals `d`'s, and every initial
/// multicut of a normalizer run on it has an identity among its premises.
pub fn wrap_with_identities(d: &ProofGraph) -> Result<ProofGraph, NormalizeError> {
    let report = validate_local(d);
    if !report.is_valid() {
        return Err(NormalizeError::Invalid(report));
    }
    let conclusion = d
        .root_sequent()
        .ok_or_else(|| NormalizeError::Internal("no root sequent".into()))?
        .clone();
    let cuts: Vec<(ProofGraph, Formula)> = conclusion
        .iter()
        .map(|phi| (identity_proof(phi), phi.clone()))
        .collect();
    compose_cut(d, &cuts).map_err(|e| NormalizeError::Internal(e.to_string()))
}

// ---------------------------------------------------------------------------
// Events and state
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum EventKind {
    Expand,
    CommuteUnary,
    CommuteBinary,
    CommuteWith,
    CriticalUnit,
    CriticalFix,
    CriticalTensorPar,
    CriticalPlusWith,
    Vanish,
}

/// One normalizer step: which item was processed, what was emitted, and the
/// premise positions (frontier) of each successor item.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ReductionEvent {
    pub step: usize,
    pub kind: EventKind,
    pub item: usize,
    pub hole: Pos,
    pub depth: usize,
    pub emitted: Vec<Pos>,
    pub successors: Vec<SuccessorInfo>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct SuccessorInfo {
    pub item: usize,
    pub hole: Pos,
    /// Source-graph positions of the item's premises, in order.
    pub frontier: Vec<Pos>,
}

/// Assignment of one premise occurrence: member of a cut pair, or a formula
/// of the hole conclusion.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SlotAssign {
    Pair(usize),
    Conc(usize),
}

/// A premise cursor into the lazy unfolding of the source graph.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Cursor {
    pub key: usize,
    pub node: NodeId,
    pub pos: Pos,
    pub sequent: Sequent,
    pub assign: Vec<SlotAssign>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorkItem {
    pub id: usize,
    pub hole: Pos,
    pub conclusion: Sequent,
    pub premises: Vec<Cursor>,
    pub next_pair: usize,
    pub next_key: usize,
    alt_toggle: bool,
}

impl WorkItem {
    fn frontier(&self) -> Vec<Pos> {
        self.premises.iter().map(|c| c.pos.clone()).collect()
    }

    fn cursor_index_by_key(&self, key: usize) -> usize {
        self.premises
            .iter()
            .position(|c| c.key == key)
            .expect("cursor key present")
    }

    /// The two endpoints of a pair: (premise index, formula index).
    fn pair_endpoints(&self, pair: usize) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for (i, cur) in self.premises.iter().enumerate() {
            for (k, a) in cur.assign.iter().enumerate() {
                if *a == SlotAssign::Pair(pair) {
                    out.push((i, k));
                }
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NormalizerState {
    pub emitted: Vec<(Pos, TreeNode)>,
    pub active: VecDeque<WorkItem>,
    pub dormant: Vec<WorkItem>,
    pub next_item: usize,
    pub steps: usize,
    pub depth_log: Vec<Option<usize>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CommuteSelector {
    /// The smallest eligible premise index (the default).
    First,
    /// The largest eligible premise index.
    Last,
    /// Alternate between smallest and largest per item.
    Alternate,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NormalizeOptions {
    pub budget: usize,
    pub target_depth: usize,
    pub auto_wrap: bool,
    pub commute: CommuteSelector,
}

impl Default for NormalizeOptions {
    fn default() -> Self {
        NormalizeOptions {
            budget: 100_000,
            target_depth: 10,
            auto_wrap: true,
            commute: CommuteSelector::First,
        }
    }
}

#[derive(Debug, Error)]
pub enum NormalizeError {
    #[error("graph fails local validation: {0:?}")]
    Invalid(ValidationReport),
    #[error("source graph contains an open leaf at node `{0}`")]
    OpenInSource(NodeId),
    #[error("normalizer invariant violated: {0}")]
    Internal(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "camelCase")]
pub enum RunOutcome {
    /// The active set emptied: the emitted prefix is a complete cut-free
    /// derivation.
    Terminated,
    /// Every remaining item sits at or beyond the target depth.
    DepthReached,
    /// The step budget ran out first.
    BudgetExhausted,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum EmitError {
    #[error("prefix not yet stable at depth {depth}: a hole remains at depth {hole}")]
    NotStable { depth: usize, hole: usize },
}

// ---------------------------------------------------------------------------
// The normalizer
// ---------------------------------------------------------------------------

pub struct Normalizer {
    source: ProofGraph,
    options: NormalizeOptions,
    emitted: BTreeMap<Pos, TreeNode>,
    active: VecDeque<WorkItem>,
    dormant: Vec<WorkItem>,
    next_item: usize,
    steps: usize,
    depth_log: Vec<Option<usize>>,
}

impl Normalizer {
    /// Prepare a run on `d`. With `auto_wrap` the source becomes
    /// `<d | id, ..., id>`, which establishes the identity-premise condition
    /// for every multicut of the run.
    pub fn new(d: &ProofGraph, options: NormalizeOptions) -> Result<Self, NormalizeError> {
        let report = validate_local(d);
        if !report.is_valid() {
            return Err(NormalizeError::Invalid(report));
        }
        if let Some((id, _)) = d
            .nodes
            .iter()
            .find(|(_, n)| matches!(n.rule, RuleInstance::Open))
        {
            return Err(NormalizeError::OpenInSource(id.clone()));
        }
        let source = if options.auto_wrap {
            wrap_with_identities(d)?
        } else {
            d.clone()
        };
        let conclusion = source.root_sequent().expect("validated").clone();
        let root = Cursor {
            key: 0,
            node: source.root.clone(),
            pos: Vec::new(),
            sequent: conclusion.clone(),
            assign: (0..conclusion.len()).map(SlotAssign::Conc).collect(),
        };
        let item = WorkItem {
            id: 0,
            hole: Vec::new(),
            conclusion,
            premises: vec![root],
            next_pair: 0,
            next_key: 1,
            alt_toggle: false,
        };
        let mut n = Normalizer {
            source,
            options,
            emitted: BTreeMap::new(),
            active: VecDeque::new(),
            dormant: Vec::new(),
            next_item: 1,
            steps: 0,
            depth_log: Vec::new(),
        };
        n.enqueue(item);
        Ok(n)
    }

    pub fn source(&self) -> &ProofGraph {
        &self.source
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn depth_log(&self) -> &[Option<usize>] {
        &self.depth_log
    }

    pub fn is_done(&self) -> bool {
        self.active.is_empty()
    }

    pub fn outcome(&self) -> RunOutcome {
        if self.active.is_empty() {
            if self.dormant.is_empty() {
                RunOutcome::Terminated
            } else {
                RunOutcome::DepthReached
            }
        } else {
            RunOutcome::BudgetExhausted
        }
    }

    fn enqueue(&mut self, item: WorkItem) {
        if item.hole.len() >= self.options.target_depth {
            self.dormant.push(item);
        } else {
            self.active.push_back(item);
        }
    }

    fn emit(&mut self, pos: Pos, sequent: Sequent, rule: RuleInstance) -> Pos {
        self.emitted.insert(pos.clone(), TreeNode { sequent, rule });
        pos
    }

    fn fresh_item_id(&mut self) -> usize {
        let id = self.next_item;
        self.next_item += 1;
        id
    }

    /// Advance a cursor into one premise of its node's rule, inheriting
    /// assignments along the ancestry relation, with explicit overrides for
    /// minor occurrences.
    fn advance_cursor(
        &self,
        cur: &Cursor,
        slot: usize,
        overrides: &[(usize, SlotAssign)],
    ) -> Result<Cursor, NormalizeError> {
        let node = &self.source.nodes[&cur.node];
        let premises = rule_premises(&node.sequent, &node.rule)
            .map_err(|e| NormalizeError::Internal(e.to_string()))?;
        let ancestry = rule_ancestry(&node.sequent, &node.rule)
            .map_err(|e| NormalizeError::Internal(e.to_string()))?;
        let target = node.premises[slot].clone();
        let sequent = premises[slot].clone();
        let mut assign: Vec<Option<SlotAssign>> = vec![None; sequent.len()];
        for (f, t, _) in &ancestry[slot] {
            assign[*t] = Some(cur.assign[*f]);
        }
        for (t, a) in overrides {
            assign[*t] = Some(*a);
        }
        let assign: Vec<SlotAssign> = assign
            .into_iter()
            .enumerate()
            .map(|(k, a)| {
                a.ok_or_else(|| {
                    NormalizeError::Internal(format!(
                        "unassigned premise occurrence {k} advancing past {}",
                        node.rule.name()
                    ))
                })
            })
            .collect::<Result<_, _>>()?;
        let mut pos = cur.pos.clone();
        pos.push(slot as u8);
        Ok(Cursor {
            key: cur.key,
            node: target,
            pos,
            sequent,
            assign,
        })
    }

    /// Run until the budget is exhausted or no active item remains;
    /// returns the events.
    pub fn run(&mut self) -> Result<Vec<ReductionEvent>, NormalizeError> {
        let mut events = Vec::new();
        while self.steps < self.options.budget && !self.active.is_empty() {
            if let Some(ev) = self.step()? {
                events.push(ev);
            }
        }
        Ok(events)
    }

    /// Process one event on the front item of the round-robin queue.
    pub fn step(&mut self) -> Result<Option<ReductionEvent>, NormalizeError> {
        let Some(item) = self.active.pop_front() else {
            return Ok(None);
        };
        let step = self.steps;
        self.steps += 1;
        let hole = item.hole.clone();
        let depth = hole.len();

        // Case (I): a premise root is a cut. Expand.
        if let Some(j) = item.premises.iter().position(|c| {
            matches!(self.source.nodes[&c.node].rule, RuleInstance::Cut { .. })
        }) {
            let item = self.expand(item, j)?;
            let info = SuccessorInfo {
                item: item.id,
                hole: item.hole.clone(),
                frontier: item.frontier(),
            };
            self.enqueue(item);
            self.depth_log.push(None);
            return Ok(Some(ReductionEvent {
                step,
                kind: EventKind::Expand,
                item: info.item,
                hole,
                depth,
                emitted: vec![],
                successors: vec![info],
            }));
        }

        // Case (II): some premise root is an exch, or is principal on an
        // occurrence mapped to the conclusion. Commute it below the multicut.
        let eligible: Vec<usize> = item
            .premises
            .iter()
            .enumerate()
            .filter(|(_, c)| {
                let rule = &self.source.nodes[&c.node].rule;
                match rule {
                    RuleInstance::Exch { .. } => true,
                    RuleInstance::One => matches!(c.assign[0], SlotAssign::Conc(_)),
                    _ => match rule.principal() {
                        Some(p) => matches!(c.assign[p], SlotAssign::Conc(_)),
                        None => false,
                    },
                }
            })
            .map(|(j, _)| j)
            .collect();
        if !eligible.is_empty() {
            let mut item = item;
            let j = match self.options.commute {
                CommuteSelector::First => eligible[0],
                CommuteSelector::Last => *eligible.last().unwrap(),
                CommuteSelector::Alternate => {
                    let pick = if item.alt_toggle {
                        *eligible.last().unwrap()
                    } else {
                        eligible[0]
                    };
                    item.alt_toggle = !item.alt_toggle;
                    pick
                }
            };
            return self.commute(item, j, step, hole, depth).map(Some);
        }

        // Case (III): every premise root is principal on a cut formula.
        self.critical(item, step, hole, depth).map(Some)
    }

    fn expand(&mut self, mut item: WorkItem, j: usize) -> Result<WorkItem, NormalizeError> {
        let cur = item.premises[j].clone();
        let RuleInstance::Cut { left_len, .. } = self.source.nodes[&cur.node].rule.clone() else {
            unreachable!()
        };
        let pair = item.next_pair;
        item.next_pair += 1;
        let mut left = self.advance_cursor(&cur, 0, &[(left_len, SlotAssign::Pair(pair))])?;
        let mut right = self.advance_cursor(&cur, 1, &[(0, SlotAssign::Pair(pair))])?;
        left.key = item.next_key;
        right.key = item.next_key + 1;
        item.next_key += 2;
        item.premises.splice(j..=j, [left, right]);
        Ok(item)
    }

    /// Remap the conclusion indices of every cursor in the item.
    fn remap_conclusion(item: &mut WorkItem, map: &dyn Fn(usize) -> usize) {
        for cur in &mut item.premises {
            for a in &mut cur.assign {
                if let SlotAssign::Conc(x) = a {
                    *a = SlotAssign::Conc(map(*x));
                }
            }
        }
    }

    fn commute(
        &mut self,
        mut item: WorkItem,
        j: usize,
        step: usize,
        hole: Pos,
        depth: usize,
    ) -> Result<ReductionEvent, NormalizeError> {
        let cur = item.premises[j].clone();
        let rule = self.source.nodes[&cur.node].rule.clone();
        let mut emitted = Vec::new();

        match rule {
            RuleInstance::Exch { index } => {
                // Emit only a faithful exchange of adjacent conclusion slots;
                // otherwise consume the node silently.
                let (a, b) = (cur.assign[index], cur.assign[index + 1]);
                let emit_it = matches!((a, b), (SlotAssign::Conc(c), SlotAssign::Conc(c2)) if c2 == c + 1);
                if emit_it {
                    let SlotAssign::Conc(c) = a else { unreachable!() };
                    let premise = rule_premises(&item.conclusion, &RuleInstance::Exch { index: c })
                        .map_err(|e| NormalizeError::Internal(e.to_string()))?
                        .remove(0);
                    emitted.push(self.emit(
                        hole.clone(),
                        item.conclusion.clone(),
                        RuleInstance::Exch { index: c },
                    ));
                    item.hole.push(0);
                    item.conclusion = premise;
                    let advanced = self.advance_cursor(
                        &cur,
                        0,
                        &[
                            (index, SlotAssign::Conc(c)),
                            (index + 1, SlotAssign::Conc(c + 1)),
                        ],
                    )?;
                    item.premises[j] = advanced;
                } else {
                    let advanced = self.advance_cursor(&cur, 0, &[])?;
                    item.premises[j] = advanced;
                }
                let info = SuccessorInfo {
                    item: item.id,
                    hole: item.hole.clone(),
                    frontier: item.frontier(),
                };
                self.enqueue(item);
                self.depth_log.push(Some(depth));
                Ok(ReductionEvent {
                    step,
                    kind: EventKind::CommuteUnary,
                    item: info.item,
                    hole,
                    depth,
                    emitted,
                    successors: vec![info],
                })
            }
            RuleInstance::Top { principal } => {
                let SlotAssign::Conc(c) = cur.assign[principal] else {
                    unreachable!()
                };
                emitted.push(self.emit(
                    hole.clone(),
                    item.conclusion.clone(),
                    RuleInstance::Top { principal: c },
                ));
                // the whole multicut vanishes; other premises are discarded
                self.depth_log.push(Some(depth));
                Ok(ReductionEvent {
                    step,
                    kind: EventKind::Vanish,
                    item: item.id,
                    hole,
                    depth,
                    emitted,
                    successors: vec![],
                })
            }
            RuleInstance::One => {
                // only possible in a copy task: the conclusion is exactly `1`
                if item.premises.len() != 1 || item.conclusion.0 != vec![Formula::One] {
                    return Err(NormalizeError::Internal(
                        "one-rule emission outside a unit copy task".into(),
                    ));
                }
                emitted.push(self.emit(hole.clone(), item.conclusion.clone(), RuleInstance::One));
                self.depth_log.push(Some(depth));
                Ok(ReductionEvent {
                    step,
                    kind: EventKind::Vanish,
                    item: item.id,
                    hole,
                    depth,
                    emitted,
                    successors: vec![],
                })
            }
            RuleInstance::Bot { principal }
            | RuleInstance::Par { principal }
            | RuleInstance::Plus0 { principal }
            | RuleInstance::Plus1 { principal }
            | RuleInstance::Mu { principal }
            | RuleInstance::Nu { principal } => {
                let SlotAssign::Conc(c) = cur.assign[principal] else {
                    unreachable!()
                };
                let emitted_rule = match rule {
                    RuleInstance::Bot { .. } => RuleInstance::Bot { principal: c },
                    RuleInstance::Par { .. } => RuleInstance::Par { principal: c },
                    RuleInstance::Plus0 { .. } => RuleInstance::Plus0 { principal: c },
                    RuleInstance::Plus1 { .. } => RuleInstance::Plus1 { principal: c },
                    RuleInstance::Mu { .. } => RuleInstance::Mu { principal: c },
                    RuleInstance::Nu { .. } => RuleInstance::Nu { principal: c },
                    _ => unreachable!(),
                };
                let premise = rule_premises(&item.conclusion, &emitted_rule)
                    .map_err(|e| NormalizeError::Internal(e.to_string()))?
                    .remove(0);
                emitted.push(self.emit(hole.clone(), item.conclusion.clone(), emitted_rule.clone()));
                item.hole.push(0);
                item.conclusion = premise;
                // conclusion reshaping
                let overrides: Vec<(usize, SlotAssign)> = match &rule {
                    RuleInstance::Bot { .. } => {
                        Self::remap_conclusion(&mut item, &|x| if x > c { x - 1 } else { x });
                        vec![]
                    }
                    RuleInstance::Par { .. } => {
                        Self::remap_conclusion(&mut item, &|x| if x > c { x + 1 } else { x });
                        vec![
                            (principal, SlotAssign::Conc(c)),
                            (principal + 1, SlotAssign::Conc(c + 1)),
                        ]
                    }
                    _ => vec![(principal, SlotAssign::Conc(c))],
                };
                let advanced = self.advance_cursor(&item.premises[j].clone(), 0, &overrides)?;
                item.premises[j] = advanced;
                let info = SuccessorInfo {
                    item: item.id,
                    hole: item.hole.clone(),
                    frontier: item.frontier(),
                };
                self.enqueue(item);
                self.depth_log.push(Some(depth));
                Ok(ReductionEvent {
                    step,
                    kind: EventKind::CommuteUnary,
                    item: info.item,
                    hole,
                    depth,
                    emitted,
                    successors: vec![info],
                })
            }
            RuleInstance::With { principal } => {
                let SlotAssign::Conc(c) = cur.assign[principal] else {
                    unreachable!()
                };
                let emitted_rule = RuleInstance::With { principal: c };
                let premises = rule_premises(&item.conclusion, &emitted_rule)
                    .map_err(|e| NormalizeError::Internal(e.to_string()))?;
                emitted.push(self.emit(hole.clone(), item.conclusion.clone(), emitted_rule));
                let mut infos = Vec::new();
                let mut successors = Vec::new();
                for (side, premise) in premises.into_iter().enumerate() {
                    let mut sub = item.clone();
                    sub.id = self.fresh_item_id();
                    sub.hole.push(side as u8);
                    sub.conclusion = premise;
                    let advanced = self.advance_cursor(
                        &sub.premises[j].clone(),
                        side,
                        &[(principal, SlotAssign::Conc(c))],
                    )?;
                    sub.premises[j] = advanced;
                    infos.push(SuccessorInfo {
                        item: sub.id,
                        hole: sub.hole.clone(),
                        frontier: sub.frontier(),
                    });
                    successors.push(sub);
                }
                for sub in successors {
                    self.enqueue(sub);
                }
                self.depth_log.push(Some(depth));
                Ok(ReductionEvent {
                    step,
                    kind: EventKind::CommuteWith,
                    item: item.id,
                    hole,
                    depth,
                    emitted,
                    successors: infos,
                })
            }
            RuleInstance::Tensor { principal, left_len } => {
                self.commute_tensor(item, j, principal, left_len, step, hole, depth)
            }
            RuleInstance::Cut { .. } | RuleInstance::Open => unreachable!("handled earlier"),
        }
    }

    /// Case (II) for a tensor premise: the multicut splits in two, premises
    /// and conclusion formulas routed by the cut-pair tree. Exchanges are
    /// emitted first when the conclusion partition is not contiguous.
    #[allow(clippy::too_many_arguments)]
    fn commute_tensor(
        &mut self,
        mut item: WorkItem,
        j: usize,
        principal: usize,
        src_left_len: usize,
        step: usize,
        hole: Pos,
        depth: usize,
    ) -> Result<ReductionEvent, NormalizeError> {
        let cur = item.premises[j].clone();
        let SlotAssign::Conc(c0) = cur.assign[principal] else {
            unreachable!()
        };
        let node = &self.source.nodes[&cur.node];
        let ancestry = rule_ancestry(&node.sequent, &node.rule)
            .map_err(|e| NormalizeError::Internal(e.to_string()))?;
        // side of each index of cursor j (true = left premise of the tensor)
        let mut goes_left: BTreeMap<usize, bool> = BTreeMap::new();
        for (f, _, _) in &ancestry[0] {
            goes_left.insert(*f, true);
        }
        for (f, _, _) in &ancestry[1] {
            goes_left.entry(*f).or_insert(false);
        }

        // connected components of the pair graph, excluding cursor j
        let n = item.premises.len();
        let mut comp: Vec<Option<usize>> = vec![None; n];
        let mut comp_side: Vec<bool> = Vec::new();
        for i in 0..n {
            if i == j || comp[i].is_some() {
                continue;
            }
            let cid = comp_side.len();
            let mut side: Option<bool> = None;
            let mut stack = vec![i];
            comp[i] = Some(cid);
            while let Some(v) = stack.pop() {
                for a in &item.premises[v].assign {
                    let SlotAssign::Pair(q) = a else { continue };
                    for (w, idx) in item.pair_endpoints(*q) {
                        if w == j {
                            side = Some(goes_left[&idx]);
                        } else if comp[w].is_none() {
                            comp[w] = Some(cid);
                            stack.push(w);
                        }
                    }
                }
            }
            comp_side.push(side.ok_or_else(|| {
                NormalizeError::Internal("disconnected multicut premise".into())
            })?);
        }

        // side of every conclusion index
        let conc_len = item.conclusion.len();
        let mut conc_left: Vec<bool> = vec![false; conc_len];
        for (i, cursor) in item.premises.iter().enumerate() {
            for (k, a) in cursor.assign.iter().enumerate() {
                let SlotAssign::Conc(x) = a else { continue };
                if i == j {
                    if k != principal {
                        conc_left[*x] = goes_left[&k];
                    }
                } else {
                    conc_left[*x] = comp_side[comp[i].expect("component assigned")];
                }
            }
        }

        // reorder the conclusion so left-context precedes right-context
        // (ignoring the principal), by explicit exchanges
        let mut order: Vec<usize> = (0..conc_len).collect();
        let desired: Vec<usize> = {
            let mut left: Vec<usize> = (0..conc_len)
                .filter(|x| *x != c0 && conc_left[*x])
                .collect();
            let right: Vec<usize> = (0..conc_len)
                .filter(|x| *x != c0 && !conc_left[*x])
                .collect();
            // keep the principal at its current rank among all slots, as
            // close to its position as the partition permits: insert it
            // after the left part if it currently sits between the parts,
            // otherwise leave it where sorting puts the contexts around it.
            let mut d = Vec::with_capacity(conc_len);
            let mut li = 0usize;
            let mut ri = 0usize;
            for x in 0..conc_len {
                if x == c0 {
                    d.push(c0);
                } else if li < left.len() {
                    d.push(left[li]);
                    li += 1;
                } else {
                    d.push(right[ri]);
                    ri += 1;
                }
            }
            d
        };
        let mut emitted = Vec::new();
        let mut cur_hole = hole.clone();
        let mut cur_conc = item.conclusion.clone();
        if order != desired {
            // bubble the current order into the desired one
            let mut work = order.clone();
            let mut swaps: Vec<usize> = Vec::new();
            for k in 0..conc_len {
                let at = work.iter().position(|v| *v == desired[k]).unwrap();
                for i in (k..at).rev() {
                    work.swap(i, i + 1);
                    swaps.push(i);
                }
            }
            for i in swaps {
                emitted.push(self.emit(
                    cur_hole.clone(),
                    cur_conc.clone(),
                    RuleInstance::Exch { index: i },
                ));
                let mut v = cur_conc.0.clone();
                v.swap(i, i + 1);
                cur_conc = Sequent(v);
                cur_hole.push(0);
            }
            order = desired;
        }
        // remap every cursor's conclusion assignment to the new order
        let posmap: BTreeMap<usize, usize> =
            order.iter().enumerate().map(|(p, x)| (*x, p)).collect();
        Self::remap_conclusion(&mut item, &|x| posmap[&x]);
        let c = posmap[&c0];
        let left_count = conc_left.iter().enumerate().filter(|(x, l)| **l && *x != c0).count();

        // emit the tensor node
        let emitted_rule = RuleInstance::Tensor {
            principal: c,
            left_len: left_count,
        };
        let premises = rule_premises(&cur_conc, &emitted_rule)
            .map_err(|e| NormalizeError::Internal(e.to_string()))?;
        emitted.push(self.emit(cur_hole.clone(), cur_conc.clone(), emitted_rule));

        // split the item
        let cur = item.premises[j].clone();
        let src_minor_left = src_left_len;
        let src_minor_right = cur.sequent.len() - 1 - src_left_len;
        let mut items = Vec::new();
        let mut infos = Vec::new();
        for side in 0..2 {
            let is_left = side == 0;
            let premise_conc = premises[side].clone();
            let minor_conc = premise_conc.len() - 1;
            // rank of each (new-order) conclusion position within its side;
            // every surviving context occurrence of this side is covered
            let side_rank: BTreeMap<usize, usize> = (0..conc_len)
                .filter(|p| {
                    let x = order[*p];
                    x != c0 && conc_left[x] == is_left
                })
                .enumerate()
                .map(|(r, p)| (p, r))
                .collect();
            // pre-remap cursor j's context before advancing: positions of the
            // other side are dropped by the ancestry relation
            let mut cur_for_side = cur.clone();
            for a in &mut cur_for_side.assign {
                if let SlotAssign::Conc(x) = a {
                    if *x != c {
                        *a = SlotAssign::Conc(side_rank.get(x).copied().unwrap_or(usize::MAX));
                    }
                }
            }
            let advanced = self.advance_cursor(
                &cur_for_side,
                side,
                &[(
                    if is_left { src_minor_left } else { src_minor_right },
                    SlotAssign::Conc(minor_conc),
                )],
            )?;
            debug_assert!(advanced
                .assign
                .iter()
                .all(|a| !matches!(a, SlotAssign::Conc(x) if *x == usize::MAX)));
            let mut premise_cursors = Vec::new();
            for (i, cursor) in item.premises.iter().enumerate() {
                if i == j {
                    premise_cursors.push(advanced.clone());
                } else if comp_side[comp[i].expect("assigned")] == is_left {
                    let mut cursor = cursor.clone();
                    for a in &mut cursor.assign {
                        if let SlotAssign::Conc(x) = a {
                            *a = SlotAssign::Conc(side_rank[x]);
                        }
                    }
                    premise_cursors.push(cursor);
                }
            }
            let mut sub_hole = cur_hole.clone();
            sub_hole.push(side as u8);
            let sub = WorkItem {
                id: self.fresh_item_id(),
                hole: sub_hole,
                conclusion: premise_conc,
                premises: premise_cursors,
                next_pair: item.next_pair,
                next_key: item.next_key,
                alt_toggle: item.alt_toggle,
            };
            infos.push(SuccessorInfo {
                item: sub.id,
                hole: sub.hole.clone(),
                frontier: sub.frontier(),
            });
            items.push(sub);
        }
        for sub in items {
            self.enqueue(sub);
        }
        self.depth_log.push(Some(depth));
        Ok(ReductionEvent {
            step,
            kind: EventKind::CommuteBinary,
            item: item.id,
            hole,
            depth,
            emitted,
            successors: infos,
        })
    }

    /// Case (III): find a cut pair whose both occurrences are principal and
    /// apply the critical reduction.
    fn critical(
        &mut self,
        mut item: WorkItem,
        step: usize,
        hole: Pos,
        depth: usize,
    ) -> Result<ReductionEvent, NormalizeError> {
        let mut found: Option<(usize, usize, usize)> = None; // (j, k, pair)
        'outer: for (j, cur) in item.premises.iter().enumerate() {
            let rule = &self.source.nodes[&cur.node].rule;
            let Some(p) = rule.principal() else { continue };
            let SlotAssign::Pair(q) = cur.assign[p] else {
                continue;
            };
            for (k, idx) in item.pair_endpoints(q) {
                if k == j {
                    continue;
                }
                let partner_rule = &self.source.nodes[&item.premises[k].node].rule;
                if partner_rule.principal() == Some(idx) {
                    found = Some((j, k, q));
                    break 'outer;
                }
            }
        }
        let Some((j, k, pair)) = found else {
            return Err(NormalizeError::Internal(
                "no critical pair in case (III)".into(),
            ));
        };

        let rule_j = self.source.nodes[&item.premises[j].node].rule.clone();
        let rule_k = self.source.nodes[&item.premises[k].node].rule.clone();
        let formula_j = {
            let cur = &item.premises[j];
            cur.sequent.0[rule_j.principal().unwrap()].clone()
        };

        let kind;
        match (&rule_j, &rule_k) {
            (RuleInstance::One, RuleInstance::Bot { principal })
            | (RuleInstance::Bot { principal }, RuleInstance::One) => {
                kind = EventKind::CriticalUnit;
                let (one_idx, bot_idx, bot_p) = if matches!(rule_j, RuleInstance::One) {
                    (j, k, *principal)
                } else {
                    (k, j, *principal)
                };
                let bot_cur = item.premises[bot_idx].clone();
                let advanced = self.advance_cursor(&bot_cur, 0, &[])?;
                item.premises[bot_idx] = advanced;
                item.premises.remove(one_idx);
                let _ = bot_p;
                if self.options.auto_wrap && item.premises.len() == 1 {
                    // condition (star): the remainder must be exactly the
                    // one rule proving `1`
                    let rest = &item.premises[0];
                    let rest_rule = &self.source.nodes[&rest.node].rule;
                    if rest.sequent.0 != vec![Formula::One]
                        || !matches!(rest_rule, RuleInstance::One)
                    {
                        return Err(NormalizeError::Internal(format!(
                            "unit vanish without the identity shape: remainder `{}` by {}",
                            rest.sequent,
                            rest_rule.name()
                        )));
                    }
                }
            }
            (RuleInstance::Mu { .. }, RuleInstance::Nu { .. })
            | (RuleInstance::Nu { .. }, RuleInstance::Mu { .. }) => {
                kind = EventKind::CriticalFix;
                for idx in [j, k] {
                    let cur = item.premises[idx].clone();
                    let p = self.source.nodes[&cur.node].rule.principal().unwrap();
                    let advanced = self.advance_cursor(&cur, 0, &[(p, SlotAssign::Pair(pair))])?;
                    item.premises[idx] = advanced;
                }
                debug_assert!({
                    let eps = item.pair_endpoints(pair);
                    let (a, b) = (eps[0], eps[1]);
                    let fa = item.premises[a.0].sequent.0[a.1].clone();
                    let fb = item.premises[b.0].sequent.0[b.1].clone();
                    negate(&fa) == fb
                });
            }
            (RuleInstance::Tensor { .. }, RuleInstance::Par { .. })
            | (RuleInstance::Par { .. }, RuleInstance::Tensor { .. }) => {
                kind = EventKind::CriticalTensorPar;
                let (t_idx, p_idx) = if matches!(rule_j, RuleInstance::Tensor { .. }) {
                    (j, k)
                } else {
                    (k, j)
                };
                let t_cur = item.premises[t_idx].clone();
                let p_cur = item.premises[p_idx].clone();
                let RuleInstance::Tensor { left_len, .. } =
                    self.source.nodes[&t_cur.node].rule.clone()
                else {
                    unreachable!()
                };
                let RuleInstance::Par { principal: pp } =
                    self.source.nodes[&p_cur.node].rule.clone()
                else {
                    unreachable!()
                };
                let q1 = item.next_pair;
                let q2 = item.next_pair + 1;
                item.next_pair += 2;
                // par side advances, minors pick up the two new pairs
                let par_advanced = self.advance_cursor(
                    &p_cur,
                    0,
                    &[(pp, SlotAssign::Pair(q1)), (pp + 1, SlotAssign::Pair(q2))],
                )?;
                item.premises[p_idx] = par_advanced;
                // tensor side splits in place
                let t_minor_right = t_cur.sequent.len() - 1 - left_len;
                let mut t_left =
                    self.advance_cursor(&t_cur, 0, &[(left_len, SlotAssign::Pair(q1))])?;
                let mut t_right =
                    self.advance_cursor(&t_cur, 1, &[(t_minor_right, SlotAssign::Pair(q2))])?;
                t_left.key = item.next_key;
                t_right.key = item.next_key + 1;
                item.next_key += 2;
                item.premises.splice(t_idx..=t_idx, [t_left, t_right]);
                debug_assert!(item.pair_endpoints(pair).is_empty());
            }
            (RuleInstance::Plus0 { .. }, RuleInstance::With { .. })
            | (RuleInstance::Plus1 { .. }, RuleInstance::With { .. })
            | (RuleInstance::With { .. }, RuleInstance::Plus0 { .. })
            | (RuleInstance::With { .. }, RuleInstance::Plus1 { .. }) => {
                kind = EventKind::CriticalPlusWith;
                let (plus_idx, with_idx) = if matches!(rule_j, RuleInstance::With { .. }) {
                    (k, j)
                } else {
                    (j, k)
                };
                let plus_cur = item.premises[plus_idx].clone();
                let with_cur = item.premises[with_idx].clone();
                let plus_rule = self.source.nodes[&plus_cur.node].rule.clone();
                let side = match plus_rule {
                    RuleInstance::Plus0 { .. } => 0usize,
                    RuleInstance::Plus1 { .. } => 1usize,
                    _ => unreachable!(),
                };
                let pp = plus_rule.principal().unwrap();
                let wp = self.source.nodes[&with_cur.node].rule.principal().unwrap();
                let plus_advanced =
                    self.advance_cursor(&plus_cur, 0, &[(pp, SlotAssign::Pair(pair))])?;
                let with_advanced =
                    self.advance_cursor(&with_cur, side, &[(wp, SlotAssign::Pair(pair))])?;
                item.premises[plus_idx] = plus_advanced;
                item.premises[with_idx] = with_advanced;
            }
            (a, b) => {
                return Err(NormalizeError::Internal(format!(
                    "impossible critical pair {} / {} on `{}`",
                    a.name(),
                    b.name(),
                    formula_j
                )));
            }
        }

        let info = SuccessorInfo {
            item: item.id,
            hole: item.hole.clone(),
            frontier: item.frontier(),
        };
        self.enqueue(item);
        self.depth_log.push(Some(depth));
        Ok(ReductionEvent {
            step,
            kind,
            item: info.item,
            hole,
            depth,
            emitted: vec![],
            successors: vec![info],
        })
    }

    /// The depth-`d` truncation of the limit. Every hole must sit at depth
    /// >= `d` (holes exactly at `d` appear as openLeaf with their conclusion).
    pub fn emit_prefix(&self, d: usize) -> Result<FiniteTree, EmitError> {
        for item in self.active.iter().chain(self.dormant.iter()) {
            if item.hole.len() < d {
                return Err(EmitError::NotStable {
                    depth: d,
                    hole: item.hole.len(),
                });
            }
        }
        let mut nodes: BTreeMap<Pos, TreeNode> = BTreeMap::new();
        for (pos, node) in &self.emitted {
            if pos.len() < d {
                nodes.insert(pos.clone(), node.clone());
            } else if pos.len() == d {
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
        for item in self.active.iter().chain(self.dormant.iter()) {
            if item.hole.len() == d {
                nodes.insert(
                    item.hole.clone(),
                    TreeNode {
                        sequent: item.conclusion.clone(),
                        rule: RuleInstance::Open,
                    },
                );
            }
        }
        Ok(FiniteTree { nodes })
    }

    /// Snapshot for checkpointing.
    pub fn state(&self) -> NormalizerState {
        NormalizerState {
            emitted: self.emitted.iter().map(|(p, n)| (p.clone(), n.clone())).collect(),
            active: self.active.clone(),
            dormant: self.dormant.clone(),
            next_item: self.next_item,
            steps: self.steps,
            depth_log: self.depth_log.clone(),
        }
    }

    /// Resume a checkpointed run. The source must be the same graph
    /// (post-wrap) the checkpoint was taken from.
    pub fn resume(
        source: ProofGraph,
        state: NormalizerState,
        options: NormalizeOptions,
    ) -> Result<Self, NormalizeError> {
        let report = validate_local(&source);
        if !report.is_valid() {
            return Err(NormalizeError::Invalid(report));
        }
        Ok(Normalizer {
            source,
            options,
            emitted: state.emitted.into_iter().collect(),
            active: state.active,
            dormant: state.dormant,
            next_item: state.next_item,
            steps: state.steps,
            depth_log: state.depth_log,
        })
    }
}

/// Run the normalizer to completion under the given options.
pub struct NormalizeRun {
    pub outcome: RunOutcome,
    pub events: Vec<ReductionEvent>,
    pub normalizer: Normalizer,
}

pub fn normalize(d: &ProofGraph, options: NormalizeOptions) -> Result<NormalizeRun, NormalizeError> {
    let mut n = Normalizer::new(d, options)?;
    let events = n.run()?;
    Ok(NormalizeRun {
        outcome: n.outcome(),
        events,
        normalizer: n,
    })
}

/// The per-reduction depth metric: for every non-expansion event, the depth
/// of the multicut it reduced. The run is depth-increasing iff this
/// sequence diverges.
pub fn depth_metric(events: &[ReductionEvent]) -> Vec<usize> {
    events
        .iter()
        .filter(|e| e.kind != EventKind::Expand)
        .map(|e| e.depth)
        .collect()
}

// ---------------------------------------------------------------------------
// Single-step cut reduction on finite trees
// ---------------------------------------------------------------------------

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ReduceError {
    #[error("no node at the given position")]
    NoSuchPosition,
    #[error("the node at the given position is not a cut")]
    NotACut,
    #[error("a premise root is an open leaf: deepen the tree first")]
    NeedsMoreDepth,
}

/// A subtree fragment during reduct assembly.
#[derive(Clone, Debug)]
struct Frag {
    nodes: BTreeMap<Pos, TreeNode>,
}

impl Frag {
    fn conclusion(&self) -> &Sequent {
        &self.nodes[&Vec::new()].sequent
    }

    fn node(sequent: Sequent, rule: RuleInstance, children: Vec<Frag>) -> Frag {
        let mut nodes = BTreeMap::new();
        nodes.insert(Vec::new(), TreeNode { sequent, rule });
        for (i, child) in children.into_iter().enumerate() {
            for (pos, n) in child.nodes {
                let mut p = vec![i as u8];
                p.extend(pos);
                nodes.insert(p, n);
            }
        }
        Frag { nodes }
    }
}

fn subtree(t: &FiniteTree, at: &Pos) -> Frag {
    let mut nodes = BTreeMap::new();
    for (pos, n) in &t.nodes {
        if pos.len() >= at.len() && pos[..at.len()] == at[..] {
            nodes.insert(pos[at.len()..].to_vec(), n.clone());
        }
    }
    Frag { nodes }
}

fn replace_subtree(t: &FiniteTree, at: &Pos, frag: Frag) -> FiniteTree {
    let mut nodes: BTreeMap<Pos, TreeNode> = t
        .nodes
        .iter()
        .filter(|(pos, _)| pos.len() < at.len() || pos[..at.len()] != at[..])
        .map(|(p, n)| (p.clone(), n.clone()))
        .collect();
    for (pos, n) in frag.nodes {
        let mut p = at.clone();
        p.extend(pos);
        nodes.insert(p, n);
    }
    FiniteTree { nodes }
}

/// Wrap `inner` in an exchange chain so the outermost conclusion equals
/// `target` (a permutation of `inner`'s conclusion).
fn exch_chain(target: &Sequent, inner: Frag) -> Frag {
    let source = inner.conclusion().clone();
    if *target == source {
        return inner;
    }
    // stable value matching from target to source positions
    let mut used = vec![false; source.len()];
    let perm: Vec<usize> = target
        .iter()
        .map(|f| {
            let i = source
                .iter()
                .enumerate()
                .position(|(i, g)| !used[i] && g == f)
                .expect("exch chain target must be a permutation");
            used[i] = true;
            i
        })
        .collect();
    // swap sequence turning `perm` into the identity, applied top-down
    let mut work = perm;
    let mut frag = inner;
    let mut swaps = Vec::new();
    for k in 0..work.len() {
        let at = work.iter().position(|v| *v == k).unwrap();
        for i in (k..at).rev() {
            work.swap(i, i + 1);
            swaps.push(i);
        }
    }
    // conclusions from the inside out
    for &i in swaps.iter().rev() {
        let mut seq = frag.conclusion().0.clone();
        seq.swap(i, i + 1);
        frag = Frag::node(Sequent(seq), RuleInstance::Exch { index: i }, vec![frag]);
    }
    debug_assert_eq!(frag.conclusion(), target);
    frag
}

/// Build a canonical cut fragment over two subtrees; the left one proves
/// `gamma ++ [phi]` up to exchange, the right one `[neg phi] ++ delta` up to
/// exchange.
fn cut_frag(conclusion: Sequent, phi: Formula, left_len: usize, left: Frag, right: Frag) -> Frag {
    let premises = rule_premises(
        &conclusion,
        &RuleInstance::Cut {
            formula: phi.clone(),
            left_len,
        },
    )
    .expect("cut premise shapes");
    let l = exch_chain(&premises[0], left);
    let r = exch_chain(&premises[1], right);
    Frag::node(
        conclusion,
        RuleInstance::Cut {
            formula: phi,
            left_len,
        },
        vec![l, r],
    )
}

/// All one-step reducts of the cut at `at`, commuting and critical, with the
/// conclusion sequent preserved exactly. Both premise orientations are
/// considered.
pub fn reduce_step(t: &FiniteTree, at: &Pos) -> Result<Vec<FiniteTree>, ReduceError> {
    let node = t.nodes.get(at).ok_or(ReduceError::NoSuchPosition)?;
    let RuleInstance::Cut { formula, left_len } = node.rule.clone() else {
        return Err(ReduceError::NotACut);
    };
    let conclusion = node.sequent.clone();
    let g = left_len;
    let mut lpos = at.clone();
    lpos.push(0);
    let mut rpos = at.clone();
    rpos.push(1);
    let left = subtree(t, &lpos);
    let right = subtree(t, &rpos);
    let lroot = left.nodes[&Vec::new()].clone();
    let rroot = right.nodes[&Vec::new()].clone();
    if matches!(lroot.rule, RuleInstance::Open) || matches!(rroot.rule, RuleInstance::Open) {
        return Err(ReduceError::NeedsMoreDepth);
    }
    // cut occurrence indices in the premises
    let cut_idx_left = g;
    let cut_idx_right = 0usize;

    let mut reducts: Vec<Frag> = Vec::new();

    // commuting reducts, left then right
    if let Some(frag) = commute_side(
        &conclusion,
        &formula,
        g,
        &left,
        &right,
        cut_idx_left,
        true,
    ) {
        reducts.push(frag);
    }
    if let Some(frag) = commute_side(
        &conclusion,
        &formula,
        g,
        &right,
        &left,
        cut_idx_right,
        false,
    ) {
        reducts.push(frag);
    }
    // critical reduct
    if let Some(frag) = critical_reduct(&conclusion, &formula, g, &left, &right) {
        reducts.push(frag);
    }

    Ok(reducts
        .into_iter()
        .map(|f| replace_subtree(t, at, f))
        .collect())
}

fn frag_child(f: &Frag, slot: u8) -> Frag {
    let mut nodes = BTreeMap::new();
    for (pos, n) in &f.nodes {
        if !pos.is_empty() && pos[0] == slot {
            nodes.insert(pos[1..].to_vec(), n.clone());
        }
    }
    Frag { nodes }
}

/// Commute the root rule of `active` (one premise of the cut) below the cut,
/// when its action does not involve the cut occurrence. `active_is_left`
/// fixes the orientation. Returns None when not applicable.
fn commute_side(
    conclusion: &Sequent,
    phi: &Formula,
    g: usize,
    active: &Frag,
    passive: &Frag,
    cut_idx: usize,
    active_is_left: bool,
) -> Option<Frag> {
    let root = active.nodes[&Vec::new()].clone();
    let rule = root.rule.clone();
    let seq = root.sequent.clone();
    // not applicable when the rule involves the cut occurrence
    match &rule {
        RuleInstance::Open | RuleInstance::One => return None,
        RuleInstance::Exch { index } => {
            if *index == cut_idx || *index + 1 == cut_idx {
                return None; // mere cut permutation
            }
        }
        RuleInstance::Cut { .. } => {}
        _ => {
            if rule.principal() == Some(cut_idx) {
                return None;
            }
        }
    }
    let ancestry = rule_ancestry(&seq, &rule).ok()?;
    // the premise(s) receiving the cut occurrence, and its index there
    let mut dest: Vec<Option<usize>> = vec![None; ancestry.len()];
    for (s, pairs) in ancestry.iter().enumerate() {
        for (f, t, _) in pairs {
            if *f == cut_idx {
                dest[s] = Some(*t);
            }
        }
    }
    // position map from active-premise indices to conclusion indices
    let to_conc = |x: usize| -> usize {
        if active_is_left {
            x // positions < g map to themselves; cut_idx = g excluded
        } else {
            g + x - 1 // right premise position x >= 1 maps to g + x - 1
        }
    };
    // the passive side's context, appended on its side of the conclusion
    let delta: Vec<Formula> = if active_is_left {
        conclusion.0[g..].to_vec()
    } else {
        conclusion.0[..g].to_vec()
    };
    let delta_len = delta.len();

    let hoisted: RuleInstance = match &rule {
        RuleInstance::Top { principal } => RuleInstance::Top {
            principal: to_conc(*principal),
        },
        RuleInstance::Bot { principal } => RuleInstance::Bot {
            principal: to_conc(*principal),
        },
        RuleInstance::Par { principal } => RuleInstance::Par {
            principal: to_conc(*principal),
        },
        RuleInstance::Plus0 { principal } => RuleInstance::Plus0 {
            principal: to_conc(*principal),
        },
        RuleInstance::Plus1 { principal } => RuleInstance::Plus1 {
            principal: to_conc(*principal),
        },
        RuleInstance::Mu { principal } => RuleInstance::Mu {
            principal: to_conc(*principal),
        },
        RuleInstance::Nu { principal } => RuleInstance::Nu {
            principal: to_conc(*principal),
        },
        RuleInstance::With { principal } => RuleInstance::With {
            principal: to_conc(*principal),
        },
        RuleInstance::Exch { index } => RuleInstance::Exch {
            index: to_conc(*index),
        },
        RuleInstance::Tensor {
            principal,
            left_len,
        } => {
            // the cut side absorbs the passive context
            let cut_goes_left = dest[0].is_some();
            let new_left = if active_is_left {
                if cut_goes_left {
                    left_len - 1 + delta_len
                } else {
                    *left_len
                }
            } else if cut_goes_left {
                left_len - 1 + delta_len
            } else {
                *left_len + delta_len
            };
            RuleInstance::Tensor {
                principal: to_conc(*principal),
                left_len: new_left,
            }
        }
        RuleInstance::Cut {
            formula: psi,
            left_len: gc,
        } => {
            let cut_goes_left = dest[0].is_some();
            let new_left = if active_is_left {
                if cut_goes_left {
                    gc - 1 + delta_len
                } else {
                    *gc
                }
            } else if cut_goes_left {
                gc - 1 + delta_len
            } else {
                *gc + delta_len
            };
            RuleInstance::Cut {
                formula: psi.clone(),
                left_len: new_left,
            }
        }
        RuleInstance::One | RuleInstance::Open => unreachable!(),
    };

    let hoisted_premises = rule_premises(conclusion, &hoisted).ok()?;
    let is_with = matches!(rule, RuleInstance::With { .. });
    let mut children = Vec::new();
    for (s, target) in hoisted_premises.iter().enumerate() {
        let sub = frag_child(active, s as u8);
        let child = match dest[s] {
            Some(t) if !is_with => {
                build_inner_cut(target, phi, g, sub, passive.clone(), t, active_is_left)
            }
            None if !is_with => {
                // untouched premise; may still need an exchange chain when the
                // canonical layout reshuffled (it does not, but stay safe)
                exch_chain(target, sub)
            }
            _ => {
                // with: the cut duplicates into both premises
                let t = dest[s].expect("with premises keep the context");
                build_inner_cut(target, phi, g, sub, passive.clone(), t, active_is_left)
            }
        };
        children.push(child);
    }
    Some(Frag::node(conclusion.clone(), hoisted, children))
}

/// The cut pushed into one premise subtree: `sub` proves a sequent holding
/// the cut occurrence at `t`; compose it with `passive` and wrap in the
/// exchange chain reaching `target`.
fn build_inner_cut(
    target: &Sequent,
    phi: &Formula,
    g: usize,
    sub: Frag,
    passive: Frag,
    t: usize,
    active_is_left: bool,
) -> Frag {
    let sub_seq = sub.conclusion().clone();
    if active_is_left {
        // inner conclusion: (sub minus phi at t) ++ passive context
        let mut inner_seq: Vec<Formula> = sub_seq.0.clone();
        inner_seq.remove(t);
        let inner_left = inner_seq.len();
        let passive_ctx: Vec<Formula> = passive.conclusion().0[1..].to_vec();
        inner_seq.extend(passive_ctx);
        let frag = cut_frag(
            Sequent(inner_seq),
            phi.clone(),
            inner_left,
            sub,
            passive,
        );
        exch_chain(target, frag)
    } else {
        // mirrored: passive proves (gamma, phi); inner conclusion:
        // gamma ++ (sub minus neg phi at t)
        let mut inner_seq: Vec<Formula> = passive.conclusion().0[..g].to_vec();
        let mut rest = sub_seq.0.clone();
        rest.remove(t);
        inner_seq.extend(rest);
        let frag = cut_frag(Sequent(inner_seq), phi.clone(), g, passive, sub);
        exch_chain(target, frag)
    }
}

/// Critical reducts: both premise roots principal on the cut occurrences.
fn critical_reduct(
    conclusion: &Sequent,
    phi: &Formula,
    g: usize,
    left: &Frag,
    right: &Frag,
) -> Option<Frag> {
    let lroot = left.nodes[&Vec::new()].clone();
    let rroot = right.nodes[&Vec::new()].clone();
    let l_principal = match &lroot.rule {
        RuleInstance::One => lroot.sequent.len() == 1,
        r => r.principal() == Some(g),
    };
    let r_principal = match &rroot.rule {
        RuleInstance::One => rroot.sequent.len() == 1,
        r => r.principal() == Some(0),
    };
    if !l_principal || !r_principal {
        return None;
    }
    match (&lroot.rule, &rroot.rule) {
        // unit: the cut vanishes entirely
        (RuleInstance::One, RuleInstance::Bot { .. }) => Some(frag_child(right, 0)),
        (RuleInstance::Bot { .. }, RuleInstance::One) => Some(frag_child(left, 0)),
        // fixed points: unfold both sides
        (RuleInstance::Mu { .. }, RuleInstance::Nu { .. })
        | (RuleInstance::Nu { .. }, RuleInstance::Mu { .. }) => {
            let unfolded = crate::formula::unfold_any(phi).expect("cut formula is a fixed point");
            Some(cut_frag(
                conclusion.clone(),
                unfolded,
                g,
                frag_child(left, 0),
                frag_child(right, 0),
            ))
        }
        // tensor against par
        (RuleInstance::Tensor { left_len, .. }, RuleInstance::Par { .. }) => {
            let (a, b) = match phi {
                Formula::Tensor(a, b) => ((**a).clone(), (**b).clone()),
                _ => return None,
            };
            let gt = *left_len;
            let lt = frag_child(left, 0); // gamma_t, a
            let rt = frag_child(left, 1); // delta_t, b
            let pp = frag_child(right, 0); // neg a, neg b, sigma
            // inner: cut on b between rt and (neg b, neg a, sigma)
            let sigma: Vec<Formula> = rroot.sequent.0[1..].to_vec();
            let delta_t: Vec<Formula> = rt.conclusion().0[..rt.conclusion().len() - 1].to_vec();
            let mut inner_seq = delta_t.clone();
            inner_seq.push(negate(&a));
            inner_seq.extend(sigma.clone());
            let inner = cut_frag(Sequent(inner_seq), b, delta_t.len(), rt, pp);
            // outer: cut on a between lt and (neg a, delta_t, sigma)
            Some(cut_frag(conclusion.clone(), a, gt, lt, inner))
        }
        (RuleInstance::Par { .. }, RuleInstance::Tensor { left_len, .. }) => {
            // phi = a par b on the left; the right subtree is the tensor of
            // the duals: neg phi = neg a tensor neg b
            let (a, b) = match phi {
                Formula::Par(a, b) => ((**a).clone(), (**b).clone()),
                _ => return None,
            };
            let pp = frag_child(left, 0); // gamma, a, b
            let lt = frag_child(right, 0); // gamma_t, neg a
            let rt = frag_child(right, 1); // delta_t, neg b
            let gamma: Vec<Formula> = lroot.sequent.0[..g].to_vec();
            let _ = left_len;
            // inner: cut on a between (gamma, a, b) and (neg a, ...) premise
            let lt_ctx: Vec<Formula> = lt.conclusion().0[..lt.conclusion().len() - 1].to_vec();
            let mut inner_seq = gamma.clone();
            inner_seq.push(b.clone());
            inner_seq.extend(lt_ctx);
            let inner = cut_frag(Sequent(inner_seq), a, g + 1, pp, {
                // lt proves (gamma_t, neg a); the right premise of a cut on a
                // must be (neg a, gamma_t): the chain inside cut_frag fixes it
                lt
            });
            // outer: cut on b between inner and rt
            Some(cut_frag(conclusion.clone(), b, g, inner, rt))
        }
        // plus against with
        (RuleInstance::Plus0 { .. }, RuleInstance::With { .. })
        | (RuleInstance::Plus1 { .. }, RuleInstance::With { .. }) => {
            let side = matches!(lroot.rule, RuleInstance::Plus1 { .. }) as u8;
            let (a0, a1) = match phi {
                Formula::Plus(a, b) => ((**a).clone(), (**b).clone()),
                _ => return None,
            };
            let chosen = if side == 0 { a0 } else { a1 };
            Some(cut_frag(
                conclusion.clone(),
                chosen,
                g,
                frag_child(left, 0),
                frag_child(right, side),
            ))
        }
        (RuleInstance::With { .. }, RuleInstance::Plus0 { .. })
        | (RuleInstance::With { .. }, RuleInstance::Plus1 { .. }) => {
            let side = matches!(rroot.rule, RuleInstance::Plus1 { .. }) as u8;
            let (a0, a1) = match phi {
                Formula::With(a, b) => ((**a).clone(), (**b).clone()),
                _ => return None,
            };
            let chosen = if side == 0 { a0 } else { a1 };
            Some(cut_frag(
                conclusion.clone(),
                chosen,
                g,
                frag_child(left, side),
                frag_child(right, 0),
            ))
        }
        _ => None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures;
    use crate::formula::parse_formula;
    use crate::proof::{unfold_to_depth, validate_tree};

    fn opts(budget: usize, depth: usize) -> NormalizeOptions {
        NormalizeOptions {
            budget,
            target_depth: depth,
            auto_wrap: true,
            commute: CommuteSelector::First,
        }
    }

    #[test]
    fn unit_cut_terminates_with_context_prefix() {
        let d = fixtures::unit_cut();
        let run = normalize(
            &d,
            NormalizeOptions {
                auto_wrap: false,
                ..opts(1000, 10)
            },
        )
        .unwrap();
        assert_eq!(run.outcome, RunOutcome::Terminated);
        let prefix = run.normalizer.emit_prefix(10).unwrap();
        assert!(!prefix.contains_cut());
        // the emitted derivation is the Gamma subproof: a single one rule
        assert_eq!(prefix.nodes.len(), 1);
        assert_eq!(prefix.nodes[&vec![]].rule, RuleInstance::One);
    }

    #[test]
    fn id_wrap_of_id_one_recovers_id_one() {
        let d = fixtures::id_one();
        let run = normalize(&d, opts(10_000, 10)).unwrap();
        assert_eq!(run.outcome, RunOutcome::Terminated);
        let prefix = run.normalizer.emit_prefix(10).unwrap();
        let expected = unfold_to_depth(&d, 10).unwrap();
        assert_eq!(prefix, expected);
    }

    #[test]
    fn id_wrap_limits_equal_source_on_cut_free_fixtures() {
        // reducing <d | id, ..., id> recovers d; for cut-free d the full
        // normalizer realizes exactly that limit
        for (name, d) in fixtures::progressing_cut_free() {
            let run = normalize(&d, opts(100_000, 10)).unwrap();
            assert_ne!(
                run.outcome,
                RunOutcome::BudgetExhausted,
                "{name} exhausted its budget"
            );
            let prefix = run.normalizer.emit_prefix(10).unwrap();
            let expected = unfold_to_depth(&d, 10).unwrap();
            assert_eq!(prefix, expected, "{name} prefix mismatch");
            assert!(validate_tree(&prefix).is_valid());
        }
    }

    #[test]
    fn stalled_mu_nu_loop_exhausts_budget() {
        let d = fixtures::examples_left();
        let run = normalize(&d, opts(2000, 10)).unwrap();
        assert_eq!(run.outcome, RunOutcome::BudgetExhausted);
        // the prefix below the multicut never grows: the depth metric stays
        // bounded by a small constant
        let log = depth_metric(&run.events);
        let max = log.iter().copied().max().unwrap();
        assert!(max <= 2, "depth metric should stall, got {max}");
        // the tail is constant
        let tail = &log[log.len() - 100..];
        assert!(tail.iter().all(|d| *d == tail[0]));
    }

    #[test]
    fn emitted_prefixes_are_cut_free_and_valid() {
        for (name, d) in fixtures::progressing() {
            let run = normalize(&d, opts(100_000, 6)).unwrap();
            let prefix = run.normalizer.emit_prefix(6).unwrap();
            assert!(!prefix.contains_cut(), "{name}");
            assert!(validate_tree(&prefix).is_valid(), "{name}");
        }
    }

    #[test]
    fn emit_prefix_before_stability_errors() {
        let d = fixtures::examples_left();
        let run = normalize(&d, opts(500, 10)).unwrap();
        assert!(matches!(
            run.normalizer.emit_prefix(5),
            Err(EmitError::NotStable { .. })
        ));
    }

    #[test]
    fn determinism_of_event_streams() {
        let d = fixtures::cut_progressing();
        let a = normalize(&d, opts(5000, 6)).unwrap();
        let b = normalize(&d, opts(5000, 6)).unwrap();
        assert_eq!(a.events, b.events);
        assert_eq!(a.outcome, b.outcome);
    }

    #[test]
    fn checkpoint_round_trip_resumes() {
        let d = fixtures::examples_left();
        let mut n = Normalizer::new(&d, opts(100, 10)).unwrap();
        let mut first = Vec::new();
        for _ in 0..50 {
            if let Some(e) = n.step().unwrap() {
                first.push(e);
            }
        }
        let snapshot = serde_json::to_string(&n.state()).unwrap();
        let state: NormalizerState = serde_json::from_str(&snapshot).unwrap();
        let mut resumed =
            Normalizer::resume(n.source().clone(), state, opts(100, 10)).unwrap();
        let e1 = n.step().unwrap();
        let e2 = resumed.step().unwrap();
        assert_eq!(e1, e2);
    }

    #[test]
    fn wrap_adds_one_cut_per_conclusion_formula() {
        let d = fixtures::examples_centre(crate::formula::FixKind::Nu);
        let wrapped = wrap_with_identities(&d).unwrap();
        let cuts = wrapped.nodes.values().filter(|n| n.rule.is_cut()).count();
        assert_eq!(cuts, 1);
        let d3 = identity_proof(&parse_formula("(1 + bot) * top").unwrap());
        // conclusion has 2 formulas
        let wrapped = wrap_with_identities(&d3).unwrap();
        let cuts_before = d3.nodes.values().filter(|n| n.rule.is_cut()).count();
        let cuts_after = wrapped.nodes.values().filter(|n| n.rule.is_cut()).count();
        assert_eq!(cuts_after - cuts_before, 2);
    }

    // ---- single-step reduction ----

    fn tree_of(g: &ProofGraph, d: usize) -> FiniteTree {
        unfold_to_depth(g, d).unwrap()
    }

    #[test]
    fn critical_unit_step_eliminates_the_cut() {
        let t = tree_of(&fixtures::unit_cut(), 4);
        let reducts = reduce_step(&t, &vec![]).unwrap();
        // the critical reduct is the bare Gamma subderivation
        let critical = reducts
            .iter()
            .find(|r| !r.contains_cut())
            .expect("unit critical reduct");
        assert_eq!(critical.nodes[&vec![]].rule, RuleInstance::One);
        for r in &reducts {
            assert!(validate_tree(r).is_valid());
            assert_eq!(r.nodes[&vec![]].sequent, t.nodes[&vec![]].sequent);
        }
    }

    #[test]
    fn critical_fix_step_unfolds_both_sides() {
        let t = tree_of(&fixtures::examples_left(), 4);
        let reducts = reduce_step(&t, &vec![]).unwrap();
        assert!(!reducts.is_empty());
        for r in &reducts {
            assert!(validate_tree(r).is_valid(), "{:?}", validate_tree(r));
            assert_eq!(r.nodes[&vec![]].sequent, t.nodes[&vec![]].sequent);
        }
        // some reduct still cuts on the unfolding (= the same formula here)
        let fix = reducts
            .iter()
            .find(|r| matches!(&r.nodes[&vec![]].rule, RuleInstance::Cut { .. }));
        assert!(fix.is_some());
    }

    #[test]
    fn commuting_with_duplicates_the_cut() {
        // build: cut between a with-rule proof and id, where the with is not
        // principal on the cut formula
        let phi = parse_formula("1").unwrap();
        let psi = parse_formula("top & top").unwrap();
        // left: proves (top & top, 1) by with{0} over two top rules
        use crate::proof::{ProofNode, Sequent};
        use std::collections::BTreeMap as M;
        let mut nodes = M::new();
        nodes.insert(
            "w".to_string(),
            ProofNode {
                sequent: Sequent(vec![psi.clone(), phi.clone()]),
                rule: RuleInstance::With { principal: 0 },
                premises: vec!["t0".into(), "t1".into()],
            },
        );
        for id in ["t0", "t1"] {
            nodes.insert(
                id.to_string(),
                ProofNode {
                    sequent: Sequent(vec![Formula::Top, phi.clone()]),
                    rule: RuleInstance::Top { principal: 0 },
                    premises: vec![],
                },
            );
        }
        let left = ProofGraph {
            root: "w".to_string(),
            nodes,
        };
        assert!(validate_local(&left).is_valid());
        let cutg = compose_cut(&left, &[(identity_proof(&phi), phi.clone())]).unwrap();
        let t = tree_of(&cutg, 6);
        let reducts = reduce_step(&t, &vec![]).unwrap();
        let with_reduct = reducts
            .iter()
            .find(|r| matches!(r.nodes[&vec![]].rule, RuleInstance::With { .. }))
            .expect("with commutation");
        // both with-premises contain a cut
        let cuts = with_reduct
            .nodes
            .values()
            .filter(|n| n.rule.is_cut())
            .count();
        assert_eq!(cuts, 2);
        for r in &reducts {
            assert!(validate_tree(r).is_valid());
            assert_eq!(r.nodes[&vec![]].sequent, t.nodes[&vec![]].sequent);
        }
    }

    #[test]
    fn tensor_par_critical_preserves_conclusion() {
        // cut(id(a*b) wrapped): produces tensor/par critical pairs during
        // normalization; here exercise reduce_step on an explicit cut
        let phi = parse_formula("1 * bot").unwrap();
        let id = identity_proof(&phi);
        let cutg = compose_cut(
            &identity_proof(&phi),
            &[(id, phi.clone())],
        )
        .unwrap();
        let t = tree_of(&cutg, 8);
        // root is the composed cut
        let reducts = reduce_step(&t, &vec![]).unwrap();
        assert!(!reducts.is_empty());
        for r in &reducts {
            assert!(
                validate_tree(r).is_valid(),
                "defects: {:?}",
                validate_tree(r).defects
            );
            assert_eq!(r.nodes[&vec![]].sequent, t.nodes[&vec![]].sequent);
        }
    }

    #[test]
    fn reduce_step_errors() {
        let t = tree_of(&fixtures::id_one(), 4);
        assert_eq!(reduce_step(&t, &vec![]).unwrap_err(), ReduceError::NotACut);
        let t = tree_of(&fixtures::examples_left(), 0);
        // depth 0: root is openLeaf, not a cut position with premises
        assert!(matches!(
            reduce_step(&t, &vec![]),
            Err(ReduceError::NotACut) | Err(ReduceError::NeedsMoreDepth)
        ));
        let t = tree_of(&fixtures::examples_left(), 1);
        assert_eq!(
            reduce_step(&t, &vec![]).unwrap_err(),
            ReduceError::NeedsMoreDepth
        );
    }
}
