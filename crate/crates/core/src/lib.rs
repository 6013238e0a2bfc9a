//! Object-level machinery for regular ill-founded muMALL derivations:
//! formulas with fixed points and their Fischer-Ladner structure, cyclic
//! proof graphs with local validation, the progressivity criterion with
//! lasso witnesses, a productive multicut cut-elimination engine, and the
//! coherence / internally-closed-set apparatus at bounded scale.

pub mod cutelim;
pub mod fixtures;
pub mod formula;
pub mod gen;
pub mod icsets;
pub mod progress;
pub mod proof;

pub use formula::{
    fl_closure, fl_closure_with, negate, parse_formula, render_formula, substitute, unfold,
    FixKind, FlClosure, Formula, Parity, TieBreak,
};
pub use proof::{
    compose_cut, export_dot, export_dot_tree, identity_proof, load_proof, rule_premises,
    save_proof, unfold_to_depth, validate_local, validate_tree, FiniteTree, NodeId, Pos,
    ProofGraph, ProofNode, RuleInstance, Sequent, ValidationReport,
};
