//! Hand-encoded figure-level derivations used across the test suites and as
//! CLI examples: the identity cases, the two-loop cut examples, the
//! alternating-context family, and a few small negatives.

use std::collections::BTreeMap;

use crate::formula::{parse_formula, FixKind, Formula};
use crate::proof::{identity_proof, ProofGraph, ProofNode, RuleInstance, Sequent};

fn p(s: &str) -> Formula {
    parse_formula(s).expect("fixture formula parses")
}

fn graph(root: &str, nodes: Vec<(&str, Sequent, RuleInstance, Vec<&str>)>) -> ProofGraph {
    let mut map = BTreeMap::new();
    for (id, sequent, rule, premises) in nodes {
        map.insert(
            id.to_string(),
            ProofNode {
                sequent,
                rule,
                premises: premises.into_iter().map(str::to_string).collect(),
            },
        );
    }
    ProofGraph {
        root: root.to_string(),
        nodes: map,
    }
}

/// id_1: bot rule over one rule, conclusion `bot, 1`.
pub fn id_one() -> ProofGraph {
    identity_proof(&Formula::One)
}

/// id_top: a single top rule, conclusion `0, top`.
pub fn id_top() -> ProofGraph {
    identity_proof(&Formula::Top)
}

/// Left derivation of the two-loop example: a cut between a `Gamma, nu X.X`
/// loop and a `mu X.X` loop, with Gamma = bot. Not progressing: the mu loop
/// branch bears only the bad thread.
pub fn examples_left() -> ProofGraph {
    let nu = p("nu X. X");
    let mu = p("mu X. X");
    graph(
        "root",
        vec![
            (
                "root",
                Sequent(vec![Formula::Bot]),
                RuleInstance::Cut {
                    formula: nu.clone(),
                    left_len: 1,
                },
                vec!["l", "r"],
            ),
            (
                "l",
                Sequent(vec![Formula::Bot, nu]),
                RuleInstance::Nu { principal: 1 },
                vec!["l"],
            ),
            (
                "r",
                Sequent(vec![mu]),
                RuleInstance::Mu { principal: 0 },
                vec!["r"],
            ),
        ],
    )
}

/// Centre derivation: A := sigma X. B(X), B(X) := nu Y (X + Y), a three-rule
/// cycle unfolding A, then B(A), then selecting A again. Progressing exactly
/// when sigma = nu.
pub fn examples_centre(sigma: FixKind) -> ProofGraph {
    let a = match sigma {
        FixKind::Mu => p("mu X. nu Y. (X + Y)"),
        FixKind::Nu => p("nu X. nu Y. (X + Y)"),
    };
    let b_of_a = crate::formula::unfold(sigma, &a).unwrap();
    let unf_b = crate::formula::unfold(FixKind::Nu, &b_of_a).unwrap();
    let sigma_rule = match sigma {
        FixKind::Mu => RuleInstance::Mu { principal: 0 },
        FixKind::Nu => RuleInstance::Nu { principal: 0 },
    };
    graph(
        "t0",
        vec![
            ("t0", Sequent(vec![a]), sigma_rule, vec!["t1"]),
            (
                "t1",
                Sequent(vec![b_of_a]),
                RuleInstance::Nu { principal: 0 },
                vec!["t2"],
            ),
            (
                "t2",
                Sequent(vec![unf_b]),
                RuleInstance::Plus0 { principal: 0 },
                vec!["t0"],
            ),
        ],
    )
}

/// The externally-progressing-but-not-progressing example: a cut between a
/// `nu X.X, nu Y.Y` loop (both fixed points unfold alternately) and a
/// `mu Y.Y` loop that unfolds forever.
pub fn sec3_external() -> ProofGraph {
    let nux = p("nu X. X");
    let nuy = p("nu Y. Y");
    let muy = p("mu Y. Y");
    graph(
        "root",
        vec![
            (
                "root",
                Sequent(vec![nux.clone()]),
                RuleInstance::Cut {
                    formula: nuy.clone(),
                    left_len: 1,
                },
                vec!["l0", "r"],
            ),
            (
                "l0",
                Sequent(vec![nux.clone(), nuy.clone()]),
                RuleInstance::Nu { principal: 0 },
                vec!["l1"],
            ),
            (
                "l1",
                Sequent(vec![nux, nuy]),
                RuleInstance::Nu { principal: 1 },
                vec!["l0"],
            ),
            (
                "r",
                Sequent(vec![muy]),
                RuleInstance::Mu { principal: 0 },
                vec!["r"],
            ),
        ],
    )
}

/// Which occurrences are infinitely often principal in the two-loop family.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum IcCase {
    /// Both cut-formula occurrences are principal at every step.
    BothPrincipal,
    /// Only the nu side is principal; the mu side acts on its context.
    OnlyLeftPrincipal,
    /// Only the mu side is principal; the nu side acts on its context.
    OnlyRightPrincipal,
    /// Neither cut formula is ever principal.
    NeitherPrincipal,
}

/// The four-case family behind the IC-set discussion: a cut between a
/// `nu X.X` branch and a `mu X.X` branch where self-looping contexts absorb
/// the activity in the non-principal cases.
pub fn ic_case(case: IcCase) -> ProofGraph {
    let nu = p("nu X. X");
    let mu = p("mu X. X");
    let nuw = p("nu W. W");
    let nuz = p("nu Z. Z");
    let (left_has_ctx, right_has_ctx) = match case {
        IcCase::BothPrincipal => (false, false),
        IcCase::OnlyLeftPrincipal => (false, true),
        IcCase::OnlyRightPrincipal => (true, false),
        IcCase::NeitherPrincipal => (true, true),
    };
    let mut conclusion = Vec::new();
    if left_has_ctx {
        conclusion.push(nuw.clone());
    }
    if right_has_ctx {
        conclusion.push(nuz.clone());
    }
    let mut nodes = vec![(
        "root",
        Sequent(conclusion),
        RuleInstance::Cut {
            formula: nu.clone(),
            left_len: if left_has_ctx { 1 } else { 0 },
        },
        vec!["l", "r"],
    )];
    if left_has_ctx {
        // rules act on the context nu W.W forever; the cut formula is idle
        nodes.push((
            "l",
            Sequent(vec![nuw, nu.clone()]),
            RuleInstance::Nu { principal: 0 },
            vec!["l"],
        ));
    } else {
        nodes.push((
            "l",
            Sequent(vec![nu.clone()]),
            RuleInstance::Nu { principal: 0 },
            vec!["l"],
        ));
    }
    if right_has_ctx {
        nodes.push((
            "r",
            Sequent(vec![mu, nuz]),
            RuleInstance::Nu { principal: 1 },
            vec!["r"],
        ));
    } else {
        nodes.push((
            "r",
            Sequent(vec![mu]),
            RuleInstance::Mu { principal: 0 },
            vec!["r"],
        ));
    }
    graph("root", nodes)
}

/// The negative remark fixture: `{b, b'}` is an IC set (no internal threads
/// at all), but the only reduction strategy commutes along the left branch
/// forever, so no observed covering ever visits both branches.
pub fn ic_unreachable() -> ProofGraph {
    let nu = p("nu X. X");
    let mu = p("mu X. X");
    let nuz = p("nu Z. Z");
    graph(
        "root",
        vec![
            (
                "root",
                Sequent(vec![nu.clone(), nuz.clone()]),
                RuleInstance::Cut {
                    formula: nu.clone(),
                    left_len: 1,
                },
                vec!["l0", "r"],
            ),
            // the cut formula (index 1) is principal exactly once,
            // then the context copy (index 0) unfolds forever
            (
                "l0",
                Sequent(vec![nu.clone(), nu.clone()]),
                RuleInstance::Nu { principal: 1 },
                vec!["l1"],
            ),
            (
                "l1",
                Sequent(vec![nu.clone(), nu.clone()]),
                RuleInstance::Nu { principal: 0 },
                vec!["l1"],
            ),
            (
                "r",
                Sequent(vec![mu, nuz]),
                RuleInstance::Nu { principal: 1 },
                vec!["r"],
            ),
        ],
    )
}

/// A cut of the one rule against a bot rule over the one rule: terminates
/// under normalization, leaving just the context subderivation.
pub fn unit_cut() -> ProofGraph {
    graph(
        "root",
        vec![
            (
                "root",
                Sequent(vec![Formula::One]),
                RuleInstance::Cut {
                    formula: Formula::One,
                    left_len: 0,
                },
                vec!["one", "b"],
            ),
            ("one", Sequent(vec![Formula::One]), RuleInstance::One, vec![]),
            (
                "b",
                Sequent(vec![Formula::Bot, Formula::One]),
                RuleInstance::Bot { principal: 0 },
                vec!["g"],
            ),
            ("g", Sequent(vec![Formula::One]), RuleInstance::One, vec![]),
        ],
    )
}

/// A progressing derivation that contains a cut: the progressing centre
/// derivation composed against the identity of its conclusion.
pub fn cut_progressing() -> ProofGraph {
    let d = examples_centre(FixKind::Nu);
    let a = d.root_sequent().unwrap().0[0].clone();
    crate::proof::compose_cut(&d, &[(identity_proof(&a), a.clone())]).unwrap()
}

/// Broken back-edge: the companion sequent differs from the expected premise.
pub fn bad_back_edge() -> ProofGraph {
    let mu = p("mu X. X");
    graph(
        "a",
        vec![
            (
                "a",
                Sequent(vec![mu]),
                RuleInstance::Mu { principal: 0 },
                vec!["b"],
            ),
            ("b", Sequent(vec![Formula::One]), RuleInstance::One, vec![]),
        ],
    )
}

/// Every locally valid fixture, labelled, for sweep-style tests.
pub fn all_valid() -> Vec<(&'static str, ProofGraph)> {
    vec![
        ("id_one", id_one()),
        ("id_top", id_top()),
        ("examples_left", examples_left()),
        ("examples_centre_mu", examples_centre(FixKind::Mu)),
        ("examples_centre_nu", examples_centre(FixKind::Nu)),
        ("sec3_external", sec3_external()),
        ("ic_both", ic_case(IcCase::BothPrincipal)),
        ("ic_left", ic_case(IcCase::OnlyLeftPrincipal)),
        ("ic_right", ic_case(IcCase::OnlyRightPrincipal)),
        ("ic_neither", ic_case(IcCase::NeitherPrincipal)),
        ("ic_unreachable", ic_unreachable()),
        ("unit_cut", unit_cut()),
        ("cut_progressing", cut_progressing()),
    ]
}

/// Progressing fixtures without cuts: normalizing their identity wrap
/// recovers them exactly.
pub fn progressing_cut_free() -> Vec<(&'static str, ProofGraph)> {
    vec![
        ("id_one", id_one()),
        ("id_top", id_top()),
        ("examples_centre_nu", examples_centre(FixKind::Nu)),
        ("id_mu", identity_proof(&p("mu X. X"))),
        ("id_tensor", identity_proof(&p("(1 + bot) * top"))),
        ("id_nested", identity_proof(&p("mu X. nu Y. (X + Y)"))),
        ("id_plus", identity_proof(&p("mu X. (1 + X)"))),
    ]
}

/// Progressing fixtures that contain cuts: normalization must stream
/// cut-free prefixes at every depth.
pub fn progressing_with_cuts() -> Vec<(&'static str, ProofGraph)> {
    vec![
        ("unit_cut", unit_cut()),
        ("cut_progressing", cut_progressing()),
        ("cut_tensor_id", {
            let phi = p("1 * bot");
            crate::proof::compose_cut(&identity_proof(&phi), &[(identity_proof(&phi), phi)])
                .unwrap()
        }),
        ("cut_plus_id", {
            let phi = p("mu X. (1 + X)");
            crate::proof::compose_cut(&identity_proof(&phi), &[(identity_proof(&phi), phi)])
                .unwrap()
        }),
    ]
}

/// All progressing fixtures, for productivity sweeps.
pub fn progressing() -> Vec<(&'static str, ProofGraph)> {
    let mut v = progressing_cut_free();
    v.extend(progressing_with_cuts());
    v
}

/// Small closed formulas used by seeded generators and smoke tests.
pub fn formula_pool() -> Vec<Formula> {
    vec![
        p("1"),
        p("bot"),
        p("0"),
        p("top"),
        p("nu X. X"),
        p("mu X. X"),
        p("mu X. (1 + X)"),
        p("nu X. (bot & X)"),
        p("nu X. (X * X)"),
        p("mu X. nu Y. (X + Y)"),
        p("nu Y. Y"),
        p("mu Y. Y"),
        p("nu Z. Z"),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::proof::validate_local;

    #[test]
    fn all_fixtures_are_locally_valid() {
        for (name, g) in all_valid() {
            let report = validate_local(&g);
            assert!(report.is_valid(), "{name}: {:?}", report.defects);
        }
    }

    #[test]
    fn bad_back_edge_has_one_defect() {
        let report = validate_local(&bad_back_edge());
        assert_eq!(report.defects.len(), 1);
    }
}
