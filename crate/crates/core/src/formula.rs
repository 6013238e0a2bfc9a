//! Formula syntax for muMALL with fixed points: negation, substitution,
//! unfolding, the Fischer-Ladner closure and the priority/parity ranks that
//! drive thread classification.
//!
//! Formulas are compared modulo alpha-equivalence throughout: `PartialEq`,
//! `Ord` and `Hash` all go through a canonical de Bruijn rendering, so two
//! formulas that differ only in bound names are the same value for every
//! container in this crate.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

/// A muMALL preformula. Public APIs only ever exchange closed formulas;
/// open subterms appear during recursion (binder bodies).
#[derive(Clone, Debug)]
pub enum Formula {
    Var(String),
    One,
    Bot,
    Zero,
    Top,
    Tensor(Box<Formula>, Box<Formula>),
    Par(Box<Formula>, Box<Formula>),
    Plus(Box<Formula>, Box<Formula>),
    With(Box<Formula>, Box<Formula>),
    Mu(String, Box<Formula>),
    Nu(String, Box<Formula>),
}

/// Which fixed point a binder is.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum FixKind {
    Mu,
    Nu,
}

impl FixKind {
    pub fn dual(self) -> FixKind {
        match self {
            FixKind::Mu => FixKind::Nu,
            FixKind::Nu => FixKind::Mu,
        }
    }
}

/// Parity of a fixed point under the rank encoding: nu is even, mu is odd.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Parity {
    Even,
    Odd,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum FormulaError {
    #[error("expected a {expected:?} formula, found {found}")]
    UnfoldShape { expected: FixKind, found: String },
}

#[derive(Debug, Error, PartialEq, Eq)]
#[error("{message} at offset {offset}")]
pub struct ParseError {
    pub message: String,
    pub offset: usize,
}

impl Formula {
    pub fn tensor(a: Formula, b: Formula) -> Formula {
        Formula::Tensor(Box::new(a), Box::new(b))
    }
    pub fn par(a: Formula, b: Formula) -> Formula {
        Formula::Par(Box::new(a), Box::new(b))
    }
    pub fn plus(a: Formula, b: Formula) -> Formula {
        Formula::Plus(Box::new(a), Box::new(b))
    }
    pub fn with(a: Formula, b: Formula) -> Formula {
        Formula::With(Box::new(a), Box::new(b))
    }
    pub fn mu(x: impl Into<String>, body: Formula) -> Formula {
        Formula::Mu(x.into(), Box::new(body))
    }
    pub fn nu(x: impl Into<String>, body: Formula) -> Formula {
        Formula::Nu(x.into(), Box::new(body))
    }
    pub fn var(x: impl Into<String>) -> Formula {
        Formula::Var(x.into())
    }

    pub fn fix_kind(&self) -> Option<FixKind> {
        match self {
            Formula::Mu(_, _) => Some(FixKind::Mu),
            Formula::Nu(_, _) => Some(FixKind::Nu),
            _ => None,
        }
    }

    pub fn is_fixed_point(&self) -> bool {
        self.fix_kind().is_some()
    }

    /// Free variables.
    pub fn free_vars(&self) -> BTreeSet<String> {
        fn go(f: &Formula, bound: &mut Vec<String>, acc: &mut BTreeSet<String>) {
            match f {
                Formula::Var(x) => {
                    if !bound.iter().any(|b| b == x) {
                        acc.insert(x.clone());
                    }
                }
                Formula::One | Formula::Bot | Formula::Zero | Formula::Top => {}
                Formula::Tensor(a, b)
                | Formula::Par(a, b)
                | Formula::Plus(a, b)
                | Formula::With(a, b) => {
                    go(a, bound, acc);
                    go(b, bound, acc);
                }
                Formula::Mu(x, body) | Formula::Nu(x, body) => {
                    bound.push(x.clone());
                    go(body, bound, acc);
                    bound.pop();
                }
            }
        }
        let mut acc = BTreeSet::new();
        go(self, &mut Vec::new(), &mut acc);
        acc
    }

    pub fn is_closed(&self) -> bool {
        self.free_vars().is_empty()
    }

    /// All variable names appearing anywhere (free, bound or as binders).
    fn all_names(&self, acc: &mut BTreeSet<String>) {
        match self {
            Formula::Var(x) => {
                acc.insert(x.clone());
            }
            Formula::One | Formula::Bot | Formula::Zero | Formula::Top => {}
            Formula::Tensor(a, b)
            | Formula::Par(a, b)
            | Formula::Plus(a, b)
            | Formula::With(a, b) => {
                a.all_names(acc);
                b.all_names(acc);
            }
            Formula::Mu(x, body) | Formula::Nu(x, body) => {
                acc.insert(x.clone());
                body.all_names(acc);
            }
        }
    }

    fn binder_names(&self, acc: &mut BTreeSet<String>) {
        match self {
            Formula::Var(_) | Formula::One | Formula::Bot | Formula::Zero | Formula::Top => {}
            Formula::Tensor(a, b)
            | Formula::Par(a, b)
            | Formula::Plus(a, b)
            | Formula::With(a, b) => {
                a.binder_names(acc);
                b.binder_names(acc);
            }
            Formula::Mu(x, body) | Formula::Nu(x, body) => {
                acc.insert(x.clone());
                body.binder_names(acc);
            }
        }
    }

    /// Canonical alpha-invariant key. Bound variables render as de Bruijn
    /// indices, everything else in unambiguous prefix form.
    pub fn canonical_key(&self) -> String {
        let mut out = String::new();
        self.write_key(&mut Vec::new(), &mut out);
        out
    }

    fn write_key(&self, bound: &mut Vec<String>, out: &mut String) {
        match self {
            Formula::Var(x) => {
                if let Some(i) = bound.iter().rposition(|b| b == x) {
                    out.push('@');
                    out.push_str(&(bound.len() - 1 - i).to_string());
                } else {
                    out.push('?');
                    out.push_str(x);
                    out.push(';');
                }
            }
            Formula::One => out.push('1'),
            Formula::Bot => out.push('b'),
            Formula::Zero => out.push('0'),
            Formula::Top => out.push('t'),
            Formula::Tensor(a, b) => Self::write_bin('*', a, b, bound, out),
            Formula::Par(a, b) => Self::write_bin('@', a, b, bound, out),
            Formula::Plus(a, b) => Self::write_bin('+', a, b, bound, out),
            Formula::With(a, b) => Self::write_bin('&', a, b, bound, out),
            Formula::Mu(x, body) => {
                out.push('m');
                bound.push(x.clone());
                body.write_key(bound, out);
                bound.pop();
            }
            Formula::Nu(x, body) => {
                out.push('n');
                bound.push(x.clone());
                body.write_key(bound, out);
                bound.pop();
            }
        }
    }

    fn write_bin(op: char, a: &Formula, b: &Formula, bound: &mut Vec<String>, out: &mut String) {
        out.push(op);
        out.push('(');
        a.write_key(bound, out);
        out.push(',');
        b.write_key(bound, out);
        out.push(')');
    }

    /// Immediate closed subformulas: children of a binary connective. Binder
    /// bodies are open when the variable occurs and are reached through
    /// unfolding instead.
    fn binary_children(&self) -> Vec<&Formula> {
        match self {
            Formula::Tensor(a, b)
            | Formula::Par(a, b)
            | Formula::Plus(a, b)
            | Formula::With(a, b) => vec![a, b],
            _ => vec![],
        }
    }

    /// Literal (deep) subformula test, alpha-aware, for closed `self`.
    pub fn is_subformula_of(&self, other: &Formula) -> bool {
        if self == other {
            return true;
        }
        match other {
            Formula::Tensor(a, b)
            | Formula::Par(a, b)
            | Formula::Plus(a, b)
            | Formula::With(a, b) => self.is_subformula_of(a) || self.is_subformula_of(b),
            Formula::Mu(_, body) | Formula::Nu(_, body) => {
                // A closed formula can only match a closed subterm, so it is
                // fine to recurse into the open body: open subterms never
                // compare equal to a closed one.
                self.is_open_subterm(body)
            }
            _ => false,
        }
    }

    fn is_open_subterm(&self, other: &Formula) -> bool {
        if other.is_closed() && self == other {
            return true;
        }
        match other {
            Formula::Tensor(a, b)
            | Formula::Par(a, b)
            | Formula::Plus(a, b)
            | Formula::With(a, b) => self.is_open_subterm(a) || self.is_open_subterm(b),
            Formula::Mu(_, body) | Formula::Nu(_, body) => self.is_open_subterm(body),
            _ => false,
        }
    }

    /// Size in syntax-tree nodes.
    pub fn size(&self) -> usize {
        match self {
            Formula::Var(_) | Formula::One | Formula::Bot | Formula::Zero | Formula::Top => 1,
            Formula::Tensor(a, b)
            | Formula::Par(a, b)
            | Formula::Plus(a, b)
            | Formula::With(a, b) => 1 + a.size() + b.size(),
            Formula::Mu(_, body) | Formula::Nu(_, body) => 1 + body.size(),
        }
    }
}

impl PartialEq for Formula {
    fn eq(&self, other: &Self) -> bool {
        self.canonical_key() == other.canonical_key()
    }
}
impl Eq for Formula {}

impl PartialOrd for Formula {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Formula {
    fn cmp(&self, other: &Self) -> Ordering {
        self.canonical_key().cmp(&other.canonical_key())
    }
}
impl std::hash::Hash for Formula {
    fn hash<H: std::hash::Hasher>(&self, state: &mut H) {
        self.canonical_key().hash(state);
    }
}

impl Serialize for Formula {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(&render_formula(self))
    }
}

impl<'de> Deserialize<'de> for Formula {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        parse_formula(&s).map_err(D::Error::custom)
    }
}

// ---------------------------------------------------------------------------
// Negation, substitution, unfolding
// ---------------------------------------------------------------------------

/// Involutive negation. `X^perp = X`, so the function is total on open
/// preformulas even though public callers only pass closed ones.
pub fn negate(f: &Formula) -> Formula {
    match f {
        Formula::Var(x) => Formula::Var(x.clone()),
        Formula::One => Formula::Bot,
        Formula::Bot => Formula::One,
        Formula::Zero => Formula::Top,
        Formula::Top => Formula::Zero,
        Formula::Tensor(a, b) => Formula::par(negate(a), negate(b)),
        Formula::Par(a, b) => Formula::tensor(negate(a), negate(b)),
        Formula::Plus(a, b) => Formula::with(negate(a), negate(b)),
        Formula::With(a, b) => Formula::plus(negate(a), negate(b)),
        Formula::Mu(x, body) => Formula::nu(x.clone(), negate(body)),
        Formula::Nu(x, body) => Formula::mu(x.clone(), negate(body)),
    }
}

/// Capture-avoiding substitution `f[repl/x]`. Binders in `f` clashing with
/// names of `repl` are renamed first so that binder names stay distinct.
pub fn substitute(f: &Formula, x: &str, repl: &Formula) -> Formula {
    let mut taken = BTreeSet::new();
    repl.all_names(&mut taken);
    f.all_names(&mut taken);
    taken.insert(x.to_string());
    let mut repl_binders = BTreeSet::new();
    repl.binder_names(&mut repl_binders);
    subst_go(f, x, repl, &repl_binders, &mut taken)
}

fn fresh_name(base: &str, taken: &mut BTreeSet<String>) -> String {
    let stem = base.split('_').next().unwrap_or(base);
    let mut i = 1usize;
    loop {
        let cand = format!("{stem}_{i}");
        if !taken.contains(&cand) {
            taken.insert(cand.clone());
            return cand;
        }
        i += 1;
    }
}

fn subst_go(
    f: &Formula,
    x: &str,
    repl: &Formula,
    avoid: &BTreeSet<String>,
    taken: &mut BTreeSet<String>,
) -> Formula {
    match f {
        Formula::Var(y) if y == x => repl.clone(),
        Formula::Var(y) => Formula::Var(y.clone()),
        Formula::One => Formula::One,
        Formula::Bot => Formula::Bot,
        Formula::Zero => Formula::Zero,
        Formula::Top => Formula::Top,
        Formula::Tensor(a, b) => Formula::tensor(
            subst_go(a, x, repl, avoid, taken),
            subst_go(b, x, repl, avoid, taken),
        ),
        Formula::Par(a, b) => Formula::par(
            subst_go(a, x, repl, avoid, taken),
            subst_go(b, x, repl, avoid, taken),
        ),
        Formula::Plus(a, b) => Formula::plus(
            subst_go(a, x, repl, avoid, taken),
            subst_go(b, x, repl, avoid, taken),
        ),
        Formula::With(a, b) => Formula::with(
            subst_go(a, x, repl, avoid, taken),
            subst_go(b, x, repl, avoid, taken),
        ),
        Formula::Mu(y, body) | Formula::Nu(y, body) => {
            let is_mu = matches!(f, Formula::Mu(_, _));
            if y == x {
                // x is shadowed here; nothing to substitute below.
                return f.clone();
            }
            let (y1, body1) = if avoid.contains(y) {
                let fresh = fresh_name(y, taken);
                let renamed = subst_go(body, y, &Formula::Var(fresh.clone()), avoid, taken);
                (fresh, renamed)
            } else {
                (y.clone(), (**body).clone())
            };
            let new_body = subst_go(&body1, x, repl, avoid, taken);
            if is_mu {
                Formula::mu(y1, new_body)
            } else {
                Formula::nu(y1, new_body)
            }
        }
    }
}

/// One fixed-point unfolding: `kXf(X)` becomes `f(kXf(X))`.
pub fn unfold(kind: FixKind, f: &Formula) -> Result<Formula, FormulaError> {
    match (kind, f) {
        (FixKind::Mu, Formula::Mu(x, body)) | (FixKind::Nu, Formula::Nu(x, body)) => {
            Ok(substitute(body, x, f))
        }
        _ => Err(FormulaError::UnfoldShape {
            expected: kind,
            found: render_formula(f),
        }),
    }
}

/// Unfold whichever fixed point `f` is.
pub fn unfold_any(f: &Formula) -> Option<Formula> {
    f.fix_kind().map(|k| unfold(k, f).expect("kind matches"))
}

// ---------------------------------------------------------------------------
// Rendering and parsing
// ---------------------------------------------------------------------------

pub fn render_formula(f: &Formula) -> String {
    let mut out = String::new();
    write_formula(f, &mut out);
    out
}

fn write_formula(f: &Formula, out: &mut String) {
    match f {
        Formula::Mu(x, body) => {
            out.push_str("mu ");
            out.push_str(x);
            out.push_str(". ");
            write_formula(body, out);
        }
        Formula::Nu(x, body) => {
            out.push_str("nu ");
            out.push_str(x);
            out.push_str(". ");
            write_formula(body, out);
        }
        _ => write_chain(f, out),
    }
}

fn chain_op(f: &Formula) -> Option<char> {
    match f {
        Formula::Tensor(_, _) => Some('*'),
        Formula::Par(_, _) => Some('@'),
        Formula::Plus(_, _) => Some('+'),
        Formula::With(_, _) => Some('&'),
        _ => None,
    }
}

fn write_chain(f: &Formula, out: &mut String) {
    match chain_op(f) {
        None => write_atom(f, out),
        Some(op) => {
            // Flatten the left-associative spine of identical operators.
            let mut parts: Vec<&Formula> = Vec::new();
            let mut cur = f;
            loop {
                let (l, r) = match cur {
                    Formula::Tensor(l, r)
                    | Formula::Par(l, r)
                    | Formula::Plus(l, r)
                    | Formula::With(l, r) => (l.as_ref(), r.as_ref()),
                    _ => unreachable!(),
                };
                parts.push(r);
                if chain_op(l) == Some(op) {
                    cur = l;
                } else {
                    parts.push(l);
                    break;
                }
            }
            parts.reverse();
            for (i, p) in parts.iter().enumerate() {
                if i > 0 {
                    out.push(' ');
                    out.push(op);
                    out.push(' ');
                }
                write_atom(p, out);
            }
        }
    }
}

fn write_atom(f: &Formula, out: &mut String) {
    match f {
        Formula::Var(x) => out.push_str(x),
        Formula::One => out.push('1'),
        Formula::Bot => out.push_str("bot"),
        Formula::Zero => out.push('0'),
        Formula::Top => out.push_str("top"),
        _ => {
            out.push('(');
            write_formula(f, out);
            out.push(')');
        }
    }
}

impl fmt::Display for Formula {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&render_formula(self))
    }
}

struct Parser<'a> {
    src: &'a [u8],
    pos: usize,
    // first unbound occurrence of each free variable
    free_seen: BTreeMap<String, usize>,
    bound: Vec<String>,
}

/// Parse a closed formula. Open formulas are rejected with the offset of the
/// first unbound variable occurrence.
pub fn parse_formula(text: &str) -> Result<Formula, ParseError> {
    let (f, free) = parse_inner(text)?;
    if let Some((name, off)) = free.into_iter().next() {
        return Err(ParseError {
            message: format!("free variable `{name}` in top-level formula"),
            offset: off,
        });
    }
    Ok(f)
}

/// Parse a possibly open preformula (used by tests and internals).
pub fn parse_preformula(text: &str) -> Result<Formula, ParseError> {
    parse_inner(text).map(|(f, _)| f)
}

fn parse_inner(text: &str) -> Result<(Formula, BTreeMap<String, usize>), ParseError> {
    let mut p = Parser::new(text);
    let f = p.formula()?;
    p.skip_ws();
    if p.pos != p.src.len() {
        return Err(p.err("unexpected trailing input"));
    }
    Ok((f, p.free_seen))
}

impl<'a> Parser<'a> {
    fn new(src: &'a str) -> Self {
        Parser {
            src: src.as_bytes(),
            pos: 0,
            free_seen: BTreeMap::new(),
            bound: Vec::new(),
        }
    }

    fn err(&self, msg: impl Into<String>) -> ParseError {
        ParseError {
            message: msg.into(),
            offset: self.pos,
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

    fn ident(&mut self) -> Option<String> {
        self.skip_ws();
        let start = self.pos;
        let mut end = start;
        if end < self.src.len() && (self.src[end] as char).is_ascii_alphabetic() {
            end += 1;
            while end < self.src.len()
                && ((self.src[end] as char).is_ascii_alphanumeric() || self.src[end] == b'_')
            {
                end += 1;
            }
        }
        if end == start {
            return None;
        }
        self.pos = end;
        Some(String::from_utf8_lossy(&self.src[start..end]).into_owned())
    }

    fn formula(&mut self) -> Result<Formula, ParseError> {
        self.skip_ws();
        let save = self.pos;
        if let Some(word) = self.ident() {
            if word == "mu" || word == "nu" {
                let var = self
                    .ident()
                    .ok_or_else(|| self.err("expected bound variable name"))?;
                self.skip_ws();
                if self.peek() != Some(b'.') {
                    return Err(self.err("expected `.` after bound variable"));
                }
                self.pos += 1;
                self.bound.push(var.clone());
                let body = self.formula()?;
                self.bound.pop();
                return Ok(if word == "mu" {
                    Formula::mu(var, body)
                } else {
                    Formula::nu(var, body)
                });
            }
            self.pos = save;
        }
        self.chain()
    }

    fn chain(&mut self) -> Result<Formula, ParseError> {
        let first = self.atom()?;
        let mut acc = first;
        let mut chain_op: Option<u8> = None;
        loop {
            self.skip_ws();
            let op = match self.peek() {
                Some(c @ (b'*' | b'@' | b'+' | b'&')) => c,
                _ => break,
            };
            match chain_op {
                None => chain_op = Some(op),
                Some(prev) if prev == op => {}
                Some(_) => {
                    return Err(self.err(
                        "mixing distinct operators in one chain requires parentheses",
                    ));
                }
            }
            self.pos += 1;
            let rhs = self.atom()?;
            acc = match op {
                b'*' => Formula::tensor(acc, rhs),
                b'@' => Formula::par(acc, rhs),
                b'+' => Formula::plus(acc, rhs),
                b'&' => Formula::with(acc, rhs),
                _ => unreachable!(),
            };
        }
        Ok(acc)
    }

    fn atom(&mut self) -> Result<Formula, ParseError> {
        self.skip_ws();
        match self.peek() {
            Some(b'1') => {
                self.pos += 1;
                Ok(Formula::One)
            }
            Some(b'0') => {
                self.pos += 1;
                Ok(Formula::Zero)
            }
            Some(b'(') => {
                self.pos += 1;
                let f = self.formula()?;
                self.skip_ws();
                if self.peek() != Some(b')') {
                    return Err(self.err("expected `)`"));
                }
                self.pos += 1;
                Ok(f)
            }
            _ => {
                let off = self.pos;
                match self.ident() {
                    Some(w) if w == "bot" => Ok(Formula::Bot),
                    Some(w) if w == "top" => Ok(Formula::Top),
                    Some(w) if w == "mu" || w == "nu" => {
                        self.pos = off;
                        Err(self.err("fixed-point binder must be parenthesized here"))
                    }
                    Some(w) => {
                        if !self.bound.iter().any(|b| *b == w) {
                            self.free_seen.entry(w.clone()).or_insert(off);
                        }
                        Ok(Formula::Var(w))
                    }
                    None => Err(self.err("expected a formula")),
                }
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Fischer-Ladner closure, preorder and priority ranks
// ---------------------------------------------------------------------------

/// Tie-break used to extend the priority order to a total one. Verdicts of
/// the progressivity machinery are invariant under this choice.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum TieBreak {
    /// Canonical rendering, lexicographically ascending.
    #[default]
    KeyAsc,
    /// Canonical rendering, lexicographically descending.
    KeyDesc,
}

/// The Fischer-Ladner closure of a seed set, with the preorder, its
/// equivalence classes, and total priority ranks on fixed-point members
/// (nu even, mu odd; smaller rank means higher priority).
#[derive(Clone, Debug)]
pub struct FlClosure {
    formulas: Vec<Formula>,
    index: BTreeMap<String, usize>,
    leq: Vec<Vec<bool>>,
    class_of: Vec<usize>,
    rank: BTreeMap<usize, u32>,
}

impl FlClosure {
    pub fn formulas(&self) -> &[Formula] {
        &self.formulas
    }

    pub fn len(&self) -> usize {
        self.formulas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.formulas.is_empty()
    }

    pub fn contains(&self, f: &Formula) -> bool {
        self.index.contains_key(&f.canonical_key())
    }

    fn idx(&self, f: &Formula) -> Option<usize> {
        self.index.get(&f.canonical_key()).copied()
    }

    /// `a` is below `b` in the Fischer-Ladner preorder.
    pub fn fl_leq(&self, a: &Formula, b: &Formula) -> bool {
        match (self.idx(a), self.idx(b)) {
            (Some(i), Some(j)) => self.leq[i][j],
            _ => false,
        }
    }

    pub fn fl_approx(&self, a: &Formula, b: &Formula) -> bool {
        self.fl_leq(a, b) && self.fl_leq(b, a)
    }

    pub fn fl_strictly_below(&self, a: &Formula, b: &Formula) -> bool {
        self.fl_leq(a, b) && !self.fl_leq(b, a)
    }

    pub fn class_id(&self, f: &Formula) -> Option<usize> {
        self.idx(f).map(|i| self.class_of[i])
    }

    /// Priority rank; defined on fixed-point members only.
    pub fn rank(&self, f: &Formula) -> Option<u32> {
        self.idx(f).and_then(|i| self.rank.get(&i).copied())
    }

    pub fn parity(&self, f: &Formula) -> Option<Parity> {
        match f.fix_kind() {
            Some(FixKind::Nu) => Some(Parity::Even),
            Some(FixKind::Mu) => Some(Parity::Odd),
            None => None,
        }
    }

    /// The fixed-point member carrying a given rank.
    pub fn formula_of_rank(&self, rank: u32) -> Option<&Formula> {
        self.rank
            .iter()
            .find(|(_, r)| **r == rank)
            .map(|(i, _)| &self.formulas[*i])
    }

    /// Fixed-point members with their ranks, ordered by rank.
    pub fn ranked_fixed_points(&self) -> Vec<(&Formula, u32)> {
        let mut v: Vec<(&Formula, u32)> = self
            .rank
            .iter()
            .map(|(i, r)| (&self.formulas[*i], *r))
            .collect();
        v.sort_by_key(|(_, r)| *r);
        v
    }
}

/// Saturate a seed set under immediate subformulas and fixed-point
/// unfolding, then compute preorder, classes and ranks.
pub fn fl_closure(seeds: &[Formula]) -> FlClosure {
    fl_closure_with(seeds, TieBreak::KeyAsc)
}

pub fn fl_closure_with(seeds: &[Formula], tie: TieBreak) -> FlClosure {
    for s in seeds {
        debug_assert!(s.is_closed(), "closure seeds must be closed: {s}");
    }
    let mut by_key: BTreeMap<String, Formula> = BTreeMap::new();
    let mut work: Vec<Formula> = seeds.to_vec();
    while let Some(f) = work.pop() {
        let key = f.canonical_key();
        if by_key.contains_key(&key) {
            continue;
        }
        for child in f.binary_children() {
            work.push(child.clone());
        }
        if let Some(unf) = unfold_any(&f) {
            work.push(unf);
        }
        by_key.insert(key, f);
    }

    let formulas: Vec<Formula> = by_key.into_values().collect();
    let index: BTreeMap<String, usize> = formulas
        .iter()
        .enumerate()
        .map(|(i, f)| (f.canonical_key(), i))
        .collect();
    let n = formulas.len();

    // Generating edges of the preorder: deep subformula containment plus one
    // step of unfolding; then the reflexive-transitive closure.
    let mut leq = vec![vec![false; n]; n];
    for i in 0..n {
        leq[i][i] = true;
        for j in 0..n {
            if i != j && formulas[i].is_subformula_of(&formulas[j]) {
                leq[i][j] = true;
            }
        }
    }
    for (j, f) in formulas.iter().enumerate() {
        if let Some(unf) = unfold_any(f) {
            let i = index[&unf.canonical_key()];
            leq[i][j] = true;
        }
    }
    // Floyd-Warshall style closure.
    for k in 0..n {
        for i in 0..n {
            if leq[i][k] {
                for j in 0..n {
                    if leq[k][j] {
                        leq[i][j] = true;
                    }
                }
            }
        }
    }

    // Equivalence classes.
    let mut class_of = vec![usize::MAX; n];
    let mut next_class = 0usize;
    for i in 0..n {
        if class_of[i] != usize::MAX {
            continue;
        }
        for j in i..n {
            if leq[i][j] && leq[j][i] {
                class_of[j] = next_class;
            }
        }
        next_class += 1;
    }

    // Priority ranks on fixed points. `higher(a, b)` = a has higher priority.
    let fixed: Vec<usize> = (0..n).filter(|&i| formulas[i].is_fixed_point()).collect();
    let higher = |a: usize, b: usize| -> bool {
        let strict_below = |x: usize, y: usize| leq[x][y] && !leq[y][x];
        strict_below(b, a)
            || (leq[a][b]
                && leq[b][a]
                && formulas[a] != formulas[b]
                && formulas[a].is_subformula_of(&formulas[b]))
    };
    let mut remaining: Vec<usize> = fixed.clone();
    let mut rank: BTreeMap<usize, u32> = BTreeMap::new();
    let mut last: Option<u32> = None;
    while !remaining.is_empty() {
        let mut pickable: Vec<usize> = remaining
            .iter()
            .copied()
            .filter(|&i| !remaining.iter().any(|&j| j != i && higher(j, i)))
            .collect();
        assert!(
            !pickable.is_empty(),
            "priority relation must be a strict partial order"
        );
        pickable.sort_by(|&a, &b| {
            let (ka, kb) = (formulas[a].canonical_key(), formulas[b].canonical_key());
            match tie {
                TieBreak::KeyAsc => ka.cmp(&kb),
                TieBreak::KeyDesc => kb.cmp(&ka),
            }
        });
        let chosen = pickable[0];
        let want_even = formulas[chosen].fix_kind() == Some(FixKind::Nu);
        let r = match last {
            None => {
                if want_even {
                    0
                } else {
                    1
                }
            }
            Some(prev) => {
                if (prev % 2 == 0) == want_even {
                    prev + 2
                } else {
                    prev + 1
                }
            }
        };
        rank.insert(chosen, r);
        last = Some(r);
        remaining.retain(|&i| i != chosen);
    }

    FlClosure {
        formulas,
        index,
        leq,
        class_of,
        rank,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p(s: &str) -> Formula {
        parse_formula(s).unwrap()
    }

    #[test]
    fn negate_units_and_fixed_points() {
        assert_eq!(negate(&p("nu X. X")), p("mu X. X"));
        assert_eq!(negate(&p("1")), Formula::Bot);
        let f = p("mu X. (X + 1)");
        assert_eq!(negate(&negate(&f)), f);
    }

    #[test]
    fn substitute_direct_and_negation_commutation() {
        let open = parse_preformula("X + Y").unwrap();
        let subst = substitute(&open, "X", &Formula::One);
        assert_eq!(subst, parse_preformula("1 + Y").unwrap());

        let x_only = parse_preformula("X").unwrap();
        let s = substitute(&x_only, "X", &p("nu Y. Y"));
        assert_eq!(negate(&s), p("mu Y. Y"));
    }

    #[test]
    fn substitute_freshens_clashing_binders() {
        // body(mu X. nu Y (X*Y)) [mu X. nu Y (X*Y) / X]
        let phi = p("mu X. nu Y. (X * Y)");
        let body = parse_preformula("nu Y. (X * Y)").unwrap();
        let manual = substitute(&body, "X", &phi);
        let expected = unfold(FixKind::Mu, &phi).unwrap();
        assert_eq!(manual, expected);
        // alpha-shape: nu binder over tensor of the original mu and the bound var
        match &manual {
            Formula::Nu(y, inner) => match inner.as_ref() {
                Formula::Tensor(l, r) => {
                    assert_eq!(**l, phi);
                    assert_eq!(**r, Formula::var(y.clone()));
                }
                other => panic!("unexpected body {other:?}"),
            },
            other => panic!("unexpected shape {other:?}"),
        }
    }

    #[test]
    fn unfold_examples() {
        assert_eq!(unfold(FixKind::Nu, &p("nu X. X")).unwrap(), p("nu X. X"));
        assert_eq!(
            unfold(FixKind::Mu, &p("mu X. (1 + X)")).unwrap(),
            p("1 + (mu X. (1 + X))")
        );
        // A := nu X. B(X), B(X) := nu Y (X + Y); unfold A = B(A)
        let a = p("nu X. nu Y. (X + Y)");
        let unf = unfold(FixKind::Nu, &a).unwrap();
        let b_of_a = Formula::nu("Y", Formula::plus(a.clone(), Formula::var("Y")));
        assert_eq!(unf, b_of_a);
        assert!(unfold(FixKind::Mu, &p("1")).is_err());
    }

    #[test]
    fn closure_examples() {
        assert_eq!(fl_closure(&[p("1")]).formulas(), &[p("1")]);

        let f = p("nu X. (X * X)");
        let c = fl_closure(&[f.clone()]);
        assert_eq!(c.len(), 2);
        assert!(c.contains(&Formula::tensor(f.clone(), f.clone())));

        // paper closure example: phi = mu X. nu Y (X * Y * theta),
        // theta = nu Z (1 + Z), chi = nu Y (phi * Y * theta)
        let theta = p("nu Z. (1 + Z)");
        let phi = p("mu X. nu Y. (X * Y * (nu Z. (1 + Z)))");
        let chi = unfold(FixKind::Mu, &phi).unwrap();
        let c = fl_closure(&[phi.clone()]);
        assert!(c.contains(&chi));
        assert!(c.fl_approx(&chi, &phi));
        assert!(c.fl_strictly_below(&theta, &phi));
    }

    #[test]
    fn closure_saturation_is_idempotent() {
        let seeds = vec![p("mu X. nu Y. (X * Y)"), p("nu Z. (1 + Z)")];
        let c = fl_closure(&seeds);
        let again = fl_closure(&c.formulas().to_vec());
        assert_eq!(c.len(), again.len());
    }

    #[test]
    fn priority_ranks_respect_parity_and_order() {
        // A := nu X. B(X), B(X) := nu Y (X + Y): A is a subformula of B(A),
        // both in one class, so A gets the smaller rank.
        let a = p("nu X. nu Y. (X + Y)");
        let b_of_a = unfold(FixKind::Nu, &a).unwrap();
        let c = fl_closure(&[a.clone()]);
        let (ra, rb) = (c.rank(&a).unwrap(), c.rank(&b_of_a).unwrap());
        assert!(ra < rb);
        assert_eq!(ra % 2, 0);
        assert_eq!(rb % 2, 0);

        let m = p("mu X. X");
        let c = fl_closure(&[m.clone()]);
        assert_eq!(c.rank(&m).unwrap() % 2, 1);
    }

    #[test]
    fn parse_and_render_round_trip() {
        for s in [
            "mu X. nu Y. (X * Y)",
            "1 + bot",
            "top & (0 + 1)",
            "(1 * 1) @ bot",
            "nu X. (X + (mu Y. Y))",
        ] {
            let f = p(s);
            assert_eq!(parse_formula(&render_formula(&f)).unwrap(), f);
        }
        assert_eq!(p("mu X. nu Y. (X * Y)"),
            Formula::mu("X", Formula::nu("Y", Formula::tensor(Formula::var("X"), Formula::var("Y")))));
        assert_eq!(p("1 + bot"), Formula::plus(Formula::One, Formula::Bot));
    }

    #[test]
    fn parse_errors() {
        let e = parse_formula("(a & b").unwrap_err();
        assert_eq!(e.offset, 6);
        assert!(parse_formula("1 + 1 * 1").is_err());
        let e = parse_formula("X + 1").unwrap_err();
        assert!(e.message.contains("free variable"));
    }
}
