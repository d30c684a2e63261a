//! Process terms and the name discipline.
//!
//! Names are partitioned into finitely many canonical classes: a canonical
//! name is the pair (base identifier, binding-site index) fixed at parse
//! time. Alpha-conversion only bumps the `variant` counter, so a renamed
//! binder stays in its class and analysis results keep referring to it.

use std::collections::BTreeSet;
use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};

/// What a name stands for. Channel and resource spaces are disjoint;
/// variables are introduced by input binders, everything else is a constant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum NameKind {
    ChannelName,
    ChannelVar,
    ResourceName,
    ResourceVar,
}

impl NameKind {
    pub fn is_resource(self) -> bool {
        matches!(self, NameKind::ResourceName | NameKind::ResourceVar)
    }

    pub fn is_channel(self) -> bool {
        !self.is_resource()
    }

    /// Kind class used by substitution: channels may only be replaced by
    /// channels, resources by resources.
    fn class(self) -> u8 {
        if self.is_resource() {
            1
        } else {
            0
        }
    }
}

/// A channel or resource name.
///
/// `base` and `site` together form the canonical name; `variant` is the
/// alpha-conversion counter (0 for names as written in the source).
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Name {
    pub base: Arc<str>,
    pub site: u32,
    pub variant: u32,
    pub kind: NameKind,
}

impl Name {
    pub fn channel(base: &str) -> Self {
        Name { base: base.into(), site: 0, variant: 0, kind: NameKind::ChannelName }
    }

    pub fn resource(base: &str) -> Self {
        Name { base: base.into(), site: 0, variant: 0, kind: NameKind::ResourceName }
    }

    pub fn var(base: &str, site: u32, kind: NameKind) -> Self {
        Name { base: base.into(), site, variant: 0, kind }
    }

    /// Identity of the equivalence class this name belongs to.
    pub fn canonical(&self) -> (Arc<str>, u32) {
        (self.base.clone(), self.site)
    }

    pub fn same_canonical(&self, other: &Name) -> bool {
        self.site == other.site && self.base == other.base
    }

    /// Display form; alpha-variants get a `__n` suffix, which is still a
    /// legal identifier so printed terms re-parse.
    pub fn display(&self) -> String {
        if self.variant == 0 {
            self.base.to_string()
        } else {
            format!("{}__{}", self.base, self.variant)
        }
    }

    /// Stable textual key for the canonical class, used in reports.
    pub fn canonical_key(&self) -> String {
        if self.site == 0 {
            self.base.to_string()
        } else {
            format!("{}@{}", self.base, self.site)
        }
    }

    fn with_variant(&self, variant: u32) -> Name {
        Name { variant, ..self.clone() }
    }
}

impl fmt::Display for Name {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.kind.is_resource() {
            write!(f, "#{}", self.display())
        } else {
            write!(f, "{}", self.display())
        }
    }
}

/// An access action symbol (element of the action alphabet).
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ActionName(pub Arc<str>);

impl ActionName {
    pub fn new(s: &str) -> Self {
        ActionName(s.into())
    }
}

impl fmt::Display for ActionName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Label attached to a resource boundary or request point.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct BoundaryLabel(pub Arc<str>);

impl BoundaryLabel {
    pub fn new(s: &str) -> Self {
        BoundaryLabel(s.into())
    }
}

impl fmt::Display for BoundaryLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Bookkeeping actions that the analysis weaves into traces. They never
/// appear in source terms and are transparent to policies.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum SpecialAction {
    /// Resource acquired by the process labelled chi.
    In(BoundaryLabel),
    /// Resource released by the process labelled chi.
    Out(BoundaryLabel),
    /// Resource taken away from the process labelled chi after a violation.
    ErrOut(BoundaryLabel),
}

impl fmt::Display for SpecialAction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SpecialAction::In(l) => write!(f, "in({l})"),
            SpecialAction::Out(l) => write!(f, "out({l})"),
            SpecialAction::ErrOut(l) => write!(f, "err_out({l})"),
        }
    }
}

/// One event of a resource trace.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Event {
    Act(ActionName),
    Rel,
    Special(SpecialAction),
}

impl Event {
    pub fn is_special(&self) -> bool {
        matches!(self, Event::Special(_))
    }
}

impl fmt::Display for Event {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Event::Act(a) => write!(f, "{a}"),
            Event::Rel => write!(f, "rel"),
            Event::Special(s) => write!(f, "{s}"),
        }
    }
}

/// A resource state: the sequence of actions performed on it so far.
#[derive(Debug, Clone, Default, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Trace(pub Vec<Event>);

impl Trace {
    pub fn empty() -> Self {
        Trace(Vec::new())
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn pushed(&self, ev: Event) -> Trace {
        let mut v = self.0.clone();
        v.push(ev);
        Trace(v)
    }

    /// Drop the special actions; what remains is a runtime trace.
    pub fn dynamic_projection(&self) -> Trace {
        Trace(self.0.iter().filter(|e| !e.is_special()).cloned().collect())
    }

    pub fn from_actions(names: &[&str]) -> Trace {
        Trace(names.iter().map(|n| Event::Act(ActionName::new(n))).collect())
    }
}

impl fmt::Display for Trace {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.0.is_empty() {
            return write!(f, "eps");
        }
        for (i, ev) in self.0.iter().enumerate() {
            if i > 0 {
                write!(f, ".")?;
            }
            write!(f, "{ev}")?;
        }
        Ok(())
    }
}

/// Symbolic reference to a policy, resolved against a policy table.
pub type PolicyRef = Arc<str>;

/// Action prefixes.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Prefix {
    Tau,
    /// Input `x(w)`: late binding, `w` is a channel or resource variable.
    Input(Name, Name),
    /// Output `x<v>`.
    Output(Name, Name),
    /// Access action `alpha(r)`.
    Access(ActionName, Name),
    /// Release `rel(r)`.
    Release(Name),
}

impl Prefix {
    fn fmt_with(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Prefix::Tau => write!(f, "tau"),
            Prefix::Input(x, w) => write!(f, "{}({})", x.display(), w),
            Prefix::Output(x, v) => write!(f, "{}<{}>", x.display(), v),
            Prefix::Access(a, r) => write!(f, "{a}({r})"),
            Prefix::Release(r) => write!(f, "rel({r})"),
        }
    }
}

/// A process term. Nodes are shared through `Arc`, so cloning is cheap and
/// terms are safe to use from several explorer workers at once.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Term {
    Nil,
    Prefix(Prefix, Arc<Term>),
    /// Channel-name restriction; never binds resources.
    Restrict(Name, Arc<Term>),
    Choice(Arc<Term>, Arc<Term>),
    Par(Arc<Term>, Arc<Term>),
    Boundary(Boundary),
    Request(Request),
    /// Replication with an optional remaining-copies budget. `None` means
    /// unbudgeted (as parsed); exploration stamps budgets first.
    Replicate(Arc<Term>, Option<u32>),
}

/// Resource joint point `(r, phi, eta){ P }`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Boundary {
    pub resource: Name,
    pub policy: PolicyRef,
    pub state: Trace,
    /// Label given to the enclosed sub-process in the source text.
    pub label: Option<BoundaryLabel>,
    /// Labels of the request points that have entered this scope, oldest
    /// first. Empty for source terms.
    pub entered: Vec<BoundaryLabel>,
    pub body: Arc<Term>,
}

/// Resource request point `req(r){ P }`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Request {
    pub resource: Name,
    pub label: Option<BoundaryLabel>,
    pub body: Arc<Term>,
}

impl Boundary {
    /// An available resource encloses the empty process.
    pub fn is_available(&self) -> bool {
        matches!(*self.body, Term::Nil)
    }

    /// The label sequence the analysis associates with this scope: the entry
    /// history followed by the source label naming the original occupant.
    pub fn scope_labels(&self) -> Vec<BoundaryLabel> {
        let mut s = self.entered.clone();
        if let Some(l) = &self.label {
            s.push(l.clone());
        }
        s
    }
}

impl Term {
    pub fn nil() -> Arc<Term> {
        Arc::new(Term::Nil)
    }

    pub fn prefix(p: Prefix, k: Arc<Term>) -> Arc<Term> {
        Arc::new(Term::Prefix(p, k))
    }

    pub fn restrict(n: Name, body: Arc<Term>) -> Arc<Term> {
        Arc::new(Term::Restrict(n, body))
    }

    pub fn choice(l: Arc<Term>, r: Arc<Term>) -> Arc<Term> {
        Arc::new(Term::Choice(l, r))
    }

    pub fn par(l: Arc<Term>, r: Arc<Term>) -> Arc<Term> {
        Arc::new(Term::Par(l, r))
    }

    pub fn replicate(body: Arc<Term>, budget: Option<u32>) -> Arc<Term> {
        Arc::new(Term::Replicate(body, budget))
    }

    pub fn boundary(
        resource: Name,
        policy: &str,
        state: Trace,
        label: Option<BoundaryLabel>,
        body: Arc<Term>,
    ) -> Arc<Term> {
        Arc::new(Term::Boundary(Boundary {
            resource,
            policy: policy.into(),
            state,
            label,
            entered: Vec::new(),
            body,
        }))
    }

    pub fn request(resource: Name, label: Option<BoundaryLabel>, body: Arc<Term>) -> Arc<Term> {
        Arc::new(Term::Request(Request { resource, label, body }))
    }

    pub fn size(&self) -> usize {
        match self {
            Term::Nil => 1,
            Term::Prefix(_, k) => 1 + k.size(),
            Term::Restrict(_, b) | Term::Replicate(b, _) => 1 + b.size(),
            Term::Choice(l, r) | Term::Par(l, r) => 1 + l.size() + r.size(),
            Term::Boundary(b) => 1 + b.body.size(),
            Term::Request(r) => 1 + r.body.size(),
        }
    }
}

/// Free names of a term. Resource names in boundary, request, access and
/// release positions are free unless an enclosing input binds them.
pub fn free_names(t: &Term) -> BTreeSet<Name> {
    let mut out = BTreeSet::new();
    collect_free(t, &mut Vec::new(), &mut out);
    out
}

fn collect_free(t: &Term, bound: &mut Vec<Name>, out: &mut BTreeSet<Name>) {
    let mut note = |n: &Name, bound: &Vec<Name>, out: &mut BTreeSet<Name>| {
        if !bound.contains(n) {
            out.insert(n.clone());
        }
    };
    match t {
        Term::Nil => {}
        Term::Prefix(p, k) => {
            match p {
                Prefix::Tau => {}
                Prefix::Input(x, w) => {
                    note(x, bound, out);
                    bound.push(w.clone());
                    collect_free(k, bound, out);
                    bound.pop();
                    return;
                }
                Prefix::Output(x, v) => {
                    note(x, bound, out);
                    note(v, bound, out);
                }
                Prefix::Access(_, r) => note(r, bound, out),
                Prefix::Release(r) => note(r, bound, out),
            }
            collect_free(k, bound, out);
        }
        Term::Restrict(n, b) => {
            bound.push(n.clone());
            collect_free(b, bound, out);
            bound.pop();
        }
        Term::Choice(l, r) | Term::Par(l, r) => {
            collect_free(l, bound, out);
            collect_free(r, bound, out);
        }
        Term::Boundary(b) => {
            note(&b.resource, bound, out);
            collect_free(&b.body, bound, out);
        }
        Term::Request(r) => {
            note(&r.resource, bound, out);
            collect_free(&r.body, bound, out);
        }
        Term::Replicate(b, _) => collect_free(b, bound, out),
    }
}

/// Largest alpha-variant counter in use for `canonical` anywhere in `t`.
fn max_variant(t: &Term, canonical: &Name, acc: &mut u32) {
    let mut see = |n: &Name, acc: &mut u32| {
        if n.same_canonical(canonical) {
            *acc = (*acc).max(n.variant);
        }
    };
    match t {
        Term::Nil => {}
        Term::Prefix(p, k) => {
            match p {
                Prefix::Tau => {}
                Prefix::Input(x, w) => {
                    see(x, acc);
                    see(w, acc);
                }
                Prefix::Output(x, v) => {
                    see(x, acc);
                    see(v, acc);
                }
                Prefix::Access(_, r) | Prefix::Release(r) => see(r, acc),
            }
            max_variant(k, canonical, acc);
        }
        Term::Restrict(n, b) => {
            see(n, acc);
            max_variant(b, canonical, acc);
        }
        Term::Choice(l, r) | Term::Par(l, r) => {
            max_variant(l, canonical, acc);
            max_variant(r, canonical, acc);
        }
        Term::Boundary(b) => {
            see(&b.resource, acc);
            max_variant(&b.body, canonical, acc);
        }
        Term::Request(r) => {
            see(&r.resource, acc);
            max_variant(&r.body, canonical, acc);
        }
        Term::Replicate(b, _) => max_variant(b, canonical, acc),
    }
}

/// Pick a fresh alpha-variant of `binder`, unused in any of `around`.
pub(crate) fn fresh_variant(binder: &Name, around: &[&Term]) -> Name {
    let mut m = binder.variant;
    for t in around {
        max_variant(t, binder, &mut m);
    }
    binder.with_variant(m + 1)
}

/// Capture-avoiding substitution of `to` for `from`.
///
/// `from` and `to` must belong to the same kind class; a resource variable
/// may be replaced by a resource name.
pub fn substitute(t: &Arc<Term>, from: &Name, to: &Name) -> Result<Arc<Term>> {
    if from.kind.class() != to.kind.class() {
        return Err(Error::KindMismatch { from: from.to_string(), to: to.to_string() });
    }
    Ok(subst(t, from, to))
}

fn subst(t: &Arc<Term>, from: &Name, to: &Name) -> Arc<Term> {
    let rn = |n: &Name| if n == from { to.clone() } else { n.clone() };
    match &**t {
        Term::Nil => t.clone(),
        Term::Prefix(p, k) => match p {
            Prefix::Input(x, w) => {
                if w == from {
                    // binder shadows the substituted name
                    let x2 = rn(x);
                    if &x2 == x {
                        t.clone()
                    } else {
                        Term::prefix(Prefix::Input(x2, w.clone()), k.clone())
                    }
                } else if w == to {
                    // rename the binder so the incoming name is not captured
                    let w2 = fresh_variant(w, &[k, t]);
                    let k2 = subst(k, w, &w2);
                    Term::prefix(Prefix::Input(rn(x), w2), subst(&k2, from, to))
                } else {
                    Term::prefix(Prefix::Input(rn(x), w.clone()), subst(k, from, to))
                }
            }
            Prefix::Tau => Term::prefix(Prefix::Tau, subst(k, from, to)),
            Prefix::Output(x, v) => Term::prefix(Prefix::Output(rn(x), rn(v)), subst(k, from, to)),
            Prefix::Access(a, r) => Term::prefix(Prefix::Access(a.clone(), rn(r)), subst(k, from, to)),
            Prefix::Release(r) => Term::prefix(Prefix::Release(rn(r)), subst(k, from, to)),
        },
        Term::Restrict(n, b) => {
            if n == from {
                t.clone()
            } else if n == to {
                let n2 = fresh_variant(n, &[b, t]);
                let b2 = subst(b, n, &n2);
                Term::restrict(n2, subst(&b2, from, to))
            } else {
                Term::restrict(n.clone(), subst(b, from, to))
            }
        }
        Term::Choice(l, r) => Term::choice(subst(l, from, to), subst(r, from, to)),
        Term::Par(l, r) => Term::par(subst(l, from, to), subst(r, from, to)),
        Term::Boundary(b) => Arc::new(Term::Boundary(Boundary {
            resource: rn(&b.resource),
            body: subst(&b.body, from, to),
            ..b.clone()
        })),
        Term::Request(r) => Arc::new(Term::Request(Request {
            resource: rn(&r.resource),
            label: r.label.clone(),
            body: subst(&r.body, from, to),
        })),
        Term::Replicate(b, budget) => Term::replicate(subst(b, from, to), *budget),
    }
}

/// Give every boundary and request node a unique label, keeping labels that
/// are already present. Idempotent on fully labeled terms.
pub fn label_boundaries(t: &Arc<Term>) -> Result<Arc<Term>> {
    let mut used = BTreeSet::new();
    collect_labels(t, &mut used)?;
    let mut next = 0u32;
    let mut fresh = move |used: &mut BTreeSet<Arc<str>>| loop {
        next += 1;
        let cand: Arc<str> = format!("l{next}").into();
        if used.insert(cand.clone()) {
            return BoundaryLabel(cand);
        }
    };
    Ok(assign_labels(t, &mut used, &mut fresh))
}

fn collect_labels(t: &Term, used: &mut BTreeSet<Arc<str>>) -> Result<()> {
    match t {
        Term::Nil => Ok(()),
        Term::Prefix(_, k) => collect_labels(k, used),
        Term::Restrict(_, b) | Term::Replicate(b, _) => collect_labels(b, used),
        Term::Choice(l, r) | Term::Par(l, r) => {
            collect_labels(l, used)?;
            collect_labels(r, used)
        }
        Term::Boundary(b) => {
            if let Some(l) = &b.label {
                if !used.insert(l.0.clone()) {
                    return Err(Error::DuplicateLabel(l.0.to_string()));
                }
            }
            collect_labels(&b.body, used)
        }
        Term::Request(r) => {
            if let Some(l) = &r.label {
                if !used.insert(l.0.clone()) {
                    return Err(Error::DuplicateLabel(l.0.to_string()));
                }
            }
            collect_labels(&r.body, used)
        }
    }
}

fn assign_labels(
    t: &Arc<Term>,
    used: &mut BTreeSet<Arc<str>>,
    fresh: &mut impl FnMut(&mut BTreeSet<Arc<str>>) -> BoundaryLabel,
) -> Arc<Term> {
    match &**t {
        Term::Nil => t.clone(),
        Term::Prefix(p, k) => Term::prefix(p.clone(), assign_labels(k, used, fresh)),
        Term::Restrict(n, b) => Term::restrict(n.clone(), assign_labels(b, used, fresh)),
        Term::Choice(l, r) => {
            Term::choice(assign_labels(l, used, fresh), assign_labels(r, used, fresh))
        }
        Term::Par(l, r) => Term::par(assign_labels(l, used, fresh), assign_labels(r, used, fresh)),
        Term::Boundary(b) => {
            let label = b.label.clone().unwrap_or_else(|| fresh(used));
            Arc::new(Term::Boundary(Boundary {
                label: Some(label),
                body: assign_labels(&b.body, used, fresh),
                ..b.clone()
            }))
        }
        Term::Request(r) => {
            let label = r.label.clone().unwrap_or_else(|| fresh(used));
            Arc::new(Term::Request(Request {
                resource: r.resource.clone(),
                label: Some(label),
                body: assign_labels(&r.body, used, fresh),
            }))
        }
        Term::Replicate(b, budget) => Term::replicate(assign_labels(b, used, fresh), *budget),
    }
}

/// Erase all boundary and request labels.
pub fn strip_labels(t: &Arc<Term>) -> Arc<Term> {
    match &**t {
        Term::Nil => t.clone(),
        Term::Prefix(p, k) => Term::prefix(p.clone(), strip_labels(k)),
        Term::Restrict(n, b) => Term::restrict(n.clone(), strip_labels(b)),
        Term::Choice(l, r) => Term::choice(strip_labels(l), strip_labels(r)),
        Term::Par(l, r) => Term::par(strip_labels(l), strip_labels(r)),
        Term::Boundary(b) => Arc::new(Term::Boundary(Boundary {
            label: None,
            body: strip_labels(&b.body),
            ..b.clone()
        })),
        Term::Request(r) => Arc::new(Term::Request(Request {
            resource: r.resource.clone(),
            label: None,
            body: strip_labels(&r.body),
        })),
        Term::Replicate(b, budget) => Term::replicate(strip_labels(b), *budget),
    }
}

/// Whether every boundary and request node carries a label.
pub fn fully_labeled(t: &Term) -> bool {
    match t {
        Term::Nil => true,
        Term::Prefix(_, k) => fully_labeled(k),
        Term::Restrict(_, b) | Term::Replicate(b, _) => fully_labeled(b),
        Term::Choice(l, r) | Term::Par(l, r) => fully_labeled(l) && fully_labeled(r),
        Term::Boundary(b) => (b.label.is_some() || !b.entered.is_empty()) && fully_labeled(&b.body),
        Term::Request(r) => r.label.is_some() && fully_labeled(&r.body),
    }
}

/// Whether every body under a boundary or request node conforms to the
/// sequential sub-grammar the analysis handles: nil, restriction, prefixing,
/// choice, nested scopes, requests, and an available resource in parallel
/// with a sequential process.
pub fn is_sequential(t: &Term) -> bool {
    match t {
        Term::Nil => true,
        Term::Prefix(_, k) => is_sequential(k),
        Term::Restrict(_, b) | Term::Replicate(b, _) => is_sequential(b),
        Term::Choice(l, r) | Term::Par(l, r) => is_sequential(l) && is_sequential(r),
        Term::Boundary(b) => seq_body(&b.body),
        Term::Request(r) => seq_body(&r.body),
    }
}

fn seq_body(t: &Term) -> bool {
    match t {
        Term::Nil => true,
        Term::Prefix(_, k) => seq_body(k),
        Term::Restrict(_, b) => seq_body(b),
        Term::Choice(l, r) => seq_body(l) && seq_body(r),
        Term::Boundary(b) => seq_body(&b.body),
        Term::Request(r) => seq_body(&r.body),
        Term::Par(_, _) => {
            // flatten and demand at most one non-available component
            let mut children = Vec::new();
            par_children(t, &mut children);
            let mut live = 0;
            for c in &children {
                match c {
                    Term::Boundary(b) if b.is_available() => {}
                    other => {
                        live += 1;
                        if !seq_body(other) {
                            return false;
                        }
                    }
                }
            }
            live <= 1
        }
        Term::Replicate(_, _) => false,
    }
}

fn par_children<'a>(t: &'a Term, out: &mut Vec<&'a Term>) {
    match t {
        Term::Par(l, r) => {
            par_children(l, out);
            par_children(r, out);
        }
        other => out.push(other),
    }
}

/// Structural equality up to consistent renaming of bound names.
pub fn alpha_eq(a: &Term, b: &Term) -> bool {
    alpha_walk(a, b, &mut Vec::new())
}

fn alpha_name(n: &Name, m: &Name, pairs: &[(Name, Name)]) -> bool {
    for (x, y) in pairs.iter().rev() {
        let lx = x == n;
        let ly = y == m;
        if lx || ly {
            return lx && ly;
        }
    }
    n == m
}

fn alpha_walk(a: &Term, b: &Term, pairs: &mut Vec<(Name, Name)>) -> bool {
    match (a, b) {
        (Term::Nil, Term::Nil) => true,
        (Term::Prefix(pa, ka), Term::Prefix(pb, kb)) => match (pa, pb) {
            (Prefix::Tau, Prefix::Tau) => alpha_walk(ka, kb, pairs),
            (Prefix::Input(xa, wa), Prefix::Input(xb, wb)) => {
                if !alpha_name(xa, xb, pairs) || wa.kind != wb.kind {
                    return false;
                }
                pairs.push((wa.clone(), wb.clone()));
                let ok = alpha_walk(ka, kb, pairs);
                pairs.pop();
                ok
            }
            (Prefix::Output(xa, va), Prefix::Output(xb, vb)) => {
                alpha_name(xa, xb, pairs) && alpha_name(va, vb, pairs) && alpha_walk(ka, kb, pairs)
            }
            (Prefix::Access(aa, ra), Prefix::Access(ab, rb)) => {
                aa == ab && alpha_name(ra, rb, pairs) && alpha_walk(ka, kb, pairs)
            }
            (Prefix::Release(ra), Prefix::Release(rb)) => {
                alpha_name(ra, rb, pairs) && alpha_walk(ka, kb, pairs)
            }
            _ => false,
        },
        (Term::Restrict(na, ba), Term::Restrict(nb, bb)) => {
            pairs.push((na.clone(), nb.clone()));
            let ok = alpha_walk(ba, bb, pairs);
            pairs.pop();
            ok
        }
        (Term::Choice(la, ra), Term::Choice(lb, rb)) | (Term::Par(la, ra), Term::Par(lb, rb)) => {
            alpha_walk(la, lb, pairs) && alpha_walk(ra, rb, pairs)
        }
        (Term::Boundary(ba), Term::Boundary(bb)) => {
            alpha_name(&ba.resource, &bb.resource, pairs)
                && ba.policy == bb.policy
                && ba.state == bb.state
                && ba.label == bb.label
                && ba.entered == bb.entered
                && alpha_walk(&ba.body, &bb.body, pairs)
        }
        (Term::Request(ra), Term::Request(rb)) => {
            alpha_name(&ra.resource, &rb.resource, pairs)
                && ra.label == rb.label
                && alpha_walk(&ra.body, &rb.body, pairs)
        }
        (Term::Replicate(ba, na), Term::Replicate(bb, nb)) => na == nb && alpha_walk(ba, bb, pairs),
        _ => false,
    }
}

/// Resource names declared anywhere in the term (boundaries, requests,
/// accesses, releases).
pub fn declared_resources(t: &Term) -> BTreeSet<Name> {
    let mut out = BTreeSet::new();
    declared_rec(t, &mut out);
    out
}

fn declared_rec(t: &Term, out: &mut BTreeSet<Name>) {
    match t {
        Term::Nil => {}
        Term::Prefix(p, k) => {
            match p {
                Prefix::Access(_, r) | Prefix::Release(r) if r.kind == NameKind::ResourceName => {
                    out.insert(r.clone());
                }
                _ => {}
            }
            declared_rec(k, out);
        }
        Term::Restrict(_, b) | Term::Replicate(b, _) => declared_rec(b, out),
        Term::Choice(l, r) | Term::Par(l, r) => {
            declared_rec(l, out);
            declared_rec(r, out);
        }
        Term::Boundary(b) => {
            if b.resource.kind == NameKind::ResourceName {
                out.insert(b.resource.clone());
            }
            declared_rec(&b.body, out);
        }
        Term::Request(r) => {
            if r.resource.kind == NameKind::ResourceName {
                out.insert(r.resource.clone());
            }
            declared_rec(&r.body, out);
        }
    }
}

impl fmt::Display for Term {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        crate::parser::fmt_term(self, f)
    }
}

impl Prefix {
    pub(crate) fn fmt_display(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.fmt_with(f)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn req_hard(res: &Name) -> Arc<Term> {
        Term::request(
            res.clone(),
            None,
            Term::prefix(Prefix::Access(ActionName::new("hard_hit"), res.clone()), Term::nil()),
        )
    }

    #[test]
    fn free_names_of_nil_is_empty() {
        assert!(free_names(&Term::Nil).is_empty());
    }

    #[test]
    fn free_names_of_output() {
        // x<#hammer>.0 frees both the channel and the payload
        let x = Name::channel("x");
        let hammer = Name::resource("hammer");
        let t = Term::prefix(Prefix::Output(x.clone(), hammer.clone()), Term::nil());
        let fns = free_names(&t);
        assert_eq!(fns, [x, hammer].into_iter().collect());
    }

    #[test]
    fn input_binder_is_not_free() {
        // x(#s).req #s { 0 } has only x free
        let x = Name::channel("x");
        let s = Name::var("s", 1, NameKind::ResourceVar);
        let t = Term::prefix(
            Prefix::Input(x.clone(), s.clone()),
            Term::request(s.clone(), None, Term::nil()),
        );
        assert_eq!(free_names(&t), [x].into_iter().collect());
    }

    #[test]
    fn substitute_request_body() {
        let s = Name::var("s", 1, NameKind::ResourceVar);
        let hammer = Name::resource("hammer");
        let t = req_hard(&s);
        let expect = req_hard(&hammer);
        assert_eq!(substitute(&t, &s, &hammer).unwrap(), expect);
    }

    #[test]
    fn substitute_on_nil_is_identity() {
        let s = Name::var("s", 1, NameKind::ResourceVar);
        let r = Name::resource("r");
        assert_eq!(substitute(&Term::nil(), &s, &r).unwrap(), Term::nil());
    }

    #[test]
    fn substitute_stops_at_shadowing_binder() {
        let x = Name::channel("x");
        let s = Name::var("s", 1, NameKind::ResourceVar);
        let r = Name::resource("r");
        let t = Term::prefix(Prefix::Input(x.clone(), s.clone()), req_hard(&s));
        assert_eq!(substitute(&t, &s, &r).unwrap(), t);
    }

    #[test]
    fn substitute_rejects_kind_mismatch() {
        let y = Name::var("y", 1, NameKind::ChannelVar);
        let r = Name::resource("r");
        assert!(substitute(&Term::nil(), &y, &r).is_err());
    }

    #[test]
    fn substitution_avoids_capture() {
        // ( x(w). w<v> ){ v := w } must rename the binder
        let x = Name::channel("x");
        let w = Name::var("w", 3, NameKind::ChannelVar);
        let v = Name::channel("v");
        let t = Term::prefix(
            Prefix::Input(x.clone(), w.clone()),
            Term::prefix(Prefix::Output(w.clone(), v.clone()), Term::nil()),
        );
        let got = substitute(&t, &v, &w).unwrap();
        if let Term::Prefix(Prefix::Input(_, w2), k) = &*got {
            assert_ne!(w2, &w);
            assert!(w2.same_canonical(&w));
            if let Term::Prefix(Prefix::Output(subj, payload), _) = &**k {
                assert_eq!(subj, w2);
                assert_eq!(payload, &w); // the substituted-in w stays free
            } else {
                panic!("unexpected shape");
            }
        } else {
            panic!("unexpected shape");
        }
    }

    #[test]
    fn substitution_free_name_bound() {
        let s = Name::var("s", 1, NameKind::ResourceVar);
        let hammer = Name::resource("hammer");
        let t = req_hard(&s);
        let got = substitute(&t, &s, &hammer).unwrap();
        let fns = free_names(&got);
        assert!(!fns.contains(&s));
        assert!(fns.contains(&hammer));
    }

    #[test]
    fn labeling_is_idempotent_and_erasable() {
        let r = Name::resource("r");
        let t = Term::par(
            Term::boundary(r.clone(), "phi", Trace::empty(), None, Term::nil()),
            Term::request(r.clone(), None, Term::nil()),
        );
        let once = label_boundaries(&t).unwrap();
        assert!(fully_labeled(&once));
        let twice = label_boundaries(&once).unwrap();
        assert_eq!(once, twice);
        assert_eq!(strip_labels(&once), t);
    }

    #[test]
    fn labeling_rejects_duplicates() {
        let r = Name::resource("r");
        let l = BoundaryLabel::new("c");
        let t = Term::par(
            Term::boundary(r.clone(), "phi", Trace::empty(), Some(l.clone()), Term::nil()),
            Term::request(r.clone(), Some(l), Term::nil()),
        );
        assert!(matches!(label_boundaries(&t), Err(Error::DuplicateLabel(_))));
    }

    #[test]
    fn label_boundaries_on_nil() {
        assert_eq!(label_boundaries(&Term::nil()).unwrap(), Term::nil());
    }

    #[test]
    fn sequential_accepts_worker_body() {
        let s = Name::var("s", 1, NameKind::ResourceVar);
        assert!(is_sequential(&req_hard(&s)));
    }

    #[test]
    fn sequential_rejects_general_parallel_body() {
        let r = Name::resource("r");
        let live = Term::prefix(Prefix::Tau, Term::nil());
        let t = Term::request(r, None, Term::par(live.clone(), live));
        assert!(!is_sequential(&t));
    }

    #[test]
    fn sequential_allows_available_in_parallel() {
        let r = Name::resource("r");
        let r2 = Name::resource("r2");
        let avail = Term::boundary(r2.clone(), "phi", Trace::empty(), None, Term::nil());
        let t = Term::request(
            r,
            None,
            Term::par(avail, Term::prefix(Prefix::Tau, Term::nil())),
        );
        assert!(is_sequential(&t));
    }

    #[test]
    fn trace_projection_drops_specials() {
        let tr = Trace(vec![
            Event::Special(SpecialAction::In(BoundaryLabel::new("c"))),
            Event::Act(ActionName::new("E")),
            Event::Rel,
            Event::Special(SpecialAction::Out(BoundaryLabel::new("c"))),
        ]);
        assert_eq!(tr.dynamic_projection(), Trace(vec![Event::Act(ActionName::new("E")), Event::Rel]));
    }
}
