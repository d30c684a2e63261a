//! Structural congruence normalization and the labeled transition relation.
//!
//! Normal forms: parallel and choice children are flattened, sorted and
//! stripped of nil units; restrictions are pushed inward through resource
//! scopes; available resources float out of enclosing boundaries so that
//! every available sits at a parallel position. Successor terms are always
//! returned normalized, which is how the congruence rule enters the
//! transition relation.

use std::collections::BTreeSet;
use std::sync::Arc;

use crate::ast::{
    self, fresh_variant, ActionName, Boundary, BoundaryLabel, Event, Name, Prefix, Request,
    SpecialAction, Term, Trace,
};
use crate::error::{Error, Result};
use crate::policy::PolicyTable;

/// Transition labels of the one-step relation.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum TransitionLabel {
    Silent,
    /// `x(w)`: late-style input, the binder is not yet instantiated.
    FreeInput(Name, Name),
    /// `x<v>` with a free payload.
    FreeOutput(Name, Name),
    /// `x<(v)>`: output extruding a restricted name.
    BoundOutput(Name, Name),
    /// `alpha?r`: an access attempt that has not yet met its boundary.
    OpenAccess(ActionName, Name),
    /// `rel?r`.
    OpenRelease(Name),
    /// `alpha(r)`: access admitted by the policy.
    ClosedAccess(ActionName, Name),
    /// `rel(r)`.
    ClosedRelease(Name),
    /// Access that violated the policy; the resource was forcibly reclaimed.
    FaultyAccess(ActionName, Name),
}

impl TransitionLabel {
    /// Names occurring in the label.
    pub fn names(&self) -> Vec<&Name> {
        match self {
            TransitionLabel::Silent => vec![],
            TransitionLabel::FreeInput(x, w) => vec![x, w],
            TransitionLabel::FreeOutput(x, v) | TransitionLabel::BoundOutput(x, v) => vec![x, v],
            TransitionLabel::OpenAccess(_, r)
            | TransitionLabel::ClosedAccess(_, r)
            | TransitionLabel::FaultyAccess(_, r)
            | TransitionLabel::OpenRelease(r)
            | TransitionLabel::ClosedRelease(r) => vec![r],
        }
    }

    /// Bound name of the label, if any (input binder or extruded name).
    pub fn bound_name(&self) -> Option<&Name> {
        match self {
            TransitionLabel::FreeInput(_, w) => Some(w),
            TransitionLabel::BoundOutput(_, v) => Some(v),
            _ => None,
        }
    }

    /// Whether this label is a complete system step: internal synchronization
    /// or a policed resource action. Open attempts and environment-facing
    /// input/output are derivations waiting for a context.
    pub fn is_complete(&self) -> bool {
        matches!(
            self,
            TransitionLabel::Silent
                | TransitionLabel::ClosedAccess(_, _)
                | TransitionLabel::ClosedRelease(_)
                | TransitionLabel::FaultyAccess(_, _)
        )
    }

    fn mentions(&self, n: &Name) -> bool {
        self.names().iter().any(|m| *m == n)
    }
}

impl std::fmt::Display for TransitionLabel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            TransitionLabel::Silent => write!(f, "tau"),
            TransitionLabel::FreeInput(x, w) => write!(f, "{}({})", x.display(), w),
            TransitionLabel::FreeOutput(x, v) => write!(f, "{}<{}>", x.display(), v),
            TransitionLabel::BoundOutput(x, v) => write!(f, "{}<({})>", x.display(), v),
            TransitionLabel::OpenAccess(a, r) => write!(f, "{a}?{r}"),
            TransitionLabel::OpenRelease(r) => write!(f, "rel?{r}"),
            TransitionLabel::ClosedAccess(a, r) => write!(f, "{a}({r})"),
            TransitionLabel::ClosedRelease(r) => write!(f, "rel({r})"),
            TransitionLabel::FaultyAccess(a, r) => write!(f, "fault:{a}({r})"),
        }
    }
}

/// A scripted reconfiguration performed by the external resource manager.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ReconfigEvent {
    Appear { resource: Name, policy: Arc<str>, state: Trace, at_step: u64 },
    Disappear { resource: Name, at_step: u64 },
}

impl ReconfigEvent {
    pub fn at_step(&self) -> u64 {
        match self {
            ReconfigEvent::Appear { at_step, .. } | ReconfigEvent::Disappear { at_step, .. } => {
                *at_step
            }
        }
    }
}

/// Whether stepping threads the analysis bookkeeping through terms.
///
/// `Plain` is the operational semantics as such. `Annotated` additionally
/// records `in`/`out`/`err_out` special actions in boundary states; policies
/// ignore special actions, so both modes admit exactly the same transitions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum StepMode {
    #[default]
    Plain,
    Annotated,
}

// ---------------------------------------------------------------------------
// Structural congruence normalization
// ---------------------------------------------------------------------------

/// Canonical form under the congruence laws. Idempotent; transitions of the
/// normal form coincide with transitions of the original term.
pub fn congruence_normalize(t: &Arc<Term>) -> Arc<Term> {
    match &**t {
        Term::Nil => t.clone(),
        Term::Prefix(p, k) => Term::prefix(p.clone(), congruence_normalize(k)),
        Term::Replicate(b, budget) => Term::replicate(congruence_normalize(b), *budget),
        Term::Choice(_, _) => {
            let mut children = Vec::new();
            flatten_choice(t, &mut children);
            let mut norm: Vec<Arc<Term>> = children
                .into_iter()
                .map(|c| congruence_normalize(&c))
                .filter(|c| !matches!(**c, Term::Nil))
                .collect();
            norm.sort();
            rebuild(norm, Term::choice)
        }
        Term::Par(_, _) => {
            let mut children = Vec::new();
            flatten_par(t, &mut children);
            let mut norm = Vec::new();
            for c in children {
                let nc = congruence_normalize(&c);
                flatten_par_into(&nc, &mut norm);
            }
            norm.retain(|c| !matches!(**c, Term::Nil));
            norm.sort();
            rebuild(norm, Term::par)
        }
        Term::Request(r) => Arc::new(Term::Request(Request {
            resource: r.resource.clone(),
            label: r.label.clone(),
            body: congruence_normalize(&r.body),
        })),
        Term::Boundary(b) => {
            let body = congruence_normalize(&b.body);
            // float available resources out of the boundary
            let mut children = Vec::new();
            flatten_par_into(&body, &mut children);
            let (avail, rest): (Vec<_>, Vec<_>) = children
                .into_iter()
                .partition(|c| matches!(&**c, Term::Boundary(inner) if inner.is_available()));
            if avail.is_empty() {
                return Arc::new(Term::Boundary(Boundary { body, ..b.clone() }));
            }
            let inner = Arc::new(Term::Boundary(Boundary {
                body: rebuild(rest, Term::par),
                ..b.clone()
            }));
            let mut all = avail;
            all.push(inner);
            congruence_normalize(&rebuild(all, Term::par))
        }
        Term::Restrict(x, body) => {
            let nb = congruence_normalize(body);
            match &*nb {
                Term::Boundary(b) => {
                    // scope commutes with the resource boundary
                    let pushed = Arc::new(Term::Boundary(Boundary {
                        body: Term::restrict(x.clone(), b.body.clone()),
                        ..b.clone()
                    }));
                    congruence_normalize(&pushed)
                }
                Term::Request(r) => {
                    let pushed = Arc::new(Term::Request(Request {
                        resource: r.resource.clone(),
                        label: r.label.clone(),
                        body: Term::restrict(x.clone(), r.body.clone()),
                    }));
                    congruence_normalize(&pushed)
                }
                Term::Par(_, _) => {
                    let mut children = Vec::new();
                    flatten_par_into(&nb, &mut children);
                    let (inside, outside): (Vec<_>, Vec<_>) = children
                        .into_iter()
                        .partition(|c| ast::free_names(c).contains(x));
                    if outside.is_empty() {
                        return Term::restrict(x.clone(), nb);
                    }
                    if inside.is_empty() {
                        // the name is unused; keep the restriction on one
                        // deterministic component
                        let mut outside = outside;
                        let host = outside.remove(0);
                        let mut all = outside;
                        all.push(congruence_normalize(&Term::restrict(x.clone(), host)));
                        return congruence_normalize(&rebuild(all, Term::par));
                    }
                    let mut all = outside;
                    all.push(congruence_normalize(&Term::restrict(
                        x.clone(),
                        rebuild(inside, Term::par),
                    )));
                    congruence_normalize(&rebuild(all, Term::par))
                }
                Term::Restrict(y, inner) if y < x => {
                    // order adjacent restrictions
                    Term::restrict(
                        y.clone(),
                        congruence_normalize(&Term::restrict(x.clone(), inner.clone())),
                    )
                }
                _ => Term::restrict(x.clone(), nb),
            }
        }
    }
}

fn flatten_par(t: &Arc<Term>, out: &mut Vec<Arc<Term>>) {
    match &**t {
        Term::Par(l, r) => {
            flatten_par(l, out);
            flatten_par(r, out);
        }
        _ => out.push(t.clone()),
    }
}

fn flatten_par_into(t: &Arc<Term>, out: &mut Vec<Arc<Term>>) {
    flatten_par(t, out)
}

fn flatten_choice(t: &Arc<Term>, out: &mut Vec<Arc<Term>>) {
    match &**t {
        Term::Choice(l, r) => {
            flatten_choice(l, out);
            flatten_choice(r, out);
        }
        _ => out.push(t.clone()),
    }
}

fn rebuild(mut children: Vec<Arc<Term>>, join: fn(Arc<Term>, Arc<Term>) -> Arc<Term>) -> Arc<Term> {
    match children.len() {
        0 => Term::nil(),
        1 => children.pop().expect("one child"),
        _ => {
            let mut acc = children.pop().expect("nonempty");
            while let Some(c) = children.pop() {
                acc = join(c, acc);
            }
            acc
        }
    }
}

/// Stamp every replication node with a remaining-copies budget.
pub fn replication_unfold(t: &Arc<Term>, budget: u32) -> Arc<Term> {
    match &**t {
        Term::Nil => t.clone(),
        Term::Prefix(p, k) => Term::prefix(p.clone(), replication_unfold(k, budget)),
        Term::Restrict(n, b) => Term::restrict(n.clone(), replication_unfold(b, budget)),
        Term::Choice(l, r) => {
            Term::choice(replication_unfold(l, budget), replication_unfold(r, budget))
        }
        Term::Par(l, r) => Term::par(replication_unfold(l, budget), replication_unfold(r, budget)),
        Term::Boundary(b) => Arc::new(Term::Boundary(Boundary {
            body: replication_unfold(&b.body, budget),
            ..b.clone()
        })),
        Term::Request(r) => Arc::new(Term::Request(Request {
            resource: r.resource.clone(),
            label: r.label.clone(),
            body: replication_unfold(&r.body, budget),
        })),
        Term::Replicate(b, _) => Term::replicate(replication_unfold(b, budget), Some(budget)),
    }
}

// ---------------------------------------------------------------------------
// One-step transition relation
// ---------------------------------------------------------------------------

struct Ctx<'a> {
    policies: &'a PolicyTable,
    mode: StepMode,
}

type Successors = Vec<(TransitionLabel, Arc<Term>)>;

/// All one-step successors of `p`, including scripted reconfigurations at
/// `step_index`. Successors are normalized, deduplicated and sorted, so
/// re-runs are deterministic.
pub fn step(
    p: &Arc<Term>,
    policies: &PolicyTable,
    script: &[ReconfigEvent],
    step_index: u64,
    mode: StepMode,
) -> Result<Successors> {
    if !ast::fully_labeled(p) {
        return Err(Error::Unlabeled);
    }
    let ctx = Ctx { policies, mode };
    let mut out = trans(p, &ctx)?;
    for ev in script.iter().filter(|e| e.at_step() == step_index) {
        match ev {
            ReconfigEvent::Appear { resource, policy, state, .. } => {
                let avail = Arc::new(Term::Boundary(Boundary {
                    resource: resource.clone(),
                    policy: policy.clone(),
                    state: state.clone(),
                    label: None,
                    entered: Vec::new(),
                    body: Term::nil(),
                }));
                out.push((TransitionLabel::Silent, Term::par(p.clone(), avail)));
            }
            ReconfigEvent::Disappear { resource, .. } => {
                for succ in disappear_sites(p, resource) {
                    out.push((TransitionLabel::Silent, succ));
                }
            }
        }
    }
    let dedup: BTreeSet<(TransitionLabel, Arc<Term>)> = out
        .into_iter()
        .map(|(l, t)| (l, congruence_normalize(&t)))
        .collect();
    Ok(dedup.into_iter().collect())
}

fn trans(t: &Arc<Term>, ctx: &Ctx) -> Result<Successors> {
    match &**t {
        Term::Nil => Ok(vec![]),
        Term::Prefix(p, k) => Ok(match p {
            Prefix::Tau => vec![(TransitionLabel::Silent, k.clone())],
            Prefix::Input(x, w) => {
                vec![(TransitionLabel::FreeInput(x.clone(), w.clone()), k.clone())]
            }
            Prefix::Output(x, v) => {
                vec![(TransitionLabel::FreeOutput(x.clone(), v.clone()), k.clone())]
            }
            Prefix::Access(a, r) => {
                vec![(TransitionLabel::OpenAccess(a.clone(), r.clone()), k.clone())]
            }
            Prefix::Release(r) => vec![(TransitionLabel::OpenRelease(r.clone()), k.clone())],
        }),
        Term::Choice(l, r) => {
            let mut out = trans(l, ctx)?;
            out.extend(trans(r, ctx)?);
            Ok(out)
        }
        Term::Restrict(z, body) => {
            let mut out = Vec::new();
            for (mu, b2) in trans(body, ctx)? {
                match &mu {
                    TransitionLabel::FreeOutput(x, v) if v == z && x != z => {
                        out.push((TransitionLabel::BoundOutput(x.clone(), v.clone()), b2));
                    }
                    mu if !mu.mentions(z) => {
                        out.push((mu.clone(), Term::restrict(z.clone(), b2)));
                    }
                    _ => {}
                }
            }
            Ok(out)
        }
        Term::Par(_, _) => {
            let mut children = Vec::new();
            flatten_par(t, &mut children);
            par_trans(&children, ctx)
        }
        Term::Boundary(b) => boundary_trans(b, ctx),
        Term::Request(r) => {
            let mut out = Vec::new();
            for (mu, b2) in trans(&r.body, ctx)? {
                if !mu.mentions(&r.resource) {
                    out.push((
                        mu,
                        Arc::new(Term::Request(Request {
                            resource: r.resource.clone(),
                            label: r.label.clone(),
                            body: b2,
                        })),
                    ));
                }
            }
            Ok(out)
        }
        Term::Replicate(body, budget) => match budget {
            None => Err(Error::UnstampedReplication),
            Some(0) => Ok(vec![]),
            Some(n) => {
                let unfolded =
                    Term::par(body.clone(), Term::replicate(body.clone(), Some(n - 1)));
                trans(&unfolded, ctx)
            }
        },
    }
}

fn boundary_trans(b: &Boundary, ctx: &Ctx) -> Result<Successors> {
    if b.is_available() {
        return Ok(vec![]); // available resources are idle
    }
    let phi = ctx
        .policies
        .get(&b.policy)
        .ok_or_else(|| Error::UnknownPolicy(b.policy.to_string()))?;
    let owner = b.scope_labels().last().cloned();
    let mut out = Vec::new();
    for (mu, body2) in trans(&b.body, ctx)? {
        match &mu {
            TransitionLabel::OpenAccess(alpha, r) if *r == b.resource => {
                let attempted = b.state.pushed(Event::Act(alpha.clone()));
                if phi.admits(&attempted) {
                    out.push((
                        TransitionLabel::ClosedAccess(alpha.clone(), r.clone()),
                        Arc::new(Term::Boundary(Boundary {
                            state: attempted,
                            body: body2,
                            ..b.clone()
                        })),
                    ));
                } else {
                    // forced release: the resource becomes available with its
                    // state unchanged and the continuation escapes
                    let state = match (ctx.mode, &owner) {
                        (StepMode::Annotated, Some(chi)) => {
                            b.state.pushed(Event::Special(SpecialAction::ErrOut(chi.clone())))
                        }
                        _ => b.state.clone(),
                    };
                    let avail = Arc::new(Term::Boundary(Boundary {
                        resource: b.resource.clone(),
                        policy: b.policy.clone(),
                        state,
                        label: None,
                        entered: b.scope_labels(),
                        body: Term::nil(),
                    }));
                    out.push((
                        TransitionLabel::FaultyAccess(alpha.clone(), r.clone()),
                        Term::par(avail, body2),
                    ));
                }
            }
            TransitionLabel::OpenRelease(r) if *r == b.resource => {
                let mut state = b.state.pushed(Event::Rel);
                if let (StepMode::Annotated, Some(chi)) = (ctx.mode, &owner) {
                    state = state.pushed(Event::Special(SpecialAction::Out(chi.clone())));
                }
                let avail = Arc::new(Term::Boundary(Boundary {
                    resource: b.resource.clone(),
                    policy: b.policy.clone(),
                    state,
                    label: None,
                    entered: b.scope_labels(),
                    body: Term::nil(),
                }));
                out.push((TransitionLabel::ClosedRelease(r.clone()), Term::par(avail, body2)));
            }
            mu if !mu.mentions(&b.resource) => {
                out.push((
                    mu.clone(),
                    Arc::new(Term::Boundary(Boundary { body: body2, ..b.clone() })),
                ));
            }
            _ => {}
        }
    }
    Ok(out)
}

fn par_trans(children: &[Arc<Term>], ctx: &Ctx) -> Result<Successors> {
    let child_trans: Vec<Successors> =
        children.iter().map(|c| trans(c, ctx)).collect::<Result<_>>()?;
    let free: Vec<BTreeSet<Name>> = children.iter().map(|c| ast::free_names(c)).collect();
    let mut out = Vec::new();

    let assemble = |i: usize, replacement: Arc<Term>| -> Arc<Term> {
        let mut parts: Vec<Arc<Term>> = Vec::with_capacity(children.len());
        for (k, c) in children.iter().enumerate() {
            if k == i {
                parts.push(replacement.clone());
            } else {
                parts.push(c.clone());
            }
        }
        rebuild(parts, Term::par)
    };

    // single-component moves, renaming extruded binders that would clash
    for (i, moves) in child_trans.iter().enumerate() {
        for (mu, succ) in moves {
            let clash = mu.bound_name().map_or(false, |bn| {
                free.iter().enumerate().any(|(k, fs)| k != i && fs.contains(bn))
            });
            if clash {
                let bn = mu.bound_name().expect("clash implies bound name").clone();
                let refs: Vec<&Term> = children.iter().map(|c| &**c).collect();
                let fresh = fresh_variant(&bn, &refs);
                let succ2 = ast::substitute(succ, &bn, &fresh).expect("same kind");
                let mu2 = match mu {
                    TransitionLabel::FreeInput(x, _) => {
                        TransitionLabel::FreeInput(x.clone(), fresh.clone())
                    }
                    TransitionLabel::BoundOutput(x, _) => {
                        TransitionLabel::BoundOutput(x.clone(), fresh.clone())
                    }
                    _ => unreachable!("only binders clash"),
                };
                out.push((mu2, assemble(i, succ2)));
            } else {
                out.push((mu.clone(), assemble(i, succ.clone())));
            }
        }
    }

    // binary synchronizations
    for i in 0..children.len() {
        for j in 0..children.len() {
            if i == j {
                continue;
            }
            for (mu_i, succ_i) in &child_trans[i] {
                for (mu_j, succ_j) in &child_trans[j] {
                    match (mu_i, mu_j) {
                        // free communication, channel or resource payload
                        (TransitionLabel::FreeOutput(x, v), TransitionLabel::FreeInput(y, w))
                            if x == y && v.kind.is_resource() == w.kind.is_resource() =>
                        {
                            let recv = ast::substitute(succ_j, w, v).expect("kind checked");
                            let mut parts = Vec::new();
                            for (k, c) in children.iter().enumerate() {
                                if k == i {
                                    parts.push(succ_i.clone());
                                } else if k == j {
                                    parts.push(recv.clone());
                                } else {
                                    parts.push(c.clone());
                                }
                            }
                            out.push((TransitionLabel::Silent, rebuild(parts, Term::par)));
                        }
                        // scope-closing communication
                        (TransitionLabel::BoundOutput(x, v), TransitionLabel::FreeInput(y, w))
                            if x == y && v.kind.is_resource() == w.kind.is_resource() =>
                        {
                            // keep the extruded name clear of every bystander
                            let mut v = v.clone();
                            let mut sender = succ_i.clone();
                            let clash = free
                                .iter()
                                .enumerate()
                                .any(|(k, fs)| k != i && fs.contains(&v))
                                || ast::free_names(succ_j).contains(&v);
                            if clash {
                                let refs: Vec<&Term> =
                                    children.iter().map(|c| &**c).collect();
                                let fresh = fresh_variant(&v, &refs);
                                sender = ast::substitute(&sender, &v, &fresh).expect("same kind");
                                v = fresh;
                            }
                            let recv = ast::substitute(succ_j, w, &v).expect("kind checked");
                            let closed = Term::restrict(v, Term::par(sender, recv));
                            let mut parts = Vec::new();
                            for (k, c) in children.iter().enumerate() {
                                if k == i {
                                    parts.push(closed.clone());
                                } else if k != j {
                                    parts.push(c.clone());
                                }
                            }
                            out.push((TransitionLabel::Silent, rebuild(parts, Term::par)));
                        }
                        _ => {}
                    }
                }
            }
        }
    }

    // acquisition: an available resource meets a request point reachable
    // through boundary walls and restrictions
    for (j, c) in children.iter().enumerate() {
        let avail = match &**c {
            Term::Boundary(b) if b.is_available() => b,
            _ => continue,
        };
        for (i, host) in children.iter().enumerate() {
            if i == j {
                continue;
            }
            for entered in try_acquire(host, avail, ctx) {
                let mut parts = Vec::new();
                for (k, c2) in children.iter().enumerate() {
                    if k == i {
                        parts.push(entered.clone());
                    } else if k != j {
                        parts.push(c2.clone());
                    }
                }
                out.push((TransitionLabel::Silent, rebuild(parts, Term::par)));
            }
        }
    }

    Ok(out)
}

/// Ways the available resource `avail` can be acquired by a request point
/// inside `t`, moving through parallel composition, boundary walls and
/// restrictions.
fn try_acquire(t: &Arc<Term>, avail: &Boundary, ctx: &Ctx) -> Vec<Arc<Term>> {
    match &**t {
        Term::Request(r) if r.resource == avail.resource => {
            let chi = match &r.label {
                Some(l) => l.clone(),
                None => return vec![],
            };
            if avail.entered.contains(&chi) {
                return vec![]; // this request point already used the resource
            }
            let mut entered = avail.entered.clone();
            entered.push(chi.clone());
            let state = match ctx.mode {
                StepMode::Annotated => avail.state.pushed(Event::Special(SpecialAction::In(chi))),
                StepMode::Plain => avail.state.clone(),
            };
            vec![Arc::new(Term::Boundary(Boundary {
                resource: avail.resource.clone(),
                policy: avail.policy.clone(),
                state,
                label: None,
                entered,
                body: r.body.clone(),
            }))]
        }
        Term::Par(l, r) => {
            let mut out: Vec<Arc<Term>> = try_acquire(l, avail, ctx)
                .into_iter()
                .map(|l2| Term::par(l2, r.clone()))
                .collect();
            out.extend(try_acquire(r, avail, ctx).into_iter().map(|r2| Term::par(l.clone(), r2)));
            out
        }
        Term::Boundary(b) if !b.is_available() => try_acquire(&b.body, avail, ctx)
            .into_iter()
            .map(|body| Arc::new(Term::Boundary(Boundary { body, ..b.clone() })))
            .collect(),
        Term::Restrict(x, body) => try_acquire(body, avail, ctx)
            .into_iter()
            .map(|b2| Term::restrict(x.clone(), b2))
            .collect(),
        _ => vec![],
    }
}

/// Successors of scripted disappearance: every boundary named `r` in
/// evaluation position vanishes together with its enclosed process.
fn disappear_sites(t: &Arc<Term>, r: &Name) -> Vec<Arc<Term>> {
    match &**t {
        Term::Boundary(b) => {
            let mut out: Vec<Arc<Term>> = disappear_sites(&b.body, r)
                .into_iter()
                .map(|body| Arc::new(Term::Boundary(Boundary { body, ..b.clone() })))
                .collect();
            if b.resource == *r {
                out.push(Term::nil());
            }
            out
        }
        Term::Par(l, rr) => {
            let mut out: Vec<Arc<Term>> = disappear_sites(l, r)
                .into_iter()
                .map(|l2| Term::par(l2, rr.clone()))
                .collect();
            out.extend(disappear_sites(rr, r).into_iter().map(|r2| Term::par(l.clone(), r2)));
            out
        }
        Term::Choice(l, rr) => {
            let mut out = disappear_sites(l, r);
            out.extend(disappear_sites(rr, r));
            out
        }
        Term::Restrict(x, body) => disappear_sites(body, r)
            .into_iter()
            .map(|b2| Term::restrict(x.clone(), b2))
            .collect(),
        Term::Request(req) => disappear_sites(&req.body, r)
            .into_iter()
            .map(|b2| {
                Arc::new(Term::Request(Request {
                    resource: req.resource.clone(),
                    label: req.label.clone(),
                    body: b2,
                }))
            })
            .collect(),
        _ => vec![],
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::parser::{parse_policy_file, parse_process};

    fn policies() -> PolicyTable {
        parse_policy_file(
            "policy phi_h { initial h0; missing violate; h0 -hard_hit-> h0; }\n\
             policy phi_m { initial m0; missing violate; m0 -soft_hit-> m0; }\n\
             policy phi { initial q; missing stay; }",
        )
        .unwrap()
    }

    fn prep(src: &str) -> Arc<Term> {
        let t = parse_process(src).unwrap();
        let t = ast::label_boundaries(&t).unwrap();
        congruence_normalize(&replication_unfold(&t, 2))
    }

    fn step_plain(t: &Arc<Term>) -> Successors {
        step(t, &policies(), &[], 0, StepMode::Plain).unwrap()
    }

    #[test]
    fn normalize_drops_nil_in_parallel() {
        let t = parse_process("tau. 0 | 0").unwrap();
        let n = congruence_normalize(&t);
        assert_eq!(n, parse_process("tau. 0").unwrap());
    }

    #[test]
    fn normalize_floats_available_resources_out() {
        let t = prep("res #r1, phi, eps { res #r2, phi, eps { 0 } | tau. 0 }");
        let mut children = Vec::new();
        flatten_par(&t, &mut children);
        assert_eq!(children.len(), 2);
        let avail = children
            .iter()
            .filter(|c| matches!(&***c, Term::Boundary(b) if b.is_available()))
            .count();
        assert_eq!(avail, 1, "available r2 floats to parallel position: {t}");
    }

    #[test]
    fn normalize_pushes_restriction_into_request() {
        let t = parse_process("new x. req #r { 0 }").unwrap();
        let n = congruence_normalize(&t);
        match &*n {
            Term::Request(r) => assert!(matches!(&*r.body, Term::Restrict(_, b) if matches!(&**b, Term::Nil))),
            other => panic!("expected request at top, got {other:?}"),
        }
    }

    #[test]
    fn normalize_is_idempotent_on_samples() {
        for src in [
            "tau. 0 | (0 + tau. 0) | res #r, phi, eps { res #q, phi, eps { 0 } | tau. 0 }",
            "new x. (x<y>. 0 | x(z). 0)",
            "req #r { new w. rel(#r). 0 }",
        ] {
            let t = parse_process(src).unwrap();
            let once = congruence_normalize(&t);
            assert_eq!(once, congruence_normalize(&once), "{src}");
        }
    }

    #[test]
    fn acquire_produces_silent_transition() {
        let t = prep("req #hammer { hard_hit(#hammer). 0 } @w | res #hammer, phi_h, eps { 0 } @c1");
        let succ = step_plain(&t);
        assert_eq!(succ.len(), 1);
        let (label, next) = &succ[0];
        assert_eq!(*label, TransitionLabel::Silent);
        match &**next {
            Term::Boundary(b) => {
                assert_eq!(b.resource, Name::resource("hammer"));
                assert_eq!(b.state, Trace::empty());
                assert_eq!(b.entered, vec![BoundaryLabel::new("w")]);
                assert!(matches!(&*b.body, Term::Prefix(Prefix::Access(_, _), _)));
            }
            other => panic!("unexpected successor {other}"),
        }
    }

    #[test]
    fn admitted_access_closes_and_extends_state() {
        let t = prep("res #hammer, phi_h, eps { hard_hit(#hammer). 0 } @c");
        let succ = step_plain(&t);
        assert_eq!(succ.len(), 1);
        let (label, next) = &succ[0];
        assert_eq!(
            *label,
            TransitionLabel::ClosedAccess(ActionName::new("hard_hit"), Name::resource("hammer"))
        );
        match &**next {
            Term::Boundary(b) => {
                assert!(b.is_available());
                assert_eq!(b.state, Trace::from_actions(&["hard_hit"]));
            }
            other => panic!("unexpected successor {other}"),
        }
    }

    #[test]
    fn violating_access_is_faulty_and_resets_to_available() {
        let t = prep("res #mallet, phi_m, eps { hard_hit(#mallet). 0 } @c");
        let succ = step_plain(&t);
        assert_eq!(succ.len(), 1);
        let (label, next) = &succ[0];
        assert_eq!(
            *label,
            TransitionLabel::FaultyAccess(ActionName::new("hard_hit"), Name::resource("mallet"))
        );
        // the continuation was nil, so only the available boundary remains,
        // with its state unchanged
        match &**next {
            Term::Boundary(b) => {
                assert!(b.is_available());
                assert_eq!(b.state, Trace::empty());
                assert_eq!(b.resource, Name::resource("mallet"));
            }
            other => panic!("unexpected successor {other}"),
        }
    }

    #[test]
    fn release_escapes_and_leaves_resource_available() {
        let t = prep("res #r, phi, eps { rel(#r). tau. 0 } @c");
        let succ = step_plain(&t);
        assert_eq!(succ.len(), 1);
        let (label, next) = &succ[0];
        assert_eq!(*label, TransitionLabel::ClosedRelease(Name::resource("r")));
        let mut children = Vec::new();
        flatten_par(next, &mut children);
        assert_eq!(children.len(), 2);
        let avail = children
            .iter()
            .find_map(|c| match &**c {
                Term::Boundary(b) if b.is_available() => Some(b.clone()),
                _ => None,
            })
            .expect("available resource");
        assert_eq!(avail.state, Trace(vec![Event::Rel]));
    }

    #[test]
    fn budget_zero_replication_is_inert() {
        let t = congruence_normalize(&replication_unfold(
            &parse_process("!tau. 0").unwrap(),
            0,
        ));
        assert!(step_plain(&t).is_empty());
    }

    #[test]
    fn budget_bounds_spawned_copies() {
        // two copies may fire, after which the replication is exhausted
        let mut t = congruence_normalize(&replication_unfold(
            &parse_process("!tau. 0").unwrap(),
            2,
        ));
        let mut fired = 0;
        loop {
            let succ = step_plain(&t);
            let Some((label, next)) = succ.into_iter().next() else { break };
            assert_eq!(label, TransitionLabel::Silent);
            fired += 1;
            t = next;
        }
        assert_eq!(fired, 2);
    }

    #[test]
    fn communication_is_late_and_silent() {
        let t = prep("x<#hammer>. 0 | x?(#s). req #s { 0 } @w");
        let succ = step_plain(&t);
        // free output, free input, and their synchronization
        let silent: Vec<_> = succ.iter().filter(|(l, _)| *l == TransitionLabel::Silent).collect();
        assert_eq!(silent.len(), 1);
        let (_, next) = silent[0];
        match &**next {
            Term::Request(r) => assert_eq!(r.resource, Name::resource("hammer")),
            other => panic!("expected substituted request, got {other}"),
        }
        assert!(succ.iter().any(|(l, _)| matches!(l, TransitionLabel::FreeOutput(_, _))));
        assert!(succ.iter().any(|(l, _)| matches!(l, TransitionLabel::FreeInput(_, _))));
    }

    #[test]
    fn scope_extrusion_closes_again() {
        let t = prep("new z. x<z>. z(w). 0 | x(y). y<a>. 0");
        let silent: Vec<_> = step_plain(&t)
            .into_iter()
            .filter(|(l, _)| *l == TransitionLabel::Silent)
            .collect();
        assert_eq!(silent.len(), 1);
        let next = &silent[0].1;
        // the private channel is re-bound around both parties
        fn has_restrict(t: &Term) -> bool {
            match t {
                Term::Restrict(_, _) => true,
                Term::Par(l, r) => has_restrict(l) || has_restrict(r),
                _ => false,
            }
        }
        assert!(has_restrict(next), "{next}");
        // and the communication can now happen under it
        let after = step(next, &policies(), &[], 1, StepMode::Plain).unwrap();
        assert!(after.iter().any(|(l, _)| *l == TransitionLabel::Silent));
    }

    #[test]
    fn nested_request_acquires_through_boundary_wall() {
        let t = prep(
            "res #sns, phi, eps { req #it { go(#it). 0 } @r } @s | res #it, phi, eps { 0 } @i",
        );
        let succ = step_plain(&t);
        assert_eq!(succ.len(), 1);
        let (label, next) = &succ[0];
        assert_eq!(*label, TransitionLabel::Silent);
        match &**next {
            Term::Boundary(outer) => {
                assert_eq!(outer.resource, Name::resource("sns"));
                match &*outer.body {
                    Term::Boundary(inner) => {
                        assert_eq!(inner.resource, Name::resource("it"));
                        assert_eq!(inner.entered, vec![BoundaryLabel::new("r")]);
                    }
                    other => panic!("expected nested boundary, got {other}"),
                }
            }
            other => panic!("expected sensor boundary, got {other}"),
        }
    }

    #[test]
    fn acquire_guard_blocks_reentry_by_same_request_point() {
        // the available already records this request label in its history
        let avail = Arc::new(Term::Boundary(Boundary {
            resource: Name::resource("r"),
            policy: "phi".into(),
            state: Trace(vec![Event::Rel]),
            label: None,
            entered: vec![BoundaryLabel::new("w")],
            body: Term::nil(),
        }));
        let req = Term::request(
            Name::resource("r"),
            Some(BoundaryLabel::new("w")),
            Term::nil(),
        );
        let t = congruence_normalize(&Term::par(req, avail));
        assert!(step_plain(&t).is_empty());
    }

    #[test]
    fn same_resource_boundary_blocks_inner_closed_action() {
        let t = prep("res #r, phi, eps { res #r, phi, eps { go(#r). 0 } @in } @out");
        assert!(step_plain(&t).is_empty());
    }

    #[test]
    fn scripted_appear_adds_available_resource() {
        let t = prep("tau. 0");
        let script = [ReconfigEvent::Appear {
            resource: Name::resource("r"),
            policy: "phi".into(),
            state: Trace::empty(),
            at_step: 0,
        }];
        let succ = step(&t, &policies(), &script, 0, StepMode::Plain).unwrap();
        assert_eq!(succ.len(), 2); // tau of the process, tau of the manager
        assert!(succ.iter().any(|(_, n)| matches!(&**n, Term::Par(_, _))));
        // no event scheduled at step 1
        let later = step(&t, &policies(), &script, 1, StepMode::Plain).unwrap();
        assert_eq!(later.len(), 1);
    }

    #[test]
    fn scripted_disappear_destroys_boundary_and_body() {
        let t = prep("res #r, phi, eps { tau. 0 } @c | tau. 0");
        let script = [ReconfigEvent::Disappear { resource: Name::resource("r"), at_step: 0 }];
        let succ = step(&t, &policies(), &script, 0, StepMode::Plain).unwrap();
        let gone = succ
            .iter()
            .any(|(l, n)| *l == TransitionLabel::Silent && **n == *parse_process("tau. 0").unwrap());
        assert!(gone, "{succ:?}");
    }

    #[test]
    fn step_requires_labels() {
        let t = parse_process("req #r { 0 }").unwrap();
        assert!(matches!(
            step(&t, &policies(), &[], 0, StepMode::Plain),
            Err(Error::Unlabeled)
        ));
    }

    #[test]
    fn normalization_preserves_transition_labels() {
        let samples = [
            "req #hammer { hard_hit(#hammer). 0 } @w | res #hammer, phi_h, eps { 0 } @c1",
            "x<#hammer>. 0 | x?(#s). req #s { 0 } @w | tau. 0",
            "res #mallet, phi_m, eps { hard_hit(#mallet). 0 + soft_hit(#mallet). 0 } @c",
        ];
        for src in samples {
            let raw = ast::label_boundaries(&parse_process(src).unwrap()).unwrap();
            let raw = replication_unfold(&raw, 2);
            let norm = congruence_normalize(&raw);
            let mut l1: Vec<TransitionLabel> =
                step(&raw, &policies(), &[], 0, StepMode::Plain).unwrap().into_iter().map(|x| x.0).collect();
            let mut l2: Vec<TransitionLabel> =
                step(&norm, &policies(), &[], 0, StepMode::Plain).unwrap().into_iter().map(|x| x.0).collect();
            l1.sort();
            l2.sort();
            assert_eq!(l1, l2, "{src}");
        }
    }
}
