//! Control flow analysis: estimates, their validation, and the least
//! estimate computed by a worklist fixpoint.
//!
//! The estimate is the tuple (rho, kappa, gamma, psi): variable bindings,
//! channel contents, per-resource trace sets, and contexts whose resources
//! may never be released. Analysis values are keyed by canonical names, so
//! they survive alpha-conversion and stay attached to the source program.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet, VecDeque};
use std::fmt;
use std::sync::Arc;

use crate::ast::{
    self, BoundaryLabel, Event, Name, NameKind, Prefix, SpecialAction, Term, Trace,
};
use crate::error::{Error, Result};
use crate::policy::{PolicyAutomaton, PolicyOutcome, PolicyTable};

// ---------------------------------------------------------------------------
// Canonical keys and estimate data
// ---------------------------------------------------------------------------

/// Canonical name: the (base, binding site) class of a name, together with
/// its space (channel or resource). Alpha-variants collapse onto this key.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Canon {
    pub base: Arc<str>,
    pub site: u32,
    pub resource: bool,
}

impl Canon {
    pub fn of(n: &Name) -> Self {
        Canon { base: n.base.clone(), site: n.site, resource: n.kind.is_resource() }
    }

    pub fn resource(base: &str) -> Self {
        Canon { base: base.into(), site: 0, resource: true }
    }

    pub fn channel(base: &str) -> Self {
        Canon { base: base.into(), site: 0, resource: false }
    }

    /// Stable textual key: resources carry the `#` sigil, bound names their
    /// site index.
    pub fn key(&self) -> String {
        let sigil = if self.resource { "#" } else { "" };
        if self.site == 0 {
            format!("{}{}", sigil, self.base)
        } else {
            format!("{}{}@{}", sigil, self.base, self.site)
        }
    }
}

impl fmt::Display for Canon {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.key())
    }
}

/// One recorded usage of a resource: a trace over the resource together with
/// the sequence of request labels that produced it.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct GammaEntry {
    pub policy: Arc<str>,
    pub trace: Trace,
    pub labels: Vec<BoundaryLabel>,
}

impl GammaEntry {
    pub fn is_faulty(&self) -> bool {
        self.trace.0.iter().any(|e| matches!(e, Event::Special(SpecialAction::ErrOut(_))))
    }
}

impl fmt::Display for GammaEntry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let labels: Vec<String> = self.labels.iter().map(|l| l.to_string()).collect();
        write!(f, "({}, {}, [{}])", self.policy, self.trace, labels.join("."))
    }
}

/// One frame of a delta context: a resource scope the analysed process is
/// currently inside.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Frame {
    pub resource: Canon,
    pub policy: Arc<str>,
    pub trace: Trace,
    pub labels: Vec<BoundaryLabel>,
}

/// The sequence of resource frames recording scope nesting.
#[derive(Debug, Clone, Default, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct DeltaContext(pub Vec<Frame>);

impl DeltaContext {
    pub fn empty() -> Self {
        DeltaContext(Vec::new())
    }
}

/// Analysis result.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Estimate {
    pub rho: BTreeMap<Canon, BTreeSet<Canon>>,
    pub kappa: BTreeMap<Canon, BTreeSet<Canon>>,
    pub gamma: BTreeMap<Canon, BTreeSet<GammaEntry>>,
    pub psi: BTreeSet<DeltaContext>,
}

impl Estimate {
    pub fn rho_of(&self, c: &Canon) -> BTreeSet<Canon> {
        self.rho.get(c).cloned().unwrap_or_default()
    }

    pub fn kappa_of(&self, c: &Canon) -> BTreeSet<Canon> {
        self.kappa.get(c).cloned().unwrap_or_default()
    }

    pub fn gamma_of(&self, c: &Canon) -> BTreeSet<GammaEntry> {
        self.gamma.get(c).cloned().unwrap_or_default()
    }

    /// Keys of `rho` as display strings, for report assertions.
    pub fn rho_keys(&self, key: &str) -> BTreeSet<String> {
        self.rho
            .iter()
            .find(|(c, _)| c.key() == key)
            .map(|(_, s)| s.iter().map(Canon::key).collect())
            .unwrap_or_default()
    }

    pub fn kappa_keys(&self, key: &str) -> BTreeSet<String> {
        self.kappa
            .iter()
            .find(|(c, _)| c.key() == key)
            .map(|(_, s)| s.iter().map(Canon::key).collect())
            .unwrap_or_default()
    }

    pub fn gamma_keys(&self, key: &str) -> BTreeSet<GammaEntry> {
        self.gamma
            .iter()
            .find(|(c, _)| c.key() == key)
            .map(|(_, s)| s.clone())
            .unwrap_or_default()
    }

    /// Pointwise intersection of two estimates.
    pub fn intersect(&self, other: &Estimate) -> Estimate {
        fn meet<K: Ord + Clone, V: Ord + Clone>(
            a: &BTreeMap<K, BTreeSet<V>>,
            b: &BTreeMap<K, BTreeSet<V>>,
        ) -> BTreeMap<K, BTreeSet<V>> {
            let mut out = BTreeMap::new();
            for (k, va) in a {
                if let Some(vb) = b.get(k) {
                    let m: BTreeSet<V> = va.intersection(vb).cloned().collect();
                    if !m.is_empty() {
                        out.insert(k.clone(), m);
                    }
                }
            }
            out
        }
        Estimate {
            rho: meet(&self.rho, &other.rho),
            kappa: meet(&self.kappa, &other.kappa),
            gamma: meet(&self.gamma, &other.gamma),
            psi: self.psi.intersection(&other.psi).cloned().collect(),
        }
    }

    /// Pointwise inclusion.
    pub fn is_subset_of(&self, other: &Estimate) -> bool {
        fn le<K: Ord, V: Ord>(a: &BTreeMap<K, BTreeSet<V>>, b: &BTreeMap<K, BTreeSet<V>>) -> bool {
            a.iter().all(|(k, va)| {
                va.is_empty() || b.get(k).map_or(false, |vb| va.is_subset(vb))
            })
        }
        le(&self.rho, &other.rho)
            && le(&self.kappa, &other.kappa)
            && le(&self.gamma, &other.gamma)
            && self.psi.is_subset(&other.psi)
    }

    /// Stable JSON rendering of the estimate.
    pub fn to_json(&self) -> serde_json::Value {
        fn names(m: &BTreeMap<Canon, BTreeSet<Canon>>) -> serde_json::Value {
            let mut obj = serde_json::Map::new();
            for (k, v) in m {
                obj.insert(
                    k.key(),
                    serde_json::Value::Array(
                        v.iter().map(|c| serde_json::Value::String(c.key())).collect(),
                    ),
                );
            }
            serde_json::Value::Object(obj)
        }
        let mut gamma = serde_json::Map::new();
        for (r, entries) in &self.gamma {
            gamma.insert(
                r.key(),
                serde_json::Value::Array(
                    entries
                        .iter()
                        .map(|e| {
                            serde_json::json!({
                                "policy": e.policy.to_string(),
                                "trace": e.trace.to_string(),
                                "labels": e.labels.iter().map(|l| l.to_string()).collect::<Vec<_>>(),
                            })
                        })
                        .collect(),
                ),
            );
        }
        let psi: Vec<serde_json::Value> = self
            .psi
            .iter()
            .map(|d| {
                serde_json::Value::Array(
                    d.0.iter()
                        .map(|f| {
                            serde_json::json!({
                                "resource": f.resource.key(),
                                "policy": f.policy.to_string(),
                                "trace": f.trace.to_string(),
                                "labels": f.labels.iter().map(|l| l.to_string()).collect::<Vec<_>>(),
                            })
                        })
                        .collect(),
                )
            })
            .collect();
        serde_json::json!({
            "rho": names(&self.rho),
            "kappa": names(&self.kappa),
            "gamma": serde_json::Value::Object(gamma),
            "psi": psi,
        })
    }
}

// ---------------------------------------------------------------------------
// Shared clause helpers
// ---------------------------------------------------------------------------

type Env = BTreeMap<Canon, Canon>;

fn resolve(n: &Name, env: &Env) -> Canon {
    let c = Canon::of(n);
    env.get(&c).cloned().unwrap_or(c)
}

fn rightmost_frame(delta: &[Frame], r: &Canon) -> Option<usize> {
    delta.iter().rposition(|f| f.resource == *r)
}

fn run_policy(policies: &PolicyTable, name: &str, trace: &Trace) -> Result<PolicyOutcome> {
    let phi = policies.get(name).ok_or_else(|| Error::UnknownPolicy(name.to_string()))?;
    Ok(phi.run(trace))
}

fn frame_entry(f: &Frame) -> GammaEntry {
    GammaEntry { policy: f.policy.clone(), trace: f.trace.clone(), labels: f.labels.clone() }
}

fn precheck(p: &Term) -> Result<()> {
    if !ast::fully_labeled(p) {
        return Err(Error::Unlabeled);
    }
    if !ast::is_sequential(p) {
        return Err(Error::NonSequential);
    }
    Ok(())
}

fn scope_frame(b: &ast::Boundary, env: &Env) -> Frame {
    Frame {
        resource: resolve(&b.resource, env),
        policy: b.policy.clone(),
        trace: b.state.clone(),
        labels: b.scope_labels(),
    }
}

// ---------------------------------------------------------------------------
// Validation of a given estimate
// ---------------------------------------------------------------------------

/// Check the clause system against `p` under context `delta`. Returns false
/// as soon as one obligation fails.
pub fn validate(
    e: &Estimate,
    policies: &PolicyTable,
    delta: &DeltaContext,
    p: &Arc<Term>,
) -> Result<bool> {
    precheck(p)?;
    vwalk(e, policies, delta.0.clone(), &BTreeMap::new(), p)
}

fn vwalk(
    e: &Estimate,
    policies: &PolicyTable,
    mut delta: Vec<Frame>,
    env: &Env,
    p: &Arc<Term>,
) -> Result<bool> {
    match &**p {
        Term::Nil => {
            // every scope still held must be recorded as re-acquirable
            for f in &delta {
                if !e.gamma_of(&f.resource).contains(&frame_entry(f)) {
                    return Ok(false);
                }
            }
            Ok(true)
        }
        Term::Prefix(prefix, k) => match prefix {
            Prefix::Tau => vwalk(e, policies, delta, env, k),
            Prefix::Output(x, w) => {
                let ws = e.rho_of(&resolve(w, env));
                for a in e.rho_of(&resolve(x, env)) {
                    if !ws.is_subset(&e.kappa_of(&a)) {
                        return Ok(false);
                    }
                }
                vwalk(e, policies, delta, env, k)
            }
            Prefix::Input(x, y) if y.kind == NameKind::ChannelVar => {
                let ys = e.rho_of(&Canon::of(y));
                for a in e.rho_of(&resolve(x, env)) {
                    let chans: BTreeSet<Canon> =
                        e.kappa_of(&a).into_iter().filter(|c| !c.resource).collect();
                    if !chans.is_subset(&ys) {
                        return Ok(false);
                    }
                }
                vwalk(e, policies, delta, env, k)
            }
            Prefix::Input(x, s) => {
                let sc = Canon::of(s);
                let ss = e.rho_of(&sc);
                for a in e.rho_of(&resolve(x, env)) {
                    let ress: BTreeSet<Canon> =
                        e.kappa_of(&a).into_iter().filter(|c| c.resource).collect();
                    if !ress.is_subset(&ss) {
                        return Ok(false);
                    }
                }
                for r in ss {
                    let mut env2 = env.clone();
                    env2.insert(sc.clone(), r);
                    if !vwalk(e, policies, delta.clone(), &env2, k)? {
                        return Ok(false);
                    }
                }
                Ok(true)
            }
            Prefix::Access(alpha, rv) => {
                let r = resolve(rv, env);
                match rightmost_frame(&delta, &r) {
                    Some(i) => {
                        let attempted = delta[i].trace.pushed(Event::Act(alpha.clone()));
                        if run_policy(policies, &delta[i].policy, &attempted)?
                            != PolicyOutcome::Violation
                        {
                            delta[i].trace = attempted;
                            vwalk(e, policies, delta, env, k)
                        } else {
                            let chi = match delta[i].labels.last() {
                                Some(c) => c.clone(),
                                None => return Err(Error::Unlabeled),
                            };
                            let entry = GammaEntry {
                                policy: delta[i].policy.clone(),
                                trace: delta[i]
                                    .trace
                                    .pushed(Event::Special(SpecialAction::ErrOut(chi))),
                                labels: delta[i].labels.clone(),
                            };
                            if !e.gamma_of(&r).contains(&entry) {
                                return Ok(false);
                            }
                            delta.remove(i);
                            vwalk(e, policies, delta, env, k)
                        }
                    }
                    None => Ok(e.psi.contains(&DeltaContext(delta))),
                }
            }
            Prefix::Release(rv) => {
                let r = resolve(rv, env);
                match rightmost_frame(&delta, &r) {
                    Some(i) => {
                        let chi = match delta[i].labels.last() {
                            Some(c) => c.clone(),
                            None => return Err(Error::Unlabeled),
                        };
                        let entry = GammaEntry {
                            policy: delta[i].policy.clone(),
                            trace: delta[i]
                                .trace
                                .pushed(Event::Rel)
                                .pushed(Event::Special(SpecialAction::Out(chi))),
                            labels: delta[i].labels.clone(),
                        };
                        if !e.gamma_of(&r).contains(&entry) {
                            return Ok(false);
                        }
                        delta.remove(i);
                        vwalk(e, policies, delta, env, k)
                    }
                    None => Ok(e.psi.contains(&DeltaContext(delta))),
                }
            }
        },
        Term::Choice(l, r) | Term::Par(l, r) => Ok(vwalk(e, policies, delta.clone(), env, l)?
            && vwalk(e, policies, delta, env, r)?),
        Term::Restrict(x, b) => {
            let c = Canon::of(x);
            if !e.rho_of(&c).contains(&c) {
                return Ok(false);
            }
            vwalk(e, policies, delta, env, b)
        }
        Term::Replicate(b, _) => vwalk(e, policies, delta, env, b),
        Term::Boundary(bd) => {
            if bd.is_available() {
                let r = resolve(&bd.resource, env);
                let entry = GammaEntry {
                    policy: bd.policy.clone(),
                    trace: bd.state.clone(),
                    labels: bd.entered.clone(),
                };
                Ok(e.gamma_of(&r).contains(&entry))
            } else {
                delta.push(scope_frame(bd, env));
                vwalk(e, policies, delta, env, &bd.body)
            }
        }
        Term::Request(rq) => {
            let r = resolve(&rq.resource, env);
            let chi = match &rq.label {
                Some(c) => c.clone(),
                None => return Err(Error::Unlabeled),
            };
            for entry in e.gamma_of(&r) {
                if entry.labels.contains(&chi) {
                    continue;
                }
                let mut labels = entry.labels.clone();
                labels.push(chi.clone());
                let frame = Frame {
                    resource: r.clone(),
                    policy: entry.policy.clone(),
                    trace: entry.trace.pushed(Event::Special(SpecialAction::In(chi.clone()))),
                    labels,
                };
                let mut d2 = delta.clone();
                d2.push(frame);
                if !vwalk(e, policies, d2, env, &rq.body)? {
                    return Ok(false);
                }
            }
            Ok(true)
        }
    }
}

// ---------------------------------------------------------------------------
// Least estimate: worklist fixpoint
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
enum SetRef {
    Rho,
    Kappa,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
enum FlowAction {
    /// For `a` in rho(watch): rho(payload) flows into kappa(a).
    Output { payload: Canon },
    /// For `a` in rho(watch): channel members of kappa(a) flow into rho(binder).
    InputChan { binder: Canon },
    /// For `a` in rho(watch): resource members of kappa(a) flow into rho(binder).
    InputRes { binder: Canon },
}

#[derive(Clone)]
struct AFrame {
    frame: Frame,
    outcome: PolicyOutcome,
}

#[derive(Clone)]
struct BodySub {
    binder: Canon,
    node: Arc<Term>,
    delta: Vec<AFrame>,
    env: Env,
}

#[derive(Clone)]
struct ReqSub {
    node: Arc<Term>,
    delta: Vec<AFrame>,
    env: Env,
}

enum Work {
    Task { node: Arc<Term>, delta: Vec<AFrame>, env: Env },
    AddRho(Canon, Canon),
    AddKappa(Canon, Canon),
    FeedRequest { sub_idx: usize, entry: GammaEntry },
    FeedBody { sub_idx: usize, value: Canon },
}

type Edge = ((SetRef, Canon), (SetRef, Canon), Option<bool>);

struct Analyzer<'a> {
    policies: &'a PolicyTable,
    est: Estimate,
    edges: HashMap<(SetRef, Canon), Vec<((SetRef, Canon), Option<bool>)>>,
    edge_set: HashSet<Edge>,
    watches: HashMap<Canon, Vec<FlowAction>>,
    watch_set: HashSet<(Canon, FlowAction)>,
    body_subs: Vec<BodySub>,
    body_index: HashMap<Canon, Vec<usize>>,
    req_subs: Vec<ReqSub>,
    req_index: HashMap<Canon, Vec<usize>>,
    seen_tasks: HashSet<(usize, Vec<Frame>, Vec<(Canon, Canon)>)>,
    queue: VecDeque<Work>,
    steps: u64,
    ceiling: u64,
}

impl<'a> Analyzer<'a> {
    fn new(policies: &'a PolicyTable, ceiling: u64) -> Self {
        Analyzer {
            policies,
            est: Estimate::default(),
            edges: HashMap::new(),
            edge_set: HashSet::new(),
            watches: HashMap::new(),
            watch_set: HashSet::new(),
            body_subs: Vec::new(),
            body_index: HashMap::new(),
            req_subs: Vec::new(),
            req_index: HashMap::new(),
            seen_tasks: HashSet::new(),
            queue: VecDeque::new(),
            steps: 0,
            ceiling,
        }
    }

    fn policy(&self, name: &str) -> Result<Arc<PolicyAutomaton>> {
        self.policies
            .get(name)
            .cloned()
            .ok_or_else(|| Error::UnknownPolicy(name.to_string()))
    }

    fn members(&self, set: SetRef, key: &Canon) -> BTreeSet<Canon> {
        match set {
            SetRef::Rho => self.est.rho_of(key),
            SetRef::Kappa => self.est.kappa_of(key),
        }
    }

    fn add_member(&mut self, set: SetRef, key: Canon, value: Canon) {
        let inserted = match set {
            SetRef::Rho => self.est.rho.entry(key.clone()).or_default().insert(value.clone()),
            SetRef::Kappa => self.est.kappa.entry(key.clone()).or_default().insert(value.clone()),
        };
        if !inserted {
            return;
        }
        if let Some(outs) = self.edges.get(&(set, key.clone())) {
            for (to, filter) in outs.clone() {
                if filter.map_or(true, |want_res| value.resource == want_res) {
                    self.queue.push_back(match to.0 {
                        SetRef::Rho => Work::AddRho(to.1, value.clone()),
                        SetRef::Kappa => Work::AddKappa(to.1, value.clone()),
                    });
                }
            }
        }
        if set == SetRef::Rho {
            if let Some(actions) = self.watches.get(&key) {
                for a in actions.clone() {
                    self.fire_action(&a, &value);
                }
            }
            if let Some(subs) = self.body_index.get(&key) {
                for idx in subs.clone() {
                    self.queue.push_back(Work::FeedBody { sub_idx: idx, value: value.clone() });
                }
            }
        }
    }

    fn add_edge(&mut self, from: (SetRef, Canon), to: (SetRef, Canon), filter: Option<bool>) {
        if !self.edge_set.insert((from.clone(), to.clone(), filter)) {
            return;
        }
        self.edges.entry(from.clone()).or_default().push((to.clone(), filter));
        for m in self.members(from.0, &from.1) {
            if filter.map_or(true, |want_res| m.resource == want_res) {
                self.queue.push_back(match to.0 {
                    SetRef::Rho => Work::AddRho(to.1.clone(), m),
                    SetRef::Kappa => Work::AddKappa(to.1.clone(), m),
                });
            }
        }
    }

    fn fire_action(&mut self, action: &FlowAction, member: &Canon) {
        match action {
            FlowAction::Output { payload } => {
                // only channels hold values
                if !member.resource {
                    self.add_edge(
                        (SetRef::Rho, payload.clone()),
                        (SetRef::Kappa, member.clone()),
                        None,
                    );
                }
            }
            FlowAction::InputChan { binder } => {
                if !member.resource {
                    self.add_edge(
                        (SetRef::Kappa, member.clone()),
                        (SetRef::Rho, binder.clone()),
                        Some(false),
                    );
                }
            }
            FlowAction::InputRes { binder } => {
                if !member.resource {
                    self.add_edge(
                        (SetRef::Kappa, member.clone()),
                        (SetRef::Rho, binder.clone()),
                        Some(true),
                    );
                }
            }
        }
    }

    fn add_watch(&mut self, watch: Canon, action: FlowAction) {
        if !self.watch_set.insert((watch.clone(), action.clone())) {
            return;
        }
        self.watches.entry(watch.clone()).or_default().push(action.clone());
        for m in self.est.rho_of(&watch) {
            self.fire_action(&action, &m);
        }
    }

    fn add_gamma(&mut self, r: Canon, entry: GammaEntry) {
        if self.est.gamma.entry(r.clone()).or_default().insert(entry.clone()) {
            if let Some(subs) = self.req_index.get(&r) {
                for idx in subs.clone() {
                    self.queue.push_back(Work::FeedRequest { sub_idx: idx, entry: entry.clone() });
                }
            }
        }
    }

    fn spawn(&mut self, node: &Arc<Term>, delta: Vec<AFrame>, env: Env) {
        let key = (
            Arc::as_ptr(node) as usize,
            delta.iter().map(|f| f.frame.clone()).collect::<Vec<_>>(),
            env.iter().map(|(k, v)| (k.clone(), v.clone())).collect::<Vec<_>>(),
        );
        if self.seen_tasks.insert(key) {
            self.queue.push_back(Work::Task { node: node.clone(), delta, env });
        }
    }

    fn feed_request(&mut self, sub_idx: usize, entry: &GammaEntry) -> Result<()> {
        let sub = self.req_subs[sub_idx].clone();
        let Term::Request(rq) = &*sub.node else { return Ok(()) };
        let chi = rq.label.clone().ok_or(Error::Unlabeled)?;
        if entry.labels.contains(&chi) {
            return Ok(());
        }
        let phi = self.policy(&entry.policy)?;
        let trace = entry.trace.pushed(Event::Special(SpecialAction::In(chi.clone())));
        let outcome = phi.run(&trace);
        let mut labels = entry.labels.clone();
        labels.push(chi);
        let frame = AFrame {
            frame: Frame {
                resource: resolve(&rq.resource, &sub.env),
                policy: entry.policy.clone(),
                trace,
                labels,
            },
            outcome,
        };
        let mut delta = sub.delta.clone();
        delta.push(frame);
        self.spawn(&rq.body, delta, sub.env.clone());
        Ok(())
    }

    fn feed_body(&mut self, sub_idx: usize, value: &Canon) {
        let sub = self.body_subs[sub_idx].clone();
        if !value.resource {
            return;
        }
        let mut env = sub.env.clone();
        env.insert(sub.binder.clone(), value.clone());
        self.spawn(&sub.node, sub.delta.clone(), env);
    }

    /// Walk one sequential strand, accumulating obligations.
    fn run_task(&mut self, node: &Arc<Term>, mut delta: Vec<AFrame>, env: Env) -> Result<()> {
        let mut cur = node.clone();
        loop {
            self.steps += 1;
            if self.steps > self.ceiling {
                return Err(Error::FixpointCeiling);
            }
            match &*cur.clone() {
                Term::Nil => {
                    for f in &delta {
                        self.add_gamma(f.frame.resource.clone(), frame_entry(&f.frame));
                    }
                    return Ok(());
                }
                Term::Prefix(prefix, k) => {
                    match prefix {
                        Prefix::Tau => {}
                        Prefix::Output(x, w) => {
                            let xs = resolve(x, &env);
                            let ws = resolve(w, &env);
                            self.add_watch(xs, FlowAction::Output { payload: ws });
                        }
                        Prefix::Input(x, y) if y.kind == NameKind::ChannelVar => {
                            let xs = resolve(x, &env);
                            self.add_watch(xs, FlowAction::InputChan { binder: Canon::of(y) });
                        }
                        Prefix::Input(x, s) => {
                            let xs = resolve(x, &env);
                            let binder = Canon::of(s);
                            self.add_watch(xs, FlowAction::InputRes { binder: binder.clone() });
                            let idx = self.body_subs.len();
                            self.body_subs.push(BodySub {
                                binder: binder.clone(),
                                node: k.clone(),
                                delta: delta.clone(),
                                env: env.clone(),
                            });
                            self.body_index.entry(binder.clone()).or_default().push(idx);
                            for value in self.est.rho_of(&binder) {
                                self.queue.push_back(Work::FeedBody { sub_idx: idx, value });
                            }
                            return Ok(());
                        }
                        Prefix::Access(alpha, rv) => {
                            let r = resolve(rv, &env);
                            match delta.iter().rposition(|f| f.frame.resource == r) {
                                Some(i) => {
                                    let phi = self.policy(&delta[i].frame.policy)?;
                                    let next =
                                        phi.step(delta[i].outcome, &Event::Act(alpha.clone()));
                                    if next == PolicyOutcome::Violation {
                                        let chi = delta[i]
                                            .frame
                                            .labels
                                            .last()
                                            .cloned()
                                            .ok_or(Error::Unlabeled)?;
                                        let entry = GammaEntry {
                                            policy: delta[i].frame.policy.clone(),
                                            trace: delta[i].frame.trace.pushed(Event::Special(
                                                SpecialAction::ErrOut(chi),
                                            )),
                                            labels: delta[i].frame.labels.clone(),
                                        };
                                        self.add_gamma(r, entry);
                                        delta.remove(i);
                                    } else {
                                        delta[i].frame.trace =
                                            delta[i].frame.trace.pushed(Event::Act(alpha.clone()));
                                        delta[i].outcome = next;
                                    }
                                }
                                None => {
                                    let ctx = DeltaContext(
                                        delta.iter().map(|f| f.frame.clone()).collect(),
                                    );
                                    self.est.psi.insert(ctx);
                                    return Ok(());
                                }
                            }
                        }
                        Prefix::Release(rv) => {
                            let r = resolve(rv, &env);
                            match delta.iter().rposition(|f| f.frame.resource == r) {
                                Some(i) => {
                                    let chi = delta[i]
                                        .frame
                                        .labels
                                        .last()
                                        .cloned()
                                        .ok_or(Error::Unlabeled)?;
                                    let entry = GammaEntry {
                                        policy: delta[i].frame.policy.clone(),
                                        trace: delta[i]
                                            .frame
                                            .trace
                                            .pushed(Event::Rel)
                                            .pushed(Event::Special(SpecialAction::Out(chi))),
                                        labels: delta[i].frame.labels.clone(),
                                    };
                                    self.add_gamma(r, entry);
                                    delta.remove(i);
                                }
                                None => {
                                    let ctx = DeltaContext(
                                        delta.iter().map(|f| f.frame.clone()).collect(),
                                    );
                                    self.est.psi.insert(ctx);
                                    return Ok(());
                                }
                            }
                        }
                    }
                    cur = k.clone();
                }
                Term::Choice(l, r) | Term::Par(l, r) => {
                    self.run_task(l, delta.clone(), env.clone())?;
                    cur = r.clone();
                }
                Term::Restrict(x, b) => {
                    let c = Canon::of(x);
                    self.add_member(SetRef::Rho, c.clone(), c);
                    cur = b.clone();
                }
                Term::Replicate(b, _) => {
                    cur = b.clone();
                }
                Term::Boundary(bd) => {
                    if bd.is_available() {
                        let r = resolve(&bd.resource, &env);
                        self.add_gamma(
                            r,
                            GammaEntry {
                                policy: bd.policy.clone(),
                                trace: bd.state.clone(),
                                labels: bd.entered.clone(),
                            },
                        );
                        return Ok(());
                    }
                    let frame = scope_frame(bd, &env);
                    let outcome = self.policy(&frame.policy)?.run(&frame.trace);
                    delta.push(AFrame { frame, outcome });
                    cur = bd.body.clone();
                }
                Term::Request(rq) => {
                    let r = resolve(&rq.resource, &env);
                    let idx = self.req_subs.len();
                    self.req_subs.push(ReqSub {
                        node: cur.clone(),
                        delta: delta.clone(),
                        env: env.clone(),
                    });
                    self.req_index.entry(r.clone()).or_default().push(idx);
                    for entry in self.est.gamma_of(&r) {
                        self.queue.push_back(Work::FeedRequest { sub_idx: idx, entry });
                    }
                    return Ok(());
                }
            }
        }
    }

    fn drain(&mut self) -> Result<()> {
        while let Some(work) = self.queue.pop_front() {
            self.steps += 1;
            if self.steps > self.ceiling {
                return Err(Error::FixpointCeiling);
            }
            match work {
                Work::Task { node, delta, env } => self.run_task(&node, delta, env)?,
                Work::AddRho(k, v) => self.add_member(SetRef::Rho, k, v),
                Work::AddKappa(k, v) => self.add_member(SetRef::Kappa, k, v),
                Work::FeedRequest { sub_idx, entry } => self.feed_request(sub_idx, &entry)?,
                Work::FeedBody { sub_idx, value } => self.feed_body(sub_idx, &value),
            }
        }
        Ok(())
    }
}

fn boundary_label_count(t: &Term) -> u64 {
    match t {
        Term::Nil => 0,
        Term::Prefix(_, k) => boundary_label_count(k),
        Term::Restrict(_, b) | Term::Replicate(b, _) => boundary_label_count(b),
        Term::Choice(l, r) | Term::Par(l, r) => {
            boundary_label_count(l) + boundary_label_count(r)
        }
        Term::Boundary(b) => 1 + boundary_label_count(&b.body),
        Term::Request(r) => 1 + boundary_label_count(&r.body),
    }
}

/// Safety ceiling for the fixpoint, from the label count and term size: label
/// sequences are duplicate-free, so the entry space is bounded by the number
/// of partial label permutations times the per-body trace growth.
fn fixpoint_ceiling(t: &Term) -> u64 {
    let labels = boundary_label_count(t).min(12);
    let mut chains: u64 = 0;
    let mut perm: u64 = 1;
    for k in 0..=labels {
        if k > 0 {
            perm = perm.saturating_mul(labels - k + 1);
        }
        chains = chains.saturating_add(perm);
    }
    let size = t.size() as u64;
    10_000u64
        .saturating_add(chains.saturating_mul(size).saturating_mul(2_000))
        .min(4_000_000_000)
}

/// Compute the pointwise-least estimate valid for `p`.
pub fn least_estimate(p: &Arc<Term>, policies: &PolicyTable) -> Result<Estimate> {
    least_estimate_with_seeds(p, policies, &Estimate::default())
}

/// Least estimate containing the given seed facts; used to build valid
/// non-minimal estimates.
pub fn least_estimate_with_seeds(
    p: &Arc<Term>,
    policies: &PolicyTable,
    seeds: &Estimate,
) -> Result<Estimate> {
    precheck(p)?;
    let mut a = Analyzer::new(policies, fixpoint_ceiling(p));
    for n in ast::free_names(p) {
        let c = Canon::of(&n);
        a.add_member(SetRef::Rho, c.clone(), c);
    }
    for (k, vs) in &seeds.rho {
        for v in vs {
            a.add_member(SetRef::Rho, k.clone(), v.clone());
        }
    }
    for (k, vs) in &seeds.kappa {
        for v in vs {
            a.add_member(SetRef::Kappa, k.clone(), v.clone());
        }
    }
    for (r, es) in &seeds.gamma {
        for e in es {
            a.add_gamma(r.clone(), e.clone());
        }
    }
    for d in &seeds.psi {
        a.est.psi.insert(d.clone());
    }
    a.spawn(p, Vec::new(), Env::new());
    a.drain()?;
    Ok(a.est)
}

/// Entries of `gamma(r)` whose trace records a forced release.
pub fn faulty_traces(e: &Estimate, r: &Name) -> BTreeSet<GammaEntry> {
    e.gamma_of(&Canon::of(r)).into_iter().filter(GammaEntry::is_faulty).collect()
}

/// Static safety: no faulty trace over `r` in the least estimate.
pub fn respects(p: &Arc<Term>, policies: &PolicyTable, r: &Name) -> Result<bool> {
    let e = least_estimate(p, policies)?;
    Ok(faulty_traces(&e, r).is_empty())
}

/// Flatten psi: every frame of every recorded context names a resource that
/// may be left unreleased.
pub fn unreleased_report(e: &Estimate) -> BTreeSet<(Canon, DeltaContext)> {
    let mut out = BTreeSet::new();
    for d in &e.psi {
        for f in &d.0 {
            out.insert((f.resource.clone(), d.clone()));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ast::label_boundaries;
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
        label_boundaries(&parse_process(src).unwrap()).unwrap()
    }

    #[test]
    fn empty_process_has_empty_estimate() {
        let e = least_estimate(&Term::nil(), &policies()).unwrap();
        assert!(e.rho.is_empty());
        assert!(e.kappa.is_empty());
        assert!(e.gamma.is_empty());
        assert!(e.psi.is_empty());
    }

    #[test]
    fn least_estimate_validates_by_construction() {
        let t = prep(
            "res #r, phi, eps { 0 } @c | req #r { go(#r). rel(#r). 0 } @w | x<#r>. 0",
        );
        let e = least_estimate(&t, &policies()).unwrap();
        assert!(validate(&e, &policies(), &DeltaContext::empty(), &t).unwrap());
    }

    #[test]
    fn empty_gamma_fails_available_clause() {
        let t = prep("res #r, phi, eps { 0 } @c");
        let e = Estimate::default();
        assert!(!validate(&e, &policies(), &DeltaContext::empty(), &t).unwrap());
    }

    #[test]
    fn non_sequential_body_is_rejected() {
        let t = prep("req #r { tau. 0 | tau. 0 }");
        assert!(matches!(
            least_estimate(&t, &policies()),
            Err(Error::NonSequential)
        ));
    }

    #[test]
    fn release_without_scope_lands_in_psi() {
        let t = prep("req #r { rel(#t). 0 } @w | res #r, phi, eps { 0 } @c");
        let e = least_estimate(&t, &policies()).unwrap();
        assert_eq!(e.psi.len(), 1);
        let report = unreleased_report(&e);
        assert!(report.iter().any(|(r, _)| r.key() == "#r"));
        assert!(validate(&e, &policies(), &DeltaContext::empty(), &t).unwrap());
    }

    #[test]
    fn intersection_and_subset_are_pointwise() {
        let mut a = Estimate::default();
        let mut b = Estimate::default();
        let x = Canon::channel("x");
        let h = Canon::resource("h");
        let m = Canon::resource("m");
        a.rho.entry(x.clone()).or_default().extend([h.clone(), m.clone()]);
        b.rho.entry(x.clone()).or_default().insert(h.clone());
        let i = a.intersect(&b);
        assert_eq!(i.rho_of(&x), [h].into_iter().collect());
        assert!(i.is_subset_of(&a));
        assert!(i.is_subset_of(&b));
        assert!(!a.is_subset_of(&b));
    }

    #[test]
    fn estimate_json_is_stable() {
        let t = prep("res #r, phi, eps { 0 } @c");
        let e = least_estimate(&t, &policies()).unwrap();
        let a = serde_json::to_string(&e.to_json()).unwrap();
        let b = serde_json::to_string(&least_estimate(&t, &policies()).unwrap().to_json()).unwrap();
        assert_eq!(a, b);
        assert!(a.contains("\"gamma\""));
    }
}
