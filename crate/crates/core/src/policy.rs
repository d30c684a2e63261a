//! Policy automata.
//!
//! A policy is a deterministic automaton over action names whose violating
//! states mark forbidden usage traces. Releases and the special analysis
//! actions never move the automaton, so a trace and its dynamic projection
//! always get the same verdict.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::sync::Arc;

use crate::ast::{ActionName, Event, Trace};
use crate::error::{Error, Result};

/// What to do with an action that has no transition from the current state.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MissingRule {
    Violate,
    Stay,
}

/// Result of running a policy over a trace.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PolicyOutcome {
    State(u32),
    Violation,
}

#[derive(Debug, Clone)]
pub struct PolicyAutomaton {
    pub name: Arc<str>,
    states: Vec<Arc<str>>,
    initial: u32,
    violating: BTreeSet<u32>,
    transitions: BTreeMap<(u32, ActionName), u32>,
    missing: MissingRule,
}

impl PolicyAutomaton {
    pub fn build(
        name: &str,
        initial: &str,
        violating: &[&str],
        transitions: &[(&str, &str, &str)],
        missing: MissingRule,
    ) -> Result<Self> {
        let mut b = PolicyBuilder::new(name, missing);
        b.set_initial(initial);
        for v in violating {
            b.mark_violating(v);
        }
        for (from, act, to) in transitions {
            b.add_transition(from, act, to)?;
        }
        Ok(b.finish())
    }

    pub fn state_count(&self) -> usize {
        self.states.len()
    }

    pub fn state_name(&self, id: u32) -> &str {
        &self.states[id as usize]
    }

    pub fn state_names(&self) -> impl Iterator<Item = &str> {
        self.states.iter().map(|s| s.as_ref())
    }

    pub fn initial_state(&self) -> u32 {
        self.initial
    }

    pub fn is_violating(&self, id: u32) -> bool {
        self.violating.contains(&id)
    }

    pub fn violating_states(&self) -> impl Iterator<Item = &str> {
        self.violating.iter().map(|id| self.state_name(*id))
    }

    pub fn missing_rule(&self) -> MissingRule {
        self.missing
    }

    pub fn transitions(&self) -> impl Iterator<Item = (&str, &ActionName, &str)> {
        self.transitions
            .iter()
            .map(|((from, act), to)| (self.state_name(*from), act, self.state_name(*to)))
    }

    /// Advance one event from an outcome. Violation is absorbing; `rel` and
    /// special actions leave the state unchanged.
    pub fn step(&self, from: PolicyOutcome, ev: &Event) -> PolicyOutcome {
        let state = match from {
            PolicyOutcome::Violation => return PolicyOutcome::Violation,
            PolicyOutcome::State(s) => s,
        };
        let act = match ev {
            Event::Act(a) => a,
            Event::Rel | Event::Special(_) => return from,
        };
        let next = match self.transitions.get(&(state, act.clone())) {
            Some(n) => *n,
            None => match self.missing {
                MissingRule::Violate => return PolicyOutcome::Violation,
                MissingRule::Stay => state,
            },
        };
        if self.violating.contains(&next) {
            PolicyOutcome::Violation
        } else {
            PolicyOutcome::State(next)
        }
    }

    /// Fold a trace from the initial state.
    pub fn run(&self, eta: &Trace) -> PolicyOutcome {
        let mut cur = if self.violating.contains(&self.initial) {
            PolicyOutcome::Violation
        } else {
            PolicyOutcome::State(self.initial)
        };
        for ev in &eta.0 {
            cur = self.step(cur, ev);
        }
        cur
    }

    /// `eta |= phi`: the trace stays clear of every violating state.
    pub fn admits(&self, eta: &Trace) -> bool {
        self.run(eta) != PolicyOutcome::Violation
    }
}

pub struct PolicyBuilder {
    name: Arc<str>,
    states: Vec<Arc<str>>,
    index: HashMap<Arc<str>, u32>,
    initial: u32,
    violating: BTreeSet<u32>,
    transitions: BTreeMap<(u32, ActionName), u32>,
    missing: MissingRule,
}

impl PolicyBuilder {
    pub fn new(name: &str, missing: MissingRule) -> Self {
        PolicyBuilder {
            name: name.into(),
            states: Vec::new(),
            index: HashMap::new(),
            initial: 0,
            violating: BTreeSet::new(),
            transitions: BTreeMap::new(),
            missing,
        }
    }

    fn intern(&mut self, state: &str) -> u32 {
        if let Some(id) = self.index.get(state) {
            return *id;
        }
        let id = self.states.len() as u32;
        let s: Arc<str> = state.into();
        self.states.push(s.clone());
        self.index.insert(s, id);
        id
    }

    pub fn set_initial(&mut self, state: &str) {
        self.initial = self.intern(state);
    }

    pub fn mark_violating(&mut self, state: &str) {
        let id = self.intern(state);
        self.violating.insert(id);
    }

    pub fn add_transition(&mut self, from: &str, action: &str, to: &str) -> Result<()> {
        let f = self.intern(from);
        let t = self.intern(to);
        let key = (f, ActionName::new(action));
        if let Some(prev) = self.transitions.get(&key) {
            if *prev != t {
                return Err(Error::NondeterministicPolicy {
                    policy: self.name.to_string(),
                    state: from.to_string(),
                    action: action.to_string(),
                });
            }
        }
        self.transitions.insert(key, t);
        Ok(())
    }

    pub fn finish(self) -> PolicyAutomaton {
        PolicyAutomaton {
            name: self.name,
            states: self.states,
            initial: self.initial,
            violating: self.violating,
            transitions: self.transitions,
            missing: self.missing,
        }
    }
}

/// Movement policy over the 3x3 grid used by the robot scenario: one state
/// per cell `p0..p8`, moves follow grid adjacency, entering the faulty cell
/// `p5` (or leaving the grid) violates.
///
/// Cell layout, west to east and south to north:
/// `p1 p3 p6` / `p0 p4 p7` / `p2 p5 p8`.
pub fn grid_item_policy(name: &str) -> PolicyAutomaton {
    let cells = [
        ("p1", (0, 0)),
        ("p3", (1, 0)),
        ("p6", (2, 0)),
        ("p0", (0, 1)),
        ("p4", (1, 1)),
        ("p7", (2, 1)),
        ("p2", (0, 2)),
        ("p5", (1, 2)),
        ("p8", (2, 2)),
    ];
    let at = |x: i32, y: i32| cells.iter().find(|(_, c)| *c == (x, y)).map(|(n, _)| *n);
    let mut b = PolicyBuilder::new(name, MissingRule::Violate);
    b.set_initial("p0");
    b.mark_violating("p5");
    for (from, (x, y)) in cells {
        for (act, dx, dy) in [("E", 1, 0), ("W", -1, 0), ("N", 0, 1), ("S", 0, -1)] {
            if let Some(to) = at(x + dx, y + dy) {
                b.add_transition(from, act, to).expect("grid policy is deterministic");
            }
        }
    }
    b.finish()
}

/// Named policies a document resolves against.
#[derive(Debug, Clone, Default)]
pub struct PolicyTable {
    policies: BTreeMap<Arc<str>, Arc<PolicyAutomaton>>,
}

impl PolicyTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, p: PolicyAutomaton) {
        self.policies.insert(p.name.clone(), Arc::new(p));
    }

    pub fn get(&self, name: &str) -> Option<&Arc<PolicyAutomaton>> {
        self.policies.get(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.policies.keys().map(|k| k.as_ref())
    }

    pub fn merge(&mut self, other: PolicyTable) {
        self.policies.extend(other.policies);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ast::{BoundaryLabel, SpecialAction};

    fn phi_m() -> PolicyAutomaton {
        PolicyAutomaton::build(
            "phi_m",
            "m0",
            &[],
            &[("m0", "soft_hit", "m0")],
            MissingRule::Violate,
        )
        .unwrap()
    }

    /// Independent oracle for grid policies: walk the 3x3 grid from a given
    /// cell, one step per move, failing on off-grid moves or on entering the
    /// bad cell.
    fn grid_walk(start: (i32, i32), moves: &str, bad: (i32, i32)) -> bool {
        let mut pos = start;
        for m in moves.split('.') {
            let (dx, dy) = match m {
                "E" => (1, 0),
                "W" => (-1, 0),
                "N" => (0, 1),
                "S" => (0, -1),
                "rel" => (0, 0),
                other => panic!("unknown move {other}"),
            };
            pos = (pos.0 + dx, pos.1 + dy);
            if pos.0 < 0 || pos.0 > 2 || pos.1 < 0 || pos.1 > 2 || pos == bad {
                return false;
            }
        }
        true
    }

    /// Full-grid item policy: cells named p0..p8, bad cell p5.
    fn phi_item() -> PolicyAutomaton {
        grid_item_policy("phi_it")
    }

    #[test]
    fn run_on_empty_trace_is_initial() {
        let p = phi_m();
        assert_eq!(p.run(&Trace::empty()), PolicyOutcome::State(p.initial_state()));
    }

    #[test]
    fn soft_hit_is_admitted_by_mallet_policy() {
        assert!(phi_m().admits(&Trace::from_actions(&["soft_hit"])));
    }

    #[test]
    fn hard_hit_violates_mallet_policy() {
        assert_eq!(phi_m().run(&Trace::from_actions(&["hard_hit"])), PolicyOutcome::Violation);
    }

    #[test]
    fn item_policy_matches_grid_walker() {
        // p0 is the west-middle cell (0,1); p5 the north-middle cell (1,2).
        let phi = phi_item();
        for (trace, start) in [("E.S.rel", (0, 1)), ("E.S.rel.N.N", (0, 1)), ("E.E", (0, 1))] {
            let expect = grid_walk(start, trace, (1, 2));
            let events: Vec<&str> = trace.split('.').collect();
            let tr = Trace(
                events
                    .iter()
                    .map(|e| {
                        if *e == "rel" {
                            Event::Rel
                        } else {
                            Event::Act(ActionName::new(e))
                        }
                    })
                    .collect(),
            );
            assert_eq!(phi.admits(&tr), expect, "trace {trace}");
        }
    }

    #[test]
    fn item_policy_frozen_verdicts() {
        // frozen from the grid-walker oracle above
        let phi = phi_item();
        let ok = Trace(vec![
            Event::Act(ActionName::new("E")),
            Event::Act(ActionName::new("S")),
            Event::Rel,
        ]);
        assert!(phi.admits(&ok));
        let bad = Trace(vec![
            Event::Act(ActionName::new("E")),
            Event::Act(ActionName::new("S")),
            Event::Rel,
            Event::Act(ActionName::new("N")),
            Event::Act(ActionName::new("N")),
        ]);
        assert!(!phi.admits(&bad));
    }

    #[test]
    fn admits_empty_iff_initial_not_violating() {
        let rejecting = PolicyAutomaton::build("bad", "b", &["b"], &[], MissingRule::Stay).unwrap();
        assert!(!rejecting.admits(&Trace::empty()));
        assert!(phi_m().admits(&Trace::empty()));
    }

    #[test]
    fn violation_is_absorbing() {
        let p = phi_m();
        let mut tr = Trace::from_actions(&["hard_hit"]);
        assert!(!p.admits(&tr));
        for act in ["soft_hit", "hard_hit", "soft_hit"] {
            tr = tr.pushed(Event::Act(ActionName::new(act)));
            assert!(!p.admits(&tr));
        }
    }

    #[test]
    fn specials_and_rel_are_transparent() {
        let p = phi_m();
        let plain = Trace::from_actions(&["soft_hit", "soft_hit"]);
        let noisy = Trace(vec![
            Event::Special(SpecialAction::In(BoundaryLabel::new("c"))),
            Event::Act(ActionName::new("soft_hit")),
            Event::Rel,
            Event::Special(SpecialAction::Out(BoundaryLabel::new("c"))),
            Event::Act(ActionName::new("soft_hit")),
            Event::Special(SpecialAction::ErrOut(BoundaryLabel::new("d"))),
        ]);
        assert_eq!(p.run(&plain), p.run(&noisy));
    }

    #[test]
    fn rejects_nondeterministic_transitions() {
        let err = PolicyAutomaton::build(
            "nd",
            "a",
            &[],
            &[("a", "go", "b"), ("a", "go", "c")],
            MissingRule::Violate,
        );
        assert!(err.is_err());
    }
}
