//! Bounded exhaustive exploration of the transition system, dynamic
//! compliance checking, and reproducible random runs.
//!
//! State identity is the congruence-normal form of a term; only complete
//! steps (internal synchronizations and policed resource actions) become
//! edges of the explored graph.

use std::collections::{HashMap, VecDeque};
use std::sync::Arc;

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use rayon::prelude::*;

use crate::ast::{self, Name, Term};
use crate::error::{Error, Result};
use crate::policy::PolicyTable;
use crate::semantics::{congruence_normalize, replication_unfold, step, ReconfigEvent, StepMode, TransitionLabel};

/// Exploration bounds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Bounds {
    pub depth: u32,
    pub replication_budget: u32,
    pub node_cap: usize,
}

impl Default for Bounds {
    fn default() -> Self {
        Bounds { depth: 50, replication_budget: 2, node_cap: 100_000 }
    }
}

/// Explored fragment of the labeled transition system.
#[derive(Debug, Clone)]
pub struct LtsGraph {
    pub nodes: Vec<Arc<Term>>,
    /// Depth at which each node was first reached.
    pub depths: Vec<u32>,
    pub edges: Vec<(usize, TransitionLabel, usize)>,
    /// Index of the edge that first reached each node, for witness paths.
    pred: Vec<Option<usize>>,
    pub root: usize,
    pub truncated: bool,
    pub bounds: Bounds,
}

impl LtsGraph {
    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    /// Label path from the root to the target of the given edge, inclusive.
    pub fn path_to_edge(&self, edge_idx: usize) -> Vec<TransitionLabel> {
        let mut labels = Vec::new();
        let mut cur = Some(edge_idx);
        while let Some(e) = cur {
            let (src, label, _) = &self.edges[e];
            labels.push(label.clone());
            cur = self.pred[*src];
        }
        labels.reverse();
        labels
    }

    /// Line-based edge list: `src<TAB>label<TAB>dst`.
    pub fn edge_list(&self) -> String {
        let mut out = String::new();
        for (s, l, d) in &self.edges {
            out.push_str(&format!("{s}\t{l}\t{d}\n"));
        }
        out
    }

    /// JSON document with nodes, edges and bounds; keys are sorted.
    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!({
            "root": self.root,
            "truncated": self.truncated,
            "bounds": {
                "depth": self.bounds.depth,
                "replication_budget": self.bounds.replication_budget,
                "node_cap": self.bounds.node_cap,
            },
            "nodes": self.nodes.iter().enumerate().map(|(i, n)| serde_json::json!({
                "id": i,
                "depth": self.depths[i],
                "term": n.to_string(),
            })).collect::<Vec<_>>(),
            "edges": self.edges.iter().map(|(s, l, d)| serde_json::json!({
                "src": s,
                "label": l.to_string(),
                "dst": d,
            })).collect::<Vec<_>>(),
        })
    }
}

/// Dynamic compliance verdict.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ComplianceStatus {
    Complies,
    Violates,
    Inconclusive,
}

#[derive(Debug, Clone)]
pub struct Verdict {
    pub status: ComplianceStatus,
    /// For violations: label path from the root ending in the faulty action.
    pub witness: Option<Vec<TransitionLabel>>,
    pub nodes_explored: usize,
    pub edges_explored: usize,
    pub truncated: bool,
}

fn prepare(p: &Arc<Term>, bounds: &Bounds) -> Result<Arc<Term>> {
    if !ast::fully_labeled(p) {
        return Err(Error::Unlabeled);
    }
    Ok(congruence_normalize(&replication_unfold(p, bounds.replication_budget)))
}

/// Breadth-first exploration over complete steps with canonical-form
/// deduplication. When a reconfiguration script is present, state identity
/// additionally includes the depth, since events fire at fixed steps.
pub fn explore(
    p: &Arc<Term>,
    policies: &PolicyTable,
    script: &[ReconfigEvent],
    bounds: Bounds,
    jobs: usize,
) -> Result<LtsGraph> {
    let root = prepare(p, &bounds)?;
    let depth_sensitive = !script.is_empty();

    let mut nodes: Vec<Arc<Term>> = vec![root.clone()];
    let mut depths: Vec<u32> = vec![0];
    let mut pred: Vec<Option<usize>> = vec![None];
    let mut edges: Vec<(usize, TransitionLabel, usize)> = Vec::new();
    let mut seen: HashMap<(Arc<Term>, u32), usize> = HashMap::new();
    seen.insert((root, if depth_sensitive { 0 } else { u32::MAX }), 0);

    let mut frontier: Vec<usize> = vec![0];
    let mut depth = 0u32;
    let mut truncated = false;

    while !frontier.is_empty() {
        if depth >= bounds.depth {
            truncated = true;
            break;
        }
        let expansions: Vec<(usize, Vec<(TransitionLabel, Arc<Term>)>)> = if jobs > 1 {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(jobs)
                .build()
                .map_err(|e| Error::Io(std::io::Error::other(e.to_string())))?;
            let snapshot: Vec<(usize, Arc<Term>)> =
                frontier.iter().map(|&i| (i, nodes[i].clone())).collect();
            pool.install(|| {
                snapshot
                    .par_iter()
                    .map(|(i, t)| Ok((*i, step(t, policies, script, depth as u64, StepMode::Plain)?)))
                    .collect::<Result<Vec<_>>>()
            })?
        } else {
            let mut v = Vec::with_capacity(frontier.len());
            for &i in &frontier {
                v.push((i, step(&nodes[i], policies, script, depth as u64, StepMode::Plain)?));
            }
            v
        };

        let mut next_frontier = Vec::new();
        'expand: for (src, succs) in expansions {
            for (label, term) in succs {
                if !label.is_complete() {
                    continue;
                }
                let key = (term.clone(), if depth_sensitive { depth + 1 } else { u32::MAX });
                let dst = match seen.get(&key) {
                    Some(&id) => id,
                    None => {
                        if nodes.len() >= bounds.node_cap {
                            truncated = true;
                            break 'expand;
                        }
                        let id = nodes.len();
                        nodes.push(term);
                        depths.push(depth + 1);
                        pred.push(Some(edges.len()));
                        seen.insert(key, id);
                        next_frontier.push(id);
                        id
                    }
                };
                edges.push((src, label, dst));
            }
        }
        frontier = next_frontier;
        depth += 1;
    }

    Ok(LtsGraph { nodes, depths, edges, pred, root: 0, truncated, bounds })
}

/// Check whether the process can ever lose resource `r` to a policy
/// violation. `violates` comes with a replayable witness; `complies` is
/// claimed only when exploration was exhaustive within the bounds.
pub fn complies_with(
    p: &Arc<Term>,
    resource: &Name,
    policies: &PolicyTable,
    script: &[ReconfigEvent],
    bounds: Bounds,
    jobs: usize,
) -> Result<Verdict> {
    let declared = ast::declared_resources(p);
    let scripted = script.iter().any(|ev| match ev {
        ReconfigEvent::Appear { resource: r, .. } | ReconfigEvent::Disappear { resource: r, .. } => {
            r.same_canonical(resource)
        }
    });
    if !declared.iter().any(|r| r.same_canonical(resource)) && !scripted {
        return Err(Error::UndeclaredResource(resource.to_string()));
    }
    let graph = explore(p, policies, script, bounds, jobs)?;
    let hit = graph.edges.iter().enumerate().find(|(_, (_, l, _))| {
        matches!(l, TransitionLabel::FaultyAccess(_, r) if r.same_canonical(resource))
    });
    let verdict = match hit {
        Some((idx, _)) => Verdict {
            status: ComplianceStatus::Violates,
            witness: Some(graph.path_to_edge(idx)),
            nodes_explored: graph.node_count(),
            edges_explored: graph.edge_count(),
            truncated: graph.truncated,
        },
        None => Verdict {
            status: if graph.truncated {
                ComplianceStatus::Inconclusive
            } else {
                ComplianceStatus::Complies
            },
            witness: None,
            nodes_explored: graph.node_count(),
            edges_explored: graph.edge_count(),
            truncated: graph.truncated,
        },
    };
    Ok(verdict)
}

/// One random maximal run of at most `max_steps` complete steps; the same
/// seed always yields the same trace.
pub fn run_random(
    p: &Arc<Term>,
    policies: &PolicyTable,
    script: &[ReconfigEvent],
    seed: u64,
    max_steps: u32,
    budget: u32,
) -> Result<Vec<TransitionLabel>> {
    let bounds = Bounds { replication_budget: budget, ..Bounds::default() };
    let mut cur = prepare(p, &bounds)?;
    let mut rng = StdRng::seed_from_u64(seed);
    let mut out = Vec::new();
    for idx in 0..max_steps {
        let succs: Vec<(TransitionLabel, Arc<Term>)> =
            step(&cur, policies, script, idx as u64, StepMode::Plain)?
                .into_iter()
                .filter(|(l, _)| l.is_complete())
                .collect();
        if succs.is_empty() {
            break;
        }
        let pick = rng.gen_range(0..succs.len());
        let (label, next) = succs[pick].clone();
        out.push(label);
        cur = next;
    }
    Ok(out)
}

/// Check that a label path is actually executable from `p`. Used to replay
/// violation witnesses.
pub fn replay(
    p: &Arc<Term>,
    policies: &PolicyTable,
    script: &[ReconfigEvent],
    bounds: Bounds,
    witness: &[TransitionLabel],
) -> Result<bool> {
    let root = prepare(p, &bounds)?;
    fn go(
        cur: &Arc<Term>,
        policies: &PolicyTable,
        script: &[ReconfigEvent],
        idx: u64,
        rest: &[TransitionLabel],
    ) -> Result<bool> {
        let Some((want, tail)) = rest.split_first() else {
            return Ok(true);
        };
        for (label, next) in step(cur, policies, script, idx, StepMode::Plain)? {
            if label == *want && go(&next, policies, script, idx + 1, tail)? {
                return Ok(true);
            }
        }
        Ok(false)
    }
    go(&root, policies, script, 0, witness)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ast::label_boundaries;
    use crate::parser::{parse_policy_file, parse_process};

    fn policies() -> PolicyTable {
        parse_policy_file("policy phi { initial q; missing stay; }").unwrap()
    }

    fn prep(src: &str) -> Arc<Term> {
        label_boundaries(&parse_process(src).unwrap()).unwrap()
    }

    #[test]
    fn explores_nil_as_single_node() {
        let g = explore(&Term::nil(), &policies(), &[], Bounds::default(), 1).unwrap();
        assert_eq!(g.node_count(), 1);
        assert_eq!(g.edge_count(), 0);
        assert!(!g.truncated);
    }

    #[test]
    fn node_cap_sets_truncated() {
        let t = prep("tau. tau. tau. tau. 0");
        let bounds = Bounds { node_cap: 2, ..Bounds::default() };
        let g = explore(&t, &policies(), &[], bounds, 1).unwrap();
        assert!(g.truncated);
        assert!(g.node_count() <= 2);
    }

    #[test]
    fn depth_bound_sets_truncated() {
        let t = prep("tau. tau. tau. 0");
        let bounds = Bounds { depth: 1, ..Bounds::default() };
        let g = explore(&t, &policies(), &[], bounds, 1).unwrap();
        assert!(g.truncated);
    }

    #[test]
    fn run_random_on_nil_is_empty() {
        let tr = run_random(&Term::nil(), &policies(), &[], 7, 10, 2).unwrap();
        assert!(tr.is_empty());
    }

    #[test]
    fn run_random_is_deterministic() {
        let t = prep("tau. 0 | tau. tau. 0 | (tau. 0 + tau. tau. 0)");
        let a = run_random(&t, &policies(), &[], 42, 20, 2).unwrap();
        let b = run_random(&t, &policies(), &[], 42, 20, 2).unwrap();
        assert_eq!(a, b);
        assert!(!a.is_empty());
    }

    #[test]
    fn undeclared_resource_is_rejected() {
        let t = prep("tau. 0");
        let err = complies_with(&t, &Name::resource("ghost"), &policies(), &[], Bounds::default(), 1);
        assert!(matches!(err, Err(Error::UndeclaredResource(_))));
    }

    #[test]
    fn parallel_exploration_matches_sequential() {
        let t = prep("req #r { go(#r). rel(#r). 0 } @w | res #r, phi, eps { 0 } @c | tau. 0");
        let g1 = explore(&t, &policies(), &[], Bounds::default(), 1).unwrap();
        let g2 = explore(&t, &policies(), &[], Bounds::default(), 3).unwrap();
        assert_eq!(g1.node_count(), g2.node_count());
        assert_eq!(g1.edge_count(), g2.edge_count());
        let mut e1 = g1.edges.clone();
        let mut e2 = g2.edges.clone();
        e1.sort();
        e2.sort();
        assert_eq!(e1, e2);
    }

    #[test]
    fn monotone_in_depth_bound() {
        let t = prep("tau. tau. tau. 0 | tau. 0");
        let mut last = 0;
        for d in 1..6 {
            let g = explore(
                &t,
                &policies(),
                &[],
                Bounds { depth: d, ..Bounds::default() },
                1,
            )
            .unwrap();
            assert!(g.node_count() >= last);
            last = g.node_count();
        }
    }
}
