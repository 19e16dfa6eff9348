//! Call-stack divergence inside mixed methods.
//!
//! The stacks of every request issued by one mixed method are merged into a
//! call graph over `(script, method)` nodes. Nodes that only ever appear in
//! tracking stacks are the points of divergence; the one closest to a root
//! (outermost frame) is reported first.

use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};

use serde::Serialize;

use crate::attribution::{EntityKey, Granularity, MethodId};
use crate::filter::Label;
use crate::sifter::{LabeledRequest, SiftResult, Verdict};
use crate::trace::StackFrame;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub enum Participation {
    TrackingOnly,
    FunctionalOnly,
    Both,
}

impl Participation {
    fn with(self, label: Label) -> Self {
        match (self, label) {
            (Participation::TrackingOnly, Label::Tracking) => Participation::TrackingOnly,
            (Participation::FunctionalOnly, Label::Functional) => Participation::FunctionalOnly,
            _ => Participation::Both,
        }
    }

    fn of(label: Label) -> Self {
        match label {
            Label::Tracking => Participation::TrackingOnly,
            Label::Functional => Participation::FunctionalOnly,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct CallGraph {
    pub nodes: BTreeMap<MethodId, Participation>,
    /// caller -> callee
    pub edges: BTreeSet<(MethodId, MethodId)>,
    pub roots: BTreeSet<MethodId>,
}

/// Merges labeled stacks (most recent frame first) into one graph.
pub fn build_call_graph<'a, I>(stacks: I, positional_identity: bool) -> CallGraph
where
    I: IntoIterator<Item = (Label, &'a [StackFrame])>,
{
    let mut graph = CallGraph::default();
    for (label, frames) in stacks {
        let ids: Vec<MethodId> = frames
            .iter()
            .map(|f| MethodId::of_frame(f, positional_identity))
            .collect();
        // A node appearing twice in one stack is tagged once.
        for id in ids.iter().collect::<BTreeSet<_>>() {
            graph
                .nodes
                .entry(id.clone())
                .and_modify(|p| *p = p.with(label))
                .or_insert(Participation::of(label));
        }
        for pair in ids.windows(2) {
            graph.edges.insert((pair[1].clone(), pair[0].clone()));
        }
        if let Some(outermost) = ids.last() {
            graph.roots.insert(outermost.clone());
        }
    }
    graph
}

impl CallGraph {
    /// Shortest number of edges from any root, by breadth-first search.
    pub fn root_distances(&self) -> HashMap<&MethodId, usize> {
        let mut adjacency: HashMap<&MethodId, Vec<&MethodId>> = HashMap::new();
        for (caller, callee) in &self.edges {
            adjacency.entry(caller).or_default().push(callee);
        }
        let mut dist: HashMap<&MethodId, usize> = HashMap::new();
        let mut queue = VecDeque::new();
        for root in &self.roots {
            dist.insert(root, 0);
            queue.push_back(root);
        }
        while let Some(node) = queue.pop_front() {
            let d = dist[node];
            for &next in adjacency.get(node).map(Vec::as_slice).unwrap_or_default() {
                if !dist.contains_key(next) {
                    dist.insert(next, d + 1);
                    queue.push_back(next);
                }
            }
        }
        dist
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct DivergencePoint {
    pub script_url: String,
    pub method_name: String,
    pub root_distance: usize,
}

/// Tracking-only nodes ordered by root distance, then by (script, method).
pub fn points_of_divergence(graph: &CallGraph) -> Vec<DivergencePoint> {
    let dist = graph.root_distances();
    let mut points: Vec<DivergencePoint> = graph
        .nodes
        .iter()
        .filter(|(_, p)| **p == Participation::TrackingOnly)
        .map(|(id, _)| DivergencePoint {
            script_url: id.script_url.clone(),
            method_name: id.method_name.clone(),
            root_distance: dist.get(id).copied().unwrap_or(usize::MAX),
        })
        .collect();
    points.sort_by(|a, b| {
        (a.root_distance, &a.script_url, &a.method_name).cmp(&(
            b.root_distance,
            &b.script_url,
            &b.method_name,
        ))
    });
    points
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub struct ReplayOutcome {
    pub removed_tracking: usize,
    pub removed_functional: usize,
    pub remaining_tracking: usize,
    pub remaining_functional: usize,
}

/// Drops every stack that passes through any of `nodes` and counts what is left.
pub fn replay_removal<'a, I>(
    stacks: I,
    nodes: &[MethodId],
    positional_identity: bool,
) -> ReplayOutcome
where
    I: IntoIterator<Item = (Label, &'a [StackFrame])>,
{
    let targets: BTreeSet<&MethodId> = nodes.iter().collect();
    let mut out = ReplayOutcome::default();
    for (label, frames) in stacks {
        let hit = frames
            .iter()
            .any(|f| targets.contains(&MethodId::of_frame(f, positional_identity)));
        match (label, hit) {
            (Label::Tracking, true) => out.removed_tracking += 1,
            (Label::Tracking, false) => out.remaining_tracking += 1,
            (Label::Functional, true) => out.removed_functional += 1,
            (Label::Functional, false) => out.remaining_functional += 1,
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct GraphNode {
    pub script_url: String,
    pub method_name: String,
    pub participation: Participation,
    pub is_root: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct MethodDivergence {
    pub script_url: String,
    pub method_name: String,
    pub tracking_requests: u64,
    pub functional_requests: u64,
    pub divergence: Vec<DivergencePoint>,
    /// Outcome of removing the stacks through the first divergence point.
    pub first_point_replay: Option<ReplayOutcome>,
    pub nodes: Vec<GraphNode>,
    pub edges: Vec<[String; 4]>,
}

/// Runs the divergence analysis for every mixed method of a sift.
pub fn analyze_mixed_methods(
    result: &SiftResult,
    requests: &[LabeledRequest],
) -> Vec<MethodDivergence> {
    let positional = result.positional_identity;
    let by_id: HashMap<&str, &LabeledRequest> = requests
        .iter()
        .map(|r| (r.record.request_id.as_str(), r))
        .collect();
    let level = result.level(Granularity::Method);

    let mut stacks_by_method: BTreeMap<&MethodId, Vec<(Label, &[StackFrame])>> = BTreeMap::new();
    for attribution in &level.attributions {
        if attribution.verdict != Verdict::Mixed {
            continue;
        }
        let EntityKey::Method(method) = &attribution.key else {
            continue;
        };
        if let Some(req) = by_id.get(attribution.request_id.as_str()) {
            stacks_by_method
                .entry(method)
                .or_default()
                .push((req.label, req.record.call_stack.as_slice()));
        }
    }

    stacks_by_method
        .into_iter()
        .map(|(method, stacks)| {
            let graph = build_call_graph(stacks.iter().copied(), positional);
            let divergence = points_of_divergence(&graph);
            let first_point_replay = divergence.first().map(|p| {
                let id = MethodId::new(p.script_url.clone(), p.method_name.clone());
                replay_removal(stacks.iter().copied(), &[id], positional)
            });
            let stats = level
                .entity(&EntityKey::Method(method.clone()))
                .expect("mixed method has stats");
            MethodDivergence {
                script_url: method.script_url.clone(),
                method_name: method.method_name.clone(),
                tracking_requests: stats.tracking_count,
                functional_requests: stats.functional_count,
                divergence,
                first_point_replay,
                nodes: graph
                    .nodes
                    .iter()
                    .map(|(id, p)| GraphNode {
                        script_url: id.script_url.clone(),
                        method_name: id.method_name.clone(),
                        participation: *p,
                        is_root: graph.roots.contains(id),
                    })
                    .collect(),
                edges: graph
                    .edges
                    .iter()
                    .map(|(a, b)| {
                        [
                            a.script_url.clone(),
                            a.method_name.clone(),
                            b.script_url.clone(),
                            b.method_name.clone(),
                        ]
                    })
                    .collect(),
            }
        })
        .collect()
}
