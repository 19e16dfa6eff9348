//! Synthetic traces with planted ground truth.
//!
//! A [`Scenario`] describes a tree of entities with their tracking and
//! functional request counts. [`generate`] turns it into a trace, a filter
//! list and a miniature PSL that together reproduce the planted labels, along
//! with the sift result and divergence points the tree implies.

mod scenario;

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fs;
use std::io;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

pub use self::scenario::{parse_scenario, random_scenario, FrameRef, Node, Scenario};
use crate::attribution::{EntityKey, Granularity, MethodId};
use crate::filter::{parse_filter_list, Label, RequestContext, RuleSet};
use crate::sifter::{Attribution, EntityStats, LevelResult, SiftResult, Verdict};
use crate::trace::{decompose_url, PublicSuffixList, RequestRecord, ResourceType, StackFrame};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("scenario line {line}: {message}")]
    Syntax { line: usize, message: String },
    #[error("inconsistent scenario: {0}")]
    Inconsistent(String),
    #[error("generated fixtures disagree with planted labels: {0}")]
    SelfCheck(String),
}

/// Mixed method together with its expected points of divergence, in order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ExpectedDivergence {
    pub method: MethodId,
    pub points: Vec<MethodId>,
}

#[derive(Debug, Clone)]
pub struct Generated {
    /// All records, in trace order, including those without a stack.
    pub records: Vec<RequestRecord>,
    /// Planted label of each record, parallel to `records`.
    pub labels: Vec<Label>,
    pub filters: String,
    pub psl: String,
    pub expected: SiftResult,
    pub expected_divergence: Vec<ExpectedDivergence>,
}

impl Generated {
    pub fn trace_text(&self) -> String {
        self.records
            .iter()
            .map(|r| r.to_json_line() + "\n")
            .collect()
    }

    pub fn expected_json(&self) -> String {
        #[derive(Serialize)]
        struct Doc<'a> {
            result: &'a SiftResult,
            divergence: &'a [ExpectedDivergence],
        }
        let mut s = serde_json::to_string_pretty(&Doc {
            result: &self.expected,
            divergence: &self.expected_divergence,
        })
        .expect("expected result serializes");
        s.push('\n');
        s
    }

    /// Writes trace.jsonl, filters.txt, psl.dat and expected.json.
    pub fn write_to(&self, dir: &Path) -> io::Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("trace.jsonl"), self.trace_text())?;
        fs::write(dir.join("filters.txt"), &self.filters)?;
        fs::write(dir.join("psl.dat"), &self.psl)?;
        fs::write(dir.join("expected.json"), self.expected_json())
    }
}

/// One fully expanded request path: indices of domain, host, script, method.
#[derive(Debug, Clone)]
struct Planted {
    path: [usize; 4],
    label: Label,
    /// Template frames below the top frame.
    callers: Vec<FrameRef>,
}

/// Flattened entity tree after leaf expansion.
struct Tree {
    keys: Vec<EntityKey>,
    counts: Vec<(u64, u64)>,
    verdicts: Vec<Verdict>,
    domain_host: Vec<String>,
    planted: Vec<Planted>,
}

struct Flattener {
    threshold: f64,
    tree: Tree,
    scripts: HashSet<String>,
    hosts: HashSet<String>,
    domains: HashSet<String>,
    auto_scripts: usize,
}

fn inconsistent(msg: String) -> SynthError {
    SynthError::Inconsistent(msg)
}

impl Flattener {
    fn push(&mut self, key: EntityKey, counts: (u64, u64), host: &str) -> usize {
        let verdict = crate::sifter::ratio(counts.0, counts.1).map_or(Verdict::Mixed, |r| {
            crate::sifter::verdict(r, self.threshold)
        });
        self.tree.keys.push(key);
        self.tree.counts.push(counts);
        self.tree.verdicts.push(verdict);
        self.tree.domain_host.push(host.to_string());
        self.tree.keys.len() - 1
    }

    fn check_unique(
        &mut self,
        level: Granularity,
        name: &str,
        parent: Option<&str>,
    ) -> Result<(), SynthError> {
        let fresh = match level {
            Granularity::Domain => self.domains.insert(name.to_string()),
            Granularity::Hostname => self.hosts.insert(name.to_string()),
            Granularity::Script => self.scripts.insert(name.to_string()),
            Granularity::Method => true,
        };
        if !fresh {
            return Err(inconsistent(format!("{level} {name:?} is declared twice")));
        }
        if level == Granularity::Hostname {
            let domain = parent.unwrap_or_default();
            if name != domain && !name.ends_with(&format!(".{domain}")) {
                return Err(inconsistent(format!(
                    "host {name:?} is not under domain {domain:?}"
                )));
            }
        }
        Ok(())
    }

    fn key(level: Granularity, name: &str, script: &str) -> EntityKey {
        match level {
            Granularity::Domain => EntityKey::Domain(name.to_string()),
            Granularity::Hostname => EntityKey::Hostname(name.to_string()),
            Granularity::Script => EntityKey::Script(name.to_string()),
            Granularity::Method => EntityKey::Method(MethodId::new(script, name)),
        }
    }

    fn visit(
        &mut self,
        node: &Node,
        path: &mut Vec<usize>,
        names: &mut Vec<String>,
    ) -> Result<(), SynthError> {
        let level = node.level;
        let (t, f) = node.totals();
        let at = |n: &Node| {
            if n.line > 0 {
                format!(" (line {})", n.line)
            } else {
                String::new()
            }
        };
        if node.children.is_empty() {
            if node.counts.is_none() {
                return Err(inconsistent(format!(
                    "{level} {:?} has no counts{}",
                    node.name,
                    at(node)
                )));
            }
            if t + f == 0 {
                return Err(inconsistent(format!(
                    "{level} {:?} has no requests{}",
                    node.name,
                    at(node)
                )));
            }
        } else if let Some(given) = node.counts.filter(|c| *c != (t, f)) {
            return Err(inconsistent(format!(
                "{level} {:?}{} declares T={} F={} but its children add up to T={t} F={f}",
                node.name,
                at(node),
                given.0,
                given.1
            )));
        }
        if level != Granularity::Method
            && (!node.tracking_stacks.is_empty() || !node.functional_stacks.is_empty())
        {
            return Err(inconsistent(format!(
                "stack templates on non-method {:?}",
                node.name
            )));
        }
        if (t == 0 && !node.tracking_stacks.is_empty())
            || (f == 0 && !node.functional_stacks.is_empty())
        {
            return Err(inconsistent(format!(
                "method {:?}{} has stack templates for a label it never issues",
                node.name,
                at(node)
            )));
        }
        self.check_unique(level, &node.name, names.last().map(String::as_str))?;

        let script = names.get(2).cloned().unwrap_or_default();
        let host = names.get(1).cloned().unwrap_or_else(|| node.name.clone());
        let idx = self.push(Self::key(level, &node.name, &script), (t, f), &host);
        if !node.children.is_empty() && self.tree.verdicts[idx] != Verdict::Mixed {
            return Err(inconsistent(format!(
                "{level} {:?}{} has children but is {:?} at threshold {} (T={t} F={f}); only mixed entities are refined",
                node.name,
                at(node),
                self.tree.verdicts[idx],
                self.threshold
            )));
        }
        path.push(idx);
        names.push(node.name.clone());

        if node.children.is_empty() {
            self.expand_leaf(node, path, names)?;
        } else {
            let mut seen = HashSet::new();
            for child in &node.children {
                if child.level as usize != level as usize + 1 {
                    return Err(inconsistent(format!(
                        "{:?} is nested at the wrong level",
                        child.name
                    )));
                }
                if child.level == Granularity::Method && !seen.insert(child.name.clone()) {
                    return Err(inconsistent(format!(
                        "method {:?} repeated in script {:?}",
                        child.name, node.name
                    )));
                }
                self.visit(child, path, names)?;
            }
        }
        path.pop();
        names.pop();
        Ok(())
    }

    /// Extends a leaf down to method level with single children carrying the
    /// same counts, then plants its requests.
    fn expand_leaf(
        &mut self,
        node: &Node,
        path: &mut Vec<usize>,
        names: &mut Vec<String>,
    ) -> Result<(), SynthError> {
        let (t, f) = node.totals();
        let depth = path.len();
        let mut level = node.level;
        while let Some(finer) = level.finer() {
            let name = match finer {
                Granularity::Hostname => names[0].clone(),
                Granularity::Script => {
                    self.auto_scripts += 1;
                    format!("https://{}/gen{}.js", names[1], self.auto_scripts)
                }
                _ => "send".to_string(),
            };
            self.check_unique(finer, &name, names.last().map(String::as_str))?;
            let script = names.get(2).cloned().unwrap_or_default();
            let idx = self.push(
                Self::key(finer, &name, &script),
                (t, f),
                &names[1.min(names.len() - 1)],
            );
            path.push(idx);
            names.push(name);
            level = finer;
        }
        let full: [usize; 4] = path[..4].try_into().expect("four levels");
        for (label, count, templates) in [
            (Label::Tracking, t, &node.tracking_stacks),
            (Label::Functional, f, &node.functional_stacks),
        ] {
            for i in 0..count as usize {
                let callers = if templates.is_empty() {
                    Vec::new()
                } else {
                    templates[i % templates.len()].clone()
                };
                self.tree.planted.push(Planted {
                    path: full,
                    label,
                    callers,
                });
            }
        }
        path.truncate(depth);
        names.truncate(depth);
        Ok(())
    }
}

fn flatten(scenario: &Scenario) -> Result<Tree, SynthError> {
    if !(scenario.threshold.is_finite() && scenario.threshold > 0.0) {
        return Err(inconsistent(format!(
            "threshold {} must be positive",
            scenario.threshold
        )));
    }
    let mut fl = Flattener {
        threshold: scenario.threshold,
        tree: Tree {
            keys: Vec::new(),
            counts: Vec::new(),
            verdicts: Vec::new(),
            domain_host: Vec::new(),
            planted: Vec::new(),
        },
        scripts: HashSet::new(),
        hosts: HashSet::new(),
        domains: HashSet::new(),
        auto_scripts: 0,
    };
    for domain in &scenario.domains {
        if domain.level != Granularity::Domain {
            return Err(inconsistent(format!("{:?} is not a domain", domain.name)));
        }
        fl.visit(domain, &mut Vec::new(), &mut Vec::new())?;
    }
    Ok(fl.tree)
}

/// Public suffixes implied by the scenario's registrable domains.
fn mini_psl(tree: &Tree) -> Result<String, SynthError> {
    let mut suffixes = BTreeSet::from(["sift".to_string()]);
    for key in &tree.keys {
        if let EntityKey::Domain(d) = key {
            let (_, suffix) = d
                .split_once('.')
                .ok_or_else(|| inconsistent(format!("domain {d:?} needs at least two labels")))?;
            suffixes.insert(suffix.to_string());
        }
    }
    let mut out = String::from("// synthetic public suffix list\n");
    for s in suffixes {
        out.push_str(&s);
        out.push('\n');
    }
    Ok(out)
}

fn filter_list(tree: &Tree) -> String {
    let mut out = String::from("! synthetic filter list\n/sift-ads/*\n@@/sift-ads/ok/*\n");
    for (i, key) in tree.keys.iter().enumerate() {
        if let EntityKey::Domain(d) = key {
            if tree.counts[i].1 == 0 {
                out.push_str(&format!("||{d}^\n"));
            }
        }
    }
    out
}

/// Expected divergence points computed from the used stack templates, with
/// root distances found by edge relaxation.
fn expected_divergence(method: &MethodId, stacks: &[(Label, Vec<MethodId>)]) -> ExpectedDivergence {
    let mut labels: BTreeMap<&MethodId, BTreeSet<Label>> = BTreeMap::new();
    let mut edges = Vec::new();
    let mut dist: BTreeMap<&MethodId, usize> = BTreeMap::new();
    for (label, stack) in stacks {
        for node in stack {
            labels.entry(node).or_default().insert(*label);
        }
        for pair in stack.windows(2) {
            edges.push((&pair[1], &pair[0]));
        }
        dist.insert(stack.last().expect("non-empty stack"), 0);
    }
    for _ in 0..labels.len() {
        for (caller, callee) in &edges {
            if let Some(d) = dist.get(caller).copied() {
                let e = dist.entry(callee).or_insert(usize::MAX);
                *e = (*e).min(d + 1);
            }
        }
    }
    let mut points: Vec<(usize, &MethodId)> = labels
        .iter()
        .filter(|(_, l)| l.len() == 1 && l.contains(&Label::Tracking))
        .map(|(n, _)| (dist[n], *n))
        .collect();
    points.sort();
    ExpectedDivergence {
        method: method.clone(),
        points: points.into_iter().map(|(_, n)| n.clone()).collect(),
    }
}

const PAGES: [&str; 3] = [
    "https://news.page.sift/",
    "https://shop.page.sift/",
    "https://blog.page.sift/",
];
const TYPES: [ResourceType; 4] = [
    ResourceType::Xhr,
    ResourceType::Fetch,
    ResourceType::Script,
    ResourceType::Image,
];

/// Builds fixtures for `scenario`. The same scenario and seed always give
/// byte-identical output.
pub fn generate(scenario: &Scenario, seed: u64) -> Result<Generated, SynthError> {
    let tree = flatten(scenario)?;
    let psl_text = mini_psl(&tree)?;
    let filters = filter_list(&tree);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // Per-method line numbers give each method a stable source position.
    let mut method_line: HashMap<usize, u32> = HashMap::new();

    struct Draft {
        record: RequestRecord,
        label: Label,
        path: Option<[usize; 4]>,
    }
    let mut drafts: Vec<Draft> = Vec::new();
    for (n, p) in tree.planted.iter().enumerate() {
        let host = &tree.domain_host[p.path[1]];
        let domain_pure_tracking = tree.counts[p.path[0]].1 == 0;
        let url = match p.label {
            Label::Tracking if domain_pure_tracking => format!("https://{host}/px/{n}.gif"),
            Label::Tracking => format!("https://{host}/sift-ads/{n}.js"),
            Label::Functional if n % 2 == 0 => format!("https://{host}/content/{n}.js"),
            Label::Functional => format!("https://{host}/sift-ads/ok/{n}.json"),
        };
        let EntityKey::Method(m) = &tree.keys[p.path[3]] else {
            unreachable!("path ends at a method")
        };
        let next_line = method_line.len() as u32;
        let line = *method_line.entry(p.path[3]).or_insert(10 * (next_line + 1));
        let mut call_stack = vec![StackFrame::new(
            m.method_name.clone(),
            m.script_url.clone(),
            line,
            5,
        )];
        call_stack.extend(
            p.callers
                .iter()
                .map(|f| StackFrame::new(f.method_name.clone(), f.script_url.clone(), 1, 1)),
        );
        let page = PAGES[rng.gen_range(0..PAGES.len())];
        drafts.push(Draft {
            record: RequestRecord {
                request_id: String::new(),
                top_level_url: page.to_string(),
                frame_url: page.to_string(),
                resource_type: TYPES[rng.gen_range(0..TYPES.len())],
                url,
                timestamp_ms: 0,
                call_stack,
            },
            label: p.label,
            path: Some(p.path),
        });
    }
    for n in 0..scenario.page_requests {
        let page = PAGES[rng.gen_range(0..PAGES.len())];
        drafts.push(Draft {
            record: RequestRecord {
                request_id: String::new(),
                top_level_url: page.to_string(),
                frame_url: page.to_string(),
                resource_type: ResourceType::Stylesheet,
                url: format!("{page}static/{n}.css"),
                timestamp_ms: 0,
                call_stack: Vec::new(),
            },
            label: Label::Functional,
            path: None,
        });
    }
    drafts.shuffle(&mut rng);
    let mut clock: u64 = 1_600_000_000_000;
    for (i, d) in drafts.iter_mut().enumerate() {
        clock += rng.gen_range(1..50);
        d.record.request_id = format!("r{i:05}");
        d.record.timestamp_ms = clock;
    }

    // Every planted label must be reproduced by the generated rules.
    let psl = PublicSuffixList::from_str_rules(&psl_text)
        .map_err(|e| SynthError::SelfCheck(e.to_string()))?;
    let parsed = parse_filter_list(filters.as_bytes(), "synthetic")
        .map_err(|e| SynthError::SelfCheck(e.to_string()))?;
    if !parsed.diagnostics.is_empty() {
        return Err(SynthError::SelfCheck(format!(
            "{} rules skipped",
            parsed.diagnostics.len()
        )));
    }
    let rules = RuleSet::new(parsed.rules);
    for d in drafts.iter().filter(|d| d.path.is_some()) {
        let parts =
            decompose_url(&d.record.url, &psl).map_err(|e| SynthError::SelfCheck(e.to_string()))?;
        let path = d.path.expect("filtered");
        if EntityKey::Domain(parts.registrable_domain.clone()) != tree.keys[path[0]] {
            return Err(SynthError::SelfCheck(format!(
                "{} resolves to domain {:?}, planted under {}",
                d.record.url, parts.registrable_domain, tree.keys[path[0]]
            )));
        }
        let page_domain = decompose_url(&d.record.top_level_url, &psl)
            .map(|p| p.registrable_domain)
            .unwrap_or_default();
        let ctx = RequestContext::new(parts, page_domain, d.record.resource_type);
        let got = rules.label_request(&ctx);
        if got != d.label {
            return Err(SynthError::SelfCheck(format!(
                "{} labeled {got}, planted {}",
                d.record.url, d.label
            )));
        }
    }

    // Expected sift, read off the tree.
    let threshold = scenario.threshold;
    let sifted: Vec<(&str, [usize; 4])> = drafts
        .iter()
        .filter_map(|d| d.path.map(|p| (d.record.request_id.as_str(), p)))
        .collect();
    let mut levels = Vec::new();
    for g in Granularity::ALL {
        let depth = g as usize;
        let entering: Vec<&(&str, [usize; 4])> = sifted
            .iter()
            .filter(|(_, p)| {
                p[..depth]
                    .iter()
                    .all(|&i| tree.verdicts[i] == Verdict::Mixed)
            })
            .collect();
        let mut level = LevelResult {
            granularity: g,
            entered: entering.len() as u64,
            tracking_requests: 0,
            functional_requests: 0,
            mixed_requests: 0,
            entities: Vec::new(),
            attributions: Vec::new(),
            unattributed: Vec::new(),
        };
        let mut entity_nodes = BTreeSet::new();
        for (id, p) in &entering {
            let node = p[depth];
            entity_nodes.insert(node);
            let v = tree.verdicts[node];
            match v {
                Verdict::Tracking => level.tracking_requests += 1,
                Verdict::Functional => level.functional_requests += 1,
                Verdict::Mixed => level.mixed_requests += 1,
            }
            level.attributions.push(Attribution {
                request_id: id.to_string(),
                key: tree.keys[node].clone(),
                verdict: v,
            });
        }
        level.entities = entity_nodes
            .into_iter()
            .map(|i| {
                EntityStats::new(
                    tree.keys[i].clone(),
                    tree.counts[i].0,
                    tree.counts[i].1,
                    threshold,
                )
                .expect("planted entities have requests")
            })
            .collect();
        level.entities.sort_by(|a, b| a.key.cmp(&b.key));
        levels.push(level);
    }
    let residual = sifted
        .iter()
        .filter(|(_, p)| p.iter().all(|&i| tree.verdicts[i] == Verdict::Mixed))
        .map(|(id, _)| id.to_string())
        .collect();
    let expected = SiftResult {
        threshold,
        positional_identity: false,
        total_requests: sifted.len() as u64,
        levels,
        residual,
    };

    // Expected divergence for every mixed method that is reached.
    let mut by_method: BTreeMap<MethodId, Vec<(Label, Vec<MethodId>)>> = BTreeMap::new();
    for d in &drafts {
        let Some(p) = d.path else { continue };
        if !p.iter().all(|&i| tree.verdicts[i] == Verdict::Mixed) {
            continue;
        }
        let EntityKey::Method(m) = &tree.keys[p[3]] else {
            continue;
        };
        let stack = d
            .record
            .call_stack
            .iter()
            .map(|f| MethodId::of_frame(f, false))
            .collect();
        by_method
            .entry(m.clone())
            .or_default()
            .push((d.label, stack));
    }
    let expected_divergence = by_method
        .iter()
        .map(|(m, s)| expected_divergence(m, s))
        .collect();

    Ok(Generated {
        labels: drafts.iter().map(|d| d.label).collect(),
        records: drafts.into_iter().map(|d| d.record).collect(),
        filters,
        psl: psl_text,
        expected,
        expected_divergence,
    })
}
