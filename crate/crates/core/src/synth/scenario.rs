//! The scenario text format.
//!
//! ```text
//! # comments start with '#'
//! threshold 2
//! page-requests 3
//! domain ads.com T=6 F=0
//! domain google.com
//!   host ad.google.com T=4 F=0
//!   host cdn.google.com
//!     script clone.js
//!       method m2 T=2 F=2
//!         tracking-stack track.js:collect track.js:t app.js:init
//!         functional-stack app.js:render app.js:init
//!       method m3 T=0 F=2
//! ```
//!
//! The keyword fixes the level; a `host` belongs to the closest `domain`
//! above it, and so on down. Indentation is only for the reader.

use std::fmt;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::SynthError;
use crate::attribution::Granularity;
use crate::sifter::{ratio, verdict, Verdict, DEFAULT_THRESHOLD};

/// A caller frame in a stack template, `script:method`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct FrameRef {
    pub script_url: String,
    pub method_name: String,
}

impl fmt::Display for FrameRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.script_url, self.method_name)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Node {
    pub level: Granularity,
    pub name: String,
    /// Planted (tracking, functional) counts. Required on leaves.
    pub counts: Option<(u64, u64)>,
    pub children: Vec<Node>,
    /// Frames below the top frame, most recent first. Method nodes only.
    pub tracking_stacks: Vec<Vec<FrameRef>>,
    pub functional_stacks: Vec<Vec<FrameRef>>,
    pub line: usize,
}

impl Node {
    pub fn leaf(
        level: Granularity,
        name: impl Into<String>,
        tracking: u64,
        functional: u64,
    ) -> Self {
        Self {
            level,
            name: name.into(),
            counts: Some((tracking, functional)),
            children: Vec::new(),
            tracking_stacks: Vec::new(),
            functional_stacks: Vec::new(),
            line: 0,
        }
    }

    pub fn internal(level: Granularity, name: impl Into<String>, children: Vec<Node>) -> Self {
        Self {
            counts: None,
            children,
            ..Self::leaf(level, name, 0, 0)
        }
    }

    /// Total (tracking, functional) requests under this node.
    pub fn totals(&self) -> (u64, u64) {
        if self.children.is_empty() {
            return self.counts.unwrap_or((0, 0));
        }
        self.children.iter().fold((0, 0), |(t, f), c| {
            let (ct, cf) = c.totals();
            (t + ct, f + cf)
        })
    }

    pub fn verdict(&self, threshold: f64) -> Verdict {
        let (t, f) = self.totals();
        ratio(t, f).map_or(Verdict::Mixed, |r| verdict(r, threshold))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub threshold: f64,
    /// Extra requests with no call stack, which the pipeline must exclude.
    pub page_requests: u64,
    pub domains: Vec<Node>,
}

impl Default for Scenario {
    fn default() -> Self {
        Self {
            threshold: DEFAULT_THRESHOLD,
            page_requests: 0,
            domains: Vec::new(),
        }
    }
}

fn keyword(level: Granularity) -> &'static str {
    match level {
        Granularity::Domain => "domain",
        Granularity::Hostname => "host",
        Granularity::Script => "script",
        Granularity::Method => "method",
    }
}

fn syntax(line: usize, message: impl Into<String>) -> SynthError {
    SynthError::Syntax {
        line,
        message: message.into(),
    }
}

fn parse_count(token: &str, prefix: &str, line: usize) -> Result<Option<u64>, SynthError> {
    match token.strip_prefix(prefix) {
        Some(v) => v
            .parse()
            .map(Some)
            .map_err(|_| syntax(line, format!("bad count {token:?}"))),
        None => Ok(None),
    }
}

fn parse_frame(token: &str, line: usize) -> Result<FrameRef, SynthError> {
    match token.rsplit_once(':') {
        Some((script, method)) if !script.is_empty() && !method.is_empty() => Ok(FrameRef {
            script_url: script.to_string(),
            method_name: method.to_string(),
        }),
        _ => Err(syntax(
            line,
            format!("frame {token:?} is not script:method"),
        )),
    }
}

/// Walks down the last-child chain to the open node at `level`.
fn open_node(domains: &mut [Node], level: Granularity) -> Option<&mut Node> {
    let mut node = domains.last_mut()?;
    while node.level != level {
        node = node.children.last_mut()?;
    }
    Some(node)
}

pub fn parse_scenario(text: &str) -> Result<Scenario, SynthError> {
    let mut scenario = Scenario::default();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let content = raw.split('#').next().unwrap_or("");
        let mut tokens = content.split_whitespace();
        let Some(kw) = tokens.next() else { continue };
        let rest: Vec<&str> = tokens.collect();
        match kw {
            "threshold" => {
                let [v] = rest[..] else {
                    return Err(syntax(line, "threshold takes one value"));
                };
                scenario.threshold = v
                    .parse()
                    .map_err(|_| syntax(line, format!("bad threshold {v:?}")))?;
            }
            "page-requests" => {
                let [v] = rest[..] else {
                    return Err(syntax(line, "page-requests takes one value"));
                };
                scenario.page_requests = v
                    .parse()
                    .map_err(|_| syntax(line, format!("bad count {v:?}")))?;
            }
            "tracking-stack" | "functional-stack" => {
                if rest.is_empty() {
                    return Err(syntax(line, format!("{kw} needs at least one frame")));
                }
                let frames = rest
                    .iter()
                    .map(|t| parse_frame(t, line))
                    .collect::<Result<Vec<_>, _>>()?;
                let method = open_node(&mut scenario.domains, Granularity::Method)
                    .ok_or_else(|| syntax(line, format!("{kw} outside a method")))?;
                if kw == "tracking-stack" {
                    method.tracking_stacks.push(frames);
                } else {
                    method.functional_stacks.push(frames);
                }
            }
            _ => {
                let level = Granularity::ALL
                    .into_iter()
                    .find(|g| keyword(*g) == kw)
                    .ok_or_else(|| syntax(line, format!("unknown keyword {kw:?}")))?;
                let Some((&name, counts)) = rest.split_first() else {
                    return Err(syntax(line, format!("{kw} needs a name")));
                };
                let (mut t, mut f) = (None, None);
                for token in counts {
                    if let Some(v) = parse_count(token, "T=", line)? {
                        t = Some(v);
                    } else if let Some(v) = parse_count(token, "F=", line)? {
                        f = Some(v);
                    } else {
                        return Err(syntax(line, format!("unexpected {token:?}")));
                    }
                }
                let counts = match (t, f) {
                    (Some(t), Some(f)) => Some((t, f)),
                    (None, None) => None,
                    _ => return Err(syntax(line, "give both T= and F= or neither")),
                };
                let node = Node {
                    counts,
                    line,
                    ..Node::internal(level, name, Vec::new())
                };
                match level {
                    Granularity::Domain => scenario.domains.push(node),
                    _ => {
                        let parent_level = Granularity::ALL[level as usize - 1];
                        let parent =
                            open_node(&mut scenario.domains, parent_level).ok_or_else(|| {
                                syntax(
                                    line,
                                    format!("{kw} has no enclosing {}", keyword(parent_level)),
                                )
                            })?;
                        parent.children.push(node);
                    }
                }
            }
        }
    }
    Ok(scenario)
}

fn write_node(out: &mut fmt::Formatter<'_>, node: &Node) -> fmt::Result {
    let indent = "  ".repeat(node.level as usize);
    write!(out, "{indent}{} {}", keyword(node.level), node.name)?;
    if let Some((t, f)) = node.counts {
        write!(out, " T={t} F={f}")?;
    }
    writeln!(out)?;
    for (kw, stacks) in [
        ("tracking-stack", &node.tracking_stacks),
        ("functional-stack", &node.functional_stacks),
    ] {
        for stack in stacks {
            write!(out, "{indent}  {kw}")?;
            for frame in stack {
                write!(out, " {frame}")?;
            }
            writeln!(out)?;
        }
    }
    node.children.iter().try_for_each(|c| write_node(out, c))
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "threshold {}", self.threshold)?;
        if self.page_requests > 0 {
            writeln!(f, "page-requests {}", self.page_requests)?;
        }
        self.domains.iter().try_for_each(|d| write_node(f, d))
    }
}

struct RandomBuilder {
    rng: ChaCha8Rng,
    budget: u64,
    threshold: f64,
    next_id: usize,
}

impl RandomBuilder {
    fn id(&mut self) -> usize {
        self.next_id += 1;
        self.next_id
    }

    fn leaf_counts(&mut self) -> (u64, u64) {
        let (t, f) = match self.rng.gen_range(0..5) {
            0 => (self.rng.gen_range(1..=6), 0),
            1 => (0, self.rng.gen_range(1..=6)),
            2 => (self.rng.gen_range(1..=5), self.rng.gen_range(1..=5)),
            3 => (self.rng.gen_range(10..=40), 1),
            _ => (1, self.rng.gen_range(10..=40)),
        };
        let t = t.min(self.budget);
        let f = f.min(self.budget - t);
        self.budget -= t + f;
        (t, f)
    }

    fn frame(&mut self) -> FrameRef {
        FrameRef {
            script_url: format!("lib{}.js", self.rng.gen_range(0..3)),
            method_name: format!("f{}", self.rng.gen_range(0..3)),
        }
    }

    fn stacks(&mut self) -> Vec<Vec<FrameRef>> {
        (0..self.rng.gen_range(1..=2))
            .map(|_| {
                let mut s: Vec<FrameRef> = (0..self.rng.gen_range(1..=3))
                    .map(|_| self.frame())
                    .collect();
                if self.rng.gen_bool(0.7) {
                    s.push(FrameRef {
                        script_url: "app.js".into(),
                        method_name: "main".into(),
                    });
                }
                s
            })
            .collect()
    }

    fn name(&mut self, level: Granularity, parent: &str) -> String {
        let id = self.id();
        match level {
            Granularity::Domain => format!("d{id}.sift"),
            Granularity::Hostname => format!("h{id}.{parent}"),
            Granularity::Script => format!("https://{parent}/s{id}.js"),
            Granularity::Method => format!("m{id}"),
        }
    }

    fn node(&mut self, level: Granularity, parent: &str) -> Option<Node> {
        if self.budget == 0 {
            return None;
        }
        let name = self.name(level, parent);
        if let Some(child_level) = level.finer().filter(|_| self.rng.gen_bool(0.55)) {
            let n = self.rng.gen_range(2..=3);
            let children: Vec<Node> = (0..n)
                .filter_map(|_| self.node(child_level, &name))
                .collect();
            if !children.is_empty() {
                let mut node = Node::internal(level, name, children);
                if node.verdict(self.threshold) != Verdict::Mixed {
                    let (t, f) = node.totals();
                    node.children.clear();
                    node.counts = Some((t, f));
                }
                return Some(node);
            }
        }
        let (t, f) = self.leaf_counts();
        if t + f == 0 {
            return None;
        }
        let mut node = Node::leaf(level, name, t, f);
        if level == Granularity::Method && t > 0 && f > 0 && self.rng.gen_bool(0.6) {
            node.tracking_stacks = self.stacks();
            node.functional_stacks = self.stacks();
        }
        Some(node)
    }
}

/// A random consistent scenario with at most `max_requests` script-initiated
/// requests.
pub fn random_scenario(seed: u64, max_requests: u64) -> Scenario {
    let mut b = RandomBuilder {
        rng: ChaCha8Rng::seed_from_u64(seed),
        budget: max_requests,
        threshold: DEFAULT_THRESHOLD,
        next_id: 0,
    };
    let n = b.rng.gen_range(1..=6);
    let domains = (0..n)
        .filter_map(|_| b.node(Granularity::Domain, ""))
        .collect();
    let page_requests = b.rng.gen_range(0..=3);
    Scenario {
        threshold: DEFAULT_THRESHOLD,
        page_requests,
        domains,
    }
}
