use std::collections::{HashMap, HashSet};

use super::matcher::{match_rule, RequestContext};
use super::rule::{FilterRule, PatternToken, RuleKind};
use super::Label;

/// Tokens too common in URLs to narrow the candidate set.
const WEAK_TOKENS: &[&str] = &["http", "https", "www", "com", "net", "org", "js", "html"];

fn is_token_char(c: char) -> bool {
    c.is_ascii_alphanumeric() || c == '%'
}

/// Tokens of a rule that are guaranteed to appear as whole URL tokens in
/// every URL the rule matches.
pub(crate) fn rule_tokens(rule: &FilterRule) -> Vec<String> {
    #[derive(Clone, Copy, PartialEq)]
    enum Item {
        Char(char),
        Boundary,
        Open,
    }
    let mut items = Vec::new();
    items.push(if rule.anchor.is_domain() || rule.anchor.is_start() {
        Item::Boundary
    } else {
        Item::Open
    });
    for token in &rule.pattern {
        match token {
            PatternToken::Literal(s) => items.extend(s.chars().map(Item::Char)),
            PatternToken::Separator => items.push(Item::Boundary),
            PatternToken::Wildcard => items.push(Item::Open),
        }
    }
    items.push(if rule.anchor.is_end() {
        Item::Boundary
    } else {
        Item::Open
    });

    let bounded = |item: Item| match item {
        Item::Char(c) => !is_token_char(c),
        Item::Boundary => true,
        Item::Open => false,
    };

    let mut out = Vec::new();
    let mut i = 0;
    while i < items.len() {
        if let Item::Char(c) = items[i] {
            if is_token_char(c) {
                let start = i;
                let mut token = String::new();
                while let Some(Item::Char(c)) = items.get(i).copied() {
                    if !is_token_char(c) {
                        break;
                    }
                    token.push(c);
                    i += 1;
                }
                if bounded(items[start - 1]) && items.get(i).is_some_and(|&it| bounded(it)) {
                    out.push(token);
                }
                continue;
            }
        }
        i += 1;
    }
    out
}

fn best_token(rule: &FilterRule) -> Option<String> {
    let tokens = rule_tokens(rule);
    let strong = tokens.iter().filter(|t| !WEAK_TOKENS.contains(&t.as_str()));
    let pick = |it: &mut dyn Iterator<Item = &String>| {
        it.fold(None::<&String>, |best, t| match best {
            Some(b) if b.len() >= t.len() => Some(b),
            _ => Some(t),
        })
        .cloned()
    };
    pick(&mut strong.into_iter()).or_else(|| pick(&mut tokens.iter()))
}

pub(crate) fn url_tokens(url_lower: &str) -> HashSet<&str> {
    url_lower
        .split(|c: char| !is_token_char(c))
        .filter(|t| !t.is_empty())
        .collect()
}

#[derive(Debug, Default, Clone)]
struct Bucket {
    by_token: HashMap<String, Vec<usize>>,
    untokenized: Vec<usize>,
}

impl Bucket {
    fn insert(&mut self, rule: &FilterRule, idx: usize) {
        match best_token(rule) {
            Some(t) => self.by_token.entry(t).or_default().push(idx),
            None => self.untokenized.push(idx),
        }
    }

    fn any_match(
        &self,
        rules: &[FilterRule],
        ctx: &RequestContext,
        tokens: &HashSet<&str>,
    ) -> bool {
        self.untokenized.iter().any(|&i| match_rule(&rules[i], ctx))
            || tokens.iter().any(|t| {
                self.by_token
                    .get(*t)
                    .is_some_and(|ids| ids.iter().any(|&i| match_rule(&rules[i], ctx)))
            })
    }
}

/// Indexed union of block and exception rules from one or more lists.
#[derive(Debug, Default, Clone)]
pub struct RuleSet {
    rules: Vec<FilterRule>,
    block: Bucket,
    exception: Bucket,
}

impl RuleSet {
    pub fn new(rules: impl IntoIterator<Item = FilterRule>) -> Self {
        let mut set = RuleSet::default();
        for rule in rules {
            set.push(rule);
        }
        set
    }

    pub fn push(&mut self, rule: FilterRule) {
        let idx = self.rules.len();
        match rule.kind {
            RuleKind::Block => self.block.insert(&rule, idx),
            RuleKind::Exception => self.exception.insert(&rule, idx),
        }
        self.rules.push(rule);
    }

    pub fn len(&self) -> usize {
        self.rules.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rules.is_empty()
    }

    pub fn rules(&self) -> &[FilterRule] {
        &self.rules
    }

    /// Tracking iff some block rule matches and no exception rule does.
    pub fn label_request(&self, ctx: &RequestContext) -> Label {
        let tokens = url_tokens(ctx.url_lower());
        if self.block.any_match(&self.rules, ctx, &tokens)
            && !self.exception.any_match(&self.rules, ctx, &tokens)
        {
            Label::Tracking
        } else {
            Label::Functional
        }
    }

    /// Unindexed reference path: tries every rule.
    pub fn label_request_linear(&self, ctx: &RequestContext) -> Label {
        let hit = |kind: RuleKind| {
            self.rules
                .iter()
                .any(|r| r.kind == kind && match_rule(r, ctx))
        };
        if hit(RuleKind::Block) && !hit(RuleKind::Exception) {
            Label::Tracking
        } else {
            Label::Functional
        }
    }
}
