//! Public Suffix List snapshot and registrable-domain (eTLD+1) lookup.
//!
//! The list is loaded from the standard `public_suffix_list.dat` text format.
//! Rules containing non-ASCII labels are stored in their punycode form so that
//! lookups work on the ASCII hostnames produced by URL parsing.

use std::collections::HashSet;
use std::io::{BufRead, BufReader, Read};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum PslError {
    #[error("failed to read public suffix list: {0}")]
    Io(#[from] std::io::Error),
    #[error("public suffix list contains no rules")]
    Empty,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum RuleKind {
    Normal,
    Wildcard,
    Exception,
}

#[derive(Debug, Clone, Default)]
pub struct PublicSuffixList {
    // keyed by the rule text without its "*." / "!" prefix
    normal: HashSet<String>,
    wildcard: HashSet<String>,
    exception: HashSet<String>,
    rule_count: usize,
}

impl PublicSuffixList {
    pub fn parse<R: Read>(reader: R) -> Result<Self, PslError> {
        let mut list = Self::default();
        for line in BufReader::new(reader).lines() {
            let line = line?;
            // A rule ends at the first whitespace.
            let Some(rule) = line.split_whitespace().next() else {
                continue;
            };
            if rule.starts_with("//") {
                continue;
            }
            list.insert(rule);
        }
        if list.rule_count == 0 {
            return Err(PslError::Empty);
        }
        Ok(list)
    }

    pub fn from_str_rules(text: &str) -> Result<Self, PslError> {
        Self::parse(text.as_bytes())
    }

    fn insert(&mut self, rule: &str) {
        let (kind, body) = if let Some(rest) = rule.strip_prefix('!') {
            (RuleKind::Exception, rest)
        } else if let Some(rest) = rule.strip_prefix("*.") {
            (RuleKind::Wildcard, rest)
        } else {
            (RuleKind::Normal, rule)
        };
        let Some(body) = to_ascii_host(body) else {
            return;
        };
        let table = match kind {
            RuleKind::Normal => &mut self.normal,
            RuleKind::Wildcard => &mut self.wildcard,
            RuleKind::Exception => &mut self.exception,
        };
        table.insert(body);
        self.rule_count += 1;
    }

    pub fn len(&self) -> usize {
        self.rule_count
    }

    pub fn is_empty(&self) -> bool {
        self.rule_count == 0
    }

    /// Number of trailing labels of `labels` that form the public suffix.
    fn suffix_label_count(&self, labels: &[&str]) -> usize {
        let n = labels.len();
        // The implicit "*" rule: an unlisted TLD is a public suffix.
        let mut best = 1;
        for start in 0..n {
            let candidate = labels[start..].join(".");
            if self.exception.contains(&candidate) {
                // Exception rules win outright; the suffix drops the leftmost label.
                return n - start - 1;
            }
            let count = n - start;
            if count > best {
                if self.normal.contains(&candidate) {
                    best = count;
                } else if start + 1 < n {
                    let parent = labels[start + 1..].join(".");
                    if self.wildcard.contains(&parent) {
                        best = count;
                    }
                }
            }
        }
        best
    }

    /// The public suffix of `host`, or `None` for malformed hosts.
    pub fn public_suffix(&self, host: &str) -> Option<String> {
        let host = to_ascii_host(host)?;
        let labels: Vec<&str> = host.split('.').collect();
        let count = self.suffix_label_count(&labels);
        Some(labels[labels.len() - count..].join("."))
    }

    /// Strict eTLD+1 lookup. Returns `None` when the host is empty, has an
    /// empty label, or is itself a public suffix.
    pub fn registrable_domain(&self, host: &str) -> Option<String> {
        let host = to_ascii_host(host)?;
        let labels: Vec<&str> = host.split('.').collect();
        let count = self.suffix_label_count(&labels);
        if labels.len() <= count {
            return None;
        }
        Some(labels[labels.len() - count - 1..].join("."))
    }
}

/// Lower-cases a hostname and converts any unicode labels to punycode.
/// Rejects empty hosts and hosts with empty labels.
fn to_ascii_host(host: &str) -> Option<String> {
    if host.is_empty() || host.split('.').any(str::is_empty) {
        return None;
    }
    if host.is_ascii() {
        return Some(host.to_ascii_lowercase());
    }
    idna::domain_to_ascii(host).ok()
}
