//! Initiator attribution from call stacks.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::filter::Label;
use crate::trace::{RequestRecord, StackFrame};

pub const ANONYMOUS_METHOD: &str = "<anonymous>";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Granularity {
    Domain,
    Hostname,
    Script,
    Method,
}

impl Granularity {
    pub const ALL: [Granularity; 4] = [
        Granularity::Domain,
        Granularity::Hostname,
        Granularity::Script,
        Granularity::Method,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Granularity::Domain => "domain",
            Granularity::Hostname => "hostname",
            Granularity::Script => "script",
            Granularity::Method => "method",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Granularity::ALL.into_iter().find(|g| g.name() == name)
    }

    pub fn finer(self) -> Option<Self> {
        match self {
            Granularity::Domain => Some(Granularity::Hostname),
            Granularity::Hostname => Some(Granularity::Script),
            Granularity::Script => Some(Granularity::Method),
            Granularity::Method => None,
        }
    }
}

impl fmt::Display for Granularity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct MethodId {
    pub script_url: String,
    pub method_name: String,
}

impl MethodId {
    pub fn new(script_url: impl Into<String>, method_name: impl Into<String>) -> Self {
        Self {
            script_url: script_url.into(),
            method_name: method_name.into(),
        }
    }

    /// The (script, method) identity of a stack frame.
    pub fn of_frame(frame: &StackFrame, positional_identity: bool) -> Self {
        let method_name = if frame.function_name.is_empty() {
            if positional_identity {
                format!("{ANONYMOUS_METHOD}:{}:{}", frame.line, frame.column)
            } else {
                ANONYMOUS_METHOD.to_string()
            }
        } else {
            frame.function_name.clone()
        };
        Self {
            script_url: frame.script_url.clone(),
            method_name,
        }
    }
}

impl fmt::Display for MethodId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {}", self.script_url, self.method_name)
    }
}

/// Identity of a resource at one granularity.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(tag = "granularity", content = "key")]
pub enum EntityKey {
    Domain(String),
    Hostname(String),
    Script(String),
    Method(MethodId),
}

impl EntityKey {
    pub fn granularity(&self) -> Granularity {
        match self {
            EntityKey::Domain(_) => Granularity::Domain,
            EntityKey::Hostname(_) => Granularity::Hostname,
            EntityKey::Script(_) => Granularity::Script,
            EntityKey::Method(_) => Granularity::Method,
        }
    }
}

impl fmt::Display for EntityKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EntityKey::Domain(k) | EntityKey::Hostname(k) | EntityKey::Script(k) => f.write_str(k),
            EntityKey::Method(m) => m.fmt(f),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AttributionError {
    #[error("request {0:?} is not script-initiated")]
    NotScriptInitiated(String),
}

fn top_frame(record: &RequestRecord) -> Result<&StackFrame, AttributionError> {
    record
        .call_stack
        .first()
        .ok_or_else(|| AttributionError::NotScriptInitiated(record.request_id.clone()))
}

/// The script that directly issued the request (stack frame 0).
pub fn initiator_script(record: &RequestRecord) -> Result<EntityKey, AttributionError> {
    Ok(EntityKey::Script(top_frame(record)?.script_url.clone()))
}

pub fn initiator_method(
    record: &RequestRecord,
    positional_identity: bool,
) -> Result<EntityKey, AttributionError> {
    Ok(EntityKey::Method(MethodId::of_frame(
        top_frame(record)?,
        positional_identity,
    )))
}

/// Scripts that are not page content: extension and browser-internal code.
pub fn is_browser_internal(script_url: &str) -> bool {
    const PREFIXES: &[&str] = &[
        "chrome-extension:",
        "moz-extension:",
        "safari-extension:",
        "safari-web-extension:",
        "chrome:",
        "edge:",
        "about:",
        "extensions::",
    ];
    let lower = script_url.to_ascii_lowercase();
    PREFIXES.iter().any(|p| lower.starts_with(p))
}

/// Every script on a request's stack inherits the request's label.
pub fn propagate_labels<'a, I>(records: I) -> BTreeMap<String, BTreeSet<Label>>
where
    I: IntoIterator<Item = (&'a RequestRecord, Label)>,
{
    let mut out: BTreeMap<String, BTreeSet<Label>> = BTreeMap::new();
    for (record, label) in records {
        for frame in &record.call_stack {
            out.entry(frame.script_url.clone())
                .or_default()
                .insert(label);
        }
    }
    out
}
