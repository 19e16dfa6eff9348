//! Crawl trace records and their JSON-lines serialization.
//!
//! One line per script-initiated (or not) network request, as captured from
//! the DevTools `requestWillBeSent` event. Stacks are stored most-recent
//! frame first, with async parent segments appended in ancestor order.

mod psl;
mod url_parts;

use std::collections::HashMap;
use std::fmt;
use std::io::{BufRead, Write};

use rayon::prelude::*;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

pub use self::psl::{PslError, PublicSuffixList};
pub use self::url_parts::{decompose_url, UrlError, UrlParts};

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StackFrame {
    pub function_name: String,
    pub script_url: String,
    pub line: u32,
    pub column: u32,
}

impl StackFrame {
    pub fn new(
        function_name: impl Into<String>,
        script_url: impl Into<String>,
        line: u32,
        column: u32,
    ) -> Self {
        Self {
            function_name: function_name.into(),
            script_url: script_url.into(),
            line,
            column,
        }
    }
}

/// Resource type as reported by the browser.
///
/// Unrecognized type strings are read as [`ResourceType::Other`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ResourceType {
    Document,
    Script,
    Xhr,
    Fetch,
    Image,
    Stylesheet,
    Subdocument,
    Other,
}

impl ResourceType {
    pub const ALL: [ResourceType; 8] = [
        ResourceType::Document,
        ResourceType::Script,
        ResourceType::Xhr,
        ResourceType::Fetch,
        ResourceType::Image,
        ResourceType::Stylesheet,
        ResourceType::Subdocument,
        ResourceType::Other,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ResourceType::Document => "Document",
            ResourceType::Script => "Script",
            ResourceType::Xhr => "XHR",
            ResourceType::Fetch => "Fetch",
            ResourceType::Image => "Image",
            ResourceType::Stylesheet => "Stylesheet",
            ResourceType::Subdocument => "Subdocument",
            ResourceType::Other => "Other",
        }
    }

    pub fn from_name(name: &str) -> Self {
        match name {
            "Document" => ResourceType::Document,
            "Script" => ResourceType::Script,
            "XHR" => ResourceType::Xhr,
            "Fetch" => ResourceType::Fetch,
            "Image" => ResourceType::Image,
            "Stylesheet" => ResourceType::Stylesheet,
            "Subdocument" => ResourceType::Subdocument,
            _ => ResourceType::Other,
        }
    }
}

impl fmt::Display for ResourceType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl Serialize for ResourceType {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(self.as_str())
    }
}

impl<'de> Deserialize<'de> for ResourceType {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let name = String::deserialize(deserializer)?;
        Ok(ResourceType::from_name(&name))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RequestRecord {
    pub request_id: String,
    pub top_level_url: String,
    pub frame_url: String,
    pub resource_type: ResourceType,
    pub url: String,
    pub timestamp_ms: u64,
    pub call_stack: Vec<StackFrame>,
}

impl RequestRecord {
    /// Only script-initiated requests take part in classification.
    pub fn is_script_initiated(&self) -> bool {
        !self.call_stack.is_empty()
    }

    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("record serialization is infallible")
    }
}

/// A per-line problem found while reading a trace.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct LineDiagnostic {
    pub line: usize,
    pub reason: String,
}

impl fmt::Display for LineDiagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "line {}: {}", self.line, self.reason)
    }
}

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("failed to read trace: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Default)]
pub struct ParsedTrace {
    pub records: Vec<RequestRecord>,
    pub diagnostics: Vec<LineDiagnostic>,
}

impl ParsedTrace {
    pub fn script_initiated(&self) -> impl Iterator<Item = &RequestRecord> {
        self.records.iter().filter(|r| r.is_script_initiated())
    }
}

fn parse_line(text: &str) -> Result<RequestRecord, String> {
    let record: RequestRecord = serde_json::from_str(text).map_err(|e| e.to_string())?;
    if record.request_id.is_empty() {
        return Err("empty request_id".into());
    }
    url_parts::parse_absolute(&record.url).map_err(|e| format!("field `url`: {e}"))?;
    url_parts::parse_absolute(&record.top_level_url)
        .map_err(|e| format!("field `top_level_url`: {e}"))?;
    if let Some(i) = record
        .call_stack
        .iter()
        .position(|f| f.script_url.is_empty())
    {
        return Err(format!("call_stack[{i}] has an empty script_url"));
    }
    Ok(record)
}

/// Reads a JSON-lines trace.
///
/// Blank lines are ignored. Every other line either yields a record or a
/// diagnostic. A repeated `request_id` is reported and the later record
/// replaces the earlier one.
pub fn parse_trace<R: BufRead>(reader: R) -> Result<ParsedTrace, TraceError> {
    let lines: Vec<(usize, String)> = reader
        .lines()
        .enumerate()
        .map(|(i, l)| l.map(|l| (i + 1, l)))
        .collect::<Result<_, _>>()?;

    let parsed: Vec<(usize, Result<RequestRecord, String>)> = lines
        .par_iter()
        .filter(|(_, text)| !text.trim().is_empty())
        .map(|(n, text)| (*n, parse_line(text)))
        .collect();

    let mut out = ParsedTrace::default();
    let mut slots: Vec<Option<RequestRecord>> = Vec::with_capacity(parsed.len());
    let mut seen: HashMap<String, (usize, usize)> = HashMap::new();
    for (line, result) in parsed {
        match result {
            Ok(record) => {
                if let Some((slot, first_line)) = seen.get(&record.request_id).copied() {
                    out.diagnostics.push(LineDiagnostic {
                        line,
                        reason: format!(
                            "duplicate request_id {:?} (first seen on line {first_line}); keeping this record",
                            record.request_id
                        ),
                    });
                    slots[slot] = None;
                }
                seen.insert(record.request_id.clone(), (slots.len(), line));
                slots.push(Some(record));
            }
            Err(reason) => out.diagnostics.push(LineDiagnostic { line, reason }),
        }
    }
    out.records = slots.into_iter().flatten().collect();
    Ok(out)
}

pub fn write_trace<W: Write>(mut writer: W, records: &[RequestRecord]) -> std::io::Result<()> {
    for record in records {
        writeln!(writer, "{}", record.to_json_line())?;
    }
    Ok(())
}
