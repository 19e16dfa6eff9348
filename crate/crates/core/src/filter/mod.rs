//! EasyList / EasyPrivacy network rule engine used as the labeling oracle.
//!
//! Supported syntax: `||`, `|` anchors, `*` and `^` in patterns, `@@`
//! exceptions, and the options `third-party`, `domain=` and the resource
//! types `script`, `image`, `stylesheet`, `xmlhttprequest`, `subdocument`,
//! `document`, `other` (each negatable with `~`). Rules using any other
//! option are skipped with a diagnostic. Matching is ASCII case-insensitive.

mod engine;
mod matcher;
mod rule;

use std::fmt;

use serde::{Deserialize, Serialize};

pub use self::engine::RuleSet;
pub use self::matcher::{is_separator_char, match_rule, RequestContext};
pub use self::rule::{
    parse_filter_list, parse_rule_line, Anchor, FilterRule, ParsedFilterList, ParsedLine, Party,
    PatternToken, RequestType, RuleDiagnostic, RuleKind, RuleOptions, SkipReason,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Label {
    Tracking,
    Functional,
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Label::Tracking => "Tracking",
            Label::Functional => "Functional",
        })
    }
}
