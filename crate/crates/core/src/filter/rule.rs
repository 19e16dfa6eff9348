//! Parsing of Adblock Plus style network rules.

use std::collections::BTreeSet;
use std::fmt;
use std::io::{BufRead, BufReader, Read};

use serde::Serialize;

use crate::trace::ResourceType;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub enum RuleKind {
    Block,
    Exception,
}

/// Where the pattern is pinned in the URL.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub enum Anchor {
    None,
    /// `||`: start of the hostname or right after a `.` inside it.
    DomainAnchor,
    /// Leading `|`.
    StartAnchor,
    /// Trailing `|`.
    EndAnchor,
    StartAndEndAnchor,
    /// `||` together with a trailing `|`.
    DomainAndEndAnchor,
}

impl Anchor {
    pub fn is_domain(self) -> bool {
        matches!(self, Anchor::DomainAnchor | Anchor::DomainAndEndAnchor)
    }

    pub fn is_start(self) -> bool {
        matches!(self, Anchor::StartAnchor | Anchor::StartAndEndAnchor)
    }

    pub fn is_end(self) -> bool {
        matches!(
            self,
            Anchor::EndAnchor | Anchor::StartAndEndAnchor | Anchor::DomainAndEndAnchor
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize)]
pub enum PatternToken {
    /// Lower-cased literal text.
    Literal(String),
    /// `*`
    Wildcard,
    /// `^`
    Separator,
}

/// Request types understood by rule options.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub enum RequestType {
    Script,
    Image,
    Stylesheet,
    XmlHttpRequest,
    Subdocument,
    Document,
    Other,
}

impl RequestType {
    pub const ALL: [RequestType; 7] = [
        RequestType::Script,
        RequestType::Image,
        RequestType::Stylesheet,
        RequestType::XmlHttpRequest,
        RequestType::Subdocument,
        RequestType::Document,
        RequestType::Other,
    ];

    pub fn option_name(self) -> &'static str {
        match self {
            RequestType::Script => "script",
            RequestType::Image => "image",
            RequestType::Stylesheet => "stylesheet",
            RequestType::XmlHttpRequest => "xmlhttprequest",
            RequestType::Subdocument => "subdocument",
            RequestType::Document => "document",
            RequestType::Other => "other",
        }
    }

    fn from_option(name: &str) -> Option<Self> {
        RequestType::ALL
            .into_iter()
            .find(|t| t.option_name() == name)
    }
}

impl From<ResourceType> for RequestType {
    fn from(value: ResourceType) -> Self {
        match value {
            ResourceType::Document => RequestType::Document,
            ResourceType::Script => RequestType::Script,
            ResourceType::Xhr | ResourceType::Fetch => RequestType::XmlHttpRequest,
            ResourceType::Image => RequestType::Image,
            ResourceType::Stylesheet => RequestType::Stylesheet,
            ResourceType::Subdocument => RequestType::Subdocument,
            ResourceType::Other => RequestType::Other,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub enum Party {
    ThirdParty,
    NotThirdParty,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct RuleOptions {
    pub party: Option<Party>,
    pub include_types: BTreeSet<RequestType>,
    pub exclude_types: BTreeSet<RequestType>,
    pub include_domains: Vec<String>,
    pub exclude_domains: Vec<String>,
}

impl RuleOptions {
    pub fn is_empty(&self) -> bool {
        *self == RuleOptions::default()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct FilterRule {
    pub raw: String,
    pub kind: RuleKind,
    pub anchor: Anchor,
    pub pattern: Vec<PatternToken>,
    pub options: RuleOptions,
}

/// Why a line did not produce a rule.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SkipReason {
    UnsupportedOption(String),
    ConflictingParty,
    RegexRule,
    EmptyDomainOption,
}

impl fmt::Display for SkipReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SkipReason::UnsupportedOption(o) => write!(f, "unsupported option {o:?}"),
            SkipReason::ConflictingParty => f.write_str("both third-party and ~third-party given"),
            SkipReason::RegexRule => f.write_str("regular-expression rules are not supported"),
            SkipReason::EmptyDomainOption => f.write_str("empty domain= option"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RuleDiagnostic {
    pub source: String,
    pub line: usize,
    pub rule: String,
    pub reason: SkipReason,
}

impl fmt::Display for RuleDiagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}:{}: skipped {:?}: {}",
            self.source, self.line, self.rule, self.reason
        )
    }
}

#[derive(Debug, Clone, Default)]
pub struct ParsedFilterList {
    pub source: String,
    pub rules: Vec<FilterRule>,
    pub diagnostics: Vec<RuleDiagnostic>,
    /// Comments, headers, blank lines and cosmetic rules.
    pub ignored_lines: usize,
}

fn is_cosmetic(line: &str) -> bool {
    ["##", "#@#", "#?#", "#$#", "#@$#", "#%#", "#@%#", "#@?#"]
        .iter()
        .any(|m| line.contains(m))
}

/// Outcome of parsing a single line.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ParsedLine {
    Rule(FilterRule),
    Ignored,
    Skipped(SkipReason),
}

pub fn parse_rule_line(line: &str) -> ParsedLine {
    let line = line.trim();
    if line.is_empty() || line.starts_with('!') || line.starts_with('[') || is_cosmetic(line) {
        return ParsedLine::Ignored;
    }

    let (kind, body) = match line.strip_prefix("@@") {
        Some(rest) => (RuleKind::Exception, rest),
        None => (RuleKind::Block, line),
    };

    let (pattern_src, options) = match body.rfind('$') {
        Some(i) => match parse_options(&body[i + 1..]) {
            Ok(opts) => (&body[..i], opts),
            Err(reason) => return ParsedLine::Skipped(reason),
        },
        None => (body, RuleOptions::default()),
    };

    if pattern_src.len() >= 2 && pattern_src.starts_with('/') && pattern_src.ends_with('/') {
        return ParsedLine::Skipped(SkipReason::RegexRule);
    }

    let (start, rest) = if let Some(rest) = pattern_src.strip_prefix("||") {
        (Anchor::DomainAnchor, rest)
    } else if let Some(rest) = pattern_src.strip_prefix('|') {
        (Anchor::StartAnchor, rest)
    } else {
        (Anchor::None, pattern_src)
    };
    let (end, rest) = match rest.strip_suffix('|') {
        Some(r) => (true, r),
        None => (false, rest),
    };
    let anchor = match (start, end) {
        (Anchor::DomainAnchor, true) => Anchor::DomainAndEndAnchor,
        (Anchor::StartAnchor, true) => Anchor::StartAndEndAnchor,
        (Anchor::None, true) => Anchor::EndAnchor,
        (a, false) => a,
        _ => unreachable!(),
    };

    ParsedLine::Rule(FilterRule {
        raw: line.to_string(),
        kind,
        anchor,
        pattern: tokenize_pattern(rest),
        options,
    })
}

fn tokenize_pattern(src: &str) -> Vec<PatternToken> {
    let mut out = Vec::new();
    let mut literal = String::new();
    for c in src.chars() {
        match c {
            '*' | '^' => {
                if !literal.is_empty() {
                    out.push(PatternToken::Literal(std::mem::take(&mut literal)));
                }
                if c == '^' {
                    out.push(PatternToken::Separator);
                } else if out.last() != Some(&PatternToken::Wildcard) {
                    out.push(PatternToken::Wildcard);
                }
            }
            _ => literal.push(c.to_ascii_lowercase()),
        }
    }
    if !literal.is_empty() {
        out.push(PatternToken::Literal(literal));
    }
    out
}

fn parse_options(src: &str) -> Result<RuleOptions, SkipReason> {
    let mut opts = RuleOptions::default();
    for raw in src.split(',') {
        let opt = raw.trim().to_ascii_lowercase();
        if let Some(list) = opt.strip_prefix("domain=") {
            let mut any = false;
            for entry in list.split('|').filter(|e| !e.is_empty()) {
                any = true;
                match entry.strip_prefix('~') {
                    Some(d) => opts.exclude_domains.push(d.to_string()),
                    None => opts.include_domains.push(entry.to_string()),
                }
            }
            if !any {
                return Err(SkipReason::EmptyDomainOption);
            }
            continue;
        }
        let (negated, name) = match opt.strip_prefix('~') {
            Some(n) => (true, n),
            None => (false, opt.as_str()),
        };
        if name == "third-party" {
            let party = if negated {
                Party::NotThirdParty
            } else {
                Party::ThirdParty
            };
            if opts.party.is_some_and(|p| p != party) {
                return Err(SkipReason::ConflictingParty);
            }
            opts.party = Some(party);
        } else if let Some(t) = RequestType::from_option(name) {
            if negated {
                opts.exclude_types.insert(t);
            } else {
                opts.include_types.insert(t);
            }
        } else {
            return Err(SkipReason::UnsupportedOption(raw.trim().to_string()));
        }
    }
    Ok(opts)
}

/// Parses a whole filter list. Never fails on content; I/O errors abort.
pub fn parse_filter_list<R: Read>(
    reader: R,
    source_name: &str,
) -> std::io::Result<ParsedFilterList> {
    let mut out = ParsedFilterList {
        source: source_name.to_string(),
        ..Default::default()
    };
    for (i, line) in BufReader::new(reader).lines().enumerate() {
        let line = line?;
        match parse_rule_line(&line) {
            ParsedLine::Rule(rule) => out.rules.push(rule),
            ParsedLine::Ignored => out.ignored_lines += 1,
            ParsedLine::Skipped(reason) => out.diagnostics.push(RuleDiagnostic {
                source: source_name.to_string(),
                line: i + 1,
                rule: line.trim().to_string(),
                reason,
            }),
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use PatternToken::*;

    fn rule(line: &str) -> FilterRule {
        match parse_rule_line(line) {
            ParsedLine::Rule(r) => r,
            other => panic!("{line:?} parsed as {other:?}"),
        }
    }

    #[test]
    fn domain_anchor_with_separator() {
        let r = rule("||doubleclick.net^");
        assert_eq!(r.kind, RuleKind::Block);
        assert_eq!(r.anchor, Anchor::DomainAnchor);
        assert_eq!(
            r.pattern,
            vec![Literal("doubleclick.net".into()), Separator]
        );
        assert!(r.options.is_empty());
    }

    #[test]
    fn exception_with_type() {
        let r = rule("@@||example.com/assets/$script");
        assert_eq!(r.kind, RuleKind::Exception);
        assert_eq!(r.anchor, Anchor::DomainAnchor);
        assert_eq!(r.pattern, vec![Literal("example.com/assets/".into())]);
        assert_eq!(
            r.options.include_types,
            BTreeSet::from([RequestType::Script])
        );
        assert_eq!(r.raw, "@@||example.com/assets/$script");
    }

    #[test]
    fn cosmetic_and_comments_are_ignored() {
        let list = "[Adblock Plus 2.0]\n! Title: x\nexample.com##.ad-banner\nexample.com#@#.ad\n#?#div:has(a)\n\n";
        let parsed = parse_filter_list(list.as_bytes(), "t").unwrap();
        assert!(parsed.rules.is_empty());
        assert!(parsed.diagnostics.is_empty());
        assert_eq!(parsed.ignored_lines, 6);
    }

    #[test]
    fn anchors() {
        assert_eq!(rule("|https://ads.").anchor, Anchor::StartAnchor);
        assert_eq!(rule(".gif|").anchor, Anchor::EndAnchor);
        assert_eq!(rule("|http://x.com/|").anchor, Anchor::StartAndEndAnchor);
        assert_eq!(rule("||x.com/a.js|").anchor, Anchor::DomainAndEndAnchor);
        assert_eq!(rule("/ads/*").anchor, Anchor::None);
    }

    #[test]
    fn wildcards_collapse_and_case_folds() {
        let r = rule("/AdS/**banner^");
        assert_eq!(
            r.pattern,
            vec![
                Literal("/ads/".into()),
                Wildcard,
                Literal("banner".into()),
                Separator
            ]
        );
    }

    #[test]
    fn options_are_parsed() {
        let r = rule("/track$third-party,~image,domain=a.com|~b.a.com");
        assert_eq!(r.options.party, Some(Party::ThirdParty));
        assert_eq!(
            r.options.exclude_types,
            BTreeSet::from([RequestType::Image])
        );
        assert_eq!(r.options.include_domains, vec!["a.com".to_string()]);
        assert_eq!(r.options.exclude_domains, vec!["b.a.com".to_string()]);
        assert_eq!(
            rule("/x$~third-party").options.party,
            Some(Party::NotThirdParty)
        );
    }

    #[test]
    fn unsupported_option_is_named() {
        let parsed = parse_filter_list("||x.com^$popup\n||y.com^\n".as_bytes(), "list").unwrap();
        assert_eq!(parsed.rules.len(), 1);
        assert_eq!(parsed.diagnostics.len(), 1);
        let d = &parsed.diagnostics[0];
        assert_eq!(d.line, 1);
        assert_eq!(d.reason, SkipReason::UnsupportedOption("popup".into()));
        assert!(d.to_string().contains("popup"));
    }

    #[test]
    fn conflicting_party_and_regex_are_skipped() {
        assert_eq!(
            parse_rule_line("/x$third-party,~third-party"),
            ParsedLine::Skipped(SkipReason::ConflictingParty)
        );
        assert_eq!(
            parse_rule_line("/ads[0-9]+/"),
            ParsedLine::Skipped(SkipReason::RegexRule)
        );
    }

    #[test]
    fn exception_iff_double_at() {
        for line in ["@@/a", "/a", "@@||b.com^$image", "||b.com^"] {
            let r = rule(line);
            assert_eq!(r.kind == RuleKind::Exception, line.starts_with("@@"));
        }
    }
}
