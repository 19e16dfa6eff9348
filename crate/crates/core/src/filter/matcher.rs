//! Single-rule matching against a request.

use std::ops::Range;

use super::rule::{FilterRule, Party, PatternToken, RequestType};
use crate::trace::{ResourceType, UrlParts};

/// Everything a rule needs to know about a request.
#[derive(Debug, Clone)]
pub struct RequestContext {
    pub url_parts: UrlParts,
    pub page_registrable_domain: String,
    pub resource_type: ResourceType,
    pub is_third_party: bool,
    url_lower: String,
    host: Range<usize>,
}

impl RequestContext {
    pub fn new(
        url_parts: UrlParts,
        page_registrable_domain: impl Into<String>,
        resource_type: ResourceType,
    ) -> Self {
        let page_registrable_domain = page_registrable_domain.into();
        let is_third_party = url_parts.registrable_domain != page_registrable_domain;
        let url_lower = url_parts.full_url.to_ascii_lowercase();
        let host = host_span(&url_lower);
        Self {
            url_parts,
            page_registrable_domain,
            resource_type,
            is_third_party,
            url_lower,
            host,
        }
    }

    pub fn request_type(&self) -> RequestType {
        self.resource_type.into()
    }

    pub(crate) fn url_lower(&self) -> &str {
        &self.url_lower
    }
}

/// Byte range of the host inside a lower-cased absolute URL.
fn host_span(url: &str) -> Range<usize> {
    let Some(scheme_end) = url.find("://") else {
        return 0..0;
    };
    let start = scheme_end + 3;
    let authority_end = url[start..]
        .find(['/', '?', '#'])
        .map_or(url.len(), |i| start + i);
    let host_start = url[start..authority_end]
        .rfind('@')
        .map_or(start, |i| start + i + 1);
    let authority = &url[host_start..authority_end];
    let host_len = if authority.starts_with('[') {
        authority.find(']').map_or(authority.len(), |i| i + 1)
    } else {
        authority.find(':').unwrap_or(authority.len())
    };
    host_start..host_start + host_len
}

/// Characters matched by `^`: anything except letters, digits and `_-.%`.
pub fn is_separator_char(c: char) -> bool {
    !(c.is_ascii_alphanumeric() || matches!(c, '_' | '-' | '.' | '%'))
}

pub fn match_rule(rule: &FilterRule, ctx: &RequestContext) -> bool {
    options_match(rule, ctx) && pattern_matches(rule, ctx)
}

fn domain_entry_matches(entry: &str, page: &str) -> bool {
    page == entry
        || (page.len() > entry.len()
            && page.ends_with(entry)
            && page[..page.len() - entry.len()].ends_with('.'))
}

fn options_match(rule: &FilterRule, ctx: &RequestContext) -> bool {
    let opts = &rule.options;
    match opts.party {
        Some(Party::ThirdParty) if !ctx.is_third_party => return false,
        Some(Party::NotThirdParty) if ctx.is_third_party => return false,
        _ => {}
    }
    let ty = ctx.request_type();
    if !opts.include_types.is_empty() && !opts.include_types.contains(&ty) {
        return false;
    }
    if opts.exclude_types.contains(&ty) {
        return false;
    }
    let page = ctx.page_registrable_domain.as_str();
    if opts
        .exclude_domains
        .iter()
        .any(|d| domain_entry_matches(d, page))
    {
        return false;
    }
    if !opts.include_domains.is_empty()
        && !opts
            .include_domains
            .iter()
            .any(|d| domain_entry_matches(d, page))
    {
        return false;
    }
    true
}

fn pattern_matches(rule: &FilterRule, ctx: &RequestContext) -> bool {
    let text = ctx.url_lower();
    let len = text.len();
    // reachable[p]: some prefix of the pattern can end at byte offset p.
    let mut reachable = vec![false; len + 1];
    if rule.anchor.is_start() {
        reachable[0] = true;
    } else if rule.anchor.is_domain() {
        let host = ctx.host.clone();
        if host.is_empty() {
            return false;
        }
        reachable[host.start] = true;
        let bytes = text.as_bytes();
        for i in host.start + 1..host.end {
            if bytes[i - 1] == b'.' {
                reachable[i] = true;
            }
        }
    } else {
        for (i, _) in text.char_indices() {
            reachable[i] = true;
        }
        reachable[len] = true;
    }

    for token in &rule.pattern {
        let mut next = vec![false; len + 1];
        let mut any = false;
        match token {
            PatternToken::Literal(lit) => {
                for p in (0..=len).filter(|&p| reachable[p]) {
                    if text[p..].starts_with(lit.as_str()) {
                        next[p + lit.len()] = true;
                        any = true;
                    }
                }
            }
            PatternToken::Separator => {
                for p in (0..=len).filter(|&p| reachable[p]) {
                    if p == len {
                        next[len] = true;
                        any = true;
                    } else if let Some(c) = text[p..].chars().next() {
                        if is_separator_char(c) {
                            next[p + c.len_utf8()] = true;
                            any = true;
                        }
                    }
                }
            }
            PatternToken::Wildcard => {
                if let Some(first) = reachable.iter().position(|&r| r) {
                    for (i, _) in text[first..].char_indices() {
                        next[first + i] = true;
                    }
                    next[len] = true;
                    any = true;
                }
            }
        }
        if !any {
            return false;
        }
        reachable = next;
    }

    if rule.anchor.is_end() {
        reachable[len]
    } else {
        reachable.iter().any(|&r| r)
    }
}
