//! URL decomposition into hostname and registrable domain.

use serde::{Deserialize, Serialize};
use thiserror::Error;
use url::{Host, Url};

use super::psl::PublicSuffixList;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum UrlError {
    #[error("unparsable URL {url:?}: {reason}")]
    Unparsable { url: String, reason: String },
    #[error("URL {url:?} has no host")]
    NoHost { url: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct UrlParts {
    pub full_url: String,
    pub hostname: String,
    pub registrable_domain: String,
    pub path_and_query: String,
}

pub(crate) fn parse_absolute(url: &str) -> Result<Url, UrlError> {
    let parsed = Url::parse(url).map_err(|e| UrlError::Unparsable {
        url: url.to_string(),
        reason: e.to_string(),
    })?;
    match parsed.host() {
        Some(Host::Domain(d)) if !d.is_empty() => Ok(parsed),
        Some(Host::Ipv4(_)) | Some(Host::Ipv6(_)) => Ok(parsed),
        _ => Err(UrlError::NoHost {
            url: url.to_string(),
        }),
    }
}

/// Splits `url` into hostname, eTLD+1 and path.
///
/// IP hosts, single-label hosts, and hosts that are themselves public
/// suffixes use the hostname verbatim as the registrable domain.
pub fn decompose_url(url: &str, psl: &PublicSuffixList) -> Result<UrlParts, UrlError> {
    let parsed = parse_absolute(url)?;
    let (hostname, registrable_domain) = match parsed.host() {
        Some(Host::Domain(d)) => {
            let hostname = d.to_ascii_lowercase();
            let registrable = psl
                .registrable_domain(&hostname)
                .unwrap_or_else(|| hostname.clone());
            (hostname, registrable)
        }
        Some(Host::Ipv4(ip)) => (ip.to_string(), ip.to_string()),
        Some(Host::Ipv6(ip)) => {
            let s = format!("[{ip}]");
            (s.clone(), s)
        }
        None => {
            return Err(UrlError::NoHost {
                url: url.to_string(),
            })
        }
    };
    let mut path_and_query = parsed.path().to_string();
    if let Some(q) = parsed.query() {
        path_and_query.push('?');
        path_and_query.push_str(q);
    }
    Ok(UrlParts {
        full_url: url.to_string(),
        hostname,
        registrable_domain,
        path_and_query,
    })
}
