#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};

use regex::Regex;
use trackersift::attribution::{EntityKey, Granularity};
use trackersift::filter::{parse_filter_list, RuleSet};
use trackersift::pipeline::label_record;
use trackersift::sifter::{LabeledRequest, Verdict};
use trackersift::synth::Generated;
use trackersift::trace::{PublicSuffixList, ResourceType};

/// Labels a generated trace with its own filter list and PSL.
pub fn labeled(g: &Generated) -> Vec<LabeledRequest> {
    let psl = PublicSuffixList::from_str_rules(&g.psl).unwrap();
    let rules = RuleSet::new(
        parse_filter_list(g.filters.as_bytes(), "synthetic")
            .unwrap()
            .rules,
    );
    g.records
        .iter()
        .filter(|r| r.is_script_initiated())
        .map(|r| {
            let (url, label) = label_record(r, &rules, &psl).unwrap();
            LabeledRequest {
                record: r.clone(),
                url,
                label,
            }
        })
        .collect()
}

/// Regex-based reference for a single rule line, written from the rule text
/// without going through the crate's parser.
pub struct OracleRule {
    pub exception: bool,
    regex: Regex,
    third_party: Option<bool>,
    include_types: Vec<&'static str>,
    exclude_types: Vec<&'static str>,
    include_domains: Vec<String>,
    exclude_domains: Vec<String>,
}

pub struct OracleRequest<'a> {
    pub url_lower: String,
    pub request_domain: &'a str,
    pub page_domain: &'a str,
    pub resource_type: ResourceType,
}

fn type_option(t: ResourceType) -> &'static str {
    match t {
        ResourceType::Script => "script",
        ResourceType::Image => "image",
        ResourceType::Stylesheet => "stylesheet",
        ResourceType::Xhr | ResourceType::Fetch => "xmlhttprequest",
        ResourceType::Subdocument => "subdocument",
        ResourceType::Document => "document",
        ResourceType::Other => "other",
    }
}

const TYPE_NAMES: [&str; 7] = [
    "script",
    "image",
    "stylesheet",
    "xmlhttprequest",
    "subdocument",
    "document",
    "other",
];

impl OracleRule {
    /// `None` for lines the engine is expected to skip or ignore.
    pub fn compile(line: &str) -> Option<Self> {
        let (exception, body) = match line.strip_prefix("@@") {
            Some(rest) => (true, rest),
            None => (false, line),
        };
        let (pattern, options) = match body.rfind('$') {
            Some(i) => (&body[..i], Some(&body[i + 1..])),
            None => (body, None),
        };
        let mut rule = OracleRule {
            exception,
            regex: Regex::new("").unwrap(),
            third_party: None,
            include_types: Vec::new(),
            exclude_types: Vec::new(),
            include_domains: Vec::new(),
            exclude_domains: Vec::new(),
        };
        for opt in options.into_iter().flat_map(|o| o.split(',')) {
            let opt = opt.trim().to_ascii_lowercase();
            let (neg, name) = match opt.strip_prefix('~') {
                Some(n) => (true, n.to_string()),
                None => (false, opt.clone()),
            };
            if name == "third-party" {
                if rule.third_party == Some(neg) {
                    return None;
                }
                rule.third_party = Some(!neg);
            } else if let Some(list) = opt.strip_prefix("domain=") {
                for d in list.split('|') {
                    match d.strip_prefix('~') {
                        Some(d) => rule.exclude_domains.push(d.to_string()),
                        None => rule.include_domains.push(d.to_string()),
                    }
                }
            } else {
                let t = TYPE_NAMES.iter().find(|t| **t == name)?;
                if neg {
                    rule.exclude_types.push(t);
                } else {
                    rule.include_types.push(t);
                }
            }
        }

        if pattern.len() > 1 && pattern.starts_with('/') && pattern.ends_with('/') {
            return None;
        }
        let mut p = pattern.to_ascii_lowercase();
        let mut re = String::new();
        if let Some(rest) = p.strip_prefix("||") {
            re.push_str(r"^[a-z][a-z0-9+.\-]*://(?:[^/?#@]*@)?(?:[^/?#:@]*\.)?");
            p = rest.to_string();
        } else if let Some(rest) = p.strip_prefix('|') {
            re.push('^');
            p = rest.to_string();
        }
        let end = p.ends_with('|');
        if end {
            p.pop();
        }
        for c in p.chars() {
            match c {
                '*' => re.push_str(".*"),
                '^' => re.push_str(r"(?:[^a-z0-9_\-.%]|$)"),
                c => re.push_str(&regex::escape(&c.to_string())),
            }
        }
        if end {
            re.push('$');
        }
        rule.regex = Regex::new(&re).unwrap();
        Some(rule)
    }

    fn domain_hit(entry: &str, page: &str) -> bool {
        page == entry || page.ends_with(&format!(".{entry}"))
    }

    pub fn matches(&self, req: &OracleRequest<'_>) -> bool {
        if let Some(tp) = self.third_party {
            if tp != (req.request_domain != req.page_domain) {
                return false;
            }
        }
        let ty = type_option(req.resource_type);
        if !self.include_types.is_empty() && !self.include_types.contains(&ty) {
            return false;
        }
        if self.exclude_types.contains(&ty) {
            return false;
        }
        if self
            .exclude_domains
            .iter()
            .any(|d| Self::domain_hit(d, req.page_domain))
        {
            return false;
        }
        if !self.include_domains.is_empty()
            && !self
                .include_domains
                .iter()
                .any(|d| Self::domain_hit(d, req.page_domain))
        {
            return false;
        }
        self.regex.is_match(&req.url_lower)
    }
}

/// Straightforward sift: per level, group the entering requests by key in a
/// sorted map, compute the verdict from the common log-ratio definition, and
/// pass on the requests of mixed keys.
pub struct Reference {
    /// Per level: key -> (tracking, functional, verdict).
    pub levels: Vec<BTreeMap<EntityKey, (u64, u64, Verdict)>>,
    pub entered: Vec<u64>,
    pub residual: BTreeSet<String>,
}

pub fn reference_verdict(t: u64, f: u64, tau: f64) -> Verdict {
    let r = if f == 0 {
        f64::INFINITY
    } else if t == 0 {
        f64::NEG_INFINITY
    } else {
        (t as f64 / f as f64).log10()
    };
    if r >= tau {
        Verdict::Tracking
    } else if r <= -tau {
        Verdict::Functional
    } else {
        Verdict::Mixed
    }
}

pub fn reference_sift(requests: &[LabeledRequest], tau: f64) -> Reference {
    let mut current: Vec<&LabeledRequest> = requests.iter().collect();
    let mut out = Reference {
        levels: Vec::new(),
        entered: Vec::new(),
        residual: BTreeSet::new(),
    };
    for g in Granularity::ALL {
        out.entered.push(current.len() as u64);
        let mut tally: BTreeMap<EntityKey, (u64, u64, Verdict)> = BTreeMap::new();
        for r in &current {
            let key = r.entity_key(g, false).unwrap();
            let e = tally.entry(key).or_insert((0, 0, Verdict::Mixed));
            match r.label {
                trackersift::filter::Label::Tracking => e.0 += 1,
                trackersift::filter::Label::Functional => e.1 += 1,
            }
        }
        for v in tally.values_mut() {
            v.2 = reference_verdict(v.0, v.1, tau);
        }
        current.retain(|r| tally[&r.entity_key(g, false).unwrap()].2 == Verdict::Mixed);
        out.levels.push(tally);
    }
    out.residual = current
        .iter()
        .map(|r| r.record.request_id.clone())
        .collect();
    out
}

pub const CORPUS_PSL: &str = "com\nnet\norg\nco.uk\n";

pub struct Triple {
    pub rule: String,
    pub url: String,
    pub page_domain: String,
    pub resource_type: ResourceType,
}

/// Random (rule, URL, context) triples over a small vocabulary chosen so that
/// matches and misses are both common. Rules the engine would not load are
/// still emitted; callers decide what to do with them.
pub fn filter_corpus(seed: u64, rules: usize, urls_per_rule: usize) -> Vec<Triple> {
    use rand::seq::SliceRandom;
    use rand::{Rng, SeedableRng};

    const HOSTS: &[&str] = &[
        "example.com",
        "ads.example.com",
        "cdn.ads.example.com",
        "tracker.net",
        "pixel.tracker.net",
        "adsexample.com",
        "static.site.co.uk",
        "site.co.uk",
        "a-b.org",
        "img.a-b.org",
        "ads.org",
    ];
    const SEGMENTS: &[&str] = &[
        "ads", "ad", "track", "pixel", "js", "img", "banner", "api", "v1", "collect", "x_y", "a-b",
        "100%25", "ads.js", "main.css", "p.gif", "AdS", "Track.JS",
    ];
    const QUERIES: &[&str] = &[
        "",
        "",
        "?id=1&ref=ads",
        "?q=track",
        "#frag",
        "?u=https://tracker.net/x",
    ];
    const FRAGMENTS: &[&str] = &[
        "example.com",
        "ads.",
        "tracker",
        "ads",
        "example",
        "net",
        "/ads/",
        "/track",
        "pixel",
        "ads.js",
        ".gif",
        "?id=",
        "banner",
        "/api/v1",
        "a-b",
        "x_y",
        "%25",
        "co.uk",
        ".com/",
        "js",
        "PiXel",
    ];
    const PAGES: &[&str] = &["example.com", "tracker.net", "site.co.uk", "other.org"];
    const OPTIONS: &[&str] = &[
        "third-party",
        "~third-party",
        "script",
        "image",
        "~image",
        "xmlhttprequest",
        "~xmlhttprequest",
        "stylesheet",
        "subdocument",
        "document",
        "other",
        "~script",
        "domain=example.com",
        "domain=~example.com",
        "domain=site.co.uk|tracker.net",
        "domain=other.org|~example.com",
        "domain=co.uk",
    ];

    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(rules * urls_per_rule);
    for _ in 0..rules {
        let mut rule = String::new();
        if rng.gen_bool(0.2) {
            rule.push_str("@@");
        }
        match rng.gen_range(0..4) {
            0 | 1 => rule.push_str("||"),
            2 => rule.push('|'),
            _ => {}
        }
        if rule.ends_with('|') && !rule.ends_with("||") && rng.gen_bool(0.7) {
            rule.push_str(
                ["http", "https://", "https://ads", "http://example"]
                    .choose(&mut rng)
                    .unwrap(),
            );
        }
        for _ in 0..rng.gen_range(1..=3) {
            match rng.gen_range(0..6) {
                0 => rule.push('*'),
                1 => rule.push('^'),
                _ => rule.push_str(FRAGMENTS.choose(&mut rng).unwrap()),
            }
        }
        if rng.gen_bool(0.15) {
            rule.push('|');
        }
        if rng.gen_bool(0.45) {
            let n = rng.gen_range(1..=3);
            let opts: Vec<&str> = OPTIONS.choose_multiple(&mut rng, n).copied().collect();
            rule.push('$');
            rule.push_str(&opts.join(","));
        }
        for _ in 0..urls_per_rule {
            let scheme = if rng.gen_bool(0.7) { "https" } else { "http" };
            let host = HOSTS.choose(&mut rng).unwrap();
            let port = if rng.gen_bool(0.1) { ":8080" } else { "" };
            let segs: Vec<&str> = (0..rng.gen_range(0..4))
                .map(|_| *SEGMENTS.choose(&mut rng).unwrap())
                .collect();
            let query = QUERIES.choose(&mut rng).unwrap();
            out.push(Triple {
                rule: rule.clone(),
                url: format!("{scheme}://{host}{port}/{}{query}", segs.join("/")),
                page_domain: PAGES.choose(&mut rng).unwrap().to_string(),
                resource_type: *ResourceType::ALL.choose(&mut rng).unwrap(),
            });
        }
    }
    out
}

pub struct OracleReport {
    pub compared: usize,
    pub matches: usize,
    pub disagreements: Vec<String>,
}

/// Compares `match_rule` with the regex oracle over every loadable triple.
pub fn run_filter_oracle(triples: &[Triple]) -> OracleReport {
    use trackersift::filter::{match_rule, parse_rule_line, ParsedLine, RequestContext};
    use trackersift::trace::decompose_url;

    let psl = PublicSuffixList::from_str_rules(CORPUS_PSL).unwrap();
    let mut report = OracleReport {
        compared: 0,
        matches: 0,
        disagreements: Vec::new(),
    };
    for t in triples {
        let parsed = parse_rule_line(&t.rule);
        let oracle = OracleRule::compile(&t.rule);
        let rule = match (parsed, oracle) {
            (ParsedLine::Rule(rule), Some(oracle)) => (rule, oracle),
            (ParsedLine::Rule(_), None) | (ParsedLine::Skipped(_), Some(_)) => {
                report
                    .disagreements
                    .push(format!("{:?}: loadability differs", t.rule));
                continue;
            }
            _ => continue,
        };
        let parts = decompose_url(&t.url, &psl).unwrap();
        let req = OracleRequest {
            url_lower: parts.full_url.to_ascii_lowercase(),
            request_domain: &parts.registrable_domain.clone(),
            page_domain: &t.page_domain,
            resource_type: t.resource_type,
        };
        let expected = rule.1.matches(&req);
        let ctx = RequestContext::new(parts.clone(), t.page_domain.clone(), t.resource_type);
        let got = match_rule(&rule.0, &ctx);
        report.compared += 1;
        report.matches += usize::from(got);
        if got != expected {
            report.disagreements.push(format!(
                "{:?} vs {} (page {}, {}): engine {got}, oracle {expected}",
                t.rule, t.url, t.page_domain, t.resource_type
            ));
        }
    }
    report
}

/// Generates random scenario `seed` and checks the sift against the planted
/// ground truth, the brute-force reference, and the partition and flow
/// invariants.
pub fn check_random_scenario(seed: u64) -> Result<(), String> {
    use std::collections::HashSet;
    use trackersift::divergence::analyze_mixed_methods;
    use trackersift::sifter::sift;
    use trackersift::synth::{generate, random_scenario};

    let scenario = random_scenario(seed, 200);
    let g = generate(&scenario, seed).map_err(|e| format!("seed {seed}: {e}\n{scenario}"))?;
    let requests = labeled(&g);
    let fail = |msg: String| Err(format!("seed {seed}: {msg}\n{scenario}"));
    if requests.len() > 200 {
        return fail(format!("{} requests", requests.len()));
    }
    let planted: Vec<_> = g
        .records
        .iter()
        .zip(&g.labels)
        .filter(|(r, _)| r.is_script_initiated())
        .map(|(_, l)| *l)
        .collect();
    if requests.iter().map(|r| r.label).ne(planted) {
        return fail("filter labels differ from planted labels".into());
    }

    let result = sift(&requests, scenario.threshold, false);
    if result != g.expected {
        return fail("sift differs from the planted result".into());
    }

    // partition: every entering request is attributed once or unattributed
    let mut entering: BTreeSet<String> = requests
        .iter()
        .map(|r| r.record.request_id.clone())
        .collect();
    let mut residual: BTreeSet<String> = BTreeSet::new();
    for level in &result.levels {
        let mut seen = HashSet::new();
        for id in level
            .attributions
            .iter()
            .map(|a| &a.request_id)
            .chain(level.unattributed.iter().map(|u| &u.request_id))
        {
            if !seen.insert(id.clone()) {
                return fail(format!("{id} attributed twice at {}", level.granularity));
            }
        }
        let seen: BTreeSet<String> = seen.into_iter().collect();
        if seen != entering || level.entered != entering.len() as u64 {
            return fail(format!(
                "{} does not partition its entering requests",
                level.granularity
            ));
        }
        let entity_total: u64 = level
            .entities
            .iter()
            .map(|e| e.tracking_count + e.functional_count)
            .sum();
        if entity_total + level.unattributed.len() as u64 != level.entered
            || level.tracking_requests + level.functional_requests + level.mixed_requests
                != entity_total
        {
            return fail(format!("{} counts do not add up", level.granularity));
        }
        residual.extend(level.unattributed.iter().map(|u| u.request_id.clone()));
        entering = level
            .attributions
            .iter()
            .filter(|a| a.verdict == Verdict::Mixed)
            .map(|a| a.request_id.clone())
            .collect();
    }
    residual.extend(entering);
    let separated: u64 = result.levels.iter().map(|l| l.separated_requests()).sum();
    if separated + result.residual.len() as u64 != result.total_requests {
        return fail("flow is not conserved".into());
    }
    if residual != result.residual.iter().cloned().collect::<BTreeSet<_>>() {
        return fail("residual mismatch".into());
    }

    // brute-force reference, entity for entity
    let reference = reference_sift(&requests, scenario.threshold);
    for (level, (expected, entered)) in result
        .levels
        .iter()
        .zip(reference.levels.iter().zip(&reference.entered))
    {
        let got: BTreeMap<EntityKey, (u64, u64, Verdict)> = level
            .entities
            .iter()
            .map(|e| {
                (
                    e.key.clone(),
                    (e.tracking_count, e.functional_count, e.verdict),
                )
            })
            .collect();
        if &got != expected || level.entered != *entered {
            return fail(format!("reference disagrees at {}", level.granularity));
        }
    }
    if reference.residual != residual {
        return fail("reference residual differs".into());
    }

    // divergence against the planted expectation
    let findings = analyze_mixed_methods(&result, &requests);
    if findings.len() != g.expected_divergence.len() {
        return fail("mixed method count differs from planted divergence".into());
    }
    for (f, e) in findings.iter().zip(&g.expected_divergence) {
        let points: Vec<_> = f
            .divergence
            .iter()
            .map(|p| {
                trackersift::attribution::MethodId::new(p.script_url.clone(), p.method_name.clone())
            })
            .collect();
        if f.script_url != e.method.script_url
            || f.method_name != e.method.method_name
            || points != e.points
        {
            return fail(format!(
                "divergence of {} differs: {points:?} vs {:?}",
                e.method, e.points
            ));
        }
        if f.first_point_replay
            .as_ref()
            .is_some_and(|r| r.removed_functional > 0)
        {
            return fail(format!(
                "removing a divergence point of {} removes functional stacks",
                e.method
            ));
        }
    }
    Ok(())
}

/// Mixed sets must only grow as the threshold rises, at every level.
pub fn check_monotonic(seed: u64) -> Result<(), String> {
    use trackersift::sifter::{parse_grid, sift, sweep_level};
    use trackersift::synth::{generate, random_scenario};

    let scenario = random_scenario(seed, 200);
    let g = generate(&scenario, seed).map_err(|e| e.to_string())?;
    let result = sift(&labeled(&g), scenario.threshold, false);
    let grid = parse_grid("1.0:3.0:0.1").unwrap();
    for level in Granularity::ALL {
        let points = sweep_level(&result, level, &grid).map_err(|e| e.to_string())?;
        for w in points.windows(2) {
            if !w[0].mixed_keys.is_subset(&w[1].mixed_keys) {
                return Err(format!(
                    "seed {seed}: {level} mixed set shrinks from {} to {}",
                    w[0].threshold, w[1].threshold
                ));
            }
        }
    }
    Ok(())
}

pub const PSL_LIST: &str = include_str!("../../fixtures/psl/public_suffix_list.dat");
const PSL_CASES: &str = include_str!("../../fixtures/psl/test_psl.txt");

/// Reference cases left out on purpose, with the reason. Every case in the
/// bundled file currently applies.
pub const PSL_SKIPPED: &[(&str, &str)] = &[];

pub struct PslCase {
    pub line: usize,
    pub input: Option<String>,
    pub expected: Option<String>,
}

pub fn psl_cases() -> Vec<PslCase> {
    let re = Regex::new(r"^checkPublicSuffix\((null|'[^']*'), (null|'[^']*')\);").unwrap();
    let arg = |s: &str| (s != "null").then(|| s.trim_matches('\'').to_string());
    PSL_CASES
        .lines()
        .enumerate()
        .filter_map(|(i, l)| {
            re.captures(l.trim()).map(|c| PslCase {
                line: i + 1,
                input: arg(&c[1]),
                expected: arg(&c[2]),
            })
        })
        .filter(|c| {
            !PSL_SKIPPED
                .iter()
                .any(|(input, _)| c.input.as_deref() == Some(*input))
        })
        .collect()
}

fn ascii(domain: &str) -> String {
    idna::domain_to_ascii(domain).unwrap()
}

/// Checks strict lookup on every case and URL decomposition on every case
/// with an input. Returns the number of checks made.
pub fn run_psl_conformance() -> Result<usize, Vec<String>> {
    use trackersift::trace::decompose_url;

    let psl = PublicSuffixList::from_str_rules(PSL_LIST).unwrap();
    let mut failures = Vec::new();
    let mut checks = 0;
    for case in psl_cases() {
        checks += 1;
        let got = psl.registrable_domain(case.input.as_deref().unwrap_or(""));
        let want = case.expected.as_deref().map(ascii);
        if got != want {
            failures.push(format!(
                "line {}: {:?} gave {got:?}, want {want:?}",
                case.line, case.input
            ));
        }
        let Some(input) = case.input.as_deref() else {
            continue;
        };
        checks += 1;
        match (decompose_url(&format!("https://{input}/path"), &psl), want) {
            (Ok(parts), Some(want)) if parts.registrable_domain != want => {
                failures.push(format!(
                    "line {}: url for {input} gave {}",
                    case.line, parts.registrable_domain
                ));
            }
            // without a registrable domain the host stands in for it
            (Ok(parts), None) if parts.registrable_domain != parts.hostname => {
                failures.push(format!(
                    "line {}: url for {input} should fall back to its host",
                    case.line
                ));
            }
            (Err(e), Some(_)) => failures.push(format!("line {}: url for {input}: {e}", case.line)),
            _ => {}
        }
    }
    if failures.is_empty() {
        Ok(checks)
    } else {
        Err(failures)
    }
}
