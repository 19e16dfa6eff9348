//! Machine-readable results: request and entity tables with separation
//! factors, ratio histograms, sweep data and divergence findings.
//!
//! Percentages are kept as exact fractions in JSON and rounded half-up to
//! whole percents only for display.

use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::Path;

use serde::Serialize;

use crate::attribution::Granularity;
use crate::divergence::MethodDivergence;
use crate::sifter::{serialize_ratio, EntityStats, SiftResult, SweepPoint, Verdict};

pub const DEFAULT_BIN_WIDTH: f64 = 0.25;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Fraction {
    pub numerator: u64,
    pub denominator: u64,
}

impl Fraction {
    pub fn new(numerator: u64, denominator: u64) -> Option<Self> {
        (denominator > 0).then_some(Self {
            numerator,
            denominator,
        })
    }

    pub fn value(&self) -> f64 {
        self.numerator as f64 / self.denominator as f64
    }

    /// Whole percent, rounded half-up, in exact integer arithmetic.
    pub fn percent_rounded(&self) -> u64 {
        let n = self.numerator as u128 * 200 + self.denominator as u128;
        (n / (self.denominator as u128 * 2)) as u64
    }
}

fn display_percent(f: Option<Fraction>) -> String {
    match f {
        Some(f) => format!("{}%", f.percent_rounded()),
        None => "n/a".to_string(),
    }
}

fn json_number(v: f64) -> String {
    serde_json::to_string(&v).expect("finite float")
}

#[derive(Serialize)]
struct FractionJson {
    numerator: u64,
    denominator: u64,
    value: f64,
    display: String,
}

fn fraction_json(f: Option<Fraction>) -> Option<FractionJson> {
    f.map(|f| FractionJson {
        numerator: f.numerator,
        denominator: f.denominator,
        value: f.value(),
        display: display_percent(Some(f)),
    })
}

/// Request counts at one level, as in the "classification of requests" table.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RequestRow {
    pub level: Granularity,
    pub tracking: u64,
    pub functional: u64,
    pub mixed: u64,
    pub entered: u64,
    pub separation: Option<Fraction>,
    pub cumulative: Option<Fraction>,
}

impl RequestRow {
    pub fn separation_display(&self) -> String {
        display_percent(self.separation)
    }

    pub fn cumulative_display(&self) -> String {
        display_percent(self.cumulative)
    }
}

/// Entity counts at one level, as in the "classification of resources" table.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EntityRow {
    pub level: Granularity,
    pub tracking: u64,
    pub functional: u64,
    pub mixed: u64,
    pub separation: Option<Fraction>,
}

/// Per-level (tracking, functional, mixed) request counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LevelCounts {
    pub level: Granularity,
    pub tracking: u64,
    pub functional: u64,
    pub mixed: u64,
    /// Requests that could not be keyed at this level.
    pub unattributed: u64,
}

/// Builds the request table from raw per-level counts. The first level's
/// entering requests are the total.
pub fn request_table(levels: &[LevelCounts]) -> Vec<RequestRow> {
    let total = levels
        .first()
        .map_or(0, |l| l.tracking + l.functional + l.mixed + l.unattributed);
    let mut attributed = 0;
    levels
        .iter()
        .map(|l| {
            let entered = l.tracking + l.functional + l.mixed + l.unattributed;
            attributed += l.tracking + l.functional;
            RequestRow {
                level: l.level,
                tracking: l.tracking,
                functional: l.functional,
                mixed: l.mixed,
                entered,
                separation: Fraction::new(l.tracking + l.functional, entered),
                cumulative: Fraction::new(attributed, total),
            }
        })
        .collect()
}

pub fn summary_tables(result: &SiftResult) -> (Vec<RequestRow>, Vec<EntityRow>) {
    let counts: Vec<LevelCounts> = result
        .levels
        .iter()
        .map(|l| LevelCounts {
            level: l.granularity,
            tracking: l.tracking_requests,
            functional: l.functional_requests,
            mixed: l.mixed_requests,
            unattributed: l.unattributed.len() as u64,
        })
        .collect();
    let requests = request_table(&counts);
    let entities = result
        .levels
        .iter()
        .map(|l| {
            let t = l.entity_count(Verdict::Tracking) as u64;
            let f = l.entity_count(Verdict::Functional) as u64;
            let m = l.entity_count(Verdict::Mixed) as u64;
            EntityRow {
                level: l.granularity,
                tracking: t,
                functional: f,
                mixed: m,
                separation: Fraction::new(t + f, t + f + m),
            }
        })
        .collect();
    (requests, entities)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Histogram {
    pub bin_width: f64,
    /// `(lower edge, count)` for contiguous bins `[k·w, (k+1)·w)`.
    pub bins: Vec<(f64, u64)>,
    pub positive_infinity: u64,
    pub negative_infinity: u64,
}

impl Histogram {
    pub fn total(&self) -> u64 {
        self.bins.iter().map(|(_, c)| c).sum::<u64>()
            + self.positive_infinity
            + self.negative_infinity
    }
}

/// Bins finite ratios; `±∞` go to separate overflow counts.
///
/// # Panics
/// If `bin_width` is not a positive finite number.
pub fn histogram(stats: &[EntityStats], bin_width: f64) -> Histogram {
    assert!(
        bin_width.is_finite() && bin_width > 0.0,
        "bin width must be positive"
    );
    let mut out = Histogram {
        bin_width,
        bins: Vec::new(),
        positive_infinity: 0,
        negative_infinity: 0,
    };
    let mut indices = Vec::new();
    for s in stats {
        if s.ratio == f64::INFINITY {
            out.positive_infinity += 1;
        } else if s.ratio == f64::NEG_INFINITY {
            out.negative_infinity += 1;
        } else {
            indices.push((s.ratio / bin_width).floor() as i64);
        }
    }
    if let (Some(&lo), Some(&hi)) = (indices.iter().min(), indices.iter().max()) {
        let mut counts = vec![0u64; (hi - lo + 1) as usize];
        for k in indices {
            counts[(k - lo) as usize] += 1;
        }
        out.bins = counts
            .into_iter()
            .enumerate()
            .map(|(i, c)| ((lo + i as i64) as f64 * bin_width, c))
            .collect();
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct FileDigest {
    pub name: String,
    pub sha256: String,
}

impl FileDigest {
    pub fn of_bytes(name: impl Into<String>, bytes: &[u8]) -> Self {
        use sha2::{Digest, Sha256};
        Self {
            name: name.into(),
            sha256: hex::encode(Sha256::digest(bytes)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Provenance {
    pub tool: String,
    pub version: String,
    pub threshold: f64,
    pub positional_identity: bool,
    pub traces: Vec<FileDigest>,
    pub filters: Vec<FileDigest>,
    pub psl: Option<FileDigest>,
}

impl Provenance {
    pub fn new(threshold: f64, positional_identity: bool) -> Self {
        Self {
            tool: env!("CARGO_PKG_NAME").to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            threshold,
            positional_identity,
            traces: Vec::new(),
            filters: Vec::new(),
            psl: None,
        }
    }
}

/// Counts describing what went into the sift.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct InputSummary {
    pub records: u64,
    pub script_initiated: u64,
    pub not_script_initiated: u64,
    pub rejected_trace_lines: u64,
    pub undecomposable_urls: u64,
    pub rules: u64,
    pub skipped_rules: u64,
}

#[derive(Serialize)]
struct RequestRowJson {
    level: Granularity,
    tracking: u64,
    functional: u64,
    mixed: u64,
    entered: u64,
    separation: Option<FractionJson>,
    cumulative: Option<FractionJson>,
}

#[derive(Serialize)]
struct EntityRowJson {
    level: Granularity,
    tracking: u64,
    functional: u64,
    mixed: u64,
    separation: Option<FractionJson>,
}

#[derive(Serialize)]
struct EntityJson<'a> {
    key: &'a crate::attribution::EntityKey,
    tracking_count: u64,
    functional_count: u64,
    #[serde(serialize_with = "serialize_ratio")]
    ratio: f64,
    verdict: Verdict,
}

#[derive(Serialize)]
struct LevelJson<'a> {
    granularity: Granularity,
    entered: u64,
    tracking_requests: u64,
    functional_requests: u64,
    mixed_requests: u64,
    unattributed: &'a [crate::sifter::Unattributed],
    entities: Vec<EntityJson<'a>>,
}

#[derive(Serialize)]
struct SummaryJson<'a> {
    provenance: &'a Provenance,
    inputs: &'a InputSummary,
    total_requests: u64,
    requests_table: Vec<RequestRowJson>,
    entities_table: Vec<EntityRowJson>,
    levels: Vec<LevelJson<'a>>,
    residual: &'a [String],
}

pub fn summary_json(result: &SiftResult, provenance: &Provenance, inputs: &InputSummary) -> String {
    let (requests, entities) = summary_tables(result);
    let doc = SummaryJson {
        provenance,
        inputs,
        total_requests: result.total_requests,
        requests_table: requests
            .iter()
            .map(|r| RequestRowJson {
                level: r.level,
                tracking: r.tracking,
                functional: r.functional,
                mixed: r.mixed,
                entered: r.entered,
                separation: fraction_json(r.separation),
                cumulative: fraction_json(r.cumulative),
            })
            .collect(),
        entities_table: entities
            .iter()
            .map(|r| EntityRowJson {
                level: r.level,
                tracking: r.tracking,
                functional: r.functional,
                mixed: r.mixed,
                separation: fraction_json(r.separation),
            })
            .collect(),
        levels: result
            .levels
            .iter()
            .map(|l| LevelJson {
                granularity: l.granularity,
                entered: l.entered,
                tracking_requests: l.tracking_requests,
                functional_requests: l.functional_requests,
                mixed_requests: l.mixed_requests,
                unattributed: &l.unattributed,
                entities: l
                    .entities
                    .iter()
                    .map(|e| EntityJson {
                        key: &e.key,
                        tracking_count: e.tracking_count,
                        functional_count: e.functional_count,
                        ratio: e.ratio,
                        verdict: e.verdict,
                    })
                    .collect(),
            })
            .collect(),
        residual: &result.residual,
    };
    let mut s = serde_json::to_string_pretty(&doc).expect("summary serializes");
    s.push('\n');
    s
}

fn csv_fraction(f: Option<Fraction>) -> (String, String) {
    match f {
        Some(f) => (json_number(f.value()), f.percent_rounded().to_string()),
        None => ("n/a".into(), "n/a".into()),
    }
}

pub fn requests_csv(rows: &[RequestRow]) -> String {
    let mut out = String::from("level,tracking,functional,mixed,entered,separation,separation_pct,cumulative,cumulative_pct\n");
    for r in rows {
        let (s, sp) = csv_fraction(r.separation);
        let (c, cp) = csv_fraction(r.cumulative);
        let _ = writeln!(
            out,
            "{},{},{},{},{},{s},{sp},{c},{cp}",
            r.level, r.tracking, r.functional, r.mixed, r.entered
        );
    }
    out
}

pub fn entities_csv(rows: &[EntityRow]) -> String {
    let mut out = String::from("level,tracking,functional,mixed,separation,separation_pct\n");
    for r in rows {
        let (s, sp) = csv_fraction(r.separation);
        let _ = writeln!(
            out,
            "{},{},{},{},{s},{sp}",
            r.level, r.tracking, r.functional, r.mixed
        );
    }
    out
}

pub fn histogram_csv(h: &Histogram) -> String {
    let mut out = String::from("bin_lower_edge,count\n");
    let _ = writeln!(out, "-inf,{}", h.negative_infinity);
    for (edge, count) in &h.bins {
        let _ = writeln!(out, "{},{count}", json_number(*edge));
    }
    let _ = writeln!(out, "+inf,{}", h.positive_infinity);
    out
}

pub fn sweep_csv(level: Granularity, points: &[SweepPoint]) -> String {
    let mut out = String::from("level,threshold,mixed_entities,total_entities,mixed_percent\n");
    for p in points {
        let pct = p
            .mixed_percent
            .map_or_else(|| "n/a".to_string(), json_number);
        let _ = writeln!(
            out,
            "{level},{},{},{},{pct}",
            json_number(p.threshold),
            p.mixed_entities,
            p.total_entities
        );
    }
    out
}

pub fn divergence_json(threshold: f64, findings: &[MethodDivergence]) -> String {
    #[derive(Serialize)]
    struct Doc<'a> {
        threshold: f64,
        mixed_methods: usize,
        methods: &'a [MethodDivergence],
    }
    let mut s = serde_json::to_string_pretty(&Doc {
        threshold,
        mixed_methods: findings.len(),
        methods: findings,
    })
    .expect("divergence serializes");
    s.push('\n');
    s
}

/// Writes summary.json, both tables and one histogram per level into `dir`.
pub fn write_classification(
    dir: &Path,
    result: &SiftResult,
    provenance: &Provenance,
    inputs: &InputSummary,
    bin_width: f64,
) -> io::Result<()> {
    fs::create_dir_all(dir)?;
    let (requests, entities) = summary_tables(result);
    fs::write(
        dir.join("summary.json"),
        summary_json(result, provenance, inputs),
    )?;
    fs::write(dir.join("requests_table.csv"), requests_csv(&requests))?;
    fs::write(dir.join("entities_table.csv"), entities_csv(&entities))?;
    for level in &result.levels {
        let h = histogram(&level.entities, bin_width);
        fs::write(
            dir.join(format!("histogram_{}.csv", level.granularity)),
            histogram_csv(&h),
        )?;
    }
    Ok(())
}
