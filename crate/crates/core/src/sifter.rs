//! Hierarchical tracking/functional separation.
//!
//! Requests are grouped by registrable domain first. Entities whose
//! tracking-to-functional log ratio falls strictly inside `(-τ, τ)` are
//! mixed, and only their requests move on to the next granularity
//! (hostname, then initiator script, then initiator method). Requests of
//! mixed methods form the residual.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;

use rayon::prelude::*;
use serde::{Serialize, Serializer};
use thiserror::Error;

use crate::attribution::{initiator_method, initiator_script, EntityKey, Granularity};
use crate::filter::Label;
use crate::trace::{RequestRecord, UrlParts};

pub const DEFAULT_THRESHOLD: f64 = 2.0;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SiftError {
    #[error("entity unobserved: both counts are zero")]
    Unobserved,
    #[error("threshold grid is empty")]
    EmptyGrid,
    #[error("threshold {0} is not a positive finite number")]
    BadThreshold(f64),
    #[error("threshold grid is not sorted ascending")]
    UnsortedGrid,
    #[error("invalid grid {0:?}: expected start:stop:step")]
    GridSyntax(String),
}

/// A labeled script-initiated request ready for sifting.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledRequest {
    pub record: RequestRecord,
    pub url: UrlParts,
    pub label: Label,
}

impl LabeledRequest {
    /// Key of this request at `granularity`.
    pub fn entity_key(
        &self,
        granularity: Granularity,
        positional_identity: bool,
    ) -> Result<EntityKey, String> {
        match granularity {
            Granularity::Domain => Ok(EntityKey::Domain(self.url.registrable_domain.clone())),
            Granularity::Hostname => Ok(EntityKey::Hostname(self.url.hostname.clone())),
            Granularity::Script => initiator_script(&self.record).map_err(|e| e.to_string()),
            Granularity::Method => {
                initiator_method(&self.record, positional_identity).map_err(|e| e.to_string())
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub enum Verdict {
    Tracking,
    Functional,
    Mixed,
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Verdict::Tracking => "Tracking",
            Verdict::Functional => "Functional",
            Verdict::Mixed => "Mixed",
        })
    }
}

/// `log10(tracking / functional)`, with `±∞` when one side is zero.
pub fn ratio(tracking_count: u64, functional_count: u64) -> Result<f64, SiftError> {
    match (tracking_count, functional_count) {
        (0, 0) => Err(SiftError::Unobserved),
        (_, 0) => Ok(f64::INFINITY),
        (0, _) => Ok(f64::NEG_INFINITY),
        (t, f) => Ok((t as f64 / f as f64).log10()),
    }
}

/// Both interval ends are pure: `ratio >= τ` is tracking, `ratio <= -τ` functional.
pub fn verdict(ratio: f64, threshold: f64) -> Verdict {
    if ratio >= threshold {
        Verdict::Tracking
    } else if ratio <= -threshold {
        Verdict::Functional
    } else {
        Verdict::Mixed
    }
}

pub(crate) fn serialize_ratio<S: Serializer>(
    value: &f64,
    serializer: S,
) -> Result<S::Ok, S::Error> {
    if value.is_finite() {
        serializer.serialize_f64(*value)
    } else if *value > 0.0 {
        serializer.serialize_str("+inf")
    } else {
        serializer.serialize_str("-inf")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EntityStats {
    pub key: EntityKey,
    pub tracking_count: u64,
    pub functional_count: u64,
    #[serde(serialize_with = "serialize_ratio")]
    pub ratio: f64,
    pub verdict: Verdict,
}

impl EntityStats {
    pub fn new(
        key: EntityKey,
        tracking_count: u64,
        functional_count: u64,
        threshold: f64,
    ) -> Result<Self, SiftError> {
        let r = ratio(tracking_count, functional_count)?;
        Ok(Self {
            key,
            tracking_count,
            functional_count,
            ratio: r,
            verdict: verdict(r, threshold),
        })
    }

    pub fn requests(&self) -> u64 {
        self.tracking_count + self.functional_count
    }

    pub fn verdict_at(&self, threshold: f64) -> Verdict {
        verdict(self.ratio, threshold)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Attribution {
    pub request_id: String,
    pub key: EntityKey,
    pub verdict: Verdict,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Unattributed {
    pub request_id: String,
    pub reason: String,
}

/// Outcome of one granularity level.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LevelResult {
    pub granularity: Granularity,
    /// Requests that entered this level.
    pub entered: u64,
    pub tracking_requests: u64,
    pub functional_requests: u64,
    pub mixed_requests: u64,
    /// Entities sorted by key.
    pub entities: Vec<EntityStats>,
    /// One entry per attributed request, in input order.
    pub attributions: Vec<Attribution>,
    /// Requests whose key could not be derived; they go to the residual.
    pub unattributed: Vec<Unattributed>,
}

impl LevelResult {
    pub fn separated_requests(&self) -> u64 {
        self.tracking_requests + self.functional_requests
    }

    /// Fraction of entering requests attributed to pure entities.
    pub fn separation_factor(&self) -> Option<f64> {
        (self.entered > 0).then(|| self.separated_requests() as f64 / self.entered as f64)
    }

    pub fn entity_count(&self, verdict: Verdict) -> usize {
        self.entities
            .iter()
            .filter(|e| e.verdict == verdict)
            .count()
    }

    pub fn entities_by_verdict(&self, verdict: Verdict) -> impl Iterator<Item = &EntityStats> {
        self.entities.iter().filter(move |e| e.verdict == verdict)
    }

    pub fn entity(&self, key: &EntityKey) -> Option<&EntityStats> {
        self.entities
            .binary_search_by(|e| e.key.cmp(key))
            .ok()
            .map(|i| &self.entities[i])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SiftResult {
    pub threshold: f64,
    pub positional_identity: bool,
    pub total_requests: u64,
    /// Always four levels: domain, hostname, script, method.
    pub levels: Vec<LevelResult>,
    /// Requests still unattributed after the method level, in input order.
    pub residual: Vec<String>,
}

impl SiftResult {
    pub fn level(&self, granularity: Granularity) -> &LevelResult {
        &self.levels[granularity as usize]
    }

    /// Fraction of all requests attributed at or before `granularity`.
    pub fn cumulative_separation_factor(&self, granularity: Granularity) -> Option<f64> {
        (self.total_requests > 0).then(|| {
            let attributed: u64 = self.levels[..=granularity as usize]
                .iter()
                .map(LevelResult::separated_requests)
                .sum();
            attributed as f64 / self.total_requests as f64
        })
    }

    pub fn verdict_of(&self, key: &EntityKey) -> Option<Verdict> {
        self.level(key.granularity()).entity(key).map(|e| e.verdict)
    }
}

type Tally = HashMap<EntityKey, (u64, u64)>;

fn merge_tallies(mut a: Tally, b: Tally) -> Tally {
    if a.len() < b.len() {
        return merge_tallies(b, a);
    }
    for (k, (t, f)) in b {
        let e = a.entry(k).or_default();
        e.0 += t;
        e.1 += f;
    }
    a
}

/// Classifies the requests entering one level.
///
/// Returns the level outcome and the requests that flow to the next level.
pub fn classify_level<'a>(
    requests: &[&'a LabeledRequest],
    granularity: Granularity,
    threshold: f64,
    positional_identity: bool,
) -> (LevelResult, Vec<&'a LabeledRequest>) {
    let keys: Vec<Result<EntityKey, String>> = requests
        .par_iter()
        .map(|r| r.entity_key(granularity, positional_identity))
        .collect();

    let tally: Tally = requests
        .par_iter()
        .zip(keys.par_iter())
        .fold(Tally::new, |mut acc, (req, key)| {
            if let Ok(key) = key {
                let e = acc.entry(key.clone()).or_default();
                match req.label {
                    Label::Tracking => e.0 += 1,
                    Label::Functional => e.1 += 1,
                }
            }
            acc
        })
        .reduce(Tally::new, merge_tallies);

    let stats: BTreeMap<EntityKey, EntityStats> = tally
        .into_iter()
        .map(|(k, (t, f))| {
            let s = EntityStats::new(k.clone(), t, f, threshold)
                .expect("tallied entities are observed");
            (k, s)
        })
        .collect();

    let mut level = LevelResult {
        granularity,
        entered: requests.len() as u64,
        tracking_requests: 0,
        functional_requests: 0,
        mixed_requests: 0,
        entities: Vec::new(),
        attributions: Vec::with_capacity(requests.len()),
        unattributed: Vec::new(),
    };
    let mut next = Vec::new();
    for (req, key) in requests.iter().zip(keys) {
        match key {
            Ok(key) => {
                let v = stats[&key].verdict;
                match v {
                    Verdict::Tracking => level.tracking_requests += 1,
                    Verdict::Functional => level.functional_requests += 1,
                    Verdict::Mixed => {
                        level.mixed_requests += 1;
                        next.push(*req);
                    }
                }
                level.attributions.push(Attribution {
                    request_id: req.record.request_id.clone(),
                    key,
                    verdict: v,
                });
            }
            Err(reason) => level.unattributed.push(Unattributed {
                request_id: req.record.request_id.clone(),
                reason,
            }),
        }
    }
    level.entities = stats.into_values().collect();
    (level, next)
}

/// Runs all four levels.
pub fn sift(requests: &[LabeledRequest], threshold: f64, positional_identity: bool) -> SiftResult {
    let mut entering: Vec<&LabeledRequest> = requests.iter().collect();
    let mut levels = Vec::with_capacity(4);
    let mut residual_ids: BTreeSet<String> = BTreeSet::new();
    for granularity in Granularity::ALL {
        let (level, next) = classify_level(&entering, granularity, threshold, positional_identity);
        residual_ids.extend(level.unattributed.iter().map(|u| u.request_id.clone()));
        if granularity == Granularity::Method {
            residual_ids.extend(next.iter().map(|r| r.record.request_id.clone()));
        }
        levels.push(level);
        entering = next;
    }
    let residual = requests
        .iter()
        .map(|r| &r.record.request_id)
        .filter(|id| residual_ids.contains(*id))
        .cloned()
        .collect();
    SiftResult {
        threshold,
        positional_identity,
        total_requests: requests.len() as u64,
        levels,
        residual,
    }
}

/// One point of a threshold sensitivity sweep.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepPoint {
    pub threshold: f64,
    pub mixed_entities: usize,
    pub total_entities: usize,
    /// Percentage of entities at the level that are mixed; `None` when the level is empty.
    pub mixed_percent: Option<f64>,
    #[serde(skip)]
    pub mixed_keys: BTreeSet<EntityKey>,
}

pub fn validate_grid(grid: &[f64]) -> Result<(), SiftError> {
    if grid.is_empty() {
        return Err(SiftError::EmptyGrid);
    }
    if let Some(&bad) = grid.iter().find(|t| !(t.is_finite() && **t > 0.0)) {
        return Err(SiftError::BadThreshold(bad));
    }
    if grid.windows(2).any(|w| w[0] > w[1]) {
        return Err(SiftError::UnsortedGrid);
    }
    Ok(())
}

/// Re-evaluates the verdicts of an already-sifted level at each threshold.
/// Entity counts are those of `result`; only verdicts change.
pub fn sweep_level(
    result: &SiftResult,
    granularity: Granularity,
    grid: &[f64],
) -> Result<Vec<SweepPoint>, SiftError> {
    validate_grid(grid)?;
    let entities = &result.level(granularity).entities;
    Ok(grid
        .iter()
        .map(|&threshold| {
            let mixed_keys: BTreeSet<EntityKey> = entities
                .iter()
                .filter(|e| e.verdict_at(threshold) == Verdict::Mixed)
                .map(|e| e.key.clone())
                .collect();
            let total = entities.len();
            SweepPoint {
                threshold,
                mixed_entities: mixed_keys.len(),
                total_entities: total,
                mixed_percent: (total > 0).then(|| 100.0 * mixed_keys.len() as f64 / total as f64),
                mixed_keys,
            }
        })
        .collect())
}

/// Sifts at `base_threshold` and sweeps the chosen level over `grid`.
pub fn sweep(
    requests: &[LabeledRequest],
    grid: &[f64],
    granularity: Granularity,
    base_threshold: f64,
    positional_identity: bool,
) -> Result<Vec<SweepPoint>, SiftError> {
    validate_grid(grid)?;
    let result = sift(requests, base_threshold, positional_identity);
    sweep_level(&result, granularity, grid)
}

/// Parses `start:stop:step`; both endpoints are included.
pub fn parse_grid(spec: &str) -> Result<Vec<f64>, SiftError> {
    let err = || SiftError::GridSyntax(spec.to_string());
    let parts: Vec<f64> = spec
        .split(':')
        .map(|p| p.trim().parse::<f64>().map_err(|_| err()))
        .collect::<Result<_, _>>()?;
    let [start, stop, step] = parts[..] else {
        return Err(err());
    };
    if !(start.is_finite() && stop.is_finite() && step.is_finite()) || step <= 0.0 || stop < start {
        return Err(err());
    }
    let steps = ((stop - start) / step + 1e-9).floor() as u64;
    let grid: Vec<f64> = (0..=steps)
        .map(|i| ((start + i as f64 * step) * 1e9).round() / 1e9)
        .collect();
    validate_grid(&grid)?;
    Ok(grid)
}
