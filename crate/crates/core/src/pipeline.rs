//! Loading inputs and running the subcommands end to end.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::attribution::{is_browser_internal, Granularity};
use crate::divergence::{analyze_mixed_methods, MethodDivergence};
use crate::filter::{parse_filter_list, Label, RequestContext, RuleSet};
use crate::report::{self, FileDigest, InputSummary, Provenance};
use crate::sifter::{self, LabeledRequest, SiftError, SiftResult, SweepPoint};
use crate::trace::{decompose_url, parse_trace, PublicSuffixList, RequestRecord, UrlParts};

/// Problems that stop a run before any output is written.
#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("cannot read {path}")]
    Read {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("cannot write {path}")]
    Write {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("bad public suffix list {path}")]
    Psl {
        path: PathBuf,
        source: crate::trace::PslError,
    },
    #[error(transparent)]
    Sift(#[from] SiftError),
    #[error("cannot start worker pool: {0}")]
    Pool(#[from] rayon::ThreadPoolBuildError),
}

#[derive(Debug, Clone, Default)]
pub struct InputPaths {
    pub traces: Vec<PathBuf>,
    pub filters: Vec<PathBuf>,
    pub psl: PathBuf,
}

#[derive(Debug, Clone)]
pub struct Options {
    pub threshold: f64,
    pub positional_identity: bool,
    /// Worker threads; 0 lets the pool pick.
    pub jobs: usize,
}

impl Default for Options {
    fn default() -> Self {
        Self {
            threshold: sifter::DEFAULT_THRESHOLD,
            positional_identity: false,
            jobs: 0,
        }
    }
}

/// Parsed inputs plus the digests and diagnostics gathered on the way.
#[derive(Debug, Clone)]
pub struct Loaded {
    pub records: Vec<RequestRecord>,
    pub rules: RuleSet,
    pub psl: PublicSuffixList,
    pub traces: Vec<FileDigest>,
    pub filters: Vec<FileDigest>,
    pub psl_digest: FileDigest,
    pub diagnostics: Vec<String>,
    pub rejected_trace_lines: u64,
    pub skipped_rules: u64,
}

fn read(path: &Path) -> Result<Vec<u8>, PipelineError> {
    fs::read(path).map_err(|source| PipelineError::Read {
        path: path.to_path_buf(),
        source,
    })
}

fn display_name(path: &Path) -> String {
    path.file_name().map_or_else(
        || path.display().to_string(),
        |n| n.to_string_lossy().into_owned(),
    )
}

pub fn build_pool(jobs: usize) -> Result<rayon::ThreadPool, PipelineError> {
    Ok(rayon::ThreadPoolBuilder::new().num_threads(jobs).build()?)
}

/// Reads traces, filter lists and the PSL. With several trace files each
/// request id is prefixed by the file's position, as in `1:abc`.
pub fn load(paths: &InputPaths) -> Result<Loaded, PipelineError> {
    let psl_bytes = read(&paths.psl)?;
    let psl =
        PublicSuffixList::parse(psl_bytes.as_slice()).map_err(|source| PipelineError::Psl {
            path: paths.psl.clone(),
            source,
        })?;
    let mut diagnostics = Vec::new();

    let mut rules = RuleSet::default();
    let mut filters = Vec::new();
    let mut skipped_rules = 0;
    for path in &paths.filters {
        let bytes = read(path)?;
        let name = display_name(path);
        let parsed =
            parse_filter_list(bytes.as_slice(), &name).map_err(|source| PipelineError::Read {
                path: path.clone(),
                source,
            })?;
        skipped_rules += parsed.diagnostics.len() as u64;
        diagnostics.extend(parsed.diagnostics.iter().map(ToString::to_string));
        for rule in parsed.rules {
            rules.push(rule);
        }
        filters.push(FileDigest::of_bytes(name, &bytes));
    }

    let mut records = Vec::new();
    let mut traces = Vec::new();
    let mut rejected_trace_lines = 0;
    let prefix_ids = paths.traces.len() > 1;
    for (i, path) in paths.traces.iter().enumerate() {
        let bytes = read(path)?;
        let name = display_name(path);
        let parsed = parse_trace(bytes.as_slice()).map_err(|e| PipelineError::Read {
            path: path.clone(),
            source: match e {
                crate::trace::TraceError::Io(io) => io,
            },
        })?;
        rejected_trace_lines += parsed
            .diagnostics
            .iter()
            .filter(|d| !d.reason.starts_with("duplicate"))
            .count() as u64;
        diagnostics.extend(parsed.diagnostics.iter().map(|d| format!("{name}: {d}")));
        records.extend(parsed.records.into_iter().map(|mut r| {
            if prefix_ids {
                r.request_id = format!("{i}:{}", r.request_id);
            }
            r
        }));
        traces.push(FileDigest::of_bytes(name, &bytes));
    }

    Ok(Loaded {
        records,
        rules,
        psl,
        traces,
        filters,
        psl_digest: FileDigest::of_bytes(display_name(&paths.psl), &psl_bytes),
        diagnostics,
        rejected_trace_lines,
        skipped_rules,
    })
}

fn page_domain(record: &RequestRecord, psl: &PublicSuffixList) -> String {
    decompose_url(&record.top_level_url, psl)
        .map(|p| p.registrable_domain)
        .unwrap_or_default()
}

/// Labels one record with the filter rules.
pub fn label_record(
    record: &RequestRecord,
    rules: &RuleSet,
    psl: &PublicSuffixList,
) -> Result<(UrlParts, Label), String> {
    let parts = decompose_url(&record.url, psl).map_err(|e| e.to_string())?;
    let ctx = RequestContext::new(parts, page_domain(record, psl), record.resource_type);
    let label = rules.label_request(&ctx);
    Ok((ctx.url_parts, label))
}

/// Labels the script-initiated records; the rest are counted and dropped.
pub fn label_records(
    loaded: &Loaded,
    summary: &mut InputSummary,
    diagnostics: &mut Vec<String>,
) -> Vec<LabeledRequest> {
    let outcomes: Vec<Option<Result<LabeledRequest, String>>> = loaded
        .records
        .par_iter()
        .map(|r| {
            r.is_script_initiated().then(|| {
                label_record(r, &loaded.rules, &loaded.psl).map(|(url, label)| LabeledRequest {
                    record: r.clone(),
                    url,
                    label,
                })
            })
        })
        .collect();
    summary.records = loaded.records.len() as u64;
    let mut out = Vec::with_capacity(outcomes.len());
    for (record, outcome) in loaded.records.iter().zip(outcomes) {
        match outcome {
            None => summary.not_script_initiated += 1,
            Some(Ok(l)) => {
                summary.script_initiated += 1;
                out.push(l);
            }
            Some(Err(e)) => {
                summary.script_initiated += 1;
                summary.undecomposable_urls += 1;
                diagnostics.push(format!("request {}: {e}; excluded", record.request_id));
            }
        }
    }
    let internal = out
        .iter()
        .filter(|l| is_browser_internal(&l.record.call_stack[0].script_url))
        .count();
    if internal > 0 {
        diagnostics.push(format!(
            "{internal} requests are initiated by browser-internal or extension scripts"
        ));
    }
    out
}

/// Everything a classify run produces.
#[derive(Debug, Clone)]
pub struct Classification {
    pub result: SiftResult,
    pub requests: Vec<LabeledRequest>,
    pub provenance: Provenance,
    pub inputs: InputSummary,
    pub diagnostics: Vec<String>,
}

pub fn classify(loaded: &Loaded, options: &Options) -> Result<Classification, PipelineError> {
    if !(options.threshold.is_finite() && options.threshold > 0.0) {
        return Err(SiftError::BadThreshold(options.threshold).into());
    }
    let pool = build_pool(options.jobs)?;
    let mut diagnostics = loaded.diagnostics.clone();
    let mut inputs = InputSummary {
        rejected_trace_lines: loaded.rejected_trace_lines,
        rules: loaded.rules.len() as u64,
        skipped_rules: loaded.skipped_rules,
        ..InputSummary::default()
    };
    let (requests, result) = pool.install(|| {
        let requests = label_records(loaded, &mut inputs, &mut diagnostics);
        let result = sifter::sift(&requests, options.threshold, options.positional_identity);
        (requests, result)
    });
    let mut provenance = Provenance::new(options.threshold, options.positional_identity);
    provenance.traces = loaded.traces.clone();
    provenance.filters = loaded.filters.clone();
    provenance.psl = Some(loaded.psl_digest.clone());
    Ok(Classification {
        result,
        requests,
        provenance,
        inputs,
        diagnostics,
    })
}

fn write_file(path: PathBuf, contents: &str) -> Result<(), PipelineError> {
    fs::write(&path, contents).map_err(|source| PipelineError::Write { path, source })
}

fn create_dir(dir: &Path) -> Result<(), PipelineError> {
    fs::create_dir_all(dir).map_err(|source| PipelineError::Write {
        path: dir.to_path_buf(),
        source,
    })
}

pub fn write_diagnostics(dir: &Path, diagnostics: &[String]) -> Result<(), PipelineError> {
    create_dir(dir)?;
    let mut text = diagnostics.join("\n");
    if !text.is_empty() {
        text.push('\n');
    }
    write_file(dir.join("diagnostics.txt"), &text)
}

pub fn write_classification(
    dir: &Path,
    c: &Classification,
    bin_width: f64,
) -> Result<(), PipelineError> {
    report::write_classification(dir, &c.result, &c.provenance, &c.inputs, bin_width).map_err(
        |source| PipelineError::Write {
            path: dir.to_path_buf(),
            source,
        },
    )?;
    write_diagnostics(dir, &c.diagnostics)
}

pub fn sweep(
    c: &Classification,
    level: Granularity,
    grid: &[f64],
) -> Result<Vec<SweepPoint>, PipelineError> {
    Ok(sifter::sweep_level(&c.result, level, grid)?)
}

pub fn write_sweep(
    dir: &Path,
    level: Granularity,
    points: &[SweepPoint],
) -> Result<(), PipelineError> {
    create_dir(dir)?;
    write_file(dir.join("sweep.csv"), &report::sweep_csv(level, points))
}

pub fn diverge(c: &Classification, jobs: usize) -> Result<Vec<MethodDivergence>, PipelineError> {
    Ok(build_pool(jobs)?.install(|| analyze_mixed_methods(&c.result, &c.requests)))
}

pub fn write_divergence(
    dir: &Path,
    threshold: f64,
    findings: &[MethodDivergence],
) -> Result<(), PipelineError> {
    create_dir(dir)?;
    write_file(
        dir.join("divergence.json"),
        &report::divergence_json(threshold, findings),
    )
}

#[derive(Serialize)]
struct LabelLine<'a> {
    request_id: &'a str,
    url: &'a str,
    script_initiated: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    label: Option<Label>,
    #[serde(skip_serializing_if = "Option::is_none")]
    hostname: Option<&'a str>,
    #[serde(skip_serializing_if = "Option::is_none")]
    registrable_domain: Option<&'a str>,
    #[serde(skip_serializing_if = "Option::is_none")]
    error: Option<String>,
}

/// One JSON object per record with its filter label.
pub fn label_lines(loaded: &Loaded, jobs: usize) -> Result<Vec<String>, PipelineError> {
    let pool = build_pool(jobs)?;
    Ok(pool.install(|| {
        loaded
            .records
            .par_iter()
            .map(|r| {
                let outcome = label_record(r, &loaded.rules, &loaded.psl);
                let (parts, label, error) = match &outcome {
                    Ok((p, l)) => (Some(p), Some(*l), None),
                    Err(e) => (None, None, Some(e.clone())),
                };
                serde_json::to_string(&LabelLine {
                    request_id: &r.request_id,
                    url: &r.url,
                    script_initiated: r.is_script_initiated(),
                    label,
                    hostname: parts.map(|p| p.hostname.as_str()),
                    registrable_domain: parts.map(|p| p.registrable_domain.as_str()),
                    error,
                })
                .expect("label line serializes")
            })
            .collect()
    }))
}
