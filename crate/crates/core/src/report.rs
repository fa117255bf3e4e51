//! Alignment tables, layer-wise curve data and concept inspection reports.
//!
//! Every writer here is a pure function of its inputs: output ordering is
//! fixed and floats use Rust's shortest round-trip formatting.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::align::{AlignmentRecord, ConceptDiagnostic, LayerGap};
use crate::cluster::EncodedConcept;
use crate::ingest::POLARITY_TAXONOMY;
use crate::labeler::{ranked_words, ConceptId};

pub const ALIGNMENT_CSV_HEADER: &str = "layer,taxonomy,theta,lambda,alignment_term,coverage_term,num_encoded,num_linguistic";
pub const LAYER_CONVENTION: &str = "layer 0 = embedding output, layers 1..L = encoder blocks";

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("no alignment records to report")]
    NoRecords,
    #[error("{path}:{line}: {reason}")]
    Malformed {
        path: PathBuf,
        line: usize,
        reason: String,
    },
    #[error("invalid curve for {taxonomy}: {reason}")]
    InvalidCurve { taxonomy: String, reason: String },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ReportError + '_ {
    move |source| ReportError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn write_file(path: &Path, contents: &str) -> Result<(), ReportError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    fs::write(path, contents).map_err(io_err(path))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ValueKind {
    Lambda,
    AlignmentTerm,
    CoverageTerm,
}

/// Plot-ready series: one value per layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveSeries {
    pub model: String,
    pub taxonomy: String,
    pub theta: f64,
    pub value_kind: ValueKind,
    pub points: Vec<(u32, f64)>,
    pub layer_convention: String,
}

impl CurveSeries {
    pub fn validate(&self) -> Result<(), ReportError> {
        let bad = |reason: String| ReportError::InvalidCurve {
            taxonomy: self.taxonomy.clone(),
            reason,
        };
        if self.points.windows(2).any(|w| w[0].0 >= w[1].0) {
            return Err(bad("layers not strictly increasing".into()));
        }
        let max = match self.value_kind {
            ValueKind::Lambda => 100.0,
            _ => 1.0,
        };
        if let Some((l, v)) = self.points.iter().find(|(_, v)| !(0.0..=max).contains(v)) {
            return Err(bad(format!("layer {l} value {v} outside [0, {max}]")));
        }
        Ok(())
    }
}

pub fn alignment_csv(records: &[AlignmentRecord]) -> String {
    let mut out = String::from(ALIGNMENT_CSV_HEADER);
    out.push('\n');
    for r in sorted(records) {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            r.layer,
            csv_field(&r.taxonomy),
            r.theta,
            r.lambda,
            r.alignment_term,
            r.coverage_term,
            r.num_encoded,
            r.num_linguistic
        );
    }
    out
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

fn sorted(records: &[AlignmentRecord]) -> Vec<&AlignmentRecord> {
    let mut v: Vec<&AlignmentRecord> = records.iter().collect();
    v.sort_by(|a, b| {
        (a.layer, &a.taxonomy)
            .cmp(&(b.layer, &b.taxonomy))
            .then(a.theta.total_cmp(&b.theta))
    });
    v
}

/// Per-concept diagnostics as JSON lines, one per (layer, taxonomy, concept).
pub fn per_concept_jsonl(records: &[AlignmentRecord]) -> String {
    let mut out = String::new();
    for r in sorted(records) {
        for c in &r.per_concept {
            let line = PerConceptLine {
                layer: r.layer,
                taxonomy: r.taxonomy.clone(),
                theta: r.theta,
                diagnostic: c.clone(),
            };
            out.push_str(&serde_json::to_string(&line).expect("serializes"));
            out.push('\n');
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct PerConceptLine {
    layer: u32,
    taxonomy: String,
    theta: f64,
    #[serde(flatten)]
    diagnostic: ConceptDiagnostic,
}

#[derive(Debug, Deserialize)]
struct CsvRow {
    layer: u32,
    taxonomy: String,
    theta: f64,
    lambda: f64,
    alignment_term: f64,
    coverage_term: f64,
    num_encoded: usize,
    num_linguistic: usize,
}

/// Reads records back from the alignment CSV and the per-concept lines.
/// Per-tag coverage flags are not stored and come back empty.
pub fn read_alignment(csv_path: &Path, jsonl_path: &Path) -> Result<Vec<AlignmentRecord>, ReportError> {
    let mut reader = csv::Reader::from_path(csv_path).map_err(|e| ReportError::Malformed {
        path: csv_path.to_path_buf(),
        line: 0,
        reason: e.to_string(),
    })?;
    let header: Vec<String> = reader
        .headers()
        .map_err(|e| ReportError::Malformed {
            path: csv_path.to_path_buf(),
            line: 1,
            reason: e.to_string(),
        })?
        .iter()
        .map(str::to_string)
        .collect();
    if header.join(",") != ALIGNMENT_CSV_HEADER {
        return Err(ReportError::Malformed {
            path: csv_path.to_path_buf(),
            line: 1,
            reason: format!("unexpected header {:?}", header.join(",")),
        });
    }
    let mut records = Vec::new();
    for (i, row) in reader.deserialize::<CsvRow>().enumerate() {
        let row = row.map_err(|e| ReportError::Malformed {
            path: csv_path.to_path_buf(),
            line: i + 2,
            reason: e.to_string(),
        })?;
        records.push(AlignmentRecord {
            layer: row.layer,
            taxonomy: row.taxonomy,
            theta: row.theta,
            lambda: row.lambda,
            alignment_term: row.alignment_term,
            coverage_term: row.coverage_term,
            num_encoded: row.num_encoded,
            num_linguistic: row.num_linguistic,
            aligned_encoded: 0,
            covered_linguistic: (row.coverage_term * row.num_linguistic as f64).round() as usize,
            coverage: BTreeMap::new(),
            per_concept: Vec::new(),
        });
    }

    let mut diags: BTreeMap<(u32, String, u64), Vec<ConceptDiagnostic>> = BTreeMap::new();
    if jsonl_path.exists() {
        let text = fs::read_to_string(jsonl_path).map_err(io_err(jsonl_path))?;
        for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let l: PerConceptLine = serde_json::from_str(line).map_err(|e| ReportError::Malformed {
                path: jsonl_path.to_path_buf(),
                line: i + 1,
                reason: e.to_string(),
            })?;
            diags
                .entry((l.layer, l.taxonomy, l.theta.to_bits()))
                .or_default()
                .push(l.diagnostic);
        }
    }
    for r in &mut records {
        if let Some(d) = diags.remove(&(r.layer, r.taxonomy.clone(), r.theta.to_bits())) {
            r.aligned_encoded = d.iter().filter(|c| c.aligned).count();
            r.per_concept = d;
        }
    }
    Ok(records)
}

fn file_safe(s: &str) -> String {
    s.chars()
        .map(|c| if c.is_alphanumeric() || "+-_.".contains(c) { c } else { '_' })
        .collect()
}

/// Curves for one model: a λ curve per taxonomy and, for the polarity
/// taxonomy, the share of concepts aligned to each polarity tag.
pub fn build_curves(records: &[AlignmentRecord], model: &str) -> Result<Vec<(String, CurveSeries)>, ReportError> {
    let mut by_tax: BTreeMap<(&str, u64), Vec<&AlignmentRecord>> = BTreeMap::new();
    for r in records {
        by_tax.entry((r.taxonomy.as_str(), r.theta.to_bits())).or_default().push(r);
    }
    let multi_theta = by_tax.keys().map(|(t, _)| *t).collect::<BTreeSet<_>>().len() < by_tax.len();
    let mut curves = Vec::new();
    for ((taxonomy, theta_bits), mut recs) in by_tax {
        recs.sort_by_key(|r| r.layer);
        let theta = f64::from_bits(theta_bits);
        let base = if multi_theta {
            format!("{}__{}__theta{}", file_safe(model), file_safe(taxonomy), theta)
        } else {
            format!("{}__{}", file_safe(model), file_safe(taxonomy))
        };
        let lambda = CurveSeries {
            model: model.to_string(),
            taxonomy: taxonomy.to_string(),
            theta,
            value_kind: ValueKind::Lambda,
            points: recs.iter().map(|r| (r.layer, r.lambda)).collect(),
            layer_convention: LAYER_CONVENTION.into(),
        };
        lambda.validate()?;
        curves.push((format!("{base}.json"), lambda));

        if taxonomy == POLARITY_TAXONOMY {
            let tags: BTreeSet<&str> = recs
                .iter()
                .flat_map(|r| r.per_concept.iter().filter_map(|c| c.best_tag.as_deref()))
                .chain(recs.iter().flat_map(|r| r.coverage.keys().map(String::as_str)))
                .collect();
            for tag in tags {
                let curve = CurveSeries {
                    model: model.to_string(),
                    taxonomy: format!("{taxonomy}:{tag}"),
                    theta,
                    value_kind: ValueKind::AlignmentTerm,
                    points: recs.iter().map(|r| (r.layer, r.aligned_share(tag))).collect(),
                    layer_convention: LAYER_CONVENTION.into(),
                };
                curve.validate()?;
                curves.push((format!("{base}__{}.json", file_safe(tag)), curve));
            }
        }
    }
    Ok(curves)
}

/// Writes `alignment.csv` and `curves/*.json` under `out_dir`; returns the
/// paths written, in order.
pub fn emit_alignment_report(records: &[AlignmentRecord], model: &str, out_dir: &Path) -> Result<Vec<PathBuf>, ReportError> {
    if records.is_empty() {
        return Err(ReportError::NoRecords);
    }
    let mut written = Vec::new();
    let csv_path = out_dir.join("alignment.csv");
    write_file(&csv_path, &alignment_csv(records))?;
    written.push(csv_path);
    for (name, curve) in build_curves(records, model)? {
        let path = out_dir.join("curves").join(name);
        let mut json = serde_json::to_string_pretty(&curve).expect("serializes");
        json.push('\n');
        write_file(&path, &json)?;
        written.push(path);
    }
    Ok(written)
}

/// Markdown report: per layer, each concept's size, label, best tag and
/// purity per taxonomy, and up to `top_n` member words.
pub fn concept_report(
    concepts: &[EncodedConcept],
    labels: &BTreeMap<ConceptId, String>,
    alignments: &[AlignmentRecord],
    gaps: &[LayerGap],
    top_n: usize,
) -> String {
    let mut diag: BTreeMap<(u32, usize), Vec<(&str, &ConceptDiagnostic)>> = BTreeMap::new();
    for r in sorted(alignments) {
        for c in &r.per_concept {
            diag.entry((r.layer, c.cluster_id)).or_default().push((&r.taxonomy, c));
        }
    }
    let mut ordered: Vec<&EncodedConcept> = concepts.iter().collect();
    ordered.sort_by_key(|c| (c.layer, c.cluster_id));

    let mut out = String::from("# Concept report\n\n");
    let _ = writeln!(out, "Layer numbering: {LAYER_CONVENTION}.\n");
    if !gaps.is_empty() {
        out.push_str("## Gaps\n\n");
        for g in gaps {
            let _ = writeln!(out, "- layer {}: {}", g.layer, g.reason);
        }
        out.push('\n');
    }
    let mut current_layer = None;
    for c in ordered {
        if current_layer != Some(c.layer) {
            let _ = writeln!(out, "## Layer {}\n", c.layer);
            current_layer = Some(c.layer);
        }
        let _ = writeln!(out, "### Concept {}:{} (size {})\n", c.layer, c.cluster_id, c.len());
        let id = ConceptId {
            layer: c.layer,
            cluster_id: c.cluster_id,
        };
        match labels.get(&id) {
            Some(l) => {
                let _ = writeln!(out, "- label: {l}");
            }
            None => out.push_str("- label: (absent)\n"),
        }
        for (tax, d) in diag.get(&(c.layer, c.cluster_id)).map(Vec::as_slice).unwrap_or(&[]) {
            let tag = d.best_tag.as_deref().unwrap_or("(untagged)");
            let _ = writeln!(
                out,
                "- {tax}: {tag} (purity {:.3}{})",
                d.best_fraction,
                if d.aligned { ", aligned" } else { "" }
            );
        }
        let words: Vec<String> = ranked_words(c).into_iter().take(top_n).map(|(w, _)| w).collect();
        let _ = writeln!(out, "- words: {}\n", words.join(", "));
    }
    out
}

pub fn emit_concept_report(
    concepts: &[EncodedConcept],
    labels: &BTreeMap<ConceptId, String>,
    alignments: &[AlignmentRecord],
    gaps: &[LayerGap],
    top_n: usize,
    path: &Path,
) -> Result<(), ReportError> {
    write_file(path, &concept_report(concepts, labels, alignments, gaps, top_n))
}
