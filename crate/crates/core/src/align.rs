//! θ-alignment between encoded concepts and a taxonomy.
//!
//! An encoded concept is *aligned* when some tag covers at least a fraction θ
//! of its members. A tag is *covered* when some encoded concept puts at least
//! a fraction θ of its own members under that tag. The score is
//!
//! ```text
//! λ = 50 * (aligned encoded / |encoded| + covered tags / |tags|)
//! ```
//!
//! so it ranges over [0, 100].

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cluster::{self, ClusterError, EncodedConcept};
use crate::config::RunLayout;
use crate::ingest::Taxonomy;
use crate::store::{self, Level, OccurrenceKey, StoreError, TokenIndex};

#[derive(Debug, Error)]
pub enum AlignError {
    #[error("theta must lie in (0, 1], got {0}")]
    BadTheta(f64),
    #[error("no encoded concepts to align")]
    NoEncodedConcepts,
    #[error("taxonomy {0} has no concepts")]
    EmptyTaxonomy(String),
    #[error("encoded concept {layer}:{cluster_id} is empty")]
    EmptyConcept { layer: u32, cluster_id: usize },
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Cluster(#[from] ClusterError),
}

/// Denominator of the coverage fraction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CoverageDenominator {
    /// `|C_e ∩ C_l| / |C_e|`, the same purity fraction as alignment.
    #[default]
    Encoded,
    /// `|C_e ∩ C_l| / |C_l|`.
    Linguistic,
}

pub fn check_theta(theta: f64) -> Result<(), AlignError> {
    if theta.is_finite() && theta > 0.0 && theta <= 1.0 {
        Ok(())
    } else {
        Err(AlignError::BadTheta(theta))
    }
}

#[inline]
fn meets(overlap: usize, denominator: usize, theta: f64) -> bool {
    overlap as f64 / denominator as f64 >= theta
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Alpha {
    pub aligned: bool,
    pub best_tag: Option<String>,
    pub best_fraction: f64,
}

/// Tag -> number of members of `members` carrying it.
fn tag_counts<'a>(members: impl Iterator<Item = OccurrenceKey>, tag_of: &HashMap<&OccurrenceKey, &'a str>) -> BTreeMap<&'a str, usize> {
    let mut counts = BTreeMap::new();
    for k in members {
        if let Some(&tag) = tag_of.get(&k) {
            *counts.entry(tag).or_insert(0) += 1;
        }
    }
    counts
}

/// Largest count, ties to the lexicographically smallest tag.
fn best_of<'a>(counts: &BTreeMap<&'a str, usize>) -> Option<(&'a str, usize)> {
    counts
        .iter()
        .fold(None, |best: Option<(&str, usize)>, (&t, &c)| match best {
            Some((_, bc)) if bc >= c => best,
            _ => Some((t, c)),
        })
}

/// Alignment indicator of one encoded concept. Untagged members count toward
/// the concept size.
pub fn alpha_theta(concept: &EncodedConcept, tax: &Taxonomy, theta: f64) -> Result<Alpha, AlignError> {
    check_theta(theta)?;
    if concept.is_empty() {
        return Err(AlignError::EmptyConcept {
            layer: concept.layer,
            cluster_id: concept.cluster_id,
        });
    }
    let tag_of = tax.tag_of();
    let counts = tag_counts(concept.members.iter().map(|m| m.key()), &tag_of);
    Ok(alpha_from_counts(&counts, concept.len(), theta))
}

fn alpha_from_counts(counts: &BTreeMap<&str, usize>, size: usize, theta: f64) -> Alpha {
    match best_of(counts) {
        Some((tag, c)) => Alpha {
            aligned: meets(c, size, theta),
            best_tag: Some(tag.to_string()),
            best_fraction: c as f64 / size as f64,
        },
        None => Alpha {
            aligned: false,
            best_tag: None,
            best_fraction: 0.0,
        },
    }
}

/// Coverage indicator of one linguistic concept.
pub fn kappa_theta(
    linguistic: &BTreeSet<OccurrenceKey>,
    encoded: &[EncodedConcept],
    theta: f64,
    denominator: CoverageDenominator,
) -> Result<bool, AlignError> {
    check_theta(theta)?;
    for ce in encoded {
        if ce.is_empty() {
            continue;
        }
        let overlap = ce.members.iter().filter(|m| linguistic.contains(&m.key())).count();
        let denom = match denominator {
            CoverageDenominator::Encoded => ce.len(),
            CoverageDenominator::Linguistic => linguistic.len(),
        };
        if meets(overlap, denom, theta) {
            return Ok(true);
        }
    }
    Ok(false)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptDiagnostic {
    pub cluster_id: usize,
    pub size: usize,
    pub aligned: bool,
    pub best_tag: Option<String>,
    pub best_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentRecord {
    pub layer: u32,
    pub taxonomy: String,
    pub theta: f64,
    pub lambda: f64,
    pub alignment_term: f64,
    pub coverage_term: f64,
    pub num_encoded: usize,
    pub num_linguistic: usize,
    pub aligned_encoded: usize,
    pub covered_linguistic: usize,
    /// Coverage indicator per tag.
    pub coverage: BTreeMap<String, bool>,
    pub per_concept: Vec<ConceptDiagnostic>,
}

impl AlignmentRecord {
    /// Share of encoded concepts whose best tag is `tag` and that are aligned.
    pub fn aligned_share(&self, tag: &str) -> f64 {
        let n = self
            .per_concept
            .iter()
            .filter(|c| c.aligned && c.best_tag.as_deref() == Some(tag))
            .count();
        n as f64 / self.num_encoded as f64
    }
}

/// λ_θ of `encoded` against `tax`, with per-concept diagnostics.
///
/// One pass over the members counts every (concept, tag) overlap; both
/// indicators are read off those counts.
pub fn lambda_theta(
    encoded: &[EncodedConcept],
    tax: &Taxonomy,
    theta: f64,
    denominator: CoverageDenominator,
) -> Result<AlignmentRecord, AlignError> {
    check_theta(theta)?;
    if encoded.is_empty() {
        return Err(AlignError::NoEncodedConcepts);
    }
    if tax.is_empty() {
        return Err(AlignError::EmptyTaxonomy(tax.name.clone()));
    }
    let tag_of = tax.tag_of();
    let mut covered: BTreeMap<String, bool> = tax.concepts.keys().map(|t| (t.clone(), false)).collect();
    let mut per_concept = Vec::with_capacity(encoded.len());
    let mut aligned_encoded = 0;
    for ce in encoded {
        if ce.is_empty() {
            return Err(AlignError::EmptyConcept {
                layer: ce.layer,
                cluster_id: ce.cluster_id,
            });
        }
        let counts = tag_counts(ce.members.iter().map(|m| m.key()), &tag_of);
        let alpha = alpha_from_counts(&counts, ce.len(), theta);
        if alpha.aligned {
            aligned_encoded += 1;
        }
        for (&tag, &overlap) in &counts {
            let denom = match denominator {
                CoverageDenominator::Encoded => ce.len(),
                CoverageDenominator::Linguistic => tax.concepts[tag].len(),
            };
            if meets(overlap, denom, theta) {
                *covered.get_mut(tag).unwrap() = true;
            }
        }
        per_concept.push(ConceptDiagnostic {
            cluster_id: ce.cluster_id,
            size: ce.len(),
            aligned: alpha.aligned,
            best_tag: alpha.best_tag,
            best_fraction: alpha.best_fraction,
        });
    }
    let covered_linguistic = covered.values().filter(|&&c| c).count();
    let num_encoded = encoded.len();
    let num_linguistic = tax.len();
    let alignment_term = aligned_encoded as f64 / num_encoded as f64;
    let coverage_term = covered_linguistic as f64 / num_linguistic as f64;
    Ok(AlignmentRecord {
        layer: encoded[0].layer,
        taxonomy: tax.name.clone(),
        theta,
        lambda: 50.0 * (alignment_term + coverage_term),
        alignment_term,
        coverage_term,
        num_encoded,
        num_linguistic,
        aligned_encoded,
        covered_linguistic,
        coverage: covered,
        per_concept,
    })
}

/// A layer that could not be scored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerGap {
    pub layer: u32,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct LayerwiseAlignment {
    pub records: Vec<AlignmentRecord>,
    pub gaps: Vec<LayerGap>,
}

/// Word-level layers of a run: layer number -> file stem.
pub fn word_layers(layout: &RunLayout) -> Result<BTreeMap<u32, PathBuf>, StoreError> {
    let mut out = BTreeMap::new();
    for stem in store::layer_stems(&layout.embeddings())? {
        let h = store::read_header(&stem)?;
        if h.level == Level::Word {
            out.insert(h.layer, stem);
        }
    }
    Ok(out)
}

/// Loads one layer's concepts from its cluster file.
pub fn load_concepts(layout: &RunLayout, layer: u32, index: &TokenIndex) -> Result<Option<Vec<EncodedConcept>>, AlignError> {
    let path = layout.cluster_file(layer);
    if !path.exists() {
        return Ok(None);
    }
    let rows = cluster::read_cluster_file(&path)?;
    Ok(Some(cluster::concepts_from_rows(&rows, index, layer)?))
}

/// One record per (layer, taxonomy) over the run's clustered layers.
///
/// `layers = None` means every word-level layer in the run. A requested layer
/// without embeddings or cluster output becomes a gap. Taxonomies are
/// restricted to the clustered occurrences of each layer.
pub fn layerwise_alignment(
    layout: &RunLayout,
    layers: Option<&[u32]>,
    taxonomies: &[Taxonomy],
    theta: f64,
    denominator: CoverageDenominator,
) -> Result<LayerwiseAlignment, AlignError> {
    check_theta(theta)?;
    let available = word_layers(layout)?;
    let wanted: Vec<u32> = match layers {
        Some(l) => l.to_vec(),
        None => available.keys().copied().collect(),
    };
    let mut out = LayerwiseAlignment::default();
    let mut index_cache: Option<TokenIndex> = None;
    for layer in wanted {
        let Some(stem) = available.get(&layer) else {
            out.gaps.push(LayerGap {
                layer,
                reason: "no word-level embeddings".into(),
            });
            continue;
        };
        if index_cache.is_none() {
            let h = store::read_header(stem)?;
            index_cache = Some(store::read_index(&store::idx_path(stem), h.count)?);
        }
        let index = index_cache.as_ref().unwrap();
        let Some(concepts) = load_concepts(layout, layer, index)? else {
            out.gaps.push(LayerGap {
                layer,
                reason: "no cluster output".into(),
            });
            continue;
        };
        let universe: HashSet<OccurrenceKey> = concepts.iter().flat_map(|c| c.members.iter().map(|m| m.key())).collect();
        for tax in taxonomies {
            let restricted = tax.restrict_to(&universe);
            if restricted.is_empty() {
                out.gaps.push(LayerGap {
                    layer,
                    reason: format!("taxonomy {} has no clustered occurrences", tax.name),
                });
                continue;
            }
            out.records.push(lambda_theta(&concepts, &restricted, theta, denominator)?);
        }
    }
    Ok(out)
}
