//! Readers for tag files, word boundaries and sentence labels, and the
//! sentiment polarity taxonomy.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::store::{OccurrenceKey, TokenIndex};

pub const POLARITY_TAXONOMY: &str = "sst-polarity";
pub const POSITIVE_TAG: &str = "+ve";
pub const NEGATIVE_TAG: &str = "-ve";

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {reason}")]
    Malformed {
        path: PathBuf,
        line: usize,
        reason: String,
    },
    #[error("{count} tagged occurrence(s) not in the token index, first offenders: {}", .first.join(", "))]
    UnknownOccurrences { count: usize, first: Vec<String> },
    #[error("occurrence {key} tagged both {first:?} and {second:?}")]
    ConflictingTags {
        key: String,
        first: String,
        second: String,
    },
    #[error("utterance {utterance}: {reason}")]
    BadBoundary { utterance: String, reason: String },
    #[error("sentence {0} has no polarity label")]
    Unlabeled(String),
    #[error("sentence {0} labeled more than once")]
    DuplicateLabel(String),
    #[error("no polarity-exclusive vocabulary: every surface form occurs under both labels")]
    NoPolarityVocabulary,
    #[error("taxonomy {0} has no concepts")]
    EmptyTaxonomy(String),
}

/// A named family of linguistic concepts: tag -> member occurrences.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Taxonomy {
    pub name: String,
    pub concepts: BTreeMap<String, BTreeSet<OccurrenceKey>>,
}

impl Taxonomy {
    /// Builds a taxonomy, dropping empty tags and rejecting occurrences that
    /// carry more than one tag.
    pub fn new(
        name: impl Into<String>,
        concepts: BTreeMap<String, BTreeSet<OccurrenceKey>>,
    ) -> Result<Self, IngestError> {
        let mut seen: HashMap<&OccurrenceKey, &str> = HashMap::new();
        for (tag, members) in &concepts {
            for key in members {
                if let Some(first) = seen.insert(key, tag) {
                    return Err(IngestError::ConflictingTags {
                        key: key.to_string(),
                        first: first.to_string(),
                        second: tag.clone(),
                    });
                }
            }
        }
        let concepts = concepts.into_iter().filter(|(_, m)| !m.is_empty()).collect();
        Ok(Self {
            name: name.into(),
            concepts,
        })
    }

    pub fn len(&self) -> usize {
        self.concepts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.concepts.is_empty()
    }

    /// Occurrence -> tag lookup.
    pub fn tag_of(&self) -> HashMap<&OccurrenceKey, &str> {
        self.concepts
            .iter()
            .flat_map(|(tag, members)| members.iter().map(move |k| (k, tag.as_str())))
            .collect()
    }

    pub fn num_occurrences(&self) -> usize {
        self.concepts.values().map(BTreeSet::len).sum()
    }

    /// Keeps only the occurrences in `universe`; tags left empty are dropped.
    pub fn restrict_to(&self, universe: &HashSet<OccurrenceKey>) -> Taxonomy {
        let concepts = self
            .concepts
            .iter()
            .map(|(tag, members)| {
                let kept: BTreeSet<OccurrenceKey> =
                    members.iter().filter(|k| universe.contains(*k)).cloned().collect();
                (tag.clone(), kept)
            })
            .filter(|(_, m)| !m.is_empty())
            .collect();
        Taxonomy {
            name: self.name.clone(),
            concepts,
        }
    }
}

fn read_text(path: &Path) -> Result<String, IngestError> {
    fs::read_to_string(path).map_err(|source| IngestError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Non-empty lines, 1-based line numbers, split on tabs.
fn records(text: &str) -> impl Iterator<Item = (usize, Vec<&str>)> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| (i + 1, l.trim_end_matches('\r').split('\t').collect()))
}

/// Parses a `sentence_id\tposition\tsurface\ttag` file and joins it to `index`.
pub fn parse_taxonomy(path: &Path, name: &str, index: &TokenIndex) -> Result<Taxonomy, IngestError> {
    let text = read_text(path)?;
    parse_taxonomy_str(&text, path, name, index)
}

pub fn parse_taxonomy_str(
    text: &str,
    path: &Path,
    name: &str,
    index: &TokenIndex,
) -> Result<Taxonomy, IngestError> {
    let known: HashSet<OccurrenceKey> = index.iter().map(|o| o.key()).collect();
    let mut tag_of: BTreeMap<OccurrenceKey, String> = BTreeMap::new();
    let mut unknown: BTreeSet<OccurrenceKey> = BTreeSet::new();

    for (line, f) in records(text) {
        let malformed = |reason: String| IngestError::Malformed {
            path: path.to_path_buf(),
            line,
            reason,
        };
        if f.len() != 4 {
            return Err(malformed(format!("expected 4 tab-separated fields, found {}", f.len())));
        }
        let position: u32 = f[1]
            .parse()
            .map_err(|_| malformed(format!("bad position {:?}", f[1])))?;
        let tag = f[3].trim();
        if tag.is_empty() {
            return Err(malformed("empty tag".into()));
        }
        let key = OccurrenceKey {
            sentence_id: f[0].to_string(),
            position,
        };
        if !known.contains(&key) {
            unknown.insert(key);
            continue;
        }
        match tag_of.get(&key) {
            Some(prev) if prev != tag => {
                // Report the pair in a stable order regardless of line order.
                let (first, second) = if prev.as_str() < tag {
                    (prev.clone(), tag.to_string())
                } else {
                    (tag.to_string(), prev.clone())
                };
                return Err(IngestError::ConflictingTags {
                    key: key.to_string(),
                    first,
                    second,
                });
            }
            Some(_) => {}
            None => {
                tag_of.insert(key, tag.to_string());
            }
        }
    }
    if !unknown.is_empty() {
        return Err(IngestError::UnknownOccurrences {
            count: unknown.len(),
            first: unknown.iter().take(10).map(|k| k.to_string()).collect(),
        });
    }

    let mut concepts: BTreeMap<String, BTreeSet<OccurrenceKey>> = BTreeMap::new();
    for (key, tag) in tag_of {
        concepts.entry(tag).or_default().insert(key);
    }
    Taxonomy::new(name, concepts)
}

/// A forced-aligned word span in seconds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WordBoundary {
    pub utterance_id: String,
    pub word_index: u32,
    pub surface: String,
    pub t_start: f64,
    pub t_end: f64,
}

/// Parses `utterance_id\tword_index\tsurface\tt_start\tt_end` lines.
///
/// Output is grouped by utterance (ascending id) and sorted by start time
/// within each utterance.
pub fn parse_boundaries(path: &Path) -> Result<Vec<WordBoundary>, IngestError> {
    let text = read_text(path)?;
    parse_boundaries_str(&text, path)
}

pub fn parse_boundaries_str(text: &str, path: &Path) -> Result<Vec<WordBoundary>, IngestError> {
    let mut by_utt: BTreeMap<String, Vec<WordBoundary>> = BTreeMap::new();
    for (line, f) in records(text) {
        let malformed = |reason: String| IngestError::Malformed {
            path: path.to_path_buf(),
            line,
            reason,
        };
        if f.len() != 5 {
            return Err(malformed(format!("expected 5 tab-separated fields, found {}", f.len())));
        }
        let word_index: u32 = f[1]
            .parse()
            .map_err(|_| malformed(format!("bad word index {:?}", f[1])))?;
        let time = |s: &str| -> Result<f64, IngestError> {
            s.trim()
                .parse::<f64>()
                .ok()
                .filter(|t| t.is_finite())
                .ok_or_else(|| malformed(format!("bad time {s:?}")))
        };
        let b = WordBoundary {
            utterance_id: f[0].to_string(),
            word_index,
            surface: f[2].to_string(),
            t_start: time(f[3])?,
            t_end: time(f[4])?,
        };
        by_utt.entry(b.utterance_id.clone()).or_default().push(b);
    }

    let mut out = Vec::new();
    for (utt, mut words) in by_utt {
        let bad = |reason: String| IngestError::BadBoundary {
            utterance: utt.clone(),
            reason,
        };
        for w in &words {
            if w.t_start < 0.0 {
                return Err(bad(format!("word {} starts at negative time {}", w.word_index, w.t_start)));
            }
            if w.t_start >= w.t_end {
                return Err(bad(format!(
                    "word {} has inverted interval [{}, {}]",
                    w.word_index, w.t_start, w.t_end
                )));
            }
        }
        words.sort_by(|a, b| a.t_start.total_cmp(&b.t_start).then(a.word_index.cmp(&b.word_index)));
        let mut indices = HashSet::new();
        for w in &words {
            if !indices.insert(w.word_index) {
                return Err(bad(format!("word index {} appears twice", w.word_index)));
            }
        }
        for pair in words.windows(2) {
            if pair[1].t_start < pair[0].t_end {
                return Err(bad(format!(
                    "words {} [{}, {}] and {} [{}, {}] overlap",
                    pair[0].word_index,
                    pair[0].t_start,
                    pair[0].t_end,
                    pair[1].word_index,
                    pair[1].t_start,
                    pair[1].t_end
                )));
            }
        }
        out.extend(words);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Polarity {
    Positive,
    Negative,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SentenceLabel {
    pub sentence_id: String,
    pub label: Polarity,
}

/// Parses `sentence_id\tlabel` lines, label in {positive, negative}.
pub fn parse_labels(path: &Path) -> Result<Vec<SentenceLabel>, IngestError> {
    let text = read_text(path)?;
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for (line, f) in records(&text) {
        let malformed = |reason: String| IngestError::Malformed {
            path: path.to_path_buf(),
            line,
            reason,
        };
        if f.len() != 2 {
            return Err(malformed(format!("expected 2 tab-separated fields, found {}", f.len())));
        }
        let label = match f[1].trim() {
            "positive" => Polarity::Positive,
            "negative" => Polarity::Negative,
            other => return Err(malformed(format!("unknown label {other:?}"))),
        };
        if !seen.insert(f[0].to_string()) {
            return Err(IngestError::DuplicateLabel(f[0].to_string()));
        }
        out.push(SentenceLabel {
            sentence_id: f[0].to_string(),
            label,
        });
    }
    Ok(out)
}

/// Builds the `sst-polarity` taxonomy.
///
/// A lowercased surface form is polarity-exclusive when every sentence it
/// occurs in carries the same label. Tag `+ve` holds all occurrences of
/// positive-exclusive forms, `-ve` the negative ones; shared forms are in
/// neither.
pub fn build_polarity_concepts(labels: &[SentenceLabel], index: &TokenIndex) -> Result<Taxonomy, IngestError> {
    let mut label_of: HashMap<&str, Polarity> = HashMap::with_capacity(labels.len());
    for l in labels {
        if label_of.insert(l.sentence_id.as_str(), l.label).is_some() {
            return Err(IngestError::DuplicateLabel(l.sentence_id.clone()));
        }
    }

    // Per lowercased surface: (seen in positive, seen in negative).
    let mut seen_in: HashMap<String, (bool, bool)> = HashMap::new();
    for occ in index.iter() {
        let polarity = *label_of
            .get(occ.sentence_id.as_str())
            .ok_or_else(|| IngestError::Unlabeled(occ.sentence_id.clone()))?;
        let e = seen_in.entry(occ.surface.to_lowercase()).or_default();
        match polarity {
            Polarity::Positive => e.0 = true,
            Polarity::Negative => e.1 = true,
        }
    }

    let mut pos = BTreeSet::new();
    let mut neg = BTreeSet::new();
    for occ in index.iter() {
        match seen_in[&occ.surface.to_lowercase()] {
            (true, false) => {
                pos.insert(occ.key());
            }
            (false, true) => {
                neg.insert(occ.key());
            }
            _ => {}
        }
    }
    if pos.is_empty() && neg.is_empty() {
        return Err(IngestError::NoPolarityVocabulary);
    }
    let concepts = BTreeMap::from([(POSITIVE_TAG.to_string(), pos), (NEGATIVE_TAG.to_string(), neg)]);
    Taxonomy::new(POLARITY_TAXONOMY, concepts)
}
