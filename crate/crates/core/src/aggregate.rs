//! Acoustic word embeddings and the occurrence frequency filter.
//!
//! A speech encoder emits one vector per frame. A word's vector is the mean
//! of the frames covered by its forced-aligned time span.

use std::collections::{BTreeMap, HashMap};

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::ingest::WordBoundary;
use crate::store::{EmbeddingMatrix, Level, StoreError, TokenIndex, TokenOccurrence};

/// Ratios closer than this to an integer are treated as that integer, so that
/// decimal boundaries such as 1.90 s on a 0.02 s grid land on frame 95.
const GRID_SNAP: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum AggregateError {
    #[error("stride must be positive, got {0}")]
    BadStride(f64),
    #[error("utterance has no frames")]
    NoFrames,
    #[error("utterance {utterance}, word {word_index}: starts at frame {first_frame}, utterance has {num_frames} frames")]
    BeyondUtterance {
        utterance: String,
        word_index: u32,
        first_frame: u64,
        num_frames: u64,
    },
    #[error("utterance {utterance} has boundaries but no frames for layer {layer}")]
    MissingUtterance { utterance: String, layer: u32 },
    #[error("utterance {utterance}: layers disagree on frame count or stride")]
    InconsistentFrames { utterance: String },
    #[error("empty aggregation: no word boundaries")]
    EmptyAggregation,
    #[error("frequency filter removed every occurrence (min_count {min_count})")]
    FilteredEverything { min_count: usize },
    #[error("invalid filter settings: {0}")]
    BadFilter(String),
    #[error(transparent)]
    Store(#[from] StoreError),
}

/// Inclusive frame range of one word.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FrameWindow {
    pub first_frame: u64,
    pub last_frame: u64,
}

impl FrameWindow {
    pub fn frame_count(&self) -> usize {
        (self.last_frame - self.first_frame + 1) as usize
    }
}

fn snap(x: f64) -> f64 {
    let r = x.round();
    if (x - r).abs() <= GRID_SNAP * r.abs().max(1.0) {
        r
    } else {
        x
    }
}

/// Maps `[t_start, t_end]` onto frames: `floor(start/stride) ..= ceil(end/stride) - 1`,
/// clipped to the utterance. A word shorter than a stride gets the single
/// frame containing its start.
pub fn boundary_to_window(b: &WordBoundary, stride_seconds: f64, num_frames: u64) -> Result<FrameWindow, AggregateError> {
    if !(stride_seconds.is_finite() && stride_seconds > 0.0) {
        return Err(AggregateError::BadStride(stride_seconds));
    }
    if num_frames == 0 {
        return Err(AggregateError::NoFrames);
    }
    let first = snap(b.t_start / stride_seconds).floor().max(0.0) as u64;
    if first >= num_frames {
        return Err(AggregateError::BeyondUtterance {
            utterance: b.utterance_id.clone(),
            word_index: b.word_index,
            first_frame: first,
            num_frames,
        });
    }
    let end = snap(b.t_end / stride_seconds).ceil() as i64 - 1;
    let last = end.min(num_frames as i64 - 1);
    if last < first as i64 {
        return Ok(FrameWindow {
            first_frame: first,
            last_frame: first,
        });
    }
    Ok(FrameWindow {
        first_frame: first,
        last_frame: last as u64,
    })
}

/// Mean of the window's rows, accumulated in f64.
pub fn frames_to_word(frames: &EmbeddingMatrix, w: FrameWindow) -> Vec<f32> {
    let d = frames.dim as usize;
    let mut acc = vec![0f64; d];
    for r in w.first_frame..=w.last_frame {
        for (a, &v) in acc.iter_mut().zip(frames.row(r as usize)) {
            *a += v as f64;
        }
    }
    let n = w.frame_count() as f64;
    acc.into_iter().map(|s| (s / n) as f32).collect()
}

/// Access to per-utterance frame matrices.
pub trait FrameSource {
    fn frames(&self, utterance_id: &str, layer: u32) -> Result<Option<EmbeddingMatrix>, AggregateError>;
}

impl FrameSource for BTreeMap<(String, u32), EmbeddingMatrix> {
    fn frames(&self, utterance_id: &str, layer: u32) -> Result<Option<EmbeddingMatrix>, AggregateError> {
        Ok(self.get(&(utterance_id.to_string(), layer)).cloned())
    }
}

#[derive(Debug, Clone)]
pub struct AggregatedRun {
    /// One word-level matrix per requested layer, in request order.
    pub layers: Vec<EmbeddingMatrix>,
    /// Shared by every layer.
    pub index: TokenIndex,
    /// Consecutive word pairs whose windows share one frame.
    pub shared_frames: usize,
}

/// Pools frame layers into word-level layers.
///
/// Rows follow `boundaries` order (utterance, then start time); the
/// occurrence of word `w` in utterance `u` is `(u, w.word_index)`.
pub fn aggregate_run(
    source: &dyn FrameSource,
    layers: &[u32],
    boundaries: &[WordBoundary],
) -> Result<AggregatedRun, AggregateError> {
    if boundaries.is_empty() {
        return Err(AggregateError::EmptyAggregation);
    }
    let mut by_utt: Vec<(&str, Vec<&WordBoundary>)> = Vec::new();
    for b in boundaries {
        match by_utt.last_mut() {
            Some((u, ws)) if *u == b.utterance_id => ws.push(b),
            _ => by_utt.push((&b.utterance_id, vec![b])),
        }
    }

    let index = TokenIndex::new(
        boundaries
            .iter()
            .enumerate()
            .map(|(row, b)| TokenOccurrence::new(b.utterance_id.clone(), b.word_index, b.surface.clone(), row as u64))
            .collect(),
    );

    let mut outputs: Vec<Vec<f32>> = vec![Vec::new(); layers.len()];
    let mut dims: Vec<Option<u32>> = vec![None; layers.len()];
    let mut shared_frames = 0;
    for (utt, words) in &by_utt {
        let mut shape: Option<(u64, Option<f64>)> = None;
        for (li, &layer) in layers.iter().enumerate() {
            let frames = source
                .frames(utt, layer)?
                .ok_or_else(|| AggregateError::MissingUtterance {
                    utterance: utt.to_string(),
                    layer,
                })?;
            frames.validate()?;
            let s = (frames.count, frames.stride_seconds);
            if *shape.get_or_insert(s) != s {
                return Err(AggregateError::InconsistentFrames {
                    utterance: utt.to_string(),
                });
            }
            if *dims[li].get_or_insert(frames.dim) != frames.dim {
                return Err(AggregateError::Store(StoreError::Invariant(format!(
                    "layer {layer}: utterance {utt} has dim {}, expected {}",
                    frames.dim,
                    dims[li].unwrap()
                ))));
            }
            let stride = frames.stride_seconds.ok_or(AggregateError::BadStride(0.0))?;
            let mut prev: Option<FrameWindow> = None;
            for b in words {
                let w = boundary_to_window(b, stride, frames.count)?;
                if li == 0 && prev.is_some_and(|p| w.first_frame <= p.last_frame) {
                    shared_frames += 1;
                    log::debug!(
                        "utterance {utt}: word {} shares frame {} with its predecessor",
                        b.word_index,
                        w.first_frame
                    );
                }
                prev = Some(w);
                outputs[li].extend(frames_to_word(&frames, w));
            }
        }
    }

    let layers_out = layers
        .iter()
        .zip(outputs)
        .zip(dims)
        .map(|((&layer, values), dim)| EmbeddingMatrix::new(layer, dim.unwrap_or(1), values, Level::Word))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(AggregatedRun {
        layers: layers_out,
        index,
        shared_frames,
    })
}

/// Keeps occurrences of surface forms seen at least `min_count` times.
///
/// With `max_per_type > 0`, forms above the cap keep a seeded uniform sample
/// of `max_per_type` occurrences. Output preserves input order and the
/// original row references.
pub fn frequency_filter(
    index: &TokenIndex,
    min_count: usize,
    max_per_type: usize,
    seed: u64,
) -> Result<TokenIndex, AggregateError> {
    if min_count == 0 {
        return Err(AggregateError::BadFilter("min_count must be at least 1".into()));
    }
    if max_per_type != 0 && max_per_type < min_count {
        return Err(AggregateError::BadFilter(format!(
            "max_per_type {max_per_type} is below min_count {min_count}"
        )));
    }
    let mut positions: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, occ) in index.iter().enumerate() {
        positions.entry(occ.surface.as_str()).or_default().push(i);
    }
    let mut keep = vec![false; index.len()];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (_, pos) in positions {
        if pos.len() < min_count {
            continue;
        }
        if max_per_type == 0 || pos.len() <= max_per_type {
            pos.iter().for_each(|&i| keep[i] = true);
        } else {
            for j in sample(&mut rng, pos.len(), max_per_type) {
                keep[pos[j]] = true;
            }
        }
    }
    let entries: Vec<TokenOccurrence> = index
        .iter()
        .zip(&keep)
        .filter(|(_, &k)| k)
        .map(|(o, _)| o.clone())
        .collect();
    if entries.is_empty() {
        return Err(AggregateError::FilteredEverything { min_count });
    }
    Ok(TokenIndex::new(entries))
}

/// Surface frequency table.
pub fn surface_counts(index: &TokenIndex) -> HashMap<&str, usize> {
    let mut counts = HashMap::new();
    for o in index.iter() {
        *counts.entry(o.surface.as_str()).or_insert(0) += 1;
    }
    counts
}
