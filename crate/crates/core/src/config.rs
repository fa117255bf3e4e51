//! Run configuration and run-directory layout.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::align::CoverageDenominator;
use crate::cluster::{Algorithm, DEFAULT_WARD_CEILING};

/// Which layers a stage should process.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(try_from = "LayersRepr", into = "LayersRepr")]
pub enum LayerSelection {
    #[default]
    All,
    List(Vec<u32>),
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum LayersRepr {
    Name(String),
    List(Vec<u32>),
}

impl TryFrom<LayersRepr> for LayerSelection {
    type Error = String;

    fn try_from(r: LayersRepr) -> Result<Self, String> {
        match r {
            LayersRepr::Name(s) if s == "all" => Ok(LayerSelection::All),
            LayersRepr::Name(s) => Err(format!("layers must be \"all\" or a list of integers, got {s:?}")),
            LayersRepr::List(l) => Ok(LayerSelection::List(l)),
        }
    }
}

impl From<LayerSelection> for LayersRepr {
    fn from(l: LayerSelection) -> Self {
        match l {
            LayerSelection::All => LayersRepr::Name("all".into()),
            LayerSelection::List(v) => LayersRepr::List(v),
        }
    }
}

impl LayerSelection {
    pub fn as_list(&self) -> Option<&[u32]> {
        match self {
            LayerSelection::All => None,
            LayerSelection::List(l) => Some(l),
        }
    }
}

impl std::str::FromStr for LayerSelection {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        if s == "all" {
            return Ok(LayerSelection::All);
        }
        s.split(',')
            .map(|p| p.trim().parse::<u32>().map_err(|_| format!("bad layer {p:?}")))
            .collect::<Result<Vec<_>, _>>()
            .map(LayerSelection::List)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LabelerConfig {
    /// Base URL of an OpenAI-compatible API; requests go to `<base_url>/chat/completions`.
    pub base_url: String,
    pub model: String,
    /// Unique surface forms sent per concept, most frequent first.
    pub max_words: usize,
    pub max_in_flight: usize,
    pub max_attempts: u32,
    pub backoff_base_ms: u64,
    pub backoff_factor: f64,
    pub timeout_secs: u64,
    pub temperature: f64,
    pub top_p: f64,
}

impl Default for LabelerConfig {
    fn default() -> Self {
        Self {
            base_url: "https://api.openai.com/v1".into(),
            model: "gpt-3.5-turbo".into(),
            max_words: 40,
            max_in_flight: 4,
            max_attempts: 5,
            backoff_base_ms: 1000,
            backoff_factor: 2.0,
            timeout_secs: 60,
            temperature: 0.0,
            top_p: 0.95,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub run_dir: PathBuf,
    pub model_id: String,
    pub layers: LayerSelection,
    #[serde(rename = "K")]
    pub k: usize,
    pub theta: f64,
    pub min_count: usize,
    pub max_per_type: usize,
    pub seed: u64,
    pub algorithm: Algorithm,
    pub coverage_denominator: CoverageDenominator,
    pub max_iter: usize,
    pub rel_tol: f64,
    pub normalize: bool,
    pub repair_empty: bool,
    pub ward_ceiling: usize,
    /// Word boundary TSV; defaults to `<run_dir>/boundaries.tsv`.
    pub boundaries: Option<PathBuf>,
    /// Taxonomy name -> tag TSV.
    pub taxonomies: BTreeMap<String, PathBuf>,
    /// Sentence label TSV for the polarity taxonomy.
    pub polarity_labels: Option<PathBuf>,
    /// Member words shown per concept in the concept report.
    pub top_n: usize,
    pub labeler: LabelerConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            run_dir: PathBuf::from("run"),
            model_id: "model".into(),
            layers: LayerSelection::All,
            k: 600,
            theta: 0.9,
            min_count: 10,
            max_per_type: 0,
            seed: 0,
            algorithm: Algorithm::Kmeans,
            coverage_denominator: CoverageDenominator::Encoded,
            max_iter: 300,
            rel_tol: 1e-6,
            normalize: false,
            repair_empty: true,
            ward_ceiling: DEFAULT_WARD_CEILING,
            boundaries: None,
            taxonomies: BTreeMap::new(),
            polarity_labels: None,
            top_n: 10,
            labeler: LabelerConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, toml::de::Error> {
        toml::from_str(text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("RunConfig serializes")
    }

    pub fn layout(&self) -> RunLayout {
        RunLayout::new(&self.run_dir)
    }

    pub fn boundaries_path(&self) -> PathBuf {
        self.boundaries
            .clone()
            .unwrap_or_else(|| self.run_dir.join("boundaries.tsv"))
    }
}

/// Fixed subdirectories of a run.
///
/// ```text
/// <run>/embeddings/layer_NN.{emb,idx}               word-level layers
/// <run>/embeddings/frames/<utterance>/layer_NN.*    frame-level layers
/// <run>/clusters/layer_NN.tsv, layer_NN.json
/// <run>/alignment/alignment.csv, per_concept.jsonl, gaps.json
/// <run>/labels/labels.jsonl
/// <run>/reports/...
/// ```
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunLayout {
    root: PathBuf,
}

pub fn layer_name(layer: u32) -> String {
    format!("layer_{layer:02}")
}

impl RunLayout {
    pub fn new(root: impl AsRef<Path>) -> Self {
        Self {
            root: root.as_ref().to_path_buf(),
        }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn embeddings(&self) -> PathBuf {
        self.root.join("embeddings")
    }

    pub fn frames(&self) -> PathBuf {
        self.embeddings().join("frames")
    }

    pub fn frame_stem(&self, utterance_id: &str, layer: u32) -> PathBuf {
        self.frames().join(utterance_id).join(layer_name(layer))
    }

    pub fn word_stem(&self, layer: u32) -> PathBuf {
        self.embeddings().join(layer_name(layer))
    }

    pub fn clusters(&self) -> PathBuf {
        self.root.join("clusters")
    }

    pub fn cluster_file(&self, layer: u32) -> PathBuf {
        self.clusters().join(format!("{}.tsv", layer_name(layer)))
    }

    pub fn cluster_meta(&self, layer: u32) -> PathBuf {
        self.clusters().join(format!("{}.json", layer_name(layer)))
    }

    pub fn alignment(&self) -> PathBuf {
        self.root.join("alignment")
    }

    pub fn alignment_csv(&self) -> PathBuf {
        self.alignment().join("alignment.csv")
    }

    pub fn per_concept(&self) -> PathBuf {
        self.alignment().join("per_concept.jsonl")
    }

    pub fn gaps(&self) -> PathBuf {
        self.alignment().join("gaps.json")
    }

    pub fn labels(&self) -> PathBuf {
        self.root.join("labels")
    }

    pub fn label_cache(&self) -> PathBuf {
        self.labels().join("labels.jsonl")
    }

    pub fn reports(&self) -> PathBuf {
        self.root.join("reports")
    }

    pub fn effective_config(&self) -> PathBuf {
        self.root.join("effective_config.toml")
    }
}

impl fmt::Display for RunLayout {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.root.display())
    }
}
