//! Run-directory stages.
//!
//! Each stage reads the outputs of the previous one from the run directory,
//! writes its own, and records the configuration it ran with in
//! `effective_config.toml`. Stages refuse to replace existing output unless
//! `force` is set. Labeling is the exception: it appends to its cache and
//! resumes, and `force` discards the cache first.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use crate::aggregate::{self, AggregateError, FrameSource};
use crate::align::{self, check_theta, LayerGap};
use crate::cluster::{self, Algorithm, ClusterMetadata, EncodedConcept, KMeansParams};
use crate::config::{RunConfig, RunLayout};
use crate::error::{Error, Result};
use crate::ingest::{self, Taxonomy, POLARITY_TAXONOMY};
use crate::labeler::{HttpReply, ChatRequest, ChatTransport, ConceptId, HttpTransport, LabelCache, LabelRequest, LabelRunSummary, Labeler};
use crate::report;
use crate::store::{self, EmbeddingMatrix, Level, TokenIndex};

/// Frame matrices stored as `embeddings/frames/<utterance>/layer_NN`.
pub struct DiskFrames {
    layout: RunLayout,
}

impl DiskFrames {
    pub fn new(layout: RunLayout) -> Self {
        Self { layout }
    }

    /// Layer numbers present for any utterance.
    pub fn layers(&self) -> Result<Vec<u32>> {
        let dir = self.layout.frames();
        let mut layers = BTreeSet::new();
        let rd = match fs::read_dir(&dir) {
            Ok(rd) => rd,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
            Err(e) => return Err(Error::io(dir, e)),
        };
        for entry in rd {
            let path = entry.map_err(|e| Error::io(&dir, e))?.path();
            if path.is_dir() {
                for stem in store::layer_stems(&path)? {
                    layers.insert(store::read_header(&stem)?.layer);
                }
            }
        }
        Ok(layers.into_iter().collect())
    }
}

impl FrameSource for DiskFrames {
    fn frames(&self, utterance_id: &str, layer: u32) -> std::result::Result<Option<EmbeddingMatrix>, AggregateError> {
        let stem = self.layout.frame_stem(utterance_id, layer);
        if !store::emb_path(&stem).exists() {
            return Ok(None);
        }
        let (m, _) = store::read_layer(&stem)?;
        if m.level != Level::Frame {
            return Err(AggregateError::Store(store::StoreError::Invariant(format!(
                "{}: expected frame level, found {}",
                stem.display(),
                m.level
            ))));
        }
        if m.layer != layer {
            return Err(AggregateError::Store(store::StoreError::Invariant(format!(
                "{}: header says layer {}",
                stem.display(),
                m.layer
            ))));
        }
        Ok(Some(m))
    }
}

fn write_effective_config(cfg: &RunConfig) -> Result<()> {
    let layout = cfg.layout();
    fs::create_dir_all(layout.root()).map_err(|e| Error::io(layout.root(), e))?;
    let path = layout.effective_config();
    fs::write(&path, cfg.to_toml()).map_err(|e| Error::io(path, e))
}

fn refuse(what: &Path) -> Error {
    Error::Usage(format!("{} already exists; pass --force to overwrite", what.display()))
}

fn dir_has_entries(dir: &Path) -> bool {
    fs::read_dir(dir).is_ok_and(|mut rd| rd.next().is_some())
}

fn clear_dir(dir: &Path) -> Result<()> {
    if dir.exists() {
        fs::remove_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    Ok(())
}

fn word_layer_stems(layout: &RunLayout) -> Result<BTreeMap<u32, PathBuf>> {
    Ok(align::word_layers(layout)?)
}

/// Requested layers that exist, or an error naming the missing ones.
fn select_layers(cfg: &RunConfig, available: &BTreeMap<u32, PathBuf>) -> Result<Vec<u32>> {
    if available.is_empty() {
        return Err(Error::Usage(format!(
            "no word-level embeddings in {}",
            cfg.layout().embeddings().display()
        )));
    }
    match cfg.layers.as_list() {
        None => Ok(available.keys().copied().collect()),
        Some(list) => {
            let missing: Vec<String> = list.iter().filter(|l| !available.contains_key(l)).map(u32::to_string).collect();
            if !missing.is_empty() {
                return Err(Error::Usage(format!("requested layers not found: {}", missing.join(", "))));
            }
            Ok(list.to_vec())
        }
    }
}

fn shared_index(available: &BTreeMap<u32, PathBuf>) -> Result<TokenIndex> {
    let stem = available.values().next().expect("checked non-empty");
    let h = store::read_header(stem)?;
    Ok(store::read_index(&store::idx_path(stem), h.count)?)
}

#[derive(Debug, Clone)]
pub struct AggregateSummary {
    pub layers: Vec<u32>,
    pub words: usize,
    pub shared_frames: usize,
}

/// Pools frame-level layers into word-level layers under `embeddings/`.
pub fn cmd_aggregate(cfg: &RunConfig, force: bool) -> Result<AggregateSummary> {
    let layout = cfg.layout();
    let bpath = cfg.boundaries_path();
    if !bpath.exists() {
        return Err(Error::Usage(format!("boundary file {} not found", bpath.display())));
    }
    let frames = DiskFrames::new(layout.clone());
    let layers = match cfg.layers.as_list() {
        Some(l) => l.to_vec(),
        None => frames.layers()?,
    };
    if layers.is_empty() {
        return Err(Error::Usage(format!("no frame-level embeddings under {}", layout.frames().display())));
    }
    let existing = word_layer_stems(&layout)?;
    if let Some(stem) = existing.values().next() {
        if !force {
            return Err(refuse(&store::emb_path(stem)));
        }
        for stem in existing.values() {
            for p in [store::emb_path(stem), store::idx_path(stem)] {
                fs::remove_file(&p).map_err(|e| Error::io(p, e))?;
            }
        }
    }
    write_effective_config(cfg)?;

    let boundaries = ingest::parse_boundaries(&bpath)?;
    let run = aggregate::aggregate_run(&frames, &layers, &boundaries)?;
    if run.shared_frames > 0 {
        log::warn!("{} word pairs share a boundary frame", run.shared_frames);
    }
    for m in &run.layers {
        store::write_layer(m, &run.index, &layout.word_stem(m.layer))?;
    }
    Ok(AggregateSummary {
        layers,
        words: run.index.len(),
        shared_frames: run.shared_frames,
    })
}

/// Clusters each selected word-level layer into `clusters/`.
pub fn cmd_cluster(cfg: &RunConfig, force: bool) -> Result<Vec<ClusterMetadata>> {
    let layout = cfg.layout();
    let report = store::validate_store(&layout.embeddings());
    if !report.is_clean() {
        return Err(Error::Data(format!(
            "embedding store is not clean:\n  {}",
            report.violations().join("\n  ")
        )));
    }
    let available = word_layer_stems(&layout)?;
    let layers = select_layers(cfg, &available)?;
    if cfg.k == 0 {
        return Err(cluster::ClusterError::ZeroK.into());
    }
    let out_dir = layout.clusters();
    if dir_has_entries(&out_dir) {
        if !force {
            return Err(refuse(&out_dir));
        }
        clear_dir(&out_dir)?;
    }
    write_effective_config(cfg)?;
    fs::create_dir_all(&out_dir).map_err(|e| Error::io(&out_dir, e))?;

    let mut filtered: Option<TokenIndex> = None;
    let mut metas = Vec::new();
    for layer in layers {
        let (matrix, index) = store::read_layer(&available[&layer])?;
        if filtered.is_none() {
            let f = aggregate::frequency_filter(&index, cfg.min_count, cfg.max_per_type, cfg.seed)?;
            log::info!("frequency filter kept {} of {} occurrences", f.len(), index.len());
            filtered = Some(f);
        }
        let kept = filtered.as_ref().unwrap();
        let points = cluster::gather_rows(&matrix, kept);
        let assignment = match cfg.algorithm {
            Algorithm::Kmeans => {
                let params = KMeansParams {
                    max_iter: cfg.max_iter,
                    rel_tol: cfg.rel_tol,
                    repair_empty: cfg.repair_empty,
                    normalize: cfg.normalize,
                    ..KMeansParams::new(cfg.k, cfg.seed)
                };
                cluster::kmeans(&points, &params)?
            }
            Algorithm::Ward => cluster::ward_agglomerative(&points, cfg.k, cfg.ward_ceiling)?,
        };
        let concepts = cluster::clusters_to_concepts(&assignment.labels, kept, layer)?;
        cluster::write_cluster_file(&layout.cluster_file(layer), &concepts)?;
        let meta = ClusterMetadata {
            layer,
            algorithm: cfg.algorithm,
            k: cfg.k,
            seed: cfg.seed,
            iterations: assignment.iterations,
            objective: assignment.objective,
            repairs: assignment.repairs,
            empty_clusters: assignment.empty_clusters.clone(),
            num_points: kept.len(),
            normalized: cfg.normalize && cfg.algorithm == Algorithm::Kmeans,
        };
        let mut json = serde_json::to_string_pretty(&meta).expect("metadata serializes");
        json.push('\n');
        let path = layout.cluster_meta(layer);
        fs::write(&path, json).map_err(|e| Error::io(path, e))?;
        log::info!("layer {layer}: {} concepts, objective {}", concepts.len(), assignment.objective);
        metas.push(meta);
    }
    Ok(metas)
}

/// Loads every configured taxonomy against the run's token index.
pub fn load_taxonomies(cfg: &RunConfig, index: &TokenIndex) -> Result<Vec<Taxonomy>> {
    let mut out = Vec::new();
    for (name, path) in &cfg.taxonomies {
        if !path.exists() {
            return Err(Error::Usage(format!("tag file for {name} not found: {}", path.display())));
        }
        out.push(ingest::parse_taxonomy(path, name, index)?);
    }
    if let Some(path) = &cfg.polarity_labels {
        if !path.exists() {
            return Err(Error::Usage(format!("sentence label file not found: {}", path.display())));
        }
        if cfg.taxonomies.contains_key(POLARITY_TAXONOMY) {
            return Err(Error::Usage(format!("taxonomy name {POLARITY_TAXONOMY} is reserved for sentence labels")));
        }
        let labels = ingest::parse_labels(path)?;
        out.push(ingest::build_polarity_concepts(&labels, index)?);
    }
    if out.is_empty() {
        return Err(Error::Usage("no taxonomy given; add a tag file or sentence labels".into()));
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct AlignSummary {
    pub records: Vec<crate::AlignmentRecord>,
    pub gaps: Vec<LayerGap>,
}

/// Scores every clustered layer against every taxonomy into `alignment/`.
pub fn cmd_align(cfg: &RunConfig, force: bool) -> Result<AlignSummary> {
    check_theta(cfg.theta)?;
    let layout = cfg.layout();
    let available = word_layer_stems(&layout)?;
    if available.is_empty() {
        return Err(Error::Usage(format!(
            "no word-level embeddings in {}",
            layout.embeddings().display()
        )));
    }
    let index = shared_index(&available)?;
    let taxonomies = load_taxonomies(cfg, &index)?;
    let out_dir = layout.alignment();
    if layout.alignment_csv().exists() {
        if !force {
            return Err(refuse(&layout.alignment_csv()));
        }
        clear_dir(&out_dir)?;
    }

    let result = align::layerwise_alignment(
        &layout,
        cfg.layers.as_list(),
        &taxonomies,
        cfg.theta,
        cfg.coverage_denominator,
    )?;
    if result.records.is_empty() {
        let reasons: Vec<String> = result.gaps.iter().map(|g| format!("layer {}: {}", g.layer, g.reason)).collect();
        return Err(Error::Usage(format!("nothing to align:\n  {}", reasons.join("\n  "))));
    }
    write_effective_config(cfg)?;
    fs::create_dir_all(&out_dir).map_err(|e| Error::io(&out_dir, e))?;
    let writes = [
        (layout.alignment_csv(), report::alignment_csv(&result.records)),
        (layout.per_concept(), report::per_concept_jsonl(&result.records)),
        (
            layout.gaps(),
            serde_json::to_string_pretty(&result.gaps).expect("gaps serialize") + "\n",
        ),
    ];
    for (path, text) in writes {
        fs::write(&path, text).map_err(|e| Error::io(path, e))?;
    }
    for g in &result.gaps {
        log::warn!("layer {}: {}", g.layer, g.reason);
    }
    Ok(AlignSummary {
        records: result.records,
        gaps: result.gaps,
    })
}

/// Concepts of every selected layer that has cluster output.
fn clustered_concepts(cfg: &RunConfig, layers: Option<&[u32]>) -> Result<Vec<EncodedConcept>> {
    let layout = cfg.layout();
    let available = word_layer_stems(&layout)?;
    if available.is_empty() {
        return Ok(Vec::new());
    }
    let index = shared_index(&available)?;
    let wanted: Vec<u32> = match layers {
        Some(l) => l.to_vec(),
        None => available.keys().copied().collect(),
    };
    let mut out = Vec::new();
    for layer in wanted {
        if let Some(c) = align::load_concepts(&layout, layer, &index)? {
            out.extend(c);
        }
    }
    Ok(out)
}

fn label_requests(cfg: &RunConfig, concepts: &[EncodedConcept]) -> Result<Vec<LabelRequest>> {
    Ok(concepts
        .iter()
        .map(|c| LabelRequest::from_concept(c, cfg.labeler.max_words))
        .collect::<std::result::Result<_, _>>()?)
}

/// Stands in when every request is already cached.
struct Offline;

impl ChatTransport for Offline {
    fn post(&self, _: &ChatRequest) -> std::result::Result<HttpReply, String> {
        Err("no transport configured".into())
    }
}

/// Labels every clustered concept, resuming from `labels/labels.jsonl`.
///
/// Without a `transport`, requests go to the configured endpoint with the
/// credential from the environment, which is only required when some
/// concept is not cached. Per-concept failures are reported in the summary.
pub fn cmd_label(cfg: &RunConfig, force: bool, transport: Option<Arc<dyn ChatTransport>>) -> Result<LabelRunSummary> {
    let layout = cfg.layout();
    let concepts = clustered_concepts(cfg, cfg.layers.as_list())?;
    if concepts.is_empty() {
        return Err(Error::Usage(format!("no cluster output in {}", layout.clusters().display())));
    }
    let requests = label_requests(cfg, &concepts)?;
    let cache_path = layout.label_cache();
    if force && cache_path.exists() {
        fs::remove_file(&cache_path).map_err(|e| Error::io(&cache_path, e))?;
    }
    let mut cache = LabelCache::open(&cache_path)?;
    let uncached = requests.iter().filter(|r| cache.get(&r.hash()).is_none()).count();
    let transport: Arc<dyn ChatTransport> = match transport {
        Some(t) => t,
        None if uncached == 0 => Arc::new(Offline),
        None => Arc::new(HttpTransport::from_env(&cfg.labeler)?),
    };
    write_effective_config(cfg)?;
    let labeler = Labeler::new(transport, &cfg.labeler);
    let summary = labeler.label_all(&requests, &mut cache, cfg.labeler.max_in_flight)?;
    log::info!(
        "{} labeled, {} from cache, {} failed, {} network calls",
        summary.results.len(),
        summary.cache_hits,
        summary.failures.len(),
        summary.network_calls
    );
    Ok(summary)
}

/// The error a run with labeling failures should exit with.
pub fn label_failures(summary: &LabelRunSummary) -> Option<Error> {
    if summary.failures.is_empty() {
        return None;
    }
    let (id, first) = &summary.failures[0];
    Some(Error::External(format!(
        "{} concepts could not be labeled (first: {id}: {first}); rerun to retry them",
        summary.failures.len()
    )))
}

#[derive(Debug, Clone)]
pub struct ReportSummary {
    pub written: Vec<PathBuf>,
    pub gaps: Vec<LayerGap>,
}

/// Writes `reports/alignment.csv`, `reports/curves/*.json` and
/// `reports/concepts.md` from the alignment stage and the label cache.
pub fn cmd_report(cfg: &RunConfig, force: bool) -> Result<ReportSummary> {
    let layout = cfg.layout();
    let csv = layout.alignment_csv();
    if !csv.exists() {
        return Err(Error::Usage(format!("{} not found; run align first", csv.display())));
    }
    let out_dir = layout.reports();
    if dir_has_entries(&out_dir) {
        if !force {
            return Err(refuse(&out_dir));
        }
        clear_dir(&out_dir)?;
    }
    let records = report::read_alignment(&csv, &layout.per_concept())?;
    let gaps: Vec<LayerGap> = if layout.gaps().exists() {
        let text = fs::read_to_string(layout.gaps()).map_err(|e| Error::io(layout.gaps(), e))?;
        serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", layout.gaps().display())))?
    } else {
        Vec::new()
    };
    let layers: Vec<u32> = records.iter().map(|r| r.layer).collect::<BTreeSet<_>>().into_iter().collect();
    let concepts = clustered_concepts(cfg, Some(&layers))?;

    let cache = LabelCache::open(&layout.label_cache())?;
    let mut labels: BTreeMap<ConceptId, String> = BTreeMap::new();
    for req in label_requests(cfg, &concepts)? {
        if let Some(hit) = cache.get(&req.hash()) {
            labels.insert(req.concept_id, hit.label.clone());
        }
    }

    write_effective_config(cfg)?;
    let mut written = report::emit_alignment_report(&records, &cfg.model_id, &out_dir)?;
    let md = out_dir.join("concepts.md");
    report::emit_concept_report(&concepts, &labels, &records, &gaps, cfg.top_n, &md)?;
    written.push(md);
    Ok(ReportSummary { written, gaps })
}
