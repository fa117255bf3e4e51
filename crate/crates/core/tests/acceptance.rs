//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any criterion fails.

mod common;

use std::alloc::{GlobalAlloc, Layout, System};
use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::panic::{self, AssertUnwindSafe};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use common::mock::{reply, MockEndpoint};
use common::{
    blobs, brute_force_two_means, canonical, matrix, min_center_distance, naive_lambda, naive_mean, naive_ward, occ,
    random_lambda_instance, rows_of, wcss, Ratio,
};
use lca_core::aggregate::{aggregate_run, frames_to_word, FrameWindow};
use lca_core::align::{lambda_theta, CoverageDenominator};
use lca_core::cluster::{kmeans, ward_agglomerative, EncodedConcept, KMeansParams, DEFAULT_WARD_CEILING};
use lca_core::config::{LabelerConfig, LayerSelection, RunConfig};
use lca_core::ingest::{build_polarity_concepts, Polarity, NEGATIVE_TAG, POSITIVE_TAG};
use lca_core::labeler::{render_prompt, ConceptId, HttpReply, LabelCache, LabelRequest, Labeler, RetryPolicy};
use lca_core::pipeline::{cmd_align, cmd_cluster, cmd_label, cmd_report};
use lca_core::report::{CurveSeries, ALIGNMENT_CSV_HEADER};
use lca_core::store::{read_layer, write_layer, EmbeddingMatrix, Level, OccurrenceKey, TokenIndex, TokenOccurrence, HEADER_LEN};
use lca_core::{SentenceLabel, Taxonomy, WordBoundary};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Records the largest single allocation request.
struct PeakAlloc;

static LARGEST: AtomicUsize = AtomicUsize::new(0);

unsafe impl GlobalAlloc for PeakAlloc {
    unsafe fn alloc(&self, layout: Layout) -> *mut u8 {
        LARGEST.fetch_max(layout.size(), Ordering::Relaxed);
        System.alloc(layout)
    }

    unsafe fn dealloc(&self, ptr: *mut u8, layout: Layout) {
        System.dealloc(ptr, layout)
    }

    unsafe fn realloc(&self, ptr: *mut u8, layout: Layout, new_size: usize) -> *mut u8 {
        LARGEST.fetch_max(new_size, Ordering::Relaxed);
        System.realloc(ptr, layout, new_size)
    }
}

#[global_allocator]
static GLOBAL: PeakAlloc = PeakAlloc;

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        let ok: bool = $cond;
        if !ok {
            return Err(format!($($msg)+));
        }
    };
}

fn within(start: Instant, limit: Duration) -> Result<Duration, String> {
    let took = start.elapsed();
    if took > limit {
        return Err(format!("took {took:.2?}, limit {limit:?}"));
    }
    Ok(took)
}

const THETAS: [Ratio; 6] = [
    Ratio { num: 1, den: 10 },
    Ratio { num: 3, den: 10 },
    Ratio { num: 5, den: 10 },
    Ratio { num: 7, den: 10 },
    Ratio { num: 9, den: 10 },
    Ratio { num: 10, den: 10 },
];

fn lambda_oracle() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(20_231);
    for case in 0..1000 {
        let inst = random_lambda_instance(&mut rng, 20, 10, 50);
        let theta = THETAS[rng.gen_range(0..THETAS.len())];
        let linguistic = rng.gen_bool(0.5);
        let denom = if linguistic { CoverageDenominator::Linguistic } else { CoverageDenominator::Encoded };
        let r = lambda_theta(&inst.encoded, &inst.taxonomy, theta.value(), denom).map_err(|e| e.to_string())?;
        let o = naive_lambda(&inst.encoded, &inst.taxonomy, theta, linguistic);
        let got = (r.aligned_encoded, r.covered_linguistic, r.num_encoded, r.num_linguistic);
        let want = (o.aligned, o.covered, o.num_encoded, o.num_linguistic);
        ensure!(got == want, "case {case}: production {got:?}, oracle {want:?}");
        let exact = 50.0 * (o.aligned as f64 / o.num_encoded as f64 + o.covered as f64 / o.num_linguistic as f64);
        ensure!(r.lambda == exact, "case {case}: lambda {} vs {exact}", r.lambda);
    }
    let took = within(start, Duration::from_secs(5))?;
    Ok(format!("1000 instances agree, {took:.2?}"))
}

fn lambda_monotone() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut violations = 0;
    for _ in 0..100 {
        let inst = random_lambda_instance(&mut rng, 20, 10, 50);
        let mut prev = f64::INFINITY;
        for t in THETAS {
            let l = lambda_theta(&inst.encoded, &inst.taxonomy, t.value(), CoverageDenominator::Encoded)
                .map_err(|e| e.to_string())?
                .lambda;
            if l > prev {
                violations += 1;
            }
            prev = l;
        }
    }
    ensure!(violations == 0, "{violations} violations");
    Ok("100 instances x 6 thresholds, 0 violations".into())
}

fn lambda_hand_case() -> Outcome {
    let keys = |ids: &[usize]| ids.iter().map(|&i| occ(i).key()).collect::<BTreeSet<OccurrenceKey>>();
    let tax = Taxonomy::new("pos", BTreeMap::from([("NOUN".to_string(), keys(&[1, 2, 3])), ("VERB".to_string(), keys(&[4, 5, 6]))]))
        .map_err(|e| e.to_string())?;
    let concept = |id, ms: &[usize]| EncodedConcept {
        layer: 0,
        cluster_id: id,
        members: ms.iter().map(|&i| occ(i)).collect(),
    };
    let enc = vec![concept(0, &[1, 2, 3]), concept(1, &[4, 5, 1])];
    let r = lambda_theta(&enc, &tax, 0.9, CoverageDenominator::Encoded).map_err(|e| e.to_string())?;
    ensure!(r.lambda == 50.0, "lambda {}", r.lambda);
    Ok("lambda = 50.0".into())
}

fn random_points(rng: &mut ChaCha8Rng, n: usize, dim: usize) -> Vec<Vec<f64>> {
    (0..n).map(|_| (0..dim).map(|_| rng.gen_range(-5.0..5.0)).collect()).collect()
}

fn kmeans_criteria() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for run in 0..50 {
        let dim = rng.gen_range(8..=64);
        let n = rng.gen_range(100..=5000);
        let k = rng.gen_range(2..=20);
        let pts = random_points(&mut rng, n, dim);
        let m = matrix(&pts);
        let p = KMeansParams::new(k, run);
        let a = kmeans(&m, &p).map_err(|e| e.to_string())?;
        ensure!(
            a.objective_history.windows(2).all(|w| w[1] <= w[0]),
            "run {run}: objective rose: {:?}",
            a.objective_history
        );
        let exact = wcss(&rows_of(&m), &a.labels);
        ensure!((a.objective - exact).abs() <= 1e-9 * exact, "run {run}: objective {} vs {exact}", a.objective);
        for _ in 0..3 {
            let b = kmeans(&m, &p).map_err(|e| e.to_string())?;
            ensure!(b.labels == a.labels, "run {run}: labels differ on rerun");
            ensure!(b.objective.to_bits() == a.objective.to_bits(), "run {run}: objective differs on rerun");
        }
    }
    let four = matrix(&[vec![0.0], vec![0.1], vec![10.0], vec![10.1]]);
    let (best, _) = brute_force_two_means(&rows_of(&four));
    let a = kmeans(&four, &KMeansParams::new(2, 0)).map_err(|e| e.to_string())?;
    ensure!(canonical(&a.labels) == best, "4-point partition {:?}", a.labels);
    let took = within(start, Duration::from_secs(30))?;
    Ok(format!("50 runs monotone, reruns bit-identical, 4-point optimal, {took:.2?}"))
}

fn ward_exact() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(64);
    for case in 0..200 {
        let n = rng.gen_range(1..=64);
        let dim = rng.gen_range(1..=6);
        let k = rng.gen_range(1..=n);
        let m = matrix(&random_points(&mut rng, n, dim));
        let a = ward_agglomerative(&m, k, DEFAULT_WARD_CEILING).map_err(|e| e.to_string())?;
        ensure!(
            canonical(&a.labels) == canonical(&naive_ward(&rows_of(&m), k)),
            "case {case} (n={n}, k={k}) differs from oracle"
        );
    }
    let took = within(start, Duration::from_secs(60))?;
    Ok(format!("200 instances agree, {took:.2?}"))
}

fn aggregation() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let stride = 0.02;
    let dim = 24;
    let mut frames = BTreeMap::new();
    let mut boundaries = Vec::new();
    let mut planted: Vec<Vec<f32>> = Vec::new();
    for u in 0..8 {
        let utt = format!("utt{u}");
        let n = 200;
        let mut values: Vec<f32> = (0..n * dim).map(|_| rng.gen_range(-9.0..9.0)).collect();
        let mut frame = 1;
        let mut word = 0;
        while frame + 8 < n {
            let len = rng.gen_range(1..8);
            let c: Vec<f32> = (0..dim).map(|_| rng.gen_range(-4.0..4.0)).collect();
            for f in frame..frame + len {
                values[f * dim..(f + 1) * dim].copy_from_slice(&c);
            }
            boundaries.push(WordBoundary {
                utterance_id: utt.clone(),
                word_index: word,
                surface: format!("w{word}"),
                t_start: frame as f64 * stride,
                t_end: (frame + len) as f64 * stride,
            });
            planted.push(c);
            frame += len + rng.gen_range(0..3);
            word += 1;
        }
        let m = EmbeddingMatrix::new(0, dim as u32, values, Level::Frame).map_err(|e| e.to_string())?.with_stride(stride);
        frames.insert((utt, 0u32), m);
    }
    let run = aggregate_run(&frames, &[0], &boundaries).map_err(|e| e.to_string())?;
    for (row, c) in planted.iter().enumerate() {
        ensure!(run.layers[0].row(row) == c.as_slice(), "planted word {row} not recovered exactly");
    }

    let mut worst = 0.0f64;
    for _ in 0..500 {
        let n = rng.gen_range(1..120);
        let values = (0..n * 16).map(|_| rng.gen_range(-10.0f32..10.0)).collect();
        let m = EmbeddingMatrix::new(0, 16, values, Level::Frame).map_err(|e| e.to_string())?.with_stride(stride);
        let first = rng.gen_range(0..n);
        let last = rng.gen_range(first..n);
        let got = frames_to_word(&m, FrameWindow { first_frame: first as u64, last_frame: last as u64 });
        let want = naive_mean(&m, first, last);
        for (g, w) in got.iter().zip(&want) {
            worst = worst.max((*g as f64 - w).abs());
        }
    }
    ensure!(worst <= 1e-6, "max abs diff {worst:e}");
    Ok(format!("{} planted words exact, 500 windows max diff {worst:.1e}", planted.len()))
}

fn format_round_trip() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let stem = dir.path().join("layer");
    let mut rng = ChaCha8Rng::seed_from_u64(5150);
    for case in 0..1000 {
        let dim = rng.gen_range(1..16u32);
        let count = rng.gen_range(0..40usize);
        let level = [Level::Frame, Level::Subword, Level::Word][rng.gen_range(0..3)];
        let values: Vec<f32> = (0..dim as usize * count)
            .map(|_| loop {
                let v = f32::from_bits(rng.gen());
                if v.is_finite() {
                    break v;
                }
            })
            .collect();
        let mut m = EmbeddingMatrix::new(rng.gen(), dim, values, level).map_err(|e| e.to_string())?;
        let index = if level == Level::Frame {
            m = m.with_stride(rng.gen_range(0.001..0.1));
            TokenIndex::default()
        } else {
            TokenIndex::new(
                (0..count)
                    .map(|i| TokenOccurrence::new(format!("s{}", i / 4), (i % 4) as u32, format!("tok{}é", rng.gen_range(0..9)), i as u64))
                    .collect(),
            )
        };
        write_layer(&m, &index, &stem).map_err(|e| e.to_string())?;
        let (m2, index2) = read_layer(&stem).map_err(|e| e.to_string())?;
        let bits = |m: &EmbeddingMatrix| m.values.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        ensure!(bits(&m2) == bits(&m), "case {case}: values differ");
        ensure!(
            (m2.layer, m2.dim, m2.count, m2.level, m2.stride_seconds.map(f64::to_bits))
                == (m.layer, m.dim, m.count, m.level, m.stride_seconds.map(f64::to_bits)),
            "case {case}: header differs"
        );
        ensure!(index2 == index, "case {case}: index differs");
    }

    let hostile: [(&str, [u8; 4], u32, u64); 4] = [
        ("bad magic", *b"NOPE", 4, 2),
        ("count overflow", *b"LCAE", u32::MAX, u64::MAX),
        ("huge count", *b"LCAE", 1, 1 << 60),
        ("huge dim", *b"LCAE", 1 << 30, 1 << 30),
    ];
    for (what, magic, dim, count) in hostile {
        let mut bytes = vec![0u8; HEADER_LEN];
        bytes[0..4].copy_from_slice(&magic);
        bytes[4..8].copy_from_slice(&1u32.to_le_bytes());
        bytes[12..16].copy_from_slice(&dim.to_le_bytes());
        bytes[16..24].copy_from_slice(&count.to_le_bytes());
        bytes[24] = 2;
        bytes.extend_from_slice(&[0u8; 32]);
        fs::write(stem.with_extension("emb"), &bytes).map_err(|e| e.to_string())?;
        fs::write(stem.with_extension("idx"), "").map_err(|e| e.to_string())?;
        LARGEST.store(0, Ordering::SeqCst);
        let result = read_layer(&stem);
        let largest = LARGEST.load(Ordering::SeqCst);
        ensure!(result.is_err(), "{what}: accepted");
        ensure!(largest < 1 << 20, "{what}: allocated {largest} bytes in one request");
    }
    Ok("1000 round trips bit-exact, 4 hostile headers rejected with small allocations".into())
}

fn planted_end_to_end() -> Outcome {
    let start = Instant::now();
    let (clusters, per, dim, sigma) = (600, 10, 32, 1.0);
    let mut rng = ChaCha8Rng::seed_from_u64(600);
    let (pts, truth, centers) = blobs(&mut rng, clusters, per, dim, 1000.0, sigma);
    let separation = min_center_distance(&centers);
    ensure!(separation >= 20.0 * sigma, "centers only {separation} apart");

    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let root = dir.path();
    let n = clusters * per;
    let index = TokenIndex::new((0..n).map(occ).collect());
    let cfg = RunConfig {
        run_dir: root.join("run"),
        model_id: "planted".into(),
        layers: LayerSelection::All,
        k: clusters,
        theta: 0.9,
        min_count: 1,
        seed: 7,
        taxonomies: BTreeMap::from([("planted".to_string(), root.join("planted.tsv"))]),
        ..RunConfig::default()
    };
    let layout = cfg.layout();
    for layer in 0..2u32 {
        let m = matrix(&pts);
        let m = EmbeddingMatrix::new(layer, m.dim, m.values, Level::Word).map_err(|e| e.to_string())?;
        write_layer(&m, &index, &layout.word_stem(layer)).map_err(|e| e.to_string())?;
    }
    let mut tags = String::new();
    for (o, c) in index.iter().zip(&truth) {
        let _ = writeln!(tags, "{}\t{}\t{}\tT{c}", o.sentence_id, o.position, o.surface);
    }
    fs::write(root.join("planted.tsv"), tags).map_err(|e| e.to_string())?;

    cmd_cluster(&cfg, false).map_err(|e| e.to_string())?;
    let aligned = cmd_align(&cfg, false).map_err(|e| e.to_string())?;
    ensure!(aligned.records.len() == 2, "{} records", aligned.records.len());
    for r in &aligned.records {
        ensure!(r.lambda == 100.0, "layer {}: lambda {} at theta {}", r.layer, r.lambda, r.theta);
        ensure!(r.num_encoded == clusters && r.num_linguistic == clusters, "layer {}: {} / {} concepts", r.layer, r.num_encoded, r.num_linguistic);
    }
    let mock = Arc::new(MockEndpoint::new());
    let labeled = cmd_label(&cfg, false, Some(mock.clone())).map_err(|e| e.to_string())?;
    ensure!(labeled.failures.is_empty(), "{} label failures", labeled.failures.len());
    let report = cmd_report(&cfg, false).map_err(|e| e.to_string())?;

    let csv = fs::read_to_string(layout.reports().join("alignment.csv")).map_err(|e| e.to_string())?;
    let mut lines = csv.lines();
    ensure!(lines.next() == Some(ALIGNMENT_CSV_HEADER), "unexpected CSV header");
    let mut rows = 0;
    for line in lines {
        let fields: Vec<&str> = line.split(',').collect();
        ensure!(fields.len() == 8, "CSV row has {} fields: {line}", fields.len());
        ensure!(fields[0].parse::<u32>().is_ok(), "bad layer field: {line}");
        ensure!(fields[2..6].iter().all(|f| f.parse::<f64>().is_ok()), "bad numeric field: {line}");
        ensure!(fields[6..].iter().all(|f| f.parse::<usize>().is_ok()), "bad count field: {line}");
        ensure!(fields[3].parse::<f64>().unwrap() == 100.0, "CSV lambda: {line}");
        rows += 1;
    }
    ensure!(rows == 2, "{rows} CSV rows");
    let mut curves = 0;
    for path in report.written.iter().filter(|p| p.extension().is_some_and(|e| e == "json")) {
        let text = fs::read_to_string(path).map_err(|e| e.to_string())?;
        let c: CurveSeries = serde_json::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))?;
        c.validate().map_err(|e| e.to_string())?;
        ensure!(c.points.len() == 2, "{}: {} points", path.display(), c.points.len());
        curves += 1;
    }
    ensure!(curves > 0, "no curve files written");
    let md = fs::read_to_string(layout.reports().join("concepts.md")).map_err(|e| e.to_string())?;
    ensure!(md.contains("Label of"), "labels missing from concept report");
    let took = within(start, Duration::from_secs(120))?;
    Ok(format!("lambda = 100 on both layers, {curves} curves valid, {took:.2?}"))
}

fn polarity() -> Outcome {
    let idx = TokenIndex::new(vec![
        TokenOccurrence::new("s1", 0, "good", 0),
        TokenOccurrence::new("s1", 1, "fun", 1),
        TokenOccurrence::new("s2", 0, "bad", 2),
        TokenOccurrence::new("s2", 1, "fun", 3),
    ]);
    let labels = [
        SentenceLabel { sentence_id: "s1".into(), label: Polarity::Positive },
        SentenceLabel { sentence_id: "s2".into(), label: Polarity::Negative },
    ];
    let tax = build_polarity_concepts(&labels, &idx).map_err(|e| e.to_string())?;
    let by_key = idx.by_key();
    let surfaces = |tax: &Taxonomy, tag: &str| -> BTreeSet<String> {
        tax.concepts.get(tag).map(|ks| ks.iter().map(|k| by_key[k].surface.clone()).collect()).unwrap_or_default()
    };
    ensure!(surfaces(&tax, POSITIVE_TAG) == BTreeSet::from(["good".to_string()]), "+ve {:?}", surfaces(&tax, POSITIVE_TAG));
    ensure!(surfaces(&tax, NEGATIVE_TAG) == BTreeSet::from(["bad".to_string()]), "-ve {:?}", surfaces(&tax, NEGATIVE_TAG));

    let vocab = ["Good", "good", "bad", "BAD", "fun", "dull", "film", "plot", "great", "awful", "the"];
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut built = 0;
    for case in 0..300 {
        let mut entries = Vec::new();
        let mut labels = Vec::new();
        for s in 0..rng.gen_range(1..20) {
            let sid = format!("s{s}");
            for p in 0..rng.gen_range(1..10) {
                let row = entries.len() as u64;
                entries.push(TokenOccurrence::new(sid.clone(), p, *vocab.choose(&mut rng).unwrap(), row));
            }
            let label = if rng.gen_bool(0.5) { Polarity::Positive } else { Polarity::Negative };
            labels.push(SentenceLabel { sentence_id: sid, label });
        }
        let idx = TokenIndex::new(entries);
        let Ok(tax) = build_polarity_concepts(&labels, &idx) else { continue };
        let by_key = idx.by_key();
        let lower = |tag: &str| -> HashSet<String> {
            tax.concepts.get(tag).map(|ks| ks.iter().map(|k| by_key[k].surface.to_lowercase()).collect()).unwrap_or_default()
        };
        ensure!(lower(POSITIVE_TAG).is_disjoint(&lower(NEGATIVE_TAG)), "case {case}: concepts share a surface form");
        built += 1;
    }
    ensure!(built > 50, "only {built} random corpora produced concepts");
    Ok(format!("micro-corpus exact, {built} random corpora disjoint"))
}

fn labeler() -> Outcome {
    let golden = include_str!("golden/prompt_good_great.txt");
    let words = |ws: &[&str]| ws.iter().map(|w| w.to_string()).collect::<Vec<_>>();
    ensure!(render_prompt(&words(&["good", "great"])).as_bytes() == golden.as_bytes(), "prompt bytes differ from golden file");

    let quick = |attempts| RetryPolicy {
        max_attempts: attempts,
        base_delay: Duration::from_millis(1),
        factor: 2.0,
    };
    let limited = HttpReply {
        status: 429,
        retry_after: Some(Duration::from_secs(2)),
        body: String::new(),
    };
    let mock = Arc::new(MockEndpoint::scripted(vec![limited.clone(), limited, reply(200, &common::mock::completion("Colors"))]));
    let waits = Arc::new(Mutex::new(Vec::new()));
    let w = waits.clone();
    let l = Labeler::new(mock.clone(), &LabelerConfig::default())
        .with_policy(quick(5))
        .with_sleeper(move |d| w.lock().unwrap().push(d));
    let req = LabelRequest::new(ConceptId { layer: 0, cluster_id: 0 }, words(&["red", "blue"])).map_err(|e| e.to_string())?;
    let r = l.label_concept(&req).map_err(|e| e.to_string())?;
    ensure!(r.label == "Colors" && mock.calls() == 3, "429 retry: label {:?} after {} calls", r.label, mock.calls());
    ensure!(*waits.lock().unwrap() == vec![Duration::from_secs(2); 2], "Retry-After not honored");

    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let path = dir.path().join("labels.jsonl");
    let reqs: Vec<LabelRequest> = (0..600)
        .map(|i| LabelRequest::new(ConceptId { layer: 1, cluster_id: i }, vec![format!("w{i}")]).unwrap())
        .collect();
    let dying = Arc::new(MockEndpoint {
        fail_after: Some(100),
        ..MockEndpoint::new()
    });
    let mut cache = LabelCache::open(&path).map_err(|e| e.to_string())?;
    Labeler::new(dying, &LabelerConfig::default())
        .with_policy(quick(1))
        .label_all(&reqs, &mut cache, 4)
        .map_err(|e| e.to_string())?;
    let bounded = Arc::new(MockEndpoint {
        delay: Duration::from_millis(1),
        ..MockEndpoint::new()
    });
    let mut cache = LabelCache::open(&path).map_err(|e| e.to_string())?;
    let resumed = Labeler::new(bounded.clone(), &LabelerConfig::default())
        .with_policy(quick(1))
        .label_all(&reqs, &mut cache, 6)
        .map_err(|e| e.to_string())?;
    ensure!(bounded.calls() <= 500, "resume made {} calls", bounded.calls());
    ensure!(resumed.results.len() == 600, "{} results after resume", resumed.results.len());
    ensure!(bounded.peak() <= 6, "{} requests in flight, bound 6", bounded.peak());
    Ok(format!("golden prompt, 429 retry, resume with {} calls, peak {} of 6 in flight", bounded.calls(), bounded.peak()))
}

fn run(name: &str, check: fn() -> Outcome) -> bool {
    let start = Instant::now();
    let outcome = panic::catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
        let msg = p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panicked".into());
        Err(format!("panic: {msg}"))
    });
    let took = start.elapsed();
    match outcome {
        Ok(detail) => {
            println!("PASS  {name:<28} {took:>10.2?}  {detail}");
            true
        }
        Err(why) => {
            println!("FAIL  {name:<28} {took:>10.2?}  {why}");
            false
        }
    }
}

fn main() {
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let criteria: [Criterion; 10] = [
        ("lambda_oracle", lambda_oracle),
        ("lambda_monotone_in_theta", lambda_monotone),
        ("lambda_hand_case", lambda_hand_case),
        ("kmeans", kmeans_criteria),
        ("ward_exact", ward_exact),
        ("aggregation", aggregation),
        ("format_round_trip", format_round_trip),
        ("planted_end_to_end", planted_end_to_end),
        ("polarity_construction", polarity),
        ("labeler_mock_endpoint", labeler),
    ];
    let mut failed = 0;
    let mut ran = 0;
    for (name, check) in criteria {
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        ran += 1;
        if !run(name, check) {
            failed += 1;
        }
    }
    println!("acceptance: {} passed, {failed} failed", ran - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
