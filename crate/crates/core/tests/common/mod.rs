//! Independent reference implementations and instance generators shared by
//! the integration tests. Nothing here calls the library's algorithms.
#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};

use lca_core::cluster::EncodedConcept;
use lca_core::store::{EmbeddingMatrix, Level, OccurrenceKey, TokenIndex, TokenOccurrence};
use lca_core::Taxonomy;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn occ(i: usize) -> TokenOccurrence {
    TokenOccurrence::new(format!("s{}", i / 5), (i % 5) as u32, format!("w{}", i % 7), i as u64)
}

/// A random alignment instance: encoded concepts over `n` occurrences and a
/// taxonomy tagging most of them.
pub struct LambdaInstance {
    pub encoded: Vec<EncodedConcept>,
    pub taxonomy: Taxonomy,
}

pub fn random_lambda_instance(rng: &mut ChaCha8Rng, max_concepts: usize, max_tags: usize, max_occ: usize) -> LambdaInstance {
    let n = rng.gen_range(1..=max_occ);
    let m = rng.gen_range(1..=max_concepts.min(n));
    let t = rng.gen_range(1..=max_tags);
    // Low-entropy assignments make pure concepts common.
    let pure_bias = rng.gen_bool(0.5);
    let mut clusters: BTreeMap<usize, Vec<TokenOccurrence>> = BTreeMap::new();
    let mut tags: BTreeMap<String, BTreeSet<OccurrenceKey>> = BTreeMap::new();
    for i in 0..n {
        let c = rng.gen_range(0..m);
        clusters.entry(c).or_default().push(occ(i));
        if rng.gen_bool(0.85) {
            let tag = if pure_bias { c % t } else { rng.gen_range(0..t) };
            tags.entry(format!("T{tag}")).or_default().insert(occ(i).key());
        }
    }
    if tags.is_empty() {
        tags.entry("T0".into()).or_default().insert(occ(0).key());
    }
    let encoded = clusters
        .into_iter()
        .map(|(cluster_id, members)| EncodedConcept {
            layer: 0,
            cluster_id,
            members,
        })
        .collect();
    LambdaInstance {
        encoded,
        taxonomy: Taxonomy::new("rand", tags).unwrap(),
    }
}

/// θ as an exact ratio.
#[derive(Debug, Clone, Copy)]
pub struct Ratio {
    pub num: usize,
    pub den: usize,
}

impl Ratio {
    pub fn value(self) -> f64 {
        self.num as f64 / self.den as f64
    }

    /// `a / b >= self`, in integers.
    pub fn reached_by(self, a: usize, b: usize) -> bool {
        a * self.den >= self.num * b
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NaiveLambda {
    pub aligned: usize,
    pub covered: usize,
    pub num_encoded: usize,
    pub num_linguistic: usize,
}

impl NaiveLambda {
    pub fn lambda(&self) -> f64 {
        (self.aligned as f64 / self.num_encoded as f64 + self.covered as f64 / self.num_linguistic as f64) / 2.0 * 100.0
    }
}

/// Double loop over every (encoded, linguistic) pair with a linear-scan
/// intersection. `linguistic_denominator` switches coverage to `|C_l|`.
pub fn naive_lambda(encoded: &[EncodedConcept], tax: &Taxonomy, theta: Ratio, linguistic_denominator: bool) -> NaiveLambda {
    let tag_lists: Vec<Vec<OccurrenceKey>> = tax.concepts.values().map(|s| s.iter().cloned().collect()).collect();
    let overlap = |ce: &EncodedConcept, cl: &Vec<OccurrenceKey>| -> usize {
        let mut n = 0;
        for m in &ce.members {
            for k in cl {
                if m.sentence_id == k.sentence_id && m.position == k.position {
                    n += 1;
                }
            }
        }
        n
    };
    let mut aligned = 0;
    for ce in encoded {
        let mut any = false;
        for cl in &tag_lists {
            if theta.reached_by(overlap(ce, cl), ce.members.len()) {
                any = true;
            }
        }
        if any {
            aligned += 1;
        }
    }
    let mut covered = 0;
    for cl in &tag_lists {
        let mut any = false;
        for ce in encoded {
            let denom = if linguistic_denominator { cl.len() } else { ce.members.len() };
            if theta.reached_by(overlap(ce, cl), denom) {
                any = true;
            }
        }
        if any {
            covered += 1;
        }
    }
    NaiveLambda {
        aligned,
        covered,
        num_encoded: encoded.len(),
        num_linguistic: tag_lists.len(),
    }
}

pub fn matrix(rows: &[Vec<f64>]) -> EmbeddingMatrix {
    let dim = rows[0].len() as u32;
    let values = rows.iter().flatten().map(|&v| v as f32).collect();
    EmbeddingMatrix::new(0, dim, values, Level::Word).unwrap()
}

pub fn rows_of(m: &EmbeddingMatrix) -> Vec<Vec<f64>> {
    m.rows().map(|r| r.iter().map(|&v| v as f64).collect()).collect()
}

fn sq(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn mean_of(points: &[Vec<f64>], members: &[usize]) -> Vec<f64> {
    let mut m = vec![0.0; points[0].len()];
    for &i in members {
        for (a, v) in m.iter_mut().zip(&points[i]) {
            *a += v;
        }
    }
    m.iter_mut().for_each(|a| *a /= members.len() as f64);
    m
}

/// Within-cluster sum of squared distances to member means.
pub fn wcss(points: &[Vec<f64>], labels: &[usize]) -> f64 {
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        groups.entry(l).or_default().push(i);
    }
    groups
        .values()
        .map(|g| {
            let mu = mean_of(points, g);
            g.iter().map(|&i| sq(&points[i], &mu)).sum::<f64>()
        })
        .sum()
}

/// Ward clustering by recomputing every pairwise merge cost from member
/// means at every step. Clusters are ordered by their smallest member and
/// ties go to the first pair in that order.
pub fn naive_ward(points: &[Vec<f64>], k: usize) -> Vec<usize> {
    let mut clusters: Vec<Vec<usize>> = (0..points.len()).map(|i| vec![i]).collect();
    while clusters.len() > k {
        let means: Vec<Vec<f64>> = clusters.iter().map(|c| mean_of(points, c)).collect();
        let mut best = (f64::INFINITY, 0, 0);
        for a in 0..clusters.len() {
            for b in a + 1..clusters.len() {
                let (na, nb) = (clusters[a].len() as f64, clusters[b].len() as f64);
                let cost = na * nb / (na + nb) * sq(&means[a], &means[b]);
                if cost < best.0 {
                    best = (cost, a, b);
                }
            }
        }
        let (_, a, b) = best;
        let merged = clusters.remove(b);
        clusters[a].extend(merged);
        clusters[a].sort_unstable();
    }
    let mut labels = vec![0; points.len()];
    for (id, c) in clusters.iter().enumerate() {
        for &i in c {
            labels[i] = id;
        }
    }
    labels
}

/// Relabels by order of first appearance so equal partitions compare equal.
pub fn canonical(labels: &[usize]) -> Vec<usize> {
    let mut map = BTreeMap::new();
    labels
        .iter()
        .map(|&l| {
            let next = map.len();
            *map.entry(l).or_insert(next)
        })
        .collect()
}

/// Optimal partition of `points` into two non-empty groups by enumeration.
pub fn brute_force_two_means(points: &[Vec<f64>]) -> (Vec<usize>, f64) {
    let n = points.len();
    let mut best = (Vec::new(), f64::INFINITY);
    for mask in 1..(1u64 << n) - 1 {
        let labels: Vec<usize> = (0..n).map(|i| ((mask >> i) & 1) as usize).collect();
        let obj = wcss(points, &labels);
        if obj < best.1 {
            best = (canonical(&labels), obj);
        }
    }
    best
}

/// Gaussian blobs: `k` centers, `per` points each, standard deviation `sigma`.
pub fn blobs(rng: &mut ChaCha8Rng, k: usize, per: usize, dim: usize, spread: f64, sigma: f64) -> (Vec<Vec<f64>>, Vec<usize>, Vec<Vec<f64>>) {
    let centers: Vec<Vec<f64>> = (0..k).map(|_| (0..dim).map(|_| rng.gen_range(-spread..spread)).collect()).collect();
    let mut points = Vec::with_capacity(k * per);
    let mut truth = Vec::with_capacity(k * per);
    for (c, center) in centers.iter().enumerate() {
        for _ in 0..per {
            points.push(center.iter().map(|&m| m + sigma * gaussian(rng)).collect());
            truth.push(c);
        }
    }
    (points, truth, centers)
}

/// Box–Muller standard normal.
pub fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

pub fn min_center_distance(centers: &[Vec<f64>]) -> f64 {
    let mut best = f64::INFINITY;
    for a in 0..centers.len() {
        for b in a + 1..centers.len() {
            best = best.min(sq(&centers[a], &centers[b]).sqrt());
        }
    }
    best
}

/// Mean of rows `first..=last` by plain summation.
pub fn naive_mean(m: &EmbeddingMatrix, first: usize, last: usize) -> Vec<f64> {
    let d = m.dim as usize;
    let mut out = vec![0.0; d];
    for r in first..=last {
        for (o, v) in out.iter_mut().zip(&m.values[r * d..(r + 1) * d]) {
            *o += *v as f64;
        }
    }
    out.iter().map(|s| s / (last - first + 1) as f64).collect()
}

/// Frames whose interval `[k·stride, (k+1)·stride)` meets `[start, end)`.
pub fn overlapping_frames(start: f64, end: f64, stride: f64, n: usize) -> Vec<usize> {
    (0..n)
        .filter(|&k| (k as f64) * stride < end && ((k + 1) as f64) * stride > start)
        .collect()
}

pub fn index_for(n: usize) -> TokenIndex {
    TokenIndex::new((0..n).map(occ).collect())
}

/// Scripted stand-in for a chat completion endpoint.
pub mod mock {
    use std::collections::VecDeque;
    use std::sync::atomic::{AtomicUsize, Ordering};
    use std::sync::Mutex;
    use std::time::Duration;

    use lca_core::labeler::{ChatRequest, ChatTransport, HttpReply};

    pub fn completion(label: &str) -> String {
        serde_json::json!({
            "id": "cmpl-1",
            "object": "chat.completion",
            "choices": [{"index": 0, "message": {"role": "assistant", "content": label}, "finish_reason": "stop"}]
        })
        .to_string()
    }

    pub fn reply(status: u16, body: &str) -> HttpReply {
        HttpReply {
            status,
            retry_after: None,
            body: body.to_string(),
        }
    }

    #[derive(Default)]
    pub struct MockEndpoint {
        /// Replies handed out before the default behavior applies.
        pub script: Mutex<VecDeque<HttpReply>>,
        pub requests: Mutex<Vec<ChatRequest>>,
        /// Successful replies after which every call fails at the network level.
        pub fail_after: Option<usize>,
        pub delay: Duration,
        pub successes: AtomicUsize,
        pub in_flight: AtomicUsize,
        pub peak_in_flight: AtomicUsize,
    }

    impl MockEndpoint {
        pub fn new() -> Self {
            Self::default()
        }

        pub fn scripted(replies: Vec<HttpReply>) -> Self {
            Self {
                script: Mutex::new(replies.into()),
                ..Self::default()
            }
        }

        pub fn calls(&self) -> usize {
            self.requests.lock().unwrap().len()
        }

        pub fn peak(&self) -> usize {
            self.peak_in_flight.load(Ordering::SeqCst)
        }
    }

    impl ChatTransport for MockEndpoint {
        fn post(&self, request: &ChatRequest) -> Result<HttpReply, String> {
            let now = self.in_flight.fetch_add(1, Ordering::SeqCst) + 1;
            self.peak_in_flight.fetch_max(now, Ordering::SeqCst);
            self.requests.lock().unwrap().push(request.clone());
            if !self.delay.is_zero() {
                std::thread::sleep(self.delay);
            }
            let scripted = self.script.lock().unwrap().pop_front();
            let out = match scripted {
                Some(r) => Ok(r),
                None => match self.fail_after {
                    Some(n) if self.successes.load(Ordering::SeqCst) >= n => Err("connection reset".to_string()),
                    _ => {
                        self.successes.fetch_add(1, Ordering::SeqCst);
                        let first = request.messages[1].content.lines().last().unwrap_or("").to_string();
                        Ok(reply(200, &completion(&format!("Label of {first}"))))
                    }
                },
            };
            self.in_flight.fetch_sub(1, Ordering::SeqCst);
            out
        }
    }
}

/// Minimal HTTP/1.1 server on a loopback port that answers each connection
/// with the next scripted response and records what it received.
pub mod http {
    use std::collections::VecDeque;
    use std::io::{BufRead, BufReader, Read, Write};
    use std::net::TcpListener;
    use std::sync::{Arc, Mutex};

    #[derive(Debug, Clone)]
    pub struct Received {
        pub request_line: String,
        pub headers: Vec<(String, String)>,
        pub body: String,
    }

    impl Received {
        pub fn header(&self, name: &str) -> Option<&str> {
            self.headers.iter().find(|(k, _)| k.eq_ignore_ascii_case(name)).map(|(_, v)| v.as_str())
        }
    }

    pub struct Canned {
        pub status: u16,
        pub extra_headers: Vec<(String, String)>,
        pub body: String,
    }

    pub struct MockServer {
        pub base_url: String,
        pub received: Arc<Mutex<Vec<Received>>>,
    }

    /// Serves `script` in order, then repeats `fallback` forever.
    pub fn serve(script: Vec<Canned>, fallback: impl Fn(&Received) -> Canned + Send + 'static) -> MockServer {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let base_url = format!("http://{}/v1", listener.local_addr().unwrap());
        let received = Arc::new(Mutex::new(Vec::new()));
        let log = received.clone();
        let mut script: VecDeque<Canned> = script.into();
        std::thread::spawn(move || {
            for stream in listener.incoming() {
                let Ok(mut stream) = stream else { continue };
                let mut reader = BufReader::new(stream.try_clone().unwrap());
                let mut request_line = String::new();
                if reader.read_line(&mut request_line).is_err() {
                    continue;
                }
                let mut headers = Vec::new();
                loop {
                    let mut line = String::new();
                    if reader.read_line(&mut line).unwrap_or(0) == 0 || line == "\r\n" {
                        break;
                    }
                    if let Some((k, v)) = line.trim_end().split_once(':') {
                        headers.push((k.trim().to_string(), v.trim().to_string()));
                    }
                }
                let len = headers
                    .iter()
                    .find(|(k, _)| k.eq_ignore_ascii_case("content-length"))
                    .and_then(|(_, v)| v.parse::<usize>().ok())
                    .unwrap_or(0);
                let mut body = vec![0u8; len];
                let _ = reader.read_exact(&mut body);
                let got = Received {
                    request_line: request_line.trim_end().to_string(),
                    headers,
                    body: String::from_utf8_lossy(&body).into_owned(),
                };
                let canned = script.pop_front().unwrap_or_else(|| fallback(&got));
                log.lock().unwrap().push(got);
                let mut out = format!(
                    "HTTP/1.1 {} Canned\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n",
                    canned.status,
                    canned.body.len()
                );
                for (k, v) in &canned.extra_headers {
                    out.push_str(&format!("{k}: {v}\r\n"));
                }
                out.push_str("\r\n");
                out.push_str(&canned.body);
                let _ = stream.write_all(out.as_bytes());
                let _ = stream.flush();
            }
        });
        MockServer { base_url, received }
    }
}
