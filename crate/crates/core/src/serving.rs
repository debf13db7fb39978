//! Real-time inference: session filtering, neighbor-restricted scoring, and
//! a small thread-per-request network service over HTTP or raw framing.

use std::io::{BufRead, BufReader, Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::dataio::{read_manifest, Vocabulary};
use crate::error::{Error, Result};
use crate::knn::{self, NearestNeighborMatrix};
use crate::model::{run_model_eval, ModelConfig};
use crate::numerics::ParamStore;
use crate::sessiongraph::{build_graph, GraphMode};
use crate::training::load_checkpoint;

pub const SESSION_CAP: usize = 3;
pub const DEFAULT_TOP_N: usize = 10;

fn default_n() -> usize {
    DEFAULT_TOP_N
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InferenceRequest {
    pub items: Vec<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cats: Option<Vec<String>>,
    #[serde(default = "default_n")]
    pub n: usize,
}

impl InferenceRequest {
    pub fn validate(&self) -> Result<()> {
        if self.items.is_empty() {
            return Err(Error::Protocol("items must be non-empty".into()));
        }
        if self.n == 0 {
            return Err(Error::Protocol("n must be at least 1".into()));
        }
        if let Some(c) = &self.cats {
            if c.len() != self.items.len() {
                return Err(Error::Protocol(format!(
                    "{} cats for {} items",
                    c.len(),
                    self.items.len()
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RankedRecommendations {
    /// raw item ids, best first
    pub recs: Vec<u64>,
    /// parallel scores, non-increasing
    pub scores: Vec<f64>,
    pub latency_us: u64,
    pub fallback_used: bool,
}

/// Drop unknown items, keep only items matching the most recent item's
/// category (request categories take precedence over catalog ones), then cap
/// to the most recent 3 survivors. Empty output signals the fallback path.
pub fn filter_session(request: &InferenceRequest, vocab: &Vocabulary) -> Vec<u32> {
    let mut known: Vec<(u32, Option<String>)> = Vec::new();
    for (pos, &raw) in request.items.iter().enumerate() {
        let Some(dense) = vocab.dense(raw) else { continue };
        let cat = request
            .cats
            .as_ref()
            .map(|c| c[pos].clone())
            .or_else(|| vocab.category(dense).map(str::to_owned));
        known.push((dense, cat));
    }
    if let Some((_, Some(last_cat))) = known.last().cloned() {
        // items with no category at all survive: mismatch is unprovable
        known.retain(|(_, cat)| cat.as_deref().map(|c| c == last_cat).unwrap_or(true));
    }
    let skip = known.len().saturating_sub(SESSION_CAP);
    known.into_iter().skip(skip).map(|(d, _)| d).collect()
}

/// Everything the service shares read-only across request threads.
pub struct ServingState {
    pub params: ParamStore,
    pub config: ModelConfig,
    pub matrix: NearestNeighborMatrix,
    pub vocab: Vocabulary,
    /// dense ids by (count desc, id asc)
    popularity_order: Vec<u32>,
}

impl ServingState {
    pub fn new(
        params: ParamStore,
        config: ModelConfig,
        matrix: NearestNeighborMatrix,
        vocab: Vocabulary,
    ) -> Result<Self> {
        if matrix.no_items != config.catalog_size {
            return Err(Error::Compatibility(format!(
                "nn matrix covers {} items, catalog has {}",
                matrix.no_items, config.catalog_size
            )));
        }
        if vocab.len() != config.catalog_size {
            return Err(Error::Compatibility(format!(
                "vocabulary has {} items, catalog has {}",
                vocab.len(),
                config.catalog_size
            )));
        }
        let mut popularity_order: Vec<u32> = (0..vocab.len() as u32).collect();
        let counts = vocab.popularity().to_vec();
        popularity_order.sort_by(|&a, &b| {
            counts[b as usize].cmp(&counts[a as usize]).then(a.cmp(&b))
        });
        Ok(ServingState {
            params,
            config,
            matrix,
            vocab,
            popularity_order,
        })
    }

    /// Load checkpoint, NN matrix, and vocabulary from one directory and
    /// verify they were built against the same item table.
    pub fn load(dir: &Path) -> Result<Self> {
        let ckpt = load_checkpoint(dir)?;
        let vocab = read_manifest(&dir.join("vocab.json"))?;
        if vocab.hash() != ckpt.vocab_hash {
            return Err(Error::Compatibility(format!(
                "vocabulary hash {} does not match checkpoint hash {}",
                vocab.hash(),
                ckpt.vocab_hash
            )));
        }
        let matrix = knn::load_matrix(&dir.join("nn_matrix.bin"))?;
        ServingState::new(ckpt.params, ckpt.model_config, matrix, vocab)
    }

    fn popularity_fallback(&self, exclude: &[u32], n: usize, start: Instant) -> RankedRecommendations {
        let mut recs = Vec::new();
        let mut scores = Vec::new();
        for &dense in &self.popularity_order {
            if exclude.contains(&dense) {
                continue;
            }
            recs.push(self.vocab.raw(dense).expect("dense id in range"));
            scores.push(self.vocab.count(dense) as f64);
            if recs.len() == n {
                break;
            }
        }
        RankedRecommendations {
            recs,
            scores,
            latency_us: start.elapsed().as_micros() as u64,
            fallback_used: true,
        }
    }

    /// Score the neighbor-restricted candidate set for one live session.
    /// Items from the unfiltered request never appear in the output.
    pub fn infer(&self, request: &InferenceRequest) -> Result<RankedRecommendations> {
        let start = Instant::now();
        request.validate()?;
        let session_dense: Vec<u32> = request
            .items
            .iter()
            .filter_map(|&raw| self.vocab.dense(raw))
            .collect();
        let filtered = filter_session(request, &self.vocab);
        if filtered.is_empty() {
            return Ok(self.popularity_fallback(&session_dense, request.n, start));
        }
        let (mut cands, _unknown) = knn::candidates(&self.matrix, &filtered);
        cands.retain(|c| !session_dense.contains(c));
        if cands.is_empty() {
            return Ok(self.popularity_fallback(&session_dense, request.n, start));
        }
        let graph = build_graph(&[&filtered], GraphMode::Disjoint)?;
        let fwd = run_model_eval(&self.params, &self.config, &graph, None, Some(&cands))?;
        let logits = fwd.tape.value(fwd.logits.expect("logits always produced"));
        let mut scored: Vec<(f64, u32)> = cands
            .iter()
            .enumerate()
            .map(|(i, &dense)| (logits.get(0, i), dense))
            .collect();
        scored.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
        scored.truncate(request.n);
        Ok(RankedRecommendations {
            recs: scored
                .iter()
                .map(|&(_, d)| self.vocab.raw(d).expect("dense id in range"))
                .collect(),
            scores: scored.iter().map(|&(s, _)| s).collect(),
            latency_us: start.elapsed().as_micros() as u64,
            fallback_used: false,
        })
    }
}

// --- latency accounting ------------------------------------------------

const BUCKET_WIDTH_US: u64 = 50;
const BUCKET_COUNT: usize = 4000; // covers 200 ms, rest lands in overflow

/// Fixed-bucket histogram; percentile reads return a bucket upper bound
/// (50 microsecond resolution).
pub struct LatencyHistogram {
    buckets: Vec<AtomicU64>,
    overflow: AtomicU64,
    count: AtomicU64,
}

impl Default for LatencyHistogram {
    fn default() -> Self {
        LatencyHistogram {
            buckets: (0..BUCKET_COUNT).map(|_| AtomicU64::new(0)).collect(),
            overflow: AtomicU64::new(0),
            count: AtomicU64::new(0),
        }
    }
}

impl LatencyHistogram {
    pub fn record(&self, us: u64) {
        let idx = (us / BUCKET_WIDTH_US) as usize;
        match self.buckets.get(idx) {
            Some(b) => b.fetch_add(1, Ordering::Relaxed),
            None => self.overflow.fetch_add(1, Ordering::Relaxed),
        };
        self.count.fetch_add(1, Ordering::Relaxed);
    }

    pub fn count(&self) -> u64 {
        self.count.load(Ordering::Relaxed)
    }

    pub fn percentile_us(&self, p: f64) -> u64 {
        let total = self.count();
        if total == 0 {
            return 0;
        }
        let need = (p * total as f64).ceil() as u64;
        let mut seen = 0u64;
        for (i, b) in self.buckets.iter().enumerate() {
            seen += b.load(Ordering::Relaxed);
            if seen >= need {
                return (i as u64 + 1) * BUCKET_WIDTH_US;
            }
        }
        u64::MAX
    }
}

// --- network service ---------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Protocol {
    Http,
    Raw,
}

impl std::str::FromStr for Protocol {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "http" => Ok(Protocol::Http),
            "raw" => Ok(Protocol::Raw),
            other => Err(Error::Config(format!("unknown protocol {other:?}"))),
        }
    }
}

pub struct Server {
    pub addr: SocketAddr,
    pub histogram: Arc<LatencyHistogram>,
    started: Instant,
}

impl Server {
    pub fn uptime_seconds(&self) -> f64 {
        self.started.elapsed().as_secs_f64()
    }
}

/// Bind and spawn `workers` accept loops sharing the immutable state. Each
/// worker handles one connection at a time, one request per connection.
pub fn start(
    state: Arc<ServingState>,
    bind: &str,
    workers: usize,
    protocol: Protocol,
) -> Result<Server> {
    let listener =
        TcpListener::bind(bind).map_err(|e| Error::State(format!("bind {bind}: {e}")))?;
    let addr = listener.local_addr()?;
    let histogram = Arc::new(LatencyHistogram::default());
    let started = Instant::now();
    let server = Server {
        addr,
        histogram: histogram.clone(),
        started,
    };
    for _ in 0..workers.max(1) {
        let listener = listener.try_clone()?;
        let state = state.clone();
        let histogram = histogram.clone();
        std::thread::spawn(move || {
            for conn in listener.incoming() {
                let Ok(mut conn) = conn else { continue };
                let result = match protocol {
                    Protocol::Http => handle_http(&mut conn, &state, &histogram, started),
                    Protocol::Raw => handle_raw(&mut conn, &state, &histogram),
                };
                // per-connection failures never kill the worker
                drop(result);
            }
        });
    }
    Ok(server)
}

fn recommend_json(state: &ServingState, body: &[u8]) -> std::result::Result<String, String> {
    let request: InferenceRequest =
        serde_json::from_slice(body).map_err(|e| format!("bad request body: {e}"))?;
    let response = state.infer(&request).map_err(|e| e.to_string())?;
    serde_json::to_string(&response).map_err(|e| e.to_string())
}

fn stats_json(histogram: &LatencyHistogram, started: Instant) -> String {
    let uptime = started.elapsed().as_secs_f64();
    let count = histogram.count();
    format!(
        "{{\"count\":{},\"p50_us\":{},\"p95_us\":{},\"p99_us\":{},\"throughput_rps\":{:.3}}}",
        count,
        histogram.percentile_us(0.50),
        histogram.percentile_us(0.95),
        histogram.percentile_us(0.99),
        count as f64 / uptime.max(1e-9)
    )
}

fn health_json(state: &ServingState, started: Instant) -> String {
    format!(
        "{{\"version\":\"{}\",\"vocab_hash\":\"{}\",\"uptime_seconds\":{:.3}}}",
        env!("CARGO_PKG_VERSION"),
        state.vocab.hash(),
        started.elapsed().as_secs_f64()
    )
}

fn write_http(conn: &mut TcpStream, status: &str, body: &str) -> std::io::Result<()> {
    write!(
        conn,
        "HTTP/1.1 {status}\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
        body.len()
    )
}

fn handle_http(
    conn: &mut TcpStream,
    state: &ServingState,
    histogram: &LatencyHistogram,
    started: Instant,
) -> Result<()> {
    let mut reader = BufReader::new(conn.try_clone()?);
    let mut request_line = String::new();
    reader.read_line(&mut request_line)?;
    let mut parts = request_line.split_whitespace();
    let method = parts.next().unwrap_or("").to_owned();
    let path = parts.next().unwrap_or("").to_owned();
    let mut content_length = 0usize;
    loop {
        let mut line = String::new();
        reader.read_line(&mut line)?;
        let line = line.trim_end();
        if line.is_empty() {
            break;
        }
        if let Some(v) = line
            .to_ascii_lowercase()
            .strip_prefix("content-length:")
            .map(str::trim)
        {
            content_length = v
                .parse()
                .map_err(|_| Error::Protocol(format!("bad content-length {v:?}")))?;
        }
    }
    let mut body = vec![0u8; content_length];
    reader.read_exact(&mut body)?;
    match (method.as_str(), path.as_str()) {
        ("POST", "/recommend") => {
            let begin = Instant::now();
            match recommend_json(state, &body) {
                Ok(json) => {
                    histogram.record(begin.elapsed().as_micros() as u64);
                    write_http(conn, "200 OK", &json)?;
                }
                Err(msg) => {
                    let payload = serde_json::json!({ "error": msg }).to_string();
                    write_http(conn, "400 Bad Request", &payload)?;
                }
            }
        }
        ("GET", "/stats") => write_http(conn, "200 OK", &stats_json(histogram, started))?,
        ("GET", "/health") => write_http(conn, "200 OK", &health_json(state, started))?,
        _ => write_http(conn, "404 Not Found", "{\"error\":\"no such route\"}")?,
    }
    conn.flush()?;
    Ok(())
}

// raw framing: u32 LE byte length, then a JSON request; same shape back

fn handle_raw(
    conn: &mut TcpStream,
    state: &ServingState,
    histogram: &LatencyHistogram,
) -> Result<()> {
    loop {
        let mut len_bytes = [0u8; 4];
        if conn.read_exact(&mut len_bytes).is_err() {
            return Ok(()); // client closed
        }
        let len = u32::from_le_bytes(len_bytes) as usize;
        let mut body = vec![0u8; len];
        conn.read_exact(&mut body)?;
        let begin = Instant::now();
        let payload = match recommend_json(state, &body) {
            Ok(json) => {
                histogram.record(begin.elapsed().as_micros() as u64);
                json
            }
            Err(msg) => serde_json::json!({ "error": msg }).to_string(),
        };
        conn.write_all(&(payload.len() as u32).to_le_bytes())?;
        conn.write_all(payload.as_bytes())?;
        conn.flush()?;
    }
}

// --- small clients, used by the benchmark verb and tests ----------------

pub fn http_recommend(
    addr: impl ToSocketAddrs,
    request: &InferenceRequest,
) -> Result<RankedRecommendations> {
    let mut conn = TcpStream::connect(addr)?;
    let body = serde_json::to_string(request)?;
    write!(
        conn,
        "POST /recommend HTTP/1.1\r\nHost: localhost\r\nContent-Length: {}\r\n\r\n{body}",
        body.len()
    )?;
    let (status, payload) = read_http_response(&mut conn)?;
    if status != 200 {
        return Err(Error::Protocol(format!("status {status}: {payload}")));
    }
    Ok(serde_json::from_str(&payload)?)
}

pub fn http_get(addr: impl ToSocketAddrs, path: &str) -> Result<String> {
    let mut conn = TcpStream::connect(addr)?;
    write!(conn, "GET {path} HTTP/1.1\r\nHost: localhost\r\n\r\n")?;
    let (status, payload) = read_http_response(&mut conn)?;
    if status != 200 {
        return Err(Error::Protocol(format!("status {status}: {payload}")));
    }
    Ok(payload)
}

fn read_http_response(conn: &mut TcpStream) -> Result<(u32, String)> {
    let mut reader = BufReader::new(conn);
    let mut status_line = String::new();
    reader.read_line(&mut status_line)?;
    let status: u32 = status_line
        .split_whitespace()
        .nth(1)
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::Protocol(format!("bad status line {status_line:?}")))?;
    let mut content_length = 0usize;
    loop {
        let mut line = String::new();
        reader.read_line(&mut line)?;
        if line.trim_end().is_empty() {
            break;
        }
        if let Some(v) = line
            .to_ascii_lowercase()
            .strip_prefix("content-length:")
            .map(str::trim)
        {
            content_length = v
                .parse()
                .map_err(|_| Error::Protocol(format!("bad content-length {v:?}")))?;
        }
    }
    let mut body = vec![0u8; content_length];
    reader.read_exact(&mut body)?;
    Ok((status, String::from_utf8_lossy(&body).into_owned()))
}

pub fn raw_recommend(conn: &mut TcpStream, request: &InferenceRequest) -> Result<RankedRecommendations> {
    let body = serde_json::to_vec(request)?;
    conn.write_all(&(body.len() as u32).to_le_bytes())?;
    conn.write_all(&body)?;
    let mut len_bytes = [0u8; 4];
    conn.read_exact(&mut len_bytes)?;
    let mut payload = vec![0u8; u32::from_le_bytes(len_bytes) as usize];
    conn.read_exact(&mut payload)?;
    Ok(serde_json::from_slice(&payload)?)
}
