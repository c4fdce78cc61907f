//! Uniform abstraction over text-completion endpoints.
//!
//! A [`Backend`] receives a textual context and returns `n` sampled
//! continuations. This module defines the request/response contract, the
//! deterministic local stubs used for testing and offline runs, and the
//! numeric logit-bias builder. The HTTP implementation lives in the
//! `sigllm-client` crate.

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::path::Path;
use std::sync::Mutex;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::{parse_numeric_tail, serialize_window};

/// Errors surfaced by completion backends.
#[derive(Debug, Error)]
pub enum BackendError {
    /// Transient failures persisted past the retry budget.
    #[error("backend unavailable after {attempts} attempt(s): {reason}")]
    Unavailable { attempts: u32, reason: String },
    /// The endpoint rejected the request outright (4xx other than 429).
    #[error("request rejected by endpoint: {0}")]
    Rejected(String),
    /// The endpoint refused the window as repetitive input. Pipelines
    /// treat the owning window as having no detectable anomalies.
    #[error("repetitive input rejected: {0}")]
    RepetitiveInput(String),
    /// The request violated its own invariants before leaving the
    /// process.
    #[error("invalid request: {0}")]
    InvalidRequest(String),
}

/// One completion call: a context plus sampling controls.
#[derive(Debug, Clone, PartialEq)]
pub struct CompletionRequest {
    pub context: String,
    pub n_samples: usize,
    pub max_tokens: usize,
    pub temperature: f64,
    /// Ask the backend to restrict output to digits, commas, spaces and
    /// newlines, where supported.
    pub numeric_only: bool,
}

impl CompletionRequest {
    pub fn new(context: impl Into<String>, n_samples: usize, max_tokens: usize) -> Self {
        Self {
            context: context.into(),
            n_samples,
            max_tokens,
            temperature: 1.0,
            numeric_only: true,
        }
    }

    pub fn validate(&self) -> Result<(), BackendError> {
        if self.n_samples == 0 {
            return Err(BackendError::InvalidRequest("n_samples must be >= 1".into()));
        }
        if self.max_tokens == 0 {
            return Err(BackendError::InvalidRequest("max_tokens must be >= 1".into()));
        }
        if self.temperature < 0.0 {
            return Err(BackendError::InvalidRequest(
                "temperature must be non-negative".into(),
            ));
        }
        Ok(())
    }
}

/// Token counts reported (or estimated) per completion call.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenUsage {
    pub prompt: u64,
    pub completion: u64,
}

impl TokenUsage {
    pub fn add(&mut self, other: TokenUsage) {
        self.prompt += other.prompt;
        self.completion += other.completion;
    }
}

/// A backend's answer: exactly `n_samples` continuations on success.
#[derive(Debug, Clone, PartialEq)]
pub struct CompletionResponse {
    pub samples: Vec<String>,
    pub usage: TokenUsage,
    pub latency_ms: u64,
}

/// Which implementation a descriptor names.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BackendKind {
    HttpOpenAiCompatible,
    StubPersistence,
    StubOracle,
    StubReplay,
}

/// Serializable description of a backend instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendDescriptor {
    pub kind: BackendKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub endpoint: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<String>,
    /// The model's tokenizer chunks multi-digit numbers, so serialized
    /// windows should space out their digits.
    #[serde(default)]
    pub chunked_tokenizer: bool,
    /// Send chat-style messages instead of a bare completion prompt.
    #[serde(default)]
    pub chat_style: bool,
    /// The endpoint honors per-token logit biasing.
    #[serde(default)]
    pub supports_logit_bias: bool,
    /// Upper bound on in-flight requests.
    #[serde(default = "default_parallelism")]
    pub parallelism: usize,
}

fn default_parallelism() -> usize {
    4
}

impl BackendDescriptor {
    pub fn stub(kind: BackendKind) -> Self {
        Self {
            kind,
            endpoint: None,
            model: None,
            chunked_tokenizer: false,
            chat_style: false,
            supports_logit_bias: false,
            parallelism: default_parallelism(),
        }
    }

    pub fn http(endpoint: impl Into<String>, model: impl Into<String>) -> Self {
        Self {
            kind: BackendKind::HttpOpenAiCompatible,
            endpoint: Some(endpoint.into()),
            model: Some(model.into()),
            chunked_tokenizer: true,
            chat_style: false,
            supports_logit_bias: true,
            parallelism: default_parallelism(),
        }
    }

    pub fn validate(&self) -> Result<(), BackendError> {
        if self.kind == BackendKind::HttpOpenAiCompatible {
            if self.endpoint.is_none() {
                return Err(BackendError::InvalidRequest(
                    "http backend requires an endpoint URL".into(),
                ));
            }
            if self.model.is_none() {
                return Err(BackendError::InvalidRequest(
                    "http backend requires a model name".into(),
                ));
            }
        }
        Ok(())
    }
}

/// A text-completion model endpoint (live or stubbed). Implementations
/// must be safe to call from multiple workers at once.
pub trait Backend: Send + Sync {
    fn complete(&self, request: &CompletionRequest) -> Result<CompletionResponse, BackendError>;

    fn descriptor(&self) -> &BackendDescriptor;
}

// ============================================================================
// Numeric logit bias
// ============================================================================

/// Single-character token ids shared by the byte-level BPE vocabularies
/// used by OpenAI-style models: printable ASCII starts at '!' = 0, so
/// ',' = 11 and '0'..'9' = 15..24; the standalone space is 220 and the
/// newline 198.
const BYTE_BPE_COMMA: u32 = 11;
const BYTE_BPE_DIGIT_BASE: u32 = 15;
const BYTE_BPE_SPACE: u32 = 220;
const BYTE_BPE_NEWLINE: u32 = 198;

/// How to express the numeric-only restriction in token biases.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "mode")]
pub enum BiasStrategy {
    /// Push digits, comma, space and newline up by `weight`.
    Allow { weight: i32 },
    /// Push an explicit list of disallowed token ids down by `weight`.
    Suppress { ids: Vec<u32>, weight: i32 },
}

impl Default for BiasStrategy {
    fn default() -> Self {
        BiasStrategy::Allow { weight: 30 }
    }
}

/// Build the token-bias map restricting output to numeric text.
///
/// Returns an empty map when the backend does not advertise logit-bias
/// support; callers then rely on parse robustness instead.
pub fn build_numeric_bias(supported: bool, strategy: &BiasStrategy) -> BTreeMap<u32, i32> {
    let mut map = BTreeMap::new();
    if !supported {
        return map;
    }
    match strategy {
        BiasStrategy::Allow { weight } => {
            for digit in 0..10 {
                map.insert(BYTE_BPE_DIGIT_BASE + digit, *weight);
            }
            map.insert(BYTE_BPE_COMMA, *weight);
            map.insert(BYTE_BPE_SPACE, *weight);
            map.insert(BYTE_BPE_NEWLINE, *weight);
        }
        BiasStrategy::Suppress { ids, weight } => {
            for id in ids {
                map.insert(*id, -weight.abs());
            }
        }
    }
    map
}

// ============================================================================
// Deterministic stubs
// ============================================================================

/// Emit serialized `values` until appending the next one would push the
/// text past `max_tokens` characters (a character approximates one token
/// for digit-level tokenizers). Always emits at least one value.
fn fill_to_budget(value_source: impl Iterator<Item = u64>, max_tokens: usize) -> Vec<u64> {
    let mut out = Vec::new();
    let mut len = 0usize;
    for v in value_source {
        let piece = v.to_string().len() + usize::from(!out.is_empty());
        if !out.is_empty() && len + piece > max_tokens {
            break;
        }
        len += piece;
        out.push(v);
    }
    out
}

fn stub_usage(request: &CompletionRequest, samples: &[String]) -> TokenUsage {
    TokenUsage {
        prompt: request.context.len() as u64,
        completion: samples.iter().map(|s| s.len() as u64).sum(),
    }
}

/// FNV-1a, used to derive per-request RNG seeds so stub output depends
/// only on (stub seed, request, sample index), never on call order.
fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        hash ^= u64::from(b);
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

fn sample_seed(seed: u64, context: &str, sample: usize) -> u64 {
    let mut bytes = Vec::with_capacity(context.len() + 16);
    bytes.extend_from_slice(&seed.to_le_bytes());
    bytes.extend_from_slice(context.as_bytes());
    bytes.extend_from_slice(&(sample as u64).to_le_bytes());
    fnv1a64(&bytes)
}

/// Persistence forecaster: every continuation repeats the last value of
/// the numeric tail of the context.
pub struct PersistenceStub {
    descriptor: BackendDescriptor,
    /// Mimic endpoints that refuse windows of identical values.
    reject_repetitive: bool,
}

impl PersistenceStub {
    pub fn new() -> Self {
        Self {
            descriptor: BackendDescriptor::stub(BackendKind::StubPersistence),
            reject_repetitive: false,
        }
    }

    pub fn rejecting_repetitive(mut self) -> Self {
        self.reject_repetitive = true;
        self
    }
}

impl Default for PersistenceStub {
    fn default() -> Self {
        Self::new()
    }
}

impl Backend for PersistenceStub {
    fn complete(&self, request: &CompletionRequest) -> Result<CompletionResponse, BackendError> {
        request.validate()?;
        let tail = parse_numeric_tail(&request.context);
        if self.reject_repetitive && tail.len() >= 2 && tail.windows(2).all(|w| w[0] == w[1]) {
            return Err(BackendError::RepetitiveInput(
                "window contains a series of identical values".into(),
            ));
        }
        let last = tail.last().copied().unwrap_or(0);
        let values = fill_to_budget(std::iter::repeat(last), request.max_tokens);
        let text = serialize_window(&values, false);
        let samples = vec![text; request.n_samples];
        let usage = stub_usage(request, &samples);
        Ok(CompletionResponse {
            samples,
            usage,
            latency_ms: 0,
        })
    }

    fn descriptor(&self) -> &BackendDescriptor {
        &self.descriptor
    }
}

/// Oracle forecaster: registered with the observed series (for locating
/// the window) and the true series (for the continuation values), it
/// returns the true next values plus seeded Gaussian noise, re-quantized.
pub struct OracleStub {
    descriptor: BackendDescriptor,
    observed: Vec<u64>,
    truth: Vec<u64>,
    /// Noise standard deviation, in quantized-value units.
    sigma: f64,
    seed: u64,
    /// First value -> positions, to keep window lookup fast.
    first_value_index: HashMap<u64, Vec<usize>>,
}

impl OracleStub {
    /// `observed` is the series whose windows will appear in request
    /// contexts; `truth` (same length) supplies the values to predict.
    /// Pass the same series twice for a perfect forecaster.
    pub fn new(observed: Vec<u64>, truth: Vec<u64>, sigma: f64, seed: u64) -> Self {
        assert_eq!(
            observed.len(),
            truth.len(),
            "observed and truth series must be the same length"
        );
        let mut first_value_index: HashMap<u64, Vec<usize>> = HashMap::new();
        for (i, &v) in observed.iter().enumerate() {
            first_value_index.entry(v).or_default().push(i);
        }
        Self {
            descriptor: BackendDescriptor::stub(BackendKind::StubOracle),
            observed,
            truth,
            sigma,
            seed,
            first_value_index,
        }
    }

    /// Position right after the first occurrence of `window` in the
    /// observed series.
    fn locate_end(&self, window: &[u64]) -> Option<usize> {
        let first = *window.first()?;
        let candidates = self.first_value_index.get(&first)?;
        for &start in candidates {
            if start + window.len() <= self.observed.len()
                && self.observed[start..start + window.len()] == *window
            {
                return Some(start + window.len());
            }
        }
        None
    }

    fn noisy(&self, value: u64, rng: &mut ChaCha8Rng) -> u64 {
        if self.sigma <= 0.0 {
            return value;
        }
        let normal = Normal::new(0.0, self.sigma).expect("sigma is positive and finite");
        let perturbed = value as f64 + normal.sample(rng);
        perturbed.round().max(0.0) as u64
    }
}

impl Backend for OracleStub {
    fn complete(&self, request: &CompletionRequest) -> Result<CompletionResponse, BackendError> {
        request.validate()?;
        let tail = parse_numeric_tail(&request.context);
        let continuation_base: Box<dyn Fn(usize) -> u64> = match self.locate_end(&tail) {
            Some(end) => {
                let truth = &self.truth;
                let last = *truth.last().expect("truth series is non-empty");
                Box::new(move |k| truth.get(end + k).copied().unwrap_or(last))
            }
            None => {
                // Unknown context: fall back to persistence.
                let last = tail.last().copied().unwrap_or(0);
                Box::new(move |_| last)
            }
        };
        let mut samples = Vec::with_capacity(request.n_samples);
        for j in 0..request.n_samples {
            let mut rng = ChaCha8Rng::seed_from_u64(sample_seed(self.seed, &request.context, j));
            let mut k = 0usize;
            let values = fill_to_budget(
                std::iter::from_fn(|| {
                    let v = self.noisy(continuation_base(k), &mut rng);
                    k += 1;
                    Some(v)
                }),
                request.max_tokens,
            );
            samples.push(serialize_window(&values, false));
        }
        let usage = stub_usage(request, &samples);
        Ok(CompletionResponse {
            samples,
            usage,
            latency_ms: 0,
        })
    }

    fn descriptor(&self) -> &BackendDescriptor {
        &self.descriptor
    }
}

// ============================================================================
// Transcripts: replay and recording
// ============================================================================

/// A recorded exchange: the exact context sent and the samples returned.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranscriptEntry {
    pub context: String,
    pub samples: Vec<String>,
}

/// A full recorded session, serializable as JSON.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Transcript {
    pub entries: Vec<TranscriptEntry>,
}

impl Transcript {
    pub fn load(path: impl AsRef<Path>) -> std::io::Result<Self> {
        let data = std::fs::read_to_string(path)?;
        serde_json::from_str(&data).map_err(std::io::Error::other)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> std::io::Result<()> {
        let mut json = serde_json::to_string_pretty(self).map_err(std::io::Error::other)?;
        json.push('\n');
        std::fs::write(path, json)
    }
}

/// Replays a recorded transcript, byte for byte. Repeated identical
/// contexts are answered in recording order.
pub struct ReplayStub {
    descriptor: BackendDescriptor,
    entries: Mutex<HashMap<String, VecDeque<Vec<String>>>>,
}

impl ReplayStub {
    pub fn new(transcript: Transcript) -> Self {
        let mut entries: HashMap<String, VecDeque<Vec<String>>> = HashMap::new();
        for entry in transcript.entries {
            entries
                .entry(entry.context)
                .or_default()
                .push_back(entry.samples);
        }
        Self {
            descriptor: BackendDescriptor::stub(BackendKind::StubReplay),
            entries: Mutex::new(entries),
        }
    }

    pub fn from_path(path: impl AsRef<Path>) -> std::io::Result<Self> {
        Ok(Self::new(Transcript::load(path)?))
    }
}

impl Backend for ReplayStub {
    fn complete(&self, request: &CompletionRequest) -> Result<CompletionResponse, BackendError> {
        request.validate()?;
        let samples = {
            let mut entries = self.entries.lock().unwrap();
            let queue = entries.get_mut(&request.context);
            match queue.and_then(VecDeque::pop_front) {
                Some(s) => s,
                None => {
                    return Err(BackendError::Unavailable {
                        attempts: 1,
                        reason: "context not present in replay transcript".into(),
                    })
                }
            }
        };
        if samples.len() < request.n_samples {
            return Err(BackendError::Unavailable {
                attempts: 1,
                reason: format!(
                    "transcript holds {} sample(s), request needs {}",
                    samples.len(),
                    request.n_samples
                ),
            });
        }
        let samples: Vec<String> = samples.into_iter().take(request.n_samples).collect();
        let usage = stub_usage(request, &samples);
        Ok(CompletionResponse {
            samples,
            usage,
            latency_ms: 0,
        })
    }

    fn descriptor(&self) -> &BackendDescriptor {
        &self.descriptor
    }
}

/// Wraps another backend and records every successful exchange, for
/// producing replay transcripts from live or stubbed sessions.
pub struct RecordingBackend<'a> {
    inner: &'a dyn Backend,
    log: Mutex<Vec<TranscriptEntry>>,
}

impl<'a> RecordingBackend<'a> {
    pub fn new(inner: &'a dyn Backend) -> Self {
        Self {
            inner,
            log: Mutex::new(Vec::new()),
        }
    }

    /// The recorded transcript, sorted by context so concurrent runs
    /// produce identical files.
    pub fn transcript(&self) -> Transcript {
        let mut entries = self.log.lock().unwrap().clone();
        entries.sort_by(|a, b| a.context.cmp(&b.context));
        Transcript { entries }
    }
}

impl Backend for RecordingBackend<'_> {
    fn complete(&self, request: &CompletionRequest) -> Result<CompletionResponse, BackendError> {
        let response = self.inner.complete(request)?;
        self.log.lock().unwrap().push(TranscriptEntry {
            context: request.context.clone(),
            samples: response.samples.clone(),
        });
        Ok(response)
    }

    fn descriptor(&self) -> &BackendDescriptor {
        self.inner.descriptor()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn request(context: &str, n: usize, max_tokens: usize) -> CompletionRequest {
        CompletionRequest::new(context, n, max_tokens)
    }

    // ==================== persistence ====================

    #[test]
    fn persistence_repeats_last_value() {
        let stub = PersistenceStub::new();
        // budget of 6 characters fits exactly three single-digit values
        let resp = stub.complete(&request("3,5,7,7", 2, 6)).unwrap();
        assert_eq!(resp.samples, vec!["7,7,7".to_string(), "7,7,7".to_string()]);
    }

    #[test]
    fn persistence_rejects_repetitive_when_configured() {
        let stub = PersistenceStub::new().rejecting_repetitive();
        let err = stub.complete(&request("4,4,4,4", 1, 10)).unwrap_err();
        assert!(matches!(err, BackendError::RepetitiveInput(_)));
        // mixed values pass
        assert!(stub.complete(&request("4,4,5,4", 1, 10)).is_ok());
    }

    #[test]
    fn persistence_validates_request() {
        let stub = PersistenceStub::new();
        let mut bad = request("1,2", 0, 10);
        assert!(stub.complete(&bad).is_err());
        bad = request("1,2", 1, 0);
        assert!(stub.complete(&bad).is_err());
    }

    // ==================== oracle ====================

    #[test]
    fn oracle_returns_registered_continuation() {
        let series: Vec<u64> = vec![5, 6, 7, 8, 9, 10];
        let stub = OracleStub::new(series.clone(), series, 0.0, 1);
        let resp = stub.complete(&request("5,6,7", 1, 8)).unwrap();
        assert_eq!(resp.samples[0], "8,9,10");
    }

    #[test]
    fn oracle_noise_matches_direct_computation() {
        let series: Vec<u64> = vec![100, 200, 300, 400, 500, 600];
        let sigma = 3.0;
        let seed = 42;
        let stub = OracleStub::new(series.clone(), series.clone(), sigma, seed);
        let req = request("100,200,300", 2, 12);
        let resp = stub.complete(&req).unwrap();

        // independent recomputation with the same derivation
        for (j, sample) in resp.samples.iter().enumerate() {
            let mut rng = ChaCha8Rng::seed_from_u64(sample_seed(seed, &req.context, j));
            let normal = Normal::new(0.0, sigma).unwrap();
            let expected: Vec<u64> = [400u64, 500, 600]
                .iter()
                .map(|&v| (v as f64 + normal.sample(&mut rng)).round().max(0.0) as u64)
                .collect();
            let got = crate::codec::parse_numeric_sequence(sample).values;
            assert_eq!(got, expected, "sample {j}");
        }
    }

    #[test]
    fn oracle_is_deterministic_per_request() {
        let series: Vec<u64> = (0..50).collect();
        let stub = OracleStub::new(series.clone(), series, 2.0, 7);
        let req = request("10,11,12", 4, 20);
        let a = stub.complete(&req).unwrap();
        let b = stub.complete(&req).unwrap();
        assert_eq!(a.samples, b.samples);
    }

    #[test]
    fn oracle_unknown_context_falls_back_to_persistence() {
        let stub = OracleStub::new(vec![1, 2, 3], vec![1, 2, 3], 0.0, 0);
        let resp = stub.complete(&request("9,9,8", 1, 4)).unwrap();
        assert_eq!(resp.samples[0], "8,8");
    }

    // ==================== replay / recording ====================

    #[test]
    fn replay_returns_recorded_samples_byte_identical() {
        let transcript = Transcript {
            entries: vec![TranscriptEntry {
                context: "1,2,3".into(),
                samples: vec!["4,5".into(), "4,6".into()],
            }],
        };
        let stub = ReplayStub::new(transcript);
        let resp = stub.complete(&request("1,2,3", 2, 10)).unwrap();
        assert_eq!(resp.samples, vec!["4,5".to_string(), "4,6".to_string()]);
        // second identical request has no recorded answer left
        assert!(stub.complete(&request("1,2,3", 2, 10)).is_err());
    }

    #[test]
    fn replay_missing_context_is_unavailable() {
        let stub = ReplayStub::new(Transcript::default());
        let err = stub.complete(&request("1", 1, 10)).unwrap_err();
        assert!(matches!(err, BackendError::Unavailable { .. }));
    }

    #[test]
    fn recording_then_replaying_reproduces_responses() {
        let inner = PersistenceStub::new();
        let recorder = RecordingBackend::new(&inner);
        let req = request("5,5,9", 3, 10);
        let original = recorder.complete(&req).unwrap();

        let replay = ReplayStub::new(recorder.transcript());
        let replayed = replay.complete(&req).unwrap();
        assert_eq!(original.samples, replayed.samples);
    }

    // ==================== bias ====================

    #[test]
    fn bias_unsupported_is_empty() {
        assert!(build_numeric_bias(false, &BiasStrategy::default()).is_empty());
    }

    #[test]
    fn bias_allowlist_covers_numeric_characters_only() {
        let map = build_numeric_bias(true, &BiasStrategy::Allow { weight: 30 });
        assert_eq!(map.len(), 13); // ten digits, comma, space, newline
        for digit in 0..10u32 {
            assert_eq!(map.get(&(BYTE_BPE_DIGIT_BASE + digit)), Some(&30));
        }
        assert_eq!(map.get(&BYTE_BPE_COMMA), Some(&30));
        assert_eq!(map.get(&BYTE_BPE_SPACE), Some(&30));
        assert_eq!(map.get(&BYTE_BPE_NEWLINE), Some(&30));
    }

    #[test]
    fn bias_suppress_uses_negative_weights() {
        let map = build_numeric_bias(
            true,
            &BiasStrategy::Suppress {
                ids: vec![50, 51],
                weight: 100,
            },
        );
        assert_eq!(map.get(&50), Some(&-100));
        assert_eq!(map.get(&51), Some(&-100));
    }

    // ==================== descriptor ====================

    #[test]
    fn http_descriptor_requires_endpoint_and_model() {
        let mut d = BackendDescriptor::http("http://localhost:1", "m");
        assert!(d.validate().is_ok());
        d.model = None;
        assert!(d.validate().is_err());
        d.endpoint = None;
        assert!(d.validate().is_err());
        assert!(BackendDescriptor::stub(BackendKind::StubPersistence)
            .validate()
            .is_ok());
    }
}
