//! Uniform access to model backends: trace generation, query-aware
//! rewriting, pairwise scoring and listwise ranking.
//!
//! Every operation is turned into a [`WireRequest`] (template id plus named
//! slots, with the rendered prompt in the `prompt` slot), looked up in the
//! response cache, and otherwise sent through the backend's [`Transport`]
//! under its in-flight limit. Timeouts are retried with exponential backoff;
//! parse failures are not.

pub mod cache;
pub mod http;
pub mod parse;
pub mod sim;
pub mod templates;
pub mod wire;

use std::collections::{BTreeMap, HashMap};
use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};

pub use cache::ResponseCache;
pub use http::HttpTransport;
pub use parse::{mllm_zero_shot_score, parse_listwise_response};
pub use sim::{sim_backend_score, SimBackendConfig, SimTransport};
pub use templates::{Template, TemplateRegistry};
pub use wire::{Operation, WireRequest, WireResponse};

use crate::error::{invalid, BackendError, Error, Result};
use crate::eval::RelevanceJudgments;
use crate::model::{EcrTrace, GenerationKind, Item, Role};

pub const SIM_ENDPOINT: &str = "sim";
pub const DEFAULT_LISTWISE_MAX: usize = 50;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    Reasoner,
    PairwiseReranker,
    ListwiseRanker,
    ZeroShotMllm,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackendDescriptor {
    pub backend_id: String,
    pub kind: BackendKind,
    /// URL, or `"sim"` for the simulated backend.
    pub endpoint: String,
    #[serde(default = "default_timeout_ms")]
    pub timeout_ms: u64,
    #[serde(default = "default_max_in_flight")]
    pub max_in_flight: usize,
}

fn default_timeout_ms() -> u64 {
    30_000
}

fn default_max_in_flight() -> usize {
    8
}

impl BackendDescriptor {
    pub fn sim(backend_id: impl Into<String>, kind: BackendKind) -> Self {
        BackendDescriptor {
            backend_id: backend_id.into(),
            kind,
            endpoint: SIM_ENDPOINT.into(),
            timeout_ms: default_timeout_ms(),
            max_in_flight: default_max_in_flight(),
        }
    }

    pub fn is_sim(&self) -> bool {
        self.endpoint == SIM_ENDPOINT
    }

    pub fn validate(&self) -> Result<()> {
        if self.backend_id.is_empty() {
            return Err(Error::Config("backend_id is empty".into()));
        }
        if self.max_in_flight == 0 {
            return Err(Error::Config(format!(
                "backend `{}`: max_in_flight must be at least 1",
                self.backend_id
            )));
        }
        Ok(())
    }
}

/// A pairwise relevance score in `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairScore {
    pub query_id: String,
    pub candidate_id: String,
    pub score: f64,
    pub backend_id: String,
}

pub trait Transport: Send + Sync {
    fn send(
        &self,
        backend: &BackendDescriptor,
        request: &WireRequest,
    ) -> Result<WireResponse, BackendError>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RetryPolicy {
    pub max_retries: u32,
    pub base_backoff: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            max_retries: 2,
            base_backoff: Duration::from_millis(100),
        }
    }
}

/// Logical backend calls issued through a metered gateway handle, cache hits
/// included.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenBudget {
    pub backend_calls: u64,
    pub chars_sent: u64,
}

impl std::ops::AddAssign for TokenBudget {
    fn add_assign(&mut self, rhs: Self) {
        self.backend_calls += rhs.backend_calls;
        self.chars_sent += rhs.chars_sent;
    }
}

#[derive(Debug, Default)]
struct Meter {
    calls: AtomicU64,
    chars: AtomicU64,
}

#[derive(Debug)]
struct Limiter {
    limit: usize,
    active: Mutex<usize>,
    cv: Condvar,
    peak: AtomicUsize,
}

impl Limiter {
    fn new(limit: usize) -> Self {
        Limiter {
            limit,
            active: Mutex::new(0),
            cv: Condvar::new(),
            peak: AtomicUsize::new(0),
        }
    }

    fn acquire(&self) -> LimiterGuard<'_> {
        let mut active = self.active.lock().unwrap();
        while *active >= self.limit {
            active = self.cv.wait(active).unwrap();
        }
        *active += 1;
        self.peak.fetch_max(*active, Ordering::SeqCst);
        LimiterGuard(self)
    }
}

struct LimiterGuard<'a>(&'a Limiter);

impl Drop for LimiterGuard<'_> {
    fn drop(&mut self) {
        *self.0.active.lock().unwrap() -= 1;
        self.0.cv.notify_one();
    }
}

struct Backend {
    descriptor: BackendDescriptor,
    transport: Arc<dyn Transport>,
    limiter: Limiter,
    requests: AtomicU64,
}

/// Which registered template each pipeline operation uses.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct TemplateChoice {
    pub ecr: String,
    pub qar: String,
    pub pairwise: String,
    pub listwise: String,
    pub judge: String,
}

impl Default for TemplateChoice {
    fn default() -> Self {
        TemplateChoice {
            ecr: templates::ECR_DEFAULT.into(),
            qar: templates::QAR_DEFAULT.into(),
            pairwise: templates::PAIRWISE_DEFAULT.into(),
            listwise: templates::LISTWISE_DEFAULT.into(),
            judge: templates::JUDGE_DEFAULT.into(),
        }
    }
}

struct Inner {
    backends: HashMap<String, Backend>,
    cache: Option<ResponseCache>,
    templates: TemplateRegistry,
    choice: TemplateChoice,
    retry: RetryPolicy,
    listwise_max: usize,
    transport_requests: AtomicU64,
    cache_hits: AtomicU64,
}

#[derive(Default)]
pub struct GatewayBuilder {
    backends: Vec<(BackendDescriptor, Arc<dyn Transport>)>,
    cache: Option<ResponseCache>,
    templates: Option<TemplateRegistry>,
    choice: TemplateChoice,
    retry: RetryPolicy,
    listwise_max: Option<usize>,
}

impl GatewayBuilder {
    pub fn backend(mut self, descriptor: BackendDescriptor, transport: Arc<dyn Transport>) -> Self {
        self.backends.push((descriptor, transport));
        self
    }

    pub fn sim_backend(
        self,
        descriptor: BackendDescriptor,
        cfg: SimBackendConfig,
        planted: Arc<RelevanceJudgments>,
    ) -> Result<Self> {
        let t = SimTransport::new(cfg, planted)?;
        Ok(self.backend(descriptor, Arc::new(t)))
    }

    pub fn http_backend(self, descriptor: BackendDescriptor) -> Self {
        let t = HttpTransport::new(descriptor.timeout_ms);
        self.backend(descriptor, Arc::new(t))
    }

    pub fn cache(mut self, cache: ResponseCache) -> Self {
        self.cache = Some(cache);
        self
    }

    pub fn templates(mut self, templates: TemplateRegistry) -> Self {
        self.templates = Some(templates);
        self
    }

    pub fn template_choice(mut self, choice: TemplateChoice) -> Self {
        self.choice = choice;
        self
    }

    pub fn retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    pub fn listwise_max(mut self, n: usize) -> Self {
        self.listwise_max = Some(n);
        self
    }

    pub fn build(self) -> Result<Gateway> {
        let mut backends = HashMap::new();
        for (descriptor, transport) in self.backends {
            descriptor.validate()?;
            let id = descriptor.backend_id.clone();
            let backend = Backend {
                limiter: Limiter::new(descriptor.max_in_flight),
                descriptor,
                transport,
                requests: AtomicU64::new(0),
            };
            if backends.insert(id.clone(), backend).is_some() {
                return Err(Error::Config(format!("backend id `{id}` registered twice")));
            }
        }
        Ok(Gateway {
            inner: Arc::new(Inner {
                backends,
                cache: self.cache,
                templates: self.templates.unwrap_or_default(),
                choice: self.choice,
                retry: self.retry,
                listwise_max: self.listwise_max.unwrap_or(DEFAULT_LISTWISE_MAX),
                transport_requests: AtomicU64::new(0),
                cache_hits: AtomicU64::new(0),
            }),
            meter: None,
        })
    }
}

/// Cheap to clone; clones share backends, cache and counters.
#[derive(Clone)]
pub struct Gateway {
    inner: Arc<Inner>,
    meter: Option<Arc<Meter>>,
}

impl std::fmt::Debug for Gateway {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let mut ids: Vec<&String> = self.inner.backends.keys().collect();
        ids.sort();
        f.debug_struct("Gateway").field("backends", &ids).finish()
    }
}

impl Gateway {
    pub fn builder() -> GatewayBuilder {
        GatewayBuilder::default()
    }

    /// A handle sharing this gateway whose calls are tallied separately.
    pub fn metered(&self) -> Gateway {
        Gateway {
            inner: Arc::clone(&self.inner),
            meter: Some(Arc::new(Meter::default())),
        }
    }

    /// Calls tallied on this handle (zero for an unmetered handle).
    pub fn usage(&self) -> TokenBudget {
        self.meter
            .as_ref()
            .map_or(TokenBudget::default(), |m| TokenBudget {
                backend_calls: m.calls.load(Ordering::SeqCst),
                chars_sent: m.chars.load(Ordering::SeqCst),
            })
    }

    /// Requests that reached a transport, across all backends.
    pub fn transport_requests(&self) -> u64 {
        self.inner.transport_requests.load(Ordering::SeqCst)
    }

    pub fn cache_hits(&self) -> u64 {
        self.inner.cache_hits.load(Ordering::SeqCst)
    }

    pub fn backend_requests(&self, backend_id: &str) -> u64 {
        self.inner
            .backends
            .get(backend_id)
            .map_or(0, |b| b.requests.load(Ordering::SeqCst))
    }

    /// Highest number of simultaneous transport calls seen on a backend.
    pub fn peak_in_flight(&self, backend_id: &str) -> usize {
        self.inner
            .backends
            .get(backend_id)
            .map_or(0, |b| b.limiter.peak.load(Ordering::SeqCst))
    }

    pub fn descriptor(&self, backend_id: &str) -> Result<&BackendDescriptor> {
        self.inner
            .backends
            .get(backend_id)
            .map(|b| &b.descriptor)
            .ok_or_else(|| Error::Config(format!("backend `{backend_id}` is not registered")))
    }

    pub fn templates(&self) -> &TemplateRegistry {
        &self.inner.templates
    }

    pub fn listwise_max(&self) -> usize {
        self.inner.listwise_max
    }

    fn backend_of_kind(&self, backend_id: &str, kinds: &[BackendKind]) -> Result<&Backend> {
        let backend =
            self.inner.backends.get(backend_id).ok_or_else(|| {
                Error::Config(format!("backend `{backend_id}` is not registered"))
            })?;
        if !kinds.contains(&backend.descriptor.kind) {
            return Err(Error::Config(format!(
                "backend `{backend_id}` is a {:?}, expected one of {kinds:?}",
                backend.descriptor.kind
            )));
        }
        Ok(backend)
    }

    fn request(
        &self,
        operation: Operation,
        template_id: &str,
        mut slots: BTreeMap<String, String>,
        n: Option<usize>,
    ) -> Result<WireRequest> {
        let template = self.inner.templates.get(template_id, operation)?;
        let prompt = template.render(&slots)?;
        slots.insert("prompt".into(), prompt);
        Ok(WireRequest {
            operation,
            template_id: template_id.to_string(),
            slots,
            n,
        })
    }

    fn dispatch(
        &self,
        backend: &Backend,
        request: &WireRequest,
    ) -> Result<WireResponse, BackendError> {
        if let Some(m) = &self.meter {
            m.calls.fetch_add(1, Ordering::SeqCst);
            m.chars.fetch_add(request.chars(), Ordering::SeqCst);
        }
        let id = &backend.descriptor.backend_id;
        let key = self
            .inner
            .cache
            .as_ref()
            .map(|_| ResponseCache::key(id, request));
        if let (Some(cache), Some(key)) = (&self.inner.cache, &key) {
            if let Some(hit) = cache.get(key) {
                self.inner.cache_hits.fetch_add(1, Ordering::SeqCst);
                return Ok(hit);
            }
        }

        let response = {
            let _slot = backend.limiter.acquire();
            let retry = self.inner.retry;
            let mut attempt = 0u32;
            loop {
                attempt += 1;
                self.inner.transport_requests.fetch_add(1, Ordering::SeqCst);
                backend.requests.fetch_add(1, Ordering::SeqCst);
                match backend.transport.send(&backend.descriptor, request) {
                    Ok(r) => break r,
                    Err(e) if e.is_retryable() && attempt <= retry.max_retries => {
                        let backoff = retry.base_backoff * 2u32.pow(attempt - 1);
                        log::warn!(
                            "backend `{id}` timed out (attempt {attempt}), retrying in {backoff:?}"
                        );
                        std::thread::sleep(backoff);
                    }
                    Err(BackendError::Timeout { backend_id, .. }) => {
                        return Err(BackendError::Timeout {
                            backend_id,
                            attempts: attempt,
                        })
                    }
                    Err(e) => return Err(e),
                }
            }
        };

        if !response.ok {
            return Err(BackendError::Remote {
                backend_id: id.clone(),
                message: response.error.unwrap_or_else(|| "unspecified error".into()),
            });
        }
        if let (Some(cache), Some(key)) = (&self.inner.cache, key) {
            if let Err(e) = cache.insert(key, id, &response) {
                log::warn!("response cache write failed: {e}");
            }
        }
        Ok(response)
    }

    fn response_text(backend_id: &str, response: WireResponse) -> Result<String, BackendError> {
        response.text.ok_or_else(|| BackendError::Parse {
            backend_id: backend_id.to_string(),
            reason: "response has no text".into(),
            raw: String::new(),
        })
    }

    /// Generate the original reasoning trace for an item.
    pub fn generate_ecr(
        &self,
        item: &Item,
        template_id: &str,
        backend_id: &str,
    ) -> Result<EcrTrace> {
        item.validate()?;
        let backend = self.backend_of_kind(backend_id, &[BackendKind::Reasoner])?;
        let slots = BTreeMap::from([
            ("item_id".to_string(), item.id.clone()),
            (
                "role".to_string(),
                match item.role {
                    Role::Query => "query",
                    Role::Candidate => "candidate",
                }
                .to_string(),
            ),
            ("instruction".to_string(), item.instruction.clone()),
            (
                "content_text".to_string(),
                item.content_text.clone().unwrap_or_default(),
            ),
            (
                "media_ref".to_string(),
                item.media_ref.clone().unwrap_or_default(),
            ),
        ]);
        let request = self.request(Operation::GenerateEcr, template_id, slots, None)?;
        let text = Self::response_text(backend_id, self.dispatch(backend, &request)?)?;
        let (think, summary) = parse::parse_ecr_text(backend_id, &text)?;
        Ok(EcrTrace::original(think, summary, backend_id))
    }

    /// Rewrite a candidate's original trace with respect to one query.
    pub fn rewrite_qar(
        &self,
        query: &Item,
        candidate: &Item,
        original: &EcrTrace,
        backend_id: &str,
    ) -> Result<EcrTrace> {
        if original.generation_kind != GenerationKind::Original {
            return Err(invalid(format!(
                "candidate `{}`: only original traces can be rewritten",
                candidate.id
            )));
        }
        let backend = self.backend_of_kind(backend_id, &[BackendKind::Reasoner])?;
        let slots = BTreeMap::from([
            ("query_id".to_string(), query.id.clone()),
            ("candidate_id".to_string(), candidate.id.clone()),
            ("instruction".to_string(), candidate.instruction.clone()),
            ("query_text_or_ecr".to_string(), query.query_text_or_ecr()),
            ("candidate_ecr".to_string(), original.render()),
            (
                "media_ref".to_string(),
                candidate.media_ref.clone().unwrap_or_default(),
            ),
        ]);
        let request = self.request(Operation::RewriteQar, &self.inner.choice.qar, slots, None)?;
        let text = Self::response_text(backend_id, self.dispatch(backend, &request)?)?;
        let (think, summary) = parse::parse_ecr_text(backend_id, &text)?;
        Ok(EcrTrace {
            think,
            summary,
            source_model: backend_id.to_string(),
            generation_kind: GenerationKind::QarRewritten,
            derived_for_query: Some(query.id.clone()),
        })
    }

    /// Score how well a candidate (seen through its trace) matches the query.
    pub fn score_pair(
        &self,
        query: &Item,
        candidate_id: &str,
        candidate_ecr: &EcrTrace,
        backend_id: &str,
    ) -> Result<PairScore> {
        let template = self.inner.choice.pairwise.clone();
        self.score_pair_with(query, candidate_id, candidate_ecr, backend_id, &template)
    }

    /// [`Gateway::score_pair`] with the relevance-judge template.
    pub fn judge_pair(
        &self,
        query: &Item,
        candidate_id: &str,
        candidate_ecr: &EcrTrace,
        backend_id: &str,
    ) -> Result<PairScore> {
        let template = self.inner.choice.judge.clone();
        self.score_pair_with(query, candidate_id, candidate_ecr, backend_id, &template)
    }

    fn score_pair_with(
        &self,
        query: &Item,
        candidate_id: &str,
        candidate_ecr: &EcrTrace,
        backend_id: &str,
        template_id: &str,
    ) -> Result<PairScore> {
        let backend = self.backend_of_kind(backend_id, &[BackendKind::PairwiseReranker])?;
        let slots = BTreeMap::from([
            ("query_id".to_string(), query.id.clone()),
            ("candidate_id".to_string(), candidate_id.to_string()),
            ("instruction".to_string(), query.instruction.clone()),
            ("query_text_or_ecr".to_string(), query.query_text_or_ecr()),
            ("candidate_ecr".to_string(), candidate_ecr.render()),
        ]);
        let request = self.request(Operation::ScorePair, template_id, slots, None)?;
        let response = self
            .dispatch(backend, &request)
            .map_err(|source| Error::Candidate {
                candidate_id: candidate_id.to_string(),
                source,
            })?;
        let score = response.score.ok_or_else(|| Error::Candidate {
            candidate_id: candidate_id.to_string(),
            source: BackendError::Parse {
                backend_id: backend_id.to_string(),
                reason: "response has no score".into(),
                raw: response.text.clone().unwrap_or_default(),
            },
        })?;
        if !(0.0..=1.0).contains(&score) {
            return Err(Error::Candidate {
                candidate_id: candidate_id.to_string(),
                source: BackendError::ScoreOutOfRange {
                    backend_id: backend_id.to_string(),
                    score,
                },
            });
        }
        Ok(PairScore {
            query_id: query.id.clone(),
            candidate_id: candidate_id.to_string(),
            score,
            backend_id: backend_id.to_string(),
        })
    }

    /// Ask a listwise ranker for a 1-based permutation of the candidates.
    pub fn rank_listwise(
        &self,
        query: &Item,
        candidate_ecrs: &[EcrTrace],
        backend_id: &str,
    ) -> Result<Vec<usize>> {
        let n = candidate_ecrs.len();
        if n == 0 || n > self.inner.listwise_max {
            return Err(invalid(format!(
                "listwise ranking takes 1..={} candidates, got {n}",
                self.inner.listwise_max
            )));
        }
        let backend = self.backend_of_kind(backend_id, &[BackendKind::ListwiseRanker])?;
        let slots = BTreeMap::from([
            ("query_id".to_string(), query.id.clone()),
            ("instruction".to_string(), query.instruction.clone()),
            ("query_text_or_ecr".to_string(), query.query_text_or_ecr()),
            (
                "candidate_list".to_string(),
                render_candidate_list(candidate_ecrs),
            ),
        ]);
        let request = self.request(
            Operation::RankListwise,
            &self.inner.choice.listwise,
            slots,
            Some(n),
        )?;
        let text = Self::response_text(backend_id, self.dispatch(backend, &request)?)?;
        parse_listwise_response(&text, n).map_err(|e| match e {
            Error::Backend(BackendError::Parse { reason, raw, .. }) => {
                Error::Backend(BackendError::Parse {
                    backend_id: backend_id.to_string(),
                    reason,
                    raw,
                })
            }
            other => other,
        })
    }
}

/// `[i] trace` lines, 1-based, one candidate per line.
pub fn render_candidate_list(traces: &[EcrTrace]) -> String {
    traces
        .iter()
        .enumerate()
        .map(|(i, t)| format!("[{}] {}", i + 1, t.render().replace(['\n', '\r'], " ")))
        .collect::<Vec<_>>()
        .join("\n")
}
