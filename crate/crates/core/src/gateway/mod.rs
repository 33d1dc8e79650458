//! Dispatches prompts to a recommendation backend with caching, retries,
//! rate limiting and an in-flight cap.

pub mod cache;
pub mod http;
pub mod mock;

use std::fs::File;
use std::io::Write;
use std::path::PathBuf;
use std::sync::{Condvar, Mutex};
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::hashing::sha256_hex;
use crate::prompt::PromptInstance;
use cache::DiskCache;
pub use mock::{mock_recommend, MockError, MockModelConfig};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum GatewayError {
    /// Network failure or overload; retried, then surfaced.
    #[error("transient provider error: {0}")]
    Transient(String),
    /// Misconfiguration or authentication failure; aborts the run.
    #[error("fatal provider error: {0}")]
    Fatal(String),
    /// Refusal or empty answer; recorded and excluded from aggregation.
    #[error("content error: {0}")]
    Content(String),
    #[error("cache error: {0}")]
    Cache(String),
}

impl GatewayError {
    pub fn is_fatal(&self) -> bool {
        matches!(self, GatewayError::Fatal(_) | GatewayError::Cache(_))
    }

    fn status(&self) -> &'static str {
        match self {
            GatewayError::Transient(_) => "transient_error",
            GatewayError::Fatal(_) => "fatal_error",
            GatewayError::Content(_) => "content_error",
            GatewayError::Cache(_) => "cache_error",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ProviderKind {
    LiveHttp,
    #[default]
    Mock,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetryConfig {
    pub max_attempts: u32,
    pub base_backoff_ms: u64,
    pub max_backoff_ms: u64,
}

impl Default for RetryConfig {
    fn default() -> Self {
        Self {
            max_attempts: 5,
            base_backoff_ms: 500,
            max_backoff_ms: 30_000,
        }
    }
}

impl RetryConfig {
    /// Exponential backoff with ±50% jitter before attempt `attempt + 1`.
    pub fn backoff(&self, attempt: u32, rng: &mut impl Rng) -> Duration {
        let exp = self
            .base_backoff_ms
            .saturating_mul(1u64 << attempt.saturating_sub(1).min(20));
        let capped = exp.min(self.max_backoff_ms) as f64;
        Duration::from_millis((capped * rng.gen_range(0.5..1.5)) as u64)
    }
}

/// Decoding parameters sent with every request. `top_p = None` means the
/// provider default (nucleus sampling is moot under greedy decoding).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct DecodingParams {
    pub temperature: f64,
    pub top_p: Option<f64>,
    pub frequency_penalty: f64,
}

impl DecodingParams {
    fn cache_repr(&self) -> String {
        format!(
            "t={:?};p={:?};f={:?}",
            self.temperature, self.top_p, self.frequency_penalty
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProviderConfig {
    pub kind: ProviderKind,
    pub endpoint: Option<String>,
    pub credential_env_var: String,
    pub temperature: f64,
    pub top_p: Option<f64>,
    pub frequency_penalty: f64,
    pub max_in_flight: usize,
    pub retry: RetryConfig,
    /// Requests per second; unlimited when absent.
    pub rate_limit: Option<f64>,
    pub timeout_secs: u64,
    /// Line-delimited request log.
    pub request_log: Option<PathBuf>,
}

impl Default for ProviderConfig {
    fn default() -> Self {
        Self {
            kind: ProviderKind::Mock,
            endpoint: None,
            credential_env_var: "GEMINI_API_KEY".to_string(),
            temperature: 0.0,
            top_p: None,
            frequency_penalty: 0.0,
            max_in_flight: 4,
            retry: RetryConfig::default(),
            rate_limit: None,
            timeout_secs: 60,
            request_log: None,
        }
    }
}

impl ProviderConfig {
    pub fn validate(&self) -> Result<(), GatewayError> {
        let bad = |m: String| Err(GatewayError::Fatal(m));
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            return bad(format!("temperature {} must be >= 0", self.temperature));
        }
        if let Some(p) = self.top_p {
            if !(p > 0.0 && p <= 1.0) {
                return bad(format!("top_p {p} must be in (0, 1]"));
            }
        }
        if self.max_in_flight == 0 {
            return bad("max_in_flight must be positive".into());
        }
        if self.retry.max_attempts == 0 {
            return bad("retry.max_attempts must be positive".into());
        }
        if let Some(r) = self.rate_limit {
            if !(r > 0.0 && r.is_finite()) {
                return bad(format!("rate_limit {r} must be positive"));
            }
        }
        Ok(())
    }

    pub fn decoding(&self) -> DecodingParams {
        DecodingParams {
            temperature: self.temperature,
            top_p: self.top_p,
            frequency_penalty: self.frequency_penalty,
        }
    }
}

/// Something that turns a prompt into raw text.
pub trait Backend: Send + Sync {
    fn provider_tag(&self) -> String;
    fn generate(
        &self,
        instance: &PromptInstance,
        sample_index: u32,
        decoding: &DecodingParams,
    ) -> Result<String, GatewayError>;
}

pub struct MockBackend {
    config: MockModelConfig,
}

impl MockBackend {
    pub fn new(config: MockModelConfig) -> Result<Self, GatewayError> {
        config
            .validate()
            .map_err(|e| GatewayError::Fatal(e.to_string()))?;
        Ok(Self { config })
    }
}

impl Backend for MockBackend {
    fn provider_tag(&self) -> String {
        self.config.provider_tag()
    }

    fn generate(
        &self,
        instance: &PromptInstance,
        sample_index: u32,
        _decoding: &DecodingParams,
    ) -> Result<String, GatewayError> {
        mock_recommend(instance, &self.config, sample_index)
            .map_err(|e| GatewayError::Fatal(e.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Completion {
    pub instance_id: String,
    pub sample_index: u32,
    pub raw_text: String,
    #[serde(with = "duration_ms")]
    pub latency: Duration,
    pub from_cache: bool,
    pub provider_tag: String,
}

mod duration_ms {
    use serde::{Deserialize, Deserializer, Serializer};
    use std::time::Duration;

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u64(d.as_millis() as u64)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        u64::deserialize(d).map(Duration::from_millis)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RequestLogEntry {
    /// Unix time in milliseconds at which the attempt was sent.
    pub timestamp_ms: u128,
    pub instance_id: String,
    pub sample_index: u32,
    pub attempt: u32,
    pub status: String,
    pub latency_ms: u128,
}

#[derive(Debug, Default, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GatewayStats {
    pub requests: u64,
    pub cache_hits: u64,
    pub retries: u64,
    pub content_errors: u64,
    pub peak_in_flight: usize,
}

struct InFlight {
    count: Mutex<usize>,
    cv: Condvar,
    max: usize,
}

impl InFlight {
    fn acquire(&self) -> usize {
        let mut n = self.count.lock().unwrap();
        while *n >= self.max {
            n = self.cv.wait(n).unwrap();
        }
        *n += 1;
        *n
    }

    fn release(&self) {
        *self.count.lock().unwrap() -= 1;
        self.cv.notify_one();
    }
}

/// Spaces request starts at least `1 / rate` seconds apart.
struct RateLimiter {
    interval: Option<Duration>,
    next: Mutex<Option<Instant>>,
}

impl RateLimiter {
    fn wait(&self) {
        let Some(interval) = self.interval else {
            return;
        };
        let slot = {
            let mut next = self.next.lock().unwrap();
            let now = Instant::now();
            let slot = next.map_or(now, |t| t.max(now));
            *next = Some(slot + interval);
            slot
        };
        let now = Instant::now();
        if slot > now {
            std::thread::sleep(slot - now);
        }
    }
}

/// Shared dispatcher. Safe to call from many threads at once.
pub struct Gateway {
    config: ProviderConfig,
    backend: Box<dyn Backend>,
    tag: String,
    cache: Option<DiskCache>,
    limiter: RateLimiter,
    in_flight: InFlight,
    log: Mutex<Vec<RequestLogEntry>>,
    log_file: Option<Mutex<File>>,
    stats: Mutex<GatewayStats>,
}

impl Gateway {
    /// Builds the backend named by `config.kind`. A live provider fails here,
    /// before any request, when its credential variable is unset.
    pub fn new(
        config: ProviderConfig,
        mock: Option<MockModelConfig>,
        cache_dir: Option<PathBuf>,
    ) -> Result<Self, GatewayError> {
        config.validate()?;
        let backend: Box<dyn Backend> = match config.kind {
            ProviderKind::Mock => {
                let mock = mock.ok_or_else(|| {
                    GatewayError::Fatal("mock provider needs a [mock] config".into())
                })?;
                Box::new(MockBackend::new(mock)?)
            }
            ProviderKind::LiveHttp => {
                let key = std::env::var(&config.credential_env_var)
                    .ok()
                    .filter(|k| !k.trim().is_empty())
                    .ok_or_else(|| {
                        GatewayError::Fatal(format!(
                            "credential variable {} is not set",
                            config.credential_env_var
                        ))
                    })?;
                let endpoint = config
                    .endpoint
                    .clone()
                    .unwrap_or_else(|| http::DEFAULT_GEMINI_ENDPOINT.to_string());
                Box::new(http::GeminiBackend::new(
                    endpoint,
                    key,
                    Duration::from_secs(config.timeout_secs),
                ))
            }
        };
        Self::with_backend(config, backend, cache_dir)
    }

    pub fn with_backend(
        config: ProviderConfig,
        backend: Box<dyn Backend>,
        cache_dir: Option<PathBuf>,
    ) -> Result<Self, GatewayError> {
        config.validate()?;
        let cache = cache_dir
            .map(DiskCache::open)
            .transpose()
            .map_err(|e| GatewayError::Cache(e.to_string()))?;
        let log_file = config
            .request_log
            .as_ref()
            .map(|p| {
                std::fs::OpenOptions::new()
                    .create(true)
                    .append(true)
                    .open(p)
                    .map(Mutex::new)
            })
            .transpose()
            .map_err(|e| GatewayError::Fatal(format!("cannot open request log: {e}")))?;
        let tag = backend.provider_tag();
        Ok(Self {
            limiter: RateLimiter {
                interval: config.rate_limit.map(|r| Duration::from_secs_f64(1.0 / r)),
                next: Mutex::new(None),
            },
            in_flight: InFlight {
                count: Mutex::new(0),
                cv: Condvar::new(),
                max: config.max_in_flight,
            },
            config,
            backend,
            tag,
            cache,
            log: Mutex::new(Vec::new()),
            log_file,
            stats: Mutex::new(GatewayStats::default()),
        })
    }

    pub fn provider_tag(&self) -> &str {
        &self.tag
    }

    pub fn config(&self) -> &ProviderConfig {
        &self.config
    }

    pub fn stats(&self) -> GatewayStats {
        *self.stats.lock().unwrap()
    }

    pub fn request_log(&self) -> Vec<RequestLogEntry> {
        self.log.lock().unwrap().clone()
    }

    /// Key = hash(provider tag, decoding params, prompt text, sample index).
    pub fn cache_key(
        &self,
        instance: &PromptInstance,
        sample_index: u32,
        decoding: &DecodingParams,
    ) -> String {
        cache_key(&self.tag, decoding, &instance.rendered_text, sample_index)
    }

    pub fn complete(
        &self,
        instance: &PromptInstance,
        sample_index: u32,
    ) -> Result<Completion, GatewayError> {
        self.complete_with(instance, sample_index, &self.config.decoding())
    }

    /// Like [`Gateway::complete`] with explicit decoding parameters, e.g. a
    /// temperature override for uncertainty sampling.
    pub fn complete_with(
        &self,
        instance: &PromptInstance,
        sample_index: u32,
        decoding: &DecodingParams,
    ) -> Result<Completion, GatewayError> {
        let instance_id = instance.id();
        let key = self.cache_key(instance, sample_index, decoding);
        // Under greedy decoding every sample repeats sample 0.
        let cacheable = !(decoding.temperature == 0.0 && sample_index > 0);
        if let (Some(cache), true) = (&self.cache, cacheable) {
            let started = Instant::now();
            if let Some(text) = cache
                .get(&key)
                .map_err(|e| GatewayError::Cache(e.to_string()))?
            {
                self.stats.lock().unwrap().cache_hits += 1;
                return Ok(Completion {
                    instance_id,
                    sample_index,
                    raw_text: text,
                    latency: started.elapsed(),
                    from_cache: true,
                    provider_tag: self.tag.clone(),
                });
            }
        }

        let mut rng = rand::thread_rng();
        let mut attempt = 0;
        let (text, latency) = loop {
            attempt += 1;
            let outcome = self.attempt(instance, sample_index, attempt, decoding);
            match outcome {
                Ok(done) => break done,
                Err(GatewayError::Transient(msg)) if attempt < self.config.retry.max_attempts => {
                    self.stats.lock().unwrap().retries += 1;
                    let _ = msg;
                    std::thread::sleep(self.config.retry.backoff(attempt, &mut rng));
                }
                Err(GatewayError::Transient(msg)) => {
                    return Err(GatewayError::Transient(format!(
                        "{msg} (after {attempt} attempts)"
                    )));
                }
                Err(e @ GatewayError::Content(_)) => {
                    self.stats.lock().unwrap().content_errors += 1;
                    return Err(e);
                }
                Err(e) => return Err(e),
            }
        };

        if let (Some(cache), true) = (&self.cache, cacheable) {
            cache
                .put(&key, &self.tag, &instance_id, sample_index, &text)
                .map_err(|e| GatewayError::Cache(e.to_string()))?;
        }
        Ok(Completion {
            instance_id,
            sample_index,
            raw_text: text,
            latency,
            from_cache: false,
            provider_tag: self.tag.clone(),
        })
    }

    fn attempt(
        &self,
        instance: &PromptInstance,
        sample_index: u32,
        attempt: u32,
        decoding: &DecodingParams,
    ) -> Result<(String, Duration), GatewayError> {
        let now = self.in_flight.acquire();
        {
            let mut s = self.stats.lock().unwrap();
            s.peak_in_flight = s.peak_in_flight.max(now);
        }
        self.limiter.wait();
        let sent_at = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .unwrap_or_default()
            .as_millis();
        let started = Instant::now();
        let result = self.backend.generate(instance, sample_index, decoding);
        let latency = started.elapsed();
        self.in_flight.release();
        self.stats.lock().unwrap().requests += 1;

        let entry = RequestLogEntry {
            timestamp_ms: sent_at,
            instance_id: instance.sample_id(sample_index),
            sample_index,
            attempt,
            status: match &result {
                Ok(_) => "ok".to_string(),
                Err(e) => e.status().to_string(),
            },
            latency_ms: latency.as_millis(),
        };
        if let Some(f) = &self.log_file {
            let line = serde_json::to_string(&entry).expect("log entry serializes");
            let mut f = f.lock().unwrap();
            writeln!(f, "{line}")
                .map_err(|e| GatewayError::Fatal(format!("request log write failed: {e}")))?;
        }
        self.log.lock().unwrap().push(entry);
        result.map(|t| (t, latency))
    }

    /// `n` samples of one prompt; each carries its own outcome.
    pub fn sample_n(
        &self,
        instance: &PromptInstance,
        n: u32,
        decoding: &DecodingParams,
    ) -> Vec<Result<Completion, GatewayError>> {
        (0..n.max(1))
            .map(|s| self.complete_with(instance, s, decoding))
            .collect()
    }
}

pub fn cache_key(
    provider_tag: &str,
    decoding: &DecodingParams,
    rendered_text: &str,
    sample_index: u32,
) -> String {
    sha256_hex(&[
        provider_tag.as_bytes(),
        decoding.cache_repr().as_bytes(),
        rendered_text.as_bytes(),
        &sample_index.to_le_bytes(),
    ])
}
