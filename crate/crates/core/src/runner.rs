//! End-to-end audit: enumerate prompts, dispatch, parse, score, aggregate
//! and write the report bundle.
//!
//! Bundle files, all written to a staging directory and moved into
//! `output_dir` only when the run succeeds:
//!
//! | file              | written when            |
//! |-------------------|-------------------------|
//! | `similarities.csv`| always                  |
//! | `summary.csv`     | always                  |
//! | `ranking.txt`     | at least one metric     |
//! | `k_sweep.csv`     | `ks_sweep` is set       |
//! | `robustness.csv`  | perturbations are set   |
//! | `entropy.csv`     | `samples_n > 1`         |
//! | `prompts.jsonl`   | always                  |
//! | `requests.jsonl`  | always (provider calls) |
//! | `manifest.json`   | always                  |

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::catalog::{
    load_anchors, load_attribute_overrides, AnchorSet, AttributeRegistry, CatalogError, Domain,
    PersonalityProfileSet, SensitiveAttribute,
};
use crate::fairness::{
    pafs_table, rank_attributes_by_snsv, summarize_attribute, AggregationMode, AttributeSummary,
    ExclusionReason, FairnessSummary, PersonalityRow, ScoreKind, SimilarityRow, SimilarityTable,
};
use crate::gateway::{
    Completion, DecodingParams, Gateway, GatewayError, GatewayStats, MockModelConfig,
    ProviderConfig,
};
use crate::hashing::sha256_hex;
use crate::metrics::{similarity, MetricKind};
use crate::parser::{parse_list, RankedList};
use crate::prompt::{
    enumerate_batch, BatchConfig, Condition, Language, Perturbation, PerturbationSpec, PromptBatch,
    PromptError, PromptInstance, PromptRenderer, Templates, TranslationTable,
};
use crate::uncertainty::{predictive_entropy, EntropyReport, SampleSet};

/// Pseudo-attribute under which profile-only prompts are reported.
pub const PERSONALITY_ATTRIBUTE: &str = "Personality";

fn default_k() -> usize {
    25
}

fn default_metrics() -> Vec<MetricKind> {
    MetricKind::ALL.to_vec()
}

fn default_pafs_metric() -> MetricKind {
    MetricKind::Jaccard
}

fn default_samples() -> u32 {
    1
}

fn default_uncertainty_temperature() -> f64 {
    1.0
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("audit-out")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub domain: Domain,
    pub anchors_path: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attribute_overrides_path: Option<PathBuf>,
    /// Restricts the registry to these attributes, in registry order.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attributes: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub personality_profiles: Option<PersonalityProfileSet>,
    /// Similarity underlying PAFS.
    #[serde(default = "default_pafs_metric")]
    pub pafs_metric: MetricKind,
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ks_sweep: Option<Vec<usize>>,
    #[serde(default = "default_metrics")]
    pub metrics: Vec<MetricKind>,
    #[serde(default)]
    pub provider: ProviderConfig,
    /// Defaults to an unbiased mock seeded with `seed`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mock: Option<MockModelConfig>,
    #[serde(default)]
    pub perturbations: Vec<PerturbationSpec>,
    /// Extra English-to-French value translations.
    #[serde(default)]
    pub translations: BTreeMap<String, String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub templates: Option<Templates>,
    #[serde(default = "default_samples")]
    pub samples_n: u32,
    /// Decoding temperature for uncertainty samples.
    #[serde(default = "default_uncertainty_temperature")]
    pub uncertainty_temperature: f64,
    #[serde(default)]
    pub aggregation_mode: AggregationMode,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cache_dir: Option<PathBuf>,
}

impl RunConfig {
    /// A mock-provider config with defaults everywhere else.
    pub fn new(
        domain: Domain,
        anchors_path: impl Into<PathBuf>,
        output_dir: impl Into<PathBuf>,
    ) -> Self {
        Self {
            domain,
            anchors_path: anchors_path.into(),
            attribute_overrides_path: None,
            attributes: None,
            personality_profiles: None,
            pafs_metric: default_pafs_metric(),
            k: default_k(),
            ks_sweep: None,
            metrics: default_metrics(),
            provider: ProviderConfig::default(),
            mock: Some(MockModelConfig::unbiased(0)),
            perturbations: Vec::new(),
            translations: BTreeMap::new(),
            templates: None,
            samples_n: default_samples(),
            uncertainty_temperature: default_uncertainty_temperature(),
            aggregation_mode: AggregationMode::default(),
            seed: 0,
            output_dir: output_dir.into(),
            cache_dir: None,
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self, RunError> {
        toml::from_str(text).map_err(|e| RunError::Config(e.message().to_string()))
    }

    /// Loads a TOML config; relative paths resolve against the file's directory.
    pub fn from_toml_file(path: impl AsRef<Path>) -> Result<Self, RunError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)
            .map_err(|e| RunError::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = toml::from_str::<Self>(&text)
            .map_err(|e| RunError::Config(format!("{}: {}", path.display(), e.message())))?;
        if let Some(base) = path.parent() {
            cfg.resolve_paths(base);
        }
        Ok(cfg)
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.anchors_path);
        fix(&mut self.output_dir);
        if let Some(p) = &mut self.attribute_overrides_path {
            fix(p);
        }
        if let Some(p) = &mut self.cache_dir {
            fix(p);
        }
        if let Some(p) = &mut self.provider.request_log {
            fix(p);
        }
    }

    pub fn validate(&self) -> Result<(), RunError> {
        let bad = |m: String| Err(RunError::Config(m));
        if self.k == 0 {
            return bad("k must be at least 1".into());
        }
        if let Some(ks) = &self.ks_sweep {
            if ks.is_empty() {
                return bad("ks_sweep is empty".into());
            }
            if let Some(&bad_k) = ks.iter().find(|&&x| x == 0 || x > self.k) {
                return bad(format!("ks_sweep value {bad_k} outside 1..={}", self.k));
            }
        }
        if self.samples_n == 0 {
            return bad("samples_n must be at least 1".into());
        }
        if !(self.uncertainty_temperature >= 0.0 && self.uncertainty_temperature.is_finite()) {
            return bad(format!(
                "uncertainty_temperature {} must be >= 0",
                self.uncertainty_temperature
            ));
        }
        let mut seen = Vec::new();
        for m in &self.metrics {
            if seen.contains(m) {
                return bad(format!("metric {m} listed twice"));
            }
            seen.push(*m);
        }
        self.provider
            .validate()
            .map_err(|e| RunError::Config(e.to_string()))?;
        if let Some(m) = &self.mock {
            m.validate().map_err(|e| RunError::Config(e.to_string()))?;
        }
        Ok(())
    }

    fn snapshot_hash(&self) -> String {
        sha256_hex(&[&serde_json::to_vec(self).expect("config serializes")])
    }
}

#[derive(Debug, thiserror::Error)]
pub enum RunError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error(transparent)]
    Catalog(#[from] CatalogError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error("output error: {0}")]
    Output(#[from] std::io::Error),
}

impl RunError {
    /// Process exit code for the CLI.
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Config(_) | RunError::Catalog(_) | RunError::Prompt(_) => 2,
            RunError::Gateway(_) => 3,
            RunError::Output(_) => 4,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            RunError::Config(_) => "config",
            RunError::Catalog(_) => "catalog",
            RunError::Prompt(_) => "prompt",
            RunError::Gateway(_) => "provider",
            RunError::Output(_) => "output",
        }
    }
}

/// One perturbed-vs-baseline comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobustnessRow {
    pub metric: MetricKind,
    pub k: usize,
    pub attribute: String,
    pub value: String,
    /// `typo:delete@4`, `fr`, ...
    pub variant: String,
    pub variant_text: String,
    pub baseline_mean: Option<f64>,
    pub variant_mean: Option<f64>,
    pub n_anchors: usize,
}

impl RobustnessRow {
    pub fn delta(&self) -> Option<f64> {
        Some(self.variant_mean? - self.baseline_mean?)
    }
}

/// Mean similarity at one truncation cutoff.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KSweepRow {
    pub metric: MetricKind,
    pub k: usize,
    pub attribute: String,
    pub value: String,
    pub mean_similarity: Option<f64>,
    pub n_anchors: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub code_version: String,
    pub started_at_ms: u128,
    pub finished_at_ms: u128,
    pub config: RunConfig,
    pub templates: Templates,
    pub registry: Vec<SensitiveAttribute>,
    pub provider_tag: String,
    pub anchors: usize,
    pub prompts: usize,
    pub prompt_batch_hash: String,
    pub content_errors: usize,
    pub parse_failures: usize,
    pub exclusion_counts: BTreeMap<String, usize>,
    pub gateway: GatewayStats,
    pub outputs: Vec<String>,
    pub notes: Vec<String>,
    pub warnings: Vec<String>,
    /// Hash of config, templates, registry, provider tag and prompt batch.
    pub manifest_hash: String,
}

/// In-memory results of a finished run.
#[derive(Debug, Clone)]
pub struct RunReport {
    pub output_dir: PathBuf,
    pub table: SimilarityTable,
    pub summary: FairnessSummary,
    pub ranking: Option<(ScoreKind, Vec<String>)>,
    pub k_sweep: Vec<KSweepRow>,
    pub robustness: Vec<RobustnessRow>,
    pub entropy: Vec<EntropyReport>,
    pub manifest: RunManifest,
}

type Outcome = Result<RankedList, ExclusionReason>;

struct Job {
    instance: usize,
    sample_index: u32,
    uncertainty: bool,
}

fn now_ms() -> u128 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .unwrap_or_default()
        .as_millis()
}

/// Runs one audit. On error nothing is left behind in `output_dir`.
pub fn run_audit(config: &RunConfig) -> Result<RunReport, RunError> {
    let started_at_ms = now_ms();
    config.validate()?;

    let Prepared {
        anchors,
        registry,
        renderer,
        batch,
    } = prepare_batch(config)?;

    fs::create_dir_all(&config.output_dir)?;
    let staging = Staging::new(&config.output_dir)?;
    let mut provider = config.provider.clone();
    if provider.request_log.is_none() {
        provider.request_log = Some(staging.path("requests.jsonl"));
    }
    let mock = config
        .mock
        .clone()
        .unwrap_or_else(|| MockModelConfig::unbiased(config.seed));
    let gateway = Gateway::new(provider, Some(mock), config.cache_dir.clone())?;

    let greedy = config.provider.decoding();
    let uncertain = DecodingParams {
        temperature: config.uncertainty_temperature,
        ..greedy
    };
    let jobs = plan_jobs(&batch, config.samples_n, greedy == uncertain);
    let completions = dispatch(&gateway, &batch.instances, &jobs, &greedy, &uncertain)?;

    let mut content_errors = 0;
    let mut parse_failures = 0;
    let mut fairness: Vec<Option<Outcome>> = vec![None; batch.len()];
    let mut samples: Vec<Vec<Outcome>> = vec![Vec::new(); batch.len()];
    for (job, result) in jobs.iter().zip(completions) {
        let outcome = match result {
            Ok(c) => match parse_list(&c.raw_text, batch.instances[job.instance].k) {
                Ok((list, _)) => Ok(list.with_source(c.instance_id)),
                Err(_) => {
                    parse_failures += 1;
                    Err(ExclusionReason::EmptyParse)
                }
            },
            Err(GatewayError::Content(_)) => {
                content_errors += 1;
                Err(ExclusionReason::ContentError)
            }
            Err(e) => return Err(e.into()),
        };
        if job.uncertainty {
            samples[job.instance].push(outcome);
        } else {
            if greedy == uncertain && config.samples_n > 1 {
                samples[job.instance].push(outcome.clone());
            }
            fairness[job.instance] = Some(outcome);
        }
    }

    let mut notes = Vec::new();
    let mut warnings = Vec::new();
    let scored = score(config, &batch.instances, &fairness);
    let mut table = scored.table;

    let mut summary = FairnessSummary::default();
    for &m in &config.metrics {
        for attr in registry.attributes() {
            push_summary(
                &mut summary,
                &mut warnings,
                summarize_attribute(
                    &table,
                    ScoreKind::Similarity(m),
                    config.k,
                    attr,
                    config.aggregation_mode,
                ),
            );
        }
    }
    if config.personality_profiles.is_some() {
        for attr in registry.attributes() {
            match pafs_table(&scored.personality, config.pafs_metric, config.k, attr) {
                Ok(rows) => {
                    let pafs_rows = SimilarityTable { rows };
                    push_summary(
                        &mut summary,
                        &mut warnings,
                        summarize_attribute(
                            &pafs_rows,
                            ScoreKind::Pafs,
                            config.k,
                            attr,
                            config.aggregation_mode,
                        ),
                    );
                    table.extend(pafs_rows.rows);
                }
                Err(e) => warnings.push(format!("{}: {e}", attr.name)),
            }
        }
    }
    table.sort();

    let ranking = ranking_metric(&config.metrics).map(|m| {
        let kind = ScoreKind::Similarity(m);
        (kind, rank_attributes_by_snsv(&summary, kind, config.k))
    });
    if ranking.is_none() {
        notes.push("ranking.txt omitted: no similarity metric selected".to_string());
    }

    let k_sweep = config
        .ks_sweep
        .as_ref()
        .map(|ks| k_sweep_rows(&scored.sweep, &registry, &config.metrics, ks))
        .unwrap_or_default();
    let robustness = if config.perturbations.is_empty() {
        Vec::new()
    } else {
        robustness_rows(&table, &scored.perturbed, &config.metrics, config.k)
    };
    let entropy = if config.samples_n > 1 {
        entropy_reports(&batch.instances, &samples, &mut warnings)
    } else {
        Vec::new()
    };

    let mut exclusion_counts: BTreeMap<String, usize> = BTreeMap::new();
    for (reason, n) in table.exclusion_counts() {
        *exclusion_counts.entry(reason.to_string()).or_insert(0) += n;
    }

    let domain = config.domain.as_str();
    let mut outputs = Vec::new();
    let mut emit = |name: &str, bytes: Vec<u8>| -> Result<(), RunError> {
        fs::write(staging.path(name), bytes)?;
        outputs.push(name.to_string());
        Ok(())
    };
    emit("similarities.csv", similarities_csv(domain, &table)?)?;
    emit("summary.csv", summary_csv(domain, &summary)?)?;
    if let Some((kind, order)) = &ranking {
        emit(
            "ranking.txt",
            ranking_txt(domain, *kind, config.k, order, &summary).into_bytes(),
        )?;
    }
    if config.ks_sweep.is_some() {
        emit("k_sweep.csv", k_sweep_csv(domain, &k_sweep)?)?;
    }
    if !config.perturbations.is_empty() {
        emit("robustness.csv", robustness_csv(domain, &robustness)?)?;
    }
    if config.samples_n > 1 {
        emit("entropy.csv", entropy_csv(&entropy)?)?;
    }
    emit(
        "prompts.jsonl",
        batch.manifest_jsonl(config.samples_n).into_bytes(),
    )?;

    let manifest_hash = sha256_hex(&[
        config.snapshot_hash().as_bytes(),
        &serde_json::to_vec(renderer.templates()).expect("templates serialize"),
        &serde_json::to_vec(registry.attributes()).expect("registry serializes"),
        gateway.provider_tag().as_bytes(),
        batch.manifest_hash.as_bytes(),
    ]);
    let logged_elsewhere = config.provider.request_log.is_some();
    if !logged_elsewhere {
        outputs.push("requests.jsonl".to_string());
    }
    outputs.push("manifest.json".to_string());
    let manifest = RunManifest {
        code_version: env!("CARGO_PKG_VERSION").to_string(),
        started_at_ms,
        finished_at_ms: now_ms(),
        config: config.clone(),
        templates: renderer.templates().clone(),
        registry: registry.attributes().to_vec(),
        provider_tag: gateway.provider_tag().to_string(),
        anchors: anchors.len(),
        prompts: batch.len(),
        prompt_batch_hash: batch.manifest_hash.clone(),
        content_errors,
        parse_failures,
        exclusion_counts,
        gateway: gateway.stats(),
        outputs,
        notes,
        warnings,
        manifest_hash,
    };
    let mut json = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
    json.push(b'\n');
    fs::write(staging.path("manifest.json"), json)?;
    drop(gateway);
    staging.commit(&manifest.outputs)?;

    Ok(RunReport {
        output_dir: config.output_dir.clone(),
        table,
        summary,
        ranking,
        k_sweep,
        robustness,
        entropy,
        manifest,
    })
}

/// Loaded inputs and the enumerated prompt batch of a config.
pub struct Prepared {
    pub anchors: AnchorSet,
    pub registry: AttributeRegistry,
    pub renderer: PromptRenderer,
    pub batch: PromptBatch,
}

/// Loads anchors and the registry and enumerates the prompt batch.
pub fn prepare_batch(config: &RunConfig) -> Result<Prepared, RunError> {
    let anchors = load_anchors(&config.anchors_path, config.domain)?;
    let registry = build_registry(config)?;
    let renderer = PromptRenderer::new(config.templates.clone().unwrap_or_default())?;
    let batch_cfg = BatchConfig {
        k: config.k,
        profiles: config.personality_profiles.clone(),
        personality_cross_values: config.personality_profiles.is_some(),
        perturbations: config.perturbations.clone(),
        seed: config.seed,
        renderer: renderer.clone(),
        translations: TranslationTable::builtin().with_overrides(&config.translations),
    };
    let batch = enumerate_batch(Some(&anchors), &registry, &batch_cfg)?;
    Ok(Prepared {
        anchors,
        registry,
        renderer,
        batch,
    })
}

fn build_registry(config: &RunConfig) -> Result<AttributeRegistry, RunError> {
    let mut registry = AttributeRegistry::builtin();
    if let Some(path) = &config.attribute_overrides_path {
        registry.apply_overrides(load_attribute_overrides(path)?)?;
    }
    if let Some(names) = &config.attributes {
        if let Some(missing) = names.iter().find(|n| registry.get(n).is_none()) {
            return Err(RunError::Config(format!("unknown attribute `{missing}`")));
        }
        registry.retain(names);
    }
    if registry.get(PERSONALITY_ATTRIBUTE).is_some() && config.personality_profiles.is_some() {
        return Err(RunError::Config(format!(
            "attribute name `{PERSONALITY_ATTRIBUTE}` is reserved when personality profiles are set"
        )));
    }
    Ok(registry)
}

fn push_summary(
    summary: &mut FairnessSummary,
    warnings: &mut Vec<String>,
    result: Result<AttributeSummary, crate::fairness::FairnessError>,
) {
    match result {
        Ok(s) => summary.entries.push(s),
        Err(e) => warnings.push(e.to_string()),
    }
}

fn ranking_metric(metrics: &[MetricKind]) -> Option<MetricKind> {
    if metrics.contains(&MetricKind::PragStar) {
        Some(MetricKind::PragStar)
    } else {
        metrics.first().copied()
    }
}

fn plan_jobs(batch: &PromptBatch, samples_n: u32, shared_decoding: bool) -> Vec<Job> {
    let mut jobs = Vec::new();
    for i in 0..batch.len() {
        jobs.push(Job {
            instance: i,
            sample_index: 0,
            uncertainty: false,
        });
        if samples_n > 1 {
            // sample 0 is the fairness completion when decoding is shared
            let first = u32::from(shared_decoding);
            for s in first..samples_n {
                jobs.push(Job {
                    instance: i,
                    sample_index: s,
                    uncertainty: true,
                });
            }
        }
    }
    jobs
}

/// Runs every job, `max_in_flight` at a time. Stops at the first fatal or
/// retry-exhausted error.
fn dispatch(
    gateway: &Gateway,
    instances: &[PromptInstance],
    jobs: &[Job],
    greedy: &DecodingParams,
    uncertain: &DecodingParams,
) -> Result<Vec<Result<Completion, GatewayError>>, GatewayError> {
    let next = AtomicUsize::new(0);
    let abort = AtomicBool::new(false);
    let failure: Mutex<Option<GatewayError>> = Mutex::new(None);
    let workers = gateway.config().max_in_flight.min(jobs.len()).max(1);

    let parts: Vec<Vec<(usize, Result<Completion, GatewayError>)>> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..workers)
            .map(|_| {
                let (next, abort, failure) = (&next, &abort, &failure);
                s.spawn(move || {
                    let mut out = Vec::new();
                    while !abort.load(Ordering::Relaxed) {
                        let i = next.fetch_add(1, Ordering::Relaxed);
                        let Some(job) = jobs.get(i) else { break };
                        let decoding = if job.uncertainty { uncertain } else { greedy };
                        match gateway.complete_with(
                            &instances[job.instance],
                            job.sample_index,
                            decoding,
                        ) {
                            Err(e) if !matches!(e, GatewayError::Content(_)) => {
                                abort.store(true, Ordering::Relaxed);
                                failure.lock().unwrap().get_or_insert(e);
                                break;
                            }
                            r => out.push((i, r)),
                        }
                    }
                    out
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("dispatch worker panicked"))
            .collect()
    });
    if let Some(e) = failure.into_inner().unwrap() {
        return Err(e);
    }
    let mut slots: Vec<Option<Result<Completion, GatewayError>>> =
        (0..jobs.len()).map(|_| None).collect();
    for (i, r) in parts.into_iter().flatten() {
        slots[i] = Some(r);
    }
    Ok(slots
        .into_iter()
        .map(|s| s.expect("every job completes when no worker aborted"))
        .collect())
}

struct Perturbed {
    metric: MetricKind,
    attribute: String,
    original: String,
    variant: String,
    variant_text: String,
    similarity: Option<f64>,
}

struct Scored {
    table: SimilarityTable,
    sweep: SimilarityTable,
    personality: Vec<PersonalityRow>,
    perturbed: Vec<Perturbed>,
}

fn score_pair(
    reference: Option<&Outcome>,
    candidate: &Outcome,
    metric: MetricKind,
    k: usize,
) -> Result<f64, ExclusionReason> {
    let cand = candidate.as_ref().map_err(|e| *e)?;
    let Some(Ok(reference)) = reference else {
        return Err(ExclusionReason::ReferenceUnavailable);
    };
    similarity(metric, reference.items(), cand.items(), k)
        .map(|s| s.value)
        .ok_or(ExclusionReason::UndefinedMetric)
}

fn row(
    anchor: &str,
    attribute: &str,
    value: &str,
    metric: MetricKind,
    k: usize,
    r: Result<f64, ExclusionReason>,
) -> SimilarityRow {
    let kind = ScoreKind::Similarity(metric);
    match r {
        Ok(s) => SimilarityRow::scored(anchor, attribute, value, kind, k, s),
        Err(e) => SimilarityRow::excluded(anchor, attribute, value, kind, k, e),
    }
}

fn score(config: &RunConfig, instances: &[PromptInstance], fairness: &[Option<Outcome>]) -> Scored {
    let missing: Outcome = Err(ExclusionReason::ContentError);
    let outcome = |i: usize| fairness[i].as_ref().unwrap_or(&missing);
    let mut neutral: HashMap<(&str, Language), &Outcome> = HashMap::new();
    for (i, inst) in instances.iter().enumerate() {
        if inst.is_neutral() {
            neutral.insert((inst.anchor.as_str(), inst.language), outcome(i));
        }
    }

    let k = config.k;
    let mut out = Scored {
        table: SimilarityTable::default(),
        sweep: SimilarityTable::default(),
        personality: Vec::new(),
        perturbed: Vec::new(),
    };
    for (i, inst) in instances.iter().enumerate() {
        let cand = outcome(i);
        let reference = neutral.get(&(inst.anchor.as_str(), inst.language)).copied();
        let anchor = inst.anchor.as_str();
        match (&inst.condition, &inst.perturbation) {
            (Condition::Neutral, _) | (Condition::Intersectional { .. }, _) => {}
            (Condition::Sensitive(av), Perturbation::None) => {
                for &m in &config.metrics {
                    out.table.push(row(
                        anchor,
                        &av.attribute,
                        &av.value,
                        m,
                        k,
                        score_pair(reference, cand, m, k),
                    ));
                }
                for &sk in config.ks_sweep.iter().flatten() {
                    for &m in &config.metrics {
                        out.sweep.push(row(
                            anchor,
                            &av.attribute,
                            &av.value,
                            m,
                            sk,
                            score_pair(reference, cand, m, sk),
                        ));
                    }
                }
            }
            (Condition::Sensitive(av), p) => {
                let original = p.original().unwrap_or(&av.value).to_string();
                for &m in &config.metrics {
                    out.perturbed.push(Perturbed {
                        metric: m,
                        attribute: av.attribute.clone(),
                        original: original.clone(),
                        variant: p.label(inst.language),
                        variant_text: av.value.clone(),
                        similarity: score_pair(reference, cand, m, k).ok(),
                    });
                }
            }
            (
                Condition::Personality {
                    profile,
                    value: None,
                },
                _,
            ) => {
                for &m in &config.metrics {
                    out.table.push(row(
                        anchor,
                        PERSONALITY_ATTRIBUTE,
                        profile,
                        m,
                        k,
                        score_pair(reference, cand, m, k),
                    ));
                }
            }
            (
                Condition::Personality {
                    profile,
                    value: Some(av),
                },
                _,
            ) => {
                out.personality.push(PersonalityRow {
                    anchor: anchor.to_string(),
                    attribute: av.attribute.clone(),
                    value: av.value.clone(),
                    profile: profile.clone(),
                    metric: config.pafs_metric,
                    k,
                    similarity: score_pair(reference, cand, config.pafs_metric, k).ok(),
                });
            }
        }
    }
    out
}

fn mean(xs: &[f64]) -> Option<f64> {
    (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
}

fn k_sweep_rows(
    sweep: &SimilarityTable,
    registry: &AttributeRegistry,
    metrics: &[MetricKind],
    ks: &[usize],
) -> Vec<KSweepRow> {
    let mut grouped: HashMap<(MetricKind, usize, &str, &str), Vec<f64>> = HashMap::new();
    for r in &sweep.rows {
        let ScoreKind::Similarity(m) = r.metric else {
            continue;
        };
        let e = grouped.entry((m, r.k, &r.attribute, &r.value)).or_default();
        if let Some(s) = r.similarity {
            e.push(s);
        }
    }
    let mut ks_sorted = ks.to_vec();
    ks_sorted.sort_unstable();
    ks_sorted.dedup();
    let mut rows = Vec::new();
    for &m in metrics {
        for &k in &ks_sorted {
            for attr in registry.attributes() {
                for value in &attr.values {
                    let sims = grouped
                        .get(&(m, k, attr.name.as_str(), value.as_str()))
                        .map(Vec::as_slice)
                        .unwrap_or(&[]);
                    rows.push(KSweepRow {
                        metric: m,
                        k,
                        attribute: attr.name.clone(),
                        value: value.clone(),
                        mean_similarity: mean(sims),
                        n_anchors: sims.len(),
                    });
                }
            }
        }
    }
    rows.sort_by(|a, b| {
        (a.metric.as_str(), a.k, &a.attribute, &a.value).cmp(&(
            b.metric.as_str(),
            b.k,
            &b.attribute,
            &b.value,
        ))
    });
    rows
}

fn robustness_rows(
    table: &SimilarityTable,
    perturbed: &[Perturbed],
    metrics: &[MetricKind],
    k: usize,
) -> Vec<RobustnessRow> {
    let mut baseline: HashMap<(MetricKind, &str, &str), Vec<f64>> = HashMap::new();
    for r in &table.rows {
        if let (ScoreKind::Similarity(m), Some(s)) = (r.metric, r.similarity) {
            if r.k == k {
                baseline
                    .entry((m, &r.attribute, &r.value))
                    .or_default()
                    .push(s);
            }
        }
    }
    let mut variants: BTreeMap<(&str, &str, &str, &str, &str), Vec<f64>> = BTreeMap::new();
    for p in perturbed {
        let e = variants
            .entry((
                p.metric.as_str(),
                &p.attribute,
                &p.original,
                &p.variant,
                &p.variant_text,
            ))
            .or_default();
        if let Some(s) = p.similarity {
            e.push(s);
        }
    }
    let mut rows = Vec::new();
    for ((metric, attribute, value, variant, text), sims) in variants {
        let metric: MetricKind = metric.parse().expect("metric names round-trip");
        if !metrics.contains(&metric) {
            continue;
        }
        rows.push(RobustnessRow {
            metric,
            k,
            attribute: attribute.to_string(),
            value: value.to_string(),
            variant: variant.to_string(),
            variant_text: text.to_string(),
            baseline_mean: baseline
                .get(&(metric, attribute, value))
                .and_then(|v| mean(v)),
            variant_mean: mean(&sims),
            n_anchors: sims.len(),
        });
    }
    rows
}

fn entropy_reports(
    instances: &[PromptInstance],
    samples: &[Vec<Outcome>],
    warnings: &mut Vec<String>,
) -> Vec<EntropyReport> {
    let mut out = Vec::new();
    for (inst, outcomes) in instances.iter().zip(samples) {
        let lists: Vec<RankedList> = outcomes
            .iter()
            .filter_map(|o| o.as_ref().ok().cloned())
            .collect();
        let id = inst.id();
        match SampleSet::new(&id, lists).and_then(|s| predictive_entropy(&s)) {
            Ok(r) => out.push(r),
            Err(e) => warnings.push(format!("entropy for {id}: {e}")),
        }
    }
    out
}

fn fmt6(x: f64) -> String {
    let s = format!("{x:.6}");
    if s == "-0.000000" {
        "0.000000".to_string()
    } else {
        s
    }
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map(fmt6).unwrap_or_default()
}

fn csv_writer() -> csv::Writer<Vec<u8>> {
    csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(Vec::new())
}

fn finish(w: csv::Writer<Vec<u8>>) -> Result<Vec<u8>, RunError> {
    w.into_inner()
        .map_err(|e| RunError::Output(std::io::Error::other(e.to_string())))
}

fn csv_err(e: csv::Error) -> RunError {
    RunError::Output(std::io::Error::other(e))
}

type CellKey<'a> = (ScoreKind, usize, &'a str, &'a str);

/// Rows sorted by (metric, k, attribute, value, anchor) with per-value
/// mean/min/max over scored anchors.
pub fn similarities_csv(domain: &str, table: &SimilarityTable) -> Result<Vec<u8>, RunError> {
    let mut stats: HashMap<CellKey, (f64, f64, f64, usize)> = HashMap::new();
    for r in &table.rows {
        if let Some(s) = r.similarity {
            let e = stats
                .entry((r.metric, r.k, &r.attribute, &r.value))
                .or_insert((0.0, f64::INFINITY, f64::NEG_INFINITY, 0));
            e.0 += s;
            e.1 = e.1.min(s);
            e.2 = e.2.max(s);
            e.3 += 1;
        }
    }
    let mut sorted = table.clone();
    sorted.sort();
    let mut w = csv_writer();
    w.write_record([
        "domain",
        "metric",
        "k",
        "attribute",
        "value",
        "anchor",
        "similarity",
        "exclusion",
        "value_mean",
        "value_min",
        "value_max",
    ])
    .map_err(csv_err)?;
    for r in &sorted.rows {
        let st = stats.get(&(r.metric, r.k, r.attribute.as_str(), r.value.as_str()));
        w.write_record([
            domain.to_string(),
            r.metric.to_string(),
            r.k.to_string(),
            r.attribute.clone(),
            r.value.clone(),
            r.anchor.clone(),
            fmt_opt(r.similarity),
            r.exclusion.map(|e| e.to_string()).unwrap_or_default(),
            fmt_opt(st.map(|s| s.0 / s.3 as f64)),
            fmt_opt(st.map(|s| s.1)),
            fmt_opt(st.map(|s| s.2)),
        ])
        .map_err(csv_err)?;
    }
    finish(w)
}

pub fn summary_csv(domain: &str, summary: &FairnessSummary) -> Result<Vec<u8>, RunError> {
    let mut entries: Vec<&AttributeSummary> = summary.entries.iter().collect();
    entries.sort_by(|a, b| (a.metric, a.k, &a.attribute).cmp(&(b.metric, b.k, &b.attribute)));
    let mut w = csv_writer();
    w.write_record(["domain", "metric", "k", "attribute", "stat", "value"])
        .map_err(csv_err)?;
    for e in entries {
        for (stat, v) in [("SNSR", e.snsr), ("SNSV", e.snsv)] {
            w.write_record([
                domain,
                e.metric.as_str(),
                &e.k.to_string(),
                &e.attribute,
                stat,
                &fmt6(v),
            ])
            .map_err(csv_err)?;
        }
    }
    finish(w)
}

fn display_metric(kind: ScoreKind) -> &'static str {
    match kind {
        ScoreKind::Similarity(MetricKind::Jaccard) => "Jaccard",
        ScoreKind::Similarity(MetricKind::SerpStar) => "SERP*",
        ScoreKind::Similarity(MetricKind::PragStar) => "PRAG*",
        ScoreKind::Pafs => "PAFS",
    }
}

pub fn ranking_txt(
    domain: &str,
    kind: ScoreKind,
    k: usize,
    order: &[String],
    summary: &FairnessSummary,
) -> String {
    let mut out = format!(
        "# {domain}: attributes ranked by SNSV in {}@{k} (most unfair first)\n",
        display_metric(kind)
    );
    for (i, name) in order.iter().enumerate() {
        let e = summary
            .get(kind, k, name)
            .expect("ranked attribute has a summary");
        out.push_str(&format!(
            "{}\t{name}\tSNSV={}\tSNSR={}\n",
            i + 1,
            fmt6(e.snsv),
            fmt6(e.snsr)
        ));
    }
    out
}

pub fn k_sweep_csv(domain: &str, rows: &[KSweepRow]) -> Result<Vec<u8>, RunError> {
    let mut w = csv_writer();
    w.write_record([
        "domain",
        "metric",
        "k",
        "attribute",
        "value",
        "mean_similarity",
        "n_anchors",
    ])
    .map_err(csv_err)?;
    for r in rows {
        w.write_record([
            domain,
            r.metric.as_str(),
            &r.k.to_string(),
            &r.attribute,
            &r.value,
            &fmt_opt(r.mean_similarity),
            &r.n_anchors.to_string(),
        ])
        .map_err(csv_err)?;
    }
    finish(w)
}

pub fn robustness_csv(domain: &str, rows: &[RobustnessRow]) -> Result<Vec<u8>, RunError> {
    let mut w = csv_writer();
    w.write_record([
        "domain",
        "metric",
        "k",
        "attribute",
        "value",
        "variant",
        "variant_text",
        "baseline_mean",
        "variant_mean",
        "delta",
        "n_anchors",
    ])
    .map_err(csv_err)?;
    for r in rows {
        w.write_record([
            domain,
            r.metric.as_str(),
            &r.k.to_string(),
            &r.attribute,
            &r.value,
            &r.variant,
            &r.variant_text,
            &fmt_opt(r.baseline_mean),
            &fmt_opt(r.variant_mean),
            &fmt_opt(r.delta()),
            &r.n_anchors.to_string(),
        ])
        .map_err(csv_err)?;
    }
    finish(w)
}

pub fn entropy_csv(reports: &[EntropyReport]) -> Result<Vec<u8>, RunError> {
    let mut w = csv_writer();
    w.write_record([
        "instance_id",
        "n",
        "distinct_items",
        "entropy_nats",
        "normalized_entropy",
        "exact_match_rate",
        "mean_pairwise_jaccard",
        "degenerate_flag",
    ])
    .map_err(csv_err)?;
    for r in reports {
        w.write_record([
            r.instance_id.clone(),
            r.n.to_string(),
            r.distinct_items.to_string(),
            fmt6(r.entropy_nats),
            fmt6(r.normalized_entropy),
            fmt_opt(r.exact_match_rate),
            fmt_opt(r.mean_pairwise_jaccard),
            r.degenerate.to_string(),
        ])
        .map_err(csv_err)?;
    }
    finish(w)
}

/// Bundle files a run may produce; stale ones are removed on commit.
const BUNDLE_FILES: [&str; 9] = [
    "similarities.csv",
    "summary.csv",
    "ranking.txt",
    "k_sweep.csv",
    "robustness.csv",
    "entropy.csv",
    "prompts.jsonl",
    "requests.jsonl",
    "manifest.json",
];

/// Staging directory inside the output directory, removed on drop.
struct Staging {
    dir: PathBuf,
    out: PathBuf,
}

impl Staging {
    fn new(out: &Path) -> std::io::Result<Self> {
        let dir = out.join(format!(".staging-{}-{}", std::process::id(), now_ms()));
        fs::create_dir_all(&dir)?;
        Ok(Self {
            dir,
            out: out.to_path_buf(),
        })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn commit(&self, files: &[String]) -> std::io::Result<()> {
        for stale in BUNDLE_FILES {
            if !files.iter().any(|f| f == stale) {
                let p = self.out.join(stale);
                if p.exists() {
                    fs::remove_file(p)?;
                }
            }
        }
        for f in files {
            let src = self.dir.join(f);
            if src.exists() {
                fs::rename(src, self.out.join(f))?;
            }
        }
        Ok(())
    }
}

impl Drop for Staging {
    fn drop(&mut self) {
        let _ = fs::remove_dir_all(&self.dir);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn anchors_file(dir: &Path, n: usize) -> PathBuf {
        let p = dir.join("anchors.csv");
        let mut text = String::from("name\n");
        for i in 0..n {
            text.push_str(&format!("Artist {i}\n"));
        }
        fs::write(&p, text).unwrap();
        p
    }

    fn config(dir: &Path, anchors: usize) -> RunConfig {
        let mut c = RunConfig::new(Domain::Music, anchors_file(dir, anchors), dir.join("out"));
        c.k = 5;
        c
    }

    fn read(dir: &Path, name: &str) -> String {
        fs::read_to_string(dir.join("out").join(name)).unwrap()
    }

    #[test]
    fn default_run_writes_table_two_shape() {
        let dir = tempfile::tempdir().unwrap();
        let report = run_audit(&config(dir.path(), 2)).unwrap();
        let summary = read(dir.path(), "summary.csv");
        // header + 8 attributes x 3 metrics x 2 stats
        assert_eq!(summary.lines().count(), 1 + 8 * 3 * 2);
        assert!(summary.starts_with("domain,metric,k,attribute,stat,value\n"));
        assert!(summary.contains("music,jaccard,5,Continent,SNSR,0.000000\n"));
        let sims = read(dir.path(), "similarities.csv");
        assert_eq!(sims.lines().count(), 1 + 2 * 30 * 3);
        assert!(read(dir.path(), "ranking.txt").contains("PRAG*@5"));
        for absent in ["k_sweep.csv", "robustness.csv", "entropy.csv"] {
            assert!(!dir.path().join("out").join(absent).exists());
        }
        assert_eq!(report.manifest.prompts, 2 * 31);
        let leftovers: Vec<_> = fs::read_dir(dir.path().join("out"))
            .unwrap()
            .filter(|e| {
                e.as_ref()
                    .unwrap()
                    .file_name()
                    .to_string_lossy()
                    .starts_with(".staging")
            })
            .collect();
        assert!(leftovers.is_empty());
    }

    #[test]
    fn unbiased_mock_has_no_disparity() {
        let dir = tempfile::tempdir().unwrap();
        let report = run_audit(&config(dir.path(), 2)).unwrap();
        assert!(report.summary.entries.iter().all(|e| e.snsr < 0.02));
    }

    #[test]
    fn empty_metric_selection_omits_ranking() {
        let dir = tempfile::tempdir().unwrap();
        let mut c = config(dir.path(), 1);
        c.metrics.clear();
        let report = run_audit(&c).unwrap();
        assert!(report.ranking.is_none());
        assert!(!dir.path().join("out/ranking.txt").exists());
        assert!(report
            .manifest
            .notes
            .iter()
            .any(|n| n.contains("ranking.txt omitted")));
        assert_eq!(read(dir.path(), "summary.csv").lines().count(), 1);
    }

    #[test]
    fn ranking_falls_back_without_prag() {
        let dir = tempfile::tempdir().unwrap();
        let mut c = config(dir.path(), 1);
        c.metrics = vec![MetricKind::SerpStar, MetricKind::Jaccard];
        let report = run_audit(&c).unwrap();
        assert_eq!(
            report.ranking.unwrap().0,
            ScoreKind::Similarity(MetricKind::SerpStar)
        );
    }

    #[test]
    fn k_sweep_rows_per_cutoff() {
        let dir = tempfile::tempdir().unwrap();
        let mut c = config(dir.path(), 2);
        c.k = 25;
        c.ks_sweep = Some(vec![5, 10, 25]);
        c.attributes = Some(vec!["Continent".into()]);
        c.mock = Some(MockModelConfig {
            bias_strength: 0.2,
            biased_values: ["African".to_string()].into(),
            ..MockModelConfig::unbiased(5)
        });
        let report = run_audit(&c).unwrap();
        // 3 metrics x 3 cutoffs x 3 Continent values
        assert_eq!(report.k_sweep.len(), 3 * 3 * 3);
        let j = |k: usize, v: &str| {
            report
                .k_sweep
                .iter()
                .find(|r| r.metric == MetricKind::Jaccard && r.k == k && r.value == v)
                .unwrap()
                .mean_similarity
                .unwrap()
        };
        assert!((j(5, "African") - 4.0 / 6.0).abs() < 1e-12);
        assert!((j(25, "African") - 20.0 / 30.0).abs() < 1e-12);
        for k in [5, 10, 25] {
            assert_eq!(j(k, "Asian"), 1.0);
        }
        assert_eq!(read(dir.path(), "k_sweep.csv").lines().count(), 1 + 27);
    }

    #[test]
    fn personality_profiles_add_pafs_rows() {
        let dir = tempfile::tempdir().unwrap();
        let mut c = config(dir.path(), 2);
        c.personality_profiles =
            Some(PersonalityProfileSet::new(vec!["a calm".into(), "an anxious".into()]).unwrap());
        let report = run_audit(&c).unwrap();
        let pafs: Vec<_> = report
            .summary
            .entries
            .iter()
            .filter(|e| e.metric == ScoreKind::Pafs)
            .collect();
        assert_eq!(pafs.len(), 8);
        assert!(pafs
            .iter()
            .all(|e| e.snsr == 0.0 && e.per_value_mean.iter().all(|(_, m)| *m == 1.0)));
        assert!(read(dir.path(), "similarities.csv").contains(",Personality,a calm,"));
        // ranking covers the registry attributes only
        assert_eq!(report.ranking.unwrap().1.len(), 8);
    }

    #[test]
    fn uncertainty_samples_write_entropy() {
        let dir = tempfile::tempdir().unwrap();
        let mut c = config(dir.path(), 1);
        c.attributes = Some(vec!["Gender".into()]);
        c.samples_n = 3;
        let report = run_audit(&c).unwrap();
        assert_eq!(report.entropy.len(), report.manifest.prompts);
        assert!(report.entropy.iter().all(|r| r.n == 3
            && r.exact_match_rate == Some(1.0)
            && r.mean_pairwise_jaccard == Some(1.0)));
        assert_eq!(
            read(dir.path(), "entropy.csv").lines().count(),
            1 + report.manifest.prompts
        );
    }

    #[test]
    fn fatal_error_leaves_no_outputs() {
        let dir = tempfile::tempdir().unwrap();
        let mut c = config(dir.path(), 1);
        c.provider.kind = crate::gateway::ProviderKind::LiveHttp;
        c.provider.credential_env_var = "RECFAIR_RUNNER_TEST_UNSET".into();
        let err = run_audit(&c).unwrap_err();
        assert_eq!(err.exit_code(), 3);
        let left: Vec<_> = fs::read_dir(dir.path().join("out")).unwrap().collect();
        assert!(left.is_empty());
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let mut c = config(dir.path(), 1);
        c.ks_sweep = Some(vec![10]);
        assert!(matches!(run_audit(&c), Err(RunError::Config(_))));
        let mut c = config(dir.path(), 1);
        c.k = 0;
        assert!(matches!(run_audit(&c), Err(RunError::Config(_))));
        let mut c = config(dir.path(), 1);
        c.attributes = Some(vec!["Height".into()]);
        assert!(matches!(run_audit(&c), Err(RunError::Config(m)) if m.contains("Height")));
    }

    #[test]
    fn toml_config_resolves_relative_paths() {
        let dir = tempfile::tempdir().unwrap();
        anchors_file(dir.path(), 1);
        let cfg_path = dir.path().join("audit.toml");
        fs::write(
            &cfg_path,
            r#"
domain = "music"
anchors_path = "anchors.csv"
k = 5
ks_sweep = [1, 5]
metrics = ["jaccard", "prag_star"]
output_dir = "out"
aggregation_mode = "per_anchor_disparity"

[provider]
kind = "mock"
max_in_flight = 2

[mock]
seed = 3
bias_strength = 0.5
biased_values = ["Muslim"]

[[perturbations]]
kind = "typo"
attribute = "Continent"
values = ["African"]

[[perturbations]]
kind = "translate"
language = "fr"
attribute = "Continent"
"#,
        )
        .unwrap();
        let c = RunConfig::from_toml_file(&cfg_path).unwrap();
        assert_eq!(c.anchors_path, dir.path().join("anchors.csv"));
        assert_eq!(c.aggregation_mode, AggregationMode::PerAnchorDisparity);
        assert_eq!(c.perturbations.len(), 2);
        let report = run_audit(&c).unwrap();
        let variants: Vec<_> = report
            .robustness
            .iter()
            .filter(|r| r.metric == MetricKind::Jaccard)
            .map(|r| r.variant_text.as_str())
            .collect();
        assert!(
            variants.contains(&"Afrian")
                && variants.contains(&"Africcan")
                && variants.contains(&"Africain")
        );
        assert!(
            RunConfig::from_toml_str("domain = \"music\"\nanchors_path = \"a\"\nbogus = 1\n")
                .is_err()
        );
    }

    #[test]
    fn number_formatting() {
        assert_eq!(fmt6(0.1363), "0.136300");
        assert_eq!(fmt6(-1e-12), "0.000000");
        assert_eq!(fmt_opt(None), "");
    }
}
