//! Experiment orchestration: configs, seeded runs, grids and result tables.
//!
//! A run directory is `<out>/runs/<run_id>/` where `run_id` is derived from
//! the config snapshot. Everything needed to recompute the reported numbers
//! (demonstrations, selections, prompts, raw outputs, parse diagnostics,
//! scores) is written there.

use std::collections::HashMap;
use std::fs;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use indexmap::IndexMap;
use rand::seq::index;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::corpus::{self, CorpusError, Dataset, Demonstration, EntityPool, Pools, Schema, Sentence};
use crate::embed::{EmbedError, Embedder, EmbeddingCache, HashedTrigramEncoder, HttpEncoder};
use crate::exec::Execution;
use crate::llm::{self, CompletionClient, CompletionRequest, DropRule, HttpChatBackend, LlmError, ResponseCache, RetryPolicy};
use crate::parse::{extract_prediction, Diagnostic, Prediction};
use crate::prompt::{self, PromptBundle, PromptConfig, PromptError};
use crate::score::{self, average_runs, RunAverage, ScoreError, ScoreReport};
use crate::select::{self, ClusterOptions, PointSelection, SelectError};
use crate::seed;
use crate::synthetic;

#[derive(Debug, Error)]
pub enum RunnerError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("environment variable {0} is not set")]
    MissingEnv(String),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error(transparent)]
    Select(#[from] SelectError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    /// Message carries the cause inline since seed errors are stored as text.
    #[error("sentence {id}: {error}")]
    Completion { id: String, error: LlmError },
    #[error(transparent)]
    Llm(#[from] LlmError),
    #[error(transparent)]
    Score(#[from] ScoreError),
    #[error("i/o error on {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Toml(#[from] toml::de::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, RunnerError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> RunnerError + '_ {
    move |source| RunnerError::Io { path: path.to_path_buf(), source }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Vanilla,
    Icl,
    PiclRandom,
    PiclCluster,
    PiclRestricted,
    PiclTau,
    PiclExtend,
}

impl Method {
    pub const ALL: [Method; 7] = [
        Method::Vanilla,
        Method::Icl,
        Method::PiclRandom,
        Method::PiclCluster,
        Method::PiclRestricted,
        Method::PiclTau,
        Method::PiclExtend,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Vanilla => "vanilla",
            Method::Icl => "icl",
            Method::PiclRandom => "picl_random",
            Method::PiclCluster => "picl_cluster",
            Method::PiclRestricted => "picl_restricted",
            Method::PiclTau => "picl_tau",
            Method::PiclExtend => "picl_extend",
        }
    }

    pub fn uses_points(self) -> bool {
        !matches!(self, Method::Vanilla | Method::Icl)
    }

    pub fn uses_demos(self) -> bool {
        self != Method::Vanilla
    }

    pub fn uses_tau(self) -> bool {
        matches!(self, Method::PiclTau | Method::PiclExtend)
    }
}

impl std::str::FromStr for Method {
    type Err = RunnerError;
    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| RunnerError::Config(format!("unknown method {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataFormat {
    #[default]
    Jsonl,
    Bio,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetSource {
    Files {
        train: PathBuf,
        test: PathBuf,
        #[serde(default)]
        format: DataFormat,
    },
    Synthetic { train: usize, test: usize, seed: u64 },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub name: String,
    /// Required for file sources; synthetic data uses the CoNLL2003 labels.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub schema: Option<Vec<String>>,
    pub source: DatasetSource,
}

impl DatasetSpec {
    pub fn synthetic(name: &str, train: usize, test: usize, seed: u64) -> Self {
        Self { name: name.into(), schema: None, source: DatasetSource::Synthetic { train, test, seed } }
    }
}

fn default_embed_url_env() -> String {
    "POINTNER_EMBED_URL".into()
}
fn default_embed_token_env() -> String {
    "POINTNER_EMBED_TOKEN".into()
}
fn default_llm_url_env() -> String {
    "POINTNER_LLM_URL".into()
}
fn default_llm_token_env() -> String {
    "POINTNER_LLM_TOKEN".into()
}
fn default_dim() -> usize {
    HashedTrigramEncoder::DEFAULT_DIM
}
fn default_max_tokens() -> u32 {
    llm::DEFAULT_MAX_OUTPUT_TOKENS
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EncoderSpec {
    HashedTrigram {
        #[serde(default = "default_dim")]
        dim: usize,
    },
    Http {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        url: Option<String>,
        #[serde(default = "default_embed_url_env")]
        url_env: String,
        #[serde(default = "default_embed_token_env")]
        token_env: String,
        model: String,
        dim: usize,
    },
}

impl Default for EncoderSpec {
    fn default() -> Self {
        EncoderSpec::HashedTrigram { dim: default_dim() }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelSpec {
    GoldOracle,
    Corruptor {
        rule: DropRule,
    },
    Http {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        url: Option<String>,
        #[serde(default = "default_llm_url_env")]
        url_env: String,
        #[serde(default = "default_llm_token_env")]
        token_env: String,
        model: String,
        #[serde(default = "default_max_tokens")]
        max_output_tokens: u32,
    },
}

impl ModelSpec {
    pub fn model_name(&self) -> String {
        match self {
            ModelSpec::GoldOracle => "gold-oracle".into(),
            ModelSpec::Corruptor { rule } => format!("corruptor-{}", serde_json::to_value(rule).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default()),
            ModelSpec::Http { model, .. } => model.clone(),
        }
    }

    fn max_output_tokens(&self) -> u32 {
        match self {
            ModelSpec::Http { max_output_tokens, .. } => *max_output_tokens,
            _ => llm::DEFAULT_MAX_OUTPUT_TOKENS,
        }
    }
}

fn default_seeds() -> Vec<u64> {
    vec![1, 2, 3, 4, 5]
}
fn default_one() -> usize {
    1
}
fn default_max_iter() -> usize {
    100
}
fn default_tol() -> f64 {
    1e-6
}
fn default_concurrency() -> usize {
    4
}
fn default_attempts() -> u32 {
    3
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub dataset: DatasetSpec,
    pub method: Method,
    /// Demonstrations per prompt (b).
    #[serde(default)]
    pub shots: usize,
    /// Point entities per type (a).
    #[serde(default)]
    pub points_per_type: usize,
    #[serde(default = "default_one")]
    pub tau: usize,
    /// Random extension size for `picl_extend`; defaults to `(tau - 1) * a`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub extra: Option<usize>,
    #[serde(default)]
    pub encoder: EncoderSpec,
    pub model: ModelSpec,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    /// Evaluate on a seeded sample of this many test sentences.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_subset: Option<usize>,
    #[serde(default)]
    pub subset_seed: u64,
    #[serde(default = "default_one")]
    pub kmeans_restarts: usize,
    #[serde(default = "default_max_iter")]
    pub kmeans_max_iter: usize,
    #[serde(default = "default_tol")]
    pub kmeans_tol: f64,
    #[serde(default = "default_concurrency")]
    pub concurrency: usize,
    #[serde(default = "default_attempts")]
    pub retry_attempts: u32,
    /// Directory for the embedding and response caches.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cache_dir: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn new(dataset: DatasetSpec, method: Method, model: ModelSpec) -> Self {
        Self {
            dataset,
            method,
            shots: 0,
            points_per_type: 0,
            tau: 1,
            extra: None,
            encoder: EncoderSpec::default(),
            model,
            seeds: default_seeds(),
            test_subset: None,
            subset_seed: 0,
            kmeans_restarts: 1,
            kmeans_max_iter: default_max_iter(),
            kmeans_tol: default_tol(),
            concurrency: default_concurrency(),
            retry_attempts: default_attempts(),
            cache_dir: None,
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(RunnerError::Config(msg));
        let m = self.method.as_str();
        if self.seeds.is_empty() {
            return bad("seeds must not be empty".into());
        }
        if self.method == Method::Vanilla && self.shots > 0 {
            return bad(format!("{m} takes no demonstrations (shots = {})", self.shots));
        }
        if matches!(self.method, Method::Icl | Method::PiclRestricted) && self.shots == 0 {
            return bad(format!("{m} needs shots >= 1"));
        }
        if self.method.uses_points() && self.points_per_type == 0 {
            return bad(format!("{m} needs points_per_type >= 1"));
        }
        if self.tau == 0 {
            return bad("tau must be >= 1".into());
        }
        if self.concurrency == 0 {
            return bad("concurrency must be >= 1".into());
        }
        if matches!(self.dataset.source, DatasetSource::Files { .. }) && self.dataset.schema.is_none() {
            return bad("file datasets need an explicit schema".into());
        }
        Ok(())
    }

    fn extra_points(&self) -> usize {
        self.extra.unwrap_or(self.tau.saturating_sub(1) * self.points_per_type)
    }

    /// Content address of this config.
    pub fn run_id(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(&Sha256::digest(&json)[..8])
    }
}

/// Cartesian grid over method, a, b and τ.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub methods: Vec<Method>,
    #[serde(default)]
    pub points_per_type: Vec<usize>,
    #[serde(default)]
    pub shots: Vec<usize>,
    #[serde(default)]
    pub tau: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    #[serde(flatten)]
    pub base: ExperimentConfig,
    pub grid: Grid,
}

impl SweepConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }
}

/// Expand `grid` over `base`. Axes a method ignores collapse to a single
/// value; invalid combinations (e.g. few-shot with zero shots) are skipped.
pub fn expand_grid(base: &ExperimentConfig, grid: &Grid) -> Vec<ExperimentConfig> {
    let or = |v: &[usize], d: usize| if v.is_empty() { vec![d] } else { v.to_vec() };
    let mut out: Vec<ExperimentConfig> = Vec::new();
    for &method in &grid.methods {
        let a_values = if method.uses_points() { or(&grid.points_per_type, base.points_per_type) } else { vec![0] };
        let b_values = if method.uses_demos() { or(&grid.shots, base.shots) } else { vec![0] };
        let tau_values = if method.uses_tau() { or(&grid.tau, base.tau) } else { vec![1] };
        for &a in &a_values {
            for &b in &b_values {
                for &tau in &tau_values {
                    let mut cfg = base.clone();
                    cfg.method = method;
                    cfg.points_per_type = a;
                    cfg.shots = b;
                    cfg.tau = tau;
                    if cfg.validate().is_ok() && !out.contains(&cfg) {
                        out.push(cfg);
                    }
                }
            }
        }
    }
    out
}

/// Artifact paths of one seed, relative to the output directory.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeedArtifacts {
    pub demos: String,
    pub selections: Vec<String>,
    pub prompts: String,
    pub raw_outputs: String,
    pub diagnostics: String,
    pub score: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedOutcome {
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub report: Option<ScoreReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub artifacts: SeedArtifacts,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub run_id: String,
    pub config: ExperimentConfig,
    pub seeds: Vec<SeedOutcome>,
    pub mean: Option<RunAverage>,
    pub run_dir: String,
}

/// Shared, already-built resources for a run.
pub struct RunContext<'a> {
    pub dataset: &'a Dataset,
    pub client: &'a CompletionClient,
    pub embedder: &'a Embedder,
    pub exec: Execution,
}

pub fn load_dataset(spec: &DatasetSpec) -> Result<Dataset> {
    let dataset = match &spec.source {
        DatasetSource::Synthetic { train, test, seed } => synthetic::dataset(*train, *test, *seed),
        DatasetSource::Files { train, test, format } => {
            let names = spec
                .schema
                .as_ref()
                .ok_or_else(|| RunnerError::Config("file datasets need an explicit schema".into()))?;
            let schema = Schema::from_names(names)?;
            let read = |path: &Path, split: &str| -> Result<Vec<Sentence>> {
                let reader = BufReader::new(fs::File::open(path).map_err(io_err(path))?);
                Ok(match format {
                    DataFormat::Jsonl => corpus::read_jsonl(reader)?,
                    DataFormat::Bio => corpus::parse_bio(reader, &schema, split)?.sentences,
                })
            };
            let train = read(train, "train")?;
            let test = read(test, "test")?;
            Dataset { schema, train, test }
        }
    };
    dataset.validate()?;
    Ok(dataset)
}

fn env_or(explicit: &Option<String>, var: &str) -> Result<String> {
    match explicit {
        Some(v) => Ok(v.clone()),
        None => std::env::var(var).map_err(|_| RunnerError::MissingEnv(var.to_string())),
    }
}

pub fn build_embedder(config: &ExperimentConfig, exec: Execution) -> Result<Embedder> {
    let encoder: Arc<dyn crate::embed::Encoder> = match &config.encoder {
        EncoderSpec::HashedTrigram { dim } => {
            if *dim == 0 {
                return Err(RunnerError::Config("encoder dim must be positive".into()));
            }
            Arc::new(HashedTrigramEncoder::new(*dim))
        }
        EncoderSpec::Http { url, url_env, token_env, model, dim } => {
            let url = env_or(url, url_env)?;
            let token = std::env::var(token_env).ok();
            Arc::new(HttpEncoder::new(url, model.clone(), token, *dim))
        }
    };
    let mut embedder = Embedder::new(encoder)
        .with_concurrency(config.concurrency)
        .with_execution(exec);
    if let Some(dir) = &config.cache_dir {
        embedder = embedder.with_disk_cache(EmbeddingCache::open(dir.join("embeddings"))?);
    }
    Ok(embedder)
}

pub fn build_client(config: &ExperimentConfig, dataset: &Dataset) -> Result<CompletionClient> {
    let client = match &config.model {
        ModelSpec::GoldOracle => CompletionClient::new(llm::gold_oracle(dataset)),
        ModelSpec::Corruptor { rule } => CompletionClient::new(llm::corruptor_oracle(dataset, *rule)),
        ModelSpec::Http { url, url_env, token_env, .. } => {
            let url = env_or(url, url_env)?;
            CompletionClient::new(HttpChatBackend::new(url, std::env::var(token_env).ok()))
        }
    };
    let mut client = client.with_retry(RetryPolicy { attempts: config.retry_attempts, ..RetryPolicy::default() });
    if let Some(dir) = &config.cache_dir {
        client = client.with_cache(ResponseCache::on_disk(dir.join("responses"))?);
    }
    Ok(client)
}

/// Load everything named in `config`, run it, and write artifacts plus
/// `results.csv` / `summary.md` under `out_dir`.
pub fn run_experiment(config: &ExperimentConfig, out_dir: &Path) -> Result<RunResult> {
    config.validate()?;
    let exec = Execution::default();
    let dataset = load_dataset(&config.dataset)?;
    let client = build_client(config, &dataset)?;
    let embedder = build_embedder(config, exec)?;
    let ctx = RunContext { dataset: &dataset, client: &client, embedder: &embedder, exec };
    let result = run_with(config, &ctx, out_dir)?;
    write_report(out_dir, std::slice::from_ref(&result))?;
    Ok(result)
}

/// Run every grid point. Dataset, client and embedder are shared between
/// configs that agree on them.
pub fn sweep(sweep: &SweepConfig, out_dir: &Path) -> Result<Vec<RunResult>> {
    sweep_with(sweep, out_dir, Execution::default())
}

pub fn sweep_with(sweep: &SweepConfig, out_dir: &Path, exec: Execution) -> Result<Vec<RunResult>> {
    let configs = expand_grid(&sweep.base, &sweep.grid);
    if configs.is_empty() {
        return Err(RunnerError::Config("grid expands to no valid configurations".into()));
    }
    let dataset = load_dataset(&sweep.base.dataset)?;
    let client = build_client(&sweep.base, &dataset)?;
    let embedder = build_embedder(&sweep.base, exec)?;
    let ctx = RunContext { dataset: &dataset, client: &client, embedder: &embedder, exec };
    let mut results = Vec::with_capacity(configs.len());
    for cfg in &configs {
        tracing::info!("running {} a={} b={} tau={}", cfg.method.as_str(), cfg.points_per_type, cfg.shots, cfg.tau);
        results.push(run_with(cfg, &ctx, out_dir)?);
    }
    write_report(out_dir, &results)?;
    Ok(results)
}

fn test_sentences<'a>(config: &ExperimentConfig, dataset: &'a Dataset) -> Vec<&'a Sentence> {
    match config.test_subset {
        Some(n) if n < dataset.test.len() => {
            let mut rng = seed::rng_for(config.subset_seed, "test-subset");
            let mut idx = index::sample(&mut rng, dataset.test.len(), n).into_vec();
            idx.sort_unstable();
            idx.into_iter().map(|i| &dataset.test[i]).collect()
        }
        _ => dataset.test.iter().collect(),
    }
}

/// Run `config` on prebuilt resources and persist its artifacts. Errors in
/// one seed are recorded in its [`SeedOutcome`]; the remaining seeds still
/// run. Errors writing artifacts abort the run.
pub fn run_with(config: &ExperimentConfig, ctx: &RunContext<'_>, out_dir: &Path) -> Result<RunResult> {
    config.validate()?;
    let run_id = config.run_id();
    let run_rel = format!("runs/{run_id}");
    let run_dir = out_dir.join(&run_rel);
    fs::create_dir_all(&run_dir).map_err(io_err(&run_dir))?;
    write_json(&run_dir.join("config.json"), config)?;

    let train_pools = corpus::unique_entities(&ctx.dataset.train, &ctx.dataset.schema);
    let tests = test_sentences(config, ctx.dataset);
    let mut seeds = Vec::with_capacity(config.seeds.len());
    for &s in &config.seeds {
        let seed_rel = format!("{run_rel}/seed-{s}");
        let outcome = match run_seed(config, ctx, &train_pools, &tests, s, out_dir, &seed_rel) {
            Ok((report, artifacts)) => SeedOutcome { seed: s, report: Some(report), error: None, artifacts },
            Err(e @ RunnerError::Io { .. }) => return Err(e),
            Err(e) => {
                tracing::error!("seed {s} failed: {e}");
                SeedOutcome { seed: s, report: None, error: Some(e.to_string()), artifacts: SeedArtifacts::default() }
            }
        };
        seeds.push(outcome);
    }
    let reports: Vec<ScoreReport> = seeds.iter().filter_map(|o| o.report.clone()).collect();
    let result = RunResult {
        run_id,
        config: config.clone(),
        mean: average_runs(&reports).ok(),
        seeds,
        run_dir: run_rel,
    };
    write_json(&run_dir.join("run.json"), &result)?;
    Ok(result)
}

fn select_for(
    config: &ExperimentConfig,
    ctx: &RunContext<'_>,
    pool: &EntityPool,
    run_seed: u64,
) -> Result<PointSelection> {
    let a = config.points_per_type;
    let label = |what: &str| seed::derive(run_seed, &format!("{what}/{}", pool.etype));
    let opts = ClusterOptions {
        seed: label("points"),
        restarts: config.kmeans_restarts,
        max_iter: config.kmeans_max_iter,
        tol: config.kmeans_tol,
        exec: Execution::Sequential,
    };
    Ok(match config.method {
        Method::PiclRandom => select::select_points_random(pool, a, label("points"))?,
        Method::PiclCluster => select::select_points(pool, ctx.embedder, a, &opts)?,
        Method::PiclRestricted => select::select_points_restricted(pool, ctx.embedder, a, &opts)?,
        Method::PiclTau => select::select_points_tau(pool, ctx.embedder, a, config.tau, &opts)?,
        Method::PiclExtend => {
            let base = select::select_points(pool, ctx.embedder, a, &opts)?;
            select::extend_random(&base, pool, config.extra_points(), label("extend"))
        }
        Method::Vanilla | Method::Icl => unreachable!("methods without point entities"),
    })
}

#[derive(Serialize)]
struct RawOutput<'a> {
    sentence_id: &'a str,
    text: &'a str,
}

#[allow(clippy::too_many_arguments)]
fn run_seed(
    config: &ExperimentConfig,
    ctx: &RunContext<'_>,
    train_pools: &Pools,
    tests: &[&Sentence],
    run_seed: u64,
    out_dir: &Path,
    seed_rel: &str,
) -> Result<(ScoreReport, SeedArtifacts)> {
    let schema = &ctx.dataset.schema;
    let demos: Vec<Demonstration> =
        corpus::sample_demonstrations(&ctx.dataset.train, config.shots, seed::derive(run_seed, "demos"), schema)?;

    let selections: Vec<PointSelection> = if config.method.uses_points() {
        let restricted;
        let pools = if config.method == Method::PiclRestricted {
            restricted = select::restrict_pool(&demos, schema);
            &restricted
        } else {
            train_pools
        };
        let pools: Vec<&EntityPool> = pools.values().collect();
        ctx.exec
            .map(&pools, |pool| select_for(config, ctx, pool, run_seed))
            .into_iter()
            .collect::<Result<_>>()?
    } else {
        Vec::new()
    };
    let points: IndexMap<String, Vec<String>> =
        selections.iter().map(|s| (s.etype.clone(), s.points.clone())).collect();

    let prompt_config = PromptConfig::new(schema.clone());
    let bundles: Vec<PromptBundle> = tests
        .iter()
        .map(|s| match config.method {
            Method::Vanilla => prompt::build_vanilla(&prompt_config, &s.id, &s.text),
            Method::Icl => prompt::build_icl(&prompt_config, &demos, &s.id, &s.text),
            _ => prompt::build_picl(&prompt_config, &points, &demos, &s.id, &s.text),
        })
        .collect::<std::result::Result<_, _>>()?;

    let model = config.model.model_name();
    let max_tokens = config.model.max_output_tokens();
    let outputs: Vec<String> = ctx
        .exec
        .map_bounded(&bundles, config.concurrency, |b| {
            let mut req = CompletionRequest::new(model.clone(), b.text.clone());
            req.max_output_tokens = max_tokens;
            ctx.client
                .complete(&req)
                .map(|r| r.text)
                .map_err(|error| RunnerError::Completion { id: b.input_sentence_id.clone(), error })
        })
        .into_iter()
        .collect::<Result<_>>()?;

    let preds: Vec<Prediction> = outputs.iter().map(|o| extract_prediction(o, schema)).collect();
    let diagnostics: Vec<Diagnostic> = tests
        .iter()
        .zip(&outputs)
        .zip(&preds)
        .filter_map(|((s, raw), p)| Diagnostic::for_prediction(&s.id, raw, p))
        .collect();
    let pred_map: HashMap<String, Prediction> =
        tests.iter().map(|s| s.id.clone()).zip(preds).collect();
    let gold_map: HashMap<String, Vec<corpus::GoldMention>> =
        tests.iter().map(|s| (s.id.clone(), s.gold.clone())).collect();
    let report = score::score_run_with(&pred_map, &gold_map, schema, ctx.exec)?;

    // persist
    let dir = out_dir.join(seed_rel);
    let sel_dir = dir.join("selections");
    fs::create_dir_all(&sel_dir).map_err(io_err(&sel_dir))?;
    let mut artifacts = SeedArtifacts {
        demos: format!("{seed_rel}/demos.json"),
        selections: Vec::new(),
        prompts: format!("{seed_rel}/prompts.jsonl"),
        raw_outputs: format!("{seed_rel}/raw_outputs.jsonl"),
        diagnostics: format!("{seed_rel}/diagnostics.jsonl"),
        score: format!("{seed_rel}/score.json"),
    };
    write_json(&out_dir.join(&artifacts.demos), &demos)?;
    for sel in &selections {
        let name = format!(
            "{}__{}__{}__a{}__seed{}.json",
            config.dataset.name,
            sel.etype,
            config.method.as_str(),
            config.points_per_type,
            run_seed
        );
        let rel = format!("{seed_rel}/selections/{}", sanitize(&name));
        write_json(&out_dir.join(&rel), sel)?;
        artifacts.selections.push(rel);
    }
    write_jsonl(&out_dir.join(&artifacts.prompts), &bundles)?;
    let raws: Vec<RawOutput> = tests
        .iter()
        .zip(&outputs)
        .map(|(s, text)| RawOutput { sentence_id: &s.id, text })
        .collect();
    write_jsonl(&out_dir.join(&artifacts.raw_outputs), &raws)?;
    write_jsonl(&out_dir.join(&artifacts.diagnostics), &diagnostics)?;
    write_json(&out_dir.join(&artifacts.score), &report)?;
    Ok((report, artifacts))
}

fn sanitize(name: &str) -> String {
    name.chars()
        .map(|c| if c.is_alphanumeric() || matches!(c, '.' | '_' | '-') { c } else { '_' })
        .collect()
}

fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    fs::write(path, bytes).map_err(io_err(path))
}

fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let file = fs::File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    for row in rows {
        serde_json::to_writer(&mut w, row)?;
        w.write_all(b"\n").map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

pub const CSV_HEADER: [&str; 10] = ["dataset", "method", "a", "b", "tau", "seed", "P", "R", "F1", "parse_fail_rate"];

/// `results.csv` contents: one row per successful seed, in result order.
pub fn results_csv(results: &[RunResult]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(CSV_HEADER)?;
    for r in results {
        let c = &r.config;
        for s in &r.seeds {
            let Some(rep) = &s.report else { continue };
            w.write_record([
                c.dataset.name.clone(),
                c.method.as_str().to_string(),
                c.points_per_type.to_string(),
                c.shots.to_string(),
                c.tau.to_string(),
                s.seed.to_string(),
                format!("{:.6}", rep.precision),
                format!("{:.6}", rep.recall),
                format!("{:.6}", rep.f1),
                format!("{:.6}", rep.parse_failure_rate),
            ])?;
        }
    }
    let bytes = w.into_inner().map_err(|e| RunnerError::Config(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

/// Plain aligned table of mean scores (percent, two decimals), one row per
/// (dataset, method, a, b, τ).
pub fn summary_table(results: &[RunResult]) -> String {
    let header = ["dataset", "method", "a", "b", "tau", "seeds", "P", "R", "F1", "failed"];
    let mut rows: Vec<Vec<String>> = vec![header.iter().map(|s| s.to_string()).collect()];
    for r in results {
        let c = &r.config;
        let failed = r.seeds.iter().filter(|s| s.report.is_none()).count();
        let pct = |f: fn(&RunAverage) -> f64| r.mean.as_ref().map(|m| format!("{:.2}", 100.0 * f(m))).unwrap_or_else(|| "-".into());
        rows.push(vec![
            c.dataset.name.clone(),
            c.method.as_str().into(),
            c.points_per_type.to_string(),
            c.shots.to_string(),
            c.tau.to_string(),
            r.mean.map(|m| m.runs).unwrap_or(0).to_string(),
            pct(|m| m.precision),
            pct(|m| m.recall),
            pct(|m| m.f1),
            failed.to_string(),
        ]);
    }
    let widths: Vec<usize> = (0..header.len())
        .map(|i| rows.iter().map(|r| r[i].chars().count()).max().unwrap_or(0))
        .collect();
    let line = |cells: &[String]| {
        let padded: Vec<String> = cells.iter().zip(&widths).map(|(c, w)| format!("{c:<w$}")).collect();
        format!("| {} |", padded.join(" | "))
    };
    let mut out = String::new();
    out.push_str(&line(&rows[0]));
    out.push('\n');
    let rule: Vec<String> = widths.iter().map(|w| "-".repeat(*w)).collect();
    out.push_str(&format!("|-{}-|\n", rule.join("-|-")));
    for row in &rows[1..] {
        out.push_str(&line(row));
        out.push('\n');
    }
    out
}

pub struct Report {
    pub csv: String,
    pub summary: String,
}

pub fn report(results: &[RunResult]) -> Result<Report> {
    Ok(Report { csv: results_csv(results)?, summary: summary_table(results) })
}

pub fn write_report(out_dir: &Path, results: &[RunResult]) -> Result<Report> {
    let rep = report(results)?;
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let csv_path = out_dir.join("results.csv");
    fs::write(&csv_path, &rep.csv).map_err(io_err(&csv_path))?;
    let md_path = out_dir.join("summary.md");
    fs::write(&md_path, &rep.summary).map_err(io_err(&md_path))?;
    Ok(rep)
}

/// Read every `runs/*/run.json` under `out_dir`, sorted by dataset,
/// method, a, b, τ and run id.
pub fn collect_results(out_dir: &Path) -> Result<Vec<RunResult>> {
    let runs = out_dir.join("runs");
    let mut results = Vec::new();
    for entry in fs::read_dir(&runs).map_err(io_err(&runs))? {
        let path = entry.map_err(io_err(&runs))?.path().join("run.json");
        if path.is_file() {
            let bytes = fs::read(&path).map_err(io_err(&path))?;
            results.push(serde_json::from_slice::<RunResult>(&bytes)?);
        }
    }
    results.sort_by(|x, y| {
        let key = |r: &RunResult| {
            (r.config.dataset.name.clone(), r.config.method, r.config.points_per_type, r.config.shots, r.config.tau, r.run_id.clone())
        };
        key(x).cmp(&key(y))
    });
    Ok(results)
}
