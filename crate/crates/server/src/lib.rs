//! HTTP service over a loaded artifact set.
//!
//! | method | path             | body / query                      |
//! |--------|------------------|-----------------------------------|
//! | GET    | `/meta`          |                                   |
//! | GET    | `/classes`       |                                   |
//! | GET    | `/stats/latents` | `class=<name or index>`, `top=<m>` |
//! | POST   | `/steer`         | [`SteerRequest`]                  |
//! | GET    | `/sweep`         | `strategy=`, `class=`             |
//!
//! Errors come back as `{"error": {"code", "field", "message"}}`.

use std::collections::HashMap;
use std::path::Path;
use std::sync::Arc;

use axum::extract::rejection::JsonRejection;
use axum::extract::{Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use vitsteer_core::data::{ClassTable, LabeledImage};
use vitsteer_core::steering::{
    select_latents, steered_eval, ActivationStats, LatentSet, SteerOutcome, SteerSpec, Strategy,
};
use vitsteer_core::vit::SteerScope;
use vitsteer_core::{GatedViT32, Sae32};
use vitsteer_harness::artifacts::SWEEP_FILE;
use vitsteer_harness::report::parse_sweep_csv;
use vitsteer_harness::{load_datasets, ExperimentConfig, Pipeline, SweepRecord};

/// Read-only state shared by all requests.
pub struct AppState {
    pub config_hash: String,
    pub model: GatedViT32,
    pub sae: Sae32,
    pub stats: ActivationStats,
    pub classes: ClassTable,
    /// Evaluation images of each class, at most `max_cap` of them.
    pub eval: Vec<Vec<LabeledImage>>,
    pub k_steer: usize,
    pub alpha_bounds: (f64, f64),
    pub default_alpha: f64,
    pub default_cap: usize,
    pub random_seed: u64,
    pub scope: SteerScope,
    pub batch_size: usize,
    /// Cached sweep rows; empty when no sweep has been run.
    pub sweep: Vec<SweepRecord>,
}

impl AppState {
    /// Loads checkpoints, statistics and the test split named by `config`.
    pub fn load(config: &ExperimentConfig) -> vitsteer_harness::Result<Self> {
        let pipeline = Pipeline::new(config.clone())?;
        let hash = pipeline.hash().to_string();
        let model = pipeline.load_vit()?;
        let sae = pipeline.load_sae()?;
        let stats = pipeline.load_stats()?;
        let (_, test) = load_datasets(config)?;
        let cap = config.steering.eval_per_class;
        let eval = (0..test.classes.len())
            .map(|c| test.class_subset(c, Some(cap)).into_iter().cloned().collect())
            .collect();
        let sweep_path = pipeline.layout().path(SWEEP_FILE);
        let sweep = if sweep_path.exists() {
            let text = std::fs::read_to_string(&sweep_path)
                .map_err(|e| vitsteer_harness::HarnessError::Io { path: sweep_path.clone(), source: e })?;
            let (found, rows) = parse_sweep_csv(&text, &sweep_path)?;
            vitsteer_harness::artifacts::check_hash(&sweep_path, &found, &hash)?;
            rows
        } else {
            Vec::new()
        };
        Ok(Self {
            config_hash: hash,
            model,
            sae,
            stats,
            classes: test.classes,
            eval,
            k_steer: config.steering.k_steer,
            alpha_bounds: (config.steering.alpha_min, config.steering.alpha_max),
            default_alpha: config.steering.report_alpha,
            default_cap: cap,
            random_seed: config.steering_seed(),
            scope: config.scope()?,
            batch_size: config.train.eval_batch_size,
            sweep,
        })
    }

    /// Largest per-class subset the server holds.
    pub fn max_cap(&self) -> usize {
        self.eval.iter().map(Vec::len).max().unwrap_or(0)
    }

    fn resolve_class(&self, c: &ClassRef) -> Result<usize, ApiError> {
        let idx = match c {
            ClassRef::Index(i) => Some(*i).filter(|&i| i < self.classes.len()),
            ClassRef::Name(name) => self
                .classes
                .index_of(name)
                .or_else(|| name.parse::<usize>().ok().filter(|&i| i < self.classes.len())),
        };
        idx.ok_or_else(|| ApiError::not_found("unknown_class", "class", format!("no class {c}")))
    }
}

/// A class given by name or index.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ClassRef {
    Index(usize),
    Name(String),
}

impl std::fmt::Display for ClassRef {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ClassRef::Index(i) => write!(f, "{i}"),
            ClassRef::Name(n) => write!(f, "{n:?}"),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SteerRequest {
    pub class: Option<ClassRef>,
    /// `per_class`, `global` or `random`; defaults to `per_class`.
    pub strategy: Option<String>,
    pub alpha: Option<f64>,
    pub k_steer: Option<usize>,
    /// Explicit latent set, used instead of a strategy.
    pub latents: Option<Vec<usize>>,
    /// Images per class to evaluate.
    pub cap: Option<usize>,
    /// Seed of the random strategy; defaults to the run's seed plus class.
    pub seed: Option<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Outcome {
    pub accuracy: f64,
    pub usage: f64,
    pub head_freq: Vec<f64>,
}

impl From<SteerOutcome> for Outcome {
    fn from(o: SteerOutcome) -> Self {
        Self {
            accuracy: o.accuracy,
            usage: o.final_usage,
            head_freq: o.head_freq,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentFreq {
    pub index: usize,
    pub freq: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SteerResponse {
    pub class: Option<usize>,
    pub class_name: Option<String>,
    /// `explicit` when the request listed latents.
    pub strategy: String,
    pub alpha: f64,
    pub latents: Vec<usize>,
    /// Activation frequency of each latent in `latents`, within the class
    /// when one is given and over all training samples otherwise.
    pub latent_freq: Vec<f64>,
    pub cap: usize,
    pub samples: usize,
    pub steered: Outcome,
    pub baseline: Outcome,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub code: String,
    pub field: Option<String>,
    pub message: String,
}

#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub body: ErrorBody,
}

impl ApiError {
    fn new(status: StatusCode, code: &str, field: Option<&str>, message: impl Into<String>) -> Self {
        Self {
            status,
            body: ErrorBody {
                code: code.into(),
                field: field.map(str::to_string),
                message: message.into(),
            },
        }
    }

    pub fn bad_request(field: &str, message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, "invalid_argument", Some(field), message)
    }

    pub fn not_found(code: &str, field: &str, message: impl Into<String>) -> Self {
        Self::new(StatusCode::NOT_FOUND, code, Some(field), message)
    }

    fn internal(message: impl Into<String>) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", None, message)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(serde_json::json!({ "error": self.body }))).into_response()
    }
}

impl From<JsonRejection> for ApiError {
    fn from(r: JsonRejection) -> Self {
        Self::new(StatusCode::BAD_REQUEST, "malformed_request", None, r.body_text())
    }
}

/// Handles one steering request against `state`.
pub fn handle_steer(state: &AppState, req: &SteerRequest) -> Result<SteerResponse, ApiError> {
    let n = state.sae.n();
    let alpha = req.alpha.unwrap_or(state.default_alpha);
    let (lo, hi) = state.alpha_bounds;
    if !alpha.is_finite() || alpha < lo || alpha > hi {
        return Err(ApiError::bad_request("alpha", format!("alpha must lie in [{lo}, {hi}], got {alpha}")));
    }
    let k_steer = req.k_steer.unwrap_or(state.k_steer);
    if k_steer == 0 || k_steer > n {
        return Err(ApiError::bad_request("k_steer", format!("k_steer must lie in 1..={n}, got {k_steer}")));
    }
    let max_cap = state.max_cap();
    let cap = req.cap.unwrap_or(state.default_cap).min(max_cap);
    if cap == 0 {
        return Err(ApiError::bad_request("cap", "cap must be positive"));
    }
    let class = req.class.as_ref().map(|c| state.resolve_class(c)).transpose()?;

    let (strategy_name, set) = match (&req.latents, &req.strategy) {
        (Some(_), Some(_)) => {
            return Err(ApiError::bad_request("latents", "give either latents or strategy, not both"));
        }
        (Some(list), None) => {
            let set = LatentSet::new(list.clone(), n).map_err(|e| ApiError::bad_request("latents", e.to_string()))?;
            ("explicit".to_string(), set)
        }
        (None, s) => {
            let strategy: Strategy = s
                .as_deref()
                .unwrap_or("per_class")
                .parse()
                .map_err(|e: vitsteer_core::Error| ApiError::bad_request("strategy", e.to_string()))?;
            if strategy == Strategy::PerClassFrequent && class.is_none() {
                return Err(ApiError::bad_request("class", "per_class strategy needs a class"));
            }
            let seed = req
                .seed
                .unwrap_or_else(|| state.random_seed.wrapping_add(class.unwrap_or(0) as u64));
            let spec = SteerSpec {
                strategy,
                alpha,
                k_steer,
                class,
                seed: Some(seed),
            };
            let set = select_latents(&state.stats, &spec).map_err(|e| ApiError::bad_request("k_steer", e.to_string()))?;
            (strategy.to_string(), set)
        }
    };

    let images: Vec<&LabeledImage> = match class {
        Some(c) => state.eval[c].iter().take(cap).collect(),
        None => state.eval.iter().flat_map(|v| v.iter().take(cap)).collect(),
    };
    if images.is_empty() {
        return Err(ApiError::not_found("empty_class", "class", "no evaluation images for this class"));
    }
    let run = |a: f64| {
        steered_eval(&state.model, &state.sae, &set, a, &images, state.scope, state.batch_size)
            .map_err(|e| ApiError::internal(e.to_string()))
    };
    let baseline = run(0.0)?;
    let steered = run(alpha)?;
    let freq = match class {
        Some(c) => state.stats.class_freq(c),
        None => state.stats.global_freq(),
    };
    Ok(SteerResponse {
        class,
        class_name: class.and_then(|c| state.classes.name(c)).map(str::to_string),
        strategy: strategy_name,
        alpha,
        latents: set.indices().to_vec(),
        latent_freq: set.indices().iter().map(|&i| freq[i]).collect(),
        cap,
        samples: images.len(),
        steered: steered.into(),
        baseline: baseline.into(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Meta {
    pub config_hash: String,
    pub classes: Vec<String>,
    pub num_classes: usize,
    pub layers: usize,
    pub heads: usize,
    pub d: usize,
    pub n: usize,
    pub k: usize,
    pub k_steer: usize,
    pub alpha_min: f64,
    pub alpha_max: f64,
    pub alpha_default: f64,
    pub cap_default: usize,
    pub cap_max: usize,
    pub strategies: Vec<String>,
}

pub fn snapshot_meta(state: &AppState) -> Meta {
    let c = state.model.config();
    Meta {
        config_hash: state.config_hash.clone(),
        classes: state.classes.names().to_vec(),
        num_classes: state.classes.len(),
        layers: c.layers,
        heads: c.heads,
        d: state.sae.d(),
        n: state.sae.n(),
        k: state.sae.k(),
        k_steer: state.k_steer,
        alpha_min: state.alpha_bounds.0,
        alpha_max: state.alpha_bounds.1,
        alpha_default: state.default_alpha,
        cap_default: state.default_cap,
        cap_max: state.max_cap(),
        strategies: Strategy::ALL.iter().map(|s| s.to_string()).collect(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassInfo {
    pub index: usize,
    pub name: String,
    pub train_samples: u64,
    pub eval_samples: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentStats {
    pub class: Option<usize>,
    pub samples: u64,
    pub latents: Vec<LatentFreq>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRowJson {
    pub strategy: String,
    pub alpha: f64,
    pub class: usize,
    pub accuracy_pct: f64,
    pub final_usage: f64,
    pub head_freq: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepResponse {
    pub config_hash: String,
    pub rows: Vec<SweepRowJson>,
}

type Shared = Arc<AppState>;

async fn meta(State(s): State<Shared>) -> Json<Meta> {
    Json(snapshot_meta(&s))
}

async fn classes(State(s): State<Shared>) -> Json<Vec<ClassInfo>> {
    Json(
        s.classes
            .names()
            .iter()
            .enumerate()
            .map(|(i, name)| ClassInfo {
                index: i,
                name: name.clone(),
                train_samples: s.stats.class_samples.get(i).copied().unwrap_or(0),
                eval_samples: s.eval.get(i).map_or(0, Vec::len),
            })
            .collect(),
    )
}

fn class_param(s: &AppState, q: &HashMap<String, String>) -> Result<Option<usize>, ApiError> {
    q.get("class")
        .filter(|v| !v.is_empty())
        .map(|v| s.resolve_class(&ClassRef::Name(v.clone())))
        .transpose()
}

pub fn latent_stats(s: &AppState, q: &HashMap<String, String>) -> Result<LatentStats, ApiError> {
    let class = class_param(s, q)?;
    let top = match q.get("top") {
        Some(v) => v
            .parse::<usize>()
            .map_err(|_| ApiError::bad_request("top", format!("top must be a positive integer, got {v:?}")))?,
        None => s.k_steer,
    };
    if top == 0 || top > s.stats.n() {
        return Err(ApiError::bad_request("top", format!("top must lie in 1..={}", s.stats.n())));
    }
    let set = s
        .stats
        .top_latents(class, top)
        .map_err(|e| ApiError::bad_request("top", e.to_string()))?;
    let freq = match class {
        Some(c) => s.stats.class_freq(c),
        None => s.stats.global_freq(),
    };
    Ok(LatentStats {
        class,
        samples: class.map_or(s.stats.total_samples(), |c| s.stats.class_samples[c]),
        latents: set.indices().iter().map(|&i| LatentFreq { index: i, freq: freq[i] }).collect(),
    })
}

async fn stats_latents(State(s): State<Shared>, Query(q): Query<HashMap<String, String>>) -> Result<Json<LatentStats>, ApiError> {
    latent_stats(&s, &q).map(Json)
}

async fn steer(
    State(s): State<Shared>,
    body: Result<Json<SteerRequest>, JsonRejection>,
) -> Result<Json<SteerResponse>, ApiError> {
    let Json(req) = body?;
    tokio::task::spawn_blocking(move || handle_steer(&s, &req))
        .await
        .map_err(|e| ApiError::internal(e.to_string()))?
        .map(Json)
}

pub fn sweep_rows(s: &AppState, q: &HashMap<String, String>) -> Result<SweepResponse, ApiError> {
    let strategy = q
        .get("strategy")
        .filter(|v| !v.is_empty())
        .map(|v| v.parse::<Strategy>())
        .transpose()
        .map_err(|e| ApiError::bad_request("strategy", e.to_string()))?;
    let class = class_param(s, q)?;
    let rows = s
        .sweep
        .iter()
        .filter(|r| strategy.is_none_or(|st| r.strategy == st) && class.is_none_or(|c| r.class == c))
        .map(|r| SweepRowJson {
            strategy: r.strategy.to_string(),
            alpha: r.alpha,
            class: r.class,
            accuracy_pct: r.accuracy_pct,
            final_usage: r.final_usage,
            head_freq: r.head_freq.clone(),
        })
        .collect();
    Ok(SweepResponse {
        config_hash: s.config_hash.clone(),
        rows,
    })
}

async fn sweep(State(s): State<Shared>, Query(q): Query<HashMap<String, String>>) -> Result<Json<SweepResponse>, ApiError> {
    sweep_rows(&s, &q).map(Json)
}

async fn fallback() -> ApiError {
    ApiError::not_found("no_route", "path", "no such endpoint")
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/meta", get(meta))
        .route("/classes", get(classes))
        .route("/stats/latents", get(stats_latents))
        .route("/steer", post(steer))
        .route("/sweep", get(sweep))
        .fallback(fallback)
        .with_state(state)
}

/// Serves `state` on `addr` until the process is stopped.
pub async fn serve(state: Arc<AppState>, addr: &str) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    axum::serve(listener, router(state)).await
}

/// Loads the artifacts of the config at `path`.
pub fn load_state(path: &Path) -> vitsteer_harness::Result<AppState> {
    AppState::load(&ExperimentConfig::load(path)?)
}
