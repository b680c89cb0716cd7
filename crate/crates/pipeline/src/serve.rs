//! JSON-over-HTTP access to the emulator and the simulator.
//!
//! - `GET /patterns`: ignition kinds and grid dims
//! - `GET /runs`: manifest listing
//! - `POST /predict`: emulator rollout for a scenario
//! - `POST /simulate`: simulator run for a scenario and seed

use std::net::SocketAddr;
use std::sync::Arc;
use std::time::Instant;

use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use ember_core::emulator::EmulatorModel;
use ember_core::losses::{ba, ros_series};
use ember_core::sim::{simulate, IgnitionKind, ScenarioConfig};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::dataset::{assemble_channels, Dataset};
use crate::error::{PipelineError, Result};

#[derive(Debug)]
pub struct ServeState {
    pub model: EmulatorModel,
    pub data: Dataset,
    pub eps_b: f64,
}

#[derive(Debug, Clone, Deserialize)]
pub struct ScenarioRequest {
    pub wind_speed: f64,
    pub wind_direction: f64,
    pub pattern: String,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ScenarioEcho {
    pub pattern: String,
    pub wind_speed: f64,
    pub wind_direction: f64,
    pub seed: u64,
    pub rows: usize,
    pub cols: usize,
    pub steps: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ScenarioResponse {
    pub scenario: ScenarioEcho,
    /// `T` frames of `M` rows of `P` values.
    pub frames: Vec<Vec<Vec<f64>>>,
    pub ba_percent: Vec<f64>,
    /// Per frame, relative to frame 0; 0 at frame 0.
    pub ros: Vec<f64>,
    pub inference_ms: f64,
}

#[derive(Debug)]
enum ApiError {
    UnknownPattern(String),
    OutOfRange { field: &'static str, value: f64, min: f64, max: f64 },
    Internal(String),
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let (status, body) = match self {
            ApiError::UnknownPattern(p) => (
                StatusCode::NOT_FOUND,
                json!({"error": "unknown_pattern", "pattern": p}),
            ),
            ApiError::OutOfRange { field, value, min, max } => (
                StatusCode::UNPROCESSABLE_ENTITY,
                json!({"error": "out_of_range", "field": field, "value": value, "min": min, "max": max}),
            ),
            ApiError::Internal(msg) => (
                StatusCode::INTERNAL_SERVER_ERROR,
                json!({"error": "internal", "message": msg}),
            ),
        };
        (status, Json(body)).into_response()
    }
}

impl From<PipelineError> for ApiError {
    fn from(e: PipelineError) -> Self {
        ApiError::Internal(e.to_string())
    }
}

impl ServeState {
    /// Wind speed must lie in the training range (the scaling bounds);
    /// direction in `[0, 360)`.
    fn scenario(&self, req: &ScenarioRequest) -> std::result::Result<(ScenarioConfig, ScenarioEcho), ApiError> {
        let kind: IgnitionKind = req
            .pattern
            .parse()
            .map_err(|_| ApiError::UnknownPattern(req.pattern.clone()))?;
        let m = &self.data.manifest;
        if !self.data.sources.contains_key(&kind) {
            return Err(ApiError::UnknownPattern(req.pattern.clone()));
        }
        let (lo, hi) = (m.scaling.speed_min, m.scaling.speed_max);
        if !(req.wind_speed >= lo && req.wind_speed <= hi) {
            return Err(ApiError::OutOfRange {
                field: "wind_speed",
                value: req.wind_speed,
                min: lo,
                max: hi,
            });
        }
        if !(0.0..360.0).contains(&req.wind_direction) {
            return Err(ApiError::OutOfRange {
                field: "wind_direction",
                value: req.wind_direction,
                min: 0.0,
                max: 360.0,
            });
        }
        let scenario = m.scenario(kind, req.wind_speed, req.wind_direction, req.seed)?;
        let echo = ScenarioEcho {
            pattern: kind.to_string(),
            wind_speed: req.wind_speed,
            wind_direction: req.wind_direction,
            seed: req.seed,
            rows: m.rows,
            cols: m.cols,
            steps: m.steps,
        };
        Ok((scenario, echo))
    }

    fn respond(&self, echo: ScenarioEcho, values: &[f64], inference_ms: f64) -> Result<ScenarioResponse> {
        let (t, rows, cols) = (echo.steps, echo.rows, echo.cols);
        let n = rows * cols;
        let frames = values
            .chunks_exact(n)
            .map(|f| f.chunks_exact(cols).map(<[f64]>::to_vec).collect())
            .collect();
        let ba_percent = values.chunks_exact(n).map(|f| ba(f, self.eps_b)).collect();
        let mut ros = vec![0.0];
        ros.extend(ros_series(values, &[t, rows, cols], self.eps_b)?);
        Ok(ScenarioResponse {
            scenario: echo,
            frames,
            ba_percent,
            ros,
            inference_ms,
        })
    }
}

async fn patterns(State(s): State<Arc<ServeState>>) -> Json<serde_json::Value> {
    let m = &s.data.manifest;
    let names: Vec<&str> = s.data.sources.keys().map(|k| k.name()).collect();
    Json(json!({"patterns": names, "rows": m.rows, "cols": m.cols, "steps": m.steps}))
}

async fn runs(State(s): State<Arc<ServeState>>) -> Json<serde_json::Value> {
    let m = &s.data.manifest;
    let list: Vec<_> = m
        .runs
        .iter()
        .map(|r| {
            let split = if m.train.contains(&r.id) { "train" } else { "test" };
            json!({
                "id": r.id,
                "pattern": r.pattern.name(),
                "wind_speed": r.wind_speed,
                "wind_direction": r.wind_direction,
                "seed": r.seed,
                "split": split,
            })
        })
        .collect();
    Json(json!({"runs": list}))
}

async fn predict(
    State(s): State<Arc<ServeState>>,
    Json(req): Json<ScenarioRequest>,
) -> std::result::Result<Json<ScenarioResponse>, ApiError> {
    let (scenario, echo) = s.scenario(&req)?;
    let state = s.clone();
    let out = tokio::task::spawn_blocking(move || -> Result<ScenarioResponse> {
        let x = assemble_channels(&scenario, &state.data.manifest.scaling, &state.data.sources)?;
        let start = Instant::now();
        let y = state.model.predict(&x).map_err(PipelineError::from)?;
        let ms = start.elapsed().as_secs_f64() * 1e3;
        state.respond(echo, y.data(), ms)
    })
    .await
    .map_err(|e| ApiError::Internal(e.to_string()))??;
    Ok(Json(out))
}

async fn simulate_run(
    State(s): State<Arc<ServeState>>,
    Json(req): Json<ScenarioRequest>,
) -> std::result::Result<Json<ScenarioResponse>, ApiError> {
    let (scenario, echo) = s.scenario(&req)?;
    let state = s.clone();
    let out = tokio::task::spawn_blocking(move || -> Result<ScenarioResponse> {
        let start = Instant::now();
        let seq = simulate(&scenario)?;
        let ms = start.elapsed().as_secs_f64() * 1e3;
        state.respond(echo, &seq.values, ms)
    })
    .await
    .map_err(|e| ApiError::Internal(e.to_string()))??;
    Ok(Json(out))
}

pub fn router(state: Arc<ServeState>) -> Router {
    Router::new()
        .route("/patterns", get(patterns))
        .route("/runs", get(runs))
        .route("/predict", post(predict))
        .route("/simulate", post(simulate_run))
        .with_state(state)
}

/// Serves on loopback until the process is stopped.
pub async fn serve(port: u16, state: Arc<ServeState>) -> Result<()> {
    let addr = SocketAddr::from(([127, 0, 0, 1], port));
    let listener = tokio::net::TcpListener::bind(addr)
        .await
        .map_err(|source| PipelineError::Io {
            path: format!("tcp://{addr}").into(),
            source,
        })?;
    log::info!("listening on http://{addr}");
    axum::serve(listener, router(state))
        .await
        .map_err(|source| PipelineError::Io {
            path: format!("tcp://{addr}").into(),
            source,
        })
}
