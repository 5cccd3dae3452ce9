//! HTTP/JSON inference service.
//!
//! * `GET /volumes`: `[{id, dims, spacing}]`
//! * `GET /volumes/{id}/slice?axis=z&index=i`: 8-bit windowed PNG
//! * `POST /predict`: `{volume_id, point_mm, strategy, k, nonce?}` to the
//!   predicted plane, its spread, a recommendation and a PNG reslice
//!
//! Parameters and volumes are shared read-only. Sampling draws are seeded
//! from the request `nonce` (default 0), so identical requests return
//! identical bodies.

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::path::Path;
use std::sync::Arc;

use anyhow::{Context, Result};
use axum::extract::rejection::{JsonRejection, QueryRejection};
use axum::extract::{Path as UrlPath, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::Engine;
use serde::{Deserialize, Serialize};
use tokio::net::TcpListener;
use xsect_core::network::{checkpoint, NetworkParams};
use xsect_core::phantom::dataset::list_cases;
use xsect_core::uncertainty::{Choice, Strategy};
use xsect_core::volume::{reslice, IntensityWindow};
use xsect_core::{volume, Plane, Vec3, Volume};

use crate::image::{image_png, slice_png, Axis};
use crate::prediction;

/// Largest accepted draw count per request.
pub const MAX_K: usize = 1000;
/// Side (pixels) and pixel spacing (mm) of the reslice returned by `/predict`.
pub const RESLICE_SIZE: usize = 96;
pub const RESLICE_SPACING_MM: f64 = 0.5;

pub struct AppState {
    pub params: NetworkParams<f32>,
    pub volumes: BTreeMap<String, Volume>,
    pub window: IntensityWindow,
}

impl AppState {
    pub fn new(params: NetworkParams<f32>, volumes: BTreeMap<String, Volume>) -> Arc<Self> {
        Arc::new(Self {
            params,
            volumes,
            window: IntensityWindow::default(),
        })
    }

    /// Loads the checkpoint and every `*.adxv` volume in `data_dir`.
    pub fn load(checkpoint_path: &Path, data_dir: &Path) -> Result<Arc<Self>> {
        let (params, _) = checkpoint::load(checkpoint_path)
            .with_context(|| format!("loading checkpoint {}", checkpoint_path.display()))?;
        let mut volumes = BTreeMap::new();
        for id in list_cases(data_dir).with_context(|| format!("listing {}", data_dir.display()))? {
            let v = volume::load(data_dir.join(format!("{id}.adxv")))?;
            volumes.insert(id, v);
        }
        tracing::info!(volumes = volumes.len(), "loaded volumes");
        Ok(Self::new(params, volumes))
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/volumes", get(list_volumes))
        .route("/volumes/:id/slice", get(slice))
        .route("/predict", post(predict))
        .with_state(state)
}

/// Binds `addr`; an address already in use is an error.
pub async fn bind(addr: SocketAddr) -> Result<TcpListener> {
    TcpListener::bind(addr)
        .await
        .with_context(|| format!("binding {addr}"))
}

pub async fn serve(listener: TcpListener, state: Arc<AppState>) -> Result<()> {
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    message: String,
}

impl ApiError {
    fn bad_request(message: impl Into<String>) -> Self {
        Self {
            status: StatusCode::BAD_REQUEST,
            message: message.into(),
        }
    }

    fn not_found(message: impl Into<String>) -> Self {
        Self {
            status: StatusCode::NOT_FOUND,
            message: message.into(),
        }
    }

    fn internal(message: impl Into<String>) -> Self {
        Self {
            status: StatusCode::INTERNAL_SERVER_ERROR,
            message: message.into(),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (
            self.status,
            Json(serde_json::json!({ "error": self.message })),
        )
            .into_response()
    }
}

impl From<JsonRejection> for ApiError {
    fn from(r: JsonRejection) -> Self {
        Self::bad_request(r.body_text())
    }
}

impl From<QueryRejection> for ApiError {
    fn from(r: QueryRejection) -> Self {
        Self::bad_request(r.body_text())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VolumeInfo {
    pub id: String,
    pub dims: [usize; 3],
    pub spacing: [f32; 3],
}

async fn list_volumes(State(s): State<Arc<AppState>>) -> Json<Vec<VolumeInfo>> {
    Json(
        s.volumes
            .iter()
            .map(|(id, v)| VolumeInfo {
                id: id.clone(),
                dims: v.dims(),
                spacing: v.spacing(),
            })
            .collect(),
    )
}

#[derive(Debug, Deserialize)]
pub struct SliceQuery {
    pub axis: String,
    pub index: usize,
}

fn find<'a>(s: &'a AppState, id: &str) -> Result<&'a Volume, ApiError> {
    s.volumes
        .get(id)
        .ok_or_else(|| ApiError::not_found(format!("unknown volume {id:?}")))
}

async fn slice(
    State(s): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    q: Result<Query<SliceQuery>, QueryRejection>,
) -> Result<Response, ApiError> {
    let Query(q) = q?;
    let v = find(&s, &id)?;
    let axis: Axis = q
        .axis
        .parse()
        .map_err(|e: anyhow::Error| ApiError::bad_request(e.to_string()))?;
    let png =
        slice_png(v, axis, q.index, &s.window).map_err(|e| ApiError::bad_request(e.to_string()))?;
    Ok(([(header::CONTENT_TYPE, "image/png")], png).into_response())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PredictRequest {
    pub volume_id: String,
    pub point_mm: [f64; 3],
    pub strategy: String,
    pub k: usize,
    #[serde(default)]
    pub nonce: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecommendationBody {
    pub theta: Choice,
    pub phi: Choice,
    pub fallback: bool,
    pub ins_std_deg: [f64; 2],
    pub mcdbs_std_deg: [f64; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictResponse {
    pub theta_deg: f64,
    pub phi_deg: f64,
    pub std_theta_deg: f64,
    pub std_phi_deg: f64,
    pub k: usize,
    pub strategy: Strategy,
    /// Absent for single-pass predictions.
    pub recommendation: Option<RecommendationBody>,
    pub reslice_png_base64: String,
}

fn run_predict(s: &AppState, req: &PredictRequest) -> Result<PredictResponse, ApiError> {
    let v = find(s, &req.volume_id)?;
    let strategy: Strategy = req
        .strategy
        .parse()
        .map_err(|e: xsect_core::Error| ApiError::bad_request(e.to_string()))?;
    if req.k == 0 || req.k > MAX_K {
        return Err(ApiError::bad_request(format!("k must be in 1..={MAX_K}")));
    }
    let pivot = Vec3::from(req.point_mm);
    if !pivot.iter().all(|c| c.is_finite()) || !v.contains(&pivot) {
        return Err(ApiError::bad_request("point_mm lies outside the volume"));
    }
    let p = prediction::run(&s.params, v, &pivot, strategy, req.k, req.nonce)
        .map_err(|e| ApiError::bad_request(format!("{e:#}")))?;
    let d = &p.distribution;
    let plane = Plane::new(pivot, d.mean).map_err(|e| ApiError::internal(e.to_string()))?;
    let img = reslice(v, &plane, RESLICE_SIZE, RESLICE_SPACING_MM)
        .map_err(|e| ApiError::internal(e.to_string()))?;
    let png = image_png(&img, &s.window).map_err(|e| ApiError::internal(e.to_string()))?;
    let std = d.std_deg();
    Ok(PredictResponse {
        theta_deg: d.mean.theta_deg(),
        phi_deg: d.mean.phi_deg(),
        std_theta_deg: std[0],
        std_phi_deg: std[1],
        k: d.k(),
        strategy: d.strategy,
        recommendation: p.recommendation.map(|r| RecommendationBody {
            theta: r.theta,
            phi: r.phi,
            fallback: r.any_fallback(),
            ins_std_deg: r.ins_std_deg,
            mcdbs_std_deg: r.mcdbs_std_deg,
        }),
        reslice_png_base64: base64::engine::general_purpose::STANDARD.encode(png),
    })
}

async fn predict(
    State(s): State<Arc<AppState>>,
    body: Result<Json<PredictRequest>, JsonRejection>,
) -> Result<Json<PredictResponse>, ApiError> {
    let Json(req) = body?;
    let out = tokio::task::spawn_blocking(move || run_predict(&s, &req))
        .await
        .map_err(|e| ApiError::internal(e.to_string()))??;
    Ok(Json(out))
}
