//! HTTP JSON planning service.
//!
//! | route              | body                         | reply                      |
//! |--------------------|------------------------------|----------------------------|
//! | `GET /api/model`   |                              | [`ModelInfo`]              |
//! | `GET /api/demos`   |                              | list of [`DemoView`]       |
//! | `POST /api/plan`   | `PlanRequest`                | `PlanResult`               |
//! | `POST /api/traverse` | [`TraverseRequest`]        | [`TraverseResponse`]       |
//!
//! Malformed JSON is 400. Requests that parse but do not fit the model, or
//! ask for an unreachable goal, are 422. A projection that runs out of
//! iterations is 409 with the best result under `best`.

use std::net::SocketAddr;
use std::sync::Arc;

use atp_core::atpmodel::AtpModel;
use atp_core::augmentation::DemoRecord;
use atp_core::planner::{ee_path, latent_traversal, linspace, plan, PlanRequest, PlanResult, TraversalAxis};
use atp_core::projection::ProjectionConfig;
use atp_core::trajectory::Trajectory;
use atp_core::AtpError;
use axum::body::Bytes;
use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use tower_http::cors::CorsLayer;

/// Grid used by `/api/traverse` when the request gives none.
pub const DEFAULT_GRID: (f64, f64, usize) = (-2.5, 2.5, 7);

/// Immutable snapshot served to every request.
#[derive(Debug, Clone)]
pub struct ServiceState {
    pub model: AtpModel,
    pub projection: ProjectionConfig,
    pub demos: Vec<DemoRecord>,
}

impl ServiceState {
    pub fn new(model: AtpModel, projection: ProjectionConfig, demos: Vec<DemoRecord>) -> Result<Self, AtpError> {
        projection.validate()?;
        for demo in &demos {
            if demo.chain != *model.chain() {
                return Err(AtpError::InvalidArgument("demo chain differs from the model chain".into()));
            }
            if demo.trajectory.steps() != model.dims().steps {
                return Err(AtpError::DimensionMismatch {
                    context: "demo steps vs model",
                    expected: model.dims().steps,
                    actual: demo.trajectory.steps(),
                });
            }
        }
        Ok(Self { model, projection, demos })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelInfo {
    pub k_z: usize,
    pub k_c: usize,
    pub dof: usize,
    pub steps: usize,
    pub workspace_dim: usize,
    pub link_lengths: Vec<f64>,
    /// Final-epoch KL per continuous unit; `null` for an untrained model.
    pub per_unit_kl: Option<Vec<f64>>,
    pub demo_goals: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemoView {
    pub family: usize,
    pub variant: usize,
    pub trajectory: Trajectory,
    pub ee_path: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TraverseRequest {
    pub fixed: PlanRequest,
    pub axis: TraversalAxis,
    #[serde(default)]
    pub grid: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraverseResponse {
    pub axis: TraversalAxis,
    pub grid: Vec<f64>,
    pub results: Vec<PlanResult>,
}

#[derive(Debug, Serialize)]
struct ErrorBody {
    error: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    best: Option<PlanResult>,
}

#[derive(Debug)]
pub enum ApiError {
    BadJson(String),
    Invalid(String),
    Domain(AtpError),
}

impl From<AtpError> for ApiError {
    fn from(e: AtpError) -> Self {
        ApiError::Domain(e)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let (status, error, best) = match self {
            ApiError::BadJson(msg) => (StatusCode::BAD_REQUEST, msg, None),
            ApiError::Invalid(msg) => (StatusCode::UNPROCESSABLE_ENTITY, msg, None),
            ApiError::Domain(e) => {
                let msg = e.to_string();
                match e {
                    AtpError::NotConverged(best) => (StatusCode::CONFLICT, msg, Some(*best)),
                    AtpError::DimensionMismatch { .. }
                    | AtpError::InvalidArgument(_)
                    | AtpError::Unreachable { .. }
                    | AtpError::NonFinite(_) => (StatusCode::UNPROCESSABLE_ENTITY, msg, None),
                    _ => (StatusCode::INTERNAL_SERVER_ERROR, msg, None),
                }
            }
        };
        if status.is_server_error() {
            log::error!("{error}");
        }
        (status, Json(ErrorBody { error, best })).into_response()
    }
}

/// Two-stage parse so syntax errors (400) are told apart from schema errors (422).
fn parse_body<T: DeserializeOwned>(body: &[u8]) -> Result<T, ApiError> {
    let value: serde_json::Value = serde_json::from_slice(body).map_err(|e| ApiError::BadJson(e.to_string()))?;
    serde_json::from_value(value).map_err(|e| ApiError::Invalid(e.to_string()))
}

pub fn model_info(state: &ServiceState) -> Result<ModelInfo, AtpError> {
    let dims = state.model.dims();
    let chain = state.model.chain();
    let demo_goals = state
        .demos
        .iter()
        .map(|d| Ok(chain.forward_kinematics(&d.trajectory.last())?.as_slice().to_vec()))
        .collect::<Result<_, AtpError>>()?;
    Ok(ModelInfo {
        k_z: dims.k_z,
        k_c: dims.k_c,
        dof: dims.dof,
        steps: dims.steps,
        workspace_dim: dims.workspace_dim,
        link_lengths: chain.link_lengths().to_vec(),
        per_unit_kl: state.model.meta.per_unit_kl.clone(),
        demo_goals,
    })
}

async fn get_model(State(state): State<Arc<ServiceState>>) -> Result<Json<ModelInfo>, ApiError> {
    Ok(Json(model_info(&state)?))
}

async fn get_demos(State(state): State<Arc<ServiceState>>) -> Result<Json<Vec<DemoView>>, ApiError> {
    let chain = state.model.chain();
    let views = state
        .demos
        .iter()
        .map(|d| {
            Ok(DemoView {
                family: d.family,
                variant: d.variant,
                trajectory: d.trajectory.clone(),
                ee_path: ee_path(chain, &d.trajectory)?,
            })
        })
        .collect::<Result<_, AtpError>>()?;
    Ok(Json(views))
}

async fn post_plan(State(state): State<Arc<ServiceState>>, body: Bytes) -> Result<Json<PlanResult>, ApiError> {
    let req: PlanRequest = parse_body(&body)?;
    Ok(Json(plan(&state.model, &req, &state.projection)?))
}

async fn post_traverse(
    State(state): State<Arc<ServiceState>>,
    body: Bytes,
) -> Result<Json<TraverseResponse>, ApiError> {
    let req: TraverseRequest = parse_body(&body)?;
    let grid = match (&req.axis, req.grid) {
        (TraversalAxis::Discrete, _) => Vec::new(),
        (_, Some(grid)) => grid,
        (_, None) => linspace(DEFAULT_GRID.0, DEFAULT_GRID.1, DEFAULT_GRID.2),
    };
    if grid.iter().any(|v| !v.is_finite()) {
        return Err(ApiError::Invalid("traversal grid must be finite".into()));
    }
    let results = latent_traversal(&state.model, &req.fixed, req.axis, &grid, &state.projection)?;
    Ok(Json(TraverseResponse {
        axis: req.axis,
        grid,
        results,
    }))
}

pub fn router(state: Arc<ServiceState>) -> Router {
    Router::new()
        .route("/api/model", get(get_model))
        .route("/api/demos", get(get_demos))
        .route("/api/plan", post(post_plan))
        .route("/api/traverse", post(post_traverse))
        .layer(CorsLayer::permissive())
        .with_state(state)
}

/// Serve until the process is stopped.
pub async fn serve(state: ServiceState, addr: SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on http://{}", listener.local_addr()?);
    axum::serve(listener, router(Arc::new(state))).await
}
