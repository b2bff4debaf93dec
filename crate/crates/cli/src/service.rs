//! HTTP service for interactive acquisition and prediction.
//!
//! | method | path | body | response |
//! |---|---|---|---|
//! | GET | `/v1/schemas` | | `{"schemas": [Schema]}` |
//! | POST | `/v1/sessions` | `{"dataset" or "schema", "target", "budget", "n_v"?, "epsilon_mi"?}` | `201` [`SessionWire`] |
//! | GET | `/v1/sessions/{id}` | | [`SessionWire`] |
//! | POST | `/v1/sessions/{id}/values` | `{"feature_id", "value"}` | [`SessionWire`] |
//! | DELETE | `/v1/sessions/{id}` | | `204` |
//! | POST | `/v1/predict` | `{"dataset" or "schema", "observed", "targets", "shots"?}` | `{"targets": [Summary]}` |
//!
//! Errors are `{"error": message, "field": id?}` with status 404 for an
//! unknown session or dataset, 409 for a value the session cannot accept
//! (already acquired, over budget, terminated) and 422 for a malformed
//! feature or value. Model parameters are shared read-only; each session is
//! mutated under its own lock.

use std::collections::{BTreeMap, HashMap};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use axum::extract::rejection::JsonRejection;
use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use setinfer_core::afa::{acquire, suggest_next, AfaConfig, AfaError, AfaSession, Phase};
use setinfer_core::model::{Predictor, Query};
use setinfer_core::{DatasetBundle, Error, Schema};

use crate::wire::{
    instance_from_map, query_from_map, value_from_wire, CreateSession, ErrorBody, PredictRequest, PredictResponse, SchemaList,
    SessionWire, SubmitValue,
};

#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub body: ErrorBody,
}

impl ApiError {
    fn new(status: StatusCode, error: impl Into<String>, field: Option<String>) -> Self {
        Self {
            status,
            body: ErrorBody {
                error: error.into(),
                field,
            },
        }
    }

    fn not_found(what: &str) -> Self {
        Self::new(StatusCode::NOT_FOUND, format!("{what} not found"), None)
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let msg = e.to_string();
        let (status, field) = match e {
            Error::Acquisition(AfaError::IsTarget(f)) => (StatusCode::UNPROCESSABLE_ENTITY, Some(f)),
            Error::Acquisition(AfaError::Config(_)) => (StatusCode::UNPROCESSABLE_ENTITY, None),
            Error::Acquisition(AfaError::AlreadyAcquired(f)) => (StatusCode::CONFLICT, Some(f)),
            Error::Acquisition(AfaError::InsufficientBudget { feature, .. }) => (StatusCode::CONFLICT, Some(feature)),
            Error::Acquisition(AfaError::Terminated) => (StatusCode::CONFLICT, None),
            Error::UnknownFeature(f)
            | Error::TargetObserved(f)
            | Error::InvalidValue { feature: f, .. }
            | Error::InvalidFeature { feature: f, .. } => (StatusCode::UNPROCESSABLE_ENTITY, Some(f)),
            Error::Model(_) | Error::Dataset(_) => (StatusCode::UNPROCESSABLE_ENTITY, None),
            _ => (StatusCode::INTERNAL_SERVER_ERROR, None),
        };
        Self::new(status, msg, field)
    }
}

impl From<JsonRejection> for ApiError {
    fn from(r: JsonRejection) -> Self {
        Self::new(StatusCode::UNPROCESSABLE_ENTITY, r.body_text(), None)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(self.body)).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

struct Entry {
    session: AfaSession,
    rng: ChaCha8Rng,
}

pub struct AppState {
    model: Arc<dyn Predictor + Send>,
    schemas: BTreeMap<String, Schema>,
    sessions: Mutex<HashMap<String, Arc<Mutex<Entry>>>>,
    next_id: AtomicU64,
    seed: u64,
}

impl AppState {
    /// Serve `model` over the schemas of `datasets`; `seed` fixes the
    /// sampling streams of the sessions, in creation order.
    pub fn new(model: Arc<dyn Predictor + Send>, datasets: &[DatasetBundle], seed: u64) -> Self {
        Self {
            model,
            schemas: datasets.iter().map(|d| (d.name().to_string(), d.schema.clone())).collect(),
            sessions: Mutex::new(HashMap::new()),
            next_id: AtomicU64::new(1),
            seed,
        }
    }

    fn resolve(&self, dataset: &Option<String>, schema: &Option<Schema>) -> ApiResult<Schema> {
        match (dataset, schema) {
            (Some(name), _) => self
                .schemas
                .get(name)
                .cloned()
                .ok_or_else(|| ApiError::not_found(&format!("dataset `{name}`"))),
            (None, Some(s)) => {
                s.validate()?;
                Ok(s.clone())
            }
            (None, None) => Err(ApiError::new(
                StatusCode::UNPROCESSABLE_ENTITY,
                "either `dataset` or `schema` is required",
                Some("dataset".into()),
            )),
        }
    }

    fn entry(&self, id: &str) -> ApiResult<Arc<Mutex<Entry>>> {
        self.sessions
            .lock()
            .expect("session table lock")
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::not_found(&format!("session `{id}`")))
    }

    fn view(&self, id: &str, e: &Entry) -> ApiResult<SessionWire> {
        let prediction = e.session.predict_target(self.model.as_ref())?.targets[0].summary();
        Ok(SessionWire::from_session(id, &e.session, prediction))
    }

    /// Refresh the pending suggestion unless the session has ended.
    fn suggest(&self, e: &mut Entry) -> ApiResult<()> {
        if e.session.phase == Phase::Active {
            suggest_next(&mut e.session, self.model.as_ref(), &mut e.rng)?;
        }
        Ok(())
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/v1/schemas", get(list_schemas))
        .route("/v1/sessions", post(create_session))
        .route("/v1/sessions/{id}", get(get_session).delete(delete_session))
        .route("/v1/sessions/{id}/values", post(submit_value))
        .route("/v1/predict", post(predict))
        .with_state(state)
}

/// Run model work off the async executor.
async fn blocking<T: Send + 'static>(f: impl FnOnce() -> ApiResult<T> + Send + 'static) -> ApiResult<T> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string(), None))?
}

async fn list_schemas(State(st): State<Arc<AppState>>) -> Json<SchemaList> {
    Json(SchemaList {
        schemas: st.schemas.values().cloned().collect(),
    })
}

async fn create_session(
    State(st): State<Arc<AppState>>,
    body: Result<Json<CreateSession>, JsonRejection>,
) -> ApiResult<(StatusCode, Json<SessionWire>)> {
    let Json(req) = body?;
    let schema = st.resolve(&req.dataset, &req.schema)?;
    let mut cfg = AfaConfig::new(&req.target, req.budget);
    if let Some(n) = req.n_v {
        cfg.n_v = n;
    }
    if let Some(e) = req.epsilon_mi {
        cfg.epsilon_mi = e;
    }
    if schema.feature(&req.target).is_none() {
        return Err(ApiError::new(
            StatusCode::UNPROCESSABLE_ENTITY,
            format!("unknown target `{}`", req.target),
            Some("target".into()),
        ));
    }
    let session = AfaSession::new(schema, cfg)?;
    let n = st.next_id.fetch_add(1, Ordering::SeqCst);
    let id = format!("s{n}");
    let rng = ChaCha8Rng::seed_from_u64(st.seed.wrapping_add(n));
    let st2 = st.clone();
    let id2 = id.clone();
    let (entry, view) = blocking(move || {
        let mut e = Entry { session, rng };
        st2.suggest(&mut e)?;
        let view = st2.view(&id2, &e)?;
        Ok((e, view))
    })
    .await?;
    st.sessions
        .lock()
        .expect("session table lock")
        .insert(id, Arc::new(Mutex::new(entry)));
    Ok((StatusCode::CREATED, Json(view)))
}

async fn get_session(State(st): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Json<SessionWire>> {
    let entry = st.entry(&id)?;
    let view = blocking(move || {
        let e = entry.lock().expect("session lock");
        st.view(&id, &e)
    })
    .await?;
    Ok(Json(view))
}

async fn submit_value(
    State(st): State<Arc<AppState>>,
    Path(id): Path<String>,
    body: Result<Json<SubmitValue>, JsonRejection>,
) -> ApiResult<Json<SessionWire>> {
    let Json(req) = body?;
    let entry = st.entry(&id)?;
    let view = blocking(move || {
        let mut e = entry.lock().expect("session lock");
        let value = value_from_wire(&e.session.schema, &req.feature_id, &req.value)?;
        acquire(&mut e.session, &req.feature_id, value, st.model.as_ref())?;
        st.suggest(&mut e)?;
        st.view(&id, &e)
    })
    .await?;
    Ok(Json(view))
}

async fn delete_session(State(st): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<StatusCode> {
    st.sessions
        .lock()
        .expect("session table lock")
        .remove(&id)
        .map(|_| StatusCode::NO_CONTENT)
        .ok_or_else(|| ApiError::not_found(&format!("session `{id}`")))
}

async fn predict(
    State(st): State<Arc<AppState>>,
    body: Result<Json<PredictRequest>, JsonRejection>,
) -> ApiResult<Json<PredictResponse>> {
    let Json(req) = body?;
    let schema = st.resolve(&req.dataset, &req.schema)?;
    let resp = blocking(move || {
        let instance = query_from_map(&schema, &req.observed)?;
        for t in &req.targets {
            schema.require(t)?;
            if instance.is_observed(t) {
                return Err(Error::TargetObserved(t.clone()).into());
            }
        }
        let shots = req
            .shots
            .iter()
            .map(|s| instance_from_map(&schema, s))
            .collect::<Result<Vec<_>, _>>()?;
        let pred = st.model.predict(&Query {
            schema: &schema,
            instance: &instance,
            shots: &shots,
            targets: &req.targets,
        })?;
        Ok(PredictResponse {
            targets: pred.summaries(),
        })
    })
    .await?;
    Ok(Json(resp))
}

/// Bind and serve until interrupted.
pub async fn serve(state: Arc<AppState>, addr: std::net::SocketAddr) -> anyhow::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on http://{}", listener.local_addr()?);
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}
