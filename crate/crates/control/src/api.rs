//! The HTTP JSON API.

use std::collections::BTreeMap;
use std::future::Future;
use std::net::SocketAddr;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Path, Query, State};
use axum::http::header::CONTENT_TYPE;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::Router;
use evodw_core::engine::Engine;
use tokio::net::TcpListener;

use crate::config::EngineConfig;
use crate::error::ApiError;
use crate::ops::{change_ref, execute, parse, parse_level, parse_status, query_for, ActorBody, Request};

type Shared = Arc<Engine>;
type Params = Query<BTreeMap<String, String>>;

async fn respond(engine: Shared, req: Result<Request, ApiError>) -> Response {
    let out = match req {
        Ok(r) => tokio::task::spawn_blocking(move || execute(&engine, r))
            .await
            .unwrap_or_else(|e| Err(ApiError::new("IO_ERROR", e.to_string()))),
        Err(e) => Err(e),
    };
    match out {
        Ok(body) => ([(CONTENT_TYPE, "application/json")], body).into_response(),
        Err(e) => error_response(&e),
    }
}

fn error_response(e: &ApiError) -> Response {
    let status = StatusCode::from_u16(e.status()).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
    (status, [(CONTENT_TYPE, "application/json")], e.body().to_string()).into_response()
}

async fn post_schema(State(e): State<Shared>, body: Bytes) -> Response {
    respond(e, parse(&body).map(Request::PutSchema)).await
}

async fn get_schema(State(e): State<Shared>, Path(id): Path<String>, Query(q): Params) -> Response {
    let version = q
        .get("version")
        .map(|v| v.parse::<u32>().map_err(|_| ApiError::invalid(format!("version {v:?}"))))
        .transpose();
    respond(e, version.map(|version| Request::GetSchema { dataset_id: id, version })).await
}

async fn post_source(State(e): State<Shared>, body: Bytes) -> Response {
    respond(e, parse(&body).map(Request::RegisterSource)).await
}

async fn list_sources(State(e): State<Shared>) -> Response {
    respond(e, Ok(Request::ListSources)).await
}

async fn post_batch(State(e): State<Shared>, Path(id): Path<String>, body: Bytes) -> Response {
    respond(e, Ok(Request::Ingest { source_id: id, body: body.to_vec() })).await
}

async fn post_mapping(State(e): State<Shared>, body: Bytes) -> Response {
    respond(e, parse(&body).map(Request::PutMapping)).await
}

async fn list_mappings(State(e): State<Shared>) -> Response {
    respond(e, Ok(Request::ListMappings)).await
}

async fn post_rule(State(e): State<Shared>, body: Bytes) -> Response {
    respond(e, parse(&body).map(Request::PutRule)).await
}

async fn tick(State(e): State<Shared>) -> Response {
    respond(e, Ok(Request::Tick)).await
}

async fn level_datasets(State(e): State<Shared>, Path(n): Path<String>) -> Response {
    respond(e, parse_level(&n).map(Request::LevelDatasets)).await
}

async fn records(State(e): State<Shared>, Path((n, id)): Path<(String, String)>) -> Response {
    respond(e, parse_level(&n).map(|level| Request::Records { level, dataset_id: id })).await
}

async fn changes(State(e): State<Shared>, Query(q): Params) -> Response {
    let status = q.get("status").filter(|s| !s.is_empty()).map(|s| parse_status(s)).transpose();
    respond(e, status.map(Request::Changes)).await
}

async fn propose(State(e): State<Shared>, Path(id): Path<String>, body: Bytes) -> Response {
    let req = parse::<ActorBody>(&body).map(|b| Request::Propose { change_id: id, actor: b.actor });
    respond(e, req).await
}

async fn options(State(e): State<Shared>, Path(id): Path<String>) -> Response {
    respond(e, Ok(Request::Options(id))).await
}

async fn initiate(State(e): State<Shared>, body: Bytes) -> Response {
    respond(e, parse(&body).map(Request::Initiate)).await
}

async fn preview(State(e): State<Shared>, Path(pc): Path<String>) -> Response {
    respond(e, Ok(Request::Preview(pc))).await
}

async fn apply(State(e): State<Shared>, Path((change, pc)): Path<(String, String)>, body: Bytes) -> Response {
    let req = parse(&body).map(|body| Request::Apply { change_id: change_ref(&change), pc_id: pc, body });
    respond(e, req).await
}

async fn reject(State(e): State<Shared>, Path(pc): Path<String>, body: Bytes) -> Response {
    let req = parse::<ActorBody>(&body).map(|b| Request::Reject { pc_id: pc, actor: b.actor });
    respond(e, req).await
}

async fn create_cube(State(e): State<Shared>, body: Bytes) -> Response {
    respond(e, parse(&body).map(Request::CreateCube)).await
}

async fn materialize(State(e): State<Shared>, Path(id): Path<String>) -> Response {
    respond(e, Ok(Request::Materialize(id))).await
}

async fn query(State(e): State<Shared>, Path(id): Path<String>, body: Bytes) -> Response {
    respond(e, parse(&body).and_then(|q| query_for(&id, q)).map(Request::Query)).await
}

async fn navigate(State(e): State<Shared>, Path(id): Path<String>, body: Bytes) -> Response {
    let req = parse::<crate::ops::Navigation>(&body).and_then(|mut n| {
        n.query = query_for(&id, n.query)?;
        Ok(Request::Navigate(n))
    });
    respond(e, req).await
}

async fn export(State(e): State<Shared>) -> Response {
    respond(e, Ok(Request::Export)).await
}

async fn import(State(e): State<Shared>, body: Bytes) -> Response {
    let text = String::from_utf8(body.to_vec()).map_err(ApiError::malformed);
    respond(e, text.map(Request::Import)).await
}

async fn validate(State(e): State<Shared>) -> Response {
    respond(e, Ok(Request::Validate)).await
}

async fn history(State(e): State<Shared>) -> Response {
    respond(e, Ok(Request::History)).await
}

async fn no_route() -> Response {
    error_response(&ApiError::new("ROUTE_NOT_FOUND", "no such endpoint"))
}

pub fn router(engine: Shared) -> Router {
    Router::new()
        .route("/schemas", post(post_schema))
        .route("/schemas/{id}", get(get_schema))
        .route("/sources", post(post_source).get(list_sources))
        .route("/sources/{id}/batches", post(post_batch))
        .route("/mappings", post(post_mapping).get(list_mappings))
        .route("/rules", post(post_rule))
        .route("/elt/tick", post(tick))
        .route("/levels/{n}/datasets", get(level_datasets))
        .route("/levels/{n}/datasets/{id}/records", get(records))
        .route("/changes", get(changes))
        .route("/changes/{id}/propose", post(propose))
        .route("/changes/{id}/options", get(options))
        .route("/changes/{id}/options/{pc}/apply", post(apply))
        .route("/options", post(initiate))
        .route("/options/{pc}/preview", get(preview))
        .route("/options/{pc}/reject", post(reject))
        .route("/cubes", post(create_cube))
        .route("/cubes/{id}/materialize", post(materialize))
        .route("/cubes/{id}/query", post(query))
        .route("/cubes/{id}/navigate", post(navigate))
        .route("/metadata/export", get(export))
        .route("/metadata/import", post(import))
        .route("/metadata/validate", get(validate))
        .route("/history", get(history))
        .fallback(no_route)
        .with_state(engine)
}

pub async fn bind(port: u16) -> Result<TcpListener, ApiError> {
    TcpListener::bind(("127.0.0.1", port)).await.map_err(|e| match e.kind() {
        std::io::ErrorKind::AddrInUse => ApiError::new("PORT_IN_USE", format!("port {port}: {e}")),
        _ => ApiError::new("IO_ERROR", format!("port {port}: {e}")),
    })
}

/// Serves on `listener` until `shutdown` resolves. Every committed
/// mutation has already reached disk, so stopping needs no extra flush.
pub async fn run(
    listener: TcpListener,
    engine: Shared,
    shutdown: impl Future<Output = ()> + Send + 'static,
) -> Result<(), ApiError> {
    axum::serve(listener, router(engine))
        .with_graceful_shutdown(shutdown)
        .await
        .map_err(|e| ApiError::new("IO_ERROR", e.to_string()))
}

/// Opens the configured store and serves it until interrupted.
pub async fn serve(config: &EngineConfig) -> Result<(), ApiError> {
    let engine = Arc::new(config.open()?);
    let listener = bind(config.http_port).await?;
    run(listener, engine, async {
        let _ = tokio::signal::ctrl_c().await;
    })
    .await
}

/// A server on its own thread and runtime, stopped when dropped.
pub struct Background {
    pub addr: SocketAddr,
    stop: Option<tokio::sync::oneshot::Sender<()>>,
    thread: Option<std::thread::JoinHandle<Result<(), ApiError>>>,
}

impl Background {
    pub fn start(engine: Shared, port: u16) -> Result<Background, ApiError> {
        let rt = tokio::runtime::Builder::new_multi_thread()
            .worker_threads(2)
            .enable_all()
            .build()
            .map_err(|e| ApiError::new("IO_ERROR", e.to_string()))?;
        let listener = rt.block_on(bind(port))?;
        let addr = listener.local_addr().map_err(|e| ApiError::new("IO_ERROR", e.to_string()))?;
        let (tx, rx) = tokio::sync::oneshot::channel();
        let thread = std::thread::spawn(move || {
            rt.block_on(run(listener, engine, async {
                let _ = rx.await;
            }))
        });
        Ok(Background { addr, stop: Some(tx), thread: Some(thread) })
    }

    pub fn url(&self, path: &str) -> String {
        format!("http://{}{path}", self.addr)
    }
}

impl Drop for Background {
    fn drop(&mut self) {
        if let Some(tx) = self.stop.take() {
            let _ = tx.send(());
        }
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}
