//! Tool-shaped HTTP surface over the sandbox.
//!
//! `GET /tools` returns the tool schema; `POST /tools/execute_sql_query`
//! takes `{"db_name": ..., "sql": ...}`. Query failures are reported in the
//! payload with status 200; only bodies that are not a valid request get 400.

use std::future::Future;
use std::net::SocketAddr;
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::Duration;

use axum::body::Bytes;
use axum::extract::State;
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::Router;
use serde::Deserialize;
use tokio::sync::oneshot;

use super::{render_payload, Cell, ExecError, ExecErrorKind, ExecOutcome, QueryResult, Sandbox, SandboxClient};

/// Tool schema served at `GET /tools` and embedded in the system prompt.
pub const TOOL_SCHEMA_JSON: &str = include_str!("../../data/tool_schema.json");

#[derive(Debug, Deserialize)]
struct ExecuteRequest {
    db_name: String,
    sql: String,
}

fn json_response(status: StatusCode, body: String) -> Response {
    (status, [(header::CONTENT_TYPE, "application/json")], body).into_response()
}

async fn list_tools() -> Response {
    json_response(StatusCode::OK, TOOL_SCHEMA_JSON.to_string())
}

async fn execute_sql_query(State(sandbox): State<Arc<Sandbox>>, body: Bytes) -> Response {
    let req: ExecuteRequest = match serde_json::from_slice(&body) {
        Ok(r) => r,
        Err(e) => {
            let msg = serde_json::json!({ "error": format!("invalid request: {e}") });
            return json_response(StatusCode::BAD_REQUEST, msg.to_string());
        }
    };
    let outcome = tokio::task::spawn_blocking(move || sandbox.execute_query(&req.db_name, &req.sql)).await;
    match outcome {
        Ok(outcome) => json_response(StatusCode::OK, render_payload(&outcome)),
        Err(e) => json_response(
            StatusCode::INTERNAL_SERVER_ERROR,
            serde_json::json!({ "error": format!("executor task failed: {e}") }).to_string(),
        ),
    }
}

pub fn router(sandbox: Sandbox) -> Router {
    Router::new()
        .route("/tools", get(list_tools))
        .route("/tools/execute_sql_query", post(execute_sql_query))
        .with_state(Arc::new(sandbox))
}

/// Serve until `shutdown` resolves.
pub async fn serve_tool(
    sandbox: Sandbox,
    listener: tokio::net::TcpListener,
    shutdown: impl Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    axum::serve(listener, router(sandbox)).with_graceful_shutdown(shutdown).await
}

/// A server running on its own thread and runtime.
pub struct ToolServerHandle {
    addr: SocketAddr,
    stop: Option<oneshot::Sender<()>>,
    thread: Option<JoinHandle<std::io::Result<()>>>,
}

impl ToolServerHandle {
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn base_url(&self) -> String {
        format!("http://{}", self.addr)
    }

    pub fn shutdown(mut self) -> std::io::Result<()> {
        self.stop_and_join()
    }

    fn stop_and_join(&mut self) -> std::io::Result<()> {
        if let Some(stop) = self.stop.take() {
            let _ = stop.send(());
        }
        match self.thread.take() {
            Some(t) => t.join().unwrap_or_else(|_| Err(std::io::Error::other("server thread panicked"))),
            None => Ok(()),
        }
    }
}

impl Drop for ToolServerHandle {
    fn drop(&mut self) {
        let _ = self.stop_and_join();
    }
}

/// Bind `bind` (port 0 picks a free port) and serve in the background.
pub fn spawn_tool_server(sandbox: Sandbox, bind: SocketAddr) -> std::io::Result<ToolServerHandle> {
    let std_listener = std::net::TcpListener::bind(bind)?;
    std_listener.set_nonblocking(true)?;
    let addr = std_listener.local_addr()?;
    let (stop, stopped) = oneshot::channel::<()>();
    let thread = std::thread::Builder::new().name("tool-server".into()).spawn(move || {
        let rt = tokio::runtime::Builder::new_multi_thread().worker_threads(2).enable_all().build()?;
        rt.block_on(async move {
            let listener = tokio::net::TcpListener::from_std(std_listener)?;
            serve_tool(sandbox, listener, async {
                let _ = stopped.await;
            })
            .await
        })
    })?;
    Ok(ToolServerHandle { addr, stop: Some(stop), thread: Some(thread) })
}

/// Blocking client for a remote tool service.
#[derive(Debug, Clone)]
pub struct HttpToolClient {
    base_url: String,
    http: reqwest::blocking::Client,
}

impl HttpToolClient {
    pub fn new(base_url: impl Into<String>) -> Result<Self, reqwest::Error> {
        Self::with_timeout(base_url, Duration::from_secs(120))
    }

    pub fn with_timeout(base_url: impl Into<String>, timeout: Duration) -> Result<Self, reqwest::Error> {
        let http = reqwest::blocking::Client::builder().timeout(timeout).build()?;
        Ok(HttpToolClient { base_url: base_url.into().trim_end_matches('/').to_string(), http })
    }

    pub fn tools(&self) -> Result<serde_json::Value, reqwest::Error> {
        self.http.get(format!("{}/tools", self.base_url)).send()?.error_for_status()?.json()
    }
}

/// Rebuild an outcome from a service payload.
pub fn parse_payload(payload: &serde_json::Value) -> ExecOutcome {
    if let Some(err) = payload.get("error").and_then(|e| e.as_str()) {
        let (kind, message) = match err.split_once(": ") {
            Some((k, m)) => match ExecErrorKind::parse(k) {
                Some(kind) => (kind, m.to_string()),
                None => (ExecErrorKind::SqlError, err.to_string()),
            },
            None => (ExecErrorKind::SqlError, err.to_string()),
        };
        return Err(ExecError::new(kind, message));
    }
    let columns: Vec<String> = payload
        .get("columns")
        .and_then(|c| c.as_array())
        .map(|c| c.iter().map(|v| v.as_str().unwrap_or_default().to_string()).collect())
        .ok_or_else(|| ExecError::new(ExecErrorKind::SqlError, "malformed tool payload"))?;
    let data = payload.get("data").and_then(|d| d.as_array()).cloned().unwrap_or_default();
    let rows = data
        .iter()
        .map(|obj| {
            // Values are in column order (duplicates were suffixed on the way out).
            obj.as_object()
                .map(|o| o.values().map(Cell::from_json).collect())
                .unwrap_or_default()
        })
        .collect();
    Ok(QueryResult { columns, rows, truncated: false, row_limit: None, elapsed_ms: 0 })
}

impl SandboxClient for HttpToolClient {
    fn execute(&self, db_name: &str, sql: &str) -> ExecOutcome {
        let url = format!("{}/tools/execute_sql_query", self.base_url);
        let body = serde_json::json!({ "db_name": db_name, "sql": sql });
        let resp = self
            .http
            .post(url)
            .json(&body)
            .send()
            .and_then(|r| r.json::<serde_json::Value>())
            .map_err(|e| ExecError::new(ExecErrorKind::SqlError, format!("tool service unavailable: {e}")))?;
        parse_payload(&resp)
    }
}
