use std::net::{SocketAddr, TcpListener};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::thread::JoinHandle;

use arc_swap::ArcSwap;
use axum::extract::{Path as UrlPath, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use rand::rngs::StdRng;
use rand::SeedableRng;
use tagdrive_core::activation::{provision_disc, PurchaseSecret, SerialRegistry};
use tagdrive_core::model::{FrequencyBand, VisibleSerial};
use tagdrive_core::persist::{load_registry, save_registry, PersistError};
use thiserror::Error;
use tokio::sync::{oneshot, Mutex};

use crate::wire::{self, BlobResponse, ErrorResponse, ProvisionRequest, ProvisionResponse};

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error("cannot bind {addr}: {source}")]
    BindFailure {
        addr: String,
        source: std::io::Error,
    },
    #[error("registry storage corrupt: {0}")]
    StorageCorrupt(#[from] PersistError),
    #[error("service runtime: {0}")]
    Runtime(std::io::Error),
}

/// Shared state: readers load a snapshot, the single writer swaps in a new one.
pub struct ServiceState {
    registry: ArcSwap<SerialRegistry>,
    writer: Mutex<Writer>,
}

struct Writer {
    rng: StdRng,
    path: Option<PathBuf>,
}

impl ServiceState {
    pub fn new(registry: SerialRegistry, path: Option<PathBuf>) -> Self {
        ServiceState {
            registry: ArcSwap::from_pointee(registry),
            writer: Mutex::new(Writer {
                rng: StdRng::from_os_rng(),
                path,
            }),
        }
    }

    pub fn snapshot(&self) -> Arc<SerialRegistry> {
        self.registry.load_full()
    }
}

fn error(status: StatusCode, code: &str) -> Response {
    (status, Json(ErrorResponse { error: code.into() })).into_response()
}

async fn healthz() -> &'static str {
    "ok"
}

async fn get_blob(
    State(state): State<Arc<ServiceState>>,
    UrlPath(serial): UrlPath<String>,
) -> Response {
    let Ok(serial) = VisibleSerial::new(serial) else {
        return error(StatusCode::NOT_FOUND, wire::SERIAL_UNKNOWN);
    };
    match state.registry.load().get(&serial) {
        Some(entry) => Json(BlobResponse {
            serial: serial.to_string(),
            blob: entry.blob.to_base64(),
        })
        .into_response(),
        None => error(StatusCode::NOT_FOUND, wire::SERIAL_UNKNOWN),
    }
}

async fn provision(State(state): State<Arc<ServiceState>>, body: axum::body::Bytes) -> Response {
    let Ok(req) = serde_json::from_slice::<ProvisionRequest>(&body) else {
        return error(StatusCode::BAD_REQUEST, wire::BAD_REQUEST);
    };
    let mut writer = state.writer.lock().await;
    let current = state.registry.load_full();
    if req.width != current.width() {
        return error(StatusCode::BAD_REQUEST, wire::WIDTH_MISMATCH);
    }
    let mut next = SerialRegistry::clone(&current);
    let secret = PurchaseSecret::generate(&mut writer.rng);
    let disc = match provision_disc(
        &mut next,
        &secret,
        FrequencyBand::Hf13_56MHz,
        &mut writer.rng,
        chrono::Utc::now(),
    ) {
        Ok(d) => d,
        Err(_) => return error(StatusCode::INTERNAL_SERVER_ERROR, wire::STORAGE_FAILURE),
    };
    if let Some(path) = &writer.path {
        if save_registry(path, &next).is_err() {
            return error(StatusCode::INTERNAL_SERVER_ERROR, wire::STORAGE_FAILURE);
        }
    }
    state.registry.store(Arc::new(next));
    drop(writer);
    (
        StatusCode::CREATED,
        Json(ProvisionResponse {
            serial: disc.serial.to_string(),
            blob: disc.blob.to_base64(),
            secret: secret.as_str().to_owned(),
        }),
    )
        .into_response()
}

fn router(state: Arc<ServiceState>) -> Router {
    Router::new()
        .route("/v1/healthz", get(healthz))
        .route("/v1/blobs/{serial}", get(get_blob))
        .route("/v1/provision", post(provision))
        .with_state(state)
}

/// Handle to a service running on a background thread.
pub struct RunningService {
    addr: SocketAddr,
    state: Arc<ServiceState>,
    shutdown: Option<oneshot::Sender<()>>,
    thread: Option<JoinHandle<Result<(), ServiceError>>>,
}

impl RunningService {
    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn url(&self) -> String {
        format!("http://{}", self.addr)
    }

    pub fn state(&self) -> &Arc<ServiceState> {
        &self.state
    }

    /// Stops accepting connections and waits for in-flight requests.
    pub fn shutdown(mut self) -> Result<(), ServiceError> {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        self.join()
    }

    /// Blocks until the service stops on its own.
    pub fn wait(mut self) -> Result<(), ServiceError> {
        self.join()
    }

    fn join(&mut self) -> Result<(), ServiceError> {
        match self.thread.take() {
            Some(t) => t.join().expect("service thread panicked"),
            None => Ok(()),
        }
    }
}

impl Drop for RunningService {
    fn drop(&mut self) {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
            let _ = self.join();
        }
    }
}

/// Serves `registry` on `bind`. When `path` is given, every provision is
/// written there before it becomes visible to readers.
pub fn serve(
    registry: SerialRegistry,
    bind: &str,
    path: Option<PathBuf>,
) -> Result<RunningService, ServiceError> {
    let bind_err = |source| ServiceError::BindFailure {
        addr: bind.to_owned(),
        source,
    };
    let listener = TcpListener::bind(bind).map_err(bind_err)?;
    listener.set_nonblocking(true).map_err(bind_err)?;
    let addr = listener.local_addr().map_err(bind_err)?;
    let state = Arc::new(ServiceState::new(registry, path));
    let app = router(state.clone());
    let (tx, rx) = oneshot::channel::<()>();
    let thread = std::thread::spawn(move || {
        let rt = tokio::runtime::Builder::new_multi_thread()
            .enable_all()
            .build()
            .map_err(ServiceError::Runtime)?;
        rt.block_on(async move {
            let listener =
                tokio::net::TcpListener::from_std(listener).map_err(ServiceError::Runtime)?;
            axum::serve(listener, app)
                .with_graceful_shutdown(async {
                    let _ = rx.await;
                })
                .await
                .map_err(ServiceError::Runtime)
        })
    });
    Ok(RunningService {
        addr,
        state,
        shutdown: Some(tx),
        thread: Some(thread),
    })
}

/// Loads the registry at `path` and serves it, persisting provisions back.
pub fn serve_file(path: &Path, bind: &str) -> Result<RunningService, ServiceError> {
    let registry = load_registry(path)?;
    serve(registry, bind, Some(path.to_owned()))
}
