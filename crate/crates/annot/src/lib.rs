//! Annotation backend: serves corpus images, records bud polygons and non-bud
//! regions, samples non-bud patches and exports corpus manifests.

pub mod api;
pub mod catalog;
pub mod error;
pub mod export;
pub mod store;

use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::{Arc, RwLock};

pub use api::router;
pub use catalog::{Catalog, ImageInfo};
pub use error::{Result, ServiceError};
pub use store::{AnnotationRecord, AnnotationView, Kind, NewAnnotation, Sampling, Store};

/// Default log directory inside the corpus root.
pub const STATE_DIR: &str = ".annot";

pub struct AppState {
    pub catalog: Catalog,
    pub store: RwLock<Store>,
}

impl AppState {
    /// Scans `root` for images and replays the annotation log kept in `state_dir`
    /// (default `root/.annot`).
    pub fn open(root: &Path, state_dir: Option<&Path>) -> Result<Arc<Self>> {
        let catalog = Catalog::scan(root)?;
        let dir = state_dir.map_or_else(|| root.join(STATE_DIR), Path::to_path_buf);
        let store = Store::open(&dir, |id| catalog.get(id).ok().map(|i| (i.width, i.height)))?;
        log::info!("{} images, {} annotations from {}", catalog.list().len(), store.entries().len(), store.log_path().display());
        Ok(Arc::new(AppState {
            catalog,
            store: RwLock::new(store),
        }))
    }
}

#[derive(Clone, Debug)]
pub struct ServeConfig {
    pub root: PathBuf,
    pub state_dir: Option<PathBuf>,
    pub listen: SocketAddr,
}

/// Runs the service until Ctrl-C.
pub async fn serve(cfg: &ServeConfig) -> Result<()> {
    let state = AppState::open(&cfg.root, cfg.state_dir.as_deref())?;
    let listener = tokio::net::TcpListener::bind(cfg.listen)
        .await
        .map_err(|e| ServiceError::Storage(format!("bind {}: {e}", cfg.listen)))?;
    log::info!("listening on {}", cfg.listen);
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
        .map_err(|e| ServiceError::Storage(format!("server: {e}")))
}
