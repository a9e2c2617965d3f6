//! Annotation service: suggests the least confident lines, logs corrected
//! transcripts and fine-tunes the recognizer in background rounds that stop
//! on a non-oracle criterion.
//!
//! Routes:
//!
//! | method | path | |
//! |---|---|---|
//! | POST | `/projects` | create a project (`{"rerank": bool}` optional) |
//! | POST | `/projects/{id}/lines` | multipart PNG upload |
//! | GET | `/projects/{id}/suggestions?k=` | least confident unannotated lines with pre-fills |
//! | POST | `/projects/{id}/lines/{line_id}/transcript` | `{"transcript": ...}` |
//! | POST | `/projects/{id}/rounds` | `{"criterion", "mask", "epochs"}` |
//! | GET | `/projects/{id}/rounds/{n}` | full round record with its trace |
//! | GET | `/projects/{id}/status` | counts, progress and per-round CER |

mod api;
pub mod error;
pub mod project;
pub mod service;

use std::net::SocketAddr;
use std::sync::Arc;

pub use api::router;
pub use error::{ApiError, ServiceError};
pub use project::{Annotation, Project, RoundRecord, RoundState, Suggestion};
pub use service::{DemoProject, MaskSpec, RoundRequest, Service, ServiceConfig};

/// Version of the JSON schema; present in every response body.
pub const SCHEMA_VERSION: u32 = 1;

/// Serves until the process is stopped.
pub async fn serve(service: Arc<Service>, addr: SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on http://{}", listener.local_addr()?);
    axum::serve(listener, router(service)).await
}
