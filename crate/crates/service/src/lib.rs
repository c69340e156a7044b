//! HTTP activation service.
//!
//! ```text
//! GET  /v1/blobs/{serial}  -> 200 {"serial":s,"blob":base64} | 404 {"error":"SerialUnknown"}
//! POST /v1/provision {"width":W}
//!                          -> 201 {"serial":s,"blob":base64,"secret":k}
//!                           | 400 {"error":"WidthMismatch"|"BadRequest"}
//! GET  /v1/healthz         -> 200 "ok"
//! ```
//!
//! The purchase secret minted by `/v1/provision` appears in that response
//! only; the server keeps nothing but blobs.

mod client;
mod server;
pub mod wire;

pub use client::{ActivationClient, ClientError};
pub use server::{serve, serve_file, RunningService, ServiceError, ServiceState};

/// Environment variable naming the registry file.
pub const ENV_REGISTRY: &str = "TAGDRIVE_REGISTRY";
/// Environment variable naming the bind address.
pub const ENV_BIND: &str = "TAGDRIVE_BIND";
