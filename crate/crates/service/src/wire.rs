//! JSON bodies of the activation protocol.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlobResponse {
    pub serial: String,
    pub blob: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProvisionRequest {
    pub width: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProvisionResponse {
    pub serial: String,
    pub blob: String,
    pub secret: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorResponse {
    pub error: String,
}

pub const SERIAL_UNKNOWN: &str = "SerialUnknown";
pub const WIDTH_MISMATCH: &str = "WidthMismatch";
pub const BAD_REQUEST: &str = "BadRequest";
pub const STORAGE_FAILURE: &str = "StorageFailure";
