use std::time::Duration;

use tagdrive_core::activation::ActivationBlob;
use tagdrive_core::model::VisibleSerial;
use thiserror::Error;
use ureq::Agent;

use crate::wire::{self, BlobResponse, ErrorResponse, ProvisionRequest, ProvisionResponse};

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("serial unknown to the activation service")]
    SerialUnknown,
    #[error("activation service unreachable: {0}")]
    Unreachable(String),
    #[error("unexpected response: {0}")]
    Protocol(String),
}

/// Blocking client for the activation service.
#[derive(Clone)]
pub struct ActivationClient {
    base: String,
    agent: Agent,
}

impl ActivationClient {
    pub fn new(base_url: &str) -> Self {
        let agent: Agent = Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(Duration::from_secs(30)))
            .build()
            .into();
        ActivationClient {
            base: base_url.trim_end_matches('/').to_owned(),
            agent,
        }
    }

    fn finish(
        res: Result<ureq::http::Response<ureq::Body>, ureq::Error>,
    ) -> Result<(u16, String), ClientError> {
        let mut res = res.map_err(|e| match e {
            ureq::Error::Io(_)
            | ureq::Error::ConnectionFailed
            | ureq::Error::HostNotFound
            | ureq::Error::Timeout(_) => ClientError::Unreachable(e.to_string()),
            other => ClientError::Protocol(other.to_string()),
        })?;
        let status = res.status().as_u16();
        let body = res
            .body_mut()
            .read_to_string()
            .map_err(|e| ClientError::Protocol(e.to_string()))?;
        Ok((status, body))
    }

    fn decode<T: serde::de::DeserializeOwned>(body: &str) -> Result<T, ClientError> {
        serde_json::from_str(body).map_err(|e| ClientError::Protocol(e.to_string()))
    }

    fn unexpected(status: u16, body: &str) -> ClientError {
        match serde_json::from_str::<ErrorResponse>(body) {
            Ok(e) => ClientError::Protocol(format!("{status} {}", e.error)),
            Err(_) => ClientError::Protocol(format!("status {status}")),
        }
    }

    pub fn healthz(&self) -> Result<(), ClientError> {
        let (status, body) =
            Self::finish(self.agent.get(format!("{}/v1/healthz", self.base)).call())?;
        if status == 200 && body == "ok" {
            Ok(())
        } else {
            Err(Self::unexpected(status, &body))
        }
    }

    pub fn fetch_blob(&self, serial: &VisibleSerial) -> Result<ActivationBlob, ClientError> {
        let (status, body) = Self::finish(
            self.agent
                .get(format!("{}/v1/blobs/{serial}", self.base))
                .call(),
        )?;
        match status {
            200 => {
                let r: BlobResponse = Self::decode(&body)?;
                if r.serial != serial.as_str() {
                    return Err(ClientError::Protocol(format!(
                        "asked for {serial}, got {}",
                        r.serial
                    )));
                }
                ActivationBlob::from_base64(&r.blob)
                    .map_err(|e| ClientError::Protocol(e.to_string()))
            }
            404 if Self::decode::<ErrorResponse>(&body)
                .is_ok_and(|e| e.error == wire::SERIAL_UNKNOWN) =>
            {
                Err(ClientError::SerialUnknown)
            }
            _ => Err(Self::unexpected(status, &body)),
        }
    }

    pub fn provision(&self, width: u32) -> Result<ProvisionResponse, ClientError> {
        let req = serde_json::to_string(&ProvisionRequest { width }).expect("request serializes");
        let (status, body) = Self::finish(
            self.agent
                .post(format!("{}/v1/provision", self.base))
                .header("content-type", "application/json")
                .send(req),
        )?;
        match status {
            201 => Self::decode(&body),
            _ => Err(Self::unexpected(status, &body)),
        }
    }
}
