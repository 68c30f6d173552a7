//! JSON-over-HTTP transport for remote backends.

use std::time::Duration;

use super::wire::{WireRequest, WireResponse};
use super::{BackendDescriptor, Transport};
use crate::error::BackendError;

#[derive(Debug, Clone)]
pub struct HttpTransport {
    agent: ureq::Agent,
}

impl HttpTransport {
    pub fn new(timeout_ms: u64) -> Self {
        let config = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_millis(timeout_ms.max(1))))
            .http_status_as_error(false)
            .build();
        HttpTransport {
            agent: config.into(),
        }
    }
}

impl Transport for HttpTransport {
    fn send(
        &self,
        backend: &BackendDescriptor,
        req: &WireRequest,
    ) -> Result<WireResponse, BackendError> {
        let transport_err = |message: String| BackendError::Transport {
            backend_id: backend.backend_id.clone(),
            message,
        };
        let mut resp = self
            .agent
            .post(&backend.endpoint)
            .send_json(req)
            .map_err(|e| match e {
                ureq::Error::Timeout(_) => BackendError::Timeout {
                    backend_id: backend.backend_id.clone(),
                    attempts: 1,
                },
                other => transport_err(other.to_string()),
            })?;
        let status = resp.status();
        let body = resp.body_mut().read_to_string().map_err(|e| match e {
            ureq::Error::Timeout(_) => BackendError::Timeout {
                backend_id: backend.backend_id.clone(),
                attempts: 1,
            },
            other => transport_err(other.to_string()),
        })?;
        if !status.is_success() {
            return Err(transport_err(format!("HTTP {status}: {body}")));
        }
        serde_json::from_str(&body).map_err(|e| BackendError::Parse {
            backend_id: backend.backend_id.clone(),
            reason: format!("response is not a wire response: {e}"),
            raw: body,
        })
    }
}
