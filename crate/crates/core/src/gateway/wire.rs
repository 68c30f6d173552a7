use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Operation {
    GenerateEcr,
    RewriteQar,
    ScorePair,
    RankListwise,
}

/// Body POSTed to a remote backend.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireRequest {
    pub operation: Operation,
    pub template_id: String,
    pub slots: BTreeMap<String, String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n: Option<usize>,
}

impl WireRequest {
    pub fn slot(&self, name: &str) -> &str {
        self.slots.get(name).map(String::as_str).unwrap_or("")
    }

    /// Characters of slot text carried by this request.
    pub fn chars(&self) -> u64 {
        self.slots.values().map(|v| v.chars().count() as u64).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireResponse {
    pub ok: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl WireResponse {
    pub fn text(text: impl Into<String>) -> Self {
        WireResponse {
            ok: true,
            text: Some(text.into()),
            score: None,
            error: None,
        }
    }

    pub fn score(score: f64) -> Self {
        WireResponse {
            ok: true,
            text: None,
            score: Some(score),
            error: None,
        }
    }

    pub fn failure(message: impl Into<String>) -> Self {
        WireResponse {
            ok: false,
            text: None,
            score: None,
            error: Some(message.into()),
        }
    }
}
