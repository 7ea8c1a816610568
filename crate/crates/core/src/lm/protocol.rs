//! Line-delimited JSON messages exchanged with external scorers.
//!
//! Both sides open with `hello`. The client then sends `score` requests with
//! increasing ids; the scorer answers each with `result` or `error`, in any
//! order. Log-probabilities are natural-log values.

use serde::{Deserialize, Serialize};

pub const PROTOCOL_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum Message {
    Hello {
        version: u32,
        backend_id: String,
    },
    Score {
        id: u64,
        context: String,
        continuation: String,
        /// Character budget for the context. Truncation is up to the scorer.
        budget_hint: u32,
    },
    Result {
        id: u64,
        token_logprobs: Vec<f64>,
        /// Number of context characters the scorer actually used, if it
        /// reports truncation.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        context_chars: Option<u32>,
    },
    Error {
        id: u64,
        message: String,
    },
}

impl Message {
    pub fn to_line(&self) -> String {
        let mut line = serde_json::to_string(self).expect("message serializes");
        line.push('\n');
        line
    }

    pub fn parse(line: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(line.trim_end())
    }
}
