//! JSONL records and inline list arguments.

use std::path::Path;

use artl_core::align::{WordAlignment, WordSpan};
use artl_core::endpoint::EndpointInput;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

/// One utterance with its word-level forced alignment (acoustic frames).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UtteranceRecord {
    pub id: String,
    #[serde(default)]
    pub tokens: Option<Vec<usize>>,
    pub words: Vec<WordSpan>,
    /// Encoder frame count, used to clamp subsampled labels.
    #[serde(default)]
    pub frames: Option<usize>,
    #[serde(default)]
    pub eoq_stream: Option<Vec<f64>>,
    #[serde(default)]
    pub frame_seconds: Option<f64>,
}

impl UtteranceRecord {
    pub fn alignment(&self) -> Result<WordAlignment, String> {
        let a = WordAlignment { words: self.words.clone() };
        a.validate().map_err(|e| e.to_string())?;
        if let Some(tokens) = &self.tokens {
            if *tokens != a.tokens() {
                return Err(format!("tokens {tokens:?} differ from the word pieces {:?}", a.tokens()));
            }
        }
        Ok(a)
    }
}

/// Input line for the end-pointer simulators.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EndpointRecord {
    #[serde(flatten)]
    pub input: EndpointInput,
    /// Silence appended before simulation, in seconds.
    #[serde(default)]
    pub append_silence: f64,
}

/// Parses one JSON value per non-blank line, reporting 1-based line numbers.
pub fn parse_jsonl<T: DeserializeOwned>(text: &str, origin: &str) -> CliResult<Vec<(usize, T)>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l)
                .map(|v| (i + 1, v))
                .map_err(|e| CliError::Line { path: origin.to_string(), line: i + 1, message: e.to_string() })
        })
        .collect()
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> CliResult<Vec<(usize, T)>> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    parse_jsonl(&text, &path.display().to_string())
}

/// An integer list given inline (`[1,2]`) or as a path to a file holding one.
pub fn list_arg(arg: &str) -> CliResult<Vec<usize>> {
    let trimmed = arg.trim();
    let (text, origin) = if trimmed.starts_with('[') {
        (trimmed.to_string(), "inline list".to_string())
    } else {
        let path = Path::new(arg);
        (std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?, arg.to_string())
    };
    serde_json::from_str(text.trim()).map_err(|e| CliError::Format(format!("{origin}: expected a JSON integer list: {e}")))
}
