//! Pulling a single JSON object out of free-form model output.

use std::collections::BTreeMap;

use serde_json::{Map, Value};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ExtractError {
    #[error("no parseable JSON object in response")]
    NoObject,
    #[error("response object is missing key {0:?}")]
    MissingKey(String),
    #[error("value {value:?} is outside the allowed vocabulary")]
    OffVocabulary { value: String },
    #[error("malformed response: {0}")]
    Malformed(String),
}

/// Returns the first well-formed JSON object found in `raw`, skipping any
/// surrounding prose or code fences.
pub fn extract_object(raw: &str) -> Result<Map<String, Value>, ExtractError> {
    for (start, _) in raw.match_indices('{') {
        let mut stream = serde_json::Deserializer::from_str(&raw[start..]).into_iter::<Value>();
        if let Some(Ok(Value::Object(map))) = stream.next() {
            return Ok(map);
        }
    }
    Err(ExtractError::NoObject)
}

pub fn value_to_text(value: &Value) -> String {
    match value {
        Value::Null => String::new(),
        Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

/// Extracts exactly `expected_keys` as strings. Unexpected keys are dropped
/// and reported in the second element.
pub fn extract_structured_with_extras(
    raw: &str,
    expected_keys: &[&str],
) -> Result<(BTreeMap<String, String>, Vec<String>), ExtractError> {
    assert!(!expected_keys.is_empty(), "expected_keys must be non-empty");
    let object = extract_object(raw)?;
    let mut values = BTreeMap::new();
    for key in expected_keys {
        let value = object
            .get(*key)
            .ok_or_else(|| ExtractError::MissingKey(key.to_string()))?;
        values.insert(key.to_string(), value_to_text(value));
    }
    let dropped: Vec<String> = object
        .keys()
        .filter(|k| !expected_keys.contains(&k.as_str()))
        .cloned()
        .collect();
    Ok((values, dropped))
}

pub fn extract_structured(
    raw: &str,
    expected_keys: &[&str],
) -> Result<BTreeMap<String, String>, ExtractError> {
    let (values, dropped) = extract_structured_with_extras(raw, expected_keys)?;
    if !dropped.is_empty() {
        log::warn!("dropping unexpected keys from response: {}", dropped.join(", "));
    }
    Ok(values)
}
