//! Network configurations shipped with the crate.

use std::path::Path;

use crate::error::{Error, Result};

use super::config::NetworkConfig;

const BUILTINS: &[(&str, &str)] = &[
    ("vocals-table1", include_str!("../../configs/vocals-table1.json")),
    ("drums-table1", include_str!("../../configs/drums-table1.json")),
    ("bass-table1", include_str!("../../configs/bass-table1.json")),
    ("other-table1", include_str!("../../configs/other-table1.json")),
    ("tiny", include_str!("../../configs/tiny.json")),
    ("tiny-no-dilation", include_str!("../../configs/tiny-no-dilation.json")),
    (
        "tiny-standard-dilation",
        include_str!("../../configs/tiny-standard-dilation.json"),
    ),
];

/// Names accepted by [`builtin`].
pub fn names() -> impl Iterator<Item = &'static str> {
    BUILTINS.iter().map(|(n, _)| *n)
}

pub fn builtin(name: &str) -> Option<NetworkConfig> {
    BUILTINS
        .iter()
        .find(|(n, _)| *n == name)
        .map(|(_, text)| NetworkConfig::from_json(text).expect("shipped config is valid"))
}

/// Resolve a shipped config name, falling back to a JSON file path.
pub fn resolve(name_or_path: &str) -> Result<NetworkConfig> {
    if let Some(cfg) = builtin(name_or_path) {
        return Ok(cfg);
    }
    let path = Path::new(name_or_path);
    if !path.exists() {
        return Err(Error::Config(format!(
            "'{name_or_path}' is neither a shipped config ({}) nor an existing file",
            names().collect::<Vec<_>>().join(", ")
        )));
    }
    NetworkConfig::from_json(&std::fs::read_to_string(path)?)
}
