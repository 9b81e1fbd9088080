//! Leak-free dataset preparation. Every fitted state here is computed from
//! training rows only and then applied unchanged to held-out rows.

mod impute;
mod split;
mod standardize;

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};

pub use impute::{fit_imputer, impute, ColumnRegression, ImputerConfig, ImputerState, IMPUTER_VERSION};
pub use split::{stratified_kfold, stratified_split, SplitPlan};
pub use standardize::{fit_standardizer, standardize, StandardizerState, STANDARDIZER_VERSION};

/// Writes a fitted state as TOML.
pub fn save_state<T: Serialize>(state: &T, path: &Path) -> Result<()> {
    let text = toml::to_string(state).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn load_state<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    toml::from_str(&text).map_err(|e| Error::Schema {
        path: path.to_path_buf(),
        line: 0,
        reason: e.to_string(),
    })
}
