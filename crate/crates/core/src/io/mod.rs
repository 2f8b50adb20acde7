//! File formats and run configuration.
//!
//! - odgt line-JSON annotations ([`odgt`])
//! - native scene JSON and prediction files ([`scene`])
//! - PGM / CSV density images ([`image`])
//! - `CQTNSR1` tensor files ([`tensor_file`])
//! - `key = value` run configuration ([`config`])
//! - order-preserving parallel map over a worker pool ([`parallel`])

pub mod config;
pub mod image;
pub mod odgt;
pub mod parallel;
pub mod scene;
pub mod tensor_file;

use std::path::Path;

use thiserror::Error;

pub use config::RunConfig;
pub use image::{read_density_csv, write_density_image, DensityFormat};
pub use odgt::{parse_odgt, serialize_odgt};
pub use scene::{parse_predictions_2d, parse_predictions_3d, parse_scene_json, serialize_scene_json, Scene, SceneObject};
pub use tensor_file::{read_tensor, write_tensor};

#[derive(Debug, Error)]
pub enum IoError {
    #[error("cannot access {path}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    /// Malformed or invalid input; `location` names the file, line or JSON path.
    #[error("{location}: {message}")]
    Invalid { location: String, message: String },
}

impl IoError {
    pub fn invalid(location: impl Into<String>, message: impl ToString) -> Self {
        IoError::Invalid {
            location: location.into(),
            message: message.to_string(),
        }
    }

    /// Prefixes the location with a file name.
    pub fn in_file(self, path: &Path) -> Self {
        match self {
            IoError::Invalid { location, message } => IoError::Invalid {
                location: format!("{}: {location}", path.display()),
                message,
            },
            other => other,
        }
    }
}

pub(crate) fn read_to_string(path: &Path) -> Result<String, IoError> {
    std::fs::read_to_string(path).map_err(|source| IoError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub(crate) fn write_bytes(path: &Path, bytes: &[u8]) -> Result<(), IoError> {
    std::fs::write(path, bytes).map_err(|source| IoError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub(crate) fn json_location(err: &serde_json::Error) -> String {
    format!("line {} column {}", err.line(), err.column())
}

/// Reads scenes from an `.odgt` file or a native scene JSON file (any other extension).
pub fn load_scenes(path: &Path) -> Result<Vec<Scene>, IoError> {
    let text = read_to_string(path)?;
    let parsed = if path.extension().is_some_and(|e| e == "odgt") {
        parse_odgt(&text)
    } else {
        parse_scene_json(&text)
    };
    parsed.map_err(|e| e.in_file(path))
}

pub fn load_predictions_2d(path: &Path) -> Result<Vec<crate::metrics::Detection2D>, IoError> {
    parse_predictions_2d(&read_to_string(path)?).map_err(|e| e.in_file(path))
}

pub fn load_predictions_3d(path: &Path) -> Result<Vec<crate::metrics::Detection3D>, IoError> {
    parse_predictions_3d(&read_to_string(path)?).map_err(|e| e.in_file(path))
}

pub fn load_config(path: &Path) -> Result<RunConfig, IoError> {
    RunConfig::parse(&read_to_string(path)?).map_err(|e| e.in_file(path))
}

pub fn load_density_csv(path: &Path) -> Result<crate::density::DensityMap, IoError> {
    read_density_csv(&read_to_string(path)?).map_err(|e| e.in_file(path))
}
