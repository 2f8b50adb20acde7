//! Density map images: binary PGM (P5) for viewing, CSV for exact values.

use std::path::Path;
use std::str::FromStr;

use super::{write_bytes, IoError};
use crate::density::DensityMap;

/// Density value rendered as white in PGM output.
pub const DEFAULT_DISPLAY_MAX: f64 = 3.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DensityFormat {
    Pgm,
    Csv,
}

impl FromStr for DensityFormat {
    type Err = IoError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "pgm" => Ok(DensityFormat::Pgm),
            "csv" => Ok(DensityFormat::Csv),
            other => Err(IoError::invalid("format", format!("unknown density format {other:?} (pgm, csv)"))),
        }
    }
}

impl DensityFormat {
    pub fn extension(&self) -> &'static str {
        match self {
            DensityFormat::Pgm => "pgm",
            DensityFormat::Csv => "csv",
        }
    }
}

/// `P5 <w> <h> 255\n` followed by one byte per value, `round(v * 255 / display_max)`
/// clamped to `[0, 255]`.
pub fn pgm_bytes(map: &DensityMap, display_max: f64) -> Vec<u8> {
    let mut out = format!("P5 {} {} 255\n", map.width(), map.height()).into_bytes();
    out.extend(
        map.values()
            .iter()
            .map(|&v| (v * 255.0 / display_max).round().clamp(0.0, 255.0) as u8),
    );
    out
}

/// One line per grid row, comma separated, shortest round-trip float formatting.
pub fn density_csv(map: &DensityMap) -> String {
    let mut out = String::new();
    for row in map.rows() {
        let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        out.push_str(&line.join(","));
        out.push('\n');
    }
    out
}

pub fn read_density_csv(text: &str) -> Result<DensityMap, IoError> {
    let mut values = Vec::new();
    let mut width = None;
    let mut height = 0;
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let row: Vec<f64> = line
            .split(',')
            .map(|f| f.trim().parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|e| IoError::invalid(format!("line {}", i + 1), e))?;
        match width {
            None => width = Some(row.len()),
            Some(w) if w != row.len() => {
                return Err(IoError::invalid(
                    format!("line {}", i + 1),
                    format!("expected {w} values, found {}", row.len()),
                ))
            }
            _ => {}
        }
        values.extend(row);
        height += 1;
    }
    DensityMap::from_vec(height, width.unwrap_or(0), values).map_err(|e| IoError::invalid("density csv", e))
}

pub fn write_density_image(
    map: &DensityMap,
    path: &Path,
    format: DensityFormat,
    display_max: f64,
) -> Result<(), IoError> {
    let bytes = match format {
        DensityFormat::Pgm => pgm_bytes(map, display_max),
        DensityFormat::Csv => density_csv(map).into_bytes(),
    };
    write_bytes(path, &bytes)
}
