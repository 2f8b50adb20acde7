//! Density quantization and embedding lookup.
//!
//! The uniform scheme maps `rho` to `k = floor((rho - rho_min) / w)` with
//! `w = (rho_max - rho_min) / (n_bins - 1)`, clamped to `[0, n_bins - 1]`. With the
//! default range `[0, 3]` this gives bin widths of 0.15, 0.075 and 0.025 for 21, 41
//! and 121 bins; the last bin holds values at or above `rho_max`.
//!
//! The linear schemes place `n_bins + 1` edges on `[rho_min, rho_max]` with widths
//! proportional to `1, 2, ..., n_bins` (increasing) or the reverse (decreasing),
//! and quantize by edge search.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::density::DensityMap;
use crate::tensor::Tensor;

pub const DEFAULT_N_BINS: usize = 121;
pub const DEFAULT_RHO_MIN: f64 = 0.0;
pub const DEFAULT_RHO_MAX: f64 = 3.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EmbeddingError {
    #[error("invalid quantizer config: {0}")]
    Config(String),
    #[error("cannot quantize NaN")]
    NaN,
    #[error("embedding table has {table} rows but the quantizer has {bins} bins")]
    TableMismatch { table: usize, bins: usize },
    #[error("invalid embedding table: {0}")]
    Table(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BinScheme {
    Uniform,
    LinearIncreasing,
    LinearDecreasing,
}

impl BinScheme {
    pub fn name(&self) -> &'static str {
        match self {
            BinScheme::Uniform => "uniform",
            BinScheme::LinearIncreasing => "linear-increasing",
            BinScheme::LinearDecreasing => "linear-decreasing",
        }
    }
}

impl std::str::FromStr for BinScheme {
    type Err = EmbeddingError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "uniform" => Ok(BinScheme::Uniform),
            "linear-increasing" => Ok(BinScheme::LinearIncreasing),
            "linear-decreasing" => Ok(BinScheme::LinearDecreasing),
            other => Err(EmbeddingError::Config(format!("unknown bin scheme {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantizerConfig {
    pub rho_min: f64,
    pub rho_max: f64,
    pub n_bins: usize,
    pub scheme: BinScheme,
}

impl Default for QuantizerConfig {
    fn default() -> Self {
        QuantizerConfig {
            rho_min: DEFAULT_RHO_MIN,
            rho_max: DEFAULT_RHO_MAX,
            n_bins: DEFAULT_N_BINS,
            scheme: BinScheme::Uniform,
        }
    }
}

impl QuantizerConfig {
    pub fn uniform(rho_min: f64, rho_max: f64, n_bins: usize) -> Result<Self, EmbeddingError> {
        let cfg = QuantizerConfig {
            rho_min,
            rho_max,
            n_bins,
            scheme: BinScheme::Uniform,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), EmbeddingError> {
        if !(self.rho_min.is_finite() && self.rho_max.is_finite() && self.rho_min < self.rho_max) {
            return Err(EmbeddingError::Config(format!(
                "need finite rho_min < rho_max, got [{}, {}]",
                self.rho_min, self.rho_max
            )));
        }
        if self.n_bins < 2 {
            return Err(EmbeddingError::Config(format!(
                "n_bins must be at least 2, got {}",
                self.n_bins
            )));
        }
        Ok(())
    }

    /// Bin width of the uniform scheme.
    pub fn uniform_width(&self) -> f64 {
        (self.rho_max - self.rho_min) / (self.n_bins - 1) as f64
    }
}

/// `n_bins + 1` strictly increasing edges from `rho_min` to `rho_max`.
pub fn bin_edges(cfg: &QuantizerConfig) -> Vec<f64> {
    let n = cfg.n_bins;
    let range = cfg.rho_max - cfg.rho_min;
    let weight = |i: usize| -> f64 {
        match cfg.scheme {
            BinScheme::Uniform => 1.0,
            BinScheme::LinearIncreasing => (i + 1) as f64,
            BinScheme::LinearDecreasing => (n - i) as f64,
        }
    };
    let total: f64 = (0..n).map(weight).sum();
    let mut edges = Vec::with_capacity(n + 1);
    edges.push(cfg.rho_min);
    let mut acc = 0.0;
    for i in 0..n - 1 {
        acc += weight(i);
        edges.push(cfg.rho_min + range * acc / total);
    }
    edges.push(cfg.rho_max);
    edges
}

/// Precomputed quantizer; holds the edges of the non-uniform schemes.
#[derive(Debug, Clone, PartialEq)]
pub struct Quantizer {
    cfg: QuantizerConfig,
    edges: Vec<f64>,
}

impl Quantizer {
    pub fn new(cfg: QuantizerConfig) -> Result<Self, EmbeddingError> {
        cfg.validate()?;
        let edges = bin_edges(&cfg);
        Ok(Quantizer { cfg, edges })
    }

    pub fn config(&self) -> &QuantizerConfig {
        &self.cfg
    }

    pub fn quantize(&self, rho: f64) -> Result<usize, EmbeddingError> {
        if rho.is_nan() {
            return Err(EmbeddingError::NaN);
        }
        let n = self.cfg.n_bins;
        let k = match self.cfg.scheme {
            BinScheme::Uniform => {
                // scaled by (n - 1) / range rather than divided by the width so that
                // grid values such as 1.5 with 121 bins land exactly on their bin
                let t = (rho - self.cfg.rho_min) * (n - 1) as f64
                    / (self.cfg.rho_max - self.cfg.rho_min);
                t.floor().clamp(0.0, (n - 1) as f64) as usize
            }
            _ => {
                // number of edges <= rho, minus one
                let above = self.edges.partition_point(|&e| e <= rho);
                above.saturating_sub(1).min(n - 1)
            }
        };
        Ok(k)
    }
}

/// Convenience wrapper around [`Quantizer::quantize`].
pub fn quantize(rho: f64, cfg: &QuantizerConfig) -> Result<usize, EmbeddingError> {
    Quantizer::new(cfg.clone())?.quantize(rho)
}

/// `n_bins x dim` lookup table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingTable {
    table: Tensor,
}

impl EmbeddingTable {
    pub fn from_tensor(table: Tensor) -> Result<Self, EmbeddingError> {
        match table.shape() {
            [rows, cols] if *rows > 0 && *cols > 0 => Ok(EmbeddingTable { table }),
            s => Err(EmbeddingError::Table(format!(
                "expected a non-empty n_bins x dim matrix, got shape {s:?}"
            ))),
        }
    }

    /// Entries drawn uniformly from `[-1, 1]` with a seeded generator.
    pub fn seeded(n_bins: usize, dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..n_bins * dim).map(|_| rng.gen_range(-1.0..=1.0)).collect();
        EmbeddingTable {
            table: Tensor::new(vec![n_bins, dim], data).expect("finite by construction"),
        }
    }

    pub fn n_bins(&self) -> usize {
        self.table.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.table.shape()[1]
    }

    pub fn row(&self, k: usize) -> &[f64] {
        self.table.row(k)
    }

    pub fn as_tensor(&self) -> &Tensor {
        &self.table
    }

    pub fn as_tensor_mut(&mut self) -> &mut Tensor {
        &mut self.table
    }

    pub fn into_tensor(self) -> Tensor {
        self.table
    }

    pub fn check_matches(&self, cfg: &QuantizerConfig) -> Result<(), EmbeddingError> {
        if self.n_bins() != cfg.n_bins {
            return Err(EmbeddingError::TableMismatch {
                table: self.n_bins(),
                bins: cfg.n_bins,
            });
        }
        Ok(())
    }
}

/// Looks up the embedding of each value in `values`; returns the `values.len() x dim`
/// matrix and the bin indices.
pub fn embed_values(
    values: &[f64],
    quantizer: &Quantizer,
    table: &EmbeddingTable,
) -> Result<(Tensor, Vec<usize>), EmbeddingError> {
    table.check_matches(quantizer.config())?;
    let bins = values
        .iter()
        .map(|&v| quantizer.quantize(v))
        .collect::<Result<Vec<_>, _>>()?;
    Ok((lookup(&bins, table), bins))
}

/// Rows of `table` selected by `bins`, as a `bins.len() x dim` matrix.
pub fn lookup(bins: &[usize], table: &EmbeddingTable) -> Tensor {
    let dim = table.dim();
    let mut data = Vec::with_capacity(bins.len() * dim);
    for &k in bins {
        data.extend_from_slice(table.row(k));
    }
    Tensor::new(vec![bins.len(), dim], data).expect("table entries are finite")
}

/// Expands a density map into an `h x w x dim` grid of embedding vectors.
pub fn embed_map(
    map: &DensityMap,
    cfg: &QuantizerConfig,
    table: &EmbeddingTable,
) -> Result<Tensor, EmbeddingError> {
    let quantizer = Quantizer::new(cfg.clone())?;
    let (flat, _) = embed_values(map.values(), &quantizer, table)?;
    Ok(flat
        .reshape(&[map.height(), map.width(), table.dim()])
        .expect("element count preserved"))
}
