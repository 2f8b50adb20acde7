//! Run configuration in a line-based `key = value` format.
//!
//! Keys use dotted section prefixes; `#` starts a comment. Every key is optional and
//! defaults to the values below.
//!
//! ```text
//! density.d = 0.3333333333333333
//! density.scale = 1
//! density.mode = bbox-window        # head-point-fixed | head-point-knn | class-average
//! density.sigma_fixed = 4
//! density.knn_k = 3
//! density.knn_beta = 0.3
//! density.class.person = 170, 60    # mean height, mean width (class-average mode)
//! quantizer.rho_min = 0
//! quantizer.rho_max = 3
//! quantizer.n_bins = 121
//! quantizer.scheme = uniform        # linear-increasing | linear-decreasing
//! loss.lambda = 1
//! decoder.stages = DS,SA,D,SA,V
//! decoder.layers = 3
//! decoder.density_layers = 1,3      # optional: keep DS only in these layers
//! output.dir = out
//! run.workers = 0                   # 0: one per core
//! run.seed = 0
//! ```

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::PathBuf;

use super::IoError;
use crate::cqblock::decoder::{parse_stages, DecoderConfig, Stage, DEFAULT_DECODER_LAYERS, DEFAULT_STAGE_ORDER};
use crate::density::{ClassSize, DensityConfig, DensityMode, LossConfig, DEFAULT_KNN_BETA};
use crate::embedding::{BinScheme, QuantizerConfig};

pub const DEFAULT_SIGMA_FIXED: f64 = 4.0;
pub const DEFAULT_KNN_K: usize = 3;

/// Decoder layout as written in a config file.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderSettings {
    pub stages: Vec<Stage>,
    pub layers: usize,
    pub density_layers: Option<Vec<usize>>,
}

impl Default for DecoderSettings {
    fn default() -> Self {
        DecoderSettings {
            stages: parse_stages(DEFAULT_STAGE_ORDER).expect("default order parses"),
            layers: DEFAULT_DECODER_LAYERS,
            density_layers: None,
        }
    }
}

impl DecoderSettings {
    pub fn build(&self) -> Result<DecoderConfig, IoError> {
        let cfg = DecoderConfig::repeated(&self.stages, self.layers).map_err(|e| IoError::invalid("decoder", e))?;
        match &self.density_layers {
            Some(l) => cfg.with_density_only_at(l).map_err(|e| IoError::invalid("decoder.density_layers", e)),
            None => Ok(cfg),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub density: DensityConfig,
    pub quantizer: QuantizerConfig,
    pub loss: LossConfig,
    pub decoder: DecoderSettings,
    pub output_dir: PathBuf,
    /// Worker threads for per-scene processing; 0 picks one per core.
    pub workers: usize,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            density: DensityConfig::default(),
            quantizer: QuantizerConfig::default(),
            loss: LossConfig::default(),
            decoder: DecoderSettings::default(),
            output_dir: PathBuf::from("out"),
            workers: 0,
            seed: 0,
        }
    }
}

fn parse_num<T: std::str::FromStr>(value: &str, at: &str) -> Result<T, IoError>
where
    T::Err: std::fmt::Display,
{
    value
        .parse::<T>()
        .map_err(|e| IoError::invalid(at, format!("cannot parse {value:?}: {e}")))
}

fn parse_list<T: std::str::FromStr>(value: &str, at: &str) -> Result<Vec<T>, IoError>
where
    T::Err: std::fmt::Display,
{
    value.split(',').map(|v| parse_num(v.trim(), at)).collect()
}

impl RunConfig {
    /// Parses a config file body. Unknown keys, repeated keys and invalid values are
    /// errors naming the line.
    pub fn parse(text: &str) -> Result<RunConfig, IoError> {
        let mut cfg = RunConfig::default();
        let mut mode = cfg.density.mode.name().to_string();
        let mut sigma_fixed = DEFAULT_SIGMA_FIXED;
        let mut knn_k = DEFAULT_KNN_K;
        let mut knn_beta = DEFAULT_KNN_BETA;
        let mut classes = BTreeMap::new();
        let mut seen = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let at = format!("line {}", i + 1);
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| IoError::invalid(&at, format!("expected `key = value`, got {line:?}")))?;
            let (key, value) = (key.trim(), value.trim());
            if let Some(prev) = seen.insert(key.to_string(), i + 1) {
                return Err(IoError::invalid(&at, format!("key {key} already set on line {prev}")));
            }
            match key {
                "density.d" => cfg.density.d = parse_num(value, &at)?,
                "density.scale" => cfg.density.scale = parse_num(value, &at)?,
                "density.mode" => mode = value.to_string(),
                "density.sigma_fixed" => sigma_fixed = parse_num(value, &at)?,
                "density.knn_k" => knn_k = parse_num(value, &at)?,
                "density.knn_beta" => knn_beta = parse_num(value, &at)?,
                "quantizer.rho_min" => cfg.quantizer.rho_min = parse_num(value, &at)?,
                "quantizer.rho_max" => cfg.quantizer.rho_max = parse_num(value, &at)?,
                "quantizer.n_bins" => cfg.quantizer.n_bins = parse_num(value, &at)?,
                "quantizer.scheme" => {
                    cfg.quantizer.scheme = value.parse::<BinScheme>().map_err(|e| IoError::invalid(&at, e))?
                }
                "loss.lambda" => {
                    cfg.loss = LossConfig::new(parse_num(value, &at)?).map_err(|e| IoError::invalid(&at, e))?
                }
                "decoder.stages" => {
                    cfg.decoder.stages = parse_stages(value).map_err(|e| IoError::invalid(&at, e))?
                }
                "decoder.layers" => cfg.decoder.layers = parse_num(value, &at)?,
                "decoder.density_layers" => cfg.decoder.density_layers = Some(parse_list(value, &at)?),
                "output.dir" => cfg.output_dir = PathBuf::from(value),
                "run.workers" => cfg.workers = parse_num(value, &at)?,
                "run.seed" => cfg.seed = parse_num(value, &at)?,
                _ => match key.strip_prefix("density.class.") {
                    Some(name) if !name.is_empty() => {
                        let hw: Vec<f64> = parse_list(value, &at)?;
                        if hw.len() != 2 {
                            return Err(IoError::invalid(&at, "class size needs `mean_height, mean_width`"));
                        }
                        classes.insert(
                            name.to_string(),
                            ClassSize {
                                mean_height: hw[0],
                                mean_width: hw[1],
                            },
                        );
                    }
                    _ => return Err(IoError::invalid(&at, format!("unknown key {key}"))),
                },
            }
        }
        cfg.density.mode = match mode.as_str() {
            "bbox-window" => DensityMode::BoxWindow,
            "head-point-fixed" => DensityMode::HeadPointFixed { sigma: sigma_fixed },
            "head-point-knn" => DensityMode::HeadPointKnn {
                k: knn_k,
                beta: knn_beta,
                sigma_fixed,
            },
            "class-average" => DensityMode::ClassAverage { classes },
            other => return Err(IoError::invalid("density.mode", format!("unknown density mode {other:?}"))),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), IoError> {
        self.density.validate().map_err(|e| IoError::invalid("density", e))?;
        self.quantizer.validate().map_err(|e| IoError::invalid("quantizer", e))?;
        self.decoder.build()?;
        Ok(())
    }

    /// Writes every key; parsing the result reproduces `self`.
    pub fn to_config_string(&self) -> String {
        let mut out = String::new();
        let d = &self.density;
        let _ = writeln!(out, "density.d = {}", d.d);
        let _ = writeln!(out, "density.scale = {}", d.scale);
        let _ = writeln!(out, "density.mode = {}", d.mode.name());
        match &d.mode {
            DensityMode::BoxWindow => {}
            DensityMode::HeadPointFixed { sigma } => {
                let _ = writeln!(out, "density.sigma_fixed = {sigma}");
            }
            DensityMode::HeadPointKnn { k, beta, sigma_fixed } => {
                let _ = writeln!(out, "density.sigma_fixed = {sigma_fixed}");
                let _ = writeln!(out, "density.knn_k = {k}");
                let _ = writeln!(out, "density.knn_beta = {beta}");
            }
            DensityMode::ClassAverage { classes } => {
                for (name, size) in classes {
                    let _ = writeln!(out, "density.class.{name} = {}, {}", size.mean_height, size.mean_width);
                }
            }
        }
        let q = &self.quantizer;
        let _ = writeln!(out, "quantizer.rho_min = {}", q.rho_min);
        let _ = writeln!(out, "quantizer.rho_max = {}", q.rho_max);
        let _ = writeln!(out, "quantizer.n_bins = {}", q.n_bins);
        let _ = writeln!(out, "quantizer.scheme = {}", q.scheme.name());
        let _ = writeln!(out, "loss.lambda = {}", self.loss.lambda);
        let stages: Vec<&str> = self.decoder.stages.iter().map(Stage::symbol).collect();
        let _ = writeln!(out, "decoder.stages = {}", stages.join(","));
        let _ = writeln!(out, "decoder.layers = {}", self.decoder.layers);
        if let Some(l) = &self.decoder.density_layers {
            let l: Vec<String> = l.iter().map(|v| v.to_string()).collect();
            let _ = writeln!(out, "decoder.density_layers = {}", l.join(","));
        }
        let _ = writeln!(out, "output.dir = {}", self.output_dir.display());
        let _ = writeln!(out, "run.workers = {}", self.workers);
        let _ = writeln!(out, "run.seed = {}", self.seed);
        out
    }
}
