//! Density-guided decoder: a configurable sequence of attention stages applied to
//! the object queries, repeated per layer.
//!
//! Stage alphabet:
//! - `DS`: cross-attention onto the density tokens
//! - `SA`: self-attention among the queries
//! - `D`:  cross-attention onto caller-supplied depth tokens
//! - `V`:  cross-attention onto visual tokens
//!
//! Every stage is residual; there are no normalization or feed-forward sublayers.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::attention::{
    attention_forward, cross_attention_backward, mhsa_backward, mhsa_forward, AttentionCache, AttentionParams,
};
use super::{CqError, Parameters};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Stage {
    DensityCross,
    SelfAttention,
    DepthCross,
    VisualCross,
}

impl Stage {
    pub fn symbol(&self) -> &'static str {
        match self {
            Stage::DensityCross => "DS",
            Stage::SelfAttention => "SA",
            Stage::DepthCross => "D",
            Stage::VisualCross => "V",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.symbol())
    }
}

impl FromStr for Stage {
    type Err = CqError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "DS" => Ok(Stage::DensityCross),
            "SA" => Ok(Stage::SelfAttention),
            "D" => Ok(Stage::DepthCross),
            "V" => Ok(Stage::VisualCross),
            other => Err(CqError::Config(format!("unknown decoder stage {other:?}"))),
        }
    }
}

/// Parses a stage order such as `"DS,SA,D,SA,V"` (also accepts `->` separators).
pub fn parse_stages(s: &str) -> Result<Vec<Stage>, CqError> {
    let stages = s
        .replace("->", ",")
        .split(',')
        .map(str::parse)
        .collect::<Result<Vec<Stage>, _>>()?;
    Ok(stages)
}

/// The stage list of every layer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub layers: Vec<Vec<Stage>>,
}

/// Stage order of the best-performing 3D configuration.
pub const DEFAULT_STAGE_ORDER: &str = "DS,SA,D,SA,V";
pub const DEFAULT_DECODER_LAYERS: usize = 3;

impl Default for DecoderConfig {
    fn default() -> Self {
        DecoderConfig::parse(DEFAULT_STAGE_ORDER, DEFAULT_DECODER_LAYERS).expect("default order parses")
    }
}

impl DecoderConfig {
    pub fn repeated(stages: &[Stage], n_layers: usize) -> Result<Self, CqError> {
        let cfg = DecoderConfig {
            layers: vec![stages.to_vec(); n_layers],
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn parse(order: &str, n_layers: usize) -> Result<Self, CqError> {
        Self::repeated(&parse_stages(order)?, n_layers)
    }

    /// Keeps the density stage only in the given 1-based layers.
    pub fn with_density_only_at(mut self, layers: &[usize]) -> Result<Self, CqError> {
        if let Some(&bad) = layers.iter().find(|&&l| l == 0 || l > self.layers.len()) {
            return Err(CqError::Config(format!(
                "density layer {bad} outside 1..={}",
                self.layers.len()
            )));
        }
        for (i, stages) in self.layers.iter_mut().enumerate() {
            if !layers.contains(&(i + 1)) {
                stages.retain(|s| *s != Stage::DensityCross);
            }
        }
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<(), CqError> {
        if self.layers.is_empty() {
            return Err(CqError::Config("decoder needs at least one layer".into()));
        }
        if self.layers.iter().any(Vec::is_empty) {
            return Err(CqError::Config("every decoder layer needs at least one stage".into()));
        }
        Ok(())
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }
}

/// Attention parameters for every stage of every layer, aligned with a [`DecoderConfig`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecoderParams {
    pub layers: Vec<Vec<AttentionParams>>,
}

impl DecoderParams {
    pub fn seeded(cfg: &DecoderConfig, dim: usize, n_heads: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DecoderParams {
            layers: cfg
                .layers
                .iter()
                .map(|stages| {
                    stages
                        .iter()
                        .map(|_| AttentionParams::seeded(dim, n_heads, &mut rng))
                        .collect()
                })
                .collect(),
        }
    }

    fn check(&self, cfg: &DecoderConfig) -> Result<(), CqError> {
        cfg.validate()?;
        let aligned = self.layers.len() == cfg.layers.len()
            && self
                .layers
                .iter()
                .zip(&cfg.layers)
                .all(|(p, s)| p.len() == s.len());
        if !aligned {
            return Err(CqError::Config(
                "decoder parameters do not match the stage configuration".into(),
            ));
        }
        Ok(())
    }
}

impl Parameters for DecoderParams {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        for (l, stages) in self.layers.iter().enumerate() {
            for (s, p) in stages.iter().enumerate() {
                p.visit(&format!("{prefix}layer{l}.stage{s}"), f);
            }
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        for (l, stages) in self.layers.iter_mut().enumerate() {
            for (s, p) in stages.iter_mut().enumerate() {
                p.visit_mut(&format!("{prefix}layer{l}.stage{s}"), f);
            }
        }
    }
}

/// Token sets the cross-attention stages attend to, each `n_i x dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderMemory {
    pub density: Tensor,
    pub depth: Tensor,
    pub visual: Tensor,
}

impl DecoderMemory {
    fn get(&self, stage: Stage) -> Option<&Tensor> {
        match stage {
            Stage::DensityCross => Some(&self.density),
            Stage::DepthCross => Some(&self.depth),
            Stage::VisualCross => Some(&self.visual),
            Stage::SelfAttention => None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct DecoderGrads {
    pub params: DecoderParams,
    pub queries: Tensor,
    pub density: Tensor,
    pub depth: Tensor,
    pub visual: Tensor,
}

impl Parameters for DecoderGrads {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        self.params.visit(prefix, f);
        f(format!("{prefix}queries"), &self.queries);
        f(format!("{prefix}density"), &self.density);
        f(format!("{prefix}depth"), &self.depth);
        f(format!("{prefix}visual"), &self.visual);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        self.params.visit_mut(prefix, f);
        f(format!("{prefix}queries"), &mut self.queries);
        f(format!("{prefix}density"), &mut self.density);
        f(format!("{prefix}depth"), &mut self.depth);
        f(format!("{prefix}visual"), &mut self.visual);
    }
}

#[derive(Debug)]
pub struct DecoderGraph<'a> {
    cfg: &'a DecoderConfig,
    params: &'a DecoderParams,
    caches: Option<Vec<(Stage, AttentionCache)>>,
    memory_shapes: Option<[Vec<usize>; 3]>,
}

impl<'a> DecoderGraph<'a> {
    pub fn new(cfg: &'a DecoderConfig, params: &'a DecoderParams) -> Self {
        DecoderGraph {
            cfg,
            params,
            caches: None,
            memory_shapes: None,
        }
    }

    pub fn forward(&mut self, queries: &Tensor, memory: &DecoderMemory) -> Result<Tensor, CqError> {
        self.params.check(self.cfg)?;
        let mut x = queries.clone();
        let mut caches = Vec::new();
        for (stages, params) in self.cfg.layers.iter().zip(&self.params.layers) {
            for (&stage, p) in stages.iter().zip(params) {
                let (out, cache) = match memory.get(stage) {
                    None => mhsa_forward(&x, None, p)?,
                    Some(kv) => {
                        if kv.shape().first().copied().unwrap_or(0) == 0 {
                            return Err(CqError::Config(format!(
                                "stage {stage} references an empty feature set"
                            )));
                        }
                        attention_forward(&x, kv, kv, &x, p)?
                    }
                };
                x = out;
                caches.push((stage, cache));
            }
        }
        self.caches = Some(caches);
        self.memory_shapes = Some([
            memory.density.shape().to_vec(),
            memory.depth.shape().to_vec(),
            memory.visual.shape().to_vec(),
        ]);
        Ok(x)
    }

    pub fn backward(&self, d_out: &Tensor) -> Result<DecoderGrads, CqError> {
        let caches = self.caches.as_ref().ok_or(CqError::BackwardBeforeForward)?;
        let shapes = self.memory_shapes.as_ref().ok_or(CqError::BackwardBeforeForward)?;
        let mut d_density = Tensor::zeros(&shapes[0]);
        let mut d_depth = Tensor::zeros(&shapes[1]);
        let mut d_visual = Tensor::zeros(&shapes[2]);
        let flat_params: Vec<&AttentionParams> = self.params.layers.iter().flatten().collect();
        let mut grads: Vec<Option<AttentionParams>> = vec![None; flat_params.len()];
        let mut d_x = d_out.clone();
        for (i, (stage, cache)) in caches.iter().enumerate().rev() {
            let p = flat_params[i];
            match stage {
                Stage::SelfAttention => {
                    let (g, dx) = mhsa_backward(p, cache, &d_x)?;
                    AttentionParams::accumulate(&mut grads[i], g)?;
                    d_x = dx;
                }
                _ => {
                    let (g, dq, dkv) = cross_attention_backward(p, cache, &d_x)?;
                    AttentionParams::accumulate(&mut grads[i], g)?;
                    match stage {
                        Stage::DensityCross => d_density.add_assign(&dkv)?,
                        Stage::DepthCross => d_depth.add_assign(&dkv)?,
                        _ => d_visual.add_assign(&dkv)?,
                    }
                    d_x = dq;
                }
            }
        }
        let mut flat = grads.into_iter();
        let layers = self
            .params
            .layers
            .iter()
            .map(|stages| {
                stages
                    .iter()
                    .map(|_| flat.next().flatten().expect("one gradient per stage"))
                    .collect()
            })
            .collect();
        Ok(DecoderGrads {
            params: DecoderParams { layers },
            queries: d_x,
            density: d_density,
            depth: d_depth,
            visual: d_visual,
        })
    }
}

/// Runs the decoder over `queries` (`m x dim`).
pub fn decoder_forward(
    queries: &Tensor,
    memory: &DecoderMemory,
    cfg: &DecoderConfig,
    params: &DecoderParams,
) -> Result<Tensor, CqError> {
    DecoderGraph::new(cfg, params).forward(queries, memory)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_stage_orders() {
        let s = parse_stages("DS,SA,D,SA,V").unwrap();
        assert_eq!(s.len(), 5);
        assert_eq!(s[0], Stage::DensityCross);
        assert_eq!(parse_stages("D -> SA -> DS").unwrap().len(), 3);
        assert!(matches!(parse_stages("DS,XX"), Err(CqError::Config(_))));
        assert!(parse_stages("").is_err());
    }

    #[test]
    fn density_only_at_selected_layers() {
        let cfg = DecoderConfig::parse("DS,SA,D,SA,V", 3)
            .unwrap()
            .with_density_only_at(&[3])
            .unwrap();
        assert_eq!(cfg.layers[0].len(), 4);
        assert_eq!(cfg.layers[1].len(), 4);
        assert_eq!(cfg.layers[2].len(), 5);
        assert!(DecoderConfig::parse("DS", 2).unwrap().with_density_only_at(&[1]).is_err());
        assert!(DecoderConfig::parse("DS,SA", 2).unwrap().with_density_only_at(&[5]).is_err());
    }

    #[test]
    fn mismatched_params_are_rejected() {
        let cfg = DecoderConfig::parse("DS,SA", 1).unwrap();
        let other = DecoderConfig::parse("SA", 1).unwrap();
        let params = DecoderParams::seeded(&other, 4, 2, 0);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let memory = DecoderMemory {
            density: Tensor::random_unit(&[3, 4], &mut rng),
            depth: Tensor::random_unit(&[3, 4], &mut rng),
            visual: Tensor::random_unit(&[3, 4], &mut rng),
        };
        let q = Tensor::random_unit(&[2, 4], &mut rng);
        assert!(decoder_forward(&q, &memory, &cfg, &params).is_err());
    }

    #[test]
    fn empty_referenced_memory_is_an_error() {
        let cfg = DecoderConfig::parse("SA,V", 1).unwrap();
        let params = DecoderParams::seeded(&cfg, 4, 2, 0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let memory = DecoderMemory {
            density: Tensor::zeros(&[0, 4]),
            depth: Tensor::zeros(&[0, 4]),
            visual: Tensor::zeros(&[0, 4]),
        };
        let q = Tensor::random_unit(&[2, 4], &mut rng);
        assert!(decoder_forward(&q, &memory, &cfg, &params).is_err());
        // unreferenced empty sets are fine
        let cfg = DecoderConfig::parse("SA", 1).unwrap();
        let params = DecoderParams::seeded(&cfg, 4, 2, 0);
        assert!(decoder_forward(&q, &memory, &cfg, &params).is_ok());
    }
}
