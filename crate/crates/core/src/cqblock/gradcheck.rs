//! Central finite-difference verification of the analytic backward passes.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::attention::{attention_forward, cross_attention_backward, mhsa_backward, mhsa_forward, AttentionParams};
use super::decoder::{DecoderConfig, DecoderGraph, DecoderMemory, DecoderParams};
use super::layers::{Conv2d, Linear};
use super::module::{CqModuleGraph, CqModuleParams};
use super::{CqError, Parameters};
use crate::density::{density_loss, density_loss_grad, DensityMap};
use crate::embedding::QuantizerConfig;
use crate::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-5;
/// Floor of the relative-error denominator.
pub const REL_ERROR_FLOOR: f64 = 1e-8;

/// A scalar function of its own tensors with an analytic gradient.
///
/// The names produced by [`Parameters::visit`] on the component and on the
/// gradient must agree.
pub trait Differentiable: Parameters + Clone {
    fn value(&self) -> Result<f64, CqError>;
    fn gradient(&self) -> Result<BTreeMap<String, Tensor>, CqError>;
}

/// `|a - b| / max(|a|, |b|, 1e-8)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_ERROR_FLOOR)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamCheck {
    pub name: String,
    pub count: usize,
    pub max_rel_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub component: String,
    pub seed: u64,
    pub step: f64,
    pub parameters: Vec<ParamCheck>,
    pub max_rel_error: f64,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error < tol
    }
}

fn nudge<C: Parameters>(c: &mut C, name: &str, index: usize, value: f64) {
    c.visit_mut("", &mut |n, t| {
        if n == name {
            t.data_mut()[index] = value;
        }
    });
}

/// Compares the analytic gradient of `component` with central differences.
pub fn check_gradients<C: Differentiable>(component: &C, step: f64) -> Result<Vec<ParamCheck>, CqError> {
    let analytic = component.gradient()?;
    let mut probe = component.clone();
    let mut out = Vec::new();
    for (name, tensor) in component.named_tensors() {
        let grad = analytic
            .get(&name)
            .ok_or_else(|| CqError::Shape(format!("no analytic gradient for {name}")))?;
        if grad.len() != tensor.len() {
            return Err(CqError::Shape(format!("gradient of {name} has the wrong size")));
        }
        let mut worst = 0.0f64;
        for (i, &x) in tensor.data().iter().enumerate() {
            nudge(&mut probe, &name, i, x + step);
            let plus = probe.value()?;
            nudge(&mut probe, &name, i, x - step);
            let minus = probe.value()?;
            nudge(&mut probe, &name, i, x);
            let numeric = (plus - minus) / (2.0 * step);
            worst = worst.max(relative_error(grad.data()[i], numeric));
        }
        out.push(ParamCheck {
            name,
            count: tensor.len(),
            max_rel_error: worst,
        });
    }
    Ok(out)
}

fn named<P: Parameters>(p: &P, prefix: &str, into: &mut BTreeMap<String, Tensor>) {
    p.visit(prefix, &mut |n, t| {
        into.insert(n, t.clone());
    });
}

/// `f(x) = sum(w * x)` with fixed weights `w`.
#[derive(Debug, Clone)]
pub struct IdentityCheck {
    pub x: Tensor,
    pub weights: Tensor,
}

impl Parameters for IdentityCheck {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        f(format!("{prefix}x"), &self.x);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        f(format!("{prefix}x"), &mut self.x);
    }
}

impl Differentiable for IdentityCheck {
    fn value(&self) -> Result<f64, CqError> {
        Ok(self.x.dot(&self.weights)?)
    }
    fn gradient(&self) -> Result<BTreeMap<String, Tensor>, CqError> {
        Ok(BTreeMap::from([("x".to_string(), self.weights.clone())]))
    }
}

/// Sum of the outputs of a linear layer.
#[derive(Debug, Clone)]
pub struct LinearCheck {
    pub layer: Linear,
    pub input: Tensor,
}

impl Parameters for LinearCheck {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        self.layer.visit(&format!("{prefix}linear"), f);
        f(format!("{prefix}input"), &self.input);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        self.layer.visit_mut(&format!("{prefix}linear"), f);
        f(format!("{prefix}input"), &mut self.input);
    }
}

impl Differentiable for LinearCheck {
    fn value(&self) -> Result<f64, CqError> {
        Ok(self.layer.forward(&self.input)?.sum())
    }
    fn gradient(&self) -> Result<BTreeMap<String, Tensor>, CqError> {
        let ones = Tensor::filled(&[self.input.shape()[0], self.layer.d_out()], 1.0);
        let (g, d_x) = self.layer.backward(&self.input, &ones)?;
        let mut out = BTreeMap::new();
        named(&g, "linear", &mut out);
        out.insert("input".into(), d_x);
        Ok(out)
    }
}

/// Projection of a convolution output onto fixed weights.
#[derive(Debug, Clone)]
pub struct ConvCheck {
    pub conv: Conv2d,
    pub input: Tensor,
    pub projection: Tensor,
}

impl Parameters for ConvCheck {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        self.conv.visit(&format!("{prefix}conv"), f);
        f(format!("{prefix}input"), &self.input);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        self.conv.visit_mut(&format!("{prefix}conv"), f);
        f(format!("{prefix}input"), &mut self.input);
    }
}

impl Differentiable for ConvCheck {
    fn value(&self) -> Result<f64, CqError> {
        Ok(self.conv.forward(&self.input)?.dot(&self.projection)?)
    }
    fn gradient(&self) -> Result<BTreeMap<String, Tensor>, CqError> {
        let (g, d_x) = self.conv.backward(&self.input, &self.projection)?;
        let mut out = BTreeMap::new();
        named(&g, "conv", &mut out);
        out.insert("input".into(), d_x);
        Ok(out)
    }
}

/// Projection of a self-attention output (with positional content) onto fixed weights.
#[derive(Debug, Clone)]
pub struct MhsaCheck {
    pub attention: AttentionParams,
    pub tokens: Tensor,
    pub pos: Tensor,
    pub projection: Tensor,
}

impl Parameters for MhsaCheck {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        self.attention.visit(&format!("{prefix}attention"), f);
        f(format!("{prefix}tokens"), &self.tokens);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        self.attention.visit_mut(&format!("{prefix}attention"), f);
        f(format!("{prefix}tokens"), &mut self.tokens);
    }
}

impl Differentiable for MhsaCheck {
    fn value(&self) -> Result<f64, CqError> {
        let (out, _) = mhsa_forward(&self.tokens, Some(&self.pos), &self.attention)?;
        Ok(out.dot(&self.projection)?)
    }
    fn gradient(&self) -> Result<BTreeMap<String, Tensor>, CqError> {
        let (_, cache) = mhsa_forward(&self.tokens, Some(&self.pos), &self.attention)?;
        let (g, d_tokens) = mhsa_backward(&self.attention, &cache, &self.projection)?;
        let mut out = BTreeMap::new();
        named(&g, "attention", &mut out);
        out.insert("tokens".into(), d_tokens);
        Ok(out)
    }
}

#[derive(Debug, Clone)]
pub struct CrossAttentionCheck {
    pub attention: AttentionParams,
    pub queries: Tensor,
    pub kv: Tensor,
    pub projection: Tensor,
}

impl Parameters for CrossAttentionCheck {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        self.attention.visit(&format!("{prefix}attention"), f);
        f(format!("{prefix}queries"), &self.queries);
        f(format!("{prefix}kv"), &self.kv);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        self.attention.visit_mut(&format!("{prefix}attention"), f);
        f(format!("{prefix}queries"), &mut self.queries);
        f(format!("{prefix}kv"), &mut self.kv);
    }
}

impl Differentiable for CrossAttentionCheck {
    fn value(&self) -> Result<f64, CqError> {
        let (out, _) = attention_forward(&self.queries, &self.kv, &self.kv, &self.queries, &self.attention)?;
        Ok(out.dot(&self.projection)?)
    }
    fn gradient(&self) -> Result<BTreeMap<String, Tensor>, CqError> {
        let (_, cache) = attention_forward(&self.queries, &self.kv, &self.kv, &self.queries, &self.attention)?;
        let (g, d_q, d_kv) = cross_attention_backward(&self.attention, &cache, &self.projection)?;
        let mut out = BTreeMap::new();
        named(&g, "attention", &mut out);
        out.insert("queries".into(), d_q);
        out.insert("kv".into(), d_kv);
        Ok(out)
    }
}

/// L1 density loss as a function of the prediction.
#[derive(Debug, Clone)]
pub struct DensityLossCheck {
    pub pred: Tensor,
    pub target: DensityMap,
}

impl Parameters for DensityLossCheck {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        f(format!("{prefix}pred"), &self.pred);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        f(format!("{prefix}pred"), &mut self.pred);
    }
}

impl DensityLossCheck {
    fn pred_map(&self) -> Result<DensityMap, CqError> {
        Ok(DensityMap::from_vec(
            self.target.height(),
            self.target.width(),
            self.pred.data().to_vec(),
        )?)
    }
}

impl Differentiable for DensityLossCheck {
    fn value(&self) -> Result<f64, CqError> {
        Ok(density_loss(&self.pred_map()?, &self.target)?)
    }
    fn gradient(&self) -> Result<BTreeMap<String, Tensor>, CqError> {
        let g = density_loss_grad(&self.pred_map()?, &self.target)?;
        Ok(BTreeMap::from([(
            "pred".to_string(),
            Tensor::new(self.pred.shape().to_vec(), g)?,
        )]))
    }
}

/// `sum(projection * density_features) + L1(predicted density, target)` through the
/// whole density module, with the embedding bins frozen at their unperturbed values.
#[derive(Debug, Clone)]
pub struct CqModuleCheck {
    pub params: CqModuleParams,
    pub features: Tensor,
    pub target: DensityMap,
    pub projection: Tensor,
    pub bins: Vec<usize>,
}

impl CqModuleCheck {
    pub fn new(params: CqModuleParams, features: Tensor, target: DensityMap, projection: Tensor) -> Result<Self, CqError> {
        let bins = CqModuleGraph::new(&params).forward(&features)?.bins;
        Ok(CqModuleCheck {
            params,
            features,
            target,
            projection,
            bins,
        })
    }
}

impl Parameters for CqModuleCheck {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        self.params.visit(prefix, f);
        f(format!("{prefix}input"), &self.features);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        self.params.visit_mut(prefix, f);
        f(format!("{prefix}input"), &mut self.features);
    }
}

impl Differentiable for CqModuleCheck {
    fn value(&self) -> Result<f64, CqError> {
        let out = CqModuleGraph::new(&self.params).forward_with_bins(&self.features, &self.bins)?;
        Ok(out.density_features.dot(&self.projection)? + density_loss(&out.density, &self.target)?)
    }
    fn gradient(&self) -> Result<BTreeMap<String, Tensor>, CqError> {
        let mut graph = CqModuleGraph::new(&self.params);
        let out = graph.forward_with_bins(&self.features, &self.bins)?;
        let d_density = density_loss_grad(&out.density, &self.target)?;
        let g = graph.backward(&self.projection, &d_density)?;
        let mut map = BTreeMap::new();
        named(&g, "", &mut map);
        Ok(map)
    }
}

/// Sum of the decoder outputs.
#[derive(Debug, Clone)]
pub struct DecoderCheck {
    pub cfg: DecoderConfig,
    pub params: DecoderParams,
    pub queries: Tensor,
    pub memory: DecoderMemory,
}

impl Parameters for DecoderCheck {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        self.params.visit(prefix, f);
        f(format!("{prefix}queries"), &self.queries);
        f(format!("{prefix}density"), &self.memory.density);
        f(format!("{prefix}depth"), &self.memory.depth);
        f(format!("{prefix}visual"), &self.memory.visual);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        self.params.visit_mut(prefix, f);
        f(format!("{prefix}queries"), &mut self.queries);
        f(format!("{prefix}density"), &mut self.memory.density);
        f(format!("{prefix}depth"), &mut self.memory.depth);
        f(format!("{prefix}visual"), &mut self.memory.visual);
    }
}

impl Differentiable for DecoderCheck {
    fn value(&self) -> Result<f64, CqError> {
        Ok(DecoderGraph::new(&self.cfg, &self.params)
            .forward(&self.queries, &self.memory)?
            .sum())
    }
    fn gradient(&self) -> Result<BTreeMap<String, Tensor>, CqError> {
        let mut graph = DecoderGraph::new(&self.cfg, &self.params);
        let out = graph.forward(&self.queries, &self.memory)?;
        let g = graph.backward(&Tensor::filled(out.shape(), 1.0))?;
        let mut map = BTreeMap::new();
        named(&g, "", &mut map);
        Ok(map)
    }
}

/// Components with a seeded test instance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum GradComponent {
    Identity,
    Linear,
    Conv,
    Mhsa,
    CrossAttention,
    DensityLoss,
    CqModule,
    Decoder,
}

impl GradComponent {
    pub const ALL: [GradComponent; 8] = [
        GradComponent::Identity,
        GradComponent::Linear,
        GradComponent::Conv,
        GradComponent::Mhsa,
        GradComponent::CrossAttention,
        GradComponent::DensityLoss,
        GradComponent::CqModule,
        GradComponent::Decoder,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            GradComponent::Identity => "identity",
            GradComponent::Linear => "linear",
            GradComponent::Conv => "conv",
            GradComponent::Mhsa => "mhsa",
            GradComponent::CrossAttention => "cross-attention",
            GradComponent::DensityLoss => "density-loss",
            GradComponent::CqModule => "cq-module",
            GradComponent::Decoder => "decoder",
        }
    }
}

impl fmt::Display for GradComponent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for GradComponent {
    type Err = CqError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        GradComponent::ALL
            .iter()
            .find(|c| c.name() == s)
            .copied()
            .ok_or_else(|| CqError::Config(format!("unknown gradcheck component {s:?}")))
    }
}

/// Target values at least 0.1 away from `pred`, on a random side, so that the L1
/// kink is never within a finite-difference step.
fn target_away_from<R: Rng>(pred: &[f64], rng: &mut R) -> Vec<f64> {
    pred.iter()
        .map(|&p| {
            let offset = 0.1 + 0.9 * rng.gen::<f64>();
            if rng.gen::<bool>() {
                p + offset
            } else {
                p - offset
            }
        })
        .collect()
}

const HIDDEN: usize = 4;
const HEADS: usize = 2;

/// Builds the seeded instance of `component` and checks it.
pub fn grad_check(component: GradComponent, seed: u64, step: f64) -> Result<GradCheckReport, CqError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let parameters = match component {
        GradComponent::Identity => check_gradients(
            &IdentityCheck {
                x: Tensor::random_unit(&[4], &mut rng),
                weights: Tensor::random_unit(&[4], &mut rng),
            },
            step,
        )?,
        GradComponent::Linear => check_gradients(
            &LinearCheck {
                layer: Linear::seeded(HIDDEN, 3, &mut rng),
                input: Tensor::random_unit(&[3, HIDDEN], &mut rng),
            },
            step,
        )?,
        GradComponent::Conv => check_gradients(
            &ConvCheck {
                conv: Conv2d::seeded(3, 2, 3, &mut rng),
                input: Tensor::random_unit(&[4, 4, 2], &mut rng),
                projection: Tensor::random_unit(&[4, 4, 3], &mut rng),
            },
            step,
        )?,
        GradComponent::Mhsa => check_gradients(
            &MhsaCheck {
                attention: AttentionParams::seeded(HIDDEN, HEADS, &mut rng),
                tokens: Tensor::random_unit(&[5, HIDDEN], &mut rng),
                pos: Tensor::random_unit(&[5, HIDDEN], &mut rng),
                projection: Tensor::random_unit(&[5, HIDDEN], &mut rng),
            },
            step,
        )?,
        GradComponent::CrossAttention => check_gradients(
            &CrossAttentionCheck {
                attention: AttentionParams::seeded(HIDDEN, HEADS, &mut rng),
                queries: Tensor::random_unit(&[3, HIDDEN], &mut rng),
                kv: Tensor::random_unit(&[5, HIDDEN], &mut rng),
                projection: Tensor::random_unit(&[3, HIDDEN], &mut rng),
            },
            step,
        )?,
        GradComponent::DensityLoss => {
            let pred = Tensor::random_unit(&[3, 3], &mut rng);
            let target = target_away_from(pred.data(), &mut rng);
            check_gradients(
                &DensityLossCheck {
                    pred,
                    target: DensityMap::from_vec(3, 3, target)?,
                },
                step,
            )?
        }
        GradComponent::CqModule => {
            let params = CqModuleParams::seeded(2, HIDDEN, HEADS, QuantizerConfig::default(), rng.gen());
            let features = Tensor::random_unit(&[3, 3, 2], &mut rng);
            let pred = CqModuleGraph::new(&params).forward(&features)?.density;
            let target = DensityMap::from_vec(3, 3, target_away_from(pred.values(), &mut rng))?;
            let projection = Tensor::random_unit(&[3, 3, HIDDEN], &mut rng);
            check_gradients(&CqModuleCheck::new(params, features, target, projection)?, step)?
        }
        GradComponent::Decoder => {
            let cfg = DecoderConfig::parse("DS,SA,D,SA,V", 1)?;
            let params = DecoderParams::seeded(&cfg, HIDDEN, HEADS, rng.gen());
            let memory = DecoderMemory {
                density: Tensor::random_unit(&[4, HIDDEN], &mut rng),
                depth: Tensor::random_unit(&[3, HIDDEN], &mut rng),
                visual: Tensor::random_unit(&[5, HIDDEN], &mut rng),
            };
            check_gradients(
                &DecoderCheck {
                    cfg,
                    params,
                    queries: Tensor::random_unit(&[3, HIDDEN], &mut rng),
                    memory,
                },
                step,
            )?
        }
    };
    let max_rel_error = parameters.iter().map(|p| p.max_rel_error).fold(0.0, f64::max);
    Ok(GradCheckReport {
        component: component.name().to_string(),
        seed,
        step,
        parameters,
        max_rel_error,
    })
}
