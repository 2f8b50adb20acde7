//! The two-branch density module.
//!
//! Shared trunk: two 3x3 convolutions. Upper branch: self-attention over the
//! flattened pixels with the sine embedding added to queries and keys. Lower
//! branch: a 1x1 convolution predicts the density map, which is quantized and
//! looked up in the embedding table. The two branches are summed entry-wise.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::attention::{mhsa_backward, mhsa_forward, sine_pos_embedding, AttentionCache, AttentionParams, DEFAULT_POS_TEMPERATURE};
use super::layers::Conv2d;
use super::{CqError, Parameters};
use crate::density::DensityMap;
use crate::embedding::{lookup, EmbeddingTable, Quantizer, QuantizerConfig};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CqModuleParams {
    pub conv1: Conv2d,
    pub conv2: Conv2d,
    /// 1x1 convolution from the hidden width to one density channel.
    pub density_head: Conv2d,
    pub attention: AttentionParams,
    pub quantizer: QuantizerConfig,
    pub table: EmbeddingTable,
    pub pos_temperature: f64,
}

impl CqModuleParams {
    pub fn seeded(c_in: usize, hidden: usize, n_heads: usize, quantizer: QuantizerConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let table = EmbeddingTable::seeded(quantizer.n_bins, hidden, seed.wrapping_add(1));
        CqModuleParams {
            conv1: Conv2d::seeded(3, c_in, hidden, &mut rng),
            conv2: Conv2d::seeded(3, hidden, hidden, &mut rng),
            density_head: Conv2d::seeded(1, hidden, 1, &mut rng),
            attention: AttentionParams::seeded(hidden, n_heads, &mut rng),
            quantizer,
            table,
            pos_temperature: DEFAULT_POS_TEMPERATURE,
        }
    }

    pub fn hidden(&self) -> usize {
        self.conv1.c_out()
    }

    pub fn c_in(&self) -> usize {
        self.conv1.c_in()
    }

    pub fn validate(&self) -> Result<(), CqError> {
        let hidden = self.hidden();
        if self.conv1.kernel() != 3 || self.conv2.kernel() != 3 || self.density_head.kernel() != 1 {
            return Err(CqError::Config(
                "trunk convolutions must be 3x3 and the density head 1x1".into(),
            ));
        }
        if self.conv2.c_in() != hidden || self.conv2.c_out() != hidden {
            return Err(CqError::Shape("second convolution must map hidden to hidden".into()));
        }
        if self.density_head.c_in() != hidden || self.density_head.c_out() != 1 {
            return Err(CqError::Shape("density head must map hidden to one channel".into()));
        }
        if self.attention.dim() != hidden {
            return Err(CqError::Shape(format!(
                "attention width {} differs from hidden width {hidden}",
                self.attention.dim()
            )));
        }
        self.attention.validate()?;
        if self.table.dim() != hidden {
            return Err(CqError::Shape(format!(
                "embedding width {} differs from hidden width {hidden}",
                self.table.dim()
            )));
        }
        self.table.check_matches(&self.quantizer)?;
        Ok(())
    }
}

impl Parameters for CqModuleParams {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        self.conv1.visit(&format!("{prefix}conv1"), f);
        self.conv2.visit(&format!("{prefix}conv2"), f);
        self.density_head.visit(&format!("{prefix}density_head"), f);
        self.attention.visit(&format!("{prefix}attention"), f);
        f(format!("{prefix}table"), self.table.as_tensor());
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        self.conv1.visit_mut(&format!("{prefix}conv1"), f);
        self.conv2.visit_mut(&format!("{prefix}conv2"), f);
        self.density_head.visit_mut(&format!("{prefix}density_head"), f);
        self.attention.visit_mut(&format!("{prefix}attention"), f);
        f(format!("{prefix}table"), self.table.as_tensor_mut());
    }
}

#[derive(Debug, Clone)]
pub struct CqOutput {
    /// `h x w x hidden`.
    pub density_features: Tensor,
    /// Predicted (pre-quantization) density map.
    pub density: DensityMap,
    /// Embedding bin of every pixel.
    pub bins: Vec<usize>,
}

/// Gradients of the module, laid out like [`CqModuleParams`] plus the input features.
#[derive(Debug, Clone)]
pub struct CqModuleGrads {
    pub conv1: Conv2d,
    pub conv2: Conv2d,
    pub density_head: Conv2d,
    pub attention: AttentionParams,
    pub table: Tensor,
    pub input: Tensor,
}

impl Parameters for CqModuleGrads {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        self.conv1.visit(&format!("{prefix}conv1"), f);
        self.conv2.visit(&format!("{prefix}conv2"), f);
        self.density_head.visit(&format!("{prefix}density_head"), f);
        self.attention.visit(&format!("{prefix}attention"), f);
        f(format!("{prefix}table"), &self.table);
        f(format!("{prefix}input"), &self.input);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        self.conv1.visit_mut(&format!("{prefix}conv1"), f);
        self.conv2.visit_mut(&format!("{prefix}conv2"), f);
        self.density_head.visit_mut(&format!("{prefix}density_head"), f);
        self.attention.visit_mut(&format!("{prefix}attention"), f);
        f(format!("{prefix}table"), &mut self.table);
        f(format!("{prefix}input"), &mut self.input);
    }
}

#[derive(Debug, Clone)]
struct CqCache {
    input: Tensor,
    trunk1: Tensor,
    trunk2: Tensor,
    attention: AttentionCache,
    bins: Vec<usize>,
}

/// Forward/backward state for one evaluation of the module.
#[derive(Debug)]
pub struct CqModuleGraph<'a> {
    params: &'a CqModuleParams,
    cache: Option<CqCache>,
}

impl<'a> CqModuleGraph<'a> {
    pub fn new(params: &'a CqModuleParams) -> Self {
        CqModuleGraph { params, cache: None }
    }

    pub fn forward(&mut self, features: &Tensor) -> Result<CqOutput, CqError> {
        self.run(features, None)
    }

    /// Forward pass with the embedding bins fixed instead of quantized from the
    /// predicted density. The lookup is piecewise constant, so freezing it gives
    /// the same value and gradient wherever the bins do not change.
    pub fn forward_with_bins(&mut self, features: &Tensor, bins: &[usize]) -> Result<CqOutput, CqError> {
        self.run(features, Some(bins))
    }

    fn run(&mut self, features: &Tensor, frozen: Option<&[usize]>) -> Result<CqOutput, CqError> {
        let p = self.params;
        p.validate()?;
        let (h, w) = match features.shape() {
            [h, w, c] if *c == p.c_in() && h * w > 0 => (*h, *w),
            s => {
                return Err(CqError::Shape(format!(
                    "features {s:?}, expected non-empty h x w x {}",
                    p.c_in()
                )))
            }
        };
        let hidden = p.hidden();
        let n = h * w;

        let trunk1 = p.conv1.forward(features)?;
        let trunk2 = p.conv2.forward(&trunk1)?;
        let tokens = trunk2.clone().reshape(&[n, hidden])?;
        let pos = sine_pos_embedding(h, w, hidden, p.pos_temperature)?.reshape(&[n, hidden])?;
        let (upper, attention) = mhsa_forward(&tokens, Some(&pos), &p.attention)?;

        let density = p.density_head.forward(&trunk2)?.into_data();
        let bins = match frozen {
            Some(b) if b.len() == n => b.to_vec(),
            Some(b) => {
                return Err(CqError::Shape(format!("{} frozen bins for {n} pixels", b.len())))
            }
            None => {
                let q = Quantizer::new(p.quantizer.clone())?;
                density
                    .iter()
                    .map(|&v| q.quantize(v))
                    .collect::<Result<Vec<_>, _>>()?
            }
        };
        if let Some(&bad) = bins.iter().find(|&&k| k >= p.table.n_bins()) {
            return Err(CqError::Shape(format!("bin {bad} outside the embedding table")));
        }
        let embedded = lookup(&bins, &p.table);
        let density_features = upper.add(&embedded)?.reshape(&[h, w, hidden])?;

        self.cache = Some(CqCache {
            input: features.clone(),
            trunk1,
            trunk2,
            attention,
            bins: bins.clone(),
        });
        Ok(CqOutput {
            density_features,
            density: DensityMap::from_vec(h, w, density)?,
            bins,
        })
    }

    /// Backpropagates `d_features` (gradient wrt the merged density features) and
    /// `d_density` (gradient wrt the predicted density map, e.g. from the density
    /// loss). The quantize-and-lookup step passes no gradient to the density map.
    pub fn backward(&self, d_features: &Tensor, d_density: &[f64]) -> Result<CqModuleGrads, CqError> {
        let cache = self.cache.as_ref().ok_or(CqError::BackwardBeforeForward)?;
        let p = self.params;
        let hidden = p.hidden();
        let (h, w) = (cache.input.shape()[0], cache.input.shape()[1]);
        let n = h * w;
        if d_features.shape() != [h, w, hidden] || d_density.len() != n {
            return Err(CqError::Shape(format!(
                "upstream gradients {:?} and {} density values for a {h}x{w}x{hidden} output",
                d_features.shape(),
                d_density.len()
            )));
        }
        let d_tokens_out = d_features.clone().reshape(&[n, hidden])?;

        let mut d_table = Tensor::zeros(p.table.as_tensor().shape());
        for (px, &k) in cache.bins.iter().enumerate() {
            let g = d_tokens_out.row(px);
            for (t, v) in d_table.data_mut()[k * hidden..(k + 1) * hidden].iter_mut().zip(g) {
                *t += v;
            }
        }

        let (d_attention, d_tokens) = mhsa_backward(&p.attention, &cache.attention, &d_tokens_out)?;
        let mut d_trunk2 = d_tokens.reshape(&[h, w, hidden])?;
        let d_density = Tensor::new(vec![h, w, 1], d_density.to_vec())?;
        let (d_head, d_trunk2_head) = p.density_head.backward(&cache.trunk2, &d_density)?;
        d_trunk2.add_assign(&d_trunk2_head)?;
        let (d_conv2, d_trunk1) = p.conv2.backward(&cache.trunk1, &d_trunk2)?;
        let (d_conv1, d_input) = p.conv1.backward(&cache.input, &d_trunk1)?;
        Ok(CqModuleGrads {
            conv1: d_conv1,
            conv2: d_conv2,
            density_head: d_head,
            attention: d_attention,
            table: d_table,
            input: d_input,
        })
    }
}

/// One forward pass of the density module.
pub fn cq_module_forward(features: &Tensor, params: &CqModuleParams) -> Result<CqOutput, CqError> {
    CqModuleGraph::new(params).forward(features)
}

/// Flattens `h x w x c` density features into tokens and adds the sine embedding,
/// producing the key/value set of the density cross-attention.
pub fn density_tokens(density_features: &Tensor, temperature: f64) -> Result<Tensor, CqError> {
    let (h, w, c) = match density_features.shape() {
        [h, w, c] => (*h, *w, *c),
        s => return Err(CqError::Shape(format!("density features {s:?}, expected h x w x c"))),
    };
    let pos = sine_pos_embedding(h, w, c, temperature)?;
    Ok(density_features.add(&pos)?.reshape(&[h * w, c])?)
}
