//! Toy-scale density module and density-guided decoder, in double precision with
//! hand-written backward passes.

pub mod attention;
pub mod decoder;
pub mod gradcheck;
pub mod layers;
pub mod module;

use thiserror::Error;

use crate::density::DensityError;
use crate::embedding::EmbeddingError;
use crate::tensor::{Tensor, TensorError};

pub use attention::{cross_attention, mhsa, sine_pos_embedding, AttentionParams, DEFAULT_POS_TEMPERATURE};
pub use decoder::{
    decoder_forward, parse_stages, DecoderConfig, DecoderGraph, DecoderMemory, DecoderParams, Stage,
};
pub use gradcheck::{grad_check, GradCheckReport, GradComponent};
pub use layers::{Conv2d, Linear};
pub use module::{cq_module_forward, density_tokens, CqModuleGraph, CqModuleParams, CqOutput};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CqError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("key/value set is empty")]
    EmptyKeys,
    #[error("backward called before forward")]
    BackwardBeforeForward,
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
    #[error(transparent)]
    Density(#[from] DensityError),
}

/// Named access to the tensors of a parameter (or gradient) container.
pub trait Parameters {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor));

    fn named_tensors(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        self.visit("", &mut |name, t| out.push((name, t.clone())));
        out
    }

    fn num_values(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, t| n += t.len());
        n
    }
}
