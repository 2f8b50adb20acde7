//! Multi-head scaled dot-product attention with a residual connection, its
//! backward pass, and the 2D sine positional embedding.
//!
//! Keys carry no bias: a key bias shifts every score of a query row by the same
//! amount, which softmax cancels, so it would be an unidentifiable parameter.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::layers::Linear;
use super::{CqError, Parameters};
use crate::tensor::Tensor;

/// Default temperature of the sine positional embedding.
pub const DEFAULT_POS_TEMPERATURE: f64 = 10_000.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionParams {
    pub n_heads: usize,
    pub query: Linear,
    pub key_weight: Tensor,
    pub value: Linear,
    pub output: Linear,
}

impl AttentionParams {
    pub fn seeded<R: Rng>(dim: usize, n_heads: usize, rng: &mut R) -> Self {
        AttentionParams {
            n_heads,
            query: Linear::seeded(dim, dim, rng),
            key_weight: Tensor::random_uniform(&[dim, dim], (3.0 / dim as f64).sqrt(), rng),
            value: Linear::seeded(dim, dim, rng),
            output: Linear::seeded(dim, dim, rng),
        }
    }

    /// Identity projections and zero biases.
    pub fn identity(dim: usize, n_heads: usize) -> Self {
        AttentionParams {
            n_heads,
            query: Linear::identity(dim),
            key_weight: Linear::identity(dim).weight,
            value: Linear::identity(dim),
            output: Linear::identity(dim),
        }
    }

    /// All-zero parameters, used as a gradient accumulator.
    pub fn zeros(dim: usize, n_heads: usize) -> Self {
        AttentionParams {
            n_heads,
            query: Linear::zeros(dim, dim),
            key_weight: Tensor::zeros(&[dim, dim]),
            value: Linear::zeros(dim, dim),
            output: Linear::zeros(dim, dim),
        }
    }

    pub fn dim(&self) -> usize {
        self.query.d_in()
    }

    /// Zeroes the value projection and the output bias, turning the sublayer into
    /// the identity through its residual path.
    pub fn zero_value_path(&mut self) {
        self.value = Linear::zeros(self.dim(), self.dim());
        self.output.bias = Tensor::zeros(&[self.dim()]);
    }

    pub fn validate(&self) -> Result<(), CqError> {
        let d = self.dim();
        if self.n_heads == 0 || !d.is_multiple_of(self.n_heads) {
            return Err(CqError::Config(format!(
                "width {d} is not divisible by {} heads",
                self.n_heads
            )));
        }
        let square = |name: &str, t: &Tensor| {
            if t.shape() == [d, d] {
                Ok(())
            } else {
                Err(CqError::Shape(format!("{name} has shape {:?}, expected [{d}, {d}]", t.shape())))
            }
        };
        square("query weight", &self.query.weight)?;
        square("key weight", &self.key_weight)?;
        square("value weight", &self.value.weight)?;
        square("output weight", &self.output.weight)?;
        for (name, b) in [
            ("query bias", &self.query.bias),
            ("value bias", &self.value.bias),
            ("output bias", &self.output.bias),
        ] {
            if b.shape() != [d] {
                return Err(CqError::Shape(format!("{name} has shape {:?}, expected [{d}]", b.shape())));
            }
        }
        Ok(())
    }

    fn add_assign(&mut self, other: &AttentionParams) -> Result<(), CqError> {
        self.query.weight.add_assign(&other.query.weight)?;
        self.query.bias.add_assign(&other.query.bias)?;
        self.key_weight.add_assign(&other.key_weight)?;
        self.value.weight.add_assign(&other.value.weight)?;
        self.value.bias.add_assign(&other.value.bias)?;
        self.output.weight.add_assign(&other.output.weight)?;
        self.output.bias.add_assign(&other.output.bias)?;
        Ok(())
    }

    pub(crate) fn accumulate(acc: &mut Option<AttentionParams>, g: AttentionParams) -> Result<(), CqError> {
        match acc {
            Some(a) => a.add_assign(&g),
            None => {
                *acc = Some(g);
                Ok(())
            }
        }
    }
}

impl Parameters for AttentionParams {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        self.query.visit(&format!("{prefix}.query"), f);
        f(format!("{prefix}.key.weight"), &self.key_weight);
        self.value.visit(&format!("{prefix}.value"), f);
        self.output.visit(&format!("{prefix}.output"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        self.query.visit_mut(&format!("{prefix}.query"), f);
        f(format!("{prefix}.key.weight"), &mut self.key_weight);
        self.value.visit_mut(&format!("{prefix}.value"), f);
        self.output.visit_mut(&format!("{prefix}.output"), f);
    }
}

/// Intermediates kept by [`attention_forward`] for the backward pass.
#[derive(Debug, Clone)]
pub struct AttentionCache {
    query_src: Tensor,
    key_src: Tensor,
    value_src: Tensor,
    q: Tensor,
    k: Tensor,
    v: Tensor,
    /// Softmax weights, one `m x n` matrix per head.
    weights: Vec<Tensor>,
    mixed: Tensor,
}

impl AttentionCache {
    pub fn weights(&self) -> &[Tensor] {
        &self.weights
    }
}

/// Gradients of one attention sublayer.
#[derive(Debug, Clone)]
pub struct AttentionGrads {
    pub params: AttentionParams,
    pub query_src: Tensor,
    pub key_src: Tensor,
    pub value_src: Tensor,
    pub residual: Tensor,
}

fn softmax_rows(scores: &mut Tensor) {
    let n = scores.shape()[1];
    for row in scores.data_mut().chunks_mut(n) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        for v in row.iter_mut() {
            *v /= total;
        }
    }
}

fn check_tokens(name: &str, t: &Tensor, dim: usize) -> Result<usize, CqError> {
    match t.shape() {
        [n, c] if *c == dim => Ok(*n),
        s => Err(CqError::Shape(format!("{name} tokens {s:?}, expected n x {dim}"))),
    }
}

/// `residual + Attn(query_src Wq + bq, key_src Wk, value_src Wv + bv) Wo + bo`.
pub fn attention_forward(
    query_src: &Tensor,
    key_src: &Tensor,
    value_src: &Tensor,
    residual: &Tensor,
    params: &AttentionParams,
) -> Result<(Tensor, AttentionCache), CqError> {
    params.validate()?;
    let dim = params.dim();
    let m = check_tokens("query", query_src, dim)?;
    let n = check_tokens("key", key_src, dim)?;
    if check_tokens("value", value_src, dim)? != n {
        return Err(CqError::Shape("keys and values differ in length".into()));
    }
    if residual.shape() != query_src.shape() {
        return Err(CqError::Shape("residual must match the queries".into()));
    }
    if n == 0 {
        return Err(CqError::EmptyKeys);
    }
    let heads = params.n_heads;
    let dh = dim / heads;
    let scale = 1.0 / (dh as f64).sqrt();

    let q = params.query.forward(query_src)?;
    let k = key_src.matmul(&params.key_weight)?;
    let v = params.value.forward(value_src)?;
    let mut mixed = Tensor::zeros(&[m, dim]);
    let mut weights = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = q.columns(h * dh, dh)?;
        let kh = k.columns(h * dh, dh)?;
        let vh = v.columns(h * dh, dh)?;
        let mut a = qh.matmul(&kh.transpose()?)?.scale(scale);
        softmax_rows(&mut a);
        mixed.set_columns(h * dh, &a.matmul(&vh)?)?;
        weights.push(a);
    }
    let out = residual.add(&params.output.forward(&mixed)?)?;
    Ok((
        out,
        AttentionCache {
            query_src: query_src.clone(),
            key_src: key_src.clone(),
            value_src: value_src.clone(),
            q,
            k,
            v,
            weights,
            mixed,
        },
    ))
}

pub fn attention_backward(
    params: &AttentionParams,
    cache: &AttentionCache,
    d_out: &Tensor,
) -> Result<AttentionGrads, CqError> {
    let dim = params.dim();
    let heads = params.n_heads;
    let dh = dim / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let (m, _) = cache.q.dims2()?;
    let (n, _) = cache.k.dims2()?;
    if d_out.shape() != [m, dim] {
        return Err(CqError::Shape(format!(
            "upstream gradient {:?}, expected [{m}, {dim}]",
            d_out.shape()
        )));
    }

    let (d_output, d_mixed) = params.output.backward(&cache.mixed, d_out)?;
    let mut d_q = Tensor::zeros(&[m, dim]);
    let mut d_k = Tensor::zeros(&[n, dim]);
    let mut d_v = Tensor::zeros(&[n, dim]);
    for (h, a) in cache.weights.iter().enumerate() {
        let qh = cache.q.columns(h * dh, dh)?;
        let kh = cache.k.columns(h * dh, dh)?;
        let vh = cache.v.columns(h * dh, dh)?;
        let dz = d_mixed.columns(h * dh, dh)?;
        let d_a = dz.matmul(&vh.transpose()?)?;
        d_v.set_columns(h * dh, &a.transpose()?.matmul(&dz)?)?;
        // softmax backward: dS = A * (dA - rowsum(dA * A))
        let mut d_s = Tensor::zeros(&[m, n]);
        for r in 0..m {
            let ar = a.row(r);
            let dar = d_a.row(r);
            let inner: f64 = ar.iter().zip(dar).map(|(x, y)| x * y).sum();
            for c in 0..n {
                d_s.data_mut()[r * n + c] = ar[c] * (dar[c] - inner) * scale;
            }
        }
        d_q.set_columns(h * dh, &d_s.matmul(&kh)?)?;
        d_k.set_columns(h * dh, &d_s.transpose()?.matmul(&qh)?)?;
    }
    let (d_query, d_query_src) = params.query.backward(&cache.query_src, &d_q)?;
    let d_key_weight = cache.key_src.transpose()?.matmul(&d_k)?;
    let d_key_src = d_k.matmul(&params.key_weight.transpose()?)?;
    let (d_value, d_value_src) = params.value.backward(&cache.value_src, &d_v)?;
    Ok(AttentionGrads {
        params: AttentionParams {
            n_heads: heads,
            query: d_query,
            key_weight: d_key_weight,
            value: d_value,
            output: d_output,
        },
        query_src: d_query_src,
        key_src: d_key_src,
        value_src: d_value_src,
        residual: d_out.clone(),
    })
}

/// Self-attention over `tokens` with optional positional content added to the
/// queries and keys (not the values).
pub fn mhsa(tokens: &Tensor, pos: Option<&Tensor>, params: &AttentionParams) -> Result<Tensor, CqError> {
    Ok(mhsa_forward(tokens, pos, params)?.0)
}

pub(crate) fn mhsa_forward(
    tokens: &Tensor,
    pos: Option<&Tensor>,
    params: &AttentionParams,
) -> Result<(Tensor, AttentionCache), CqError> {
    let qk = match pos {
        Some(p) => tokens.add(p)?,
        None => tokens.clone(),
    };
    attention_forward(&qk, &qk, tokens, tokens, params)
}

/// Gradient with respect to the tokens of [`mhsa`].
pub(crate) fn mhsa_backward(
    params: &AttentionParams,
    cache: &AttentionCache,
    d_out: &Tensor,
) -> Result<(AttentionParams, Tensor), CqError> {
    let g = attention_backward(params, cache, d_out)?;
    let mut d_tokens = g.residual;
    d_tokens.add_assign(&g.query_src)?;
    d_tokens.add_assign(&g.key_src)?;
    d_tokens.add_assign(&g.value_src)?;
    Ok((g.params, d_tokens))
}

/// `queries + Attn(queries -> kv)`.
pub fn cross_attention(queries: &Tensor, kv: &Tensor, params: &AttentionParams) -> Result<Tensor, CqError> {
    Ok(attention_forward(queries, kv, kv, queries, params)?.0)
}

/// Gradients `(params, queries, kv)` of [`cross_attention`].
pub(crate) fn cross_attention_backward(
    params: &AttentionParams,
    cache: &AttentionCache,
    d_out: &Tensor,
) -> Result<(AttentionParams, Tensor, Tensor), CqError> {
    let g = attention_backward(params, cache, d_out)?;
    let mut d_queries = g.residual;
    d_queries.add_assign(&g.query_src)?;
    let mut d_kv = g.key_src;
    d_kv.add_assign(&g.value_src)?;
    Ok((g.params, d_queries, d_kv))
}

/// DETR-style 2D sine embedding of shape `h x w x channels`.
///
/// Positions are `(i + 1) / (extent + 1e-6) * 2 pi` along each axis. The first
/// `channels / 2` channels encode the row, the rest the column; within each half,
/// channel `j` uses frequency `temperature^(2 floor(j / 2) / (channels / 2))` with
/// sine on even and cosine on odd `j`.
pub fn sine_pos_embedding(h: usize, w: usize, channels: usize, temperature: f64) -> Result<Tensor, CqError> {
    if channels == 0 || !channels.is_multiple_of(4) {
        return Err(CqError::Config(format!(
            "positional embedding width must be a positive multiple of 4, got {channels}"
        )));
    }
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(CqError::Config(format!("temperature must be positive, got {temperature}")));
    }
    const EPS: f64 = 1e-6;
    let two_pi = 2.0 * std::f64::consts::PI;
    let half = channels / 2;
    let freq: Vec<f64> = (0..half)
        .map(|j| temperature.powf((2 * (j / 2)) as f64 / half as f64))
        .collect();
    let encode = |p: f64, j: usize| {
        let t = p / freq[j];
        if j.is_multiple_of(2) {
            t.sin()
        } else {
            t.cos()
        }
    };
    let mut data = Vec::with_capacity(h * w * channels);
    for r in 0..h {
        let py = (r + 1) as f64 / (h as f64 + EPS) * two_pi;
        for c in 0..w {
            let px = (c + 1) as f64 / (w as f64 + EPS) * two_pi;
            data.extend((0..half).map(|j| encode(py, j)));
            data.extend((0..half).map(|j| encode(px, j)));
        }
    }
    Ok(Tensor::new(vec![h, w, channels], data)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn single_token_reduces_to_value_then_output_projection() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = AttentionParams::seeded(4, 2, &mut rng);
        let x = Tensor::random_unit(&[1, 4], &mut rng);
        let out = mhsa(&x, None, &p).unwrap();
        let expected = x
            .add(&p.output.forward(&p.value.forward(&x).unwrap()).unwrap())
            .unwrap();
        for (a, b) in out.data().iter().zip(expected.data()) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn two_token_identity_hand_computation() {
        let p = AttentionParams::identity(2, 1);
        let x = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let out = mhsa(&x, None, &p).unwrap();
        // scores [[1, 0], [0, 1]] / sqrt(2)
        let e = (1.0 / 2f64.sqrt()).exp();
        let a_self = e / (e + 1.0);
        let a_other = 1.0 / (e + 1.0);
        let expected = [1.0 + a_self, a_other, a_other, 1.0 + a_self];
        for (a, b) in out.data().iter().zip(expected) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn identical_tokens_give_identical_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = AttentionParams::seeded(4, 2, &mut rng);
        let row = Tensor::random_unit(&[1, 4], &mut rng);
        let x = Tensor::new(vec![3, 4], row.data().repeat(3)).unwrap();
        let out = mhsa(&x, None, &p).unwrap();
        assert_eq!(out.row(0), out.row(1));
        assert_eq!(out.row(0), out.row(2));
    }

    #[test]
    fn cross_attention_edge_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut p = AttentionParams::seeded(4, 2, &mut rng);
        let q = Tensor::random_unit(&[3, 4], &mut rng);
        let kv = Tensor::random_unit(&[1, 4], &mut rng);
        let out = cross_attention(&q, &kv, &p).unwrap();
        let msg = p.output.forward(&p.value.forward(&kv).unwrap()).unwrap();
        for r in 0..3 {
            for c in 0..4 {
                assert!((out.at2(r, c) - q.at2(r, c) - msg.at2(0, c)).abs() < 1e-14);
            }
        }
        assert!(matches!(
            cross_attention(&q, &Tensor::zeros(&[0, 4]), &p),
            Err(CqError::EmptyKeys)
        ));
        p.zero_value_path();
        let kv = Tensor::random_unit(&[5, 4], &mut rng);
        assert_eq!(cross_attention(&q, &kv, &p).unwrap(), q);
    }

    #[test]
    fn heads_must_divide_width() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let p = AttentionParams::seeded(6, 4, &mut rng);
        let x = Tensor::random_unit(&[2, 6], &mut rng);
        assert!(matches!(mhsa(&x, None, &p), Err(CqError::Config(_))));
        let p = AttentionParams::seeded(4, 2, &mut rng);
        assert!(matches!(mhsa(&x, None, &p), Err(CqError::Shape(_))));
    }

    #[test]
    fn sine_embedding_values() {
        let pe = sine_pos_embedding(3, 5, 8, DEFAULT_POS_TEMPERATURE).unwrap();
        assert_eq!(pe.shape(), &[3, 5, 8]);
        assert!(pe.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        let two_pi = 2.0 * std::f64::consts::PI;
        // pixel (0, 0): first row channel is sin(2 pi / (h + eps))
        assert_eq!(pe.data()[0], (1.0 / (3.0 + 1e-6) * two_pi).sin());
        // first column channel
        assert_eq!(pe.data()[4], (1.0 / (5.0 + 1e-6) * two_pi).sin());
        // channel 2 uses temperature^(2/4)
        let py = 1.0 / (3.0 + 1e-6) * two_pi;
        assert_eq!(pe.data()[2], (py / 100.0).sin());
        assert_eq!(pe.data()[3], (py / 100.0).cos());
        assert!(sine_pos_embedding(2, 2, 6, DEFAULT_POS_TEMPERATURE).is_err());
    }
}
