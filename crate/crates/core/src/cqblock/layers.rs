//! Linear and convolution layers with analytic backward passes.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{CqError, Parameters};
use crate::tensor::Tensor;

/// `y = x W + b` with `W: in x out`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    pub fn zeros(d_in: usize, d_out: usize) -> Self {
        Linear {
            weight: Tensor::zeros(&[d_in, d_out]),
            bias: Tensor::zeros(&[d_out]),
        }
    }

    pub fn identity(dim: usize) -> Self {
        let mut weight = Tensor::zeros(&[dim, dim]);
        for i in 0..dim {
            weight.data_mut()[i * dim + i] = 1.0;
        }
        Linear {
            weight,
            bias: Tensor::zeros(&[dim]),
        }
    }

    /// Weights with variance `1 / d_in`, biases in `[-0.5, 0.5]`.
    pub fn seeded<R: Rng>(d_in: usize, d_out: usize, rng: &mut R) -> Self {
        Linear {
            weight: Tensor::random_uniform(&[d_in, d_out], (3.0 / d_in as f64).sqrt(), rng),
            bias: Tensor::random_uniform(&[d_out], 0.5, rng),
        }
    }

    pub fn d_in(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn d_out(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor, CqError> {
        Ok(x.matmul(&self.weight)?.add_row_vector(&self.bias)?)
    }

    /// Returns `(grad wrt params, grad wrt input)`.
    pub fn backward(&self, x: &Tensor, d_y: &Tensor) -> Result<(Linear, Tensor), CqError> {
        let grads = Linear {
            weight: x.transpose()?.matmul(d_y)?,
            bias: d_y.sum_rows()?,
        };
        let d_x = d_y.matmul(&self.weight.transpose()?)?;
        Ok((grads, d_x))
    }
}

impl Parameters for Linear {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        f(format!("{prefix}.weight"), &self.weight);
        f(format!("{prefix}.bias"), &self.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        f(format!("{prefix}.weight"), &mut self.weight);
        f(format!("{prefix}.bias"), &mut self.bias);
    }
}

/// Square, odd-sized 2D convolution over `h x w x c_in` feature maps with zero
/// padding that keeps the spatial size. Weights are laid out `k x k x c_in x c_out`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Conv2d {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Conv2d {
    pub fn zeros(k: usize, c_in: usize, c_out: usize) -> Self {
        Conv2d {
            weight: Tensor::zeros(&[k, k, c_in, c_out]),
            bias: Tensor::zeros(&[c_out]),
        }
    }

    pub fn seeded<R: Rng>(k: usize, c_in: usize, c_out: usize, rng: &mut R) -> Self {
        let fan_in = (k * k * c_in) as f64;
        Conv2d {
            weight: Tensor::random_uniform(&[k, k, c_in, c_out], (3.0 / fan_in).sqrt(), rng),
            bias: Tensor::random_uniform(&[c_out], 0.5, rng),
        }
    }

    pub fn kernel(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn c_in(&self) -> usize {
        self.weight.shape()[2]
    }

    pub fn c_out(&self) -> usize {
        self.weight.shape()[3]
    }

    fn input_dims(&self, x: &Tensor) -> Result<(usize, usize), CqError> {
        match x.shape() {
            [h, w, c] if *c == self.c_in() => Ok((*h, *w)),
            s => Err(CqError::Shape(format!(
                "conv expects h x w x {} input, got {s:?}",
                self.c_in()
            ))),
        }
    }

    /// Calls `f(out_pixel, in_pixel, tap)` for every valid kernel tap.
    fn for_each_tap(&self, h: usize, w: usize, mut f: impl FnMut(usize, usize, usize)) {
        let k = self.kernel();
        let pad = (k / 2) as isize;
        for y in 0..h {
            for x in 0..w {
                for ky in 0..k {
                    let iy = y as isize + ky as isize - pad;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let ix = x as isize + kx as isize - pad;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        f(y * w + x, iy as usize * w + ix as usize, ky * k + kx);
                    }
                }
            }
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor, CqError> {
        let (h, w) = self.input_dims(x)?;
        let (ci, co) = (self.c_in(), self.c_out());
        let mut out = vec![0.0; h * w * co];
        for px in out.chunks_mut(co) {
            px.copy_from_slice(self.bias.data());
        }
        let (wt, xd) = (self.weight.data(), x.data());
        self.for_each_tap(h, w, |o, i, tap| {
            let xin = &xd[i * ci..(i + 1) * ci];
            let dst = &mut out[o * co..(o + 1) * co];
            for (c, &xv) in xin.iter().enumerate() {
                let wrow = &wt[(tap * ci + c) * co..(tap * ci + c + 1) * co];
                for (d, wv) in dst.iter_mut().zip(wrow) {
                    *d += xv * wv;
                }
            }
        });
        Ok(Tensor::new(vec![h, w, co], out)?)
    }

    pub fn backward(&self, x: &Tensor, d_y: &Tensor) -> Result<(Conv2d, Tensor), CqError> {
        let (h, w) = self.input_dims(x)?;
        let (ci, co) = (self.c_in(), self.c_out());
        if d_y.shape() != [h, w, co] {
            return Err(CqError::Shape(format!(
                "conv upstream gradient {:?}, expected {:?}",
                d_y.shape(),
                [h, w, co]
            )));
        }
        let mut d_w = vec![0.0; self.weight.len()];
        let mut d_x = vec![0.0; x.len()];
        let mut d_b = vec![0.0; co];
        for g in d_y.data().chunks(co) {
            for (b, v) in d_b.iter_mut().zip(g) {
                *b += v;
            }
        }
        let (wt, xd, gd) = (self.weight.data(), x.data(), d_y.data());
        self.for_each_tap(h, w, |o, i, tap| {
            let g = &gd[o * co..(o + 1) * co];
            for c in 0..ci {
                let base = (tap * ci + c) * co;
                let xv = xd[i * ci + c];
                let mut acc = 0.0;
                for (j, &gv) in g.iter().enumerate() {
                    d_w[base + j] += xv * gv;
                    acc += wt[base + j] * gv;
                }
                d_x[i * ci + c] += acc;
            }
        });
        Ok((
            Conv2d {
                weight: Tensor::new(self.weight.shape().to_vec(), d_w)?,
                bias: Tensor::new(vec![co], d_b)?,
            },
            Tensor::new(x.shape().to_vec(), d_x)?,
        ))
    }
}

impl Parameters for Conv2d {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        f(format!("{prefix}.weight"), &self.weight);
        f(format!("{prefix}.bias"), &self.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        f(format!("{prefix}.weight"), &mut self.weight);
        f(format!("{prefix}.bias"), &mut self.bias);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn linear_sum_of_outputs_gradient_is_column_sums_of_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let layer = Linear::seeded(3, 2, &mut rng);
        let x = Tensor::random_unit(&[4, 3], &mut rng);
        let (g, d_x) = layer.backward(&x, &Tensor::filled(&[4, 2], 1.0)).unwrap();
        let col_sums = x.sum_rows().unwrap();
        for i in 0..3 {
            for j in 0..2 {
                assert!((g.weight.at2(i, j) - col_sums.data()[i]).abs() < 1e-14);
            }
        }
        assert_eq!(g.bias.data(), &[4.0, 4.0]);
        // d_x rows are the weight row sums
        for r in 0..4 {
            for i in 0..3 {
                let s = layer.weight.row(i).iter().sum::<f64>();
                assert!((d_x.at2(r, i) - s).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn conv_matches_direct_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let conv = Conv2d::seeded(3, 2, 3, &mut rng);
        let x = Tensor::random_unit(&[4, 5, 2], &mut rng);
        let y = conv.forward(&x).unwrap();
        assert_eq!(y.shape(), &[4, 5, 3]);
        let at = |t: &Tensor, r: isize, c: isize, ch: usize| -> f64 {
            if r < 0 || c < 0 || r >= 4 || c >= 5 {
                0.0
            } else {
                t.data()[(r as usize * 5 + c as usize) * 2 + ch]
            }
        };
        for r in 0..4isize {
            for c in 0..5isize {
                for o in 0..3 {
                    let mut s = conv.bias.data()[o];
                    for ky in 0..3 {
                        for kx in 0..3 {
                            for i in 0..2 {
                                let w = conv.weight.data()[((ky * 3 + kx) * 2 + i) * 3 + o];
                                s += w * at(&x, r + ky as isize - 1, c + kx as isize - 1, i);
                            }
                        }
                    }
                    let got = y.data()[(r as usize * 5 + c as usize) * 3 + o];
                    assert!((got - s).abs() < 1e-13);
                }
            }
        }
    }

    #[test]
    fn conv_rejects_wrong_channels() {
        let conv = Conv2d::zeros(1, 3, 1);
        assert!(conv.forward(&Tensor::zeros(&[2, 2, 2])).is_err());
    }
}
