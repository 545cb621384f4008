//! Mean-pool + two-layer MLP sequence encoder with hand-written gradients.

use rand::Rng;

use crate::catalog::ProjectionHead;
use crate::error::{Error, Result};
use crate::scalar::Real;

/// `o = W2 · tanh(W1 · x + b1) + b2`.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderMlp<T> {
    pub layer1: ProjectionHead<T>,
    pub layer2: ProjectionHead<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderCache {
    pub input: Vec<f64>,
    /// Post-activation hidden units.
    pub hidden: Vec<f64>,
}

/// Dense gradients, laid out like the parameters (row-major weights).
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderGrad {
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
}

impl EncoderGrad {
    pub fn zeros<T: Real>(enc: &EncoderMlp<T>) -> Self {
        Self {
            w1: vec![0.0; enc.layer1.weight.as_slice().len()],
            b1: vec![0.0; enc.layer1.bias.len()],
            w2: vec![0.0; enc.layer2.weight.as_slice().len()],
            b2: vec![0.0; enc.layer2.bias.len()],
        }
    }

    pub fn add(&mut self, other: &EncoderGrad) {
        for (a, b) in [
            (&mut self.w1, &other.w1),
            (&mut self.b1, &other.b1),
            (&mut self.w2, &other.w2),
            (&mut self.b2, &other.b2),
        ] {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
    }
}

fn affine<T: Real>(layer: &ProjectionHead<T>, x: &[f64]) -> Vec<f64> {
    layer
        .weight
        .iter_rows()
        .zip(&layer.bias)
        .map(|(w, b)| crate::scalar::dot_f64(w, x) + b.to_f64_lossless())
        .collect()
}

impl<T: Real> EncoderMlp<T> {
    pub fn new(layer1: ProjectionHead<T>, layer2: ProjectionHead<T>) -> Result<Self> {
        if layer1.output_dim() != layer2.input_dim() || layer1.input_dim() != layer2.output_dim() {
            return Err(Error::DimMismatch {
                expected: layer1.output_dim(),
                actual: layer2.input_dim(),
                context: "encoder layer dims",
            });
        }
        Ok(Self { layer1, layer2 })
    }

    pub fn random<R: Rng>(dim: usize, hidden: usize, rng: &mut R) -> Self {
        Self {
            layer1: ProjectionHead::random(dim, hidden, rng),
            layer2: ProjectionHead::random(hidden, dim, rng),
        }
    }

    pub fn dim(&self) -> usize {
        self.layer1.input_dim()
    }

    pub fn hidden(&self) -> usize {
        self.layer1.output_dim()
    }

    pub fn parameter_count(&self) -> usize {
        self.layer1.parameter_count() + self.layer2.parameter_count()
    }

    pub fn all_finite(&self) -> bool {
        [&self.layer1, &self.layer2]
            .iter()
            .all(|l| l.weight.all_finite() && l.bias.iter().all(|b| b.is_finite()))
    }

    pub fn forward(&self, input: &[f64]) -> (Vec<f64>, EncoderCache) {
        let hidden: Vec<f64> = affine(&self.layer1, input).into_iter().map(f64::tanh).collect();
        let out = affine(&self.layer2, &hidden);
        (
            out,
            EncoderCache {
                input: input.to_vec(),
                hidden,
            },
        )
    }

    /// Accumulates parameter gradients into `grad`; returns the gradient on the input.
    pub fn backward(&self, cache: &EncoderCache, d_out: &[f64], grad: &mut EncoderGrad) -> Vec<f64> {
        let h = self.hidden();
        let d = self.dim();
        for (i, g) in d_out.iter().enumerate() {
            grad.b2[i] += g;
            for (j, hv) in cache.hidden.iter().enumerate() {
                grad.w2[i * h + j] += g * hv;
            }
        }
        let d_hidden = self.layer2.backward_input(d_out);
        let d_pre: Vec<f64> = d_hidden
            .iter()
            .zip(&cache.hidden)
            .map(|(g, a)| g * (1.0 - a * a))
            .collect();
        for (j, g) in d_pre.iter().enumerate() {
            grad.b1[j] += g;
            for (i, x) in cache.input.iter().enumerate() {
                grad.w1[j * d + i] += g * x;
            }
        }
        self.layer1.backward_input(&d_pre)
    }

    /// Applies `p <- p - lr * g` for every parameter.
    pub fn apply_grad(&mut self, grad: &EncoderGrad, lr: f64) {
        fn step<T: Real>(params: &mut [T], g: &[f64], lr: f64) {
            for (p, g) in params.iter_mut().zip(g) {
                *p = T::from_f64_lossy(p.to_f64_lossless() - lr * g);
            }
        }
        step(self.layer1.weight.as_mut_slice(), &grad.w1, lr);
        step(&mut self.layer1.bias, &grad.b1, lr);
        step(self.layer2.weight.as_mut_slice(), &grad.w2, lr);
        step(&mut self.layer2.bias, &grad.b2, lr);
    }

    /// Multiplies every weight matrix entry by `factor` (biases untouched).
    pub fn scale_weights(&mut self, factor: f64) {
        for t in [&mut self.layer1.weight, &mut self.layer2.weight] {
            for p in t.as_mut_slice() {
                *p = T::from_f64_lossy(p.to_f64_lossless() * factor);
            }
        }
    }

    pub fn cast<U: Real>(&self) -> EncoderMlp<U> {
        let cast = |l: &ProjectionHead<T>| ProjectionHead {
            weight: l.weight.cast(),
            bias: l.bias.iter().map(|b| U::from_f64_lossy(b.to_f64_lossless())).collect(),
        };
        EncoderMlp {
            layer1: cast(&self.layer1),
            layer2: cast(&self.layer2),
        }
    }
}

/// Mean of the given rows in f64.
pub fn mean_pool<'a, T: Real + 'a>(rows: impl IntoIterator<Item = &'a [T]>, dim: usize) -> Result<Vec<f64>> {
    let mut acc = vec![0.0; dim];
    let mut n = 0usize;
    for r in rows {
        for (a, v) in acc.iter_mut().zip(r) {
            *a += v.to_f64_lossless();
        }
        n += 1;
    }
    if n == 0 {
        return Err(Error::InvalidArgument("cannot encode an empty token sequence".into()));
    }
    acc.iter_mut().for_each(|a| *a /= n as f64);
    Ok(acc)
}
