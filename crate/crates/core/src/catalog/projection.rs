use rand::Rng;

use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::table::EmbeddingTable;

/// Affine map from the item embedding dimension `k` to the model dimension `d`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionHead<T> {
    /// `d × k`, row-major.
    pub weight: EmbeddingTable<T>,
    pub bias: Vec<T>,
}

impl<T: Real> ProjectionHead<T> {
    pub fn new(weight: EmbeddingTable<T>, bias: Vec<T>) -> Result<Self> {
        if bias.len() != weight.rows() {
            return Err(Error::DimMismatch {
                expected: weight.rows(),
                actual: bias.len(),
                context: "projection bias",
            });
        }
        Ok(Self { weight, bias })
    }

    pub fn identity(dim: usize) -> Self {
        let mut weight = EmbeddingTable::zeros(dim, dim);
        for i in 0..dim {
            weight.row_mut(i)[i] = T::one();
        }
        Self {
            weight,
            bias: vec![T::zero(); dim],
        }
    }

    /// Glorot-uniform weights, zero bias.
    pub fn random<R: Rng>(input_dim: usize, output_dim: usize, rng: &mut R) -> Self {
        let scale = (6.0 / (input_dim + output_dim) as f64).sqrt();
        Self {
            weight: EmbeddingTable::uniform(output_dim, input_dim, scale, rng),
            bias: vec![T::zero(); output_dim],
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.dim()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn parameter_count(&self) -> usize {
        self.weight.rows() * self.weight.dim() + self.bias.len()
    }

    /// `W x + b`, accumulated in f64.
    pub fn apply_f64(&self, x: &[T]) -> Vec<f64> {
        self.weight
            .iter_rows()
            .zip(&self.bias)
            .map(|(w, b)| crate::scalar::dot(w, x) + b.to_f64_lossless())
            .collect()
    }

    pub fn apply(&self, x: &[T]) -> Result<Vec<T>> {
        if x.len() != self.input_dim() {
            return Err(Error::DimMismatch {
                expected: self.input_dim(),
                actual: x.len(),
                context: "projection input",
            });
        }
        Ok(self.apply_f64(x).into_iter().map(T::from_f64_lossy).collect())
    }

    /// `Wᵀ g` for a gradient `g` on the output.
    pub fn backward_input(&self, grad_out: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.input_dim()];
        for (w, g) in self.weight.iter_rows().zip(grad_out) {
            for (o, wv) in out.iter_mut().zip(w) {
                *o += g * wv.to_f64_lossless();
            }
        }
        out
    }
}

/// Projects every raw item row through `head`.
pub fn project_items<T: Real>(raw: &EmbeddingTable<T>, head: &ProjectionHead<T>) -> Result<EmbeddingTable<T>> {
    if raw.dim() != head.input_dim() {
        return Err(Error::DimMismatch {
            expected: head.input_dim(),
            actual: raw.dim(),
            context: "item table vs projection input",
        });
    }
    let mut out = EmbeddingTable::zeros(raw.rows(), head.output_dim());
    for (i, x) in raw.iter_rows().enumerate() {
        for (o, v) in out.row_mut(i).iter_mut().zip(head.apply_f64(x)) {
            *o = T::from_f64_lossy(v);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identity_head_is_a_no_op() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let raw = EmbeddingTable::<f32>::uniform(6, 4, 1.0, &mut rng);
        let out = project_items(&raw, &ProjectionHead::identity(4)).unwrap();
        assert_eq!(out, raw);
    }

    #[test]
    fn zero_weights_yield_bias() {
        let head = ProjectionHead::new(EmbeddingTable::<f64>::zeros(3, 5), vec![1.0, -2.0, 0.5]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let raw = EmbeddingTable::uniform(4, 5, 1.0, &mut rng);
        let out = project_items(&raw, &head).unwrap();
        for r in out.iter_rows() {
            assert_eq!(r, &[1.0, -2.0, 0.5]);
        }
    }

    #[test]
    fn matches_independent_matvec() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let raw = EmbeddingTable::<f32>::uniform(10, 7, 1.0, &mut rng);
        let mut head = ProjectionHead::<f32>::random(7, 3, &mut rng);
        head.bias = vec![0.25, -0.5, 0.125];
        let out = project_items(&raw, &head).unwrap();
        let x = raw.row(7);
        for j in 0..3 {
            let mut acc = head.bias[j] as f64;
            for c in 0..7 {
                acc += head.weight.as_slice()[j * 7 + c] as f64 * x[c] as f64;
            }
            assert!((out.row(7)[j] as f64 - acc).abs() <= 1e-6 * acc.abs().max(1.0));
        }
    }

    #[test]
    fn dim_mismatch_is_rejected() {
        let raw = EmbeddingTable::<f32>::zeros(2, 3);
        assert!(project_items(&raw, &ProjectionHead::identity(4)).is_err());
        assert!(ProjectionHead::<f32>::identity(4).apply(&[0.0; 3]).is_err());
    }

    #[test]
    fn linear_head_is_linear() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let head = ProjectionHead::<f64>::random(5, 4, &mut rng);
        let x: Vec<f64> = (0..5).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let y: Vec<f64> = (0..5).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let (a, b) = (0.7, -1.3);
        let mix: Vec<f64> = x.iter().zip(&y).map(|(p, q)| a * p + b * q).collect();
        let lhs = head.apply_f64(&mix);
        let hx = head.apply_f64(&x);
        let hy = head.apply_f64(&y);
        for j in 0..4 {
            let rhs = a * hx[j] + b * hy[j];
            assert!((lhs[j] - rhs).abs() <= 1e-6 * rhs.abs().max(1e-12) + 1e-15);
        }
    }
}
