use crate::error::{Error, Result};
use crate::tensor::{Matrix, Real};

/// Final linear classifier `logits = W h + b`.
///
/// `weight` is stored `K x m`: row `k` is the class weight vector `w^k`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearHead<T = f32> {
    pub weight: Matrix<T>,
    pub bias: Vec<T>,
}

impl<T: Real> LinearHead<T> {
    pub fn new(weight: Matrix<T>, bias: Vec<T>) -> Result<Self> {
        if bias.len() != weight.rows() {
            return Err(Error::shape(format!(
                "head bias has {} entries for {} classes",
                bias.len(),
                weight.rows()
            )));
        }
        Ok(Self { weight, bias })
    }

    pub fn num_classes(&self) -> usize {
        self.weight.rows()
    }

    pub fn feature_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn forward(&self, features: &Matrix<T>) -> Result<Matrix<T>> {
        if features.cols() != self.feature_dim() {
            return Err(Error::shape(format!(
                "head expects {} features, got {}",
                self.feature_dim(),
                features.cols()
            )));
        }
        let k = self.num_classes();
        let mut out = Matrix::zeros(features.rows(), k);
        for b in 0..features.rows() {
            let h = features.row(b);
            for (c, o) in out.row_mut(b).iter_mut().enumerate() {
                let w = self.weight.row(c);
                *o = self.bias[c] + w.iter().zip(h).map(|(&a, &x)| a * x).sum::<T>();
            }
        }
        Ok(out)
    }
}
