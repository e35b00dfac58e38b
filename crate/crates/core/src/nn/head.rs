//! ReLU, global average pooling, the fully-connected layer and the softmax
//! cross-entropy loss.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::DenseTensor;

pub fn relu<T: Scalar>(x: &DenseTensor<T>) -> DenseTensor<T> {
    x.map(|v| v.max(T::zero()))
}

/// Passes `dy` where the forward input was positive.
pub fn relu_backward<T: Scalar>(x: &DenseTensor<T>, dy: &DenseTensor<T>) -> Result<DenseTensor<T>> {
    if x.shape() != dy.shape() {
        return Err(Error::shape(format!("relu: {:?} vs {:?}", x.shape(), dy.shape())));
    }
    DenseTensor::new(
        x.shape().to_vec(),
        x.data()
            .iter()
            .zip(dy.data())
            .map(|(&v, &g)| if v > T::zero() { g } else { T::zero() })
            .collect(),
    )
}

/// `(B, C, H, W) -> (B, C)` spatial mean.
pub fn global_average_pool<T: Scalar>(x: &DenseTensor<T>) -> Result<DenseTensor<T>> {
    let s = x.shape();
    if s.len() != 4 {
        return Err(Error::shape(format!("global pooling expects 4 modes, got {s:?}")));
    }
    let spatial = s[2] * s[3];
    let denom = T::from_usize(spatial).unwrap();
    DenseTensor::new(
        vec![s[0], s[1]],
        x.data()
            .chunks_exact(spatial)
            .map(|plane| plane.iter().copied().sum::<T>() / denom)
            .collect(),
    )
}

pub fn global_average_pool_backward<T: Scalar>(input_shape: &[usize], dy: &DenseTensor<T>) -> Result<DenseTensor<T>> {
    if input_shape.len() != 4 || dy.shape() != &input_shape[..2] {
        return Err(Error::shape(format!(
            "pooling gradient {:?} does not match input {input_shape:?}",
            dy.shape()
        )));
    }
    let spatial = input_shape[2] * input_shape[3];
    let denom = T::from_usize(spatial).unwrap();
    let mut out = Vec::with_capacity(dy.len() * spatial);
    for &g in dy.data() {
        out.extend(std::iter::repeat_n(g / denom, spatial));
    }
    DenseTensor::new(input_shape.to_vec(), out)
}

/// Affine map `y = x · W + b` with `W` shaped `(in, out)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear<T> {
    pub weight: DenseTensor<T>,
    pub bias: DenseTensor<T>,
}

#[derive(Debug, Clone)]
pub struct LinearGrads<T> {
    pub dx: DenseTensor<T>,
    pub dweight: DenseTensor<T>,
    pub dbias: DenseTensor<T>,
}

impl<T: Scalar> Linear<T> {
    pub fn new(weight: DenseTensor<T>, bias: DenseTensor<T>) -> Result<Self> {
        if weight.order() != 2 || bias.shape() != [weight.shape()[1]] {
            return Err(Error::shape(format!(
                "linear weight {:?} with bias {:?}",
                weight.shape(),
                bias.shape()
            )));
        }
        Ok(Self { weight, bias })
    }

    pub fn in_features(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn out_features(&self) -> usize {
        self.weight.shape()[1]
    }

    fn check_input(&self, x: &DenseTensor<T>) -> Result<()> {
        if x.order() != 2 || x.shape()[1] != self.in_features() {
            return Err(Error::shape(format!(
                "linear layer expects (batch, {}), got {:?}",
                self.in_features(),
                x.shape()
            )));
        }
        Ok(())
    }

    pub fn forward(&self, x: &DenseTensor<T>) -> Result<DenseTensor<T>> {
        self.check_input(x)?;
        let (b, i, o) = (x.shape()[0], self.in_features(), self.out_features());
        let mut y: Vec<T> = (0..b).flat_map(|_| self.bias.data().iter().copied()).collect();
        T::gemm(b, i, o, T::one(), x.data(), (i as isize, 1), self.weight.data(), (o as isize, 1), T::one(), &mut y, (o as isize, 1));
        DenseTensor::new(vec![b, o], y)
    }

    pub fn backward(&self, x: &DenseTensor<T>, dy: &DenseTensor<T>) -> Result<LinearGrads<T>> {
        self.check_input(x)?;
        let (b, i, o) = (x.shape()[0], self.in_features(), self.out_features());
        if dy.shape() != [b, o] {
            return Err(Error::shape(format!("linear upstream {:?}, expected [{b}, {o}]", dy.shape())));
        }
        let mut dx = vec![T::zero(); b * i];
        // dx = dy · Wᵀ
        T::gemm(b, o, i, T::one(), dy.data(), (o as isize, 1), self.weight.data(), (1, o as isize), T::zero(), &mut dx, (i as isize, 1));
        let mut dw = vec![T::zero(); i * o];
        // dW = xᵀ · dy
        T::gemm(i, b, o, T::one(), x.data(), (1, i as isize), dy.data(), (o as isize, 1), T::zero(), &mut dw, (o as isize, 1));
        let mut db = vec![T::zero(); o];
        for row in dy.data().chunks_exact(o) {
            for (a, &g) in db.iter_mut().zip(row) {
                *a = *a + g;
            }
        }
        Ok(LinearGrads {
            dx: DenseTensor::new(vec![b, i], dx)?,
            dweight: DenseTensor::new(vec![i, o], dw)?,
            dbias: DenseTensor::new(vec![o], db)?,
        })
    }
}

/// Mean softmax cross-entropy over the batch and its gradient w.r.t. the
/// logits.
pub fn softmax_cross_entropy<T: Scalar>(logits: &DenseTensor<T>, labels: &[usize]) -> Result<(T, DenseTensor<T>)> {
    if logits.order() != 2 || logits.shape()[0] != labels.len() {
        return Err(Error::shape(format!(
            "logits {:?} for {} labels",
            logits.shape(),
            labels.len()
        )));
    }
    let k = logits.shape()[1];
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::Data(format!("label {bad} outside [0, {k})")));
    }
    let b = T::from_usize(labels.len()).unwrap();
    let mut loss = T::zero();
    let mut grad = Vec::with_capacity(logits.len());
    for (row, &label) in logits.data().chunks_exact(k).zip(labels) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let sum: T = row.iter().map(|&z| (z - max).exp()).sum();
        let log_z = max + sum.ln();
        loss = loss + (log_z - row[label]);
        for (c, &z) in row.iter().enumerate() {
            let p = (z - log_z).exp();
            let target = if c == label { T::one() } else { T::zero() };
            grad.push((p - target) / b);
        }
    }
    Ok((loss / b, DenseTensor::new(logits.shape().to_vec(), grad)?))
}

/// Index of the largest logit per row.
pub fn argmax_rows<T: Scalar>(logits: &DenseTensor<T>) -> Vec<usize> {
    let k = logits.shape()[logits.order() - 1];
    logits
        .data()
        .chunks_exact(k)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, T::neg_infinity()), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
                .0
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relu_values() {
        let x = DenseTensor::from_slice(&[2], &[-1.0f64, 2.0]).unwrap();
        assert_eq!(relu(&x).data(), &[0.0, 2.0]);
    }

    #[test]
    fn pooling_constant_map() {
        let x = DenseTensor::filled(&[2, 3, 4, 4], 1.5f64).unwrap();
        let y = global_average_pool(&x).unwrap();
        assert_eq!(y.shape(), &[2, 3]);
        assert!(y.data().iter().all(|&v| v == 1.5));
    }

    #[test]
    #[allow(clippy::approx_constant)]
    fn uniform_logits_loss_is_ln_10() {
        let logits = DenseTensor::filled(&[3, 10], 0.25f64).unwrap();
        let (loss, grad) = softmax_cross_entropy(&logits, &[0, 4, 9]).unwrap();
        assert!((loss - 10f64.ln()).abs() < 1e-12);
        assert!((loss - 2.302585).abs() < 1e-6);
        // rows of the gradient sum to zero
        for row in grad.data().chunks_exact(10) {
            assert!(row.iter().sum::<f64>().abs() < 1e-15);
        }
    }

    #[test]
    fn out_of_range_label_rejected() {
        let logits = DenseTensor::filled(&[1, 10], 0.0f64).unwrap();
        assert!(softmax_cross_entropy(&logits, &[10]).is_err());
    }

    #[test]
    fn argmax_picks_first_maximum() {
        let l = DenseTensor::from_slice(&[2, 3], &[0.0f64, 2.0, 2.0, 5.0, -1.0, 0.0]).unwrap();
        assert_eq!(argmax_rows(&l), vec![1, 0]);
    }
}
