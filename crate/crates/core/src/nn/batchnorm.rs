//! Per-channel batch normalization over `(batch, C, H, W)` features.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::DenseTensor;

pub const BN_EPSILON: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    /// Normalize with batch statistics and update the running estimates.
    Train,
    /// Normalize with the running estimates.
    Eval,
}

/// Batch-norm parameters and running statistics for `C` channels.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm<T> {
    pub scale: DenseTensor<T>,
    pub shift: DenseTensor<T>,
    pub running_mean: DenseTensor<T>,
    pub running_var: DenseTensor<T>,
    pub epsilon: f64,
    pub momentum: f64,
}

/// Values saved by the forward pass for the backward pass.
#[derive(Debug, Clone)]
pub struct BnCache<T> {
    normalized: Vec<T>,
    inv_std: Vec<T>,
    shape: Vec<usize>,
    mode: BnMode,
}

#[derive(Debug, Clone)]
pub struct BnGrads<T> {
    pub dx: DenseTensor<T>,
    pub dscale: DenseTensor<T>,
    pub dshift: DenseTensor<T>,
}

impl<T: Scalar> BatchNorm<T> {
    pub fn new(channels: usize) -> Self {
        let ones = DenseTensor::filled(&[channels], T::one()).expect("channels >= 1");
        let zeros = DenseTensor::zeros(&[channels]).expect("channels >= 1");
        Self {
            scale: ones.clone(),
            shift: zeros.clone(),
            running_mean: zeros,
            running_var: ones,
            epsilon: BN_EPSILON,
            momentum: BN_MOMENTUM,
        }
    }

    pub fn channels(&self) -> usize {
        self.scale.len()
    }

    fn geometry(&self, x: &DenseTensor<T>) -> Result<(usize, usize, usize)> {
        let s = x.shape();
        if s.len() < 2 {
            return Err(Error::shape(format!("batch norm input must have a channel mode, got {s:?}")));
        }
        if s[1] != self.channels() {
            return Err(Error::shape(format!(
                "batch norm over {} channels applied to {} channels",
                self.channels(),
                s[1]
            )));
        }
        let spatial: usize = s[2..].iter().product();
        Ok((s[0], s[1], spatial))
    }

    /// Normalizes `x`; in train mode also updates the running statistics.
    ///
    /// Running variance is updated with the unbiased batch variance.
    pub fn forward(&mut self, x: &DenseTensor<T>, mode: BnMode) -> Result<(DenseTensor<T>, BnCache<T>)> {
        let (y, cache, stats) = self.normalize(x, mode)?;
        if let Some((means, unbiased)) = stats {
            let mom = T::from_f64_lossy(self.momentum);
            let keep = T::one() - mom;
            for (r, m) in self.running_mean.data_mut().iter_mut().zip(means) {
                *r = keep * *r + mom * m;
            }
            for (r, v) in self.running_var.data_mut().iter_mut().zip(unbiased) {
                *r = keep * *r + mom * v;
            }
        }
        Ok((y, cache))
    }

    /// Eval-mode forward pass using the running statistics.
    pub fn forward_eval(&self, x: &DenseTensor<T>) -> Result<DenseTensor<T>> {
        Ok(self.normalize(x, BnMode::Eval)?.0)
    }

    #[allow(clippy::type_complexity)]
    fn normalize(
        &self,
        x: &DenseTensor<T>,
        mode: BnMode,
    ) -> Result<(DenseTensor<T>, BnCache<T>, Option<(Vec<T>, Vec<T>)>)> {
        let (batch, ch, spatial) = self.geometry(x)?;
        let m = batch * spatial;
        if mode == BnMode::Train && m == 0 {
            return Err(Error::shape("batch norm in train mode needs a nonempty batch"));
        }
        let eps = T::from_f64_lossy(self.epsilon);
        let xs = x.data();
        let mut normalized = vec![T::zero(); xs.len()];
        let mut out = vec![T::zero(); xs.len()];
        let mut inv_std = vec![T::zero(); ch];
        let mut batch_means = Vec::new();
        let mut batch_vars = Vec::new();
        let channel = |n: usize, c: usize| (n * ch + c) * spatial;

        for c in 0..ch {
            let (mean, var) = match mode {
                BnMode::Train => {
                    let mut sum = T::zero();
                    for n in 0..batch {
                        sum = sum + xs[channel(n, c)..channel(n, c) + spatial].iter().copied().sum::<T>();
                    }
                    let mean = sum / T::from_usize(m).unwrap();
                    let mut sq = T::zero();
                    for n in 0..batch {
                        for &v in &xs[channel(n, c)..channel(n, c) + spatial] {
                            sq = sq + (v - mean) * (v - mean);
                        }
                    }
                    let var = sq / T::from_usize(m).unwrap();
                    batch_means.push(mean);
                    batch_vars.push(if m > 1 { sq / T::from_usize(m - 1).unwrap() } else { var });
                    (mean, var)
                }
                BnMode::Eval => (self.running_mean.data()[c], self.running_var.data()[c]),
            };
            let istd = T::one() / (var + eps).sqrt();
            inv_std[c] = istd;
            let (g, b) = (self.scale.data()[c], self.shift.data()[c]);
            for n in 0..batch {
                for i in channel(n, c)..channel(n, c) + spatial {
                    let h = (xs[i] - mean) * istd;
                    normalized[i] = h;
                    out[i] = g * h + b;
                }
            }
        }
        let y = DenseTensor::new(x.shape().to_vec(), out)?;
        let cache = BnCache {
            normalized,
            inv_std,
            shape: x.shape().to_vec(),
            mode,
        };
        let stats = (mode == BnMode::Train).then_some((batch_means, batch_vars));
        Ok((y, cache, stats))
    }

    pub fn backward(&self, cache: &BnCache<T>, dy: &DenseTensor<T>) -> Result<BnGrads<T>> {
        if dy.shape() != cache.shape.as_slice() {
            return Err(Error::shape(format!(
                "batch norm upstream {:?} vs forward {:?}",
                dy.shape(),
                cache.shape
            )));
        }
        let (batch, ch, spatial) = self.geometry(dy)?;
        let m = T::from_usize(batch * spatial).unwrap();
        let g = dy.data();
        let h = &cache.normalized;
        let mut dx = vec![T::zero(); g.len()];
        let mut dscale = vec![T::zero(); ch];
        let mut dshift = vec![T::zero(); ch];
        let channel = |n: usize, c: usize| (n * ch + c) * spatial;
        for c in 0..ch {
            let (mut sg, mut sgh) = (T::zero(), T::zero());
            for n in 0..batch {
                for i in channel(n, c)..channel(n, c) + spatial {
                    sg = sg + g[i];
                    sgh = sgh + g[i] * h[i];
                }
            }
            dshift[c] = sg;
            dscale[c] = sgh;
            let k = self.scale.data()[c] * cache.inv_std[c];
            for n in 0..batch {
                for i in channel(n, c)..channel(n, c) + spatial {
                    dx[i] = match cache.mode {
                        BnMode::Train => k * (g[i] - sg / m - h[i] * sgh / m),
                        BnMode::Eval => k * g[i],
                    };
                }
            }
        }
        Ok(BnGrads {
            dx: DenseTensor::new(cache.shape.clone(), dx)?,
            dscale: DenseTensor::new(vec![ch], dscale)?,
            dshift: DenseTensor::new(vec![ch], dshift)?,
        })
    }
}
