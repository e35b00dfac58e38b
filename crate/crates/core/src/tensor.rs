//! Dense N-dimensional tensors in row-major layout and the contraction
//! primitive everything else is built on.

use crate::error::{Error, Result};
use crate::scalar::{Precision, Scalar};

/// An N-dimensional real array with an explicit shape.
///
/// Storage is row-major: the last mode varies fastest. The data length always
/// equals the product of the shape.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseTensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

fn validate_shape(shape: &[usize]) -> Result<usize> {
    if shape.is_empty() || shape.contains(&0) {
        return Err(Error::InvalidShape(shape.to_vec()));
    }
    Ok(shape.iter().product())
}

/// Row-major strides for `shape`.
pub fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1; shape.len()];
    for k in (0..shape.len().saturating_sub(1)).rev() {
        strides[k] = strides[k + 1] * shape[k + 1];
    }
    strides
}

fn check_mode_permutation(perm: &[usize], order: usize) -> Result<()> {
    let mut seen = vec![false; order];
    let ok = perm.len() == order
        && perm.iter().all(|&p| {
            if p >= order || seen[p] {
                false
            } else {
                seen[p] = true;
                true
            }
        });
    if ok {
        Ok(())
    } else {
        Err(Error::InvalidModePermutation {
            perm: perm.to_vec(),
            order,
        })
    }
}

/// Inverse of a mode permutation.
pub fn invert_modes(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (k, &p) in perm.iter().enumerate() {
        inv[p] = k;
    }
    inv
}

impl<T: Scalar> DenseTensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let expected = validate_shape(&shape)?;
        if data.len() != expected {
            return Err(Error::LengthMismatch {
                shape,
                expected,
                actual: data.len(),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn from_slice(shape: &[usize], data: &[T]) -> Result<Self> {
        Self::new(shape.to_vec(), data.to_vec())
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        Self::filled(shape, T::zero())
    }

    pub fn filled(shape: &[usize], value: T) -> Result<Self> {
        let n = validate_shape(shape)?;
        Ok(Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        })
    }

    /// Builds a tensor by evaluating `f` at every flat index.
    pub fn from_fn(shape: &[usize], f: impl FnMut(usize) -> T) -> Result<Self> {
        let n = validate_shape(shape)?;
        Ok(Self {
            shape: shape.to_vec(),
            data: (0..n).map(f).collect(),
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn order(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn precision(&self) -> Precision {
        T::PRECISION
    }

    pub fn strides(&self) -> Vec<usize> {
        strides_of(&self.shape)
    }

    pub fn flat_index(&self, index: &[usize]) -> usize {
        debug_assert_eq!(index.len(), self.order());
        index
            .iter()
            .zip(&self.shape)
            .fold(0, |acc, (&i, &d)| {
                debug_assert!(i < d);
                acc * d + i
            })
    }

    pub fn get(&self, index: &[usize]) -> T {
        self.data[self.flat_index(index)]
    }

    /// Same data under a new shape with the same element count.
    pub fn reshape(self, shape: &[usize]) -> Result<Self> {
        let expected = validate_shape(shape)?;
        if expected != self.data.len() {
            return Err(Error::LengthMismatch {
                shape: shape.to_vec(),
                expected,
                actual: self.data.len(),
            });
        }
        Ok(Self {
            shape: shape.to_vec(),
            data: self.data,
        })
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn scale(&self, alpha: T) -> Self {
        self.map(|x| x * alpha)
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, &x| m.max(x.abs()))
    }

    /// Reorders modes so that output mode `k` is input mode `perm[k]`.
    pub fn permute_modes(&self, perm: &[usize]) -> Result<Self> {
        check_mode_permutation(perm, self.order())?;
        if perm.iter().enumerate().all(|(k, &p)| k == p) {
            return Ok(self.clone());
        }
        let in_strides = self.strides();
        let shape: Vec<usize> = perm.iter().map(|&p| self.shape[p]).collect();
        let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
        let mut data = Vec::with_capacity(self.data.len());
        let mut index = vec![0usize; shape.len()];
        let mut offset = 0usize;
        let last = shape.len() - 1;
        loop {
            // innermost mode as a strided run
            let s = src_strides[last];
            for i in 0..shape[last] {
                data.push(self.data[offset + i * s]);
            }
            // odometer over the outer modes
            let mut k = last;
            loop {
                if k == 0 {
                    return Ok(Self { shape, data });
                }
                k -= 1;
                index[k] += 1;
                offset += src_strides[k];
                if index[k] < shape[k] {
                    break;
                }
                offset -= src_strides[k] * shape[k];
                index[k] = 0;
            }
        }
    }

    /// Contracts `modes_a` of `self` with `modes_b` of `other`.
    ///
    /// The result carries the free modes of `self` (in order) followed by the
    /// free modes of `other`. A full contraction yields shape `[1]`.
    pub fn contract(&self, other: &Self, modes_a: &[usize], modes_b: &[usize]) -> Result<Self> {
        if modes_a.len() != modes_b.len() {
            return Err(Error::InvalidModes(format!(
                "{} modes of a paired with {} modes of b",
                modes_a.len(),
                modes_b.len()
            )));
        }
        let free_a = free_modes(self.order(), modes_a, "a")?;
        let free_b = free_modes(other.order(), modes_b, "b")?;
        for (&ma, &mb) in modes_a.iter().zip(modes_b) {
            if self.shape[ma] != other.shape[mb] {
                return Err(Error::ContractionMismatch {
                    mode_a: ma,
                    mode_b: mb,
                    dim_a: self.shape[ma],
                    dim_b: other.shape[mb],
                });
            }
        }

        let perm_a: Vec<usize> = free_a.iter().chain(modes_a).copied().collect();
        let perm_b: Vec<usize> = modes_b.iter().chain(&free_b).copied().collect();
        let a = self.permute_modes(&perm_a)?;
        let b = other.permute_modes(&perm_b)?;

        let m: usize = free_a.iter().map(|&k| self.shape[k]).product();
        let k: usize = modes_a.iter().map(|&k| self.shape[k]).product();
        let n: usize = free_b.iter().map(|&k| other.shape[k]).product();

        let mut out_shape: Vec<usize> = free_a.iter().map(|&k| self.shape[k]).collect();
        out_shape.extend(free_b.iter().map(|&k| other.shape[k]));
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        let mut data = vec![T::zero(); m * n];
        T::gemm(
            m,
            k,
            n,
            T::one(),
            &a.data,
            (k as isize, 1),
            &b.data,
            (n as isize, 1),
            T::zero(),
            &mut data,
            (n as isize, 1),
        );
        Self::new(out_shape, data)
    }

    /// Elementwise `self + alpha * other`.
    pub fn add_scaled(&self, other: &Self, alpha: T) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::shape(format!(
                "add: {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        Ok(Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&x, &y)| x + alpha * y)
                .collect(),
        })
    }

    /// Inner product over all elements.
    pub fn dot(&self, other: &Self) -> Result<T> {
        if self.shape != other.shape {
            return Err(Error::shape(format!(
                "dot: {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        Ok(self.data.iter().zip(&other.data).map(|(&x, &y)| x * y).sum())
    }

    /// Converts element precision.
    pub fn cast<U: Scalar>(&self) -> DenseTensor<U> {
        DenseTensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|&x| U::from_f64_lossy(x.as_f64()))
                .collect(),
        }
    }
}

fn free_modes(order: usize, contracted: &[usize], which: &str) -> Result<Vec<usize>> {
    let mut used = vec![false; order];
    for &m in contracted {
        if m >= order {
            return Err(Error::InvalidModes(format!(
                "mode {m} out of range for {which} of order {order}"
            )));
        }
        if used[m] {
            return Err(Error::InvalidModes(format!(
                "mode {m} of {which} contracted twice"
            )));
        }
        used[m] = true;
    }
    Ok((0..order).filter(|&m| !used[m]).collect())
}
