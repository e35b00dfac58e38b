//! Seeded random permutations of flat kernel indices.
//!
//! Permutations are drawn with Durstenfeld's in-place Fisher-Yates variant on
//! a ChaCha8 stream. Every draw samples a `u64` range, so a `(seed, n)` pair
//! yields the same permutation on every platform.

use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::DenseTensor;

/// Source of uniform integers on inclusive ranges `[0, hi]`.
pub trait UniformSource {
    fn uniform_inclusive(&mut self, hi: u64) -> u64;
}

impl<R: RngCore> UniformSource for R {
    fn uniform_inclusive(&mut self, hi: u64) -> u64 {
        self.random_range(0..=hi)
    }
}

/// The generator used for every seeded stream in this crate.
pub fn seeded_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// SplitMix64 finalizer; used to derive independent child seeds.
pub fn mix_seed(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Root seed of training repetition `repetition` of an experiment.
pub fn repetition_seed(experiment_seed: u64, repetition: usize) -> u64 {
    mix_seed(experiment_seed.wrapping_add(repetition as u64))
}

/// Permutation seed of layer `layer_index` under a repetition root seed.
pub fn layer_seed(repetition_root: u64, layer_index: usize) -> u64 {
    repetition_root ^ layer_index as u64
}

/// Bijection on `[0, n)` with its inverse.
#[derive(Debug, Clone)]
pub struct Permutation {
    forward: Vec<usize>,
    inverse: Vec<usize>,
    seed: Option<u64>,
}

impl PartialEq for Permutation {
    fn eq(&self, other: &Self) -> bool {
        self.forward == other.forward
    }
}

impl Eq for Permutation {}

fn invert(forward: &[usize]) -> Result<Vec<usize>> {
    let n = forward.len();
    let mut inverse = vec![usize::MAX; n];
    for (k, &f) in forward.iter().enumerate() {
        if f >= n {
            return Err(Error::Permutation(format!("index {f} out of range [0, {n})")));
        }
        if inverse[f] != usize::MAX {
            return Err(Error::Permutation(format!("index {f} appears more than once")));
        }
        inverse[f] = k;
    }
    Ok(inverse)
}

/// Durstenfeld shuffle of `[0, n)`: for `i = n-1 … 1`, swap `i` with a
/// uniform `j ∈ [0, i]`.
pub fn fisher_yates_permutation<S: UniformSource + ?Sized>(n: usize, source: &mut S) -> Result<Permutation> {
    if n == 0 {
        return Err(Error::Permutation("domain size must be at least 1".into()));
    }
    let mut forward: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = source.uniform_inclusive(i as u64) as usize;
        forward.swap(i, j);
    }
    Permutation::from_forward(forward)
}

impl Permutation {
    /// Regenerates the permutation for `(seed, n)`.
    pub fn from_seed(n: usize, seed: u64) -> Result<Self> {
        let mut rng = seeded_rng(seed);
        let mut p = fisher_yates_permutation(n, &mut rng)?;
        p.seed = Some(seed);
        Ok(p)
    }

    pub fn identity(n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::Permutation("domain size must be at least 1".into()));
        }
        Self::from_forward((0..n).collect())
    }

    /// Validates `forward` as a bijection.
    pub fn from_forward(forward: Vec<usize>) -> Result<Self> {
        if forward.is_empty() {
            return Err(Error::Permutation("domain size must be at least 1".into()));
        }
        let inverse = invert(&forward)?;
        Ok(Self {
            forward,
            inverse,
            seed: None,
        })
    }

    pub fn len(&self) -> usize {
        self.forward.len()
    }

    pub fn is_empty(&self) -> bool {
        self.forward.is_empty()
    }

    pub fn forward(&self) -> &[usize] {
        &self.forward
    }

    pub fn inverse(&self) -> &[usize] {
        &self.inverse
    }

    pub fn seed(&self) -> Option<u64> {
        self.seed
    }

    pub fn is_identity(&self) -> bool {
        self.forward.iter().enumerate().all(|(k, &f)| k == f)
    }

    /// `out[forward[k]] = values[k]`.
    pub fn apply_slice<T: Copy>(&self, values: &[T]) -> Vec<T> {
        assert_eq!(values.len(), self.len());
        self.inverse.iter().map(|&k| values[k]).collect()
    }

    /// `out[inverse[k]] = values[k]`, undoing [`Permutation::apply_slice`].
    pub fn apply_inverse_slice<T: Copy>(&self, values: &[T]) -> Vec<T> {
        assert_eq!(values.len(), self.len());
        self.forward.iter().map(|&k| values[k]).collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + 8 * self.len());
        out.extend_from_slice(PERMUTATION_MAGIC);
        out.extend_from_slice(&PERMUTATION_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.len() as u64).to_le_bytes());
        for &f in &self.forward {
            out.extend_from_slice(&(f as u64).to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_LEN {
            return Err(Error::parse(bytes.len(), "truncated permutation header"));
        }
        if &bytes[..4] != PERMUTATION_MAGIC {
            return Err(Error::parse(0, "bad magic, expected RSPM"));
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != PERMUTATION_VERSION {
            return Err(Error::parse(4, format!("unsupported version {version}")));
        }
        let n = u64::from_le_bytes(bytes[6..14].try_into().expect("8 bytes"));
        let expected = (n as usize)
            .checked_mul(8)
            .and_then(|p| p.checked_add(HEADER_LEN))
            .ok_or_else(|| Error::parse(6, "domain size overflows"))?;
        if bytes.len() != expected {
            return Err(Error::parse(
                bytes.len().min(expected),
                format!("payload length {} does not match n = {n}", bytes.len() - HEADER_LEN),
            ));
        }
        let forward = bytes[HEADER_LEN..]
            .chunks_exact(8)
            .map(|c| u64::from_le_bytes(c.try_into().expect("8 bytes")) as usize)
            .collect();
        Self::from_forward(forward).map_err(|e| Error::parse(HEADER_LEN, e.to_string()))
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        w.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let mut buf = Vec::new();
        r.read_to_end(&mut buf)?;
        Self::from_bytes(&buf)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

pub const PERMUTATION_MAGIC: &[u8; 4] = b"RSPM";
pub const PERMUTATION_VERSION: u16 = 1;
const HEADER_LEN: usize = 4 + 2 + 8;

/// Relocates flat element `k` of `t` to position `forward[k]`.
pub fn apply_shuffle<T: Scalar>(p: &Permutation, t: &DenseTensor<T>) -> Result<DenseTensor<T>> {
    check_size(p, t)?;
    DenseTensor::new(t.shape().to_vec(), p.apply_slice(t.data()))
}

/// Inverse relocation; also routes gradients back through [`apply_shuffle`].
pub fn apply_inverse_shuffle<T: Scalar>(p: &Permutation, t: &DenseTensor<T>) -> Result<DenseTensor<T>> {
    check_size(p, t)?;
    DenseTensor::new(t.shape().to_vec(), p.apply_inverse_slice(t.data()))
}

fn check_size<T: Scalar>(p: &Permutation, t: &DenseTensor<T>) -> Result<()> {
    if p.len() != t.len() {
        return Err(Error::shape(format!(
            "permutation over {} elements applied to a tensor of {}",
            p.len(),
            t.len()
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Scripted(Vec<u64>);

    impl UniformSource for Scripted {
        fn uniform_inclusive(&mut self, hi: u64) -> u64 {
            let j = self.0.remove(0);
            assert!(j <= hi);
            j
        }
    }

    #[test]
    fn singleton_is_identity() {
        let p = Permutation::from_seed(1, 99).unwrap();
        assert_eq!(p.forward(), &[0]);
    }

    #[test]
    fn hand_traced_swaps() {
        // [0,1,2] -swap(2,0)-> [2,1,0] -swap(1,0)-> [1,2,0]
        let p = fisher_yates_permutation(3, &mut Scripted(vec![0, 0])).unwrap();
        assert_eq!(p.forward(), &[1, 2, 0]);
        assert_eq!(p.inverse(), &[2, 0, 1]);
    }

    #[test]
    fn zero_domain_rejected() {
        assert!(Permutation::from_seed(0, 1).is_err());
        assert!(fisher_yates_permutation(0, &mut Scripted(vec![])).is_err());
    }

    #[test]
    fn shuffle_moves_by_hand() {
        let t = DenseTensor::from_slice(&[4], &[10.0f64, 20.0, 30.0, 40.0]).unwrap();
        let p = Permutation::from_forward(vec![2, 0, 3, 1]).unwrap();
        let s = apply_shuffle(&p, &t).unwrap();
        assert_eq!(s.data(), &[20.0, 40.0, 10.0, 30.0]);
        assert_eq!(apply_inverse_shuffle(&p, &s).unwrap(), t);
    }

    #[test]
    fn identity_shuffle_is_noop() {
        let t = DenseTensor::from_fn(&[2, 3], |i| i as f32).unwrap();
        let p = Permutation::identity(6).unwrap();
        assert!(p.is_identity());
        assert_eq!(apply_shuffle(&p, &t).unwrap(), t);
        assert_eq!(apply_inverse_shuffle(&p, &t).unwrap(), t);
    }

    #[test]
    fn size_mismatch_rejected() {
        let t = DenseTensor::from_fn(&[5], |i| i as f64).unwrap();
        let p = Permutation::identity(4).unwrap();
        assert!(apply_shuffle(&p, &t).is_err());
        assert!(apply_inverse_shuffle(&p, &t).is_err());
    }

    #[test]
    fn regeneration_is_deterministic() {
        let a = Permutation::from_seed(1000, 42).unwrap();
        let b = Permutation::from_seed(1000, 42).unwrap();
        let c = Permutation::from_seed(1000, 43).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_eq!(a.seed(), Some(42));
    }

    #[test]
    fn byte_layout_fixture() {
        let p = Permutation::from_forward(vec![1, 2, 0]).unwrap();
        let mut want = b"RSPM".to_vec();
        want.extend_from_slice(&[1, 0]);
        want.extend_from_slice(&[3, 0, 0, 0, 0, 0, 0, 0]);
        want.extend_from_slice(&[1, 0, 0, 0, 0, 0, 0, 0]);
        want.extend_from_slice(&[2, 0, 0, 0, 0, 0, 0, 0]);
        want.extend_from_slice(&[0, 0, 0, 0, 0, 0, 0, 0]);
        assert_eq!(p.to_bytes(), want);
        assert_eq!(Permutation::from_bytes(&want).unwrap(), p);
    }

    #[test]
    fn corrupt_payloads_rejected() {
        let mut bytes = Permutation::from_forward(vec![1, 2, 0]).unwrap().to_bytes();
        // repeated index
        bytes[HEADER_LEN + 8] = 1;
        assert!(matches!(Permutation::from_bytes(&bytes), Err(Error::Parse { .. })));
        let good = Permutation::from_forward(vec![1, 2, 0]).unwrap().to_bytes();
        let mut magic = good.clone();
        magic[0] = b'X';
        assert!(Permutation::from_bytes(&magic).is_err());
        let mut version = good.clone();
        version[4] = 2;
        assert!(Permutation::from_bytes(&version).is_err());
        assert!(Permutation::from_bytes(&good[..good.len() - 1]).is_err());
        assert!(Permutation::from_bytes(&good[..5]).is_err());
    }

    #[test]
    fn seed_derivation() {
        let r0 = repetition_seed(7, 0);
        let r1 = repetition_seed(7, 1);
        assert_ne!(r0, r1);
        assert_eq!(layer_seed(r0, 3), r0 ^ 3);
    }
}
