//! Binary checkpoint format.
//!
//! ```text
//! "RSTD" | version u16 = 1 | entry count u32
//! per entry: name length u16 | UTF-8 name | order u8 | dims u32 x order | payload f32 x prod(dims)
//! ```
//!
//! All integers and reals are little-endian. Entries are the trainable
//! parameters, then the batch-norm running statistics, then one reference per
//! shuffled convolution. A reference is named `<layer>.permutation`, has
//! order 3 with dims `[seed_lo, seed_hi, n]` and no payload: the permutation
//! is regenerated from its seed on load.

use rstd_core::nn::{Layer, Network};
use rstd_core::shuffle::Permutation;
use rstd_core::{DenseTensor, Scalar};

pub const MAGIC: &[u8; 4] = b"RSTD";
pub const VERSION: u16 = 1;
pub const FILE_NAME: &str = "checkpoint.rstd";
const PERMUTATION_SUFFIX: &str = ".permutation";

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("truncated checkpoint at byte offset {offset}: {what}")]
    Truncated { offset: usize, what: String },
    #[error("bad magic {0:?}, not a checkpoint")]
    BadMagic([u8; 4]),
    #[error("unsupported checkpoint version {0}")]
    BadVersion(u16),
    #[error("invalid entry at byte offset {offset}: {msg}")]
    Invalid { offset: usize, msg: String },
    #[error("checkpoint does not fit the network: {0}")]
    Mismatch(String),
    #[error("{0} trailing bytes after the last entry")]
    Trailing(usize),
}

type Result<T> = std::result::Result<T, CheckpointError>;

#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub name: String,
    pub dims: Vec<u32>,
    pub payload: Vec<f32>,
}

impl Entry {
    pub fn is_permutation(&self) -> bool {
        self.name.ends_with(PERMUTATION_SUFFIX)
    }

    fn tensor(name: String, t: &DenseTensor<impl Scalar>) -> Self {
        Entry {
            name,
            dims: t.shape().iter().map(|&d| d as u32).collect(),
            payload: t.data().iter().map(|v| v.as_f64() as f32).collect(),
        }
    }

    fn permutation(layer: &str, p: &Permutation) -> std::result::Result<Self, CheckpointError> {
        let seed = p
            .seed()
            .ok_or_else(|| CheckpointError::Mismatch(format!("{layer}: permutation has no seed to reference")))?;
        Ok(Entry {
            name: format!("{layer}{PERMUTATION_SUFFIX}"),
            dims: vec![seed as u32, (seed >> 32) as u32, p.len() as u32],
            payload: Vec::new(),
        })
    }

    fn permutation_seed(&self) -> (u64, usize) {
        (self.dims[0] as u64 | (self.dims[1] as u64) << 32, self.dims[2] as usize)
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    pub entries: Vec<Entry>,
}

impl Checkpoint {
    pub fn from_network<T: Scalar>(net: &Network<T>) -> Result<Self> {
        let mut entries: Vec<Entry> = net
            .named_params()
            .into_iter()
            .chain(net.named_buffers())
            .map(|(n, t)| Entry::tensor(n, t))
            .collect();
        for (name, conv) in net.conv_layers() {
            if let Some(p) = conv.shuffle() {
                entries.push(Entry::permutation(name, p)?);
            }
        }
        Ok(Self { entries })
    }

    /// Scalars in entries that count towards the compression ratio:
    /// everything except permutation references, batch-norm affine
    /// parameters and running statistics.
    pub fn compression_param_count(&self) -> usize {
        const EXCLUDED: [&str; 4] = [".scale", ".shift", ".running_mean", ".running_var"];
        self.entries
            .iter()
            .filter(|e| !e.is_permutation() && !EXCLUDED.iter().any(|s| e.name.ends_with(s)))
            .map(|e| e.payload.len())
            .sum()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for e in &self.entries {
            out.extend_from_slice(&(e.name.len() as u16).to_le_bytes());
            out.extend_from_slice(e.name.as_bytes());
            out.push(e.dims.len() as u8);
            for d in &e.dims {
                out.extend_from_slice(&d.to_le_bytes());
            }
            for v in &e.payload {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic: [u8; 4] = r.take(4, "magic")?.try_into().unwrap();
        if &magic != MAGIC {
            return Err(CheckpointError::BadMagic(magic));
        }
        let version = r.u16("version")?;
        if version != VERSION {
            return Err(CheckpointError::BadVersion(version));
        }
        let count = r.u32("entry count")? as usize;
        let mut entries = Vec::with_capacity(count.min(4096));
        for k in 0..count {
            let start = r.pos;
            let len = r.u16("name length")? as usize;
            let name = std::str::from_utf8(r.take(len, "name")?)
                .map_err(|e| CheckpointError::Invalid {
                    offset: start + 2,
                    msg: format!("entry {k} name is not UTF-8: {e}"),
                })?
                .to_string();
            let order = r.take(1, "order")?[0] as usize;
            let dims = (0..order).map(|_| r.u32("dims")).collect::<Result<Vec<u32>>>()?;
            let entry_is_perm = name.ends_with(PERMUTATION_SUFFIX);
            let n = if entry_is_perm {
                if order != 3 {
                    return Err(CheckpointError::Invalid {
                        offset: start,
                        msg: format!("{name}: permutation reference needs order 3, has {order}"),
                    });
                }
                0
            } else {
                dims.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d as usize)).ok_or_else(|| {
                    CheckpointError::Invalid {
                        offset: start,
                        msg: format!("{name}: dims {dims:?} overflow"),
                    }
                })?
            };
            let raw = r.take(n.saturating_mul(4), &format!("payload of `{name}`"))?;
            let payload = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
            entries.push(Entry { name, dims, payload });
        }
        if r.pos != bytes.len() {
            return Err(CheckpointError::Trailing(bytes.len() - r.pos));
        }
        Ok(Self { entries })
    }

    /// Restores parameters, running statistics and shuffles into a network of
    /// the same architecture. Nothing is modified unless every entry fits.
    pub fn load_into<T: Scalar>(&self, net: &mut Network<T>) -> Result<()> {
        let mut tensors = Vec::new();
        let mut perms = Vec::new();
        for e in &self.entries {
            if e.is_permutation() {
                perms.push(e);
            } else {
                tensors.push(e);
            }
        }
        let current: Vec<(String, Vec<usize>)> = net
            .named_params()
            .into_iter()
            .chain(net.named_buffers())
            .map(|(n, t)| (n, t.shape().to_vec()))
            .collect();
        if current.len() != tensors.len() {
            return Err(CheckpointError::Mismatch(format!(
                "{} tensor entries for {} network tensors",
                tensors.len(),
                current.len()
            )));
        }
        for ((name, shape), e) in current.iter().zip(&tensors) {
            let dims: Vec<usize> = e.dims.iter().map(|&d| d as usize).collect();
            if &e.name != name || &dims != shape {
                return Err(CheckpointError::Mismatch(format!(
                    "entry `{}` {dims:?} where `{name}` {shape:?} was expected",
                    e.name
                )));
            }
        }

        let mut shuffles = Vec::new();
        for (name, conv) in net.conv_layers() {
            let want = format!("{name}{PERMUTATION_SUFFIX}");
            let entry = perms.iter().find(|e| e.name == want);
            match (conv.shuffle(), entry) {
                (None, None) => {}
                (Some(_), Some(e)) => {
                    let (seed, n) = e.permutation_seed();
                    let p = Permutation::from_seed(n, seed).map_err(|err| CheckpointError::Mismatch(format!("{want}: {err}")))?;
                    if n != conv.dims().volume() {
                        return Err(CheckpointError::Mismatch(format!(
                            "{want} covers {n} entries, kernel has {}",
                            conv.dims().volume()
                        )));
                    }
                    shuffles.push((name.to_string(), p));
                }
                (Some(_), None) => return Err(CheckpointError::Mismatch(format!("no {want} entry for a shuffled layer"))),
                (None, Some(_)) => return Err(CheckpointError::Mismatch(format!("{want} given for an unshuffled layer"))),
            }
        }
        if shuffles.len() != perms.len() {
            return Err(CheckpointError::Mismatch(format!(
                "{} permutation references, network has {} shuffled layers",
                perms.len(),
                shuffles.len()
            )));
        }

        let n_params = net.named_params().len();
        for (t, e) in net.params_mut().into_iter().zip(&tensors[..n_params]) {
            copy_payload(t, e);
        }
        for (t, e) in net.buffers_mut().into_iter().zip(&tensors[n_params..]) {
            copy_payload(t, e);
        }
        for (layer_name, l) in net.layers_mut() {
            if let Layer::Conv(conv) = l {
                if let Some(k) = shuffles.iter().position(|(n, _)| n == layer_name) {
                    let (_, p) = shuffles.swap_remove(k);
                    conv.set_shuffle(Some(p)).map_err(|e| CheckpointError::Mismatch(e.to_string()))?;
                }
            }
        }
        Ok(())
    }
}

fn copy_payload<T: Scalar>(t: &mut DenseTensor<T>, e: &Entry) {
    for (dst, &src) in t.data_mut().iter_mut().zip(&e.payload) {
        *dst = T::from_f64_lossy(src as f64);
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            CheckpointError::Truncated {
                offset: self.pos,
                what: format!("{what} needs {n} bytes, {} left", self.bytes.len() - self.pos),
            }
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        Checkpoint {
            entries: vec![
                Entry {
                    name: "w".into(),
                    dims: vec![2, 1],
                    payload: vec![1.5, -2.0],
                },
                Entry {
                    name: "conv2.permutation".into(),
                    dims: vec![7, 1, 36],
                    payload: vec![],
                },
            ],
        }
    }

    #[test]
    fn header_layout() {
        let b = sample().to_bytes();
        assert_eq!(&b[..4], b"RSTD");
        assert_eq!(&b[4..6], &[1, 0]);
        assert_eq!(&b[6..10], &[2, 0, 0, 0]);
        // first entry: name length, name, order, two dims, two reals
        assert_eq!(&b[10..13], &[1, 0, b'w']);
        assert_eq!(b[13], 2);
        assert_eq!(&b[22..26], &1.5f32.to_le_bytes());
        assert_eq!(b.len(), 10 + (2 + 1 + 1 + 8 + 8) + (2 + 17 + 1 + 12));
    }

    #[test]
    fn round_trip() {
        let c = sample();
        assert_eq!(Checkpoint::from_bytes(&c.to_bytes()).unwrap(), c);
        assert_eq!(c.entries[1].permutation_seed(), ((1u64 << 32) | 7, 36));
    }

    #[test]
    fn every_truncation_is_rejected_with_its_offset() {
        let b = sample().to_bytes();
        for cut in 0..b.len() {
            match Checkpoint::from_bytes(&b[..cut]) {
                Err(CheckpointError::Truncated { offset, .. }) => assert!(offset <= cut),
                other => panic!("cut {cut}: {other:?}"),
            }
        }
    }

    #[test]
    fn bad_header() {
        let mut b = sample().to_bytes();
        b[4] = 2;
        assert!(matches!(Checkpoint::from_bytes(&b), Err(CheckpointError::BadVersion(2))));
        b[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&b), Err(CheckpointError::BadMagic(_))));
        let mut b = sample().to_bytes();
        b.push(0);
        assert!(matches!(Checkpoint::from_bytes(&b), Err(CheckpointError::Trailing(1))));
    }
}
