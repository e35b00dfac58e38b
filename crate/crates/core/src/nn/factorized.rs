//! Convolution layers whose kernel is produced from latent cores, optionally
//! passed through a fixed random shuffle of its flat entries.
//!
//! An uncompressed convolution is the single-core case: its one core is the
//! kernel itself.

use super::conv::{conv2d_backward, conv2d_forward, ConvGeometry};
use crate::error::{Error, Result};
use crate::exec::ExecMode;
use crate::shuffle::Permutation;
use crate::scalar::Scalar;
use crate::tdmodel::{reconstruct, reconstruct_gradient, CoreSet, KernelDims, TdTopology};
use crate::tensor::DenseTensor;

#[derive(Debug, Clone, PartialEq)]
pub struct FactorizedConvLayer<T> {
    topology: TdTopology,
    pub cores: CoreSet<T>,
    shuffle: Option<Permutation>,
    pub bias: DenseTensor<T>,
    geometry: ConvGeometry,
    dims: KernelDims,
}

#[derive(Debug, Clone)]
pub struct FactorizedGrads<T> {
    pub dx: DenseTensor<T>,
    pub dcores: CoreSet<T>,
    pub dbias: DenseTensor<T>,
}

impl<T: Scalar> FactorizedConvLayer<T> {
    pub fn new(
        topology: TdTopology,
        cores: CoreSet<T>,
        shuffle: Option<Permutation>,
        bias: DenseTensor<T>,
        geometry: ConvGeometry,
    ) -> Result<Self> {
        let md = topology.mode_dims();
        if md.len() != 4 {
            return Err(Error::shape(format!(
                "a convolution kernel needs 4 modes (I, H, W, O), topology has {}",
                md.len()
            )));
        }
        let dims = KernelDims::new(md[0], md[1], md[2], md[3]);
        cores.check(&topology)?;
        if bias.shape() != [dims.output] {
            return Err(Error::shape(format!(
                "bias shape {:?} for {} output channels",
                bias.shape(),
                dims.output
            )));
        }
        if let Some(p) = &shuffle {
            if p.len() != dims.volume() {
                return Err(Error::shape(format!(
                    "shuffle over {} entries for a kernel of {}",
                    p.len(),
                    dims.volume()
                )));
            }
        }
        if geometry.stride == 0 {
            return Err(Error::shape("stride must be at least 1"));
        }
        Ok(Self {
            topology,
            cores,
            shuffle,
            bias,
            geometry,
            dims,
        })
    }

    /// Plain convolution: one core holding the kernel.
    pub fn dense(kernel: DenseTensor<T>, bias: DenseTensor<T>, geometry: ConvGeometry) -> Result<Self> {
        let s = super::conv::four(kernel.shape(), "kernel")?;
        let topology = TdTopology::full(KernelDims::new(s[0], s[1], s[2], s[3]));
        let cores = CoreSet::new(&topology, vec![kernel])?;
        Self::new(topology, cores, None, bias, geometry)
    }

    pub fn topology(&self) -> &TdTopology {
        &self.topology
    }

    pub fn shuffle(&self) -> Option<&Permutation> {
        self.shuffle.as_ref()
    }

    /// Replaces the shuffle; the permutation must cover the whole kernel.
    pub fn set_shuffle(&mut self, shuffle: Option<Permutation>) -> Result<()> {
        if let Some(p) = &shuffle {
            if p.len() != self.dims.volume() {
                return Err(Error::shape(format!(
                    "shuffle over {} entries for a kernel of {}",
                    p.len(),
                    self.dims.volume()
                )));
            }
        }
        self.shuffle = shuffle;
        Ok(())
    }

    pub fn geometry(&self) -> ConvGeometry {
        self.geometry
    }

    pub fn dims(&self) -> KernelDims {
        self.dims
    }

    pub fn is_compressed(&self) -> bool {
        self.topology.n_cores() > 1
    }

    /// Core elements plus bias.
    pub fn param_count(&self) -> usize {
        self.cores.param_count() + self.bias.len()
    }

    /// Kernel actually convolved: `R · T_A(cores)`, or `T_A(cores)` without a
    /// shuffle.
    pub fn kernel(&self) -> Result<DenseTensor<T>> {
        let w = reconstruct(&self.topology, &self.cores)?;
        match &self.shuffle {
            Some(p) => DenseTensor::new(w.shape().to_vec(), p.apply_slice(w.data())),
            None => Ok(w),
        }
    }

    /// Pre-activation output; the nonlinearity is a separate layer.
    pub fn forward(&self, x: &DenseTensor<T>, mode: ExecMode) -> Result<DenseTensor<T>> {
        conv2d_forward(x, &self.kernel()?, &self.bias, self.geometry, mode)
    }

    pub fn backward(&self, x: &DenseTensor<T>, dy: &DenseTensor<T>, mode: ExecMode) -> Result<FactorizedGrads<T>> {
        self.backward_with_kernel(x, &self.kernel()?, dy, mode)
    }

    /// Backward pass reusing the kernel computed during the forward pass.
    pub fn backward_with_kernel(
        &self,
        x: &DenseTensor<T>,
        kernel: &DenseTensor<T>,
        dy: &DenseTensor<T>,
        mode: ExecMode,
    ) -> Result<FactorizedGrads<T>> {
        let g = conv2d_backward(x, kernel, dy, self.geometry, mode)?;
        let routed = match &self.shuffle {
            Some(p) => DenseTensor::new(g.dkernel.shape().to_vec(), p.apply_inverse_slice(g.dkernel.data()))?,
            None => g.dkernel,
        };
        let dcores = reconstruct_gradient(&self.topology, &self.cores, &routed)?;
        Ok(FactorizedGrads {
            dx: g.dx,
            dcores,
            dbias: g.dbias,
        })
    }
}
