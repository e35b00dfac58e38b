//! Two-step evaluation of a rank-1 tensor-ring convolution.
//!
//! The cores carrying the input and spatial modes are merged into a kernel
//! with one latent output channel per bond into the output-mode core; the
//! input is convolved with it, and the output core then mixes the latent
//! channels into the real output channels. With every rank equal to one
//! there is a single latent channel, so all output channels are scaled
//! copies of it before the bias is added.

use super::reconstruct::{merge_all_but, CoreSet};
use super::topology::{Axis, TdTopology, TopologyKind, MODE_OUTPUT};
use crate::error::{Error, Result};
use crate::exec::ExecMode;
use crate::nn::conv::{conv2d_forward, ConvGeometry};
use crate::scalar::Scalar;
use crate::tensor::DenseTensor;

pub fn rank1_tr_split_forward<T: Scalar>(
    topology: &TdTopology,
    cores: &CoreSet<T>,
    bias: &DenseTensor<T>,
    x: &DenseTensor<T>,
    geometry: ConvGeometry,
    mode: ExecMode,
) -> Result<DenseTensor<T>> {
    if topology.kind() != TopologyKind::TensorRing {
        return Err(Error::Topology(format!(
            "split path needs a tensor ring, got {}",
            topology.kind()
        )));
    }
    if let Some((a, b, r)) = topology.edges().into_iter().find(|&(_, _, r)| r != 1) {
        return Err(Error::Topology(format!(
            "split path needs every bond rank to be 1, bond ({a},{b}) has rank {r}"
        )));
    }
    let md = topology.mode_dims();
    let out_core = topology
        .core_of_mode(MODE_OUTPUT)
        .ok_or_else(|| Error::Topology("no core carries the output mode".into()))?;
    let layout = topology.core_layout(out_core);
    if topology.free_modes(out_core).len() != 1 {
        return Err(Error::Topology("output core must carry only the output mode".into()));
    }
    let bonds: Vec<Axis> = layout.iter().copied().filter(|a| matches!(a, Axis::Bond(..))).collect();
    let latent: usize = bonds.iter().map(|&a| topology.axis_dim(a)).product();

    // step 1: latent kernel (I, H, W, L) and convolution
    let mut order: Vec<Axis> = (0..MODE_OUTPUT).map(Axis::Free).collect();
    order.extend(&bonds);
    let merged = merge_all_but(topology, cores, out_core, &order)?.reshape(&[md[0], md[1], md[2], latent])?;
    let zero_bias = DenseTensor::zeros(&[latent])?;
    let z = conv2d_forward(x, &merged, &zero_bias, geometry, mode)?;

    // step 2: mix latent channels with the output core, (L × O)
    let mut mix_order = bonds.clone();
    mix_order.push(Axis::Free(MODE_OUTPUT));
    let perm: Vec<usize> = mix_order
        .iter()
        .map(|a| layout.iter().position(|b| b == a).expect("axis of output core"))
        .collect();
    let mix = cores.core(out_core).permute_modes(&perm)?.reshape(&[latent, md[3]])?;
    if bias.shape() != [md[3]] {
        return Err(Error::shape(format!("bias {:?} for {} outputs", bias.shape(), md[3])));
    }

    let [batch, _, oh, ow] = z.shape().try_into().expect("4th-order output");
    let p = oh * ow;
    let mut out = Vec::with_capacity(batch * md[3] * p);
    for n in 0..batch {
        let zs = &z.data()[n * latent * p..(n + 1) * latent * p];
        let mut y: Vec<T> = (0..md[3]).flat_map(|o| std::iter::repeat_n(bias.data()[o], p)).collect();
        // y (O×P) += mixᵀ (O×L) · z (L×P)
        T::gemm(md[3], latent, p, T::one(), mix.data(), (1, md[3] as isize), zs, (p as isize, 1), T::one(), &mut y, (p as isize, 1));
        out.extend(y);
    }
    DenseTensor::new(vec![batch, md[3], oh, ow], out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tdmodel::KernelDims;

    #[test]
    fn zero_output_core_gives_zero_output() {
        let d = KernelDims::new(2, 3, 3, 4);
        let t = TdTopology::tensor_ring(d, &[1; 4]).unwrap();
        let mut cores = CoreSet::<f64>::filled(&t, 0.5);
        cores.core_mut(3).data_mut().fill(0.0);
        let x = DenseTensor::from_fn(&[1, 2, 5, 5], |i| i as f64).unwrap();
        let b = DenseTensor::zeros(&[4]).unwrap();
        let y = rank1_tr_split_forward(&t, &cores, &b, &x, ConvGeometry::new(1, 1), ExecMode::Sequential).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn higher_rank_rejected() {
        let d = KernelDims::new(2, 3, 3, 4);
        let t = TdTopology::tensor_ring(d, &[1, 2, 1, 1]).unwrap();
        let cores = CoreSet::<f64>::filled(&t, 0.5);
        let x = DenseTensor::zeros(&[1, 2, 5, 5]).unwrap();
        let b = DenseTensor::zeros(&[4]).unwrap();
        assert!(rank1_tr_split_forward(&t, &cores, &b, &x, ConvGeometry::new(1, 1), ExecMode::Sequential).is_err());
        let tt = TdTopology::tensor_train(d, &[1, 1, 1]).unwrap();
        let cores = CoreSet::<f64>::filled(&tt, 0.5);
        assert!(rank1_tr_split_forward(&tt, &cores, &b, &x, ConvGeometry::new(1, 1), ExecMode::Sequential).is_err());
    }
}
