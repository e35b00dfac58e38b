use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::topology::{Axis, TdTopology};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::DenseTensor;

/// The latent cores of a decomposition, one per topology vertex.
#[derive(Debug, Clone, PartialEq)]
pub struct CoreSet<T> {
    cores: Vec<DenseTensor<T>>,
}

impl<T: Scalar> CoreSet<T> {
    /// Wraps `cores`, checking each shape against `topology`.
    pub fn new(topology: &TdTopology, cores: Vec<DenseTensor<T>>) -> Result<Self> {
        let set = Self { cores };
        set.check(topology)?;
        Ok(set)
    }

    pub fn check(&self, topology: &TdTopology) -> Result<()> {
        if self.cores.len() != topology.n_cores() {
            return Err(Error::shape(format!(
                "{} cores given for a {}-core topology",
                self.cores.len(),
                topology.n_cores()
            )));
        }
        for (i, core) in self.cores.iter().enumerate() {
            let want = topology.core_shape(i);
            if core.shape() != want.as_slice() {
                return Err(Error::shape(format!(
                    "core {i} has shape {:?}, topology requires {:?}",
                    core.shape(),
                    want
                )));
            }
        }
        Ok(())
    }

    pub fn zeros(topology: &TdTopology) -> Self {
        Self {
            cores: (0..topology.n_cores())
                .map(|i| DenseTensor::zeros(&topology.core_shape(i)).expect("valid core shape"))
                .collect(),
        }
    }

    pub fn filled(topology: &TdTopology, value: T) -> Self {
        Self {
            cores: (0..topology.n_cores())
                .map(|i| DenseTensor::filled(&topology.core_shape(i), value).expect("valid core shape"))
                .collect(),
        }
    }

    /// Gaussian cores whose reconstruction has element standard deviation
    /// `target_std`.
    ///
    /// Each reconstructed element is a sum of `prod(bond ranks)` products of
    /// `N` independent entries, so core `i` gets standard deviation
    /// `target_std^(1/N) * prod_{bonds e at i} r_e^(-1/4)`.
    pub fn random_normal<R: Rng + ?Sized>(topology: &TdTopology, target_std: f64, rng: &mut R) -> Self {
        let n = topology.n_cores() as f64;
        let cores = (0..topology.n_cores())
            .map(|i| {
                let bond_scale: f64 = topology
                    .core_layout(i)
                    .iter()
                    .filter_map(|&ax| match ax {
                        Axis::Bond(..) => Some((topology.axis_dim(ax) as f64).powf(-0.25)),
                        Axis::Free(_) => None,
                    })
                    .product();
                let std = target_std.powf(1.0 / n) * bond_scale;
                DenseTensor::from_fn(&topology.core_shape(i), |_| {
                    let z: f64 = StandardNormal.sample(rng);
                    T::from_f64_lossy(z * std)
                })
                .expect("valid core shape")
            })
            .collect();
        Self { cores }
    }

    pub fn len(&self) -> usize {
        self.cores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cores.is_empty()
    }

    pub fn cores(&self) -> &[DenseTensor<T>] {
        &self.cores
    }

    pub fn core(&self, i: usize) -> &DenseTensor<T> {
        &self.cores[i]
    }

    pub fn core_mut(&mut self, i: usize) -> &mut DenseTensor<T> {
        &mut self.cores[i]
    }

    /// Mutable access to core values; shapes cannot change through it.
    pub fn cores_mut(&mut self) -> &mut [DenseTensor<T>] {
        &mut self.cores
    }

    pub fn into_cores(self) -> Vec<DenseTensor<T>> {
        self.cores
    }

    pub fn param_count(&self) -> usize {
        self.cores.iter().map(DenseTensor::len).sum()
    }
}

/// A tensor whose modes are tagged with topology axes.
#[derive(Debug, Clone)]
struct Labeled<T> {
    tensor: DenseTensor<T>,
    axes: Vec<Axis>,
}

impl<T: Scalar> Labeled<T> {
    /// Contracts every axis shared by `self` and `other`.
    fn contract(&self, other: &Self) -> Result<Self> {
        let mut modes_a = Vec::new();
        let mut modes_b = Vec::new();
        for (ia, a) in self.axes.iter().enumerate() {
            if let Some(ib) = other.axes.iter().position(|b| b == a) {
                modes_a.push(ia);
                modes_b.push(ib);
            }
        }
        let tensor = self.tensor.contract(&other.tensor, &modes_a, &modes_b)?;
        let axes: Vec<Axis> = self
            .axes
            .iter()
            .enumerate()
            .filter(|(i, _)| !modes_a.contains(i))
            .map(|(_, &a)| a)
            .chain(
                other
                    .axes
                    .iter()
                    .enumerate()
                    .filter(|(i, _)| !modes_b.contains(i))
                    .map(|(_, &a)| a),
            )
            .collect();
        Ok(Self { tensor, axes })
    }

    /// Permutes modes into the order given by `target`.
    fn arrange(self, target: &[Axis]) -> Result<DenseTensor<T>> {
        if target.len() != self.axes.len() {
            return Err(Error::shape(format!(
                "cannot arrange axes {:?} as {:?}",
                self.axes, target
            )));
        }
        let perm = target
            .iter()
            .map(|t| {
                self.axes
                    .iter()
                    .position(|a| a == t)
                    .ok_or_else(|| Error::shape(format!("axis {t:?} missing")))
            })
            .collect::<Result<Vec<_>>>()?;
        self.tensor.permute_modes(&perm)
    }
}

fn labeled_core<T: Scalar>(topology: &TdTopology, cores: &CoreSet<T>, i: usize) -> Labeled<T> {
    Labeled {
        tensor: cores.core(i).clone(),
        axes: topology.core_layout(i).to_vec(),
    }
}

fn output_axes(topology: &TdTopology) -> Vec<Axis> {
    (0..topology.n_modes()).map(Axis::Free).collect()
}

/// Contracts the listed cores left to right in index order.
fn contract_sequence<T: Scalar>(
    topology: &TdTopology,
    cores: &CoreSet<T>,
    which: impl IntoIterator<Item = usize>,
) -> Result<Option<Labeled<T>>> {
    let mut acc: Option<Labeled<T>> = None;
    for i in which {
        let core = labeled_core(topology, cores, i);
        acc = Some(match acc {
            None => core,
            Some(a) => a.contract(&core)?,
        });
    }
    Ok(acc)
}

/// Full tensor `T_A(G_1, …, G_N)` with modes ordered by global mode id.
///
/// Cores are absorbed in index order, so for a ring the closing bond is
/// summed when the last core joins.
pub fn reconstruct<T: Scalar>(topology: &TdTopology, cores: &CoreSet<T>) -> Result<DenseTensor<T>> {
    cores.check(topology)?;
    let acc = contract_sequence(topology, cores, 0..topology.n_cores())?
        .expect("topology has at least one core");
    acc.arrange(&output_axes(topology))
}

/// Contracts every core except `skip`, returning the merged tensor arranged
/// as `order`.
pub(crate) fn merge_all_but<T: Scalar>(
    topology: &TdTopology,
    cores: &CoreSet<T>,
    skip: usize,
    order: &[Axis],
) -> Result<DenseTensor<T>> {
    cores.check(topology)?;
    let merged = contract_sequence(topology, cores, (0..topology.n_cores()).filter(|&j| j != skip))?
        .ok_or_else(|| Error::Topology("nothing to merge in a single-core topology".into()))?;
    merged.arrange(order)
}

/// Gradient of `<upstream, reconstruct(cores)>` with respect to every core.
pub fn reconstruct_gradient<T: Scalar>(
    topology: &TdTopology,
    cores: &CoreSet<T>,
    upstream: &DenseTensor<T>,
) -> Result<CoreSet<T>> {
    cores.check(topology)?;
    if upstream.shape() != topology.mode_dims() {
        return Err(Error::shape(format!(
            "upstream gradient has shape {:?}, reconstruction has {:?}",
            upstream.shape(),
            topology.mode_dims()
        )));
    }
    let n = topology.n_cores();
    let up = Labeled {
        tensor: upstream.clone(),
        axes: output_axes(topology),
    };
    let grads = (0..n)
        .map(|i| {
            let layout = topology.core_layout(i);
            match contract_sequence(topology, cores, (0..n).filter(|&j| j != i))? {
                None => up.clone().arrange(layout),
                Some(env) => up.contract(&env)?.arrange(layout),
            }
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(CoreSet { cores: grads })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tdmodel::topology::KernelDims;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn single_core_is_identity() {
        let d = KernelDims::new(2, 3, 3, 2);
        let t = TdTopology::full(d);
        let core = DenseTensor::from_fn(&[2, 3, 3, 2], |i| i as f64).unwrap();
        let cores = CoreSet::new(&t, vec![core.clone()]).unwrap();
        assert_eq!(reconstruct(&t, &cores).unwrap(), core);
        let g = reconstruct_gradient(&t, &cores, &core).unwrap();
        assert_eq!(g.core(0), &core);
    }

    #[test]
    fn rank_one_ones_give_ones() {
        let d = KernelDims::new(2, 3, 3, 4);
        let t = TdTopology::tensor_train(d, &[1, 1, 1]).unwrap();
        let cores = CoreSet::<f64>::filled(&t, 1.0);
        let w = reconstruct(&t, &cores).unwrap();
        assert_eq!(w.shape(), &[2, 3, 3, 4]);
        assert!(w.data().iter().all(|&x| x == 1.0));
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let d = KernelDims::new(2, 3, 3, 2);
        let t = TdTopology::tensor_ring(d, &[2, 1, 2, 2]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cores = CoreSet::<f64>::random_normal(&t, 1.0, &mut rng);
        let up = DenseTensor::zeros(&[2, 3, 3, 2]).unwrap();
        let g = reconstruct_gradient(&t, &cores, &up).unwrap();
        assert!(g.cores().iter().all(|c| c.data().iter().all(|&x| x == 0.0)));
    }

    #[test]
    fn nonconforming_cores_rejected() {
        let d = KernelDims::new(2, 3, 3, 2);
        let t = TdTopology::tensor_train(d, &[2, 2, 2]).unwrap();
        let bad = vec![DenseTensor::<f64>::zeros(&[2, 3]).unwrap(); 4];
        assert!(CoreSet::new(&t, bad).is_err());
        let cores = CoreSet::<f64>::zeros(&t);
        let up = DenseTensor::zeros(&[2, 3, 3, 3]).unwrap();
        assert!(reconstruct_gradient(&t, &cores, &up).is_err());
    }

    #[test]
    fn init_matches_target_variance() {
        let d = KernelDims::new(16, 3, 3, 16);
        let t = TdTopology::tensor_ring(d, &[4, 4, 4, 4]).unwrap();
        let target = 0.2f64;
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut acc = 0.0;
        let mut count = 0usize;
        for _ in 0..20 {
            let cores = CoreSet::<f64>::random_normal(&t, target, &mut rng);
            let w = reconstruct(&t, &cores).unwrap();
            acc += w.data().iter().map(|x| x * x).sum::<f64>();
            count += w.len();
        }
        let var = acc / count as f64;
        let rel = (var / (target * target) - 1.0).abs();
        assert!(rel < 0.15, "variance {var} vs {}", target * target);
    }
}
