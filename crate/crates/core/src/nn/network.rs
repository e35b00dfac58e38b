//! The seven-convolution classification network and its parameter registry.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::batchnorm::{BatchNorm, BnCache, BnMode};
use super::conv::ConvGeometry;
use super::factorized::FactorizedConvLayer;
use super::head::{global_average_pool, global_average_pool_backward, relu, relu_backward, softmax_cross_entropy, Linear};
use crate::error::{Error, Result};
use crate::exec::ExecMode;
use crate::scalar::Scalar;
use crate::shuffle::{layer_seed, mix_seed, seeded_rng, Permutation};

/// `(layer name, output shape)` per layer.
pub type LayerShapes = Vec<(String, Vec<usize>)>;
use crate::tdmodel::{compression_ratio, CoreSet, KernelDims, TdTopology, TopologyKind};
use crate::tensor::DenseTensor;

/// Strides of the seven 3×3 convolutions.
pub const TABLE1_STRIDES: [usize; 7] = [1, 1, 2, 1, 1, 2, 1];
pub const KERNEL_SIZE: usize = 3;
pub const PADDING: usize = 1;
pub const INPUT_CHANNELS: usize = 3;
pub const NUM_CLASSES: usize = 10;

/// How one convolution layer stores its kernel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LayerCompression {
    None,
    Td {
        kind: TopologyKind,
        ranks: Vec<usize>,
    },
    /// Shuffled decomposition. Without an explicit seed the permutation seed
    /// is derived from the network seed and the layer index.
    RsTd {
        kind: TopologyKind,
        ranks: Vec<usize>,
        seed: Option<u64>,
    },
}

impl LayerCompression {
    pub fn decomposition(kind: TopologyKind, ranks: Vec<usize>, shuffled: bool) -> Self {
        if shuffled {
            LayerCompression::RsTd { kind, ranks, seed: None }
        } else {
            LayerCompression::Td { kind, ranks }
        }
    }

    pub fn is_shuffled(&self) -> bool {
        matches!(self, LayerCompression::RsTd { .. })
    }

    fn topology(&self, dims: KernelDims) -> Result<TdTopology> {
        match self {
            LayerCompression::None => Ok(TdTopology::full(dims)),
            LayerCompression::Td { kind, ranks } | LayerCompression::RsTd { kind, ranks, .. } => {
                TdTopology::build(*kind, dims, ranks)
            }
        }
    }
}

/// Declarative description of the network.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NetworkSpec {
    pub channels: usize,
    /// One entry per convolution; the first must be [`LayerCompression::None`].
    pub layers: Vec<LayerCompression>,
}

impl NetworkSpec {
    pub fn uncompressed(channels: usize) -> Self {
        Self {
            channels,
            layers: vec![LayerCompression::None; TABLE1_STRIDES.len()],
        }
    }

    /// Compresses convolutions 2..7 identically.
    pub fn uniform(channels: usize, compression: LayerCompression) -> Self {
        let mut layers = vec![compression; TABLE1_STRIDES.len()];
        layers[0] = LayerCompression::None;
        Self { channels, layers }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 {
            return Err(Error::Network("channel count must be at least 1".into()));
        }
        if self.layers.len() != TABLE1_STRIDES.len() {
            return Err(Error::Network(format!(
                "{} layer specs given for {} convolutions",
                self.layers.len(),
                TABLE1_STRIDES.len()
            )));
        }
        if self.layers[0] != LayerCompression::None {
            return Err(Error::Network("the first convolution is never compressed".into()));
        }
        for (l, dims) in self.conv_dims().into_iter().enumerate() {
            self.layers[l].topology(dims)?;
        }
        Ok(())
    }

    pub fn conv_dims(&self) -> Vec<KernelDims> {
        (0..TABLE1_STRIDES.len())
            .map(|l| {
                let input = if l == 0 { INPUT_CHANNELS } else { self.channels };
                KernelDims::new(input, KERNEL_SIZE, KERNEL_SIZE, self.channels)
            })
            .collect()
    }

    /// Parameters counted for the compression ratio: convolution kernels or
    /// cores, convolution biases and the classifier. Batch-norm affine
    /// parameters are excluded.
    pub fn compressed_param_count(&self) -> Result<usize> {
        self.validate()?;
        let convs: usize = self
            .conv_dims()
            .into_iter()
            .zip(&self.layers)
            .map(|(d, c)| c.topology(d).map(|t| t.param_count() + d.output))
            .sum::<Result<usize>>()?;
        Ok(convs + self.classifier_params())
    }

    /// The same count for the uncompressed twin network.
    pub fn uncompressed_param_count(&self) -> Result<usize> {
        Self::uncompressed(self.channels).compressed_param_count()
    }

    /// Every trainable scalar, batch-norm affine parameters included.
    pub fn trainable_param_count(&self) -> Result<usize> {
        Ok(self.compressed_param_count()? + self.batchnorm_params())
    }

    pub fn compression_ratio(&self) -> Result<f64> {
        compression_ratio(self.compressed_param_count()?, self.uncompressed_param_count()?)
    }

    fn classifier_params(&self) -> usize {
        self.channels * NUM_CLASSES + NUM_CLASSES
    }

    fn batchnorm_params(&self) -> usize {
        2 * self.channels * TABLE1_STRIDES.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer<T> {
    Conv(FactorizedConvLayer<T>),
    BatchNorm(BatchNorm<T>),
    Relu,
    GlobalAvgPool,
    Linear(Linear<T>),
}

#[derive(Debug, Clone)]
enum TapeEntry<T> {
    Conv { input: DenseTensor<T>, kernel: DenseTensor<T> },
    BatchNorm(BnCache<T>),
    Relu(DenseTensor<T>),
    Pool(Vec<usize>),
    Linear(DenseTensor<T>),
}

/// Activations recorded by [`Network::forward_train`].
#[derive(Debug, Clone)]
pub struct Tape<T> {
    entries: Vec<TapeEntry<T>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network<T> {
    layers: Vec<(String, Layer<T>)>,
    exec: ExecMode,
}

impl<T: Scalar> Network<T> {
    pub fn from_layers(layers: Vec<(String, Layer<T>)>) -> Result<Self> {
        let net = Self {
            layers,
            exec: ExecMode::default(),
        };
        let names = net.param_names();
        let mut sorted = names.clone();
        sorted.sort();
        sorted.dedup();
        if sorted.len() != names.len() {
            return Err(Error::Network("duplicate parameter names".into()));
        }
        Ok(net)
    }

    pub fn layers(&self) -> &[(String, Layer<T>)] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [(String, Layer<T>)] {
        &mut self.layers
    }

    pub fn exec_mode(&self) -> ExecMode {
        self.exec
    }

    pub fn set_exec_mode(&mut self, mode: ExecMode) {
        self.exec = mode;
    }

    pub fn conv_layers(&self) -> impl Iterator<Item = (&str, &FactorizedConvLayer<T>)> {
        self.layers.iter().filter_map(|(n, l)| match l {
            Layer::Conv(c) => Some((n.as_str(), c)),
            _ => None,
        })
    }

    /// Trainable parameters with stable names, in registry order.
    pub fn named_params(&self) -> Vec<(String, &DenseTensor<T>)> {
        let mut out = Vec::new();
        for (name, layer) in &self.layers {
            match layer {
                Layer::Conv(c) => {
                    if c.is_compressed() {
                        for (i, core) in c.cores.cores().iter().enumerate() {
                            out.push((format!("{name}.core{i}"), core));
                        }
                    } else {
                        out.push((format!("{name}.kernel"), c.cores.core(0)));
                    }
                    out.push((format!("{name}.bias"), &c.bias));
                }
                Layer::BatchNorm(b) => {
                    out.push((format!("{name}.scale"), &b.scale));
                    out.push((format!("{name}.shift"), &b.shift));
                }
                Layer::Linear(f) => {
                    out.push((format!("{name}.weight"), &f.weight));
                    out.push((format!("{name}.bias"), &f.bias));
                }
                Layer::Relu | Layer::GlobalAvgPool => {}
            }
        }
        out
    }

    pub fn param_names(&self) -> Vec<String> {
        self.named_params().into_iter().map(|(n, _)| n).collect()
    }

    /// Mutable trainable parameters in the same order as [`Network::named_params`].
    pub fn params_mut(&mut self) -> Vec<&mut DenseTensor<T>> {
        let mut out = Vec::new();
        for (_, layer) in &mut self.layers {
            match layer {
                Layer::Conv(c) => {
                    out.extend(c.cores.cores_mut().iter_mut());
                    out.push(&mut c.bias);
                }
                Layer::BatchNorm(b) => {
                    out.push(&mut b.scale);
                    out.push(&mut b.shift);
                }
                Layer::Linear(f) => {
                    out.push(&mut f.weight);
                    out.push(&mut f.bias);
                }
                Layer::Relu | Layer::GlobalAvgPool => {}
            }
        }
        out
    }

    /// Non-trainable state (batch-norm running statistics).
    pub fn named_buffers(&self) -> Vec<(String, &DenseTensor<T>)> {
        let mut out = Vec::new();
        for (name, layer) in &self.layers {
            if let Layer::BatchNorm(b) = layer {
                out.push((format!("{name}.running_mean"), &b.running_mean));
                out.push((format!("{name}.running_var"), &b.running_var));
            }
        }
        out
    }

    pub fn buffers_mut(&mut self) -> Vec<&mut DenseTensor<T>> {
        let mut out = Vec::new();
        for (_, layer) in &mut self.layers {
            if let Layer::BatchNorm(b) = layer {
                out.push(&mut b.running_mean);
                out.push(&mut b.running_var);
            }
        }
        out
    }

    /// Every trainable scalar.
    pub fn trainable_param_count(&self) -> usize {
        self.named_params().iter().map(|(_, t)| t.len()).sum()
    }

    /// Scalars counted for the compression ratio (batch-norm affine
    /// parameters excluded).
    pub fn compression_param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|(_, l)| match l {
                Layer::Conv(c) => c.param_count(),
                Layer::Linear(f) => f.weight.len() + f.bias.len(),
                _ => 0,
            })
            .sum()
    }

    /// Parameter count of the same network with every convolution dense.
    pub fn uncompressed_param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|(_, l)| match l {
                Layer::Conv(c) => c.dims().volume() + c.bias.len(),
                Layer::Linear(f) => f.weight.len() + f.bias.len(),
                _ => 0,
            })
            .sum()
    }

    pub fn compression_ratio(&self) -> Result<f64> {
        compression_ratio(self.compression_param_count(), self.uncompressed_param_count())
    }

    /// Training-mode forward pass recording what the backward pass needs.
    pub fn forward_train(&mut self, x: &DenseTensor<T>) -> Result<(DenseTensor<T>, Tape<T>)> {
        let exec = self.exec;
        let mut entries = Vec::with_capacity(self.layers.len());
        let mut h = x.clone();
        for (_, layer) in &mut self.layers {
            h = match layer {
                Layer::Conv(c) => {
                    let kernel = c.kernel()?;
                    let y = super::conv::conv2d_forward(&h, &kernel, &c.bias, c.geometry(), exec)?;
                    entries.push(TapeEntry::Conv { input: h, kernel });
                    y
                }
                Layer::BatchNorm(b) => {
                    let (y, cache) = b.forward(&h, BnMode::Train)?;
                    entries.push(TapeEntry::BatchNorm(cache));
                    y
                }
                Layer::Relu => {
                    let y = relu(&h);
                    entries.push(TapeEntry::Relu(h));
                    y
                }
                Layer::GlobalAvgPool => {
                    let y = global_average_pool(&h)?;
                    entries.push(TapeEntry::Pool(h.shape().to_vec()));
                    y
                }
                Layer::Linear(f) => {
                    let y = f.forward(&h)?;
                    entries.push(TapeEntry::Linear(h));
                    y
                }
            };
        }
        Ok((h, Tape { entries }))
    }

    /// Gradients of the loss for every trainable parameter (registry order)
    /// and for the network input, given the gradient at the logits.
    pub fn backward(&self, tape: &Tape<T>, dlogits: &DenseTensor<T>) -> Result<(Vec<DenseTensor<T>>, DenseTensor<T>)> {
        if tape.entries.len() != self.layers.len() {
            return Err(Error::shape("tape does not belong to this network"));
        }
        let mut per_layer: Vec<Vec<DenseTensor<T>>> = Vec::with_capacity(self.layers.len());
        let mut g = dlogits.clone();
        for ((_, layer), entry) in self.layers.iter().zip(&tape.entries).rev() {
            let (dx, grads) = match (layer, entry) {
                (Layer::Conv(c), TapeEntry::Conv { input, kernel }) => {
                    let r = c.backward_with_kernel(input, kernel, &g, self.exec)?;
                    let mut grads = r.dcores.into_cores();
                    grads.push(r.dbias);
                    (r.dx, grads)
                }
                (Layer::BatchNorm(b), TapeEntry::BatchNorm(cache)) => {
                    let r = b.backward(cache, &g)?;
                    (r.dx, vec![r.dscale, r.dshift])
                }
                (Layer::Relu, TapeEntry::Relu(input)) => (relu_backward(input, &g)?, vec![]),
                (Layer::GlobalAvgPool, TapeEntry::Pool(shape)) => (global_average_pool_backward(shape, &g)?, vec![]),
                (Layer::Linear(f), TapeEntry::Linear(input)) => {
                    let r = f.backward(input, &g)?;
                    (r.dx, vec![r.dweight, r.dbias])
                }
                _ => return Err(Error::shape("tape entry does not match layer")),
            };
            per_layer.push(grads);
            g = dx;
        }
        per_layer.reverse();
        Ok((per_layer.into_iter().flatten().collect(), g))
    }

    /// Mean cross-entropy loss and parameter gradients on one batch.
    pub fn loss_and_grads(&mut self, x: &DenseTensor<T>, labels: &[usize]) -> Result<(T, Vec<DenseTensor<T>>)> {
        let (logits, tape) = self.forward_train(x)?;
        let (loss, dlogits) = softmax_cross_entropy(&logits, labels)?;
        let (grads, _) = self.backward(&tape, &dlogits)?;
        Ok((loss, grads))
    }

    /// Eval-mode logits (batch norm uses running statistics).
    pub fn forward_eval(&self, x: &DenseTensor<T>) -> Result<DenseTensor<T>> {
        Ok(self.eval_trace(x, false)?.0)
    }

    /// Output shape of every layer for an input of `input_shape`.
    pub fn layer_output_shapes(&self, input_shape: &[usize]) -> Result<LayerShapes> {
        let x = DenseTensor::zeros(input_shape)?;
        Ok(self.eval_trace(&x, true)?.1)
    }

    fn eval_trace(&self, x: &DenseTensor<T>, record: bool) -> Result<(DenseTensor<T>, LayerShapes)> {
        let mut shapes = Vec::new();
        let mut h = x.clone();
        for (name, layer) in &self.layers {
            h = match layer {
                Layer::Conv(c) => c.forward(&h, self.exec)?,
                Layer::BatchNorm(b) => b.forward_eval(&h)?,
                Layer::Relu => relu(&h),
                Layer::GlobalAvgPool => global_average_pool(&h)?,
                Layer::Linear(f) => f.forward(&h)?,
            };
            if record {
                shapes.push((name.clone(), h.shape().to_vec()));
            }
        }
        Ok((h, shapes))
    }
}

fn gaussian<T: Scalar, R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> DenseTensor<T> {
    DenseTensor::from_fn(shape, |_| {
        let z: f64 = StandardNormal.sample(rng);
        T::from_f64_lossy(z * std)
    })
    .expect("nonempty shape")
}

/// Builds the seven-convolution network: each 3×3 convolution (padding 1) is
/// followed by batch norm and ReLU, then global average pooling and a
/// fully-connected layer to ten logits.
///
/// Weights are He-initialized from a ChaCha8 stream derived from `seed`;
/// compressed layers draw cores whose reconstruction has the He variance.
/// Biases and batch-norm shifts start at zero.
pub fn build_table1_network<T: Scalar>(spec: &NetworkSpec, seed: u64) -> Result<Network<T>> {
    spec.validate()?;
    let mut rng = seeded_rng(mix_seed(seed));
    let mut layers = Vec::new();
    for (l, (dims, comp)) in spec.conv_dims().into_iter().zip(&spec.layers).enumerate() {
        let idx = l + 1;
        let he_std = (2.0 / (dims.input * dims.height * dims.width) as f64).sqrt();
        let topology = comp.topology(dims)?;
        let cores = match comp {
            LayerCompression::None => CoreSet::new(&topology, vec![gaussian(&dims.as_array(), he_std, &mut rng)])?,
            _ => CoreSet::random_normal(&topology, he_std, &mut rng),
        };
        let shuffle = match comp {
            LayerCompression::RsTd { seed: s, .. } => {
                let s = s.unwrap_or_else(|| layer_seed(seed, idx));
                Some(Permutation::from_seed(dims.volume(), s)?)
            }
            _ => None,
        };
        let bias = DenseTensor::zeros(&[dims.output])?;
        let geom = ConvGeometry::new(TABLE1_STRIDES[l], PADDING);
        let conv = FactorizedConvLayer::new(topology, cores, shuffle, bias, geom)?;
        layers.push((format!("conv{idx}"), Layer::Conv(conv)));
        layers.push((format!("bn{idx}"), Layer::BatchNorm(BatchNorm::new(dims.output))));
        layers.push((format!("relu{idx}"), Layer::Relu));
    }
    layers.push(("pool".into(), Layer::GlobalAvgPool));
    let fc_std = (2.0 / spec.channels as f64).sqrt();
    let fc = Linear::new(
        gaussian(&[spec.channels, NUM_CLASSES], fc_std, &mut rng),
        DenseTensor::zeros(&[NUM_CLASSES])?,
    )?;
    layers.push(("fc".into(), Layer::Linear(fc)));
    Network::from_layers(layers)
}
