use std::fmt;

use crate::error::{Error, Result};

/// Global mode ids of a convolution kernel in canonical `(I, H, W, O)` order.
pub const MODE_INPUT: usize = 0;
pub const MODE_HEIGHT: usize = 1;
pub const MODE_WIDTH: usize = 2;
pub const MODE_OUTPUT: usize = 3;

/// Dimensions of a 4th-order convolution kernel.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct KernelDims {
    pub input: usize,
    pub height: usize,
    pub width: usize,
    pub output: usize,
}

impl KernelDims {
    pub fn new(input: usize, height: usize, width: usize, output: usize) -> Self {
        Self {
            input,
            height,
            width,
            output,
        }
    }

    pub fn as_array(&self) -> [usize; 4] {
        [self.input, self.height, self.width, self.output]
    }

    pub fn volume(&self) -> usize {
        self.as_array().iter().product()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TopologyKind {
    TensorTrain,
    TtMatrix,
    TensorRing,
    Custom,
}

impl TopologyKind {
    pub fn name(&self) -> &'static str {
        match self {
            TopologyKind::TensorTrain => "TT",
            TopologyKind::TtMatrix => "TT-matrix",
            TopologyKind::TensorRing => "TR",
            TopologyKind::Custom => "custom",
        }
    }
}

impl fmt::Display for TopologyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for TopologyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "TT" => Ok(TopologyKind::TensorTrain),
            "TT-MATRIX" | "TTM" | "TT_MATRIX" => Ok(TopologyKind::TtMatrix),
            "TR" => Ok(TopologyKind::TensorRing),
            _ => Err(Error::Topology(format!(
                "unknown decomposition kind `{s}` (expected TT, TT-matrix or TR)"
            ))),
        }
    }
}

/// A free (uncontracted) mode carried by a core.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FreeMode {
    /// Global kernel mode id.
    pub mode: usize,
    pub dim: usize,
}

/// One axis of a core tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Axis {
    /// Bond shared by cores `(lo, hi)` with `lo < hi`.
    Bond(usize, usize),
    /// Global kernel mode.
    Free(usize),
}

/// Graph structure of a tensor decomposition.
///
/// `adjacency[i][j] > 0` is the bond rank between cores `i` and `j`; zero
/// means no edge. Each core's axes are laid out as: bonds to lower-indexed
/// neighbours (ascending), its free modes (in assignment order), then bonds to
/// higher-indexed neighbours (ascending).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TdTopology {
    kind: TopologyKind,
    adjacency: Vec<Vec<usize>>,
    free_modes: Vec<Vec<FreeMode>>,
    mode_dims: Vec<usize>,
    layouts: Vec<Vec<Axis>>,
}

impl TdTopology {
    /// Validates and builds an arbitrary topology.
    pub fn custom(adjacency: Vec<Vec<usize>>, free_modes: Vec<Vec<FreeMode>>) -> Result<Self> {
        Self::with_kind(TopologyKind::Custom, adjacency, free_modes)
    }

    fn with_kind(
        kind: TopologyKind,
        adjacency: Vec<Vec<usize>>,
        free_modes: Vec<Vec<FreeMode>>,
    ) -> Result<Self> {
        let n = adjacency.len();
        if n == 0 {
            return Err(Error::Topology("at least one core is required".into()));
        }
        if free_modes.len() != n {
            return Err(Error::Topology(format!(
                "{} cores in adjacency but {} free-mode lists",
                n,
                free_modes.len()
            )));
        }
        for (i, row) in adjacency.iter().enumerate() {
            if row.len() != n {
                return Err(Error::Topology(format!("adjacency row {i} has length {}", row.len())));
            }
            if row[i] != 0 {
                return Err(Error::Topology(format!("nonzero diagonal at core {i}")));
            }
            for j in 0..n {
                if adjacency[j][i] != row[j] {
                    return Err(Error::Topology(format!("adjacency not symmetric at ({i},{j})")));
                }
            }
        }

        let n_modes: usize = free_modes.iter().map(Vec::len).sum();
        if n_modes == 0 {
            return Err(Error::Topology("no free modes assigned".into()));
        }
        let mut mode_dims = vec![0usize; n_modes];
        for (i, modes) in free_modes.iter().enumerate() {
            for fm in modes {
                if fm.mode >= n_modes {
                    return Err(Error::Topology(format!(
                        "core {i} carries mode {} but only {n_modes} modes exist",
                        fm.mode
                    )));
                }
                if fm.dim == 0 {
                    return Err(Error::Topology(format!("mode {} has dimension 0", fm.mode)));
                }
                if mode_dims[fm.mode] != 0 {
                    return Err(Error::Topology(format!(
                        "mode {} assigned to more than one core",
                        fm.mode
                    )));
                }
                mode_dims[fm.mode] = fm.dim;
            }
        }

        // connectivity
        let mut seen = vec![false; n];
        let mut stack = vec![0];
        seen[0] = true;
        while let Some(i) = stack.pop() {
            for j in 0..n {
                if adjacency[i][j] > 0 && !seen[j] {
                    seen[j] = true;
                    stack.push(j);
                }
            }
        }
        if let Some(i) = seen.iter().position(|&s| !s) {
            return Err(Error::Topology(format!("core {i} is disconnected")));
        }

        let layouts = (0..n)
            .map(|i| {
                let lower = (0..i)
                    .filter(|&j| adjacency[i][j] > 0)
                    .map(|j| Axis::Bond(j, i));
                let free = free_modes[i].iter().map(|fm| Axis::Free(fm.mode));
                let higher = (i + 1..n)
                    .filter(|&j| adjacency[i][j] > 0)
                    .map(|j| Axis::Bond(i, j));
                lower.chain(free).chain(higher).collect()
            })
            .collect();

        Ok(Self {
            kind,
            adjacency,
            free_modes,
            mode_dims,
            layouts,
        })
    }

    /// Chain topology with one core per kernel mode in `(I, H, W, O)` order.
    pub fn tensor_train(dims: KernelDims, ranks: &[usize]) -> Result<Self> {
        check_ranks(TopologyKind::TensorTrain, ranks, 3)?;
        let mut adjacency = vec![vec![0; 4]; 4];
        for (k, &r) in ranks.iter().enumerate() {
            adjacency[k][k + 1] = r;
            adjacency[k + 1][k] = r;
        }
        Self::with_kind(TopologyKind::TensorTrain, adjacency, one_mode_per_core(dims))
    }

    /// Closed chain: tensor train plus the edge between the last and first core.
    pub fn tensor_ring(dims: KernelDims, ranks: &[usize]) -> Result<Self> {
        check_ranks(TopologyKind::TensorRing, ranks, 4)?;
        let mut adjacency = vec![vec![0; 4]; 4];
        for (k, &r) in ranks.iter().enumerate() {
            let (a, b) = (k, (k + 1) % 4);
            adjacency[a][b] = r;
            adjacency[b][a] = r;
        }
        Self::with_kind(TopologyKind::TensorRing, adjacency, one_mode_per_core(dims))
    }

    /// Two-core TT-matrix with the default `(I, H)` / `(W, O)` grouping.
    pub fn tt_matrix(dims: KernelDims, ranks: &[usize]) -> Result<Self> {
        match ranks.len() {
            1 => Self::tt_matrix_grouped(dims, &[&[MODE_INPUT, MODE_HEIGHT], &[MODE_WIDTH, MODE_OUTPUT]], ranks),
            2 => Self::tt_matrix_grouped(
                dims,
                &[&[MODE_INPUT], &[MODE_HEIGHT, MODE_WIDTH], &[MODE_OUTPUT]],
                ranks,
            ),
            3 => Self::tensor_train(dims, ranks).map(|mut t| {
                t.kind = TopologyKind::TtMatrix;
                t
            }),
            n => Err(Error::Topology(format!(
                "TT-matrix expects 1 to 3 bond ranks, got {n}"
            ))),
        }
    }

    /// Chain of cores where core `k` carries the kernel modes in `groups[k]`.
    pub fn tt_matrix_grouped(dims: KernelDims, groups: &[&[usize]], ranks: &[usize]) -> Result<Self> {
        if groups.is_empty() {
            return Err(Error::Topology("TT-matrix needs at least one group".into()));
        }
        check_ranks(TopologyKind::TtMatrix, ranks, groups.len() - 1)?;
        let n = groups.len();
        let all = dims.as_array();
        let mut adjacency = vec![vec![0; n]; n];
        for (k, &r) in ranks.iter().enumerate() {
            adjacency[k][k + 1] = r;
            adjacency[k + 1][k] = r;
        }
        let mut free_modes = Vec::with_capacity(n);
        for g in groups {
            let mut modes = Vec::with_capacity(g.len());
            for &m in g.iter() {
                let dim = *all
                    .get(m)
                    .ok_or_else(|| Error::Topology(format!("kernel mode {m} does not exist")))?;
                modes.push(FreeMode { mode: m, dim });
            }
            free_modes.push(modes);
        }
        Self::with_kind(TopologyKind::TtMatrix, adjacency, free_modes)
    }

    /// Preset builder dispatching on `kind`.
    pub fn build(kind: TopologyKind, dims: KernelDims, ranks: &[usize]) -> Result<Self> {
        match kind {
            TopologyKind::TensorTrain => Self::tensor_train(dims, ranks),
            TopologyKind::TtMatrix => Self::tt_matrix(dims, ranks),
            TopologyKind::TensorRing => Self::tensor_ring(dims, ranks),
            TopologyKind::Custom => Err(Error::Topology(
                "custom topologies are built with TdTopology::custom".into(),
            )),
        }
    }

    /// A single core holding the whole kernel (no compression).
    pub fn full(dims: KernelDims) -> Self {
        let modes = dims
            .as_array()
            .iter()
            .enumerate()
            .map(|(mode, &dim)| FreeMode { mode, dim })
            .collect();
        Self::with_kind(TopologyKind::Custom, vec![vec![0]], vec![modes])
            .expect("single-core topology is valid")
    }

    pub fn kind(&self) -> TopologyKind {
        self.kind
    }

    pub fn n_cores(&self) -> usize {
        self.adjacency.len()
    }

    pub fn adjacency(&self) -> &[Vec<usize>] {
        &self.adjacency
    }

    pub fn free_modes(&self, core: usize) -> &[FreeMode] {
        &self.free_modes[core]
    }

    /// Dimensions of the reconstructed tensor, ordered by global mode id.
    pub fn mode_dims(&self) -> &[usize] {
        &self.mode_dims
    }

    pub fn n_modes(&self) -> usize {
        self.mode_dims.len()
    }

    pub fn bond_rank(&self, a: usize, b: usize) -> usize {
        self.adjacency[a][b]
    }

    /// Undirected edges `(lo, hi, rank)` in ascending order.
    pub fn edges(&self) -> Vec<(usize, usize, usize)> {
        let n = self.n_cores();
        let mut e = Vec::new();
        for i in 0..n {
            for j in i + 1..n {
                if self.adjacency[i][j] > 0 {
                    e.push((i, j, self.adjacency[i][j]));
                }
            }
        }
        e
    }

    pub fn core_layout(&self, core: usize) -> &[Axis] {
        &self.layouts[core]
    }

    pub fn axis_dim(&self, axis: Axis) -> usize {
        match axis {
            Axis::Bond(a, b) => self.adjacency[a][b],
            Axis::Free(m) => self.mode_dims[m],
        }
    }

    pub fn core_shape(&self, core: usize) -> Vec<usize> {
        self.layouts[core].iter().map(|&a| self.axis_dim(a)).collect()
    }

    /// Core carrying global mode `mode`.
    pub fn core_of_mode(&self, mode: usize) -> Option<usize> {
        self.free_modes
            .iter()
            .position(|fm| fm.iter().any(|f| f.mode == mode))
    }

    /// Total number of core elements.
    pub fn param_count(&self) -> usize {
        (0..self.n_cores())
            .map(|i| self.core_shape(i).iter().product::<usize>())
            .sum()
    }

    /// Element count of the reconstructed tensor.
    pub fn full_size(&self) -> usize {
        self.mode_dims.iter().product()
    }
}

fn one_mode_per_core(dims: KernelDims) -> Vec<Vec<FreeMode>> {
    dims.as_array()
        .iter()
        .enumerate()
        .map(|(mode, &dim)| vec![FreeMode { mode, dim }])
        .collect()
}

fn check_ranks(kind: TopologyKind, ranks: &[usize], expected: usize) -> Result<()> {
    if ranks.len() != expected {
        return Err(Error::Topology(format!(
            "{kind} expects {expected} bond ranks, got {}",
            ranks.len()
        )));
    }
    if let Some(k) = ranks.iter().position(|&r| r == 0) {
        return Err(Error::Topology(format!("bond rank {k} is zero")));
    }
    Ok(())
}

/// Ratio of compressed to uncompressed parameter counts.
pub fn compression_ratio(n_compressed: usize, n_uncompressed: usize) -> Result<f64> {
    if n_uncompressed == 0 {
        return Err(Error::Topology(
            "compression ratio with zero uncompressed parameters".into(),
        ));
    }
    Ok(n_compressed as f64 / n_uncompressed as f64)
}
