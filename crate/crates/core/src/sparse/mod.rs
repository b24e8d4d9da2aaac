//! Sparse voxel tensors, rulebooks and the autodiff ops built on them.

pub mod blocks;
mod ops;

use std::collections::{HashMap, HashSet};
use std::sync::Arc;

pub use blocks::{
    bev_project_sparse, init_sgfe, init_sparse_residual_block, sgfe_downscale, sparse_residual_block,
    sparse_to_dense, submanifold_conv3d, SgfeOutput, SGFE_SCALES,
};

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::{Tape, Var};

/// Active-site coordinate `(batch, x, y, z)`.
pub type Coord = [usize; 4];

/// Active voxel sites with one feature row each. The features live on a
/// [`Tape`]; the coordinate list is shared and immutable.
#[derive(Debug, Clone)]
pub struct SparseVoxelTensor {
    coords: Arc<Vec<Coord>>,
    features: Var,
    spatial_shape: [usize; 3],
    batch_size: usize,
}

impl SparseVoxelTensor {
    pub fn new<T: Real>(
        tape: &Tape<T>,
        coords: Arc<Vec<Coord>>,
        features: Var,
        spatial_shape: [usize; 3],
        batch_size: usize,
    ) -> Result<Self> {
        let fs = tape.shape(features);
        if fs.len() != 2 || fs[0] != coords.len() {
            return Err(Error::shape(format!(
                "sparse tensor: {} coords with features {fs:?}",
                coords.len()
            )));
        }
        let mut seen = HashSet::with_capacity(coords.len());
        for c in coords.iter() {
            if c[0] >= batch_size || (0..3).any(|k| c[k + 1] >= spatial_shape[k]) {
                return Err(Error::invalid(format!(
                    "sparse tensor: coord {c:?} outside batch {batch_size} / shape {spatial_shape:?}"
                )));
            }
            if !seen.insert(*c) {
                return Err(Error::invalid(format!("sparse tensor: duplicate coord {c:?}")));
            }
        }
        Ok(Self {
            coords,
            features,
            spatial_shape,
            batch_size,
        })
    }

    /// Same active set, new feature rows.
    pub fn with_features<T: Real>(&self, tape: &Tape<T>, features: Var) -> Result<Self> {
        let fs = tape.shape(features);
        if fs.len() != 2 || fs[0] != self.coords.len() {
            return Err(Error::shape(format!(
                "sparse tensor: {} coords with features {fs:?}",
                self.coords.len()
            )));
        }
        Ok(Self {
            features,
            ..self.clone()
        })
    }

    pub fn coords(&self) -> &Arc<Vec<Coord>> {
        &self.coords
    }

    pub fn features(&self) -> Var {
        self.features
    }

    pub fn spatial_shape(&self) -> [usize; 3] {
        self.spatial_shape
    }

    pub fn batch_size(&self) -> usize {
        self.batch_size
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn channels<T: Real>(&self, tape: &Tape<T>) -> usize {
        tape.shape(self.features)[1]
    }

    pub fn batch_ids(&self) -> Arc<Vec<usize>> {
        Arc::new(self.coords.iter().map(|c| c[0]).collect())
    }

    /// Builds the submanifold rulebook for this active set.
    pub fn submanifold_rulebook(&self, kernel_size: usize) -> Result<Arc<Rulebook>> {
        build_rulebook(&self.coords, self.spatial_shape, kernel_size, RulebookMode::Submanifold).map(Arc::new)
    }
}

/// Lexicographic key of a coordinate: sorting keys sorts coordinates.
pub fn coord_key(c: Coord, shape: [usize; 3]) -> u64 {
    (((c[0] * shape[0] + c[1]) * shape[1] + c[2]) * shape[2] + c[3]) as u64
}

pub fn key_coord(key: u64, shape: [usize; 3]) -> Coord {
    let k = key as usize;
    let z = k % shape[2];
    let y = (k / shape[2]) % shape[1];
    let x = (k / (shape[1] * shape[2])) % shape[0];
    let b = k / (shape[0] * shape[1] * shape[2]);
    [b, x, y, z]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RulebookMode {
    /// Outputs at the input sites; odd kernel centered on each site.
    Submanifold,
    /// Outputs at the distinct `floor(coord / stride)`; output `o` reads the
    /// inputs at `o·stride + δ` for `δ ∈ [0, k)³`.
    Strided { stride: usize },
}

/// Per-offset `(input_row, output_row)` pairs. Offsets are indexed
/// `(a·k + b)·k + c` over the x, y, z kernel axes, matching the layout of a
/// `C_out×C_in×k×k×k` weight.
#[derive(Debug, Clone, PartialEq)]
pub struct Rulebook {
    pub mode: RulebookMode,
    pub kernel_size: usize,
    pub num_inputs: usize,
    pub out_coords: Arc<Vec<Coord>>,
    pub out_shape: [usize; 3],
    pub pairs: Vec<Vec<(usize, usize)>>,
}

impl Rulebook {
    pub fn num_outputs(&self) -> usize {
        self.out_coords.len()
    }

    pub fn num_pairs(&self) -> usize {
        self.pairs.iter().map(Vec::len).sum()
    }
}

pub fn build_rulebook(
    coords: &Arc<Vec<Coord>>,
    spatial_shape: [usize; 3],
    kernel_size: usize,
    mode: RulebookMode,
) -> Result<Rulebook> {
    if kernel_size == 0 {
        return Err(Error::invalid("rulebook: kernel size must be >= 1"));
    }
    let k = kernel_size;
    let lookup: HashMap<Coord, usize> = coords.iter().enumerate().map(|(i, &c)| (c, i)).collect();
    let mut pairs = vec![Vec::new(); k * k * k];
    let (out_coords, out_shape) = match mode {
        RulebookMode::Submanifold => {
            if k % 2 == 0 {
                return Err(Error::invalid(format!(
                    "rulebook: submanifold convolution needs an odd kernel, got {k}"
                )));
            }
            let r = (k / 2) as isize;
            for (j, c) in coords.iter().enumerate() {
                for a in 0..k {
                    for b in 0..k {
                        for d in 0..k {
                            let delta = [a as isize - r, b as isize - r, d as isize - r];
                            let Some(src) = shifted(*c, delta, spatial_shape) else {
                                continue;
                            };
                            if let Some(&i) = lookup.get(&src) {
                                pairs[(a * k + b) * k + d].push((i, j));
                            }
                        }
                    }
                }
            }
            (coords.clone(), spatial_shape)
        }
        RulebookMode::Strided { stride } => {
            if stride == 0 {
                return Err(Error::invalid("rulebook: stride must be >= 1"));
            }
            let out_shape = spatial_shape.map(|d| d.div_ceil(stride));
            let mut outs: Vec<Coord> = coords
                .iter()
                .map(|c| [c[0], c[1] / stride, c[2] / stride, c[3] / stride])
                .collect();
            outs.sort_unstable();
            outs.dedup();
            for (j, o) in outs.iter().enumerate() {
                for a in 0..k {
                    for b in 0..k {
                        for d in 0..k {
                            let src = [o[0], o[1] * stride + a, o[2] * stride + b, o[3] * stride + d];
                            if let Some(&i) = lookup.get(&src) {
                                pairs[(a * k + b) * k + d].push((i, j));
                            }
                        }
                    }
                }
            }
            (Arc::new(outs), out_shape)
        }
    };
    Ok(Rulebook {
        mode,
        kernel_size,
        num_inputs: coords.len(),
        out_coords,
        out_shape,
        pairs,
    })
}

fn shifted(c: Coord, delta: [isize; 3], shape: [usize; 3]) -> Option<Coord> {
    let mut out = c;
    for k in 0..3 {
        let v = c[k + 1] as isize + delta[k];
        if v < 0 || v >= shape[k] as isize {
            return None;
        }
        out[k + 1] = v as usize;
    }
    Some(out)
}
