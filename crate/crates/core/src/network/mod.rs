//! The two-branch scene completion network with BEV fusion.

pub mod bev;
pub mod completion;
pub mod semantic;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use bev::{arf_fuse, bev_fusion_forward, bev_project_dense, sem_to_bev, ArfOutput, ARF_SOURCES};
pub use completion::{completion_branch, CompletionFeatures};
pub use semantic::{semantic_branch, SemanticFeatures};

use crate::error::{Error, Result};
use crate::grid::{LabelGrid, OccupancyGrid, PointCloud, VoxelGridSpec};
use crate::real::Real;
use crate::sparse::SparseVoxelTensor;
use crate::tensor::{ParamRegistry, Tape, Tensor, Var};

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    /// Semantic classes `C_n`, excluding empty.
    pub num_classes: usize,
    pub grid: VoxelGridSpec,
    /// Voxel feature width `C_V`.
    pub voxel_width: usize,
    pub semantic_widths: [usize; 3],
    pub completion_widths: [usize; 4],
    pub bev_widths: [usize; 4],
    pub decoder_widths: [usize; 3],
    pub arf_reduction: usize,
    /// Off: the semantic BEV streams are replaced by zeros.
    pub semantic_branch: bool,
    /// Off: the auxiliary stage heads are neither evaluated nor supervised.
    pub deep_supervision: bool,
}

impl ModelConfig {
    /// 64×64×8 grid and the small channel plan.
    pub fn desk() -> Self {
        let bev_widths = [32, 48, 64, 80];
        Self {
            num_classes: 19,
            grid: VoxelGridSpec::desk(),
            voxel_width: 16,
            semantic_widths: [32, 48, 64],
            completion_widths: [8, 16, 24, 32],
            bev_widths,
            decoder_widths: [bev_widths[2], bev_widths[1], bev_widths[0]],
            arf_reduction: 4,
            semantic_branch: true,
            deep_supervision: true,
        }
    }

    /// 256×256×32 grid with a wider completion branch.
    pub fn full_scale() -> Self {
        Self {
            grid: VoxelGridSpec::full_scale(),
            completion_widths: [16, 32, 48, 64],
            ..Self::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        if self.num_classes == 0 || self.num_classes > 254 {
            return Err(Error::Config(format!("num_classes {} out of range", self.num_classes)));
        }
        let [l, w, h] = self.grid.dims;
        if l % 8 != 0 || w % 8 != 0 || h % 8 != 0 {
            return Err(Error::Config(format!(
                "grid dims {:?} must be divisible by 8 for the three downscaling stages",
                self.grid.dims
            )));
        }
        let widths = [
            &[self.voxel_width, self.arf_reduction][..],
            &self.semantic_widths,
            &self.completion_widths,
            &self.bev_widths,
            &self.decoder_widths,
        ];
        if widths.iter().any(|w| w.contains(&0)) {
            return Err(Error::Config("channel widths must be positive".into()));
        }
        Ok(())
    }

    /// Number of output classes including empty.
    pub fn output_classes(&self) -> usize {
        self.num_classes + 1
    }
}

/// Registers every parameter of the model, seeded.
pub fn init_model<T: Real>(cfg: &ModelConfig, seed: u64) -> Result<ParamRegistry<T>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut reg = ParamRegistry::new();
    if cfg.semantic_branch {
        semantic::init_semantic(&mut reg, cfg, &mut rng)?;
    }
    completion::init_completion(&mut reg, cfg, &mut rng)?;
    bev::init_bev(&mut reg, cfg, &mut rng)?;
    Ok(reg)
}

/// Parameter counts by top-level component.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamCounts {
    pub semantic: usize,
    pub completion: usize,
    pub bev: usize,
    pub total: usize,
}

pub fn param_counts<T: Real>(params: &ParamRegistry<T>) -> ParamCounts {
    ParamCounts {
        semantic: params.num_scalars_with_prefix("sem."),
        completion: params.num_scalars_with_prefix("com."),
        bev: params.num_scalars_with_prefix("bev."),
        total: params.num_scalars(),
    }
}

/// One scene as the network consumes it.
#[derive(Debug, Clone, Copy)]
pub struct SceneInput<'a> {
    pub points: &'a PointCloud,
    pub occupancy: &'a OccupancyGrid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

pub struct ForwardOutput {
    /// `B×(C_n+1)×Z×L×W`.
    pub ssc_logits: Var,
    pub sem_aux_logits: Vec<SparseVoxelTensor>,
    /// `B×1×Z_i×L_i×W_i` at scales 1/2, 1/4, 1/8.
    pub com_aux_logits: Vec<Var>,
    /// `F_V, F_s1..F_s3`; empty when the semantic branch is off.
    pub sem_features: Vec<SparseVoxelTensor>,
    /// `F_c0..F_c3`, `B×G_i×Z_i×X_i×Y_i`.
    pub com_features: Vec<Var>,
    pub bev_sem: Vec<Var>,
    pub bev_com: Vec<Var>,
}

/// Dense `B×1×Z×X×Y` input from occupancy grids stored x-major.
pub fn occupancy_tensor<T: Real>(grids: &[&OccupancyGrid]) -> Result<Tensor<T>> {
    let dims = grids
        .first()
        .ok_or_else(|| Error::invalid("empty batch"))?
        .dims();
    let [l, w, h] = dims;
    let mut data = vec![T::zero(); grids.len() * l * w * h];
    for (b, g) in grids.iter().enumerate() {
        if g.dims() != dims {
            return Err(Error::shape("occupancy grids of different size in one batch"));
        }
        let base = b * l * w * h;
        for x in 0..l {
            for y in 0..w {
                for z in 0..h {
                    if g.get(x, y, z) {
                        data[base + (z * l + x) * w + y] = T::one();
                    }
                }
            }
        }
    }
    Tensor::new(vec![grids.len(), 1, h, l, w], data)
}

pub fn ssc_rs_forward<T: Real>(
    tape: &mut Tape<T>,
    params: &ParamRegistry<T>,
    cfg: &ModelConfig,
    scenes: &[SceneInput<'_>],
    mode: Mode,
) -> Result<ForwardOutput> {
    if scenes.is_empty() {
        return Err(Error::invalid("ssc_rs_forward: empty batch"));
    }
    for s in scenes {
        if s.occupancy.dims() != cfg.grid.dims {
            return Err(Error::shape(format!(
                "input occupancy {:?} does not match grid {:?}",
                s.occupancy.dims(),
                cfg.grid.dims
            )));
        }
    }
    let heads = mode == Mode::Train && cfg.deep_supervision;
    let batch = scenes.len();
    let [l, w, _] = cfg.grid.dims;

    let occ: Vec<&OccupancyGrid> = scenes.iter().map(|s| s.occupancy).collect();
    let occ = tape.constant(occupancy_tensor(&occ)?);
    let com = completion_branch(tape, params, occ, heads)?;
    let bev_com = com
        .features
        .iter()
        .enumerate()
        .map(|(i, &f)| bev_project_dense(tape, params, &format!("bev.com{i}"), f))
        .collect::<Result<Vec<_>>>()?;

    let (sem_features, sem_aux_logits, bev_sem) = if cfg.semantic_branch {
        let sem = semantic_branch(tape, params, cfg, scenes, heads)?;
        let bev_sem = sem
            .features
            .iter()
            .enumerate()
            .map(|(i, f)| sem_to_bev(tape, params, &format!("bev.sem{i}"), f))
            .collect::<Result<Vec<_>>>()?;
        (sem.features, sem.aux_logits, bev_sem)
    } else {
        let zeros = (0..4)
            .map(|i| tape.constant(Tensor::zeros(&[batch, cfg.bev_widths[i], l >> i, w >> i])))
            .collect();
        (Vec::new(), Vec::new(), zeros)
    };

    let ssc_logits = bev_fusion_forward(tape, params, cfg, &bev_sem, &bev_com)?;
    Ok(ForwardOutput {
        ssc_logits,
        sem_aux_logits,
        com_aux_logits: com.aux_logits,
        sem_features,
        com_features: com.features,
        bev_sem,
        bev_com,
    })
}

/// Per-voxel argmax of `B×K×Z×X×Y` logits (first maximum on ties).
pub fn predict<T: Real>(logits: &Tensor<T>) -> Result<Vec<LabelGrid>> {
    let s = logits.shape();
    if s.len() != 5 {
        return Err(Error::shape(format!("predict: expected B×K×Z×X×Y, got {s:?}")));
    }
    let (b, k, h, l, w) = (s[0], s[1], s[2], s[3], s[4]);
    let n = h * l * w;
    let v = logits.data();
    let mut out = Vec::with_capacity(b);
    for bi in 0..b {
        let mut grid = LabelGrid::empty([l, w, h]);
        for z in 0..h {
            for x in 0..l {
                for y in 0..w {
                    let cell = (z * l + x) * w + y;
                    let mut best = 0;
                    for c in 1..k {
                        if v[(bi * k + c) * n + cell] > v[(bi * k + best) * n + cell] {
                            best = c;
                        }
                    }
                    grid.set(x, y, z, best as u8);
                }
            }
        }
        out.push(grid);
    }
    Ok(out)
}
