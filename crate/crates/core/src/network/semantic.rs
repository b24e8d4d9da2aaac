//! Sparse semantic branch: point encoder with per-voxel max aggregation,
//! then three residual + downscaling stages with per-voxel class heads.

use std::sync::Arc;

use rand::Rng;

use super::{ModelConfig, SceneInput};
use crate::error::{Error, Result};
use crate::grid::{build_point_features, group_keys, Reduce, POINT_FEATURE_DIM};
use crate::layers::{self, init_mlp};
use crate::real::Real;
use crate::sparse::{
    coord_key, init_sgfe, init_sparse_residual_block, key_coord, sgfe_downscale, sparse_residual_block,
    SparseVoxelTensor,
};
use crate::tensor::{ParamRegistry, Tape, Tensor};

pub(crate) fn init_semantic<T: Real, R: Rng + ?Sized>(
    reg: &mut ParamRegistry<T>,
    cfg: &ModelConfig,
    rng: &mut R,
) -> Result<()> {
    let cv = cfg.voxel_width;
    init_mlp(reg, "sem.point_mlp", [POINT_FEATURE_DIM, cv, 2 * cv], rng)?;
    layers::init_affine(reg, "sem.reduce", &[cv, 2 * cv], true, rng)?;
    let mut width = cv;
    for (i, &s) in cfg.semantic_widths.iter().enumerate() {
        let i = i + 1;
        init_sparse_residual_block(reg, &format!("sem.block{i}"), width, s, rng)?;
        init_sgfe(reg, &format!("sem.sgfe{i}"), s, rng)?;
        init_mlp(reg, &format!("sem.aux{i}"), [s, s, cfg.num_classes], rng)?;
        width = s;
    }
    Ok(())
}

pub struct SemanticFeatures {
    /// `F_V, F_s1, F_s2, F_s3` at scales 1, 1/2, 1/4, 1/8.
    pub features: Vec<SparseVoxelTensor>,
    /// Class logits (`C_n` wide) on the active sites of `F_s1..F_s3`; empty
    /// when the heads are not evaluated.
    pub aux_logits: Vec<SparseVoxelTensor>,
}

/// Point rows normalized to O(1): grid-relative positions in [-1, 1],
/// in-voxel offsets in [-1, 1], raw intensity.
fn normalized_rows(rows: &[[f64; POINT_FEATURE_DIM]], cfg: &ModelConfig) -> Vec<f64> {
    let spec = &cfg.grid;
    let extent = spec.extent();
    let mut out = Vec::with_capacity(rows.len() * POINT_FEATURE_DIM);
    for r in rows {
        for k in 0..3 {
            out.push(2.0 * (r[k] - spec.origin[k]) / extent[k] - 1.0);
        }
        for k in 3..6 {
            out.push(2.0 * r[k] / spec.voxel_size);
        }
        out.push(r[6]);
    }
    out
}

pub fn semantic_branch<T: Real>(
    tape: &mut Tape<T>,
    params: &ParamRegistry<T>,
    cfg: &ModelConfig,
    scenes: &[SceneInput<'_>],
    with_heads: bool,
) -> Result<SemanticFeatures> {
    let shape = cfg.grid.dims;
    let mut rows = Vec::new();
    let mut keys = Vec::new();
    for (b, scene) in scenes.iter().enumerate() {
        let pf = build_point_features(scene.points, &cfg.grid);
        if pf.rows.is_empty() {
            return Err(Error::EmptyScene);
        }
        rows.extend(normalized_rows(&pf.rows, cfg));
        keys.extend(pf.voxels.iter().map(|v| coord_key([b, v.x, v.y, v.z], shape)));
    }
    let n = keys.len();
    let pts = tape.constant(Tensor::from_f64(&[n, POINT_FEATURE_DIM], &rows)?);
    let h = layers::mlp(tape, params, "sem.point_mlp", pts)?;
    let (unique, assign) = group_keys(&keys);
    let pooled = tape.scatter_rows(h, Arc::new(assign), unique.len(), Reduce::Max)?;
    let fv = layers::linear(tape, params, "sem.reduce", pooled)?;
    let fv = tape.relu(fv);
    let coords = unique.iter().map(|&k| key_coord(k, shape)).collect();
    let mut x = SparseVoxelTensor::new(tape, Arc::new(coords), fv, shape, scenes.len())?;
    let mut features = vec![x.clone()];
    let mut aux_logits = Vec::new();
    for i in 1..=cfg.semantic_widths.len() {
        let rb = x.submanifold_rulebook(3)?;
        let y = sparse_residual_block(tape, params, &format!("sem.block{i}"), &x, &rb)?;
        x = sgfe_downscale(tape, params, &format!("sem.sgfe{i}"), &y)?.output;
        features.push(x.clone());
        if with_heads {
            let logits = layers::mlp(tape, params, &format!("sem.aux{i}"), x.features())?;
            aux_logits.push(x.with_features(tape, logits)?);
        }
    }
    Ok(SemanticFeatures { features, aux_logits })
}
