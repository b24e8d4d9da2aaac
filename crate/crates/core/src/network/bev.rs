//! Bird's-eye-view projections, adaptive fusion and the 2-D U-Net.

use rand::Rng;

use super::ModelConfig;
use crate::error::{Error, Result};
use crate::layers::{self, init_affine, init_mlp, init_norm, init_transpose2d};
use crate::real::Real;
use crate::sparse::{bev_project_sparse, SparseVoxelTensor};
use crate::tensor::{ParamRegistry, Tape, Var};

/// Per-voxel width projection followed by the column max.
pub fn sem_to_bev<T: Real>(
    tape: &mut Tape<T>,
    params: &ParamRegistry<T>,
    prefix: &str,
    x: &SparseVoxelTensor,
) -> Result<Var> {
    let f = layers::linear(tape, params, prefix, x.features())?;
    let projected = x.with_features(tape, f)?;
    bev_project_sparse(tape, &projected)
}

/// Folds `x: B×C×D×H×W` into `B×(C·D)×H×W` and maps it through a 1×1 conv.
pub fn bev_project_dense<T: Real>(tape: &mut Tape<T>, params: &ParamRegistry<T>, prefix: &str, x: Var) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    if s.len() != 5 {
        return Err(Error::shape(format!("bev_project_dense: expected B×C×D×H×W, got {s:?}")));
    }
    let folded = tape.reshape(x, &[s[0], s[1] * s[2], s[3], s[4]])?;
    layers::conv2d(tape, params, prefix, folded, 1)
}

pub(crate) fn init_arf<T: Real, R: Rng + ?Sized>(
    reg: &mut ParamRegistry<T>,
    prefix: &str,
    channels: usize,
    reduction: usize,
    rng: &mut R,
) -> Result<()> {
    let hidden = (channels / reduction.max(1)).max(1);
    for src in ARF_SOURCES {
        init_mlp(reg, &format!("{prefix}.{src}"), [channels, hidden, channels], rng)?;
    }
    init_affine(reg, &format!("{prefix}.phi"), &[channels, channels, 1, 1], true, rng)
}

pub const ARF_SOURCES: [&str; 3] = ["prev", "sem", "com"];

pub struct ArfOutput {
    pub fused: Var,
    /// `B×C` channel weights per source, in [`ARF_SOURCES`] order.
    pub attention: [Var; 3],
}

/// `φ(Σ_S σ(MLP_S(GAP(S))) ⊙ S)` over the previous, semantic and
/// completion maps.
pub fn arf_fuse<T: Real>(
    tape: &mut Tape<T>,
    params: &ParamRegistry<T>,
    prefix: &str,
    prev: Var,
    sem: Var,
    com: Var,
) -> Result<ArfOutput> {
    let shape = tape.shape(prev).to_vec();
    if tape.shape(sem) != shape.as_slice() || tape.shape(com) != shape.as_slice() {
        return Err(Error::shape(format!(
            "arf_fuse: inputs {:?}, {:?}, {:?}",
            shape,
            tape.shape(sem),
            tape.shape(com)
        )));
    }
    let mut weighted = Vec::with_capacity(3);
    let mut attention = Vec::with_capacity(3);
    for (src, x) in ARF_SOURCES.into_iter().zip([prev, sem, com]) {
        let pooled = tape.global_avg_pool(x)?;
        let logits = layers::mlp(tape, params, &format!("{prefix}.{src}"), pooled)?;
        let a = tape.sigmoid(logits);
        weighted.push(tape.scale_channels(x, a)?);
        attention.push(a);
    }
    let sum = tape.add_n(&weighted)?;
    let fused = layers::conv2d(tape, params, &format!("{prefix}.phi"), sum, 1)?;
    Ok(ArfOutput {
        fused,
        attention: [attention[0], attention[1], attention[2]],
    })
}

pub(crate) fn init_residual2d<T: Real, R: Rng + ?Sized>(
    reg: &mut ParamRegistry<T>,
    prefix: &str,
    c_in: usize,
    c_out: usize,
    stride: usize,
    rng: &mut R,
) -> Result<()> {
    init_norm(reg, &format!("{prefix}.norm1"), c_in)?;
    init_affine(reg, &format!("{prefix}.conv1"), &[c_out, c_in, 3, 3], true, rng)?;
    init_norm(reg, &format!("{prefix}.norm2"), c_out)?;
    init_affine(reg, &format!("{prefix}.conv2"), &[c_out, c_out, 3, 3], true, rng)?;
    if c_in != c_out || stride != 1 {
        init_affine(reg, &format!("{prefix}.skip"), &[c_out, c_in, 1, 1], false, rng)?;
    }
    Ok(())
}

/// 2-D residual block; the first conv and the skip carry the stride.
pub(crate) fn residual2d<T: Real>(
    tape: &mut Tape<T>,
    params: &ParamRegistry<T>,
    prefix: &str,
    x: Var,
    stride: usize,
) -> Result<Var> {
    let h = layers::channel_norm(tape, params, &format!("{prefix}.norm1"), x)?;
    let h = layers::conv2d(tape, params, &format!("{prefix}.conv1"), h, stride)?;
    let h = tape.relu(h);
    let h = layers::channel_norm(tape, params, &format!("{prefix}.norm2"), h)?;
    let h = layers::conv2d(tape, params, &format!("{prefix}.conv2"), h, 1)?;
    let skip = if params.contains(&format!("{prefix}.skip.weight")) {
        layers::conv2d(tape, params, &format!("{prefix}.skip"), x, stride)?
    } else {
        x
    };
    let y = tape.add(skip, h)?;
    Ok(tape.relu(y))
}

pub(crate) fn init_bev<T: Real, R: Rng + ?Sized>(
    reg: &mut ParamRegistry<T>,
    cfg: &ModelConfig,
    rng: &mut R,
) -> Result<()> {
    let c = cfg.bev_widths;
    let sem_in = [cfg.voxel_width, cfg.semantic_widths[0], cfg.semantic_widths[1], cfg.semantic_widths[2]];
    let z = cfg.grid.dims[2];
    for i in 0..4 {
        if cfg.semantic_branch {
            init_affine(reg, &format!("bev.sem{i}"), &[c[i], sem_in[i]], true, rng)?;
        }
        let folded = cfg.completion_widths[i] * (z >> i);
        init_affine(reg, &format!("bev.com{i}"), &[c[i], folded, 1, 1], true, rng)?;
    }
    init_affine(reg, "bev.input", &[c[0], 2 * c[0], 3, 3], true, rng)?;
    init_norm(reg, "bev.input_norm", c[0])?;
    for i in 1..4 {
        init_residual2d(reg, &format!("bev.enc{i}"), c[i - 1], c[i], 2, rng)?;
        init_arf(reg, &format!("bev.arf{i}"), c[i], cfg.arf_reduction, rng)?;
    }
    init_residual2d(reg, "bev.enc4", c[3], c[3], 1, rng)?;
    let mut width = c[3];
    for (j, &d) in cfg.decoder_widths.iter().enumerate() {
        let skip = c[2 - j];
        init_transpose2d(reg, &format!("bev.up{}", j + 1), width, d, rng)?;
        init_residual2d(reg, &format!("bev.dec{}", j + 1), d + skip, d, 1, rng)?;
        width = d;
    }
    let k = cfg.num_classes + 1;
    init_affine(reg, "bev.head", &[k * z, width, 1, 1], true, rng)
}

/// Encoder–decoder over the BEV pyramids; `sem[i]`, `com[i]` are
/// `B×C_i×(L/2^i)×(W/2^i)`. Returns `B×(C_n+1)×Z×L×W` logits.
pub fn bev_fusion_forward<T: Real>(
    tape: &mut Tape<T>,
    params: &ParamRegistry<T>,
    cfg: &ModelConfig,
    sem: &[Var],
    com: &[Var],
) -> Result<Var> {
    if sem.len() != 4 || com.len() != 4 {
        return Err(Error::invalid("bev_fusion_forward: four scales per stream"));
    }
    for i in 0..4 {
        if tape.shape(sem[i]) != tape.shape(com[i]) {
            return Err(Error::shape(format!(
                "bev_fusion_forward: scale {i} streams {:?} vs {:?}",
                tape.shape(sem[i]),
                tape.shape(com[i])
            )));
        }
    }
    let x = tape.concat(&[sem[0], com[0]], 1)?;
    let x = layers::conv2d(tape, params, "bev.input", x, 1)?;
    let x = layers::channel_norm(tape, params, "bev.input_norm", x)?;
    let mut x = tape.relu(x);
    let mut skips = vec![x];
    for i in 1..4 {
        let e = residual2d(tape, params, &format!("bev.enc{i}"), x, 2)?;
        x = arf_fuse(tape, params, &format!("bev.arf{i}"), e, sem[i], com[i])?.fused;
        skips.push(x);
    }
    x = residual2d(tape, params, "bev.enc4", x, 1)?;
    for j in 1..4 {
        let up = layers::conv_transpose2d(tape, params, &format!("bev.up{j}"), x)?;
        let cat = tape.concat(&[up, skips[3 - j]], 1)?;
        x = residual2d(tape, params, &format!("bev.dec{j}"), cat, 1)?;
    }
    let y = layers::conv2d(tape, params, "bev.head", x, 1)?;
    let s = tape.shape(y).to_vec();
    let k = cfg.num_classes + 1;
    tape.reshape(y, &[s[0], k, s[1] / k, s[2], s[3]])
}
