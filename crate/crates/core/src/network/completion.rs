//! Dense completion branch: 7³ input layer, then three pooled residual
//! stages with per-voxel occupancy heads.

use rand::Rng;

use super::ModelConfig;
use crate::error::{Error, Result};
use crate::layers::{self, init_affine, init_norm};
use crate::real::Real;
use crate::tensor::{ParamRegistry, Tape, Var};

pub(crate) fn init_residual3d<T: Real, R: Rng + ?Sized>(
    reg: &mut ParamRegistry<T>,
    prefix: &str,
    c_in: usize,
    c_out: usize,
    rng: &mut R,
) -> Result<()> {
    init_norm(reg, &format!("{prefix}.norm1"), c_in)?;
    init_affine(reg, &format!("{prefix}.conv1"), &[c_out, c_in, 3, 3, 3], true, rng)?;
    init_norm(reg, &format!("{prefix}.norm2"), c_out)?;
    init_affine(reg, &format!("{prefix}.conv2"), &[c_out, c_out, 3, 3, 3], true, rng)?;
    if c_in != c_out {
        init_affine(reg, &format!("{prefix}.skip"), &[c_out, c_in, 1, 1, 1], false, rng)?;
    }
    Ok(())
}

/// `relu(skip(x) + conv2(norm2(relu(conv1(norm1(x))))))` with 3³ convs.
pub(crate) fn residual3d<T: Real>(tape: &mut Tape<T>, params: &ParamRegistry<T>, prefix: &str, x: Var) -> Result<Var> {
    let h = layers::channel_norm(tape, params, &format!("{prefix}.norm1"), x)?;
    let h = layers::conv3d(tape, params, &format!("{prefix}.conv1"), h, 1)?;
    let h = tape.relu(h);
    let h = layers::channel_norm(tape, params, &format!("{prefix}.norm2"), h)?;
    let h = layers::conv3d(tape, params, &format!("{prefix}.conv2"), h, 1)?;
    let skip = if params.contains(&format!("{prefix}.skip.weight")) {
        layers::conv3d(tape, params, &format!("{prefix}.skip"), x, 1)?
    } else {
        x
    };
    let y = tape.add(skip, h)?;
    Ok(tape.relu(y))
}

pub(crate) fn init_completion<T: Real, R: Rng + ?Sized>(
    reg: &mut ParamRegistry<T>,
    cfg: &ModelConfig,
    rng: &mut R,
) -> Result<()> {
    let g = cfg.completion_widths;
    init_affine(reg, "com.input", &[g[0], 1, 7, 7, 7], true, rng)?;
    init_norm(reg, "com.input_norm", g[0])?;
    for i in 1..4 {
        init_residual3d(reg, &format!("com.block{i}"), g[i - 1], g[i], rng)?;
        init_affine(reg, &format!("com.aux{i}.fc1"), &[g[i], g[i], 1, 1, 1], true, rng)?;
        init_affine(reg, &format!("com.aux{i}.fc2"), &[1, g[i], 1, 1, 1], true, rng)?;
    }
    Ok(())
}

pub struct CompletionFeatures {
    /// `F_c0..F_c3`, each `B×G_i×Z_i×X_i×Y_i`.
    pub features: Vec<Var>,
    /// Occupancy logits `B×1×Z_i×X_i×Y_i` at scales 1/2, 1/4, 1/8; empty
    /// when the heads are not evaluated.
    pub aux_logits: Vec<Var>,
}

/// `occupancy: B×1×Z×X×Y`.
pub fn completion_branch<T: Real>(
    tape: &mut Tape<T>,
    params: &ParamRegistry<T>,
    occupancy: Var,
    with_heads: bool,
) -> Result<CompletionFeatures> {
    let s = tape.shape(occupancy);
    if s.len() != 5 || s[1] != 1 {
        return Err(Error::shape(format!(
            "completion_branch: expected B×1×Z×X×Y occupancy, got {s:?}"
        )));
    }
    let x = layers::conv3d(tape, params, "com.input", occupancy, 1)?;
    let x = layers::channel_norm(tape, params, "com.input_norm", x)?;
    let mut x = tape.relu(x);
    let mut features = vec![x];
    let mut aux_logits = Vec::new();
    for i in 1..4 {
        let p = tape.max_pool3d(x)?;
        x = residual3d(tape, params, &format!("com.block{i}"), p)?;
        features.push(x);
        if with_heads {
            let h = layers::conv3d(tape, params, &format!("com.aux{i}.fc1"), x, 1)?;
            let h = tape.relu(h);
            aux_logits.push(layers::conv3d(tape, params, &format!("com.aux{i}.fc2"), h, 1)?);
        }
    }
    Ok(CompletionFeatures { features, aux_logits })
}
