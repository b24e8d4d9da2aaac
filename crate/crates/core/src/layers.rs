//! Named-parameter building blocks shared by the sparse and dense networks.
//!
//! Every block comes as a pair: `init_*` registers parameters under a
//! dotted prefix, the forward function binds them on a tape by the same
//! names.

use rand::Rng;

use crate::error::Result;
use crate::real::Real;
use crate::tensor::{uniform_init, ParamRegistry, Tape, Tensor, Var};

pub(crate) fn weight_name(prefix: &str) -> String {
    format!("{prefix}.weight")
}

pub(crate) fn bias_name(prefix: &str) -> String {
    format!("{prefix}.bias")
}

/// Weight of shape `shape` (fan-in = product of all axes but the first) and
/// an optional zero bias of width `shape[0]`.
pub fn init_affine<T: Real, R: Rng + ?Sized>(
    reg: &mut ParamRegistry<T>,
    prefix: &str,
    shape: &[usize],
    bias: bool,
    rng: &mut R,
) -> Result<()> {
    let fan_in = shape[1..].iter().product();
    reg.insert(weight_name(prefix), uniform_init(shape, fan_in, rng))?;
    if bias {
        reg.insert(bias_name(prefix), Tensor::zeros(&shape[..1]))?;
    }
    Ok(())
}

/// Transposed-conv weight `C_in×C_out×2×2` plus zero bias.
pub fn init_transpose2d<T: Real, R: Rng + ?Sized>(
    reg: &mut ParamRegistry<T>,
    prefix: &str,
    c_in: usize,
    c_out: usize,
    rng: &mut R,
) -> Result<()> {
    reg.insert(weight_name(prefix), uniform_init(&[c_in, c_out, 2, 2], c_in, rng))?;
    reg.insert(bias_name(prefix), Tensor::zeros(&[c_out]))
}

/// Unit gain, zero shift.
pub fn init_norm<T: Real>(reg: &mut ParamRegistry<T>, prefix: &str, channels: usize) -> Result<()> {
    reg.insert(format!("{prefix}.gain"), Tensor::full(&[channels], T::one()))?;
    reg.insert(format!("{prefix}.shift"), Tensor::zeros(&[channels]))
}

pub(crate) fn weight<T: Real>(tape: &mut Tape<T>, params: &ParamRegistry<T>, prefix: &str) -> Result<Var> {
    tape.param(params, &weight_name(prefix))
}

pub(crate) fn bias<T: Real>(tape: &mut Tape<T>, params: &ParamRegistry<T>, prefix: &str) -> Result<Option<Var>> {
    let name = bias_name(prefix);
    if params.contains(&name) {
        tape.param(params, &name).map(Some)
    } else {
        Ok(None)
    }
}

pub(crate) fn norm_params<T: Real>(
    tape: &mut Tape<T>,
    params: &ParamRegistry<T>,
    prefix: &str,
) -> Result<(Var, Var)> {
    Ok((
        tape.param(params, &format!("{prefix}.gain"))?,
        tape.param(params, &format!("{prefix}.shift"))?,
    ))
}

pub fn linear<T: Real>(tape: &mut Tape<T>, params: &ParamRegistry<T>, prefix: &str, x: Var) -> Result<Var> {
    let w = weight(tape, params, prefix)?;
    let b = bias(tape, params, prefix)?;
    tape.linear(x, w, b)
}

/// Two-layer per-row MLP `in → hidden → out` with a ReLU between.
pub fn init_mlp<T: Real, R: Rng + ?Sized>(
    reg: &mut ParamRegistry<T>,
    prefix: &str,
    widths: [usize; 3],
    rng: &mut R,
) -> Result<()> {
    init_affine(reg, &format!("{prefix}.fc1"), &[widths[1], widths[0]], true, rng)?;
    init_affine(reg, &format!("{prefix}.fc2"), &[widths[2], widths[1]], true, rng)
}

pub fn mlp<T: Real>(tape: &mut Tape<T>, params: &ParamRegistry<T>, prefix: &str, x: Var) -> Result<Var> {
    let h = linear(tape, params, &format!("{prefix}.fc1"), x)?;
    let h = tape.relu(h);
    linear(tape, params, &format!("{prefix}.fc2"), h)
}

pub fn conv3d<T: Real>(
    tape: &mut Tape<T>,
    params: &ParamRegistry<T>,
    prefix: &str,
    x: Var,
    stride: usize,
) -> Result<Var> {
    let w = weight(tape, params, prefix)?;
    let b = bias(tape, params, prefix)?;
    let k = tape.shape(w)[2];
    tape.conv3d(x, w, b, [stride; 3], [k / 2; 3])
}

pub fn conv2d<T: Real>(
    tape: &mut Tape<T>,
    params: &ParamRegistry<T>,
    prefix: &str,
    x: Var,
    stride: usize,
) -> Result<Var> {
    let w = weight(tape, params, prefix)?;
    let b = bias(tape, params, prefix)?;
    let k = tape.shape(w)[2];
    tape.conv2d(x, w, b, [stride; 2], [k / 2; 2])
}

pub fn conv_transpose2d<T: Real>(
    tape: &mut Tape<T>,
    params: &ParamRegistry<T>,
    prefix: &str,
    x: Var,
) -> Result<Var> {
    let w = weight(tape, params, prefix)?;
    let b = bias(tape, params, prefix)?;
    tape.conv_transpose2d(x, w, b)
}

pub fn channel_norm<T: Real>(
    tape: &mut Tape<T>,
    params: &ParamRegistry<T>,
    prefix: &str,
    x: Var,
) -> Result<Var> {
    let (g, s) = norm_params(tape, params, prefix)?;
    tape.channel_norm(x, g, s)
}
