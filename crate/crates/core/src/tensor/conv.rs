//! Dense convolutions (im2col + GEMM), transposed convolution and max pooling.
//!
//! All kernels treat 2-D maps as 3-D maps of depth 1, so a single
//! implementation covers `conv2d` and `conv3d`.

use super::tape::{Tape, Var};
use super::Tensor;
use crate::error::{Error, Result};
use crate::real::{gemm, gemm_view, MatMut, MatRef, Real};

/// Upper bound on im2col buffer elements per GEMM call.
const COL_BUDGET: usize = 1 << 22;

/// Shape bookkeeping of a 3-D cross-correlation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv3dGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub input: [usize; 3],
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub padding: [usize; 3],
    pub output: [usize; 3],
}

impl Conv3dGeometry {
    pub fn new(
        batch: usize,
        in_channels: usize,
        out_channels: usize,
        input: [usize; 3],
        kernel: [usize; 3],
        stride: [usize; 3],
        padding: [usize; 3],
    ) -> Result<Self> {
        let mut output = [0; 3];
        for a in 0..3 {
            if stride[a] == 0 || kernel[a] == 0 {
                return Err(Error::invalid("conv: stride and kernel must be >= 1"));
            }
            let padded = input[a] + 2 * padding[a];
            if padded < kernel[a] {
                return Err(Error::shape(format!(
                    "conv: padded input {padded} smaller than kernel {} on axis {a}",
                    kernel[a]
                )));
            }
            output[a] = (padded - kernel[a]) / stride[a] + 1;
        }
        Ok(Self {
            batch,
            in_channels,
            out_channels,
            input,
            kernel,
            stride,
            padding,
            output,
        })
    }

    fn in_plane(&self) -> usize {
        self.input.iter().product()
    }

    fn out_plane(&self) -> usize {
        self.output.iter().product()
    }

    /// Rows of the im2col matrix: `C_in · k_d · k_h · k_w`.
    fn patch(&self) -> usize {
        self.in_channels * self.kernel.iter().product::<usize>()
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == [1, 1, 1] && self.stride == [1, 1, 1] && self.padding == [0, 0, 0]
    }

    /// Output depth slices per im2col chunk.
    fn depth_chunk(&self) -> usize {
        let per_slice = self.patch() * self.output[1] * self.output[2];
        (COL_BUDGET / per_slice.max(1)).clamp(1, self.output[0])
    }
}

/// Fills `col` (patch × cols) for output depth slices `[d0, d1)` of one sample.
fn im2col<T: Real>(g: &Conv3dGeometry, x: &[T], d0: usize, d1: usize, col: &mut [T]) {
    let [id_, ih_, iw_] = g.input;
    let [kd_, kh_, kw_] = g.kernel;
    let [sd, sh, sw] = g.stride;
    let [pd, ph, pw] = g.padding;
    let [_, oh_, ow_] = g.output;
    let cols = (d1 - d0) * oh_ * ow_;
    let mut row = 0;
    for ci in 0..g.in_channels {
        let xc = &x[ci * id_ * ih_ * iw_..(ci + 1) * id_ * ih_ * iw_];
        for kd in 0..kd_ {
            for kh in 0..kh_ {
                for kw in 0..kw_ {
                    let dst = &mut col[row * cols..(row + 1) * cols];
                    let mut o = 0;
                    for od in d0..d1 {
                        let id = (od * sd + kd) as isize - pd as isize;
                        if id < 0 || id >= id_ as isize {
                            dst[o..o + oh_ * ow_].iter_mut().for_each(|v| *v = T::zero());
                            o += oh_ * ow_;
                            continue;
                        }
                        for oh in 0..oh_ {
                            let ih = (oh * sh + kh) as isize - ph as isize;
                            let seg = &mut dst[o..o + ow_];
                            o += ow_;
                            if ih < 0 || ih >= ih_ as isize {
                                seg.iter_mut().for_each(|v| *v = T::zero());
                                continue;
                            }
                            let src = &xc[(id as usize * ih_ + ih as usize) * iw_..][..iw_];
                            fill_row(seg, src, sw, kw as isize - pw as isize);
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

/// `seg[ow] = src[ow·stride + shift]`, zero outside `src`.
#[inline]
fn fill_row<T: Real>(seg: &mut [T], src: &[T], stride: usize, shift: isize) {
    let (lo, hi) = valid_range(seg.len(), src.len(), stride, shift);
    seg[..lo].iter_mut().for_each(|v| *v = T::zero());
    seg[hi..].iter_mut().for_each(|v| *v = T::zero());
    if stride == 1 {
        let start = (lo as isize + shift) as usize;
        seg[lo..hi].copy_from_slice(&src[start..start + (hi - lo)]);
    } else {
        for (ow, v) in seg.iter_mut().enumerate().take(hi).skip(lo) {
            *v = src[(ow as isize * stride as isize + shift) as usize];
        }
    }
}

/// `src[ow·stride + shift] += seg[ow]` for in-range positions.
#[inline]
fn add_row<T: Real>(seg: &[T], src: &mut [T], stride: usize, shift: isize) {
    let (lo, hi) = valid_range(seg.len(), src.len(), stride, shift);
    if stride == 1 {
        let start = (lo as isize + shift) as usize;
        for (d, s) in src[start..start + (hi - lo)].iter_mut().zip(&seg[lo..hi]) {
            *d += *s;
        }
    } else {
        for (ow, s) in seg.iter().enumerate().take(hi).skip(lo) {
            src[(ow as isize * stride as isize + shift) as usize] += *s;
        }
    }
}

/// Range of output positions whose source index lies in `[0, len)`.
#[inline]
fn valid_range(n_out: usize, len: usize, stride: usize, shift: isize) -> (usize, usize) {
    let s = stride as isize;
    // smallest ow with ow*s + shift >= 0
    let lo = if shift >= 0 { 0 } else { ((-shift) + s - 1) / s };
    // largest ow with ow*s + shift <= len-1, plus one
    let hi = if (len as isize - 1 - shift) < 0 {
        0
    } else {
        (len as isize - 1 - shift) / s + 1
    };
    let lo = (lo as usize).min(n_out);
    let hi = (hi.max(0) as usize).min(n_out).max(lo);
    (lo, hi)
}

fn col2im<T: Real>(g: &Conv3dGeometry, col: &[T], d0: usize, d1: usize, dx: &mut [T]) {
    let [id_, ih_, iw_] = g.input;
    let [kd_, kh_, kw_] = g.kernel;
    let [sd, sh, sw] = g.stride;
    let [pd, ph, pw] = g.padding;
    let [_, oh_, ow_] = g.output;
    let cols = (d1 - d0) * oh_ * ow_;
    let mut row = 0;
    for ci in 0..g.in_channels {
        let xc = &mut dx[ci * id_ * ih_ * iw_..(ci + 1) * id_ * ih_ * iw_];
        for kd in 0..kd_ {
            for kh in 0..kh_ {
                for kw in 0..kw_ {
                    let src = &col[row * cols..(row + 1) * cols];
                    let mut o = 0;
                    for od in d0..d1 {
                        let id = (od * sd + kd) as isize - pd as isize;
                        if id < 0 || id >= id_ as isize {
                            o += oh_ * ow_;
                            continue;
                        }
                        for oh in 0..oh_ {
                            let ih = (oh * sh + kh) as isize - ph as isize;
                            let seg = &src[o..o + ow_];
                            o += ow_;
                            if ih < 0 || ih >= ih_ as isize {
                                continue;
                            }
                            let dst = &mut xc[(id as usize * ih_ + ih as usize) * iw_..][..iw_];
                            add_row(seg, dst, sw, kw as isize - pw as isize);
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

pub(crate) fn conv_forward<T: Real>(g: &Conv3dGeometry, x: &[T], w: &[T], bias: Option<&[T]>) -> Vec<T> {
    let (pin, pout, q) = (g.in_plane(), g.out_plane(), g.patch());
    let co = g.out_channels;
    let mut out = vec![T::zero(); g.batch * co * pout];
    let chunk = g.depth_chunk();
    let slice = g.output[1] * g.output[2];
    let mut col = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); q * chunk * slice]
    };
    for b in 0..g.batch {
        let xb = &x[b * g.in_channels * pin..(b + 1) * g.in_channels * pin];
        let ob = &mut out[b * co * pout..(b + 1) * co * pout];
        if g.is_pointwise() {
            gemm(false, false, co, pout, q, w, xb, T::zero(), ob);
        } else {
            let mut d0 = 0;
            while d0 < g.output[0] {
                let d1 = (d0 + chunk).min(g.output[0]);
                let cols = (d1 - d0) * slice;
                im2col(g, xb, d0, d1, &mut col[..q * cols]);
                gemm_view(
                    co,
                    q,
                    cols,
                    MatRef::new(w, q, 1),
                    MatRef::new(&col[..q * cols], cols, 1),
                    T::zero(),
                    MatMut::new(&mut ob[d0 * slice..], pout, 1),
                );
                d0 = d1;
            }
        }
        if let Some(bias) = bias {
            for (c, &bv) in bias.iter().enumerate() {
                ob[c * pout..(c + 1) * pout].iter_mut().for_each(|v| *v += bv);
            }
        }
    }
    out
}

/// Gradients of a convolution: `(dx, dw, db)`, each only when requested.
pub(crate) fn conv_backward<T: Real>(
    g: &Conv3dGeometry,
    x: &[T],
    w: &[T],
    grad: &[T],
    need: [bool; 3],
) -> (Option<Vec<T>>, Option<Vec<T>>, Option<Vec<T>>) {
    let (pin, pout, q) = (g.in_plane(), g.out_plane(), g.patch());
    let (ci, co) = (g.in_channels, g.out_channels);
    let mut dx = need[0].then(|| vec![T::zero(); g.batch * ci * pin]);
    let mut dw = need[1].then(|| vec![T::zero(); co * q]);
    let db = need[2].then(|| {
        let mut db = vec![T::zero(); co];
        for b in 0..g.batch {
            for (c, d) in db.iter_mut().enumerate() {
                let base = (b * co + c) * pout;
                *d += grad[base..base + pout].iter().copied().sum::<T>();
            }
        }
        db
    });
    if dx.is_none() && dw.is_none() {
        return (dx, dw, db);
    }
    let chunk = g.depth_chunk();
    let slice = g.output[1] * g.output[2];
    let pointwise = g.is_pointwise();
    let mut col = if pointwise { Vec::new() } else { vec![T::zero(); q * chunk * slice] };
    let mut dcol = if pointwise || dx.is_none() {
        Vec::new()
    } else {
        vec![T::zero(); q * chunk * slice]
    };
    for b in 0..g.batch {
        let xb = &x[b * ci * pin..(b + 1) * ci * pin];
        let gb = &grad[b * co * pout..(b + 1) * co * pout];
        if pointwise {
            if let Some(dw) = dw.as_mut() {
                // dW (co×ci) += G (co×P) · Xᵀ (P×ci)
                gemm_view(
                    co,
                    pout,
                    ci,
                    MatRef::new(gb, pout, 1),
                    MatRef::new(xb, 1, pout),
                    T::one(),
                    MatMut::new(dw, ci, 1),
                );
            }
            if let Some(dx) = dx.as_mut() {
                let dxb = &mut dx[b * ci * pin..(b + 1) * ci * pin];
                gemm(true, false, ci, pout, co, w, gb, T::zero(), dxb);
            }
            continue;
        }
        let mut d0 = 0;
        while d0 < g.output[0] {
            let d1 = (d0 + chunk).min(g.output[0]);
            let cols = (d1 - d0) * slice;
            let gview = MatRef::new(&gb[d0 * slice..], pout, 1);
            if let Some(dw) = dw.as_mut() {
                im2col(g, xb, d0, d1, &mut col[..q * cols]);
                gemm_view(
                    co,
                    cols,
                    q,
                    gview,
                    MatRef::new(&col[..q * cols], 1, cols),
                    T::one(),
                    MatMut::new(dw, q, 1),
                );
            }
            if let Some(dx) = dx.as_mut() {
                gemm_view(
                    q,
                    co,
                    cols,
                    MatRef::new(w, 1, q),
                    gview,
                    T::zero(),
                    MatMut::new(&mut dcol[..q * cols], cols, 1),
                );
                col2im(g, &dcol[..q * cols], d0, d1, &mut dx[b * ci * pin..(b + 1) * ci * pin]);
            }
            d0 = d1;
        }
    }
    (dx, dw, db)
}

impl<T: Real> Tape<T> {
    fn conv_impl(
        &mut self,
        op: &'static str,
        geom: Conv3dGeometry,
        out_shape: Vec<usize>,
        x: Var,
        w: Var,
        b: Option<Var>,
    ) -> Result<Var> {
        if let Some(b) = b {
            if self.shape(b) != [geom.out_channels] {
                return Err(Error::shape(format!(
                    "{op}: bias {:?} for {} output channels",
                    self.shape(b),
                    geom.out_channels
                )));
            }
        }
        let out = conv_forward(
            &geom,
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
        );
        let out = Tensor::new(out_shape, out)?;
        let inputs: Vec<Var> = [x, w].into_iter().chain(b).collect();
        Ok(self.record(op, out, &inputs, move |ctx| {
            let has_bias = ctx.inputs.len() == 3;
            let need = [ctx.needs[0], ctx.needs[1], has_bias && ctx.needs[2]];
            let (dx, dw, db) = conv_backward(
                &geom,
                ctx.inputs[0].data(),
                ctx.inputs[1].data(),
                ctx.grad.data(),
                need,
            );
            let mut grads = vec![
                dx.map(|d| Tensor::new(ctx.inputs[0].shape().to_vec(), d).unwrap()),
                dw.map(|d| Tensor::new(ctx.inputs[1].shape().to_vec(), d).unwrap()),
            ];
            if has_bias {
                grads.push(db.map(|d| Tensor::new(ctx.inputs[2].shape().to_vec(), d).unwrap()));
            }
            grads
        }))
    }

    /// Cross-correlation of `x: B×C_in×D×H×W` with `w: C_out×C_in×k_d×k_h×k_w`.
    pub fn conv3d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: [usize; 3],
        padding: [usize; 3],
    ) -> Result<Var> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if xs.len() != 5 || ws.len() != 5 || xs[1] != ws[1] {
            return Err(Error::shape(format!("conv3d: input {xs:?}, weight {ws:?}")));
        }
        let geom = Conv3dGeometry::new(
            xs[0],
            xs[1],
            ws[0],
            [xs[2], xs[3], xs[4]],
            [ws[2], ws[3], ws[4]],
            stride,
            padding,
        )?;
        let out_shape = vec![xs[0], ws[0], geom.output[0], geom.output[1], geom.output[2]];
        self.conv_impl("conv3d", geom, out_shape, x, w, b)
    }

    /// Cross-correlation of `x: B×C_in×H×W` with `w: C_out×C_in×k_h×k_w`.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: [usize; 2],
        padding: [usize; 2],
    ) -> Result<Var> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if xs.len() != 4 || ws.len() != 4 || xs[1] != ws[1] {
            return Err(Error::shape(format!("conv2d: input {xs:?}, weight {ws:?}")));
        }
        let geom = Conv3dGeometry::new(
            xs[0],
            xs[1],
            ws[0],
            [1, xs[2], xs[3]],
            [1, ws[2], ws[3]],
            [1, stride[0], stride[1]],
            [0, padding[0], padding[1]],
        )?;
        let out_shape = vec![xs[0], ws[0], geom.output[1], geom.output[2]];
        self.conv_impl("conv2d", geom, out_shape, x, w, b)
    }

    /// Stride-2, kernel-2 transposed convolution: `x: B×C_in×H×W`,
    /// `w: C_in×C_out×2×2` → `B×C_out×2H×2W`.
    pub fn conv_transpose2d(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if xs.len() != 4 || ws.len() != 4 || xs[1] != ws[0] || ws[2] != 2 || ws[3] != 2 {
            return Err(Error::shape(format!(
                "conv_transpose2d: input {xs:?}, weight {ws:?} (want C_in×C_out×2×2)"
            )));
        }
        let (bsz, ci, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let co = ws[1];
        if let Some(b) = b {
            if self.shape(b) != [co] {
                return Err(Error::shape("conv_transpose2d: bias width"));
            }
        }
        let hw = h * wd;
        let q = co * 4;
        let (xv, wv) = (self.value(x).data(), self.value(w).data());
        let mut out = vec![T::zero(); bsz * co * 4 * hw];
        let mut tmp = vec![T::zero(); q * hw];
        for bi in 0..bsz {
            // tmp (co·4 × hw) = Wᵀ · X_b
            gemm(true, false, q, hw, ci, wv, &xv[bi * ci * hw..(bi + 1) * ci * hw], T::zero(), &mut tmp);
            let ob = &mut out[bi * co * 4 * hw..(bi + 1) * co * 4 * hw];
            for c in 0..co {
                let bias = b.map_or(T::zero(), |b| self.value(b).data()[c]);
                for k in 0..4 {
                    let (di, dj) = (k / 2, k % 2);
                    let src = &tmp[(c * 4 + k) * hw..(c * 4 + k + 1) * hw];
                    for i in 0..h {
                        for j in 0..wd {
                            ob[(c * 2 * h + 2 * i + di) * 2 * wd + 2 * j + dj] = src[i * wd + j] + bias;
                        }
                    }
                }
            }
        }
        let out = Tensor::new(vec![bsz, co, 2 * h, 2 * wd], out)?;
        let inputs: Vec<Var> = [x, w].into_iter().chain(b).collect();
        Ok(self.record("conv_transpose2d", out, &inputs, move |ctx| {
            let g = ctx.grad.data();
            let (xv, wv) = (ctx.inputs[0].data(), ctx.inputs[1].data());
            let mut gt = vec![T::zero(); q * hw];
            let mut dx = ctx.needs[0].then(|| vec![T::zero(); bsz * ci * hw]);
            let mut dw = ctx.needs[1].then(|| vec![T::zero(); ci * q]);
            let mut db = (ctx.inputs.len() == 3 && ctx.needs[2]).then(|| vec![T::zero(); co]);
            for bi in 0..bsz {
                let gb = &g[bi * co * 4 * hw..(bi + 1) * co * 4 * hw];
                for c in 0..co {
                    for k in 0..4 {
                        let (di, dj) = (k / 2, k % 2);
                        let dst = &mut gt[(c * 4 + k) * hw..(c * 4 + k + 1) * hw];
                        for i in 0..h {
                            for j in 0..wd {
                                dst[i * wd + j] = gb[(c * 2 * h + 2 * i + di) * 2 * wd + 2 * j + dj];
                            }
                        }
                    }
                    if let Some(db) = db.as_mut() {
                        db[c] += gb[c * 4 * hw..(c + 1) * 4 * hw].iter().copied().sum::<T>();
                    }
                }
                if let Some(dx) = dx.as_mut() {
                    gemm(false, false, ci, hw, q, wv, &gt, T::zero(), &mut dx[bi * ci * hw..(bi + 1) * ci * hw]);
                }
                if let Some(dw) = dw.as_mut() {
                    gemm(false, true, ci, q, hw, &xv[bi * ci * hw..(bi + 1) * ci * hw], &gt, T::one(), dw);
                }
            }
            let mut grads = vec![
                dx.map(|d| Tensor::new(ctx.inputs[0].shape().to_vec(), d).unwrap()),
                dw.map(|d| Tensor::new(ctx.inputs[1].shape().to_vec(), d).unwrap()),
            ];
            if ctx.inputs.len() == 3 {
                grads.push(db.map(|d| Tensor::new(vec![co], d).unwrap()));
            }
            grads
        }))
    }

    /// 2×2×2 max pooling with stride 2 on `B×C×D×H×W`. The gradient goes to
    /// the first maximal element of each window.
    pub fn max_pool3d(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 5 || xs[2..].iter().any(|d| d % 2 != 0) {
            return Err(Error::shape(format!(
                "max_pool3d needs B×C×D×H×W with even spatial dims, got {xs:?}"
            )));
        }
        let (d, h, w) = (xs[2], xs[3], xs[4]);
        let (od, oh, ow) = (d / 2, h / 2, w / 2);
        let planes = xs[0] * xs[1];
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(planes * od * oh * ow);
        let mut arg = Vec::with_capacity(planes * od * oh * ow);
        for p in 0..planes {
            let base = p * d * h * w;
            for a in 0..od {
                for bb in 0..oh {
                    for c in 0..ow {
                        let mut best = T::neg_infinity();
                        let mut best_i = 0usize;
                        for k in 0..8 {
                            let i = base + ((2 * a + (k >> 2)) * h + 2 * bb + ((k >> 1) & 1)) * w + 2 * c + (k & 1);
                            if src[i] > best || k == 0 {
                                best = src[i];
                                best_i = i;
                            }
                        }
                        out.push(best);
                        arg.push(best_i);
                    }
                }
            }
        }
        let out = Tensor::new(vec![xs[0], xs[1], od, oh, ow], out)?;
        Ok(self.record("max_pool3d", out, &[x], move |ctx| {
            let mut dx = vec![T::zero(); ctx.inputs[0].len()];
            for (&i, &g) in arg.iter().zip(ctx.grad.data()) {
                dx[i] += g;
            }
            vec![Some(Tensor::new(xs.clone(), dx).unwrap())]
        }))
    }
}
