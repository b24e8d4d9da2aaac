//! Elementwise, reduction, shape and dense linear-algebra operations.

use super::tape::{Tape, Var};
use super::{same_shape, Tensor};
use crate::error::{Error, Result};
use crate::real::{gemm, Real};

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

fn check_axis(op: &str, shape: &[usize], axis: usize) -> Result<()> {
    if axis >= shape.len() {
        return Err(Error::shape(format!("{op}: axis {axis} out of range for {shape:?}")));
    }
    Ok(())
}

fn permute_data<T: Real>(x: &Tensor<T>, perm: &[usize]) -> Tensor<T> {
    let in_shape = x.shape();
    let in_strides = strides(in_shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
    let rank = perm.len();
    let n = x.len();
    let mut out = Vec::with_capacity(n);
    let mut idx = vec![0usize; rank];
    let src = x.data();
    let step: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut offset = 0usize;
    for _ in 0..n {
        out.push(src[offset]);
        for d in (0..rank).rev() {
            idx[d] += 1;
            offset += step[d];
            if idx[d] < out_shape[d] {
                break;
            }
            offset -= step[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    Tensor::new(out_shape, out).expect("permute keeps element count")
}

impl<T: Real> Tape<T> {
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("add", self.value(a), self.value(b))?;
        let out = Tensor::new(
            self.shape(a).to_vec(),
            self.value(a)
                .data()
                .iter()
                .zip(self.value(b).data())
                .map(|(x, y)| *x + *y)
                .collect(),
        )?;
        Ok(self.record("add", out, &[a, b], |ctx| {
            vec![Some(ctx.grad.clone()), Some(ctx.grad.clone())]
        }))
    }

    /// Sum of any number of same-shaped values.
    pub fn add_n(&mut self, vars: &[Var]) -> Result<Var> {
        let (&first, rest) = vars
            .split_first()
            .ok_or_else(|| Error::invalid("add_n of nothing"))?;
        rest.iter().try_fold(first, |acc, &v| self.add(acc, v))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("sub", self.value(a), self.value(b))?;
        let out = Tensor::new(
            self.shape(a).to_vec(),
            self.value(a)
                .data()
                .iter()
                .zip(self.value(b).data())
                .map(|(x, y)| *x - *y)
                .collect(),
        )?;
        Ok(self.record("sub", out, &[a, b], |ctx| {
            vec![Some(ctx.grad.clone()), Some(ctx.grad.map(|g| -g))]
        }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("mul", self.value(a), self.value(b))?;
        let out = Tensor::new(
            self.shape(a).to_vec(),
            self.value(a)
                .data()
                .iter()
                .zip(self.value(b).data())
                .map(|(x, y)| *x * *y)
                .collect(),
        )?;
        Ok(self.record("mul", out, &[a, b], |ctx| {
            let g = ctx.grad.data();
            let (x, y) = (ctx.inputs[0], ctx.inputs[1]);
            let ga = ctx.needs[0].then(|| {
                Tensor::new(
                    x.shape().to_vec(),
                    g.iter().zip(y.data()).map(|(g, y)| *g * *y).collect(),
                )
                .unwrap()
            });
            let gb = ctx.needs[1].then(|| {
                Tensor::new(
                    y.shape().to_vec(),
                    g.iter().zip(x.data()).map(|(g, x)| *g * *x).collect(),
                )
                .unwrap()
            });
            vec![ga, gb]
        }))
    }

    pub fn scalar_mul(&mut self, a: Var, s: T) -> Var {
        self.affine(a, s, T::zero())
    }

    /// `scale · a + offset`, elementwise.
    pub fn affine(&mut self, a: Var, scale: T, offset: T) -> Var {
        let out = self.value(a).map(|v| scale * v + offset);
        self.record("affine", out, &[a], move |ctx| {
            vec![Some(ctx.grad.map(|g| g * scale))]
        })
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|v| if v > T::zero() { v } else { T::zero() });
        self.record("relu", out, &[a], |ctx| {
            let g = Tensor::new(
                ctx.grad.shape().to_vec(),
                ctx.grad
                    .data()
                    .iter()
                    .zip(ctx.inputs[0].data())
                    .map(|(&g, &x)| if x > T::zero() { g } else { T::zero() })
                    .collect(),
            )
            .unwrap();
            vec![Some(g)]
        })
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(sigmoid);
        self.record("sigmoid", out, &[a], |ctx| {
            let g = Tensor::new(
                ctx.grad.shape().to_vec(),
                ctx.grad
                    .data()
                    .iter()
                    .zip(ctx.output.data())
                    .map(|(&g, &y)| g * y * (T::one() - y))
                    .collect(),
            )
            .unwrap();
            vec![Some(g)]
        })
    }

    /// Sum of all elements, shape `[1]`.
    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        self.record("sum", out, &[a], |ctx| {
            vec![Some(Tensor::full(ctx.inputs[0].shape(), ctx.grad.item()))]
        })
    }

    /// Mean of all elements; 0 for an empty tensor.
    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len();
        if n == 0 {
            return self.scalar_mul_sum_empty(a);
        }
        let inv = T::one() / T::from_usize(n).unwrap();
        let s = self.sum(a);
        self.scalar_mul(s, inv)
    }

    fn scalar_mul_sum_empty(&mut self, a: Var) -> Var {
        self.record("mean", Tensor::scalar(T::zero()), &[a], |ctx| {
            vec![Some(Tensor::zeros(ctx.inputs[0].shape()))]
        })
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let k = *x
            .shape()
            .last()
            .ok_or_else(|| Error::shape("softmax of a rank-0 tensor"))?;
        let out = Tensor::new(x.shape().to_vec(), softmax_rows(x.data(), k))?;
        Ok(self.record("softmax", out, &[a], move |ctx| {
            let y = ctx.output.data();
            let g = ctx.grad.data();
            let mut dx = vec![T::zero(); y.len()];
            for r in 0..y.len() / k.max(1) {
                let row = r * k..(r + 1) * k;
                let dot: T = y[row.clone()]
                    .iter()
                    .zip(&g[row.clone()])
                    .map(|(a, b)| *a * *b)
                    .sum();
                for i in row {
                    dx[i] = y[i] * (g[i] - dot);
                }
            }
            vec![Some(Tensor::new(ctx.output.shape().to_vec(), dx).unwrap())]
        }))
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let k = *x
            .shape()
            .last()
            .ok_or_else(|| Error::shape("log_softmax of a rank-0 tensor"))?;
        let out = Tensor::new(x.shape().to_vec(), log_softmax_rows(x.data(), k))?;
        Ok(self.record("log_softmax", out, &[a], move |ctx| {
            let y = ctx.output.data();
            let g = ctx.grad.data();
            let mut dx = vec![T::zero(); y.len()];
            for r in 0..y.len() / k.max(1) {
                let row = r * k..(r + 1) * k;
                let gs: T = g[row.clone()].iter().copied().sum();
                for i in row {
                    dx[i] = g[i] - y[i].exp() * gs;
                }
            }
            vec![Some(Tensor::new(ctx.output.shape().to_vec(), dx).unwrap())]
        }))
    }

    /// `x · wᵀ + b` for `x: M×K`, `w: N×K`, `b: N`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xs, ws) = (self.shape(x), self.shape(w));
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] {
            return Err(Error::shape(format!("linear: input {xs:?}, weight {ws:?}")));
        }
        let (m, k, n) = (xs[0], xs[1], ws[0]);
        if let Some(b) = b {
            if self.shape(b) != [n] {
                return Err(Error::shape(format!(
                    "linear: bias {:?} for {n} outputs",
                    self.shape(b)
                )));
            }
        }
        let mut out = vec![T::zero(); m * n];
        if let Some(b) = b {
            let bias = self.value(b).data();
            for r in 0..m {
                out[r * n..(r + 1) * n].copy_from_slice(bias);
            }
        }
        gemm(
            false,
            true,
            m,
            n,
            k,
            self.value(x).data(),
            self.value(w).data(),
            T::one(),
            &mut out,
        );
        let out = Tensor::new(vec![m, n], out)?;
        let inputs: Vec<Var> = std::iter::once(x).chain(std::iter::once(w)).chain(b).collect();
        Ok(self.record("linear", out, &inputs, move |ctx| {
            let g = ctx.grad.data();
            let (xv, wv) = (ctx.inputs[0], ctx.inputs[1]);
            let dx = ctx.needs[0].then(|| {
                let mut dx = vec![T::zero(); m * k];
                gemm(false, false, m, k, n, g, wv.data(), T::zero(), &mut dx);
                Tensor::new(vec![m, k], dx).unwrap()
            });
            let dw = ctx.needs[1].then(|| {
                let mut dw = vec![T::zero(); n * k];
                gemm(true, false, n, k, m, g, xv.data(), T::zero(), &mut dw);
                Tensor::new(vec![n, k], dw).unwrap()
            });
            let mut grads = vec![dx, dw];
            if ctx.inputs.len() == 3 {
                let db = ctx.needs[2].then(|| {
                    let mut db = vec![T::zero(); n];
                    for r in 0..m {
                        for (d, &gv) in db.iter_mut().zip(&g[r * n..(r + 1) * n]) {
                            *d += gv;
                        }
                    }
                    Tensor::new(vec![n], db).unwrap()
                });
                grads.push(db);
            }
            grads
        }))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshaped(shape)?;
        Ok(self.record("reshape", out, &[a], |ctx| {
            vec![Some(
                ctx.grad
                    .clone()
                    .reshaped(ctx.inputs[0].shape())
                    .expect("reshape grad"),
            )]
        }))
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let rank = self.value(a).rank();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::shape(format!(
                "permute: {perm:?} is not a permutation of rank {rank}"
            )));
        }
        let out = permute_data(self.value(a), perm);
        let mut inverse = vec![0; rank];
        for (i, &p) in perm.iter().enumerate() {
            inverse[p] = i;
        }
        Ok(self.record("permute", out, &[a], move |ctx| {
            vec![Some(permute_data(ctx.grad, &inverse))]
        }))
    }

    pub fn concat(&mut self, vars: &[Var], axis: usize) -> Result<Var> {
        let first = self
            .value(*vars.first().ok_or_else(|| Error::invalid("concat of nothing"))?)
            .shape()
            .to_vec();
        check_axis("concat", &first, axis)?;
        let mut widths = Vec::with_capacity(vars.len());
        for &v in vars {
            let s = self.shape(v);
            let ok = s.len() == first.len()
                && s.iter()
                    .zip(&first)
                    .enumerate()
                    .all(|(d, (a, b))| d == axis || a == b);
            if !ok {
                return Err(Error::shape(format!("concat: {s:?} vs {first:?} on axis {axis}")));
            }
            widths.push(s[axis]);
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let total: usize = widths.iter().sum();
        let mut out_shape = first.clone();
        out_shape[axis] = total;
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (&v, &w) in vars.iter().zip(&widths) {
                let src = self.value(v).data();
                out.extend_from_slice(&src[o * w * inner..(o + 1) * w * inner]);
            }
        }
        let out = Tensor::new(out_shape, out)?;
        Ok(self.record("concat", out, vars, move |ctx| {
            let g = ctx.grad.data();
            let mut start = 0;
            widths
                .iter()
                .enumerate()
                .map(|(i, &w)| {
                    let r = ctx.needs[i].then(|| {
                        let mut d = Vec::with_capacity(outer * w * inner);
                        for o in 0..outer {
                            let base = o * total * inner + start * inner;
                            d.extend_from_slice(&g[base..base + w * inner]);
                        }
                        Tensor::new(ctx.inputs[i].shape().to_vec(), d).unwrap()
                    });
                    start += w;
                    r
                })
                .collect()
        }))
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        check_axis("narrow", &shape, axis)?;
        if start + len > shape[axis] {
            return Err(Error::shape(format!(
                "narrow: [{start}, {}) exceeds axis {axis} of {shape:?}",
                start + len
            )));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let full = shape[axis];
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * full + start) * inner;
            out.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut out_shape = shape.clone();
        out_shape[axis] = len;
        let out = Tensor::new(out_shape, out)?;
        Ok(self.record("narrow", out, &[a], move |ctx| {
            let g = ctx.grad.data();
            let mut d = vec![T::zero(); outer * full * inner];
            for o in 0..outer {
                let base = (o * full + start) * inner;
                d[base..base + len * inner].copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
            }
            vec![Some(Tensor::new(shape.clone(), d).unwrap())]
        }))
    }

    /// Multiplies `x` by `a` broadcast over the trailing axes; `a`'s shape
    /// must be a prefix of `x`'s (e.g. `B×C` weights on a `B×C×H×W` map).
    pub fn scale_channels(&mut self, x: Var, a: Var) -> Result<Var> {
        let (xs, as_) = (self.shape(x), self.shape(a));
        if as_.len() > xs.len() || xs[..as_.len()] != *as_ {
            return Err(Error::shape(format!("scale_channels: {as_:?} is not a prefix of {xs:?}")));
        }
        let groups = self.value(a).len();
        let inner = self.value(x).len() / groups.max(1);
        let (xv, av) = (self.value(x).data(), self.value(a).data());
        let mut out = Vec::with_capacity(xv.len());
        for (gi, &s) in av.iter().enumerate() {
            out.extend(xv[gi * inner..(gi + 1) * inner].iter().map(|&v| v * s));
        }
        let out = Tensor::new(xs.to_vec(), out)?;
        Ok(self.record("scale_channels", out, &[x, a], move |ctx| {
            let g = ctx.grad.data();
            let (xv, av) = (ctx.inputs[0], ctx.inputs[1]);
            let dx = ctx.needs[0].then(|| {
                let mut d = Vec::with_capacity(g.len());
                for (gi, &s) in av.data().iter().enumerate() {
                    d.extend(g[gi * inner..(gi + 1) * inner].iter().map(|&v| v * s));
                }
                Tensor::new(xv.shape().to_vec(), d).unwrap()
            });
            let da = ctx.needs[1].then(|| {
                let d = (0..groups)
                    .map(|gi| {
                        let r = gi * inner..(gi + 1) * inner;
                        g[r.clone()]
                            .iter()
                            .zip(&xv.data()[r])
                            .map(|(a, b)| *a * *b)
                            .sum()
                    })
                    .collect();
                Tensor::new(av.shape().to_vec(), d).unwrap()
            });
            vec![dx, da]
        }))
    }

    /// Mean over all axes after the second: `B×C×… → B×C`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() < 3 {
            return Err(Error::shape(format!("global_avg_pool needs rank >= 3, got {xs:?}")));
        }
        let groups = xs[0] * xs[1];
        let inner: usize = xs[2..].iter().product();
        let inv = T::one() / T::from_usize(inner.max(1)).unwrap();
        let src = self.value(x).data();
        let out = (0..groups)
            .map(|g| src[g * inner..(g + 1) * inner].iter().copied().sum::<T>() * inv)
            .collect();
        let out = Tensor::new(vec![xs[0], xs[1]], out)?;
        Ok(self.record("global_avg_pool", out, &[x], move |ctx| {
            let mut d = Vec::with_capacity(groups * inner);
            for &g in ctx.grad.data() {
                d.extend(std::iter::repeat(g * inv).take(inner));
            }
            vec![Some(Tensor::new(xs.clone(), d).unwrap())]
        }))
    }
}

pub(crate) fn sigmoid<T: Real>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

pub(crate) fn softmax_rows<T: Real>(x: &[T], k: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    if k == 0 {
        return out;
    }
    for (src, dst) in x.chunks(k).zip(out.chunks_mut(k)) {
        let m = src.iter().copied().fold(T::neg_infinity(), T::max);
        let mut s = T::zero();
        for (d, &v) in dst.iter_mut().zip(src) {
            *d = (v - m).exp();
            s += *d;
        }
        dst.iter_mut().for_each(|d| *d /= s);
    }
    out
}

pub(crate) fn log_softmax_rows<T: Real>(x: &[T], k: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    if k == 0 {
        return out;
    }
    for (src, dst) in x.chunks(k).zip(out.chunks_mut(k)) {
        let m = src.iter().copied().fold(T::neg_infinity(), T::max);
        let lse = m + src.iter().map(|&v| (v - m).exp()).sum::<T>().ln();
        for (d, &v) in dst.iter_mut().zip(src) {
            *d = v - lse;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), v.to_vec()).unwrap()
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::<f64>::zeros(&[2, 4]));
        let y = tape.softmax(x).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn log_softmax_is_log_of_softmax() {
        let mut tape = Tape::new();
        let vals: Vec<f64> = (0..15).map(|i| ((i * 7) % 11) as f64 - 5.0).collect();
        let x = tape.leaf(t(&[3, 5], &vals));
        let y = tape.softmax(x).unwrap();
        let z = tape.log_softmax(x).unwrap();
        for row in tape.value(y).data().chunks(5) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        for (a, b) in tape.value(y).data().iter().zip(tape.value(z).data()) {
            assert!((a.ln() - b).abs() < 1e-12);
        }
    }

    #[test]
    fn relu_examples() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[4], &[-2.0, -0.1, 0.3, 5.0]));
        let y = tape.relu(x);
        assert_eq!(tape.value(y).data(), &[0.0, 0.0, 0.3, 5.0]);
    }

    #[test]
    fn gap_of_constant_map() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::<f64>::full(&[2, 3, 4, 5], 1.75));
        let y = tape.global_avg_pool(x).unwrap();
        assert_eq!(tape.shape(y), &[2, 3]);
        assert!(tape.value(y).data().iter().all(|&v| (v - 1.75).abs() < 1e-15));
    }

    #[test]
    fn linear_matches_manual() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let w = tape.leaf(t(&[2, 3], &[1.0, 0.0, -1.0, 0.5, 0.5, 0.5]));
        let b = tape.leaf(t(&[2], &[10.0, 20.0]));
        let y = tape.linear(x, w, Some(b)).unwrap();
        assert_eq!(tape.value(y).data(), &[8.0, 23.0, 8.0, 27.5]);
    }

    #[test]
    fn permute_and_back_is_identity() {
        let mut tape = Tape::new();
        let vals: Vec<f64> = (0..24).map(f64::from).collect();
        let x = tape.leaf(t(&[2, 3, 4], &vals));
        let y = tape.permute(x, &[2, 0, 1]).unwrap();
        assert_eq!(tape.shape(y), &[4, 2, 3]);
        // y[k, i, j] = x[i, j, k]
        assert_eq!(tape.value(y).data()[1 * 6 + 1 * 3 + 2], vals[(1 * 3 + 2) * 4 + 1]);
        let z = tape.permute(y, &[1, 2, 0]).unwrap();
        assert_eq!(tape.value(z).data(), &vals[..]);
        assert!(tape.permute(x, &[0, 0, 1]).is_err());
    }

    #[test]
    fn concat_and_narrow_invert() {
        let mut tape = Tape::new();
        let a = tape.leaf(t(&[2, 1, 2], &[1.0, 2.0, 3.0, 4.0]));
        let b = tape.leaf(t(&[2, 2, 2], &[5.0, 6.0, 7.0, 8.0, 9.0, 10.0, 11.0, 12.0]));
        let c = tape.concat(&[a, b], 1).unwrap();
        assert_eq!(
            tape.value(c).data(),
            &[1.0, 2.0, 5.0, 6.0, 7.0, 8.0, 3.0, 4.0, 9.0, 10.0, 11.0, 12.0]
        );
        let back = tape.narrow(c, 1, 1, 2).unwrap();
        assert_eq!(tape.value(back), tape.value(b));
        assert!(tape.narrow(c, 1, 2, 2).is_err());
    }

    #[test]
    fn scale_channels_broadcasts() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::<f64>::full(&[1, 2, 2, 2], 1.0));
        let a = tape.leaf(t(&[1, 2], &[0.5, 3.0]));
        let y = tape.scale_channels(x, a).unwrap();
        assert_eq!(tape.value(y).data(), &[0.5, 0.5, 0.5, 0.5, 3.0, 3.0, 3.0, 3.0]);
        let bad = tape.leaf(t(&[2], &[1.0, 1.0]));
        assert!(tape.scale_channels(x, bad).is_err());
    }

    #[test]
    fn sigmoid_is_stable() {
        assert_eq!(sigmoid(0.0f64), 0.5);
        assert!(sigmoid(-800.0f64) >= 0.0);
        assert!((sigmoid(800.0f64) - 1.0).abs() < 1e-15);
    }
}
