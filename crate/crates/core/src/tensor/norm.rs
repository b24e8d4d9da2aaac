//! Per-sample, per-channel normalization over spatial positions.

use std::sync::Arc;

use super::tape::{Tape, Var};
use super::Tensor;
use crate::error::{Error, Result};
use crate::real::Real;

pub const NORM_EPS: f64 = 1e-5;

/// Statistics of one normalized group: mean and 1/sqrt(var + eps).
#[derive(Clone, Copy)]
struct Stats<T> {
    mean: T,
    inv_std: T,
}

fn stats<T: Real>(values: impl Iterator<Item = T> + Clone, n: usize) -> Stats<T> {
    if n == 0 {
        return Stats {
            mean: T::zero(),
            inv_std: T::one(),
        };
    }
    let nf = T::from_usize(n).unwrap();
    let mean = values.clone().sum::<T>() / nf;
    let var = values.map(|v| (v - mean) * (v - mean)).sum::<T>() / nf;
    Stats {
        mean,
        inv_std: T::one() / (var + T::from_f64_lossy(NORM_EPS)).sqrt(),
    }
}

impl<T: Real> Tape<T> {
    /// Normalizes every (sample, channel) plane of `x: B×C×…` to zero mean
    /// and unit variance, then applies `gain[c]·x̂ + shift[c]`.
    pub fn channel_norm(&mut self, x: Var, gain: Var, shift: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() < 3 {
            return Err(Error::shape(format!("channel_norm needs B×C×…, got {xs:?}")));
        }
        let (b, c) = (xs[0], xs[1]);
        if self.shape(gain) != [c] || self.shape(shift) != [c] {
            return Err(Error::shape(format!(
                "channel_norm: gain {:?} / shift {:?} for {c} channels",
                self.shape(gain),
                self.shape(shift)
            )));
        }
        let n: usize = xs[2..].iter().product();
        let src = self.value(x).data();
        let (gv, sv) = (self.value(gain).data(), self.value(shift).data());
        let mut out = vec![T::zero(); src.len()];
        let mut st = Vec::with_capacity(b * c);
        for p in 0..b * c {
            let plane = &src[p * n..(p + 1) * n];
            let s = stats(plane.iter().copied(), n);
            let ch = p % c;
            for (o, &v) in out[p * n..(p + 1) * n].iter_mut().zip(plane) {
                *o = gv[ch] * (v - s.mean) * s.inv_std + sv[ch];
            }
            st.push(s);
        }
        let out = Tensor::new(xs.clone(), out)?;
        Ok(self.record("channel_norm", out, &[x, gain, shift], move |ctx| {
            let x = ctx.inputs[0].data();
            let gv = ctx.inputs[1].data();
            let g = ctx.grad.data();
            let mut dx = ctx.needs[0].then(|| vec![T::zero(); x.len()]);
            let mut dgain = vec![T::zero(); c];
            let mut dshift = vec![T::zero(); c];
            let nf = T::from_usize(n.max(1)).unwrap();
            for (p, s) in st.iter().enumerate() {
                let ch = p % c;
                let r = p * n..(p + 1) * n;
                let (mut sg, mut sgx) = (T::zero(), T::zero());
                for (&gi, &xi) in g[r.clone()].iter().zip(&x[r.clone()]) {
                    let xh = (xi - s.mean) * s.inv_std;
                    sg += gi;
                    sgx += gi * xh;
                }
                dgain[ch] += sgx;
                dshift[ch] += sg;
                if let Some(dx) = dx.as_mut() {
                    let scale = gv[ch] * s.inv_std;
                    let (mg, mgx) = (sg / nf, sgx / nf);
                    for i in r {
                        let xh = (x[i] - s.mean) * s.inv_std;
                        dx[i] = scale * (g[i] - mg - xh * mgx);
                    }
                }
            }
            vec![
                dx.map(|d| Tensor::new(xs.clone(), d).unwrap()),
                Some(Tensor::new(vec![c], dgain).unwrap()),
                Some(Tensor::new(vec![c], dshift).unwrap()),
            ]
        }))
    }

    /// Row-set variant for sparse features: `x: M×C`, where rows are grouped
    /// by `segments[row] < num_segments` (the batch index of each voxel).
    /// Each (segment, channel) column is normalized independently.
    pub fn segment_norm(
        &mut self,
        x: Var,
        segments: Arc<Vec<usize>>,
        num_segments: usize,
        gain: Var,
        shift: Var,
    ) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 2 || xs[0] != segments.len() {
            return Err(Error::shape(format!(
                "segment_norm: features {xs:?} with {} segment ids",
                segments.len()
            )));
        }
        if segments.iter().any(|&s| s >= num_segments) {
            return Err(Error::invalid("segment_norm: segment id out of range"));
        }
        let (m, c) = (xs[0], xs[1]);
        if self.shape(gain) != [c] || self.shape(shift) != [c] {
            return Err(Error::shape("segment_norm: affine width"));
        }
        let src = self.value(x).data();
        let mut rows_of: Vec<Vec<usize>> = vec![Vec::new(); num_segments];
        for (r, &s) in segments.iter().enumerate() {
            rows_of[s].push(r);
        }
        let (gv, sv) = (self.value(gain).data(), self.value(shift).data());
        let mut st = vec![
            Stats {
                mean: T::zero(),
                inv_std: T::one()
            };
            num_segments * c
        ];
        let mut out = vec![T::zero(); m * c];
        for (s, rows) in rows_of.iter().enumerate() {
            for ch in 0..c {
                let col = rows.iter().map(|&r| src[r * c + ch]);
                let stat = stats(col, rows.len());
                for &r in rows {
                    out[r * c + ch] = gv[ch] * (src[r * c + ch] - stat.mean) * stat.inv_std + sv[ch];
                }
                st[s * c + ch] = stat;
            }
        }
        let out = Tensor::new(xs.clone(), out)?;
        let rows_of = Arc::new(rows_of);
        Ok(self.record("segment_norm", out, &[x, gain, shift], move |ctx| {
            let x = ctx.inputs[0].data();
            let gv = ctx.inputs[1].data();
            let g = ctx.grad.data();
            let mut dx = ctx.needs[0].then(|| vec![T::zero(); x.len()]);
            let mut dgain = vec![T::zero(); c];
            let mut dshift = vec![T::zero(); c];
            for (s, rows) in rows_of.iter().enumerate() {
                if rows.is_empty() {
                    continue;
                }
                let nf = T::from_usize(rows.len()).unwrap();
                for ch in 0..c {
                    let stat = st[s * c + ch];
                    let (mut sg, mut sgx) = (T::zero(), T::zero());
                    for &r in rows {
                        let i = r * c + ch;
                        sg += g[i];
                        sgx += g[i] * (x[i] - stat.mean) * stat.inv_std;
                    }
                    dgain[ch] += sgx;
                    dshift[ch] += sg;
                    if let Some(dx) = dx.as_mut() {
                        let scale = gv[ch] * stat.inv_std;
                        let (mg, mgx) = (sg / nf, sgx / nf);
                        for &r in rows {
                            let i = r * c + ch;
                            let xh = (x[i] - stat.mean) * stat.inv_std;
                            dx[i] = scale * (g[i] - mg - xh * mgx);
                        }
                    }
                }
            }
            vec![
                dx.map(|d| Tensor::new(xs.clone(), d).unwrap()),
                Some(Tensor::new(vec![c], dgain).unwrap()),
                Some(Tensor::new(vec![c], dshift).unwrap()),
            ]
        }))
    }
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn constant_channel_normalizes_to_zero() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::<f64>::full(&[2, 3, 4, 4], 5.0));
        let g = t.leaf(Tensor::full(&[3], 1.0));
        let s = t.leaf(Tensor::zeros(&[3]));
        let y = t.channel_norm(x, g, s).unwrap();
        assert!(t.value(y).data().iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn output_statistics_follow_affine() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let gains = [2.0, -0.5];
        let shifts = [1.0, -3.0];
        let mut t = Tape::new();
        let x = t.leaf(Tensor::<f64>::from_fn(&[2, 2, 10, 10], |_| rng.gen_range(-4.0..9.0)));
        let g = t.leaf(Tensor::new(vec![2], gains.to_vec()).unwrap());
        let s = t.leaf(Tensor::new(vec![2], shifts.to_vec()).unwrap());
        let y = t.channel_norm(x, g, s).unwrap();
        for (p, plane) in t.value(y).data().chunks(100).enumerate() {
            let c = p % 2;
            let mean = plane.iter().sum::<f64>() / 100.0;
            let std = (plane.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 100.0).sqrt();
            assert!((mean - shifts[c]).abs() < 1e-9);
            assert!((std - gains[c].abs()).abs() < 1e-4);
        }
    }

    #[test]
    fn segment_norm_matches_dense_norm_per_sample() {
        // Two samples of 6 rows each, laid out as sparse rows; compare with
        // channel_norm on the equivalent B×C×6 dense layout.
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (c, n) = (3, 6);
        let dense = Tensor::<f64>::from_fn(&[2, c, n], |_| rng.gen_range(-1.0..1.0));
        let mut rows = vec![0.0; 2 * n * c];
        let mut seg = vec![0usize; 2 * n];
        for b in 0..2 {
            for i in 0..n {
                seg[b * n + i] = b;
                for ch in 0..c {
                    rows[(b * n + i) * c + ch] = dense.data()[(b * c + ch) * n + i];
                }
            }
        }
        let mut t = Tape::new();
        let g = t.leaf(Tensor::new(vec![c], vec![1.5, 0.5, -1.0]).unwrap());
        let s = t.leaf(Tensor::new(vec![c], vec![0.1, 0.2, 0.3]).unwrap());
        let xd = t.leaf(dense.clone());
        let yd = t.channel_norm(xd, g, s).unwrap();
        let xs = t.leaf(Tensor::new(vec![2 * n, c], rows).unwrap());
        let ys = t.segment_norm(xs, Arc::new(seg), 2, g, s).unwrap();
        for b in 0..2 {
            for i in 0..n {
                for ch in 0..c {
                    let a = t.value(ys).data()[(b * n + i) * c + ch];
                    let d = t.value(yd).data()[(b * c + ch) * n + i];
                    assert!((a - d).abs() < 1e-12);
                }
            }
        }
    }
}
