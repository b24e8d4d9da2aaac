//! Row gather/scatter and rulebook convolution on feature matrices.

use std::sync::Arc;

use super::Rulebook;
use crate::error::{Error, Result};
use crate::grid::Reduce;
use crate::real::{gemm_view, MatMut, MatRef, Real};
use crate::tensor::{Tape, Tensor, Var};

fn matrix_shape<T: Real>(tape: &Tape<T>, op: &str, x: Var) -> Result<(usize, usize)> {
    match *tape.shape(x) {
        [m, c] => Ok((m, c)),
        ref s => Err(Error::shape(format!("{op}: expected a row matrix, got {s:?}"))),
    }
}

fn gather_into<T: Real>(src: &[T], width: usize, rows: impl Iterator<Item = usize>, dst: &mut Vec<T>) {
    dst.clear();
    for r in rows {
        dst.extend_from_slice(&src[r * width..(r + 1) * width]);
    }
}

impl<T: Real> Tape<T> {
    /// `out[r] = x[index[r]]`.
    pub fn gather_rows(&mut self, x: Var, index: Arc<Vec<usize>>) -> Result<Var> {
        let (m, c) = matrix_shape(self, "gather_rows", x)?;
        if index.iter().any(|&i| i >= m) {
            return Err(Error::invalid("gather_rows: row index out of range"));
        }
        let mut out = Vec::with_capacity(index.len() * c);
        gather_into(self.value(x).data(), c, index.iter().copied(), &mut out);
        let out = Tensor::new(vec![index.len(), c], out)?;
        Ok(self.record("gather_rows", out, &[x], move |ctx| {
            let g = ctx.grad.data();
            let mut d = vec![T::zero(); m * c];
            for (r, &i) in index.iter().enumerate() {
                for (a, &b) in d[i * c..(i + 1) * c].iter_mut().zip(&g[r * c..(r + 1) * c]) {
                    *a += b;
                }
            }
            vec![Some(Tensor::new(vec![m, c], d).unwrap())]
        }))
    }

    /// Reduces rows of `x` into `num_groups` output rows, row `r` going to
    /// `groups[r]`. Max routes the gradient to the first maximal row; empty
    /// groups produce zeros.
    pub fn scatter_rows(&mut self, x: Var, groups: Arc<Vec<usize>>, num_groups: usize, reduce: Reduce) -> Result<Var> {
        let (m, c) = matrix_shape(self, "scatter_rows", x)?;
        if groups.len() != m || groups.iter().any(|&g| g >= num_groups) {
            return Err(Error::invalid("scatter_rows: group ids do not match rows"));
        }
        let src = self.value(x).data();
        let mut counts = vec![0usize; num_groups];
        for &g in groups.iter() {
            counts[g] += 1;
        }
        let mut out = vec![T::zero(); num_groups * c];
        let mut arg = Vec::new();
        match reduce {
            Reduce::Sum | Reduce::Mean => {
                for (r, &g) in groups.iter().enumerate() {
                    for (o, &v) in out[g * c..(g + 1) * c].iter_mut().zip(&src[r * c..(r + 1) * c]) {
                        *o += v;
                    }
                }
                if reduce == Reduce::Mean {
                    for (g, &n) in counts.iter().enumerate() {
                        if n > 0 {
                            let inv = T::one() / T::from_usize(n).unwrap();
                            out[g * c..(g + 1) * c].iter_mut().for_each(|v| *v *= inv);
                        }
                    }
                }
            }
            Reduce::Max => {
                arg = vec![usize::MAX; num_groups * c];
                for (r, &g) in groups.iter().enumerate() {
                    for ch in 0..c {
                        let v = src[r * c + ch];
                        let slot = g * c + ch;
                        if arg[slot] == usize::MAX || v > out[slot] {
                            out[slot] = v;
                            arg[slot] = r;
                        }
                    }
                }
            }
        }
        let out = Tensor::new(vec![num_groups, c], out)?;
        Ok(self.record("scatter_rows", out, &[x], move |ctx| {
            let g = ctx.grad.data();
            let mut d = vec![T::zero(); m * c];
            match reduce {
                Reduce::Max => {
                    for (slot, &r) in arg.iter().enumerate() {
                        if r != usize::MAX {
                            d[r * c + slot % c] += g[slot];
                        }
                    }
                }
                Reduce::Sum | Reduce::Mean => {
                    for (r, &grp) in groups.iter().enumerate() {
                        let scale = if reduce == Reduce::Mean {
                            T::one() / T::from_usize(counts[grp]).unwrap()
                        } else {
                            T::one()
                        };
                        for ch in 0..c {
                            d[r * c + ch] = g[grp * c + ch] * scale;
                        }
                    }
                }
            }
            vec![Some(Tensor::new(vec![m, c], d).unwrap())]
        }))
    }

    /// Writes row `r` of `x: M×C` into a zero `B×C×cells` grid at
    /// `(targets[r].0, ·, targets[r].1)`, then reshapes the cell axis to
    /// `spatial`. Targets must be distinct.
    pub fn rows_to_grid(
        &mut self,
        x: Var,
        targets: Arc<Vec<(usize, usize)>>,
        batch_size: usize,
        spatial: &[usize],
    ) -> Result<Var> {
        let (m, c) = matrix_shape(self, "rows_to_grid", x)?;
        let cells: usize = spatial.iter().product();
        if targets.len() != m || targets.iter().any(|&(b, t)| b >= batch_size || t >= cells) {
            return Err(Error::invalid("rows_to_grid: targets do not match rows"));
        }
        let src = self.value(x).data();
        let mut out = vec![T::zero(); batch_size * c * cells];
        for (r, &(b, t)) in targets.iter().enumerate() {
            for ch in 0..c {
                out[(b * c + ch) * cells + t] = src[r * c + ch];
            }
        }
        let mut shape = vec![batch_size, c];
        shape.extend_from_slice(spatial);
        let out = Tensor::new(shape, out)?;
        Ok(self.record("rows_to_grid", out, &[x], move |ctx| {
            let g = ctx.grad.data();
            let mut d = vec![T::zero(); m * c];
            for (r, &(b, t)) in targets.iter().enumerate() {
                for ch in 0..c {
                    d[r * c + ch] = g[(b * c + ch) * cells + t];
                }
            }
            vec![Some(Tensor::new(vec![m, c], d).unwrap())]
        }))
    }

    /// Rulebook convolution: `out[j] = b + Σ_δ Σ_{(i,j) ∈ pairs[δ]} W_δ · x[i]`
    /// with `w: C_out×C_in×k×k×k`.
    pub fn sparse_conv(&mut self, x: Var, w: Var, b: Option<Var>, rulebook: Arc<Rulebook>) -> Result<Var> {
        let (m, cin) = matrix_shape(self, "sparse_conv", x)?;
        let ws = self.shape(w).to_vec();
        let k = rulebook.kernel_size;
        if ws.len() != 5 || ws[1..] != [cin, k, k, k] {
            return Err(Error::shape(format!(
                "sparse_conv: weight {ws:?} for {cin} input channels and kernel {k}"
            )));
        }
        if m != rulebook.num_inputs {
            return Err(Error::shape(format!(
                "sparse_conv: {m} rows, rulebook built for {}",
                rulebook.num_inputs
            )));
        }
        let cout = ws[0];
        if let Some(b) = b {
            if self.shape(b) != [cout] {
                return Err(Error::shape("sparse_conv: bias width"));
            }
        }
        let k3 = k * k * k;
        let n_out = rulebook.num_outputs();
        let mut out = vec![T::zero(); n_out * cout];
        if let Some(b) = b {
            let bias = self.value(b).data();
            for row in out.chunks_exact_mut(cout) {
                row.copy_from_slice(bias);
            }
        }
        {
            let (xv, wv) = (self.value(x).data(), self.value(w).data());
            let mut buf = Vec::new();
            let mut tmp = Vec::new();
            for (d, pairs) in rulebook.pairs.iter().enumerate() {
                if pairs.is_empty() {
                    continue;
                }
                let p = pairs.len();
                gather_into(xv, cin, pairs.iter().map(|&(i, _)| i), &mut buf);
                tmp.clear();
                tmp.resize(p * cout, T::zero());
                // tmp (p×cout) = buf (p×cin) · W_δᵀ (cin×cout)
                gemm_view(
                    p,
                    cin,
                    cout,
                    MatRef::new(&buf, cin, 1),
                    MatRef::new(&wv[d..], k3, cin * k3),
                    T::zero(),
                    MatMut::new(&mut tmp, cout, 1),
                );
                for (r, &(_, j)) in pairs.iter().enumerate() {
                    for (o, &v) in out[j * cout..(j + 1) * cout].iter_mut().zip(&tmp[r * cout..(r + 1) * cout]) {
                        *o += v;
                    }
                }
            }
        }
        let out = Tensor::new(vec![n_out, cout], out)?;
        let inputs: Vec<Var> = [x, w].into_iter().chain(b).collect();
        Ok(self.record("sparse_conv", out, &inputs, move |ctx| {
            let g = ctx.grad.data();
            let (xv, wv) = (ctx.inputs[0].data(), ctx.inputs[1].data());
            let mut dx = ctx.needs[0].then(|| vec![T::zero(); m * cin]);
            let mut dw = ctx.needs[1].then(|| vec![T::zero(); cout * cin * k3]);
            let (mut gbuf, mut xbuf, mut tmp) = (Vec::new(), Vec::new(), Vec::new());
            for (d, pairs) in rulebook.pairs.iter().enumerate() {
                if pairs.is_empty() {
                    continue;
                }
                let p = pairs.len();
                gather_into(g, cout, pairs.iter().map(|&(_, j)| j), &mut gbuf);
                if let Some(dx) = dx.as_mut() {
                    tmp.clear();
                    tmp.resize(p * cin, T::zero());
                    // tmp (p×cin) = G (p×cout) · W_δ (cout×cin)
                    gemm_view(
                        p,
                        cout,
                        cin,
                        MatRef::new(&gbuf, cout, 1),
                        MatRef::new(&wv[d..], cin * k3, k3),
                        T::zero(),
                        MatMut::new(&mut tmp, cin, 1),
                    );
                    for (r, &(i, _)) in pairs.iter().enumerate() {
                        for (a, &v) in dx[i * cin..(i + 1) * cin].iter_mut().zip(&tmp[r * cin..(r + 1) * cin]) {
                            *a += v;
                        }
                    }
                }
                if let Some(dw) = dw.as_mut() {
                    gather_into(xv, cin, pairs.iter().map(|&(i, _)| i), &mut xbuf);
                    // dW_δ (cout×cin) = Gᵀ (cout×p) · X (p×cin)
                    gemm_view(
                        cout,
                        p,
                        cin,
                        MatRef::new(&gbuf, 1, cout),
                        MatRef::new(&xbuf, cin, 1),
                        T::zero(),
                        MatMut::new(&mut dw[d..], cin * k3, k3),
                    );
                }
            }
            let mut grads = vec![
                dx.map(|d| Tensor::new(vec![m, cin], d).unwrap()),
                dw.map(|d| Tensor::new(vec![cout, cin, k, k, k], d).unwrap()),
            ];
            if ctx.inputs.len() == 3 {
                grads.push(ctx.needs[2].then(|| {
                    let mut db = vec![T::zero(); cout];
                    for row in g.chunks_exact(cout) {
                        db.iter_mut().zip(row).for_each(|(a, &v)| *a += v);
                    }
                    Tensor::new(vec![cout], db).unwrap()
                }));
            }
            grads
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scatter_max_routes_gradient_to_first_max() {
        let mut t = Tape::<f64>::new();
        let x = t.leaf(Tensor::new(vec![3, 2], vec![1.0, 5.0, 4.0, 5.0, 4.0, -1.0]).unwrap());
        let y = t.scatter_rows(x, Arc::new(vec![0, 0, 0]), 2, Reduce::Max).unwrap();
        assert_eq!(t.value(y).data(), &[4.0, 5.0, 0.0, 0.0]);
        let s = t.sum(y);
        let g = t.backward(s).unwrap();
        assert_eq!(g.wrt(x).data(), &[0.0, 1.0, 1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn scatter_mean_and_gather_compose_to_group_average() {
        let mut t = Tape::<f64>::new();
        let x = t.leaf(Tensor::new(vec![3, 1], vec![1.0, 3.0, 10.0]).unwrap());
        let groups = Arc::new(vec![0, 0, 1]);
        let m = t.scatter_rows(x, groups.clone(), 2, Reduce::Mean).unwrap();
        let back = t.gather_rows(m, groups).unwrap();
        assert_eq!(t.value(back).data(), &[2.0, 2.0, 10.0]);
        let s = t.sum(back);
        let g = t.backward(s).unwrap();
        assert_eq!(g.wrt(x).data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn rows_to_grid_places_rows() {
        let mut t = Tape::<f64>::new();
        let x = t.leaf(Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let y = t.rows_to_grid(x, Arc::new(vec![(0, 3), (1, 0)]), 2, &[2, 2]).unwrap();
        assert_eq!(t.shape(y), &[2, 2, 2, 2]);
        assert_eq!(t.value(y).data(), &[0., 0., 0., 1., 0., 0., 0., 2., 3., 0., 0., 0., 4., 0., 0., 0.]);
        assert!(t.rows_to_grid(x, Arc::new(vec![(0, 4), (1, 0)]), 2, &[2, 2]).is_err());
    }
}
