//! Sparse network blocks: submanifold convolution, residual block, the
//! multi-scale downscaling block, and dense / BEV projections.

use std::sync::Arc;

use rand::Rng;

use super::{coord_key, key_coord, Coord, Rulebook, RulebookMode, SparseVoxelTensor};
use crate::error::{Error, Result};
use crate::grid::{group_keys, Reduce};
use crate::layers::{self, init_affine, init_norm, norm_params};
use crate::real::Real;
use crate::tensor::{ParamRegistry, Tape, Var};

/// Pooling scales of the downscaling block's attention branches.
pub const SGFE_SCALES: [usize; 3] = [1, 2, 4];

pub fn submanifold_conv3d<T: Real>(
    tape: &mut Tape<T>,
    x: &SparseVoxelTensor,
    w: Var,
    b: Option<Var>,
    rulebook: &Arc<Rulebook>,
) -> Result<SparseVoxelTensor> {
    if rulebook.mode != RulebookMode::Submanifold || *rulebook.out_coords != **x.coords() {
        return Err(Error::invalid("submanifold_conv3d: rulebook built for another active set"));
    }
    let f = tape.sparse_conv(x.features(), w, b, rulebook.clone())?;
    x.with_features(tape, f)
}

/// Dense `B×C×L×W×H` map with zeros at inactive sites.
pub fn sparse_to_dense<T: Real>(tape: &mut Tape<T>, x: &SparseVoxelTensor) -> Result<Var> {
    let [l, w, h] = x.spatial_shape();
    let targets = x
        .coords()
        .iter()
        .map(|c| (c[0], (c[1] * w + c[2]) * h + c[3]))
        .collect();
    tape.rows_to_grid(x.features(), Arc::new(targets), x.batch_size(), &[l, w, h])
}

/// Scatter-max over each `(batch, x, y)` column, densified to `B×C×L×W`.
pub fn bev_project_sparse<T: Real>(tape: &mut Tape<T>, x: &SparseVoxelTensor) -> Result<Var> {
    let [l, w, _] = x.spatial_shape();
    let keys: Vec<u64> = x
        .coords()
        .iter()
        .map(|c| ((c[0] * l + c[1]) * w + c[2]) as u64)
        .collect();
    let (unique, assign) = group_keys(&keys);
    let pooled = tape.scatter_rows(x.features(), Arc::new(assign), unique.len(), Reduce::Max)?;
    let targets = unique
        .iter()
        .map(|&k| ((k as usize) / (l * w), (k as usize) % (l * w)))
        .collect();
    tape.rows_to_grid(pooled, Arc::new(targets), x.batch_size(), &[l, w])
}

fn segment_norm<T: Real>(
    tape: &mut Tape<T>,
    params: &ParamRegistry<T>,
    prefix: &str,
    x: &SparseVoxelTensor,
    f: Var,
) -> Result<Var> {
    let (g, s) = norm_params(tape, params, prefix)?;
    tape.segment_norm(f, x.batch_ids(), x.batch_size(), g, s)
}

pub fn init_sparse_residual_block<T: Real, R: Rng + ?Sized>(
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
        init_affine(reg, &format!("{prefix}.skip"), &[c_out, c_in], false, rng)?;
    }
    Ok(())
}

/// `relu(skip(x) + conv2(norm2(relu(conv1(norm1(x))))))` with 3³ submanifold
/// convolutions; `skip` is the identity unless the width changes, in which
/// case it is a per-voxel linear map.
pub fn sparse_residual_block<T: Real>(
    tape: &mut Tape<T>,
    params: &ParamRegistry<T>,
    prefix: &str,
    x: &SparseVoxelTensor,
    rulebook: &Arc<Rulebook>,
) -> Result<SparseVoxelTensor> {
    let conv = |tape: &mut Tape<T>, name: &str, input: Var| -> Result<Var> {
        let p = format!("{prefix}.{name}");
        let w = layers::weight(tape, params, &p)?;
        let b = layers::bias(tape, params, &p)?;
        Ok(submanifold_conv3d(tape, &x.with_features(tape, input)?, w, b, rulebook)?.features())
    };
    let h = segment_norm(tape, params, &format!("{prefix}.norm1"), x, x.features())?;
    let h = conv(tape, "conv1", h)?;
    let h = tape.relu(h);
    let h = segment_norm(tape, params, &format!("{prefix}.norm2"), x, h)?;
    let h = conv(tape, "conv2", h)?;
    let skip_name = format!("{prefix}.skip.weight");
    let skip = if params.contains(&skip_name) {
        layers::linear(tape, params, &format!("{prefix}.skip"), x.features())?
    } else {
        x.features()
    };
    let y = tape.add(skip, h)?;
    let y = tape.relu(y);
    x.with_features(tape, y)
}

pub fn init_sgfe<T: Real, R: Rng + ?Sized>(
    reg: &mut ParamRegistry<T>,
    prefix: &str,
    channels: usize,
    rng: &mut R,
) -> Result<()> {
    for r in SGFE_SCALES {
        init_affine(reg, &format!("{prefix}.scale{r}"), &[channels, channels], true, rng)?;
    }
    init_affine(reg, &format!("{prefix}.score"), &[SGFE_SCALES.len(), channels], true, rng)
}

pub struct SgfeOutput {
    /// Half-resolution result.
    pub output: SparseVoxelTensor,
    /// `M×3` softmax weights over [`SGFE_SCALES`], one row per input voxel.
    pub attention: Var,
    /// Input-resolution features before downsampling.
    pub enhanced: Var,
}

/// Multi-scale enhancement followed by factor-2 downscaling.
///
/// For each scale `r`, features are mean-pooled over `coord / r`, gathered
/// back to the voxels and passed through a linear layer. A linear scoring
/// head with a softmax weighs the branches per voxel; the weighted sum is
/// added to the input, and the result is max-pooled over `coord / 2`.
pub fn sgfe_downscale<T: Real>(
    tape: &mut Tape<T>,
    params: &ParamRegistry<T>,
    prefix: &str,
    x: &SparseVoxelTensor,
) -> Result<SgfeOutput> {
    let shape = x.spatial_shape();
    if shape.iter().any(|d| d % 2 != 0) {
        return Err(Error::shape(format!("sgfe_downscale: odd spatial shape {shape:?}")));
    }
    let f = x.features();
    let scores = layers::linear(tape, params, &format!("{prefix}.score"), f)?;
    let attention = tape.softmax(scores)?;
    let mut terms = vec![f];
    for (slot, r) in SGFE_SCALES.into_iter().enumerate() {
        let pooled = if r == 1 {
            f
        } else {
            let keys: Vec<u64> = x
                .coords()
                .iter()
                .map(|c| coord_key([c[0], c[1] / r, c[2] / r, c[3] / r], shape))
                .collect();
            let (unique, assign) = group_keys(&keys);
            let assign = Arc::new(assign);
            let m = tape.scatter_rows(f, assign.clone(), unique.len(), Reduce::Mean)?;
            tape.gather_rows(m, assign)?
        };
        let branch = layers::linear(tape, params, &format!("{prefix}.scale{r}"), pooled)?;
        let a = tape.narrow(attention, 1, slot, 1)?;
        let a = tape.reshape(a, &[x.len()])?;
        terms.push(tape.scale_channels(branch, a)?);
    }
    let enhanced = tape.add_n(&terms)?;
    let half = shape.map(|d| d / 2);
    let keys: Vec<u64> = x
        .coords()
        .iter()
        .map(|c| coord_key([c[0], c[1] / 2, c[2] / 2, c[3] / 2], half))
        .collect();
    let (unique, assign) = group_keys(&keys);
    let pooled = tape.scatter_rows(enhanced, Arc::new(assign), unique.len(), Reduce::Max)?;
    let coords: Vec<Coord> = unique.iter().map(|&k| key_coord(k, half)).collect();
    let output = SparseVoxelTensor::new(tape, Arc::new(coords), pooled, half, x.batch_size())?;
    Ok(SgfeOutput {
        output,
        attention,
        enhanced,
    })
}

#[cfg(test)]
mod tests {
    use std::collections::HashSet;

    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::tensor::Tensor;

    fn random_sparse(
        tape: &mut Tape<f64>,
        rng: &mut ChaCha8Rng,
        n: usize,
        shape: [usize; 3],
        batch: usize,
        c: usize,
    ) -> SparseVoxelTensor {
        let mut set = HashSet::new();
        while set.len() < n {
            set.insert([
                rng.gen_range(0..batch),
                rng.gen_range(0..shape[0]),
                rng.gen_range(0..shape[1]),
                rng.gen_range(0..shape[2]),
            ]);
        }
        let mut coords: Vec<Coord> = set.into_iter().collect();
        coords.sort();
        let f = tape.leaf(Tensor::from_fn(&[n, c], |_| rng.gen_range(-1.0..1.0)));
        SparseVoxelTensor::new(tape, Arc::new(coords), f, shape, batch).unwrap()
    }

    #[test]
    fn submanifold_conv_matches_masked_dense_conv() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let (cin, cout) = (3, 2);
        let mut t = Tape::new();
        let x = random_sparse(&mut t, &mut rng, 60, [8, 8, 8], 1, cin);
        let w = t.leaf(Tensor::from_fn(&[cout, cin, 3, 3, 3], |_| rng.gen_range(-1.0..1.0)));
        let b = t.leaf(Tensor::new(vec![cout], vec![0.3, -0.2]).unwrap());
        let rb = x.submanifold_rulebook(3).unwrap();
        let y = submanifold_conv3d(&mut t, &x, w, Some(b), &rb).unwrap();
        assert_eq!(y.coords(), x.coords());
        let dense = sparse_to_dense(&mut t, &x).unwrap();
        let dy = t.conv3d(dense, w, Some(b), [1; 3], [1; 3]).unwrap();
        let dv = t.value(dy).data();
        for (r, c) in x.coords().iter().enumerate() {
            for o in 0..cout {
                let want = dv[((c[0] * cout + o) * 8 + c[1]) * 64 + c[2] * 8 + c[3]];
                let got = t.value(y.features()).data()[r * cout + o];
                assert!((want - got).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn identity_kernel_keeps_features() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut t = Tape::new();
        let x = random_sparse(&mut t, &mut rng, 20, [6, 6, 6], 2, 2);
        let mut wv = vec![0.0; 2 * 2 * 27];
        wv[13] = 1.0;
        wv[(2 + 1) * 27 + 13] = 1.0;
        let w = t.leaf(Tensor::new(vec![2, 2, 3, 3, 3], wv).unwrap());
        let rb = x.submanifold_rulebook(3).unwrap();
        let y = submanifold_conv3d(&mut t, &x, w, None, &rb).unwrap();
        assert_eq!(t.value(y.features()), t.value(x.features()));
    }

    #[test]
    fn dense_round_trip_and_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut t = Tape::new();
        let x = random_sparse(&mut t, &mut rng, 30, [4, 5, 6], 2, 3);
        let d = sparse_to_dense(&mut t, &x).unwrap();
        assert_eq!(t.shape(d), &[2, 3, 4, 5, 6]);
        let total: f64 = t.value(d).sum();
        assert!((total - t.value(x.features()).sum()).abs() < 1e-12);
        let dv = t.value(d).data();
        for (r, c) in x.coords().iter().enumerate() {
            for ch in 0..3 {
                let v = dv[(((c[0] * 3 + ch) * 4 + c[1]) * 5 + c[2]) * 6 + c[3]];
                assert_eq!(v, t.value(x.features()).data()[r * 3 + ch]);
            }
        }
        let empty_f = t.leaf(Tensor::zeros(&[0, 3]));
        let empty = SparseVoxelTensor::new(&t, Arc::new(vec![]), empty_f, [2, 2, 2], 1).unwrap();
        let e = sparse_to_dense(&mut t, &empty).unwrap();
        assert!(t.value(e).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn bev_projection_equals_dense_max_over_z() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut t = Tape::new();
        let x = random_sparse(&mut t, &mut rng, 50, [6, 5, 4], 2, 2);
        let bev = bev_project_sparse(&mut t, &x).unwrap();
        let bv = t.value(bev).data();
        let fv = t.value(x.features()).data();
        for b in 0..2 {
            for ch in 0..2 {
                for i in 0..6 {
                    for j in 0..5 {
                        let col: Vec<f64> = x
                            .coords()
                            .iter()
                            .enumerate()
                            .filter(|(_, c)| c[0] == b && c[1] == i && c[2] == j)
                            .map(|(r, _)| fv[r * 2 + ch])
                            .collect();
                        let want = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                        let want = if col.is_empty() { 0.0 } else { want };
                        assert_eq!(bv[((b * 2 + ch) * 6 + i) * 5 + j], want);
                    }
                }
            }
        }
    }

    fn sgfe_params(rng: &mut ChaCha8Rng, c: usize) -> ParamRegistry<f64> {
        let mut p = ParamRegistry::new();
        init_sgfe(&mut p, "s", c, rng).unwrap();
        p
    }

    #[test]
    fn sgfe_single_voxel_branches_coincide() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let p = sgfe_params(&mut rng, 3);
        let mut t = Tape::new();
        let x = random_sparse(&mut t, &mut rng, 1, [4, 4, 4], 1, 3);
        let out = sgfe_downscale(&mut t, &p, "s", &x).unwrap();
        let a = t.value(out.attention).data();
        assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(out.output.len(), 1);
        assert_eq!(out.output.spatial_shape(), [2, 2, 2]);
        let c = x.coords()[0];
        assert_eq!(out.output.coords()[0], [0, c[1] / 2, c[2] / 2, c[3] / 2]);
    }

    #[test]
    fn sgfe_one_hot_attention_reduces_to_scale_one_linear() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let c = 2;
        let mut p = sgfe_params(&mut rng, c);
        *p.get_mut("s.score.weight").unwrap() = Tensor::zeros(&[3, c]);
        *p.get_mut("s.score.bias").unwrap() = Tensor::new(vec![3], vec![200.0, 0.0, 0.0]).unwrap();
        let mut t = Tape::new();
        let x = random_sparse(&mut t, &mut rng, 12, [4, 4, 4], 1, c);
        let out = sgfe_downscale(&mut t, &p, "s", &x).unwrap();
        let w1 = p.get("s.scale1.weight").unwrap().data();
        let b1 = p.get("s.scale1.bias").unwrap().data();
        let fv = t.value(x.features()).data();
        let ev = t.value(out.enhanced).data();
        for r in 0..12 {
            for o in 0..c {
                let lin: f64 = b1[o] + (0..c).map(|i| w1[o * c + i] * fv[r * c + i]).sum::<f64>();
                assert!((ev[r * c + o] - (fv[r * c + o] + lin)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn sgfe_downsampled_coords_are_distinct_halves() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let p = sgfe_params(&mut rng, 2);
        let mut t = Tape::new();
        let x = random_sparse(&mut t, &mut rng, 80, [8, 8, 4], 2, 2);
        let out = sgfe_downscale(&mut t, &p, "s", &x).unwrap();
        let mut want: Vec<Coord> = x.coords().iter().map(|c| [c[0], c[1] / 2, c[2] / 2, c[3] / 2]).collect();
        want.sort();
        want.dedup();
        assert_eq!(**out.output.coords(), want);
        for row in t.value(out.attention).data().chunks(3) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        let odd = random_sparse(&mut t, &mut rng, 3, [3, 4, 4], 1, 2);
        assert!(sgfe_downscale(&mut t, &p, "s", &odd).is_err());
    }

    #[test]
    fn residual_block_with_zero_convs_is_relu() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let mut p = ParamRegistry::new();
        init_sparse_residual_block(&mut p, "rb", 3, 3, &mut rng).unwrap();
        for name in ["rb.conv1.weight", "rb.conv2.weight"] {
            let shape = p.get(name).unwrap().shape().to_vec();
            *p.get_mut(name).unwrap() = Tensor::zeros(&shape);
        }
        let mut t = Tape::new();
        let x = random_sparse(&mut t, &mut rng, 15, [5, 5, 5], 1, 3);
        let rb = x.submanifold_rulebook(3).unwrap();
        let y = sparse_residual_block(&mut t, &p, "rb", &x, &rb).unwrap();
        assert_eq!(y.coords(), x.coords());
        let want = t.value(x.features()).map(|v| v.max(0.0));
        assert_eq!(t.value(y.features()), &want);
    }
}
