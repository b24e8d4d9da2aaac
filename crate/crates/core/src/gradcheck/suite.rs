//! Named finite-difference cases: one per differentiable tape operation,
//! then the composite blocks, the losses and a whole toy model.

use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{check_gradients, check_module, random_tensor, FdOptions, FdReport, FD_TOLERANCE};
use crate::error::Result;
use crate::grid::{LabelGrid, OccupancyGrid, PointCloud, Reduce, VoxelGridSpec};
use crate::layers::{init_affine, init_mlp, mlp};
use crate::loss::{
    bev_loss, completion_stage_loss, semantic_stage_loss, total_loss, Targets,
};
use crate::network::bev::{arf_fuse, bev_project_dense, init_arf, init_residual2d, residual2d, sem_to_bev};
use crate::network::completion::{init_residual3d, residual3d};
use crate::network::{init_model, ssc_rs_forward, Mode, ModelConfig, SceneInput};
use crate::sparse::blocks::{
    bev_project_sparse, init_sgfe, init_sparse_residual_block, sgfe_downscale, sparse_residual_block,
    sparse_to_dense,
};
use crate::sparse::{build_rulebook, Coord, RulebookMode, SparseVoxelTensor};
use crate::tensor::{ParamRegistry, Tape, Tensor, Var};
use crate::train::training_loss;

/// Tape operations that carry a backward rule. Every one has a case of the
/// same name in [`run_suite`].
pub const PRIMITIVE_OPS: &[&str] = &[
    "add",
    "sub",
    "mul",
    "affine",
    "sum",
    "mean",
    "relu",
    "sigmoid",
    "softmax",
    "log_softmax",
    "linear",
    "reshape",
    "permute",
    "concat",
    "narrow",
    "scale_channels",
    "global_avg_pool",
    "conv3d",
    "conv2d",
    "conv_transpose2d",
    "max_pool3d",
    "channel_norm",
    "segment_norm",
    "gather_rows",
    "scatter_rows",
    "rows_to_grid",
    "sparse_conv",
    "cross_entropy",
    "bce_with_logits",
    "lovasz_softmax",
];

pub const COMPOSITE_CASES: &[&str] = &[
    "mlp",
    "sparse_residual_block",
    "sgfe_downscale",
    "sparse_to_dense",
    "bev_project_sparse",
    "sem_to_bev",
    "bev_project_dense",
    "residual3d",
    "residual2d",
    "arf_fuse",
    "binary_probs",
    "semantic_stage_loss",
    "completion_stage_loss",
    "bev_loss",
    "total_loss",
    "full_model",
];

#[derive(Debug, Clone, Default)]
pub struct SuiteOptions {
    pub seed: u64,
    /// Replaces the sigmoid backward rule with a wrong one, as a negative
    /// control for the checker itself.
    pub inject_fault: bool,
}

#[derive(Debug, Clone)]
pub struct CaseResult {
    pub name: &'static str,
    pub report: FdReport,
}

impl CaseResult {
    pub fn passed(&self) -> bool {
        self.report.passed(FD_TOLERANCE)
    }
}

fn merge(a: FdReport, b: FdReport) -> FdReport {
    FdReport {
        rel_error: a.rel_error.max(b.rel_error),
        checked: a.checked + b.checked,
        kinks: a.kinks + b.kinks,
    }
}

struct Ctx {
    rng: ChaCha8Rng,
    opts: FdOptions,
}

impl Ctx {
    fn dims(&mut self, lo: usize, hi: usize, n: usize) -> Vec<usize> {
        (0..n).map(|_| self.rng.gen_range(lo..=hi)).collect()
    }

    fn t(&mut self, shape: &[usize]) -> Tensor<f64> {
        random_tensor(shape, &mut self.rng)
    }

    fn check<F>(&self, inputs: &[Tensor<f64>], f: F) -> Result<FdReport>
    where
        F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
    {
        check_gradients(inputs, f, &self.opts)
    }

    fn module<F>(&self, params: &ParamRegistry<f64>, inputs: &[Tensor<f64>], f: F) -> Result<FdReport>
    where
        F: Fn(&mut Tape<f64>, &ParamRegistry<f64>, &[Var]) -> Result<Var>,
    {
        check_module(params, inputs, f, &self.opts)
    }

    /// Distinct random coordinates in a `b × shape` grid.
    fn coords(&mut self, batch: usize, shape: [usize; 3], count: usize) -> Vec<Coord> {
        let mut all: Vec<Coord> = (0..batch)
            .flat_map(|b| {
                (0..shape[0]).flat_map(move |x| {
                    (0..shape[1]).flat_map(move |y| (0..shape[2]).map(move |z| [b, x, y, z]))
                })
            })
            .collect();
        all.shuffle(&mut self.rng);
        all.truncate(count);
        all.sort_unstable();
        all
    }

    fn groups(&mut self, rows: usize, groups: usize) -> Vec<usize> {
        // every group gets at least one row
        let mut g: Vec<usize> = (0..rows).map(|i| if i < groups { i } else { self.rng.gen_range(0..groups) }).collect();
        g.shuffle(&mut self.rng);
        g
    }

    fn targets(&mut self, rows: usize, classes: usize) -> Targets {
        let c = (0..rows).map(|_| self.rng.gen_range(0..classes)).collect();
        let k = (0..rows).map(|_| self.rng.gen_bool(0.8)).collect();
        Targets::new(c, k).unwrap()
    }
}

fn sparse_input(tape: &mut Tape<f64>, coords: &Arc<Vec<Coord>>, f: Var, shape: [usize; 3], batch: usize) -> Result<SparseVoxelTensor> {
    SparseVoxelTensor::new(tape, coords.clone(), f, shape, batch)
}

/// A sigmoid whose backward rule is off by 10 %.
fn faulty_sigmoid(tape: &mut Tape<f64>, x: Var) -> Var {
    let out = tape.value(x).map(|v| 1.0 / (1.0 + (-v).exp()));
    tape.record("sigmoid", out, &[x], |ctx| {
        vec![Some(Tensor::new(
            ctx.grad.shape().to_vec(),
            ctx.grad
                .data()
                .iter()
                .zip(ctx.output.data())
                .map(|(g, s)| 1.1 * g * s * (1.0 - s))
                .collect(),
        )
        .unwrap())]
    })
}

fn run_primitive(name: &'static str, c: &mut Ctx, inject_fault: bool) -> Result<FdReport> {
    let opts = c.opts.clone();
    let r = match name {
        "add" | "sub" | "mul" => {
            let s = c.dims(1, 6, 3);
            let ins = [c.t(&s), c.t(&s)];
            c.check(&ins, move |t, v| match name {
                "add" => t.add(v[0], v[1]),
                "sub" => t.sub(v[0], v[1]),
                _ => t.mul(v[0], v[1]),
            })?
        }
        "affine" => {
            let s = c.dims(1, 8, 2);
            let (a, b) = (c.rng.gen_range(-2.0..2.0), c.rng.gen_range(-1.0..1.0));
            check_gradients(&[c.t(&s)], move |t, v| Ok(t.affine(v[0], a, b)), &opts)?
        }
        "sum" | "mean" => {
            let s = c.dims(1, 8, 3);
            check_gradients(&[c.t(&s)], move |t, v| {
                let y = t.mul(v[0], v[0])?;
                Ok(if name == "sum" { t.sum(y) } else { t.mean(y) })
            }, &opts)?
        }
        "relu" => {
            let s = c.dims(2, 9, 2);
            check_gradients(&[c.t(&s)], |t, v| Ok(t.relu(v[0])), &opts)?
        }
        "sigmoid" => {
            let s = c.dims(2, 9, 2);
            let x = c.t(&s).map(|v| 3.0 * v);
            c.check(&[x], move |t, v| {
                Ok(if inject_fault { faulty_sigmoid(t, v[0]) } else { t.sigmoid(v[0]) })
            })?
        }
        "softmax" | "log_softmax" => {
            let s = c.dims(2, 9, 2);
            let x = c.t(&s).map(|v| 2.0 * v);
            c.check(&[x], move |t, v| if name == "softmax" { t.softmax(v[0]) } else { t.log_softmax(v[0]) })?
        }
        "linear" => {
            let d = c.dims(1, 8, 3);
            let ins = [c.t(&[d[0], d[1]]), c.t(&[d[2], d[1]]), c.t(&[d[2]])];
            c.check(&ins, |t, v| t.linear(v[0], v[1], Some(v[2])))?
        }
        "reshape" => {
            let d = c.dims(1, 6, 3);
            check_gradients(&[c.t(&d)], move |t, v| t.reshape(v[0], &[d[0] * d[1], d[2]]), &opts)?
        }
        "permute" => {
            let s = c.dims(1, 5, 4);
            let mut perm = vec![0, 1, 2, 3];
            perm.shuffle(&mut c.rng);
            check_gradients(&[c.t(&s)], move |t, v| t.permute(v[0], &perm), &opts)?
        }
        "concat" => {
            let axis = c.rng.gen_range(0..3);
            let mut s1 = c.dims(1, 5, 3);
            let mut s2 = s1.clone();
            s1[axis] = c.rng.gen_range(1..5);
            s2[axis] = c.rng.gen_range(1..5);
            let ins = [c.t(&s1), c.t(&s2)];
            c.check(&ins, move |t, v| t.concat(&[v[0], v[1]], axis))?
        }
        "narrow" => {
            let s = c.dims(3, 7, 3);
            let axis = c.rng.gen_range(0..3);
            let start = c.rng.gen_range(0..2);
            let len = s[axis] - start - 1;
            check_gradients(&[c.t(&s)], move |t, v| t.narrow(v[0], axis, start, len), &opts)?
        }
        "scale_channels" => {
            let s = c.dims(1, 4, 4);
            let ins = [c.t(&s), c.t(&s[..2])];
            c.check(&ins, |t, v| t.scale_channels(v[0], v[1]))?
        }
        "global_avg_pool" => {
            let s = c.dims(1, 5, 4);
            check_gradients(&[c.t(&s)], |t, v| t.global_avg_pool(v[0]), &opts)?
        }
        "conv3d" => {
            let mut worst = None;
            for (stride, k) in [(1, 3), (2, 3), (1, 1)] {
                let (ci, co) = (c.rng.gen_range(1..3), c.rng.gen_range(1..3));
                let sp = c.dims(3, 5, 3);
                let ins = [c.t(&[1, ci, sp[0], sp[1], sp[2]]), c.t(&[co, ci, k, k, k]), c.t(&[co])];
                let r = c.check(&ins, move |t, v| t.conv3d(v[0], v[1], Some(v[2]), [stride; 3], [k / 2; 3]))?;
                worst = Some(worst.map_or(r, |w| merge(w, r)));
            }
            worst.unwrap()
        }
        "conv2d" => {
            let mut worst = None;
            for stride in [1, 2] {
                let (ci, co) = (c.rng.gen_range(1..4), c.rng.gen_range(1..4));
                let sp = c.dims(4, 7, 2);
                let ins = [c.t(&[2, ci, sp[0], sp[1]]), c.t(&[co, ci, 3, 3]), c.t(&[co])];
                let r = c.check(&ins, move |t, v| t.conv2d(v[0], v[1], Some(v[2]), [stride; 2], [1; 2]))?;
                worst = Some(worst.map_or(r, |w| merge(w, r)));
            }
            worst.unwrap()
        }
        "conv_transpose2d" => {
            let (ci, co) = (c.rng.gen_range(1..4), c.rng.gen_range(1..4));
            let sp = c.dims(2, 5, 2);
            let ins = [c.t(&[2, ci, sp[0], sp[1]]), c.t(&[ci, co, 2, 2]), c.t(&[co])];
            c.check(&ins, |t, v| t.conv_transpose2d(v[0], v[1], Some(v[2])))?
        }
        "max_pool3d" => {
            let s = [2, c.rng.gen_range(1..3), 4, 4, 2];
            check_gradients(&[c.t(&s)], |t, v| t.max_pool3d(v[0]), &opts)?
        }
        "channel_norm" => {
            let s = [2, c.rng.gen_range(1..4), c.rng.gen_range(2..5), c.rng.gen_range(2..5)];
            let ins = [c.t(&s), c.t(&[s[1]]), c.t(&[s[1]])];
            c.check(&ins, |t, v| t.channel_norm(v[0], v[1], v[2]))?
        }
        "segment_norm" => {
            let (m, ch) = (c.rng.gen_range(6..20), c.rng.gen_range(1..4));
            let seg = Arc::new(c.groups(m, 2));
            let ins = [c.t(&[m, ch]), c.t(&[ch]), c.t(&[ch])];
            c.check(&ins, move |t, v| t.segment_norm(v[0], seg.clone(), 2, v[1], v[2]))?
        }
        "gather_rows" => {
            let (m, ch) = (c.rng.gen_range(2..10), c.rng.gen_range(1..4));
            let idx: Vec<usize> = (0..15).map(|_| c.rng.gen_range(0..m)).collect();
            let idx = Arc::new(idx);
            check_gradients(&[c.t(&[m, ch])], move |t, v| t.gather_rows(v[0], idx.clone()), &opts)?
        }
        "scatter_rows" => {
            let mut worst = None;
            for reduce in [Reduce::Sum, Reduce::Mean, Reduce::Max] {
                let (m, ch) = (c.rng.gen_range(8..20), c.rng.gen_range(1..4));
                let g = c.rng.gen_range(2..6);
                let groups = Arc::new(c.groups(m, g));
                let r = check_gradients(&[c.t(&[m, ch])], move |t, v| t.scatter_rows(v[0], groups.clone(), g, reduce), &opts)?;
                worst = Some(worst.map_or(r, |w| merge(w, r)));
            }
            worst.unwrap()
        }
        "rows_to_grid" => {
            let ch = c.rng.gen_range(1..4);
            let coords = c.coords(2, [3, 3, 2], 10);
            let targets = Arc::new(coords.iter().map(|p| (p[0], (p[1] * 3 + p[2]) * 2 + p[3])).collect::<Vec<_>>());
            check_gradients(&[c.t(&[10, ch])], move |t, v| t.rows_to_grid(v[0], targets.clone(), 2, &[3, 3, 2]), &opts)?
        }
        "sparse_conv" => {
            let mut worst = None;
            for mode in [RulebookMode::Submanifold, RulebookMode::Strided { stride: 2 }] {
                let (ci, co) = (c.rng.gen_range(1..4), c.rng.gen_range(1..4));
                let shape = [4, 4, 4];
                let coords = Arc::new(c.coords(2, shape, 24));
                let rb = Arc::new(build_rulebook(&coords, shape, 3, mode)?);
                let ins = [c.t(&[coords.len(), ci]), c.t(&[co, ci, 3, 3, 3]), c.t(&[co])];
                let r = c.check(&ins, move |t, v| t.sparse_conv(v[0], v[1], Some(v[2]), rb.clone()))?;
                worst = Some(worst.map_or(r, |w| merge(w, r)));
            }
            worst.unwrap()
        }
        "cross_entropy" => {
            let (m, k) = (c.rng.gen_range(3..20), c.rng.gen_range(2..6));
            let tg = c.targets(m, k);
            check_gradients(&[c.t(&[m, k])], move |t, v| t.cross_entropy(v[0], &tg), &opts)?
        }
        "bce_with_logits" => {
            let s = c.dims(2, 6, 2);
            let n = s[0] * s[1];
            let occ: Vec<bool> = (0..n).map(|_| c.rng.gen_bool(0.5)).collect();
            let keep: Vec<bool> = (0..n).map(|_| c.rng.gen_bool(0.8)).collect();
            let x = c.t(&s).map(|v| 4.0 * v);
            c.check(&[x], move |t, v| t.bce_with_logits(v[0], &occ, &keep))?
        }
        "lovasz_softmax" => {
            let (m, k) = (c.rng.gen_range(4..20), c.rng.gen_range(2..5));
            let tg = c.targets(m, k);
            check_gradients(&[c.t(&[m, k])], move |t, v| {
                let p = t.softmax(v[0])?;
                t.lovasz_softmax(p, &tg)
            }, &opts)?
        }
        other => unreachable!("no primitive case `{other}`"),
    };
    Ok(r)
}

fn toy_config() -> ModelConfig {
    ModelConfig {
        num_classes: 3,
        grid: VoxelGridSpec::new([0.0, 0.0, 0.0], 0.25, [8, 8, 8]).unwrap(),
        voxel_width: 4,
        semantic_widths: [4, 4, 4],
        completion_widths: [2, 2, 2, 2],
        bev_widths: [4, 4, 4, 4],
        decoder_widths: [4, 4, 4],
        arf_reduction: 2,
        semantic_branch: true,
        deep_supervision: true,
    }
}

/// Random points with random labels on their voxels plus a few voxels
/// without points.
fn toy_scene(rng: &mut ChaCha8Rng, spec: &VoxelGridSpec, classes: u8) -> (PointCloud, OccupancyGrid, LabelGrid) {
    let n = 60;
    let ext = spec.extent();
    let positions: Vec<[f32; 3]> = (0..n)
        .map(|_| [0, 1, 2].map(|k| (spec.origin[k] + rng.gen_range(0.02..0.98) * ext[k]) as f32))
        .collect();
    let intensity = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
    let pc = PointCloud::new(positions, intensity).unwrap();
    let mut occ = OccupancyGrid::empty(spec.dims);
    let mut gt = LabelGrid::empty(spec.dims);
    for i in 0..pc.len() {
        let v = spec.locate(pc.position_f64(i)).unwrap();
        occ.set(v.x, v.y, v.z, true);
        gt.set(v.x, v.y, v.z, rng.gen_range(1..=classes));
    }
    for _ in 0..20 {
        let [x, y, z] = [0, 1, 2].map(|k| rng.gen_range(0..spec.dims[k]));
        if gt.get(x, y, z) == 0 {
            gt.set(x, y, z, rng.gen_range(1..=classes));
        }
    }
    let o = gt.offset(0, 0, spec.dims[2] - 1);
    gt.invalid_mut()[o] = true;
    (pc, occ, gt)
}

fn run_composite(name: &'static str, c: &mut Ctx) -> Result<FdReport> {
    let opts = c.opts.clone();
    let mut reg = ParamRegistry::<f64>::new();
    let r = match name {
        "mlp" => {
            init_mlp(&mut reg, "m", [3, 5, 2], &mut c.rng)?;
            check_module(&reg, &[c.t(&[7, 3])], |t, p, v| mlp(t, p, "m", v[0]), &opts)?
        }
        "sparse_residual_block" => {
            let shape = [4, 4, 4];
            let coords = Arc::new(c.coords(2, shape, 30));
            init_sparse_residual_block(&mut reg, "rb", 2, 3, &mut c.rng)?;
            let rb = Arc::new(build_rulebook(&coords, shape, 3, RulebookMode::Submanifold)?);
            let x = c.t(&[coords.len(), 2]);
            c.module(&reg, &[x], move |t, p, v| {
                let s = sparse_input(t, &coords, v[0], shape, 2)?;
                Ok(sparse_residual_block(t, p, "rb", &s, &rb)?.features())
            })?
        }
        "sgfe_downscale" => {
            let shape = [8, 8, 4];
            let coords = Arc::new(c.coords(1, shape, 40));
            init_sgfe(&mut reg, "sg", 3, &mut c.rng)?;
            let x = c.t(&[coords.len(), 3]);
            c.module(&reg, &[x], move |t, p, v| {
                let s = sparse_input(t, &coords, v[0], shape, 1)?;
                Ok(sgfe_downscale(t, p, "sg", &s)?.output.features())
            })?
        }
        "sparse_to_dense" | "bev_project_sparse" | "sem_to_bev" => {
            let shape = [3, 3, 4];
            let coords = Arc::new(c.coords(2, shape, 25));
            if name == "sem_to_bev" {
                init_affine(&mut reg, "proj", &[3, 2], true, &mut c.rng)?;
            }
            let x = c.t(&[coords.len(), 2]);
            c.module(&reg, &[x], move |t, p, v| {
                let s = sparse_input(t, &coords, v[0], shape, 2)?;
                match name {
                    "sparse_to_dense" => sparse_to_dense(t, &s),
                    "bev_project_sparse" => bev_project_sparse(t, &s),
                    _ => sem_to_bev(t, p, "proj", &s),
                }
            })?
        }
        "bev_project_dense" => {
            init_affine(&mut reg, "proj", &[3, 2 * 2, 1, 1], true, &mut c.rng)?;
            check_module(&reg, &[c.t(&[2, 2, 2, 3, 4])], |t, p, v| bev_project_dense(t, p, "proj", v[0]), &opts)?
        }
        "residual3d" => {
            init_residual3d(&mut reg, "r3", 2, 3, &mut c.rng)?;
            check_module(&reg, &[c.t(&[1, 2, 4, 4, 2])], |t, p, v| residual3d(t, p, "r3", v[0]), &opts)?
        }
        "residual2d" => {
            let mut worst = None;
            for stride in [1, 2] {
                let mut reg = ParamRegistry::<f64>::new();
                init_residual2d(&mut reg, "r2", 2, 3, stride, &mut c.rng)?;
                let r = check_module(&reg, &[c.t(&[2, 2, 4, 4])], move |t, p, v| residual2d(t, p, "r2", v[0], stride), &opts)?;
                worst = Some(worst.map_or(r, |w| merge(w, r)));
            }
            worst.unwrap()
        }
        "arf_fuse" => {
            init_arf(&mut reg, "arf", 4, 2, &mut c.rng)?;
            let s = [2, 4, 3, 3];
            let ins = [c.t(&s), c.t(&s), c.t(&s)];
            c.module(&reg, &ins, |t, p, v| Ok(arf_fuse(t, p, "arf", v[0], v[1], v[2])?.fused))?
        }
        "binary_probs" => check_gradients(&[c.t(&[3, 4])], |t, v| t.binary_probs(v[0]), &opts)?,
        "semantic_stage_loss" => {
            let (m, k) = (c.rng.gen_range(4..16), 3);
            let tg = c.targets(m, k);
            check_gradients(&[c.t(&[m, k])], move |t, v| semantic_stage_loss(t, v[0], &tg), &opts)?
        }
        "completion_stage_loss" => {
            let n = 2 * 2 * 3 * 3;
            let occ: Vec<bool> = (0..n).map(|_| c.rng.gen_bool(0.5)).collect();
            let keep: Vec<bool> = (0..n).map(|_| c.rng.gen_bool(0.8)).collect();
            check_gradients(&[c.t(&[1, 1, 4, 3, 3])], move |t, v| completion_stage_loss(t, v[0], &occ, &keep), &opts)?
        }
        "bev_loss" => {
            let (k, z, x, y) = (3, 2, 3, 2);
            let tg = c.targets(2 * z * x * y, k);
            check_gradients(&[c.t(&[2, k, z, x, y])], move |t, v| bev_loss(t, v[0], &tg), &opts)?
        }
        "total_loss" => {
            let ins = [c.t(&[4, 3]), c.t(&[4, 3]), c.t(&[6])];
            let (ta, tb) = (c.targets(4, 3), c.targets(4, 3));
            let occ: Vec<bool> = (0..6).map(|_| c.rng.gen_bool(0.5)).collect();
            c.check(&ins, move |t, v| {
                let a = semantic_stage_loss(t, v[0], &ta)?;
                let b = semantic_stage_loss(t, v[1], &tb)?;
                let cc = completion_stage_loss(t, v[2], &occ, &[true; 6])?;
                total_loss(t, a, b, cc, 3.0)
            })?
        }
        "full_model" => {
            let cfg = toy_config();
            let params = init_model::<f64>(&cfg, c.rng.gen())?;
            let (pc, occ, gt) = toy_scene(&mut c.rng, &cfg.grid, cfg.num_classes as u8);
            let opts = FdOptions {
                max_coords: Some(3),
                ..c.opts.clone()
            };
            check_module(
                &params,
                &[],
                |t, p, _| {
                    let scene = SceneInput {
                        points: &pc,
                        occupancy: &occ,
                    };
                    let out = ssc_rs_forward(t, p, &cfg, &[scene], Mode::Train)?;
                    Ok(training_loss(t, &out, &[&gt], 3.0)?.0)
                },
                &opts,
            )?
        }
        other => unreachable!("no composite case `{other}`"),
    };
    Ok(r)
}

/// Runs every case; failures are reported, not raised.
pub fn run_suite(opts: &SuiteOptions) -> Result<Vec<CaseResult>> {
    run_cases(PRIMITIVE_OPS.iter().chain(COMPOSITE_CASES).copied(), opts)
}

pub fn run_cases<'a>(names: impl IntoIterator<Item = &'a str>, opts: &SuiteOptions) -> Result<Vec<CaseResult>> {
    let mut out = Vec::new();
    for (i, name) in names.into_iter().enumerate() {
        let name: &'static str = PRIMITIVE_OPS
            .iter()
            .chain(COMPOSITE_CASES)
            .find(|&&n| n == name)
            .copied()
            .ok_or_else(|| crate::Error::invalid(format!("unknown gradcheck case `{name}`")))?;
        let mut c = Ctx {
            rng: ChaCha8Rng::seed_from_u64(opts.seed.wrapping_add(1000 * i as u64 + 1)),
            opts: FdOptions {
                max_coords: Some(64),
                seed: opts.seed,
                ..FdOptions::default()
            },
        };
        let report = if PRIMITIVE_OPS.contains(&name) {
            run_primitive(name, &mut c, opts.inject_fault)?
        } else {
            run_composite(name, &mut c)?
        };
        out.push(CaseResult { name, report });
    }
    Ok(out)
}

/// Distinct op names recorded with a backward rule while running the toy
/// model's training loss.
pub fn model_op_names() -> Result<Vec<&'static str>> {
    let cfg = toy_config();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let params = init_model::<f64>(&cfg, 0)?;
    let (pc, occ, gt) = toy_scene(&mut rng, &cfg.grid, 3);
    let mut t = Tape::new();
    let scene = SceneInput {
        points: &pc,
        occupancy: &occ,
    };
    let out = ssc_rs_forward(&mut t, &params, &cfg, &[scene], Mode::Train)?;
    training_loss(&mut t, &out, &[&gt], 3.0)?;
    let mut names: Vec<&'static str> = (0..t.len())
        .map(Var)
        .filter(|&v| t.requires_grad(v) && !matches!(t.op_name(v), "leaf" | "param"))
        .map(|v| t.op_name(v))
        .collect();
    names.sort_unstable();
    names.dedup();
    Ok(names)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn model_uses_only_checked_ops() {
        for op in model_op_names().unwrap() {
            assert!(PRIMITIVE_OPS.contains(&op), "op `{op}` has no gradcheck case");
        }
    }

    #[test]
    fn case_names_are_unique() {
        let mut all: Vec<&str> = PRIMITIVE_OPS.iter().chain(COMPOSITE_CASES).copied().collect();
        let n = all.len();
        all.sort_unstable();
        all.dedup();
        assert_eq!(all.len(), n);
    }

    #[test]
    fn injected_fault_is_caught() {
        let opts = SuiteOptions {
            inject_fault: true,
            ..Default::default()
        };
        let r = run_cases(["sigmoid"], &opts).unwrap();
        assert!(!r[0].passed(), "{:?}", r[0].report);
        let r = run_cases(["sigmoid"], &SuiteOptions::default()).unwrap();
        assert!(r[0].passed(), "{:?}", r[0].report);
    }
}
