use std::collections::BTreeMap;

use proptest::collection::vec;
use proptest::prelude::*;
use sscrs_core::grid::{
    downsample_labels, downsample_occupancy, group_keys, scatter_reduce, voxelize, Flip, LabelGrid, OccupancyGrid,
    PointCloud, Reduce, VoxelGridSpec,
};
use sscrs_core::io::{self, LabelRemap};
use sscrs_core::tensor::Tensor;

fn label_grid(dims: [usize; 3]) -> impl Strategy<Value = LabelGrid> {
    let n = dims.iter().product::<usize>();
    (vec(0u8..6, n), vec(prop::bool::weighted(0.2), n)).prop_map(move |(l, i)| LabelGrid::new(dims, l, i).unwrap())
}

fn occupancy(dims: [usize; 3]) -> impl Strategy<Value = OccupancyGrid> {
    vec(prop::bool::weighted(0.3), dims.iter().product::<usize>()).prop_map(move |c| OccupancyGrid::new(dims, c).unwrap())
}

fn flip() -> impl Strategy<Value = Flip> {
    (any::<bool>(), any::<bool>()).prop_map(|(x, y)| Flip { x, y })
}

proptest! {
    #[test]
    fn occupancy_downsample_is_or_of_children(occ in occupancy([8, 6, 4])) {
        let down = downsample_occupancy(&occ, 2).unwrap();
        prop_assert_eq!(down.dims(), [4, 3, 2]);
        for x in 0..4 {
            for y in 0..3 {
                for z in 0..2 {
                    let mut any = false;
                    for d in 0..8 {
                        any |= occ.get(2 * x + (d >> 2), 2 * y + ((d >> 1) & 1), 2 * z + (d & 1));
                    }
                    prop_assert_eq!(down.get(x, y, z), any);
                }
            }
        }
    }

    #[test]
    fn label_downsample_takes_a_valid_child_class(g in label_grid([4, 4, 4])) {
        let down = downsample_labels(&g, 2).unwrap();
        for x in 0..2 {
            for y in 0..2 {
                for z in 0..2 {
                    let o = down.offset(x, y, z);
                    let class = down.labels()[o];
                    let children: Vec<usize> = (0..8)
                        .map(|d| g.offset(2 * x + (d >> 2), 2 * y + ((d >> 1) & 1), 2 * z + (d & 1)))
                        .collect();
                    if class > 0 {
                        prop_assert!(children.iter().any(|&c| g.labels()[c] == class && !g.invalid()[c]));
                    } else {
                        prop_assert!(children.iter().all(|&c| g.labels()[c] == 0 || g.invalid()[c]));
                    }
                }
            }
        }
    }

    #[test]
    fn flip_is_an_involution(g in label_grid([5, 4, 3]), occ in occupancy([5, 4, 3]), f in flip()) {
        prop_assert_eq!(f.apply_labels(&f.apply_labels(&g)), g);
        prop_assert_eq!(f.apply_occupancy(&f.apply_occupancy(&occ)), occ);
    }

    #[test]
    fn flipped_points_land_in_mirrored_voxels(
        cells in vec((0usize..10, 0usize..8, 0usize..4, -0.4f64..0.4, -0.4f64..0.4, -0.4f64..0.4), 1..40),
        f in flip(),
    ) {
        let spec = VoxelGridSpec::new([-1.0, -0.8, -0.4], 0.2, [10, 8, 4]).unwrap();
        let positions: Vec<[f32; 3]> = cells
            .iter()
            .map(|&(x, y, z, a, b, c)| {
                let idx = [x, y, z];
                let off = [a, b, c];
                [0, 1, 2].map(|k| (spec.origin[k] + (idx[k] as f64 + 0.5 + off[k]) * spec.voxel_size) as f32)
            })
            .collect();
        let n = positions.len();
        let pc = PointCloud::new(positions, vec![0.5; n]).unwrap();
        let vox = voxelize(&f.apply_points(&pc, &spec), &spec);
        prop_assert!(vox.in_range.iter().all(|&r| r));
        for (v, &(x, y, z, ..)) in vox.indices.iter().zip(&cells) {
            let mx = if f.x { 9 - x } else { x };
            let my = if f.y { 7 - y } else { y };
            prop_assert_eq!(v.to_array(), [mx, my, z]);
        }
    }

    #[test]
    fn scatter_sum_preserves_column_totals(
        rows in vec((0u64..12, -10.0f64..10.0, -10.0f64..10.0), 1..50),
    ) {
        let keys: Vec<u64> = rows.iter().map(|r| r.0).collect();
        let feats: Vec<f64> = rows.iter().flat_map(|r| [r.1, r.2]).collect();
        let (unique, sum) = scatter_reduce(&feats, 2, &keys, Reduce::Sum).unwrap();
        let (unique_g, assign) = group_keys(&keys);
        prop_assert_eq!(&unique, &unique_g);
        prop_assert!(unique.windows(2).all(|w| w[0] < w[1]));
        for c in 0..2 {
            let total: f64 = feats.iter().skip(c).step_by(2).sum();
            let pooled: f64 = sum.iter().skip(c).step_by(2).sum();
            prop_assert!((total - pooled).abs() <= 1e-9 * (1.0 + total.abs()));
        }
        let (_, max) = scatter_reduce(&feats, 2, &keys, Reduce::Max).unwrap();
        let (_, mean) = scatter_reduce(&feats, 2, &keys, Reduce::Mean).unwrap();
        for (r, &g) in assign.iter().enumerate() {
            for c in 0..2 {
                prop_assert!(feats[r * 2 + c] <= max[g * 2 + c]);
            }
        }
        for g in 0..unique.len() {
            for c in 0..2 {
                prop_assert!(mean[g * 2 + c] <= max[g * 2 + c] + 1e-12);
            }
        }
    }

    #[test]
    fn remap_round_trips_every_class(class in 0u8..20) {
        let remap = LabelRemap::default();
        let raw = remap.unmap(class).unwrap();
        prop_assert_eq!(remap.map(raw).unwrap(), class);
    }

    #[test]
    fn packed_bits_round_trip(bits in vec(any::<bool>(), 0..200)) {
        let packed = io::pack_bits(&bits);
        prop_assert_eq!(packed.len(), bits.len().div_ceil(8));
        prop_assert_eq!(io::unpack_bits(&packed, bits.len()), bits);
    }

    #[test]
    fn points_round_trip(pts in vec((any::<f32>(), any::<f32>(), any::<f32>(), any::<f32>()), 0..30)) {
        let pts: Vec<_> = pts.into_iter().filter(|p| [p.0, p.1, p.2, p.3].iter().all(|v| v.is_finite())).collect();
        let pc = PointCloud::new(pts.iter().map(|p| [p.0, p.1, p.2]).collect(), pts.iter().map(|p| p.3).collect())
            .unwrap();
        let bytes = io::encode_points(&pc);
        prop_assert_eq!(bytes.len(), 16 * pc.len());
        let back = io::decode_points(&bytes, std::path::Path::new("p.bin")).unwrap();
        prop_assert_eq!(io::encode_points(&back), bytes);
    }

    #[test]
    fn checkpoint_tensors_round_trip(
        entries in vec(("[a-z.]{1,12}", vec(1usize..4, 0..3)), 0..6),
        fill in any::<u32>(),
    ) {
        let mut tensors = BTreeMap::new();
        for (i, (name, shape)) in entries.into_iter().enumerate() {
            let t = Tensor::from_fn(&shape, |j| f32::from_bits(fill.wrapping_add((i * 31 + j) as u32) & 0x7f7f_ffff));
            tensors.insert(name, t);
        }
        let bytes = io::encode_tensors(&tensors).unwrap();
        let back = io::decode_tensors(&bytes, std::path::Path::new("t.ckpt")).unwrap();
        prop_assert_eq!(io::encode_tensors(&back).unwrap(), bytes);
        prop_assert_eq!(back, tensors);
    }
}

#[test]
fn labels_and_occupancy_files_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let remap = LabelRemap::default();
    let dims = [8, 4, 2];
    let labels: Vec<u8> = (0..64).map(|i| (i * 7 % 20) as u8).collect();
    let invalid: Vec<bool> = (0..64).map(|i| i % 5 == 0).collect();
    let grid = LabelGrid::new(dims, labels, invalid).unwrap();
    let path = dir.path().join("a.label");
    io::write_voxel_labels(&path, &grid, &remap).unwrap();
    assert_eq!(io::read_voxel_labels(&path, dims, &remap).unwrap(), grid);

    let occ = OccupancyGrid::new(dims, (0..64).map(|i| i % 3 == 0).collect()).unwrap();
    let path = dir.path().join("a.bin");
    io::write_occupancy(&path, &occ).unwrap();
    assert_eq!(std::fs::read(&path).unwrap().len(), 8);
    assert_eq!(io::read_occupancy(&path, dims).unwrap(), occ);
}

#[test]
fn labels_without_invalid_file_are_all_valid() {
    let dir = tempfile::tempdir().unwrap();
    let remap = LabelRemap::default();
    let grid = LabelGrid::from_labels([2, 2, 2], vec![0, 1, 2, 3, 4, 5, 6, 7]).unwrap();
    let path = dir.path().join("p.label");
    io::write_predictions(&grid, &path, &remap).unwrap();
    assert!(!io::invalid_path(&path).exists());
    let back = io::read_voxel_labels(&path, [2, 2, 2], &remap).unwrap();
    assert_eq!(back.labels(), grid.labels());
    assert!(back.invalid().iter().all(|&i| !i));
}
