//! Voxel-grid geometry: metric-to-index mapping, point features, keyed
//! reductions, multi-scale label/occupancy pyramids and flip augmentation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::real::Real;

/// Bin-edge snap tolerance of [`VoxelGridSpec::locate`], in voxel units.
pub const LOCATE_SNAP: f64 = 1e-4;

/// Metric-to-index mapping of a regular voxel grid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VoxelGridSpec {
    /// Minimum corner, meters.
    pub origin: [f64; 3],
    /// Edge length of a voxel, meters.
    pub voxel_size: f64,
    /// (L, W, H) in voxels.
    pub dims: [usize; 3],
}

impl VoxelGridSpec {
    pub fn new(origin: [f64; 3], voxel_size: f64, dims: [usize; 3]) -> Result<Self> {
        let spec = Self {
            origin,
            voxel_size,
            dims,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// The SemanticKITTI protocol grid: x ∈ [0, 51.2), y ∈ [−25.6, 25.6),
    /// z ∈ [−2, 4.4) at 0.2 m, i.e. 256×256×32 voxels.
    pub fn full_scale() -> Self {
        Self {
            origin: [0.0, -25.6, -2.0],
            voxel_size: 0.2,
            dims: [256, 256, 32],
        }
    }

    /// Desk-scale grid used for synthetic training: 64×64×8 at 0.2 m.
    pub fn desk() -> Self {
        Self {
            origin: [0.0, -6.4, -0.8],
            voxel_size: 0.2,
            dims: [64, 64, 8],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.voxel_size > 0.0 && self.voxel_size.is_finite()) {
            return Err(Error::invalid(format!(
                "voxel size must be positive, got {}",
                self.voxel_size
            )));
        }
        if self.dims.iter().any(|&d| d == 0) {
            return Err(Error::invalid(format!(
                "grid dims must be >= 1, got {:?}",
                self.dims
            )));
        }
        if self.origin.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("grid origin must be finite"));
        }
        Ok(())
    }

    pub fn num_voxels(&self) -> usize {
        self.dims.iter().product()
    }

    /// Metric extent of each axis.
    pub fn extent(&self) -> [f64; 3] {
        [0, 1, 2].map(|k| self.dims[k] as f64 * self.voxel_size)
    }

    /// Linear voxel order: x-major, then y, then z.
    pub fn linear_index(&self, idx: VoxelIndex) -> usize {
        (idx.x * self.dims[1] + idx.y) * self.dims[2] + idx.z
    }

    pub fn index_of_linear(&self, linear: usize) -> VoxelIndex {
        let z = linear % self.dims[2];
        let xy = linear / self.dims[2];
        VoxelIndex {
            x: xy / self.dims[1],
            y: xy % self.dims[1],
            z,
        }
    }

    pub fn voxel_center(&self, idx: VoxelIndex) -> [f64; 3] {
        let idx = idx.to_array();
        [0, 1, 2].map(|k| self.origin[k] + (idx[k] as f64 + 0.5) * self.voxel_size)
    }

    /// Voxel containing `p`, or `None` outside the half-open grid box.
    pub fn locate(&self, p: [f64; 3]) -> Option<VoxelIndex> {
        let mut out = [0usize; 3];
        for k in 0..3 {
            let q = (p[k] - self.origin[k]) / self.voxel_size;
            // Coordinates arrive as f32; snap values within rounding noise of a
            // bin edge onto the edge so boundary points bin consistently.
            let r = q.round();
            let u = if (q - r).abs() < LOCATE_SNAP { r } else { q.floor() };
            if !(u >= 0.0 && u < self.dims[k] as f64) {
                return None;
            }
            out[k] = u as usize;
        }
        Some(VoxelIndex::from_array(out))
    }

    /// The same grid coarsened by `factor` per axis.
    pub fn downsampled(&self, factor: usize) -> Result<Self> {
        if factor == 0 || self.dims.iter().any(|d| d % factor != 0) {
            return Err(Error::invalid(format!(
                "grid dims {:?} not divisible by {factor}",
                self.dims
            )));
        }
        Ok(Self {
            origin: self.origin,
            voxel_size: self.voxel_size * factor as f64,
            dims: self.dims.map(|d| d / factor),
        })
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PointCloud {
    /// Meters.
    pub positions: Vec<[f32; 3]>,
    /// Reflectance in [0, 1].
    pub intensity: Vec<f32>,
}

impl PointCloud {
    pub fn new(positions: Vec<[f32; 3]>, intensity: Vec<f32>) -> Result<Self> {
        if positions.len() != intensity.len() {
            return Err(Error::shape(format!(
                "{} positions but {} intensities",
                positions.len(),
                intensity.len()
            )));
        }
        if positions.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::invalid("point coordinates must be finite"));
        }
        Ok(Self {
            positions,
            intensity,
        })
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn position_f64(&self, i: usize) -> [f64; 3] {
        self.positions[i].map(f64::from)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct VoxelIndex {
    pub x: usize,
    pub y: usize,
    pub z: usize,
}

impl VoxelIndex {
    pub fn new(x: usize, y: usize, z: usize) -> Self {
        Self { x, y, z }
    }

    pub fn to_array(self) -> [usize; 3] {
        [self.x, self.y, self.z]
    }

    pub fn from_array(a: [usize; 3]) -> Self {
        Self {
            x: a[0],
            y: a[1],
            z: a[2],
        }
    }
}

/// Per-voxel class ids (0 = empty) plus the invalid-voxel mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelGrid {
    dims: [usize; 3],
    labels: Vec<u8>,
    invalid: Vec<bool>,
}

impl LabelGrid {
    pub fn new(dims: [usize; 3], labels: Vec<u8>, invalid: Vec<bool>) -> Result<Self> {
        let n: usize = dims.iter().product();
        if labels.len() != n || invalid.len() != n {
            return Err(Error::shape(format!(
                "label grid {dims:?} needs {n} cells, got {} labels / {} invalid flags",
                labels.len(),
                invalid.len()
            )));
        }
        Ok(Self {
            dims,
            labels,
            invalid,
        })
    }

    pub fn empty(dims: [usize; 3]) -> Self {
        let n = dims.iter().product();
        Self {
            dims,
            labels: vec![0; n],
            invalid: vec![false; n],
        }
    }

    pub fn from_labels(dims: [usize; 3], labels: Vec<u8>) -> Result<Self> {
        let n = labels.len();
        Self::new(dims, labels, vec![false; n])
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn labels_mut(&mut self) -> &mut [u8] {
        &mut self.labels
    }

    pub fn invalid(&self) -> &[bool] {
        &self.invalid
    }

    pub fn invalid_mut(&mut self) -> &mut [bool] {
        &mut self.invalid
    }

    pub fn offset(&self, x: usize, y: usize, z: usize) -> usize {
        (x * self.dims[1] + y) * self.dims[2] + z
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> u8 {
        self.labels[self.offset(x, y, z)]
    }

    pub fn set(&mut self, x: usize, y: usize, z: usize, label: u8) {
        let o = self.offset(x, y, z);
        self.labels[o] = label;
    }

    pub fn is_invalid(&self, x: usize, y: usize, z: usize) -> bool {
        self.invalid[self.offset(x, y, z)]
    }

    pub fn max_label(&self) -> u8 {
        self.labels.iter().copied().max().unwrap_or(0)
    }

    /// Binary occupancy: label > 0.
    pub fn occupancy(&self) -> OccupancyGrid {
        OccupancyGrid {
            dims: self.dims,
            cells: self.labels.iter().map(|&l| l > 0).collect(),
        }
    }
}

/// Boolean voxel grid in the same x-major linear order as [`LabelGrid`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OccupancyGrid {
    dims: [usize; 3],
    cells: Vec<bool>,
}

impl OccupancyGrid {
    pub fn new(dims: [usize; 3], cells: Vec<bool>) -> Result<Self> {
        let n: usize = dims.iter().product();
        if cells.len() != n {
            return Err(Error::shape(format!(
                "occupancy grid {dims:?} needs {n} cells, got {}",
                cells.len()
            )));
        }
        Ok(Self { dims, cells })
    }

    pub fn empty(dims: [usize; 3]) -> Self {
        Self {
            dims,
            cells: vec![false; dims.iter().product()],
        }
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn cells(&self) -> &[bool] {
        &self.cells
    }

    pub fn cells_mut(&mut self) -> &mut [bool] {
        &mut self.cells
    }

    pub fn offset(&self, x: usize, y: usize, z: usize) -> usize {
        (x * self.dims[1] + y) * self.dims[2] + z
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> bool {
        self.cells[self.offset(x, y, z)]
    }

    pub fn set(&mut self, x: usize, y: usize, z: usize, v: bool) {
        let o = self.offset(x, y, z);
        self.cells[o] = v;
    }

    pub fn count(&self) -> usize {
        self.cells.iter().filter(|&&c| c).count()
    }
}

/// Result of voxelizing a point cloud.
#[derive(Debug, Clone, PartialEq)]
pub struct Voxelization {
    /// One entry per in-range point, in point order.
    pub indices: Vec<VoxelIndex>,
    /// One flag per input point.
    pub in_range: Vec<bool>,
}

/// Maps every point to `floor((p − origin) / s)`; points outside the
/// half-open box `[origin, origin + dims·s)` are masked out.
pub fn voxelize(points: &PointCloud, spec: &VoxelGridSpec) -> Voxelization {
    let mut indices = Vec::with_capacity(points.len());
    let mut in_range = Vec::with_capacity(points.len());
    for i in 0..points.len() {
        match spec.locate(points.position_f64(i)) {
            Some(idx) => {
                indices.push(idx);
                in_range.push(true);
            }
            None => in_range.push(false),
        }
    }
    Voxelization { indices, in_range }
}

pub const POINT_FEATURE_DIM: usize = 7;

/// Per-point network input features for the in-range points.
#[derive(Debug, Clone, PartialEq)]
pub struct PointFeatures {
    /// `[x, y, z, Δx, Δy, Δz, intensity]` with Δ the offset from the voxel center.
    pub rows: Vec<[f64; POINT_FEATURE_DIM]>,
    pub voxels: Vec<VoxelIndex>,
    /// Index of each row's source point in the cloud.
    pub point_index: Vec<usize>,
}

pub fn build_point_features(points: &PointCloud, spec: &VoxelGridSpec) -> PointFeatures {
    let mut rows = Vec::with_capacity(points.len());
    let mut voxels = Vec::with_capacity(points.len());
    let mut point_index = Vec::with_capacity(points.len());
    let s = spec.voxel_size;
    for i in 0..points.len() {
        let p = points.position_f64(i);
        let Some(idx) = spec.locate(p) else { continue };
        let ia = idx.to_array();
        let mut row = [0.0; POINT_FEATURE_DIM];
        for k in 0..3 {
            row[k] = p[k];
            // Clamped because `locate` may snap a point just below an edge up.
            let u = (p[k] - spec.origin[k]) / s - ia[k] as f64;
            row[3 + k] = (u.max(0.0) - 0.5) * s;
        }
        row[6] = f64::from(points.intensity[i]);
        rows.push(row);
        voxels.push(idx);
        point_index.push(i);
    }
    PointFeatures {
        rows,
        voxels,
        point_index,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduce {
    Max,
    Mean,
    Sum,
}

/// Groups `keys` by value: returns the ascending distinct keys and, for
/// every input position, the index of its group.
pub fn group_keys(keys: &[u64]) -> (Vec<u64>, Vec<usize>) {
    let mut order: Vec<usize> = (0..keys.len()).collect();
    order.sort_by_key(|&i| keys[i]);
    let mut unique = Vec::new();
    let mut assignment = vec![0usize; keys.len()];
    for &i in &order {
        if unique.last() != Some(&keys[i]) {
            unique.push(keys[i]);
        }
        assignment[i] = unique.len() - 1;
    }
    (unique, assignment)
}

/// Reduces rows of a row-major `M×C` matrix that share a key. Output rows
/// follow ascending key order; accumulation runs in input-row order.
pub fn scatter_reduce<T: Real>(
    features: &[T],
    channels: usize,
    keys: &[u64],
    reduce: Reduce,
) -> Result<(Vec<u64>, Vec<T>)> {
    if features.len() != keys.len() * channels {
        return Err(Error::shape(format!(
            "{} feature values for {} keys x {channels} channels",
            features.len(),
            keys.len()
        )));
    }
    let (unique, assignment) = group_keys(keys);
    let init = match reduce {
        Reduce::Max => T::neg_infinity(),
        Reduce::Mean | Reduce::Sum => T::zero(),
    };
    let mut out = vec![init; unique.len() * channels];
    let mut counts = vec![0usize; unique.len()];
    for (row, &g) in assignment.iter().enumerate() {
        counts[g] += 1;
        let src = &features[row * channels..(row + 1) * channels];
        let dst = &mut out[g * channels..(g + 1) * channels];
        for (d, &s) in dst.iter_mut().zip(src) {
            match reduce {
                Reduce::Max => {
                    if s > *d {
                        *d = s
                    }
                }
                Reduce::Mean | Reduce::Sum => *d += s,
            }
        }
    }
    if reduce == Reduce::Mean {
        for (g, &n) in counts.iter().enumerate() {
            let n = T::from_usize(n).unwrap();
            out[g * channels..(g + 1) * channels]
                .iter_mut()
                .for_each(|v| *v /= n);
        }
    }
    Ok((unique, out))
}

fn block_iter(dims: [usize; 3], factor: usize) -> Result<[usize; 3]> {
    if factor == 0 || dims.iter().any(|d| d % factor != 0) {
        return Err(Error::invalid(format!(
            "grid dims {dims:?} not divisible by factor {factor}"
        )));
    }
    Ok(dims.map(|d| d / factor))
}

/// Majority-vote label pyramid step.
///
/// Each output voxel takes the most frequent class among the valid,
/// non-empty voxels of its block (smallest id on ties, 0 if none). It is
/// invalid when every non-empty voxel of the block is invalid, or, for a
/// block with no non-empty voxel, when every voxel is invalid.
pub fn downsample_labels(grid: &LabelGrid, factor: usize) -> Result<LabelGrid> {
    let out_dims = block_iter(grid.dims, factor)?;
    let mut out = LabelGrid::empty(out_dims);
    let mut votes = [0usize; 256];
    for ox in 0..out_dims[0] {
        for oy in 0..out_dims[1] {
            for oz in 0..out_dims[2] {
                votes.iter_mut().for_each(|v| *v = 0);
                let mut nonempty = 0usize;
                let mut nonempty_invalid = 0usize;
                let mut all_invalid = true;
                for dx in 0..factor {
                    for dy in 0..factor {
                        for dz in 0..factor {
                            let o = grid.offset(ox * factor + dx, oy * factor + dy, oz * factor + dz);
                            let l = grid.labels[o];
                            let inv = grid.invalid[o];
                            all_invalid &= inv;
                            if l > 0 {
                                nonempty += 1;
                                if inv {
                                    nonempty_invalid += 1;
                                } else {
                                    votes[l as usize] += 1;
                                }
                            }
                        }
                    }
                }
                let mut best = 0u8;
                let mut best_count = 0usize;
                for (class, &count) in votes.iter().enumerate().skip(1) {
                    if count > best_count {
                        best = class as u8;
                        best_count = count;
                    }
                }
                let invalid = if nonempty > 0 {
                    nonempty_invalid == nonempty
                } else {
                    all_invalid
                };
                let o = out.offset(ox, oy, oz);
                out.labels[o] = best;
                out.invalid[o] = invalid;
            }
        }
    }
    Ok(out)
}

/// Logical-any pyramid step.
pub fn downsample_occupancy(occ: &OccupancyGrid, factor: usize) -> Result<OccupancyGrid> {
    let out_dims = block_iter(occ.dims, factor)?;
    let mut out = OccupancyGrid::empty(out_dims);
    for x in 0..occ.dims[0] {
        for y in 0..occ.dims[1] {
            for z in 0..occ.dims[2] {
                if occ.get(x, y, z) {
                    out.set(x / factor, y / factor, z / factor, true);
                }
            }
        }
    }
    Ok(out)
}

/// Column key of a voxel in the bird's-eye-view plane: `x·W + y`.
pub fn bev_key(index: VoxelIndex, spec: &VoxelGridSpec) -> u64 {
    (index.x * spec.dims[1] + index.y) as u64
}

/// Which horizontal axes are mirrored.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Flip {
    pub x: bool,
    pub y: bool,
}

impl Flip {
    pub const NONE: Flip = Flip { x: false, y: false };

    /// Each axis independently with probability 0.5.
    pub fn sample<R: Rng + ?Sized>(rng: &mut R) -> Self {
        Flip {
            x: rng.gen_bool(0.5),
            y: rng.gen_bool(0.5),
        }
    }

    pub fn is_identity(&self) -> bool {
        !self.x && !self.y
    }

    /// Reflects positions about the grid's x and/or y mid-planes.
    pub fn apply_points(&self, points: &PointCloud, spec: &VoxelGridSpec) -> PointCloud {
        let ext = spec.extent();
        let mid = [0, 1].map(|k| spec.origin[k] + 0.5 * ext[k]);
        let flags = [self.x, self.y];
        let positions = points
            .positions
            .iter()
            .map(|p| {
                let mut q = *p;
                for k in 0..2 {
                    if flags[k] {
                        q[k] = (2.0 * mid[k] - f64::from(p[k])) as f32;
                    }
                }
                q
            })
            .collect();
        PointCloud {
            positions,
            intensity: points.intensity.clone(),
        }
    }

    fn mirror_index(&self, dims: [usize; 3], x: usize, y: usize) -> (usize, usize) {
        (
            if self.x { dims[0] - 1 - x } else { x },
            if self.y { dims[1] - 1 - y } else { y },
        )
    }

    pub fn apply_labels(&self, grid: &LabelGrid) -> LabelGrid {
        let dims = grid.dims;
        let mut out = grid.clone();
        for x in 0..dims[0] {
            for y in 0..dims[1] {
                let (mx, my) = self.mirror_index(dims, x, y);
                for z in 0..dims[2] {
                    let src = grid.offset(x, y, z);
                    let dst = grid.offset(mx, my, z);
                    out.labels[dst] = grid.labels[src];
                    out.invalid[dst] = grid.invalid[src];
                }
            }
        }
        out
    }

    pub fn apply_occupancy(&self, occ: &OccupancyGrid) -> OccupancyGrid {
        let dims = occ.dims;
        let mut out = occ.clone();
        for x in 0..dims[0] {
            for y in 0..dims[1] {
                let (mx, my) = self.mirror_index(dims, x, y);
                for z in 0..dims[2] {
                    out.cells[occ.offset(mx, my, z)] = occ.cells[occ.offset(x, y, z)];
                }
            }
        }
        out
    }
}

/// Seeded x-y flip augmentation of a point cloud and its label grids.
pub fn random_flip(
    points: &PointCloud,
    grids: &[LabelGrid],
    spec: &VoxelGridSpec,
    seed: u64,
) -> (PointCloud, Vec<LabelGrid>, Flip) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let flip = Flip::sample(&mut rng);
    let pts = flip.apply_points(points, spec);
    let grids = grids.iter().map(|g| flip.apply_labels(g)).collect();
    (pts, grids, flip)
}

#[cfg(test)]
mod tests {
    use std::collections::{BTreeMap, BTreeSet};

    use rand::Rng;

    use super::*;

    fn kitti() -> VoxelGridSpec {
        VoxelGridSpec::full_scale()
    }

    fn cloud(pts: &[[f32; 3]]) -> PointCloud {
        PointCloud::new(pts.to_vec(), vec![0.5; pts.len()]).unwrap()
    }

    #[test]
    fn spec_validation() {
        assert!(VoxelGridSpec::new([0.0; 3], 0.0, [1, 1, 1]).is_err());
        assert!(VoxelGridSpec::new([0.0; 3], 0.2, [1, 0, 1]).is_err());
        let s = VoxelGridSpec::new([0.0; 3], 0.2, [256, 256, 32]).unwrap();
        let e = s.extent();
        assert!((e[0] - 51.2).abs() < 1e-9 && (e[2] - 6.4).abs() < 1e-9);
    }

    #[test]
    fn voxelize_examples() {
        let v = voxelize(&cloud(&[[10.0, 3.0, 1.0]]), &kitti());
        assert_eq!(v.indices, vec![VoxelIndex::new(50, 143, 15)]);

        let v = voxelize(&cloud(&[[0.0, -25.6, -2.0]]), &kitti());
        assert_eq!(v.indices, vec![VoxelIndex::new(0, 0, 0)]);

        let v = voxelize(&cloud(&[[51.2, 25.6, 4.4]]), &kitti());
        assert!(v.indices.is_empty());
        assert_eq!(v.in_range, vec![false]);
    }

    #[test]
    fn recentering_is_stable() {
        let spec = kitti();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..2000 {
            let idx = VoxelIndex::new(
                rng.gen_range(0..256),
                rng.gen_range(0..256),
                rng.gen_range(0..32),
            );
            assert_eq!(spec.locate(spec.voxel_center(idx)), Some(idx));
        }
    }

    #[test]
    fn point_feature_offsets() {
        let spec = kitti();
        let f = build_point_features(&cloud(&[[0.1, -25.5, -1.9], [0.0, -25.6, -2.0]]), &spec);
        assert_eq!(f.rows.len(), 2);
        for k in 3..6 {
            assert!(f.rows[0][k].abs() < 1e-6, "{:?}", f.rows[0]);
            assert!((f.rows[1][k] + 0.1).abs() < 1e-6, "{:?}", f.rows[1]);
        }
        assert_eq!(f.rows[0][6], 0.5);
    }

    #[test]
    fn point_feature_offsets_bounded_for_random_points() {
        let spec = kitti();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let pts: Vec<[f32; 3]> = (0..10_000)
            .map(|_| {
                [
                    rng.gen_range(0.0..51.2),
                    rng.gen_range(-25.6..25.6),
                    rng.gen_range(-2.0..4.4),
                ]
            })
            .collect();
        let f = build_point_features(&cloud(&pts), &spec);
        let half = spec.voxel_size / 2.0;
        for row in &f.rows {
            for k in 3..6 {
                assert!(row[k] >= -half && row[k] < half, "{row:?}");
            }
        }
    }

    #[test]
    fn scatter_reduce_examples() {
        let (k, r) = scatter_reduce(&[1.0f64, 2.0, 3.0, 0.0], 2, &[7, 7], Reduce::Max).unwrap();
        assert_eq!(k, vec![7]);
        assert_eq!(r, vec![3.0, 2.0]);
        for reduce in [Reduce::Max, Reduce::Mean, Reduce::Sum] {
            let (k, r) = scatter_reduce(&[4.0f64, -1.5], 2, &[3], reduce).unwrap();
            assert_eq!(k, vec![3]);
            assert_eq!(r, vec![4.0, -1.5]);
        }
        let (k, r) = scatter_reduce::<f64>(&[], 3, &[], Reduce::Sum).unwrap();
        assert!(k.is_empty() && r.is_empty());
        assert!(scatter_reduce(&[1.0f64], 2, &[0], Reduce::Sum).is_err());
    }

    #[test]
    fn scatter_max_is_idempotent() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let keys: Vec<u64> = (0..200).map(|_| rng.gen_range(0..20)).collect();
        let feats: Vec<f64> = (0..400).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let (u, r) = scatter_reduce(&feats, 2, &keys, Reduce::Max).unwrap();
        let (u2, r2) = scatter_reduce(&r, 2, &u, Reduce::Max).unwrap();
        assert_eq!(u, u2);
        assert_eq!(r, r2);
    }

    #[test]
    fn downsample_label_examples() {
        let mk = |vals: [u8; 8]| {
            let g = LabelGrid::from_labels([2, 2, 2], vals.to_vec()).unwrap();
            downsample_labels(&g, 2).unwrap()
        };
        assert_eq!(mk([3, 3, 3, 0, 0, 0, 0, 0]).labels(), &[3]);
        assert_eq!(mk([2, 2, 5, 5, 0, 0, 0, 0]).labels(), &[2]);
        assert_eq!(mk([5, 5, 2, 2, 0, 0, 0, 0]).labels(), &[2]);
        let z = mk([0; 8]);
        assert_eq!(z.labels(), &[0]);
        assert_eq!(z.invalid(), &[false]);
        assert!(downsample_labels(&LabelGrid::empty([3, 2, 2]), 2).is_err());
    }

    #[test]
    fn downsample_label_tie_break_exhaustive_two_classes() {
        // Every assignment of a block to {0, a, b}: the result is the
        // strict majority, or the smaller id on a tie.
        let (a, b) = (4u8, 2u8);
        let mut assignment = [0u8; 8];
        for code in 0..3usize.pow(8) {
            let mut c = code;
            for slot in assignment.iter_mut() {
                *slot = [0, a, b][c % 3];
                c /= 3;
            }
            let g = LabelGrid::from_labels([2, 2, 2], assignment.to_vec()).unwrap();
            let out = downsample_labels(&g, 2).unwrap().labels()[0];
            let na = assignment.iter().filter(|&&v| v == a).count();
            let nb = assignment.iter().filter(|&&v| v == b).count();
            let want = if na == 0 && nb == 0 {
                0
            } else if na > nb {
                a
            } else if nb > na {
                b
            } else {
                a.min(b)
            };
            assert_eq!(out, want, "{assignment:?}");
        }
    }

    #[test]
    fn downsample_label_invalid_rules() {
        let labels = vec![3, 3, 0, 0, 0, 0, 0, 0];
        let mut invalid = vec![false; 8];
        invalid[0] = true;
        let g = LabelGrid::new([2, 2, 2], labels.clone(), invalid.clone()).unwrap();
        let out = downsample_labels(&g, 2).unwrap();
        assert_eq!((out.labels()[0], out.invalid()[0]), (3, false));

        invalid[1] = true;
        let g = LabelGrid::new([2, 2, 2], labels, invalid).unwrap();
        let out = downsample_labels(&g, 2).unwrap();
        assert_eq!((out.labels()[0], out.invalid()[0]), (0, true));

        let g = LabelGrid::new([2, 2, 2], vec![0; 8], vec![true; 8]).unwrap();
        assert!(downsample_labels(&g, 2).unwrap().invalid()[0]);
    }

    #[test]
    fn downsample_labels_never_invent_classes() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..100 {
            let labels: Vec<u8> = (0..64).map(|_| rng.gen_range(0..6)).collect();
            let invalid: Vec<bool> = (0..64).map(|_| rng.gen_bool(0.2)).collect();
            let g = LabelGrid::new([4, 4, 4], labels, invalid).unwrap();
            let out = downsample_labels(&g, 2).unwrap();
            for ox in 0..2 {
                for oy in 0..2 {
                    for oz in 0..2 {
                        let l = out.get(ox, oy, oz);
                        if l == 0 {
                            continue;
                        }
                        let mut found = false;
                        for d in 0..8 {
                            let (dx, dy, dz) = (d & 1, (d >> 1) & 1, d >> 2);
                            found |= g.get(2 * ox + dx, 2 * oy + dy, 2 * oz + dz) == l;
                        }
                        assert!(found);
                    }
                }
            }
        }
    }

    #[test]
    fn downsample_occupancy_examples() {
        let mut g = OccupancyGrid::empty([2, 2, 2]);
        assert_eq!(downsample_occupancy(&g, 2).unwrap().cells(), &[false]);
        g.set(1, 0, 1, true);
        assert_eq!(downsample_occupancy(&g, 2).unwrap().cells(), &[true]);
        assert!(downsample_occupancy(&OccupancyGrid::empty([2, 3, 2]), 2).is_err());
    }

    #[test]
    fn downsample_occupancy_exhaustive_on_4_cubed() {
        // OR over the 8 children, checked for every single-voxel and a
        // sweep of random patterns on a 4³ grid.
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for trial in 0..(64 + 200) {
            let cells: Vec<bool> = if trial < 64 {
                (0..64).map(|i| i == trial).collect()
            } else {
                (0..64).map(|_| rng.gen_bool(0.1)).collect()
            };
            let g = OccupancyGrid::new([4, 4, 4], cells).unwrap();
            let out = downsample_occupancy(&g, 2).unwrap();
            for ox in 0..2 {
                for oy in 0..2 {
                    for oz in 0..2 {
                        let mut any = false;
                        for d in 0..8 {
                            any |= g.get(2 * ox + (d & 1), 2 * oy + ((d >> 1) & 1), 2 * oz + (d >> 2));
                        }
                        assert_eq!(out.get(ox, oy, oz), any);
                    }
                }
            }
        }
    }

    #[test]
    fn downsample_occupancy_matches_max_pool_on_8_cubed() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let cells: Vec<bool> = (0..512).map(|_| rng.gen_bool(0.05)).collect();
        let g = OccupancyGrid::new([8, 8, 8], cells).unwrap();
        let out = downsample_occupancy(&g, 2).unwrap();
        let mut pooled = [0u8; 64];
        for x in 0..8 {
            for y in 0..8 {
                for z in 0..8 {
                    let o = ((x / 2) * 4 + y / 2) * 4 + z / 2;
                    pooled[o] = pooled[o].max(g.get(x, y, z) as u8);
                }
            }
        }
        for (o, &p) in pooled.iter().enumerate() {
            assert_eq!(out.cells()[o], p == 1);
        }
    }

    #[test]
    fn bev_key_examples() {
        let spec = kitti();
        assert_eq!(bev_key(VoxelIndex::new(0, 0, 17), &spec), 0);
        assert_eq!(bev_key(VoxelIndex::new(1, 0, 5), &spec), 256);
        let small = VoxelGridSpec::new([0.0; 3], 1.0, [5, 6, 3]).unwrap();
        let mut by_key: BTreeMap<u64, BTreeSet<(usize, usize)>> = BTreeMap::new();
        for x in 0..5 {
            for y in 0..6 {
                for z in 0..3 {
                    by_key
                        .entry(bev_key(VoxelIndex::new(x, y, z), &small))
                        .or_default()
                        .insert((x, y));
                }
            }
        }
        assert_eq!(by_key.len(), 30);
        assert!(by_key.values().all(|cols| cols.len() == 1));
    }

    fn random_in_range_cloud(spec: &VoxelGridSpec, n: usize, seed: u64) -> PointCloud {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ext = spec.extent();
        let pts = (0..n)
            .map(|_| [0, 1, 2].map(|k| (spec.origin[k] + rng.gen_range(0.01..0.99) * ext[k]) as f32))
            .collect();
        PointCloud::new(pts, vec![0.25; n]).unwrap()
    }

    #[test]
    fn flip_identity_and_involution() {
        let spec = VoxelGridSpec::desk();
        let pts = random_in_range_cloud(&spec, 50, 1);
        let mut labels = LabelGrid::empty(spec.dims);
        labels.set(3, 5, 1, 7);
        let no_flip_seed = (0..64)
            .find(|&s| Flip::sample(&mut ChaCha8Rng::seed_from_u64(s)).is_identity())
            .unwrap();
        let (p, g, f) = random_flip(&pts, std::slice::from_ref(&labels), &spec, no_flip_seed);
        assert!(f.is_identity());
        assert_eq!(p, pts);
        assert_eq!(g[0], labels);

        let both = Flip { x: true, y: true };
        let twice = both.apply_points(&both.apply_points(&pts, &spec), &spec);
        for (a, b) in twice.positions.iter().zip(&pts.positions) {
            for k in 0..3 {
                assert!((a[k] - b[k]).abs() < 1e-5);
            }
        }
        assert_eq!(both.apply_labels(&both.apply_labels(&labels)), labels);
    }

    #[test]
    fn flipped_points_voxelize_to_mirrored_indices() {
        let spec = VoxelGridSpec::desk();
        let pts = random_in_range_cloud(&spec, 500, 2);
        let before = voxelize(&pts, &spec);
        for flip in [
            Flip { x: true, y: false },
            Flip { x: false, y: true },
            Flip { x: true, y: true },
        ] {
            let after = voxelize(&flip.apply_points(&pts, &spec), &spec);
            assert_eq!(after.indices.len(), before.indices.len());
            for (a, b) in after.indices.iter().zip(&before.indices) {
                let mx = if flip.x { spec.dims[0] - 1 - b.x } else { b.x };
                let my = if flip.y { spec.dims[1] - 1 - b.y } else { b.y };
                assert_eq!(*a, VoxelIndex::new(mx, my, b.z));
            }
            // Grid contents move with the points.
            let mut grid = LabelGrid::empty(spec.dims);
            for b in &before.indices {
                grid.set(b.x, b.y, b.z, 1);
            }
            let flipped = flip.apply_labels(&grid);
            for a in &after.indices {
                assert_eq!(flipped.get(a.x, a.y, a.z), 1);
            }
        }
    }
}
