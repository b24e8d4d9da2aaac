//! Procedural scenes: a road plane with boxes and poles, observed by a
//! simulated scanning sensor.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::grid::{voxelize, LabelGrid, OccupancyGrid, PointCloud, VoxelGridSpec};

pub const ROAD: u8 = 9;
pub const CAR: u8 = 1;
pub const BUILDING: u8 = 13;
pub const POLE: u8 = 18;

/// One training or evaluation example.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneSample {
    pub id: String,
    pub points: PointCloud,
    pub input_occupancy: OccupancyGrid,
    pub gt: LabelGrid,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    /// Sensor position in meters; `None` puts it just inside the grid's
    /// low-x face, centered in y, one meter above the road.
    pub sensor: Option<[f64; 3]>,
    pub azimuth_steps: usize,
    pub elevation_steps: usize,
    /// Beam elevation range in degrees.
    pub elevation_deg: (f64, f64),
    pub boxes: (usize, usize),
    pub poles: (usize, usize),
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            sensor: None,
            azimuth_steps: 720,
            elevation_steps: 32,
            elevation_deg: (-30.0, 10.0),
            boxes: (1, 6),
            poles: (0, 4),
        }
    }
}

impl SynthConfig {
    pub fn sensor_position(&self, spec: &VoxelGridSpec) -> [f64; 3] {
        self.sensor.unwrap_or_else(|| {
            let e = spec.extent();
            let s = spec.voxel_size;
            let top = spec.origin[2] + e[2] - s / 2.0;
            [
                spec.origin[0] + s / 2.0,
                spec.origin[1] + e[1] / 2.0,
                (spec.origin[2] + s + 1.0).min(top),
            ]
        })
    }
}

fn intensity_of(class: u8) -> f32 {
    match class {
        ROAD => 0.1,
        CAR => 0.8,
        BUILDING => 0.3,
        POLE => 0.55,
        _ => 0.5,
    }
}

/// Meters to a voxel count along one axis, at least one.
fn span(meters: f64, s: f64) -> usize {
    ((meters / s).round() as usize).max(1)
}

fn fill_box(gt: &mut LabelGrid, lo: [usize; 3], size: [usize; 3], class: u8) {
    let d = gt.dims();
    for x in lo[0]..(lo[0] + size[0]).min(d[0]) {
        for y in lo[1]..(lo[1] + size[1]).min(d[1]) {
            for z in lo[2]..(lo[2] + size[2]).min(d[2]) {
                gt.set(x, y, z, class);
            }
        }
    }
}

/// Ground truth of the scene layout, before observation.
fn layout(rng: &mut ChaCha8Rng, spec: &VoxelGridSpec, cfg: &SynthConfig, sensor_voxel: [usize; 3]) -> LabelGrid {
    let d = spec.dims;
    let s = spec.voxel_size;
    let mut gt = LabelGrid::empty(d);
    fill_box(&mut gt, [0, 0, 0], [d[0], d[1], 1], ROAD);
    let clear = span(1.5, s);
    let n_boxes = rng.gen_range(cfg.boxes.0..=cfg.boxes.1);
    for _ in 0..n_boxes {
        let (class, size) = if rng.gen_bool(0.5) {
            let size = [
                span(rng.gen_range(3.0..4.5), s),
                span(rng.gen_range(1.5..2.0), s),
                span(rng.gen_range(1.0..1.5), s),
            ];
            (CAR, size)
        } else {
            let size = [
                span(rng.gen_range(2.0..5.0), s),
                span(rng.gen_range(2.0..5.0), s),
                d[2],
            ];
            (BUILDING, size)
        };
        let size = [size[0].min(d[0] / 2), size[1].min(d[1] / 2), size[2].min(d[2] - 1)];
        let x0 = rng.gen_range(clear.min(d[0] - size[0])..=d[0] - size[0]);
        let y0 = rng.gen_range(0..=d[1] - size[1]);
        fill_box(&mut gt, [x0, y0, 1], size, class);
    }
    let n_poles = rng.gen_range(cfg.poles.0..=cfg.poles.1);
    for _ in 0..n_poles {
        let x = rng.gen_range(clear.min(d[0] - 1)..d[0]);
        let y = rng.gen_range(0..d[1]);
        fill_box(&mut gt, [x, y, 1], [1, 1, d[2] - 1], POLE);
    }
    // Keep the sensor's own column free.
    for z in 1..d[2] {
        gt.set(sensor_voxel[0], sensor_voxel[1], z, 0);
    }
    gt
}

/// First occupied voxel along a ray, with the distance at which the ray
/// enters it. Voxel-traversal in grid units.
pub fn march(gt: &LabelGrid, spec: &VoxelGridSpec, origin: [f64; 3], dir: [f64; 3]) -> Option<([usize; 3], f64)> {
    let s = spec.voxel_size;
    let d = spec.dims;
    let u: [f64; 3] = std::array::from_fn(|k| (origin[k] - spec.origin[k]) / s);
    let mut cell = [0isize; 3];
    let mut step = [0isize; 3];
    let mut t_max = [f64::INFINITY; 3];
    let mut t_delta = [f64::INFINITY; 3];
    for k in 0..3 {
        if u[k] < 0.0 || u[k] >= d[k] as f64 {
            return None;
        }
        cell[k] = u[k].floor() as isize;
        if dir[k] > 0.0 {
            step[k] = 1;
            t_max[k] = (cell[k] as f64 + 1.0 - u[k]) / dir[k];
            t_delta[k] = 1.0 / dir[k];
        } else if dir[k] < 0.0 {
            step[k] = -1;
            t_max[k] = (u[k] - cell[k] as f64) / -dir[k];
            t_delta[k] = -1.0 / dir[k];
        }
    }
    let mut t = 0.0;
    loop {
        let c = [cell[0] as usize, cell[1] as usize, cell[2] as usize];
        if gt.get(c[0], c[1], c[2]) != 0 {
            return Some((c, t * s));
        }
        let k = (0..3)
            .min_by(|&a, &b| t_max[a].partial_cmp(&t_max[b]).unwrap())
            .unwrap();
        t = t_max[k];
        t_max[k] += t_delta[k];
        cell[k] += step[k];
        if cell[k] < 0 || cell[k] >= d[k] as isize {
            return None;
        }
    }
}

/// Unit beam directions of the simulated sensor.
pub fn beam_directions(cfg: &SynthConfig) -> Vec<[f64; 3]> {
    let mut dirs = Vec::with_capacity(cfg.azimuth_steps * cfg.elevation_steps);
    let (lo, hi) = cfg.elevation_deg;
    for e in 0..cfg.elevation_steps {
        let frac = if cfg.elevation_steps > 1 {
            e as f64 / (cfg.elevation_steps - 1) as f64
        } else {
            0.5
        };
        let el = (lo + (hi - lo) * frac).to_radians();
        for a in 0..cfg.azimuth_steps {
            // Forward half-plane, open at both ends.
            let az = ((a as f64 + 0.5) / cfg.azimuth_steps as f64 - 0.5) * std::f64::consts::PI;
            dirs.push([el.cos() * az.cos(), el.cos() * az.sin(), el.sin()]);
        }
    }
    dirs
}

pub fn generate_synthetic_scene(seed: u64, spec: &VoxelGridSpec) -> SceneSample {
    generate_synthetic_scene_with(seed, spec, &SynthConfig::default())
}

pub fn generate_synthetic_scene_with(seed: u64, spec: &VoxelGridSpec, cfg: &SynthConfig) -> SceneSample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sensor = cfg.sensor_position(spec);
    let sensor_voxel = spec
        .locate(sensor)
        .map(|v| v.to_array())
        .unwrap_or([0, 0, 0]);
    let gt = layout(&mut rng, spec, cfg, sensor_voxel);
    let s = spec.voxel_size;
    let margin = 0.01 * s;
    let mut positions = Vec::new();
    let mut intensity = Vec::new();
    for dir in beam_directions(cfg) {
        let Some((cell, t)) = march(&gt, spec, sensor, dir) else {
            continue;
        };
        // A little past the entry face, jittered, clamped inside the voxel.
        let depth = t + rng.gen_range(0.05..0.45) * s;
        let p: [f32; 3] = std::array::from_fn(|k| {
            let lo = spec.origin[k] + cell[k] as f64 * s;
            let v = sensor[k] + depth * dir[k] + rng.gen_range(-0.2..0.2) * s;
            v.clamp(lo + margin, lo + s - margin) as f32
        });
        let class = gt.get(cell[0], cell[1], cell[2]);
        let noise: f32 = rng.gen_range(-0.05..0.05);
        positions.push(p);
        intensity.push((intensity_of(class) + noise).clamp(0.0, 1.0));
    }
    let points = PointCloud::new(positions, intensity).expect("finite synthetic points");
    let mut occ = OccupancyGrid::empty(spec.dims);
    for v in voxelize(&points, spec).indices {
        occ.set(v.x, v.y, v.z, true);
    }
    SceneSample {
        id: format!("{seed:06}"),
        points,
        input_occupancy: occ,
        gt,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_per_seed() {
        let spec = VoxelGridSpec::desk();
        assert_eq!(generate_synthetic_scene(3, &spec), generate_synthetic_scene(3, &spec));
        assert_ne!(generate_synthetic_scene(3, &spec).gt, generate_synthetic_scene(4, &spec).gt);
    }

    #[test]
    fn points_lie_in_occupied_voxels() {
        let spec = VoxelGridSpec::desk();
        for seed in 0..5 {
            let s = generate_synthetic_scene(seed, &spec);
            assert!(s.points.len() > 1000);
            let v = voxelize(&s.points, &spec);
            assert!(v.in_range.iter().all(|&b| b));
            for idx in v.indices {
                assert_ne!(s.gt.get(idx.x, idx.y, idx.z), 0);
            }
            assert!(s.gt.invalid().iter().all(|&i| !i));
            let gt_occ = s.gt.occupancy();
            for (a, b) in s.input_occupancy.cells().iter().zip(gt_occ.cells()) {
                assert!(!a || *b);
            }
        }
    }

    #[test]
    fn march_stops_at_first_wall() {
        let spec = VoxelGridSpec::new([0.0; 3], 1.0, [10, 3, 3]).unwrap();
        let mut gt = LabelGrid::empty([10, 3, 3]);
        gt.set(6, 1, 1, 5);
        gt.set(8, 1, 1, 5);
        let hit = march(&gt, &spec, [0.5, 1.5, 1.5], [1.0, 0.0, 0.0]).unwrap();
        assert_eq!(hit.0, [6, 1, 1]);
        assert!((hit.1 - 5.5).abs() < 1e-12);
        assert!(march(&gt, &spec, [0.5, 0.5, 0.5], [1.0, 0.0, 0.0]).is_none());
    }
}
