//! On-disk formats: point clouds, packed bit masks, voxel labels,
//! checkpoints, run configuration and dataset directories.
//!
//! All integers and floats are little-endian.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::grid::{LabelGrid, OccupancyGrid, PointCloud, VoxelGridSpec};
use crate::network::ModelConfig;
use crate::synth::SceneSample;
use crate::tensor::{AdamConfig, AdamState, ParamRegistry, Tensor};

// ---------------------------------------------------------------- points

pub fn encode_points(points: &PointCloud) -> Vec<u8> {
    let mut out = Vec::with_capacity(points.len() * 16);
    for (p, &i) in points.positions.iter().zip(&points.intensity) {
        for v in [p[0], p[1], p[2], i] {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode_points(bytes: &[u8], path: &Path) -> Result<PointCloud> {
    if bytes.len() % 16 != 0 {
        return Err(Error::format(
            path,
            format!("{} bytes is not a whole number of 16-byte points", bytes.len()),
        ));
    }
    let f = |c: &[u8]| f32::from_le_bytes([c[0], c[1], c[2], c[3]]);
    let mut positions = Vec::with_capacity(bytes.len() / 16);
    let mut intensity = Vec::with_capacity(bytes.len() / 16);
    for rec in bytes.chunks_exact(16) {
        positions.push([f(&rec[0..4]), f(&rec[4..8]), f(&rec[8..12])]);
        intensity.push(f(&rec[12..16]));
    }
    PointCloud::new(positions, intensity).map_err(|e| Error::format(path, e.to_string()))
}

/// `x, y, z, intensity` as consecutive 32-bit floats per point.
pub fn read_points(path: impl AsRef<Path>) -> Result<PointCloud> {
    let path = path.as_ref();
    decode_points(&fs::read(path)?, path)
}

pub fn write_points(path: impl AsRef<Path>, points: &PointCloud) -> Result<()> {
    fs::write(path, encode_points(points))?;
    Ok(())
}

// ------------------------------------------------------------ bit masks

/// Eight flags per byte, most significant bit first; a trailing partial
/// byte is zero-padded.
pub fn pack_bits(bits: &[bool]) -> Vec<u8> {
    bits.chunks(8)
        .map(|c| c.iter().enumerate().fold(0u8, |acc, (i, &b)| acc | ((b as u8) << (7 - i))))
        .collect()
}

pub fn unpack_bits(bytes: &[u8], count: usize) -> Vec<bool> {
    (0..count).map(|i| bytes[i / 8] >> (7 - i % 8) & 1 == 1).collect()
}

pub fn read_packed_bits(path: impl AsRef<Path>, expected_count: usize) -> Result<Vec<bool>> {
    let path = path.as_ref();
    let bytes = fs::read(path)?;
    let want = expected_count.div_ceil(8);
    if bytes.len() != want {
        return Err(Error::format(
            path,
            format!("{} bytes, expected {want} for {expected_count} flags", bytes.len()),
        ));
    }
    Ok(unpack_bits(&bytes, expected_count))
}

pub fn write_packed_bits(path: impl AsRef<Path>, bits: &[bool]) -> Result<()> {
    fs::write(path, pack_bits(bits))?;
    Ok(())
}

// --------------------------------------------------------------- labels

/// Bijection between raw dataset ids and training classes `0..=C_n`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelRemap {
    forward: BTreeMap<u32, u8>,
    inverse: BTreeMap<u8, u32>,
}

/// Raw id for each training class 0..=19.
pub const DEFAULT_REMAP: [(u32, u8); 20] = [
    (0, 0),
    (10, 1),
    (11, 2),
    (15, 3),
    (18, 4),
    (20, 5),
    (30, 6),
    (31, 7),
    (32, 8),
    (40, 9),
    (44, 10),
    (48, 11),
    (49, 12),
    (50, 13),
    (51, 14),
    (70, 15),
    (71, 16),
    (72, 17),
    (80, 18),
    (81, 19),
];

impl Default for LabelRemap {
    fn default() -> Self {
        Self::from_pairs(&DEFAULT_REMAP).expect("default table is a bijection")
    }
}

impl LabelRemap {
    pub fn from_pairs(pairs: &[(u32, u8)]) -> Result<Self> {
        let mut forward = BTreeMap::new();
        let mut inverse = BTreeMap::new();
        for &(raw, class) in pairs {
            if forward.insert(raw, class).is_some() {
                return Err(Error::Config(format!("remap: raw id {raw} listed twice")));
            }
            if inverse.insert(class, raw).is_some() {
                return Err(Error::Config(format!("remap: class {class} has two raw ids")));
            }
        }
        Ok(Self { forward, inverse })
    }

    pub fn pairs(&self) -> Vec<(u32, u8)> {
        self.forward.iter().map(|(&r, &c)| (r, c)).collect()
    }

    pub fn map(&self, raw: u32) -> Result<u8> {
        self.forward.get(&raw).copied().ok_or(Error::UnmappedLabel(raw))
    }

    pub fn unmap(&self, class: u8) -> Result<u32> {
        self.inverse
            .get(&class)
            .copied()
            .ok_or_else(|| Error::invalid(format!("class {class} has no raw id in the remap table")))
    }
}

fn voxel_count(dims: [usize; 3]) -> usize {
    dims.iter().product()
}

/// Path of the invalid mask stored next to a `.label` file.
pub fn invalid_path(label_path: &Path) -> PathBuf {
    label_path.with_extension("invalid")
}

/// Consecutive 16-bit raw ids in x-major order, remapped; the invalid mask
/// is read from the companion `.invalid` file when it exists.
pub fn read_voxel_labels(path: impl AsRef<Path>, dims: [usize; 3], remap: &LabelRemap) -> Result<LabelGrid> {
    let path = path.as_ref();
    let bytes = fs::read(path)?;
    let n = voxel_count(dims);
    if bytes.len() != 2 * n {
        return Err(Error::format(
            path,
            format!("{} bytes, expected {} for grid {dims:?}", bytes.len(), 2 * n),
        ));
    }
    let labels = bytes
        .chunks_exact(2)
        .map(|c| remap.map(u16::from_le_bytes([c[0], c[1]]) as u32))
        .collect::<Result<Vec<u8>>>()?;
    let inv = invalid_path(path);
    let invalid = if inv.exists() {
        read_packed_bits(&inv, n)?
    } else {
        vec![false; n]
    };
    LabelGrid::new(dims, labels, invalid)
}

fn encode_labels(grid: &LabelGrid, remap: &LabelRemap) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(grid.len() * 2);
    for &l in grid.labels() {
        let raw = remap.unmap(l)?;
        let raw = u16::try_from(raw).map_err(|_| Error::invalid(format!("raw id {raw} exceeds 16 bits")))?;
        out.extend_from_slice(&raw.to_le_bytes());
    }
    Ok(out)
}

/// Label file under the inverse remap; no invalid mask is written.
pub fn write_predictions(grid: &LabelGrid, path: impl AsRef<Path>, remap: &LabelRemap) -> Result<()> {
    fs::write(path, encode_labels(grid, remap)?)?;
    Ok(())
}

/// Label file plus its `.invalid` companion.
pub fn write_voxel_labels(path: impl AsRef<Path>, grid: &LabelGrid, remap: &LabelRemap) -> Result<()> {
    let path = path.as_ref();
    write_predictions(grid, path, remap)?;
    write_packed_bits(invalid_path(path), grid.invalid())
}

pub fn read_occupancy(path: impl AsRef<Path>, dims: [usize; 3]) -> Result<OccupancyGrid> {
    OccupancyGrid::new(dims, read_packed_bits(path, voxel_count(dims))?)
}

pub fn write_occupancy(path: impl AsRef<Path>, occ: &OccupancyGrid) -> Result<()> {
    write_packed_bits(path, occ.cells())
}

// ----------------------------------------------------------- checkpoints

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SSCR";
pub const CHECKPOINT_VERSION: u32 = 1;
const ADAM_FIRST: &str = "adam.m.";
const ADAM_SECOND: &str = "adam.v.";
const ADAM_STEP: &str = "adam.step";

/// `SSCR`, version, tensor count, then per tensor: name length (u16),
/// name, rank (u8), dims (u64 each), f32 payload. A CRC-32 of everything
/// before it closes the file.
pub fn encode_tensors(tensors: &BTreeMap<String, Tensor<f32>>) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let count = u32::try_from(tensors.len()).map_err(|_| Error::invalid("too many tensors"))?;
    out.extend_from_slice(&count.to_le_bytes());
    for (name, t) in tensors {
        let len = u16::try_from(name.len()).map_err(|_| Error::invalid(format!("tensor name too long: {name}")))?;
        let rank = u8::try_from(t.rank()).map_err(|_| Error::invalid(format!("rank of {name} exceeds 255")))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(rank);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::format(self.path, format!("truncated while reading {what}")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

pub fn decode_tensors(bytes: &[u8], path: &Path) -> Result<BTreeMap<String, Tensor<f32>>> {
    if bytes.len() < 4 || &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(Error::format(path, "bad magic"));
    }
    if bytes.len() < 16 {
        return Err(Error::format(path, "truncated header"));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().unwrap());
    let mut r = Reader { bytes: body, pos: 0, path };
    if r.take(4, "magic")? != CHECKPOINT_MAGIC {
        return Err(Error::format(path, "bad magic"));
    }
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::format(path, format!("unsupported version {version}")));
    }
    let count = r.u32("tensor count")?;
    let mut out = BTreeMap::new();
    for _ in 0..count {
        let len = r.u16("name length")? as usize;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| Error::format(path, "tensor name is not UTF-8"))?
            .to_string();
        let rank = r.take(1, "rank")?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            let d = r.u64("dimension")?;
            shape.push(usize::try_from(d).map_err(|_| Error::format(path, "dimension too large"))?);
        }
        let n = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| Error::format(path, format!("tensor {name} too large")))?;
        let payload = r.take(n, &format!("payload of {name}"))?;
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if out.insert(name.clone(), Tensor::new(shape, data)?).is_some() {
            return Err(Error::format(path, format!("duplicate tensor {name}")));
        }
    }
    if r.pos != body.len() {
        return Err(Error::format(path, "trailing bytes after last tensor"));
    }
    if crc32fast::hash(body) != stored {
        return Err(Error::format(path, "checksum mismatch"));
    }
    Ok(out)
}

/// Parameters plus optional optimizer state.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    pub params: ParamRegistry<f32>,
    pub adam: Option<AdamState<f32>>,
}

impl Checkpoint {
    pub fn to_tensors(&self) -> BTreeMap<String, Tensor<f32>> {
        let mut t: BTreeMap<String, Tensor<f32>> = self.params.iter().map(|(k, v)| (k.clone(), v.clone())).collect();
        if let Some(a) = &self.adam {
            for (k, v) in &a.first {
                t.insert(format!("{ADAM_FIRST}{k}"), v.clone());
            }
            for (k, v) in &a.second {
                t.insert(format!("{ADAM_SECOND}{k}"), v.clone());
            }
            t.insert(ADAM_STEP.to_string(), Tensor::scalar(a.step as f32));
        }
        t
    }

    pub fn from_tensors(tensors: BTreeMap<String, Tensor<f32>>) -> Result<Self> {
        let mut params = ParamRegistry::new();
        let mut adam = AdamState::new();
        let mut has_adam = false;
        for (k, v) in tensors {
            if let Some(p) = k.strip_prefix(ADAM_FIRST) {
                adam.first.insert(p.to_string(), v);
                has_adam = true;
            } else if let Some(p) = k.strip_prefix(ADAM_SECOND) {
                adam.second.insert(p.to_string(), v);
                has_adam = true;
            } else if k == ADAM_STEP {
                adam.step = v.data().first().copied().unwrap_or(0.0) as u64;
                has_adam = true;
            } else {
                params.insert(k, v)?;
            }
        }
        Ok(Self {
            params,
            adam: has_adam.then_some(adam),
        })
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        encode_tensors(&self.to_tensors())
    }
}

pub fn write_checkpoint(path: impl AsRef<Path>, ckpt: &Checkpoint) -> Result<()> {
    let path = path.as_ref();
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, ckpt.encode()?)?;
    fs::rename(tmp, path)?;
    Ok(())
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    Checkpoint::from_tensors(decode_tensors(&fs::read(path)?, path)?)
}

/// Checks that `loaded` has exactly the tensors of `model` with the same
/// shapes; the error names the first offending tensor.
pub fn check_params_match(model: &ParamRegistry<f32>, loaded: &ParamRegistry<f32>) -> Result<()> {
    for (name, t) in model.iter() {
        match loaded.get(name) {
            None => {
                return Err(Error::Checkpoint {
                    name: name.clone(),
                    reason: "missing from checkpoint".into(),
                })
            }
            Some(l) if l.shape() != t.shape() => {
                return Err(Error::Checkpoint {
                    name: name.clone(),
                    reason: format!("shape {:?} in checkpoint, model expects {:?}", l.shape(), t.shape()),
                })
            }
            Some(_) => {}
        }
    }
    if let Some(extra) = loaded.names().find(|n| !model.contains(n)) {
        return Err(Error::Checkpoint {
            name: extra.clone(),
            reason: "not a parameter of the configured model".into(),
        });
    }
    Ok(())
}

// ------------------------------------------------------------ key = value

/// `key = value` lines; `#` starts a comment, blank lines are skipped.
pub fn parse_key_values(text: &str) -> Result<Vec<(usize, String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`, got `{raw}`", i + 1)))?;
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() {
            return Err(Error::Config(format!("line {}: empty key", i + 1)));
        }
        out.push((i + 1, k.to_string(), v.to_string()));
    }
    Ok(out)
}

fn parse_value<T: std::str::FromStr>(line: usize, key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("line {line}: cannot parse `{v}` for {key}")))
}

fn parse_list<T: std::str::FromStr + Copy, const N: usize>(line: usize, key: &str, v: &str) -> Result<[T; N]> {
    let items: Vec<T> = v
        .split(',')
        .map(|s| parse_value(line, key, s.trim()))
        .collect::<Result<_>>()?;
    items
        .try_into()
        .map_err(|_| Error::Config(format!("line {line}: {key} needs {N} comma-separated values")))
}

fn parse_bool(line: usize, key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "on" | "1" => Ok(true),
        "false" | "off" | "0" => Ok(false),
        _ => Err(Error::Config(format!("line {line}: {key} expects true/false, got `{v}`"))),
    }
}

fn join<T: std::fmt::Display>(v: &[T]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

// ------------------------------------------------------------ run config

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSettings {
    pub adam: AdamConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Random x/y mirroring of every training sample.
    pub flip: bool,
    pub bev_weight: f64,
}

impl Default for TrainSettings {
    fn default() -> Self {
        Self {
            adam: AdamConfig::default(),
            epochs: 40,
            batch_size: 2,
            seed: 0,
            flip: true,
            bev_weight: 3.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainSettings,
    pub train_data: Option<PathBuf>,
    pub val_data: Option<PathBuf>,
    pub remap: LabelRemap,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::desk(),
            train: TrainSettings::default(),
            train_data: None,
            val_data: None,
            remap: LabelRemap::default(),
        }
    }
}

impl RunConfig {
    /// Parses a config document. `preset = desk|full` selects the base
    /// model plan wherever it appears; any `remap.<raw> = <class>` entry
    /// replaces the default remap table as a whole.
    pub fn parse(text: &str) -> Result<Self> {
        let entries = parse_key_values(text)?;
        let mut cfg = RunConfig::default();
        for (line, k, v) in &entries {
            if k == "preset" {
                cfg.model = match v.as_str() {
                    "desk" => ModelConfig::desk(),
                    "full" => ModelConfig::full_scale(),
                    _ => return Err(Error::Config(format!("line {line}: unknown preset `{v}`"))),
                };
            }
        }
        let mut remap = Vec::new();
        for (line, k, v) in &entries {
            let (line, k, v) = (*line, k.as_str(), v.as_str());
            let m = &mut cfg.model;
            let t = &mut cfg.train;
            match k {
                "preset" => {}
                "grid.origin" => m.grid.origin = parse_list(line, k, v)?,
                "grid.voxel_size" => m.grid.voxel_size = parse_value(line, k, v)?,
                "grid.dims" => m.grid.dims = parse_list(line, k, v)?,
                "model.num_classes" => m.num_classes = parse_value(line, k, v)?,
                "model.voxel_width" => m.voxel_width = parse_value(line, k, v)?,
                "model.semantic_widths" => m.semantic_widths = parse_list(line, k, v)?,
                "model.completion_widths" => m.completion_widths = parse_list(line, k, v)?,
                "model.bev_widths" => m.bev_widths = parse_list(line, k, v)?,
                "model.decoder_widths" => m.decoder_widths = parse_list(line, k, v)?,
                "model.arf_reduction" => m.arf_reduction = parse_value(line, k, v)?,
                "model.semantic_branch" => m.semantic_branch = parse_bool(line, k, v)?,
                "model.deep_supervision" => m.deep_supervision = parse_bool(line, k, v)?,
                "train.lr" => t.adam.lr = parse_value(line, k, v)?,
                "train.beta1" => t.adam.beta1 = parse_value(line, k, v)?,
                "train.beta2" => t.adam.beta2 = parse_value(line, k, v)?,
                "train.eps" => t.adam.eps = parse_value(line, k, v)?,
                "train.epochs" => t.epochs = parse_value(line, k, v)?,
                "train.batch_size" => t.batch_size = parse_value(line, k, v)?,
                "train.seed" => t.seed = parse_value(line, k, v)?,
                "train.flip" => t.flip = parse_bool(line, k, v)?,
                "loss.bev_weight" => t.bev_weight = parse_value(line, k, v)?,
                "data.train" => cfg.train_data = Some(PathBuf::from(v)),
                "data.val" => cfg.val_data = Some(PathBuf::from(v)),
                _ => {
                    if let Some(raw) = k.strip_prefix("remap.") {
                        remap.push((parse_value(line, k, raw)?, parse_value(line, k, v)?));
                    } else {
                        return Err(Error::Config(format!("line {line}: unknown key `{k}`")));
                    }
                }
            }
        }
        if !remap.is_empty() {
            cfg.remap = LabelRemap::from_pairs(&remap)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.train.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be >= 1".into()));
        }
        if !(self.train.adam.lr > 0.0) {
            return Err(Error::Config("train.lr must be positive".into()));
        }
        let max_class = self.remap.pairs().iter().map(|p| p.1).max().unwrap_or(0) as usize;
        if max_class > self.model.num_classes {
            return Err(Error::Config(format!(
                "remap produces class {max_class} but model.num_classes is {}",
                self.model.num_classes
            )));
        }
        Ok(())
    }

    /// Canonical document that parses back to `self`.
    pub fn to_text(&self) -> String {
        let m = &self.model;
        let t = &self.train;
        let mut s = String::new();
        let mut kv = |k: &str, v: String| s.push_str(&format!("{k} = {v}\n"));
        kv("grid.origin", join(&m.grid.origin));
        kv("grid.voxel_size", m.grid.voxel_size.to_string());
        kv("grid.dims", join(&m.grid.dims));
        kv("model.num_classes", m.num_classes.to_string());
        kv("model.voxel_width", m.voxel_width.to_string());
        kv("model.semantic_widths", join(&m.semantic_widths));
        kv("model.completion_widths", join(&m.completion_widths));
        kv("model.bev_widths", join(&m.bev_widths));
        kv("model.decoder_widths", join(&m.decoder_widths));
        kv("model.arf_reduction", m.arf_reduction.to_string());
        kv("model.semantic_branch", m.semantic_branch.to_string());
        kv("model.deep_supervision", m.deep_supervision.to_string());
        kv("train.lr", t.adam.lr.to_string());
        kv("train.beta1", t.adam.beta1.to_string());
        kv("train.beta2", t.adam.beta2.to_string());
        kv("train.eps", t.adam.eps.to_string());
        kv("train.epochs", t.epochs.to_string());
        kv("train.batch_size", t.batch_size.to_string());
        kv("train.seed", t.seed.to_string());
        kv("train.flip", t.flip.to_string());
        kv("loss.bev_weight", t.bev_weight.to_string());
        if let Some(p) = &self.train_data {
            kv("data.train", p.display().to_string());
        }
        if let Some(p) = &self.val_data {
            kv("data.val", p.display().to_string());
        }
        for (raw, class) in self.remap.pairs() {
            kv(&format!("remap.{raw}"), class.to_string());
        }
        s
    }
}

// -------------------------------------------------------------- datasets

pub const MANIFEST: &str = "manifest.txt";

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub grid: VoxelGridSpec,
    pub scenes: Vec<String>,
    /// Any further `key = value` entries, kept verbatim.
    pub extra: BTreeMap<String, String>,
}

impl Manifest {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        s.push_str(&format!("grid.origin = {}\n", join(&self.grid.origin)));
        s.push_str(&format!("grid.voxel_size = {}\n", self.grid.voxel_size));
        s.push_str(&format!("grid.dims = {}\n", join(&self.grid.dims)));
        for (k, v) in &self.extra {
            s.push_str(&format!("{k} = {v}\n"));
        }
        for id in &self.scenes {
            s.push_str(&format!("scene = {id}\n"));
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let (mut origin, mut size, mut dims) = (None, None, None);
        let mut scenes = Vec::new();
        let mut extra = BTreeMap::new();
        for (line, k, v) in parse_key_values(text)? {
            match k.as_str() {
                "grid.origin" => origin = Some(parse_list(line, &k, &v)?),
                "grid.voxel_size" => size = Some(parse_value(line, &k, &v)?),
                "grid.dims" => dims = Some(parse_list(line, &k, &v)?),
                "scene" => scenes.push(v),
                _ => {
                    extra.insert(k, v);
                }
            }
        }
        let missing = |k: &str| Error::Config(format!("manifest lacks {k}"));
        let grid = VoxelGridSpec::new(
            origin.ok_or_else(|| missing("grid.origin"))?,
            size.ok_or_else(|| missing("grid.voxel_size"))?,
            dims.ok_or_else(|| missing("grid.dims"))?,
        )?;
        Ok(Self { grid, scenes, extra })
    }
}

/// File paths of one scene inside a dataset directory.
pub struct ScenePaths {
    pub points: PathBuf,
    pub occupancy: PathBuf,
    pub labels: PathBuf,
}

pub fn scene_paths(dir: &Path, id: &str) -> ScenePaths {
    ScenePaths {
        points: dir.join("velodyne").join(format!("{id}.bin")),
        occupancy: dir.join("voxels").join(format!("{id}.bin")),
        labels: dir.join("voxels").join(format!("{id}.label")),
    }
}

pub fn write_scene(dir: &Path, sample: &SceneSample, remap: &LabelRemap) -> Result<()> {
    fs::create_dir_all(dir.join("velodyne"))?;
    fs::create_dir_all(dir.join("voxels"))?;
    let p = scene_paths(dir, &sample.id);
    write_points(&p.points, &sample.points)?;
    write_occupancy(&p.occupancy, &sample.input_occupancy)?;
    write_voxel_labels(&p.labels, &sample.gt, remap)
}

pub fn read_scene(dir: &Path, id: &str, grid: &VoxelGridSpec, remap: &LabelRemap) -> Result<SceneSample> {
    let p = scene_paths(dir, id);
    Ok(SceneSample {
        id: id.to_string(),
        points: read_points(&p.points)?,
        input_occupancy: read_occupancy(&p.occupancy, grid.dims)?,
        gt: read_voxel_labels(&p.labels, grid.dims, remap)?,
    })
}

pub fn write_dataset(
    dir: &Path,
    grid: &VoxelGridSpec,
    samples: &[SceneSample],
    remap: &LabelRemap,
    extra: BTreeMap<String, String>,
) -> Result<()> {
    fs::create_dir_all(dir)?;
    for s in samples {
        write_scene(dir, s, remap)?;
    }
    let manifest = Manifest {
        grid: grid.clone(),
        scenes: samples.iter().map(|s| s.id.clone()).collect(),
        extra,
    };
    fs::write(dir.join(MANIFEST), manifest.to_text())?;
    Ok(())
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    Manifest::parse(&fs::read_to_string(dir.join(MANIFEST))?)
}

pub fn read_dataset(dir: &Path, remap: &LabelRemap) -> Result<(Manifest, Vec<SceneSample>)> {
    let manifest = read_manifest(dir)?;
    let samples = manifest
        .scenes
        .iter()
        .map(|id| read_scene(dir, id, &manifest.grid, remap))
        .collect::<Result<Vec<_>>>()?;
    Ok((manifest, samples))
}
