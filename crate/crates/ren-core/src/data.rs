//! On-disk formats and the synthetic depth generator.
//!
//! Three formats, all little-endian regardless of host:
//!
//! * `RDEP` depth files — magic, version, width, height, then u16
//!   millimeter depths (0 = missing).
//! * dataset manifests — a plain-text `key = value` config block
//!   (intrinsics, joint count, crop extent, fingertip indices, optional
//!   mirror map, segmentation thresholds) followed by one
//!   whitespace-separated line per frame: depth path plus 3J world-mm
//!   coordinates.
//! * `RENC` checkpoints — model config block, named parameter tensors,
//!   and a trailing FNV-1a checksum over everything before it.
//!
//! The synthetic generator renders an articulated capsule hand by exact
//! per-pixel ray intersection, so emitted joint labels are consistent with
//! the rendered depth by construction.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::geometry::{CameraIntrinsics, CropExtent, DepthFrame, GeometryError, Pose};
use crate::nn::{Architecture, Head, Model, ModelConfig, ModelError, Param, Region, RegionSpec};
use crate::rng::RngStream;

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("truncated file at byte {offset}: expected {needed} more bytes")]
    Truncated { offset: usize, needed: usize },
    #[error("bad magic at byte {offset}: expected {expected:?}, found {found:?}")]
    BadMagic { offset: usize, expected: [u8; 4], found: [u8; 4] },
    #[error("unsupported format version {0}")]
    UnknownVersion(u16),
    #[error("checksum mismatch at byte {offset}: stored {stored:#018x}, computed {computed:#018x}")]
    ChecksumMismatch { offset: usize, stored: u64, computed: u64 },
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("unknown config key '{0}'")]
    UnknownKey(String),
    #[error("missing config key '{0}'")]
    MissingKey(&'static str),
    #[error("synthetic scene stayed empty or off-screen after {retries} retries")]
    Unrenderable { retries: usize },
    #[error("invalid synthetic spec: {0}")]
    BadSpec(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

type Result<T> = std::result::Result<T, DataError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io { path: path.to_path_buf(), source }
}

// ── byte-level helpers ─────────────────────────────────────────────────

const DEPTH_MAGIC: [u8; 4] = *b"RDEP";
const DEPTH_VERSION: u16 = 1;
const CHECKPOINT_MAGIC: [u8; 4] = *b"RENC";
const CHECKPOINT_VERSION: u16 = 1;

struct Reader<'a> {
    bytes: &'a [u8],
    offset: usize,
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Reader { bytes, offset: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.offset + n > self.bytes.len() {
            return Err(DataError::Truncated {
                offset: self.offset,
                needed: self.offset + n - self.bytes.len(),
            });
        }
        let s = &self.bytes[self.offset..self.offset + n];
        self.offset += n;
        Ok(s)
    }

    fn magic(&mut self, expected: [u8; 4]) -> Result<()> {
        let offset = self.offset;
        let found = self.take(4)?;
        if found != expected {
            return Err(DataError::BadMagic {
                offset,
                expected,
                found: [found[0], found[1], found[2], found[3]],
            });
        }
        Ok(())
    }

    fn u16(&mut self) -> Result<u16> {
        let b = self.take(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut hash = 0xcbf29ce484222325u64;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x100000001b3);
    }
    hash
}

// ── depth files ────────────────────────────────────────────────────────

/// Serializes a frame; depths round to whole millimeters (u16).
pub fn depth_file_bytes(frame: &DepthFrame) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + frame.depth.len() * 2);
    out.extend_from_slice(&DEPTH_MAGIC);
    out.extend_from_slice(&DEPTH_VERSION.to_le_bytes());
    out.extend_from_slice(&(frame.width as u32).to_le_bytes());
    out.extend_from_slice(&(frame.height as u32).to_le_bytes());
    for &d in &frame.depth {
        let q = d.round().clamp(0.0, u16::MAX as f32) as u16;
        out.extend_from_slice(&q.to_le_bytes());
    }
    out
}

pub fn write_depth_file(path: &Path, frame: &DepthFrame) -> Result<()> {
    fs::write(path, depth_file_bytes(frame)).map_err(io_err(path))
}

pub fn depth_frame_from_bytes(bytes: &[u8], intrinsics: CameraIntrinsics) -> Result<DepthFrame> {
    let mut r = Reader::new(bytes);
    r.magic(DEPTH_MAGIC)?;
    let version = r.u16()?;
    if version != DEPTH_VERSION {
        return Err(DataError::UnknownVersion(version));
    }
    let width = r.u32()? as usize;
    let height = r.u32()? as usize;
    let payload = r.take(width * height * 2)?;
    let depth: Vec<f32> = payload
        .chunks_exact(2)
        .map(|c| u16::from_le_bytes([c[0], c[1]]) as f32)
        .collect();
    Ok(DepthFrame::new(width, height, depth, intrinsics)?)
}

pub fn read_depth_file(path: &Path, intrinsics: CameraIntrinsics) -> Result<DepthFrame> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    depth_frame_from_bytes(&bytes, intrinsics)
}

// ── key = value blocks ─────────────────────────────────────────────────

/// Splits "key = value" (one space optional); returns None for blanks and
/// `#` comments.
pub fn parse_kv(line: &str) -> Option<(String, String)> {
    let trimmed = line.trim();
    if trimmed.is_empty() || trimmed.starts_with('#') {
        return None;
    }
    let (k, v) = trimmed.split_once('=')?;
    Some((k.trim().to_string(), v.trim().to_string()))
}

// ── dataset manifests ──────────────────────────────────────────────────

/// Per-dataset configuration carried in the manifest header.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetConfig {
    pub intrinsics: CameraIntrinsics,
    pub joint_count: usize,
    pub extent: CropExtent,
    pub fingertips: Vec<usize>,
    pub mirror: Option<Vec<usize>>,
    pub near_mm: f64,
    pub far_mm: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    /// depth file path, relative to the manifest location
    pub depth_path: PathBuf,
    pub pose: Pose,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub config: DatasetConfig,
    pub entries: Vec<ManifestEntry>,
    /// directory the entry paths resolve against
    pub root: PathBuf,
}

impl Dataset {
    pub fn frame_path(&self, index: usize) -> PathBuf {
        self.root.join(&self.entries[index].depth_path)
    }

    pub fn load_frame(&self, index: usize) -> Result<DepthFrame> {
        read_depth_file(&self.frame_path(index), self.config.intrinsics)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

fn parse_floats(s: &str) -> std::result::Result<Vec<f64>, String> {
    s.split_whitespace()
        .map(|t| t.parse::<f64>().map_err(|e| format!("'{t}': {e}")))
        .collect()
}

fn parse_indices(s: &str) -> std::result::Result<Vec<usize>, String> {
    s.split_whitespace()
        .map(|t| t.parse::<usize>().map_err(|e| format!("'{t}': {e}")))
        .collect()
}

fn extent_from_str(s: &str) -> std::result::Result<CropExtent, String> {
    match s {
        "hand" => Ok(CropExtent::hand()),
        "human-front" => Ok(CropExtent::human_front()),
        "human-top" => Ok(CropExtent::human_top()),
        other => {
            let v = parse_floats(other)?;
            if v.len() != 3 {
                return Err(format!("extent needs 3 values or a preset name, got '{other}'"));
            }
            CropExtent::new(v[0], v[1], v[2]).map_err(|e| e.to_string())
        }
    }
}

fn extent_to_string(e: &CropExtent) -> String {
    if *e == CropExtent::hand() {
        "hand".into()
    } else if *e == CropExtent::human_front() {
        "human-front".into()
    } else if *e == CropExtent::human_top() {
        "human-top".into()
    } else {
        format!("{} {} {}", e.ex, e.ey, e.ez)
    }
}

pub fn manifest_to_string(config: &DatasetConfig, entries: &[ManifestEntry]) -> String {
    let mut out = String::new();
    out.push_str(&format!("fx = {}\n", config.intrinsics.fx));
    out.push_str(&format!("fy = {}\n", config.intrinsics.fy));
    out.push_str(&format!("cx = {}\n", config.intrinsics.cx));
    out.push_str(&format!("cy = {}\n", config.intrinsics.cy));
    out.push_str(&format!("joints = {}\n", config.joint_count));
    out.push_str(&format!("extent = {}\n", extent_to_string(&config.extent)));
    let tips: Vec<String> = config.fingertips.iter().map(|i| i.to_string()).collect();
    out.push_str(&format!("fingertips = {}\n", tips.join(" ")));
    if let Some(m) = &config.mirror {
        let m: Vec<String> = m.iter().map(|i| i.to_string()).collect();
        out.push_str(&format!("mirror = {}\n", m.join(" ")));
    }
    out.push_str(&format!("near = {}\n", config.near_mm));
    out.push_str(&format!("far = {}\n", config.far_mm));
    out.push('\n');
    for e in entries {
        out.push_str(&e.depth_path.to_string_lossy());
        for j in &e.pose.joints {
            out.push_str(&format!(" {} {} {}", j[0], j[1], j[2]));
        }
        out.push('\n');
    }
    out
}

pub fn write_manifest(path: &Path, config: &DatasetConfig, entries: &[ManifestEntry]) -> Result<()> {
    fs::write(path, manifest_to_string(config, entries)).map_err(io_err(path))
}

pub fn manifest_from_str(text: &str, root: &Path) -> Result<Dataset> {
    let mut fx = None;
    let mut fy = None;
    let mut cx = None;
    let mut cy = None;
    let mut joints = None;
    let mut extent = None;
    let mut fingertips = Vec::new();
    let mut mirror = None;
    let mut near_mm = 100.0;
    let mut far_mm = 1500.0;
    let mut entries = Vec::new();

    let bad = |line: usize, msg: String| DataError::Parse { line, msg };

    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let trimmed = raw.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        if let Some((key, value)) = parse_kv(trimmed) {
            let fparse = |v: &str| v.parse::<f64>().map_err(|e| bad(line_no, e.to_string()));
            match key.as_str() {
                "fx" => fx = Some(fparse(&value)?),
                "fy" => fy = Some(fparse(&value)?),
                "cx" => cx = Some(fparse(&value)?),
                "cy" => cy = Some(fparse(&value)?),
                "near" => near_mm = fparse(&value)?,
                "far" => far_mm = fparse(&value)?,
                "joints" => {
                    joints = Some(value.parse::<usize>().map_err(|e| bad(line_no, e.to_string()))?)
                }
                "extent" => extent = Some(extent_from_str(&value).map_err(|m| bad(line_no, m))?),
                "fingertips" => fingertips = parse_indices(&value).map_err(|m| bad(line_no, m))?,
                "mirror" => mirror = Some(parse_indices(&value).map_err(|m| bad(line_no, m))?),
                other => return Err(DataError::UnknownKey(other.to_string())),
            }
            continue;
        }
        // entry line: path then 3J floats
        let mut parts = trimmed.split_whitespace();
        let path = parts.next().ok_or_else(|| bad(line_no, "empty entry".into()))?;
        let coords: Vec<f64> = parts
            .map(|t| t.parse::<f64>().map_err(|e| bad(line_no, format!("'{t}': {e}"))))
            .collect::<Result<_>>()?;
        let j = joints.ok_or(DataError::MissingKey("joints"))?;
        if coords.len() != 3 * j {
            return Err(bad(line_no, format!("expected {} coordinates, got {}", 3 * j, coords.len())));
        }
        if coords.iter().any(|c| !c.is_finite()) {
            return Err(bad(line_no, "non-finite coordinate".into()));
        }
        entries.push(ManifestEntry {
            depth_path: PathBuf::from(path),
            pose: Pose::from_flat(&coords),
        });
    }

    let intrinsics = CameraIntrinsics::new(
        fx.ok_or(DataError::MissingKey("fx"))?,
        fy.ok_or(DataError::MissingKey("fy"))?,
        cx.ok_or(DataError::MissingKey("cx"))?,
        cy.ok_or(DataError::MissingKey("cy"))?,
    )?;
    let joint_count = joints.ok_or(DataError::MissingKey("joints"))?;
    let config = DatasetConfig {
        intrinsics,
        joint_count,
        extent: extent.ok_or(DataError::MissingKey("extent"))?,
        fingertips,
        mirror,
        near_mm,
        far_mm,
    };
    for (i, tip) in config.fingertips.iter().enumerate() {
        if *tip >= joint_count {
            return Err(DataError::Parse {
                line: 0,
                msg: format!("fingertip {i} index {tip} outside {joint_count} joints"),
            });
        }
    }
    Ok(Dataset { config, entries, root: root.to_path_buf() })
}

pub fn read_manifest(path: &Path) -> Result<Dataset> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let root = path.parent().unwrap_or(Path::new(".")).to_path_buf();
    manifest_from_str(&text, &root)
}

// ── model config block ─────────────────────────────────────────────────

fn regions_to_string(spec: &RegionSpec) -> String {
    spec.regions()
        .iter()
        .map(|r| format!("{},{},{},{}", r.row_off, r.col_off, r.height, r.width))
        .collect::<Vec<_>>()
        .join(";")
}

/// Accepts a preset name or an explicit `row,col,h,w;...` list.
pub fn regions_from_str(s: &str, map: usize) -> Result<RegionSpec> {
    if !s.contains(',') {
        return Ok(RegionSpec::preset(s, map)?);
    }
    let mut regions = Vec::new();
    for item in s.split(';') {
        let nums: Vec<usize> = item
            .split(',')
            .map(|t| t.trim().parse::<usize>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| DataError::Parse { line: 0, msg: format!("region '{item}': {e}") })?;
        if nums.len() != 4 {
            return Err(DataError::Parse {
                line: 0,
                msg: format!("region '{item}' needs row,col,height,width"),
            });
        }
        regions.push(Region::new(nums[0], nums[1], nums[2], nums[3]));
    }
    Ok(RegionSpec::new(regions)?)
}

pub fn model_config_to_pairs(config: &ModelConfig) -> Vec<(String, String)> {
    let (c1, c2, c3) = config.stage_channels;
    vec![
        ("architecture".into(), config.architecture.name().into()),
        ("head".into(), config.head.name().into()),
        ("regions".into(), regions_to_string(&config.region_spec)),
        ("joints".into(), config.joint_count.to_string()),
        ("fc_width".into(), config.fc_width.to_string()),
        ("dropout".into(), config.dropout_rate.to_string()),
        ("channels".into(), format!("{c1} {c2} {c3}")),
        ("input_size".into(), config.input_size.to_string()),
    ]
}

pub fn model_config_from_pairs(pairs: &[(String, String)]) -> Result<ModelConfig> {
    let mut config = ModelConfig::default();
    let get = |key: &str| pairs.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str());
    let perr = |msg: String| DataError::Parse { line: 0, msg };

    if let Some(v) = get("input_size") {
        config.input_size = v.parse().map_err(|e| perr(format!("input_size: {e}")))?;
    }
    if let Some(v) = get("architecture") {
        config.architecture = Architecture::parse(v)?;
    }
    if let Some(v) = get("head") {
        config.head = Head::parse(v)?;
    }
    if let Some(v) = get("joints") {
        config.joint_count = v.parse().map_err(|e| perr(format!("joints: {e}")))?;
    }
    if let Some(v) = get("fc_width") {
        config.fc_width = v.parse().map_err(|e| perr(format!("fc_width: {e}")))?;
    }
    if let Some(v) = get("dropout") {
        config.dropout_rate = v.parse().map_err(|e| perr(format!("dropout: {e}")))?;
    }
    if let Some(v) = get("channels") {
        let c = parse_indices(v).map_err(|m| perr(format!("channels: {m}")))?;
        if c.len() != 3 {
            return Err(perr(format!("channels needs 3 values, got {}", c.len())));
        }
        config.stage_channels = (c[0], c[1], c[2]);
    }
    if let Some(v) = get("regions") {
        config.region_spec = regions_from_str(v, config.input_size / 8)?;
    } else {
        // re-derive the default preset against the configured map size
        config.region_spec = RegionSpec::nine(config.input_size / 8)?;
    }
    config.validate()?;
    Ok(config)
}

pub const MODEL_CONFIG_KEYS: &[&str] = &[
    "architecture",
    "head",
    "regions",
    "joints",
    "fc_width",
    "dropout",
    "channels",
    "input_size",
];

// ── checkpoints ────────────────────────────────────────────────────────

pub fn checkpoint_bytes(model: &Model<f32>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let config_text: String = model_config_to_pairs(model.config())
        .iter()
        .map(|(k, v)| format!("{k} = {v}\n"))
        .collect();
    out.extend_from_slice(&(config_text.len() as u32).to_le_bytes());
    out.extend_from_slice(config_text.as_bytes());
    out.extend_from_slice(&(model.params().len() as u32).to_le_bytes());
    for p in model.params() {
        out.extend_from_slice(&(p.name.len() as u16).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        out.push(p.shape.len() as u8);
        for &d in &p.shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in &p.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let checksum = fnv1a(&out);
    out.extend_from_slice(&checksum.to_le_bytes());
    out
}

pub fn save_checkpoint(path: &Path, model: &Model<f32>) -> Result<()> {
    fs::write(path, checkpoint_bytes(model)).map_err(io_err(path))
}

pub fn checkpoint_from_bytes(bytes: &[u8]) -> Result<Model<f32>> {
    if bytes.len() < 8 {
        return Err(DataError::Truncated { offset: bytes.len(), needed: 8 - bytes.len() });
    }
    let body_len = bytes.len() - 8;
    let stored = u64::from_le_bytes(bytes[body_len..].try_into().expect("8 bytes"));
    let computed = fnv1a(&bytes[..body_len]);
    if stored != computed {
        return Err(DataError::ChecksumMismatch { offset: body_len, stored, computed });
    }

    let mut r = Reader::new(&bytes[..body_len]);
    r.magic(CHECKPOINT_MAGIC)?;
    let version = r.u16()?;
    if version != CHECKPOINT_VERSION {
        return Err(DataError::UnknownVersion(version));
    }
    let config_len = r.u32()? as usize;
    let config_text = std::str::from_utf8(r.take(config_len)?)
        .map_err(|e| DataError::Parse { line: 0, msg: format!("config block: {e}") })?;
    let pairs: Vec<(String, String)> = config_text.lines().filter_map(parse_kv).collect();
    let config = model_config_from_pairs(&pairs)?;

    let param_count = r.u32()? as usize;
    let mut params = Vec::with_capacity(param_count);
    for _ in 0..param_count {
        let name_len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|e| DataError::Parse { line: 0, msg: format!("parameter name: {e}") })?
            .to_string();
        let rank = r.take(1)?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32()? as usize);
        }
        let n: usize = shape.iter().product();
        let raw = r.take(n * 4)?;
        let values: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        params.push(Param { name, shape, values });
    }
    Ok(Model::from_parts(config, params)?)
}

pub fn load_checkpoint(path: &Path) -> Result<Model<f32>> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    checkpoint_from_bytes(&bytes)
}

// ── synthetic hand generator ───────────────────────────────────────────

/// One finger: capsule chain segment lengths (mm) and capsule radius.
#[derive(Debug, Clone, PartialEq)]
pub struct FingerSpec {
    pub segment_lengths: [f64; 3],
    pub radius: f64,
}

/// Articulated capsule hand. Joints: index 0 is the palm center, then
/// three per finger from base to tip, so fingertips sit at 3, 6, 9, 12, 15
/// for the default five-finger hand (J = 16).
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticHandSpec {
    pub image_size: usize,
    pub intrinsics: CameraIntrinsics,
    pub palm_radius: f64,
    pub fingers: Vec<FingerSpec>,
    /// per-joint curl angle range, degrees
    pub curl_deg: (f64, f64),
    /// hand orientation range: absolute Euler angle bound per axis, degrees
    pub orient_deg: f64,
    /// palm center depth range, mm
    pub depth_mm: (f64, f64),
    /// lateral palm placement, mm
    pub lateral_mm: f64,
    pub retry_budget: usize,
}

impl Default for SyntheticHandSpec {
    fn default() -> Self {
        let finger = |l: f64, r: f64| FingerSpec { segment_lengths: [l, l * 0.8, l * 0.6], radius: r };
        SyntheticHandSpec {
            image_size: 96,
            intrinsics: CameraIntrinsics::new(240.0, 240.0, 48.0, 48.0).expect("valid"),
            palm_radius: 32.0,
            fingers: vec![
                finger(30.0, 7.0), // thumb-ish
                finger(34.0, 6.5),
                finger(38.0, 6.5),
                finger(34.0, 6.0),
                finger(28.0, 5.5),
            ],
            curl_deg: (0.0, 35.0),
            orient_deg: 35.0,
            depth_mm: (550.0, 750.0),
            lateral_mm: 30.0,
            retry_budget: 64,
        }
    }
}

impl SyntheticHandSpec {
    pub fn joint_count(&self) -> usize {
        1 + 3 * self.fingers.len()
    }

    pub fn fingertip_indices(&self) -> Vec<usize> {
        (0..self.fingers.len()).map(|f| 3 + 3 * f).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_size < 8 {
            return Err(DataError::BadSpec(format!("image size {}", self.image_size)));
        }
        if !self.palm_radius.is_finite() || self.palm_radius < 0.0 {
            return Err(DataError::BadSpec(format!("palm radius {}", self.palm_radius)));
        }
        for (i, f) in self.fingers.iter().enumerate() {
            if f.radius <= 0.0 || f.segment_lengths.iter().any(|l| *l <= 0.0) {
                return Err(DataError::BadSpec(format!("finger {i} has non-positive geometry")));
            }
        }
        if self.depth_mm.0 <= 0.0 || self.depth_mm.1 < self.depth_mm.0 {
            return Err(DataError::BadSpec(format!("depth range {:?}", self.depth_mm)));
        }
        if self.curl_deg.1 < self.curl_deg.0 {
            return Err(DataError::BadSpec(format!("curl range {:?}", self.curl_deg)));
        }
        Ok(())
    }
}

/// Renderable solid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Primitive {
    Sphere { center: [f64; 3], radius: f64 },
    Capsule { a: [f64; 3], b: [f64; 3], radius: f64 },
}

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn sub(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn add3(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

fn scale3(a: [f64; 3], s: f64) -> [f64; 3] {
    [a[0] * s, a[1] * s, a[2] * s]
}

/// Smallest positive t with |o + t d - c| = r.
fn ray_sphere(o: [f64; 3], d: [f64; 3], c: [f64; 3], r: f64) -> Option<f64> {
    let oc = sub(o, c);
    let a = dot(d, d);
    let b = 2.0 * dot(d, oc);
    let k = dot(oc, oc) - r * r;
    let disc = b * b - 4.0 * a * k;
    if disc < 0.0 {
        return None;
    }
    let sq = disc.sqrt();
    let t0 = (-b - sq) / (2.0 * a);
    let t1 = (-b + sq) / (2.0 * a);
    if t0 > 1e-9 {
        Some(t0)
    } else if t1 > 1e-9 {
        Some(t1)
    } else {
        None
    }
}

/// Smallest positive t hitting a capsule around segment ab.
fn ray_capsule(o: [f64; 3], d: [f64; 3], a: [f64; 3], b: [f64; 3], r: f64) -> Option<f64> {
    let ba = sub(b, a);
    let len2 = dot(ba, ba);
    let mut best: Option<f64> = None;
    let mut consider = |t: f64| {
        if t > 1e-9 && best.is_none_or(|cur| t < cur) {
            best = Some(t);
        }
    };
    if len2 > 1e-12 {
        // infinite cylinder, then clip to the segment span
        let oa = sub(o, a);
        let m = sub(d, scale3(ba, dot(d, ba) / len2));
        let n = sub(oa, scale3(ba, dot(oa, ba) / len2));
        let qa = dot(m, m);
        let qb = 2.0 * dot(m, n);
        let qc = dot(n, n) - r * r;
        if qa.abs() > 1e-15 {
            let disc = qb * qb - 4.0 * qa * qc;
            if disc >= 0.0 {
                let sq = disc.sqrt();
                for t in [(-qb - sq) / (2.0 * qa), (-qb + sq) / (2.0 * qa)] {
                    if t > 1e-9 {
                        let p = add3(o, scale3(d, t));
                        let s = dot(sub(p, a), ba) / len2;
                        if (0.0..=1.0).contains(&s) {
                            consider(t);
                        }
                    }
                }
            }
        }
    }
    if let Some(t) = ray_sphere(o, d, a, r) {
        consider(t);
    }
    if let Some(t) = ray_sphere(o, d, b, r) {
        consider(t);
    }
    best
}

/// Renders primitives to a depth image by per-pixel nearest intersection.
/// Depths are z-values in whole millimeters; misses are 0.
pub fn render_depth(
    prims: &[Primitive],
    k: &CameraIntrinsics,
    width: usize,
    height: usize,
) -> Vec<f32> {
    let mut out = vec![0.0f32; width * height];
    out.par_chunks_mut(width).enumerate().for_each(|(row, line)| {
        for (col, px) in line.iter_mut().enumerate() {
            // direction with unit z, so the ray parameter is the z-depth
            let d = [(col as f64 - k.cx) / k.fx, (row as f64 - k.cy) / k.fy, 1.0];
            let mut nearest = f64::INFINITY;
            for p in prims {
                let hit = match *p {
                    Primitive::Sphere { center, radius } => {
                        ray_sphere([0.0; 3], d, center, radius)
                    }
                    Primitive::Capsule { a, b, radius } => ray_capsule([0.0; 3], d, a, b, radius),
                };
                if let Some(t) = hit {
                    nearest = nearest.min(t);
                }
            }
            if nearest.is_finite() {
                *px = nearest.round().clamp(1.0, u16::MAX as f64) as f32;
            }
        }
    });
    out
}

fn rot_x(p: [f64; 3], t: f64) -> [f64; 3] {
    let (s, c) = t.sin_cos();
    [p[0], c * p[1] - s * p[2], s * p[1] + c * p[2]]
}

fn rot_y(p: [f64; 3], t: f64) -> [f64; 3] {
    let (s, c) = t.sin_cos();
    [c * p[0] + s * p[2], p[1], -s * p[0] + c * p[2]]
}

fn rot_z(p: [f64; 3], t: f64) -> [f64; 3] {
    let (s, c) = t.sin_cos();
    [c * p[0] - s * p[1], s * p[0] + c * p[1], p[2]]
}

/// Rodrigues rotation of `p` about unit axis `axis`.
fn rot_axis(p: [f64; 3], axis: [f64; 3], t: f64) -> [f64; 3] {
    let (s, c) = t.sin_cos();
    let cross = [
        axis[1] * p[2] - axis[2] * p[1],
        axis[2] * p[0] - axis[0] * p[2],
        axis[0] * p[1] - axis[1] * p[0],
    ];
    let d = dot(axis, p) * (1.0 - c);
    [
        p[0] * c + cross[0] * s + axis[0] * d,
        p[1] * c + cross[1] * s + axis[1] * d,
        p[2] * c + cross[2] * s + axis[2] * d,
    ]
}

struct HandInstance {
    prims: Vec<Primitive>,
    pose: Pose,
}

fn build_hand(spec: &SyntheticHandSpec, rng: &mut RngStream) -> HandInstance {
    let palm = [
        rng.range(-spec.lateral_mm, spec.lateral_mm),
        rng.range(-spec.lateral_mm, spec.lateral_mm),
        rng.range(spec.depth_mm.0, spec.depth_mm.1),
    ];
    let bound = spec.orient_deg.to_radians();
    let (ax, ay, az) =
        (rng.range(-bound, bound), rng.range(-bound, bound), rng.range(-bound, bound));
    let orient = |p: [f64; 3]| rot_z(rot_y(rot_x(p, ax), ay), az);
    let to_world = |p: [f64; 3]| add3(orient(p), palm);

    let mut prims = Vec::new();
    let mut joints = vec![palm];
    if spec.palm_radius > 0.0 {
        prims.push(Primitive::Sphere { center: palm, radius: spec.palm_radius });
    }
    let n = spec.fingers.len().max(1) as f64;
    for (f, finger) in spec.fingers.iter().enumerate() {
        // fan the fingers across the palm top, curl about the fan normal
        let fan = (f as f64 - (n - 1.0) / 2.0) * (70f64.to_radians() / n.max(1.0));
        let base_dir = [fan.sin(), -fan.cos(), 0.0];
        let curl_axis = [fan.cos(), fan.sin(), 0.0];
        let mut tip = scale3(base_dir, spec.palm_radius.max(1.0));
        let mut dir = base_dir;
        let (lo, hi) = (spec.curl_deg.0.to_radians(), spec.curl_deg.1.to_radians());
        let mut start = tip;
        for &len in &finger.segment_lengths {
            let bend = rng.range(lo, hi);
            dir = rot_axis(dir, curl_axis, bend);
            tip = add3(start, scale3(dir, len));
            prims.push(Primitive::Capsule {
                a: to_world(start),
                b: to_world(tip),
                radius: finger.radius,
            });
            joints.push(to_world(tip));
            start = tip;
        }
    }
    HandInstance { prims, pose: Pose::new(joints) }
}

fn hand_visible(spec: &SyntheticHandSpec, pose: &Pose) -> bool {
    let margin = 2.0;
    let hi = spec.image_size as f64 - 1.0 - margin;
    pose.joints.iter().all(|&j| {
        if j[2] <= 0.0 {
            return false;
        }
        match crate::geometry::project(j, &spec.intrinsics) {
            Ok((u, v, _)) => u >= margin && u <= hi && v >= margin && v <= hi,
            Err(_) => false,
        }
    })
}

/// Renders `n` frames with exact joint labels. Each sample draws from its
/// own derived stream, so generation parallelizes deterministically.
pub fn generate_synthetic(
    spec: &SyntheticHandSpec,
    n: usize,
    rng: &RngStream,
) -> Result<Vec<(DepthFrame, Pose)>> {
    spec.validate()?;
    if n == 0 {
        return Err(DataError::BadSpec("sample count must be >= 1".into()));
    }
    (0..n)
        .into_par_iter()
        .map(|i| {
            let mut stream = rng.derive(i as u64);
            for _ in 0..spec.retry_budget.max(1) {
                let hand = build_hand(spec, &mut stream);
                if !hand_visible(spec, &hand.pose) {
                    continue;
                }
                let depth =
                    render_depth(&hand.prims, &spec.intrinsics, spec.image_size, spec.image_size);
                if depth.iter().all(|&d| d == 0.0) {
                    continue;
                }
                let frame =
                    DepthFrame::new(spec.image_size, spec.image_size, depth, spec.intrinsics)?;
                return Ok((frame, hand.pose));
            }
            Err(DataError::Unrenderable { retries: spec.retry_budget })
        })
        .collect()
}

/// Writes frames plus a manifest under `dir` (frames in `frames/`).
pub fn write_synthetic_dataset(
    dir: &Path,
    spec: &SyntheticHandSpec,
    n: usize,
    seed: u64,
) -> Result<PathBuf> {
    let samples = generate_synthetic(spec, n, &RngStream::new(seed))?;
    let frames_dir = dir.join("frames");
    fs::create_dir_all(&frames_dir).map_err(io_err(&frames_dir))?;
    let mut entries = Vec::with_capacity(n);
    for (i, (frame, pose)) in samples.iter().enumerate() {
        let rel = PathBuf::from(format!("frames/{i:05}.rdep"));
        write_depth_file(&dir.join(&rel), frame)?;
        entries.push(ManifestEntry { depth_path: rel, pose: pose.clone() });
    }
    let config = DatasetConfig {
        intrinsics: spec.intrinsics,
        joint_count: spec.joint_count(),
        extent: CropExtent::hand(),
        fingertips: spec.fingertip_indices(),
        mirror: None,
        near_mm: 100.0,
        far_mm: 1500.0,
    };
    let manifest = dir.join("manifest.txt");
    write_manifest(&manifest, &config, &entries)?;
    Ok(manifest)
}

// ── dataset statistics ─────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetStats {
    pub frames: usize,
    pub joint_count: usize,
    /// min/max over non-missing depth pixels, mm
    pub depth_range: Option<(f32, f32)>,
    /// per-axis label bounding box, mm
    pub label_min: [f64; 3],
    pub label_max: [f64; 3],
}

pub fn dataset_stats(dataset: &Dataset) -> Result<DatasetStats> {
    let mut depth_range: Option<(f32, f32)> = None;
    for i in 0..dataset.len() {
        let frame = dataset.load_frame(i)?;
        for &d in &frame.depth {
            if d > 0.0 {
                depth_range = Some(match depth_range {
                    None => (d, d),
                    Some((lo, hi)) => (lo.min(d), hi.max(d)),
                });
            }
        }
    }
    let mut label_min = [f64::INFINITY; 3];
    let mut label_max = [f64::NEG_INFINITY; 3];
    for e in &dataset.entries {
        for j in &e.pose.joints {
            for a in 0..3 {
                label_min[a] = label_min[a].min(j[a]);
                label_max[a] = label_max[a].max(j[a]);
            }
        }
    }
    Ok(DatasetStats {
        frames: dataset.len(),
        joint_count: dataset.config.joint_count,
        depth_range,
        label_min,
        label_max,
    })
}

/// Loads every sample of a manifest into memory alongside the shared
/// config; the working set for desk-scale training.
pub fn load_dataset_frames(dataset: &Dataset) -> Result<Vec<(DepthFrame, Pose)>> {
    (0..dataset.len())
        .map(|i| Ok((dataset.load_frame(i)?, dataset.entries[i].pose.clone())))
        .collect()
}
