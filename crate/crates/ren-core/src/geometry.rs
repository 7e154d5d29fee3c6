//! Camera model, metric-cube patch extraction, and label-consistent
//! augmentation.
//!
//! World coordinates are millimeters. A patch is cut by projecting the
//! axis-aligned box `center +- extent` at the center depth, resampling the
//! pixel window to a square grid, and mapping depths to [-1, 1] via
//! `(d - center.z) / extent.z`. Joint labels normalize per axis the same
//! way, which makes the patch -> world inverse exact.
//!
//! Coordinate conventions: pixel index (u, v) addresses the center of the
//! pixel in column u, row v; the patch center sits at pixel index
//! `(out - 1) / 2`; normalized x in [-1, 1] maps to pixel index
//! `(x + 1) / 2 * out - 0.5`. Positive rotation angles move a point at
//! (+x, 0) toward (0, +y) with the y axis pointing down.

use crate::rng::RngStream;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum GeometryError {
    #[error("focal lengths must be positive, got fx={fx}, fy={fy}")]
    InvalidIntrinsics { fx: f64, fy: f64 },
    #[error("depth must be positive to project, got {0}")]
    NonPositiveDepth(f64),
    #[error("no foreground pixels between {near}mm and {far}mm")]
    EmptyForeground { near: f64, far: f64 },
    #[error("crop window of {width:.2}x{height:.2} px is degenerate (< 2 px)")]
    DegenerateWindow { width: f64, height: f64 },
    #[error("invalid depth frame: {0}")]
    BadFrame(String),
    #[error("invalid augmentation ranges: {0}")]
    BadRanges(String),
    #[error("sample carries no labels to augment")]
    MissingLabels,
    #[error("invalid crop extent: {0}")]
    BadExtent(String),
}

type Result<T> = std::result::Result<T, GeometryError>;

/// Pinhole camera: focal lengths and principal point in pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64) -> Result<Self> {
        if fx <= 0.0 || fy <= 0.0 {
            return Err(GeometryError::InvalidIntrinsics { fx, fy });
        }
        Ok(CameraIntrinsics { fx, fy, cx, cy })
    }
}

/// Raw depth image in millimeters; 0 marks missing measurements.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthFrame {
    pub width: usize,
    pub height: usize,
    pub depth: Vec<f32>,
    pub intrinsics: CameraIntrinsics,
}

impl DepthFrame {
    pub fn new(
        width: usize,
        height: usize,
        depth: Vec<f32>,
        intrinsics: CameraIntrinsics,
    ) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(GeometryError::BadFrame(format!("empty dimensions {width}x{height}")));
        }
        if depth.len() != width * height {
            return Err(GeometryError::BadFrame(format!(
                "{} depth values for {width}x{height}",
                depth.len()
            )));
        }
        if depth.iter().any(|d| !d.is_finite() || *d < 0.0) {
            return Err(GeometryError::BadFrame("negative or non-finite depth".into()));
        }
        Ok(DepthFrame { width, height, depth, intrinsics })
    }

    #[inline]
    pub fn at(&self, col: usize, row: usize) -> f32 {
        self.depth[row * self.width + col]
    }
}

/// J joints in world millimeters.
#[derive(Debug, Clone, PartialEq)]
pub struct Pose {
    pub joints: Vec<[f64; 3]>,
}

impl Pose {
    pub fn new(joints: Vec<[f64; 3]>) -> Self {
        Pose { joints }
    }

    pub fn joint_count(&self) -> usize {
        self.joints.len()
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.joints.iter().flat_map(|j| j.iter().copied()).collect()
    }

    pub fn from_flat(flat: &[f64]) -> Self {
        let joints = flat.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect();
        Pose { joints }
    }
}

/// Half-extents (mm) of the crop box around the body center.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CropExtent {
    pub ex: f64,
    pub ey: f64,
    pub ez: f64,
}

impl CropExtent {
    pub fn new(ex: f64, ey: f64, ez: f64) -> Result<Self> {
        if ex <= 0.0 || ey <= 0.0 || ez <= 0.0 {
            return Err(GeometryError::BadExtent(format!("({ex}, {ey}, {ez})")));
        }
        Ok(CropExtent { ex, ey, ez })
    }

    /// 150mm cube around the hand center.
    pub fn hand() -> Self {
        CropExtent { ex: 75.0, ey: 75.0, ez: 75.0 }
    }

    /// Front-view human torso box.
    pub fn human_front() -> Self {
        CropExtent { ex: 400.0, ey: 600.0, ez: 400.0 }
    }

    /// Top-view human torso box.
    pub fn human_top() -> Self {
        CropExtent { ex: 300.0, ey: 300.0, ez: 500.0 }
    }

    pub fn scaled(&self, s: f64) -> Self {
        CropExtent { ex: self.ex * s, ey: self.ey * s, ez: self.ez * s }
    }
}

/// One augmentation draw: pixel shift, zoom, rotation, optional flip.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentDraw {
    pub shift_px: (f64, f64),
    pub scale: f64,
    pub rotate_deg: f64,
    pub flip: bool,
}

impl AugmentDraw {
    pub fn identity() -> Self {
        AugmentDraw { shift_px: (0.0, 0.0), scale: 1.0, rotate_deg: 0.0, flip: false }
    }

    pub fn is_identity(&self) -> bool {
        self.shift_px == (0.0, 0.0) && self.scale == 1.0 && self.rotate_deg == 0.0 && !self.flip
    }
}

/// Uniform draw ranges for augmentation, plus the flip joint-mirror map.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentRanges {
    pub translate_px: (f64, f64),
    pub scale: (f64, f64),
    pub rotate_deg: (f64, f64),
    pub flip_prob: f64,
    /// `mirror[i]` names the joint whose flipped coordinates land in slot i.
    pub mirror: Option<Vec<usize>>,
}

impl Default for AugmentRanges {
    fn default() -> Self {
        AugmentRanges {
            translate_px: (-10.0, 10.0),
            scale: (0.9, 1.1),
            rotate_deg: (-180.0, 180.0),
            flip_prob: 0.0,
            mirror: None,
        }
    }
}

impl AugmentRanges {
    /// Degenerate ranges that always draw the identity transform.
    pub fn identity() -> Self {
        AugmentRanges {
            translate_px: (0.0, 0.0),
            scale: (1.0, 1.0),
            rotate_deg: (0.0, 0.0),
            flip_prob: 0.0,
            mirror: None,
        }
    }

    pub fn validate(&self, joint_count: usize) -> Result<()> {
        let ordered = |(lo, hi): (f64, f64)| lo.is_finite() && hi.is_finite() && lo <= hi;
        if !ordered(self.translate_px) || !ordered(self.scale) || !ordered(self.rotate_deg) {
            return Err(GeometryError::BadRanges("range bounds must satisfy lo <= hi".into()));
        }
        if self.scale.0 <= 0.0 {
            return Err(GeometryError::BadRanges(format!("scale {} not positive", self.scale.0)));
        }
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return Err(GeometryError::BadRanges(format!(
                "flip probability {} outside [0, 1]",
                self.flip_prob
            )));
        }
        if let Some(m) = &self.mirror {
            let mut seen = vec![false; joint_count];
            if m.len() != joint_count {
                return Err(GeometryError::BadRanges(format!(
                    "mirror map has {} entries for {joint_count} joints",
                    m.len()
                )));
            }
            for &idx in m {
                if idx >= joint_count || seen[idx] {
                    return Err(GeometryError::BadRanges("mirror map is not a permutation".into()));
                }
                seen[idx] = true;
            }
        }
        Ok(())
    }

    /// Draws one transform. Consumes a fixed number of stream values, so
    /// degenerate ranges still advance the stream deterministically.
    pub fn draw(&self, rng: &mut RngStream) -> AugmentDraw {
        let tx = rng.range(self.translate_px.0, self.translate_px.1);
        let ty = rng.range(self.translate_px.0, self.translate_px.1);
        let scale = rng.range(self.scale.0, self.scale.1);
        let rotate_deg = rng.range(self.rotate_deg.0, self.rotate_deg.1);
        let flip = rng.uniform() < self.flip_prob;
        AugmentDraw { shift_px: (tx, ty), scale, rotate_deg, flip }
    }
}

/// Network-ready patch plus everything needed to map predictions back to
/// world millimeters.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchSample {
    pub patch: Vec<f32>,
    pub out_size: usize,
    /// normalized 3J coordinates, when ground truth is known
    pub labels: Option<Vec<f64>>,
    pub center: [f64; 3],
    pub extent: CropExtent,
    pub augment: AugmentDraw,
}

// ── projection ─────────────────────────────────────────────────────────

/// World (x, y, z) mm to pixel (u, v) plus depth.
pub fn project(world: [f64; 3], k: &CameraIntrinsics) -> Result<(f64, f64, f64)> {
    let [x, y, z] = world;
    if z <= 0.0 {
        return Err(GeometryError::NonPositiveDepth(z));
    }
    Ok((k.fx * x / z + k.cx, k.fy * y / z + k.cy, z))
}

/// Pixel (u, v) at depth d back to world mm.
pub fn backproject(u: f64, v: f64, d: f64, k: &CameraIntrinsics) -> Result<[f64; 3]> {
    if d <= 0.0 {
        return Err(GeometryError::NonPositiveDepth(d));
    }
    Ok([(u - k.cx) * d / k.fx, (v - k.cy) * d / k.fy, d])
}

/// Centroid of the foreground: pixels with near < depth < far,
/// backprojected and averaged.
pub fn segment_and_center(frame: &DepthFrame, near_mm: f64, far_mm: f64) -> Result<[f64; 3]> {
    if near_mm >= far_mm {
        return Err(GeometryError::BadFrame(format!("near {near_mm} >= far {far_mm}")));
    }
    let mut sum = [0.0f64; 3];
    let mut count = 0usize;
    for row in 0..frame.height {
        for col in 0..frame.width {
            let d = frame.at(col, row) as f64;
            if d > near_mm && d < far_mm {
                let p = backproject(col as f64, row as f64, d, &frame.intrinsics)?;
                sum[0] += p[0];
                sum[1] += p[1];
                sum[2] += p[2];
                count += 1;
            }
        }
    }
    if count == 0 {
        return Err(GeometryError::EmptyForeground { near: near_mm, far: far_mm });
    }
    let n = count as f64;
    Ok([sum[0] / n, sum[1] / n, sum[2] / n])
}

/// Pixel half-extents of the crop window for a box at the center depth.
pub fn crop_window_px(
    center: [f64; 3],
    extent: &CropExtent,
    k: &CameraIntrinsics,
) -> Result<(f64, f64)> {
    if center[2] <= 0.0 {
        return Err(GeometryError::NonPositiveDepth(center[2]));
    }
    Ok((extent.ex * k.fx / center[2], extent.ey * k.fy / center[2]))
}

/// Depth lookup with missing and out-of-cube pixels pre-filled to the far
/// plane, so bilinear sampling never mixes background into the box.
#[inline]
fn filled_depth(frame: &DepthFrame, col: isize, row: isize, z_lo: f64, z_hi: f64) -> f64 {
    if col < 0 || row < 0 || col >= frame.width as isize || row >= frame.height as isize {
        return z_hi;
    }
    let d = frame.at(col as usize, row as usize) as f64;
    if d <= 0.0 || d < z_lo || d > z_hi {
        z_hi
    } else {
        d
    }
}

fn sample_depth_bilinear(frame: &DepthFrame, u: f64, v: f64, z_lo: f64, z_hi: f64) -> f64 {
    let c0 = u.floor();
    let r0 = v.floor();
    let tu = u - c0;
    let tv = v - r0;
    let (c0, r0) = (c0 as isize, r0 as isize);
    let d00 = filled_depth(frame, c0, r0, z_lo, z_hi);
    let d01 = filled_depth(frame, c0 + 1, r0, z_lo, z_hi);
    let d10 = filled_depth(frame, c0, r0 + 1, z_lo, z_hi);
    let d11 = filled_depth(frame, c0 + 1, r0 + 1, z_lo, z_hi);
    let top = d00 * (1.0 - tu) + d01 * tu;
    let bottom = d10 * (1.0 - tu) + d11 * tu;
    top * (1.0 - tv) + bottom * tv
}

/// Nearest-neighbor alternative to bilinear depth sampling.
fn sample_depth_nearest(frame: &DepthFrame, u: f64, v: f64, z_lo: f64, z_hi: f64) -> f64 {
    filled_depth(frame, u.round() as isize, v.round() as isize, z_lo, z_hi)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Resampling {
    #[default]
    Bilinear,
    Nearest,
}

/// Extracts a normalized square patch around `center`.
pub fn crop_patch(
    frame: &DepthFrame,
    center: [f64; 3],
    extent: &CropExtent,
    out_size: usize,
) -> Result<PatchSample> {
    crop_patch_with(frame, center, extent, out_size, &AugmentDraw::identity(), Resampling::Bilinear)
}

/// Crop with an augmentation transform composed into the single resampling
/// pass: zoom scales the effective extent, rotation/shift/flip act in patch
/// pixel space.
pub fn crop_patch_with(
    frame: &DepthFrame,
    center: [f64; 3],
    extent: &CropExtent,
    out_size: usize,
    draw: &AugmentDraw,
    resampling: Resampling,
) -> Result<PatchSample> {
    if out_size < 2 {
        return Err(GeometryError::BadFrame(format!("patch size {out_size} too small")));
    }
    // zooming out by `scale` widens the cube; depth normalization follows
    let eff = extent.scaled(draw.scale);
    let k = &frame.intrinsics;
    let (cu, cv, cz) = project(center, k)?;
    let (half_w, half_h) = crop_window_px(center, &eff, k)?;
    if 2.0 * half_w < 2.0 || 2.0 * half_h < 2.0 {
        return Err(GeometryError::DegenerateWindow { width: 2.0 * half_w, height: 2.0 * half_h });
    }
    let z_lo = cz - eff.ez;
    let z_hi = cz + eff.ez;
    let step_u = 2.0 * half_w / out_size as f64;
    let step_v = 2.0 * half_h / out_size as f64;
    let c = (out_size as f64 - 1.0) / 2.0;
    let theta = draw.rotate_deg.to_radians();
    let (sin, cos) = theta.sin_cos();
    let (tx, ty) = draw.shift_px;

    let mut patch = Vec::with_capacity(out_size * out_size);
    for row in 0..out_size {
        for col in 0..out_size {
            // invert the patch-space similarity: q -> p
            let (px, py) = if draw.is_identity() {
                (col as f64, row as f64)
            } else {
                let qx = col as f64 - c - tx;
                let qy = row as f64 - c - ty;
                let rx = cos * qx + sin * qy;
                let ry = -sin * qx + cos * qy;
                let mut px = c + draw.scale * rx;
                let py = c + draw.scale * ry;
                if draw.flip {
                    px = (out_size as f64 - 1.0) - px;
                }
                (px, py)
            };
            // patch pixel -> frame pixel
            let u = cu - half_w + (px + 0.5) * step_u;
            let v = cv - half_h + (py + 0.5) * step_v;
            let d = match resampling {
                Resampling::Bilinear => sample_depth_bilinear(frame, u, v, z_lo, z_hi),
                Resampling::Nearest => sample_depth_nearest(frame, u, v, z_lo, z_hi),
            };
            let norm = ((d - cz) / eff.ez).clamp(-1.0, 1.0);
            patch.push(norm as f32);
        }
    }
    Ok(PatchSample {
        patch,
        out_size,
        labels: None,
        center,
        extent: *extent,
        augment: *draw,
    })
}

impl PatchSample {
    /// Attaches normalized labels for `pose`, matching this sample's crop
    /// and augmentation.
    pub fn with_labels(mut self, pose: &Pose, mirror: Option<&[usize]>) -> Self {
        let base = normalize_labels(pose, self.center, &self.extent);
        self.labels = Some(transform_labels(&base, &self.augment, self.out_size, mirror));
        self
    }
}

/// Per-axis (coordinate - center) / extent.
pub fn normalize_labels(pose: &Pose, center: [f64; 3], extent: &CropExtent) -> Vec<f64> {
    let mut out = Vec::with_capacity(pose.joints.len() * 3);
    for j in &pose.joints {
        out.push((j[0] - center[0]) / extent.ex);
        out.push((j[1] - center[1]) / extent.ey);
        out.push((j[2] - center[2]) / extent.ez);
    }
    out
}

/// Exact inverse of [`normalize_labels`].
pub fn denormalize_labels(labels: &[f64], center: [f64; 3], extent: &CropExtent) -> Pose {
    let joints = labels
        .chunks_exact(3)
        .map(|c| {
            [
                c[0] * extent.ex + center[0],
                c[1] * extent.ey + center[1],
                c[2] * extent.ez + center[2],
            ]
        })
        .collect();
    Pose { joints }
}

/// Applies an augmentation draw to normalized labels: optional flip, then
/// rotation and 1/s scaling on (x, y), pixel shift converted to normalized
/// units; z is divided by s and untouched by rotation or shift.
pub fn transform_labels(
    labels: &[f64],
    draw: &AugmentDraw,
    out_size: usize,
    mirror: Option<&[usize]>,
) -> Vec<f64> {
    if draw.is_identity() {
        return labels.to_vec();
    }
    let joint_count = labels.len() / 3;
    let mut source: Vec<[f64; 3]> = labels.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect();
    if draw.flip {
        let mirrored: Vec<[f64; 3]> = (0..joint_count)
            .map(|i| {
                let src = mirror.map_or(i, |m| m[i]);
                let [x, y, z] = source[src];
                [-x, y, z]
            })
            .collect();
        source = mirrored;
    }
    let theta = draw.rotate_deg.to_radians();
    let (sin, cos) = theta.sin_cos();
    let tn_x = 2.0 * draw.shift_px.0 / out_size as f64;
    let tn_y = 2.0 * draw.shift_px.1 / out_size as f64;
    let mut out = Vec::with_capacity(labels.len());
    for [x, y, z] in source {
        let rx = cos * x - sin * y;
        let ry = sin * x + cos * y;
        out.push(rx / draw.scale + tn_x);
        out.push(ry / draw.scale + tn_y);
        out.push(z / draw.scale);
    }
    out
}

/// Standalone augmentation of an existing sample: draws a transform,
/// rewarps the patch (far-plane fill outside), and applies the matching
/// label transform. The training pipeline prefers [`crop_patch_with`],
/// which composes the crop and the transform into one resampling pass.
pub fn augment(
    sample: &PatchSample,
    rng: &mut RngStream,
    ranges: &AugmentRanges,
) -> Result<PatchSample> {
    let labels = sample.labels.as_ref().ok_or(GeometryError::MissingLabels)?;
    ranges.validate(labels.len() / 3)?;
    let draw = ranges.draw(rng);
    let patch = warp_patch(&sample.patch, sample.out_size, &draw);
    let new_labels = transform_labels(labels, &draw, sample.out_size, ranges.mirror.as_deref());
    Ok(PatchSample {
        patch,
        out_size: sample.out_size,
        labels: Some(new_labels),
        center: sample.center,
        extent: sample.extent,
        augment: draw,
    })
}

/// Inverse-warp bilinear resampling of a patch under an augmentation draw;
/// pixels pulled from outside the patch read as the far plane (+1).
pub fn warp_patch(patch: &[f32], out_size: usize, draw: &AugmentDraw) -> Vec<f32> {
    if draw.is_identity() {
        return patch.to_vec();
    }
    let c = (out_size as f64 - 1.0) / 2.0;
    let theta = draw.rotate_deg.to_radians();
    let (sin, cos) = theta.sin_cos();
    let (tx, ty) = draw.shift_px;
    let at = |col: isize, row: isize| -> f64 {
        if col < 0 || row < 0 || col >= out_size as isize || row >= out_size as isize {
            1.0
        } else {
            patch[row as usize * out_size + col as usize] as f64
        }
    };
    let mut out = Vec::with_capacity(out_size * out_size);
    for row in 0..out_size {
        for col in 0..out_size {
            let qx = col as f64 - c - tx;
            let qy = row as f64 - c - ty;
            let rx = cos * qx + sin * qy;
            let ry = -sin * qx + cos * qy;
            let mut px = c + draw.scale * rx;
            let py = c + draw.scale * ry;
            if draw.flip {
                px = (out_size as f64 - 1.0) - px;
            }
            let c0 = px.floor();
            let r0 = py.floor();
            let tu = px - c0;
            let tv = py - r0;
            let (c0, r0) = (c0 as isize, r0 as isize);
            let top = at(c0, r0) * (1.0 - tu) + at(c0 + 1, r0) * tu;
            let bottom = at(c0, r0 + 1) * (1.0 - tu) + at(c0 + 1, r0 + 1) * tu;
            out.push((top * (1.0 - tv) + bottom * tv).clamp(-1.0, 1.0) as f32);
        }
    }
    out
}

/// Pixel index of a normalized label coordinate in an `out_size` patch.
pub fn label_to_pixel(l: f64, out_size: usize) -> f64 {
    (l + 1.0) / 2.0 * out_size as f64 - 0.5
}

#[cfg(test)]
mod tests {
    use super::*;

    fn test_k() -> CameraIntrinsics {
        CameraIntrinsics::new(500.0, 500.0, 48.0, 48.0).unwrap()
    }

    fn flat_frame(w: usize, h: usize, depth_mm: f32) -> DepthFrame {
        DepthFrame::new(w, h, vec![depth_mm; w * h], test_k()).unwrap()
    }

    #[test]
    fn project_principal_ray() {
        let (u, v, d) = project([0.0, 0.0, 1000.0], &test_k()).unwrap();
        assert_eq!((u, v, d), (48.0, 48.0, 1000.0));
    }

    #[test]
    fn project_off_axis() {
        let (u, v, _) = project([150.0, 0.0, 1000.0], &test_k()).unwrap();
        assert_eq!((u, v), (123.0, 48.0));
    }

    #[test]
    fn project_rejects_non_positive_depth() {
        assert!(project([0.0, 0.0, 0.0], &test_k()).is_err());
        assert!(backproject(1.0, 1.0, -5.0, &test_k()).is_err());
    }

    #[test]
    fn backproject_inverts_project() {
        let k = test_k();
        assert_eq!(backproject(48.0, 48.0, 1000.0, &k).unwrap(), [0.0, 0.0, 1000.0]);
        assert_eq!(backproject(123.0, 48.0, 1000.0, &k).unwrap(), [150.0, 0.0, 1000.0]);
        let mut rng = RngStream::new(4);
        for _ in 0..200 {
            let w = [rng.range(-400.0, 400.0), rng.range(-300.0, 300.0), rng.range(200.0, 2000.0)];
            let (u, v, d) = project(w, &k).unwrap();
            let back = backproject(u, v, d, &k).unwrap();
            for a in 0..3 {
                assert!((back[a] - w[a]).abs() <= 1e-9 * w[a].abs().max(1.0));
            }
        }
    }

    #[test]
    fn center_of_single_foreground_pixel() {
        let mut depth = vec![0.0f32; 96 * 96];
        depth[20 * 96 + 30] = 800.0;
        let frame = DepthFrame::new(96, 96, depth, test_k()).unwrap();
        let c = segment_and_center(&frame, 100.0, 1500.0).unwrap();
        let expected = backproject(30.0, 20.0, 800.0, &test_k()).unwrap();
        assert_eq!(c, expected);
    }

    #[test]
    fn center_of_symmetric_points_lies_on_axis() {
        let mut depth = vec![0.0f32; 96 * 96];
        depth[48 * 96 + 38] = 600.0;
        depth[48 * 96 + 58] = 600.0;
        let frame = DepthFrame::new(96, 96, depth, test_k()).unwrap();
        let c = segment_and_center(&frame, 100.0, 1500.0).unwrap();
        assert!(c[0].abs() < 1e-12, "x = {}", c[0]);
        assert_eq!(c[2], 600.0);
    }

    #[test]
    fn center_of_block_matches_brute_force() {
        let mut depth = vec![0.0f32; 96 * 96];
        for row in 40..50 {
            for col in 60..70 {
                depth[row * 96 + col] = 700.0 + (row + col) as f32;
            }
        }
        let frame = DepthFrame::new(96, 96, depth, test_k()).unwrap();
        let c = segment_and_center(&frame, 100.0, 1500.0).unwrap();

        let mut sum = [0.0; 3];
        for row in 40..50 {
            for col in 60..70 {
                let p = backproject(
                    col as f64,
                    row as f64,
                    (700 + row + col) as f64,
                    &test_k(),
                )
                .unwrap();
                sum = [sum[0] + p[0], sum[1] + p[1], sum[2] + p[2]];
            }
        }
        for a in 0..3 {
            assert!((c[a] - sum[a] / 100.0).abs() < 1e-9);
        }
    }

    #[test]
    fn empty_foreground_is_an_error() {
        let frame = flat_frame(32, 32, 0.0);
        assert!(matches!(
            segment_and_center(&frame, 100.0, 1500.0),
            Err(GeometryError::EmptyForeground { .. })
        ));
    }

    #[test]
    fn crop_flat_wall_gives_zero_patch() {
        let frame = flat_frame(96, 96, 1000.0);
        let sample =
            crop_patch(&frame, [0.0, 0.0, 1000.0], &CropExtent::hand(), 32).unwrap();
        assert!(sample.patch.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn crop_empty_scene_gives_far_plane_patch() {
        let frame = flat_frame(96, 96, 0.0);
        let sample =
            crop_patch(&frame, [0.0, 0.0, 1000.0], &CropExtent::hand(), 32).unwrap();
        assert!(sample.patch.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn crop_window_half_width_example() {
        let (hw, hh) =
            crop_window_px([0.0, 0.0, 1000.0], &CropExtent::hand(), &test_k()).unwrap();
        assert_eq!(hw, 37.5);
        assert_eq!(hh, 37.5);
    }

    #[test]
    fn crop_degenerate_window_rejected() {
        let frame = flat_frame(96, 96, 1000.0);
        let tiny = CropExtent::new(1.0, 1.0, 75.0).unwrap();
        assert!(matches!(
            crop_patch(&frame, [0.0, 0.0, 1000.0], &tiny, 32),
            Err(GeometryError::DegenerateWindow { .. })
        ));
    }

    #[test]
    fn crop_is_always_clamped_and_finite() {
        let mut rng = RngStream::new(13);
        for case in 0..20 {
            let mut depth = vec![0.0f32; 96 * 96];
            for d in depth.iter_mut() {
                if rng.uniform() < 0.7 {
                    *d = rng.range(0.0, 3000.0) as f32;
                }
            }
            if case == 0 {
                depth.fill(0.0); // all missing
            }
            let frame = DepthFrame::new(96, 96, depth, test_k()).unwrap();
            let sample =
                crop_patch(&frame, [10.0, -20.0, 900.0], &CropExtent::hand(), 48).unwrap();
            assert!(sample.patch.iter().all(|v| v.is_finite() && (-1.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn labels_normalize_inverse_to_world() {
        let center = [10.0, -5.0, 800.0];
        let extent = CropExtent::hand();
        let pose = Pose::new(vec![[10.0, -5.0, 800.0], [85.0, -5.0, 800.0]]);
        let labels = normalize_labels(&pose, center, &extent);
        assert_eq!(&labels[..3], &[0.0, 0.0, 0.0]);
        assert_eq!(labels[3], 1.0); // center + (75, 0, 0) with hand extent

        let mut rng = RngStream::new(31);
        for _ in 0..200 {
            let pose = Pose::new(vec![[
                rng.range(-100.0, 100.0),
                rng.range(-100.0, 100.0),
                rng.range(700.0, 900.0),
            ]]);
            let l = normalize_labels(&pose, center, &extent);
            let back = denormalize_labels(&l, center, &extent);
            for a in 0..3 {
                assert!((back.joints[0][a] - pose.joints[0][a]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn augment_identity_draw_is_identity() {
        let frame = flat_frame(96, 96, 1000.0);
        let pose = Pose::new(vec![[20.0, 10.0, 990.0]]);
        let sample = crop_patch(&frame, [0.0, 0.0, 1000.0], &CropExtent::hand(), 32)
            .unwrap()
            .with_labels(&pose, None);
        let mut rng = RngStream::new(1);
        let out = augment(&sample, &mut rng, &AugmentRanges::identity()).unwrap();
        assert_eq!(out.patch, sample.patch);
        assert_eq!(out.labels, sample.labels, "labels must be bit-identical");
    }

    #[test]
    fn augment_requires_labels() {
        let frame = flat_frame(96, 96, 1000.0);
        let sample = crop_patch(&frame, [0.0, 0.0, 1000.0], &CropExtent::hand(), 32).unwrap();
        let mut rng = RngStream::new(1);
        assert_eq!(
            augment(&sample, &mut rng, &AugmentRanges::identity()),
            Err(GeometryError::MissingLabels)
        );
    }

    #[test]
    fn augment_rejects_bad_ranges() {
        let frame = flat_frame(96, 96, 1000.0);
        let pose = Pose::new(vec![[0.0, 0.0, 1000.0]]);
        let sample = crop_patch(&frame, [0.0, 0.0, 1000.0], &CropExtent::hand(), 32)
            .unwrap()
            .with_labels(&pose, None);
        let mut rng = RngStream::new(1);
        let bad = AugmentRanges { scale: (1.1, 0.9), ..AugmentRanges::identity() };
        assert!(augment(&sample, &mut rng, &bad).is_err());
        let bad_flip = AugmentRanges { flip_prob: 2.0, ..AugmentRanges::identity() };
        assert!(augment(&sample, &mut rng, &bad_flip).is_err());
    }

    #[test]
    fn quarter_turn_label_rule() {
        let draw =
            AugmentDraw { shift_px: (0.0, 0.0), scale: 1.0, rotate_deg: 90.0, flip: false };
        let out = transform_labels(&[0.5, 0.0, 0.2], &draw, 96, None);
        assert!((out[0] - 0.0).abs() < 1e-12);
        assert!((out[1] - 0.5).abs() < 1e-12);
        assert_eq!(out[2], 0.2);
    }

    #[test]
    fn flip_negates_x_and_permutes_joints() {
        let draw =
            AugmentDraw { shift_px: (0.0, 0.0), scale: 1.0, rotate_deg: 0.0, flip: true };
        // two joints with a swap map
        let labels = [0.3, 0.2, 0.5, -0.1, 0.4, 0.6];
        let mirror = [1usize, 0];
        let out = transform_labels(&labels, &draw, 96, Some(&mirror));
        // slot 0 receives joint 1 flipped
        assert_eq!(&out[..3], &[0.1, 0.4, 0.6]);
        assert_eq!(&out[3..], &[-0.3, 0.2, 0.5]);
    }

    #[test]
    fn scaling_divides_all_axes() {
        let draw = AugmentDraw { shift_px: (0.0, 0.0), scale: 2.0, rotate_deg: 0.0, flip: false };
        let out = transform_labels(&[0.4, -0.6, 0.8], &draw, 96, None);
        assert_eq!(out, vec![0.2, -0.3, 0.4]);
    }

    #[test]
    fn translation_moves_labels_in_normalized_units() {
        let draw = AugmentDraw { shift_px: (9.6, -4.8), scale: 1.0, rotate_deg: 0.0, flip: false };
        let out = transform_labels(&[0.0, 0.0, 0.1], &draw, 96, None);
        assert!((out[0] - 0.2).abs() < 1e-12);
        assert!((out[1] + 0.1).abs() < 1e-12);
        assert_eq!(out[2], 0.1);
    }

    #[test]
    fn dot_warp_recovers_transformed_label() {
        // paint a dark dot at a known label position, warp, find the
        // minimum, compare with the transformed label position
        let out_size = 96;
        let mut rng = RngStream::new(77);
        for _ in 0..40 {
            let label = [rng.range(-0.5, 0.5), rng.range(-0.5, 0.5), 0.0];
            let px = label_to_pixel(label[0], out_size).round() as usize;
            let py = label_to_pixel(label[1], out_size).round() as usize;
            let mut patch = vec![1.0f32; out_size * out_size];
            patch[py * out_size + px] = -1.0;

            let draw = AugmentDraw {
                shift_px: (rng.range(-10.0, 10.0), rng.range(-10.0, 10.0)),
                scale: rng.range(0.9, 1.1),
                rotate_deg: rng.range(-180.0, 180.0),
                flip: rng.uniform() < 0.5,
            };
            let warped = warp_patch(&patch, out_size, &draw);
            let (mut best_idx, mut best) = (0usize, f32::INFINITY);
            for (i, &v) in warped.iter().enumerate() {
                if v < best {
                    best = v;
                    best_idx = i;
                }
            }
            let found = ((best_idx % out_size) as f64, (best_idx / out_size) as f64);
            let moved = transform_labels(&label, &draw, out_size, None);
            let expected =
                (label_to_pixel(moved[0], out_size), label_to_pixel(moved[1], out_size));
            let dist = ((found.0 - expected.0).powi(2) + (found.1 - expected.1).powi(2)).sqrt();
            assert!(dist <= 1.0 + 1e-9, "dot at {found:?}, label at {expected:?} ({dist:.3} px)");
        }
    }

    #[test]
    fn composed_crop_matches_plain_crop_for_identity() {
        let mut rng = RngStream::new(3);
        let mut depth = vec![0.0f32; 96 * 96];
        for d in depth.iter_mut() {
            *d = rng.range(900.0, 1100.0) as f32;
        }
        let frame = DepthFrame::new(96, 96, depth, test_k()).unwrap();
        let a = crop_patch(&frame, [0.0, 0.0, 1000.0], &CropExtent::hand(), 48).unwrap();
        let b = crop_patch_with(
            &frame,
            [0.0, 0.0, 1000.0],
            &CropExtent::hand(),
            48,
            &AugmentDraw::identity(),
            Resampling::Bilinear,
        )
        .unwrap();
        assert_eq!(a.patch, b.patch);
    }

    #[test]
    fn composed_crop_scale_matches_label_depth_rule() {
        // a wall at a known offset from the center plane; zooming out by s
        // divides its normalized depth by s
        let frame = flat_frame(96, 96, 1030.0);
        let center = [0.0, 0.0, 1000.0];
        let plain = crop_patch(&frame, center, &CropExtent::hand(), 32).unwrap();
        assert!((plain.patch[0] - 0.4).abs() < 1e-6); // 30 / 75

        let draw = AugmentDraw { shift_px: (0.0, 0.0), scale: 2.0, rotate_deg: 0.0, flip: false };
        let zoomed = crop_patch_with(
            &frame,
            center,
            &CropExtent::hand(),
            32,
            &draw,
            Resampling::Bilinear,
        )
        .unwrap();
        // the widened window spills past the frame; check the center pixel
        let mid = zoomed.patch[16 * 32 + 16];
        assert!((mid - 0.2).abs() < 1e-6, "normalized depth divides by s, got {mid}");
    }

    #[test]
    fn nearest_resampling_available() {
        let frame = flat_frame(96, 96, 950.0);
        let s = crop_patch_with(
            &frame,
            [0.0, 0.0, 1000.0],
            &CropExtent::hand(),
            32,
            &AugmentDraw::identity(),
            Resampling::Nearest,
        )
        .unwrap();
        assert!(s.patch.iter().all(|&v| (v - (-50.0 / 75.0) as f32).abs() < 1e-6));
    }

    #[test]
    fn human_extent_presets() {
        let f = CropExtent::human_front();
        assert_eq!((f.ex, f.ey, f.ez), (400.0, 600.0, 400.0));
        let t = CropExtent::human_top();
        assert_eq!((t.ex, t.ey, t.ez), (300.0, 300.0, 500.0));
    }
}
