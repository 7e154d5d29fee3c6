//! Metrics, receptive-field analysis, and the multi-view / bagging
//! inference baselines.
//!
//! Detection-style metrics use a strict `<` comparison against their
//! thresholds. All metric math runs in f64 over world millimeters.

use crate::geometry::{crop_patch, denormalize_labels, CropExtent, DepthFrame, GeometryError, PatchSample, Pose};
use crate::nn::{LayerGeom, LayerKind, Model, ModelError};

/// 3x3 multi-view crop offset (mm) approximating the nine region positions.
pub const DEFAULT_MULTIVIEW_OFFSET_MM: f64 = 26.5625;
/// Fingertip detection threshold for mean precision.
pub const DEFAULT_MP_THRESHOLD_MM: f64 = 15.0;
/// Body-joint detection threshold for mean average precision (10cm).
pub const DEFAULT_MAP_THRESHOLD_MM: f64 = 100.0;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum EvalError {
    #[error("prediction and ground-truth counts differ: {preds} vs {gts}")]
    FrameCountMismatch { preds: usize, gts: usize },
    #[error("frame {frame}: joint counts differ: {preds} vs {gts}")]
    JointCountMismatch { frame: usize, preds: usize, gts: usize },
    #[error("empty input: {0}")]
    EmptyInput(&'static str),
    #[error("thresholds must be sorted ascending")]
    UnsortedThresholds,
    #[error("fingertip index {index} outside {joints} joints")]
    BadFingertip { index: usize, joints: usize },
    #[error("unknown layer kind '{0}' in stack description")]
    UnknownLayer(String),
    #[error("bad stack description: {0}")]
    BadStack(String),
    #[error("all {0} crop views failed")]
    AllViewsFailed(usize),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

type Result<T> = std::result::Result<T, EvalError>;

fn check_paired(preds: &[Pose], gts: &[Pose]) -> Result<()> {
    if preds.len() != gts.len() {
        return Err(EvalError::FrameCountMismatch { preds: preds.len(), gts: gts.len() });
    }
    if preds.is_empty() {
        return Err(EvalError::EmptyInput("no frames"));
    }
    for (i, (p, g)) in preds.iter().zip(gts.iter()).enumerate() {
        if p.joint_count() != g.joint_count() || p.joint_count() == 0 {
            return Err(EvalError::JointCountMismatch {
                frame: i,
                preds: p.joint_count(),
                gts: g.joint_count(),
            });
        }
    }
    Ok(())
}

fn joint_distance(a: [f64; 3], b: [f64; 3]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    (dx * dx + dy * dy + dz * dz).sqrt()
}

/// Mean Euclidean distance per joint (mm) and the mean over joints.
pub fn mean_3d_error(preds: &[Pose], gts: &[Pose]) -> Result<(Vec<f64>, f64)> {
    check_paired(preds, gts)?;
    let joints = preds[0].joint_count();
    let mut per_joint = vec![0.0; joints];
    for (p, g) in preds.iter().zip(gts.iter()) {
        for j in 0..joints {
            per_joint[j] += joint_distance(p.joints[j], g.joints[j]);
        }
    }
    let n = preds.len() as f64;
    for v in per_joint.iter_mut() {
        *v /= n;
    }
    let overall = per_joint.iter().sum::<f64>() / joints as f64;
    Ok((per_joint, overall))
}

/// Fraction of frames whose worst joint error is strictly below each
/// threshold. Thresholds must be sorted ascending.
pub fn success_frame_curve(
    preds: &[Pose],
    gts: &[Pose],
    thresholds: &[f64],
) -> Result<Vec<(f64, f64)>> {
    check_paired(preds, gts)?;
    if thresholds.is_empty() {
        return Err(EvalError::EmptyInput("no thresholds"));
    }
    if thresholds.windows(2).any(|w| w[0] > w[1]) {
        return Err(EvalError::UnsortedThresholds);
    }
    let worst: Vec<f64> = preds
        .iter()
        .zip(gts.iter())
        .map(|(p, g)| {
            p.joints
                .iter()
                .zip(g.joints.iter())
                .map(|(&a, &b)| joint_distance(a, b))
                .fold(0.0, f64::max)
        })
        .collect();
    let n = preds.len() as f64;
    Ok(thresholds
        .iter()
        .map(|&t| (t, worst.iter().filter(|&&w| w < t).count() as f64 / n))
        .collect())
}

/// 0, 1, ..., 80 mm.
pub fn default_thresholds() -> Vec<f64> {
    (0..=80).map(|t| t as f64).collect()
}

/// Mean over fingertip joints of the per-joint detection rate below the
/// threshold.
pub fn mean_precision_fingertips(
    preds: &[Pose],
    gts: &[Pose],
    fingertips: &[usize],
    threshold_mm: f64,
) -> Result<f64> {
    check_paired(preds, gts)?;
    if fingertips.is_empty() {
        return Err(EvalError::EmptyInput("no fingertip indices"));
    }
    let joints = preds[0].joint_count();
    for &idx in fingertips {
        if idx >= joints {
            return Err(EvalError::BadFingertip { index: idx, joints });
        }
    }
    let n = preds.len() as f64;
    let mut total = 0.0;
    for &j in fingertips {
        let detected = preds
            .iter()
            .zip(gts.iter())
            .filter(|(p, g)| joint_distance(p.joints[j], g.joints[j]) < threshold_mm)
            .count();
        total += detected as f64 / n;
    }
    Ok(total / fingertips.len() as f64)
}

/// Per-joint detection rate below the threshold, plus the mean over joints.
pub fn mean_average_precision(
    preds: &[Pose],
    gts: &[Pose],
    threshold_mm: f64,
) -> Result<(Vec<f64>, f64)> {
    check_paired(preds, gts)?;
    let joints = preds[0].joint_count();
    let n = preds.len() as f64;
    let per_joint: Vec<f64> = (0..joints)
        .map(|j| {
            preds
                .iter()
                .zip(gts.iter())
                .filter(|(p, g)| joint_distance(p.joints[j], g.joints[j]) < threshold_mm)
                .count() as f64
                / n
        })
        .collect();
    let mean = per_joint.iter().sum::<f64>() / joints as f64;
    Ok((per_joint, mean))
}

// ── receptive fields ───────────────────────────────────────────────────

/// Forward geometry of a conv/pool stack: output cell i covers input
/// pixels [i * jump - pad_total, i * jump - pad_total + span - 1].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StackGeometry {
    pub jump: usize,
    pub span: usize,
    pub pad_total: usize,
}

pub fn stack_geometry(stack: &[LayerGeom]) -> StackGeometry {
    let mut jump = 1usize;
    let mut span = 1usize;
    let mut pad_total = 0usize;
    for layer in stack {
        span += (layer.kernel - 1) * jump;
        pad_total += layer.pad * jump;
        jump *= layer.stride;
    }
    StackGeometry { jump, span, pad_total }
}

/// Input-pixel interval (inclusive, clipped to the image) influencing a
/// feature-map region.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ReceptiveField {
    pub rows: (usize, usize),
    pub cols: (usize, usize),
}

impl ReceptiveField {
    pub fn height(&self) -> usize {
        self.rows.1 - self.rows.0 + 1
    }

    pub fn width(&self) -> usize {
        self.cols.1 - self.cols.0 + 1
    }
}

/// Union of the per-cell intervals of a region, clipped to the input.
pub fn receptive_field(
    stack: &[LayerGeom],
    region: crate::nn::Region,
    input_size: usize,
) -> Result<ReceptiveField> {
    if region.height == 0 || region.width == 0 {
        return Err(EvalError::EmptyInput("empty region"));
    }
    let geom = stack_geometry(stack);
    let axis = |off: usize, len: usize| -> Result<(usize, usize)> {
        let lo = (off * geom.jump) as isize - geom.pad_total as isize;
        let hi = ((off + len - 1) * geom.jump + geom.span - 1) as isize - geom.pad_total as isize;
        if hi < 0 || lo >= input_size as isize {
            return Err(EvalError::BadStack(format!(
                "region column {off} sees pixels [{lo}, {hi}] outside the {input_size}px input"
            )));
        }
        Ok((lo.max(0) as usize, hi.min(input_size as isize - 1) as usize))
    };
    Ok(ReceptiveField {
        rows: axis(region.row_off, region.height)?,
        cols: axis(region.col_off, region.width)?,
    })
}

/// Parses a stack description like `conv:3:1:1,pool:2:2`; kind:kernel:stride
/// with an optional fourth pad field (default 0).
pub fn parse_stack(desc: &str) -> Result<Vec<LayerGeom>> {
    let mut out = Vec::new();
    for item in desc.split(',') {
        let fields: Vec<&str> = item.trim().split(':').collect();
        if fields.len() < 3 || fields.len() > 4 {
            return Err(EvalError::BadStack(format!("'{item}' needs kind:kernel:stride[:pad]")));
        }
        let kind = match fields[0] {
            "conv" => LayerKind::Conv,
            "pool" => LayerKind::Pool,
            other => return Err(EvalError::UnknownLayer(other.to_string())),
        };
        let parse = |s: &str| {
            s.parse::<usize>().map_err(|e| EvalError::BadStack(format!("'{item}': {e}")))
        };
        let kernel = parse(fields[1])?;
        let stride = parse(fields[2])?;
        let pad = if fields.len() == 4 { parse(fields[3])? } else { 0 };
        if kernel == 0 || stride == 0 {
            return Err(EvalError::BadStack(format!("'{item}': zero kernel or stride")));
        }
        out.push(LayerGeom { kind, kernel, stride, pad });
    }
    if out.is_empty() {
        return Err(EvalError::EmptyInput("empty stack"));
    }
    Ok(out)
}

// ── inference baselines ────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct MultiviewOutcome {
    pub pose: Pose,
    /// views dropped because their crop failed
    pub skipped: usize,
}

/// Averages world-space predictions over a 3x3 grid of crops whose centers
/// shift by {-d, 0, +d} mm on x and y. Predictions denormalize around each
/// view's own center before averaging; failed crops are skipped and the
/// mean renormalizes over the remaining views.
pub fn multiview_predict(
    model: &Model<f32>,
    frame: &DepthFrame,
    center: [f64; 3],
    extent: &CropExtent,
    d_mm: f64,
) -> Result<MultiviewOutcome> {
    let offsets: Vec<(f64, f64)> = if d_mm == 0.0 {
        // identical crops average to the single view exactly
        vec![(0.0, 0.0)]
    } else {
        let steps = [-d_mm, 0.0, d_mm];
        steps.iter().flat_map(|&dy| steps.iter().map(move |&dx| (dx, dy))).collect()
    };
    let out_size = model.config().input_size;
    let joints = model.config().joint_count;

    let mut sum = vec![[0.0f64; 3]; joints];
    let mut used = 0usize;
    let mut skipped = 0usize;
    for &(dx, dy) in &offsets {
        let view_center = [center[0] + dx, center[1] + dy, center[2]];
        let sample = match crop_patch(frame, view_center, extent, out_size) {
            Ok(s) => s,
            Err(_) => {
                skipped += 1;
                continue;
            }
        };
        let out = model.infer(&sample.patch)?;
        let labels: Vec<f64> = out.iter().map(|&v| v as f64).collect();
        let pose = denormalize_labels(&labels, view_center, extent);
        for (acc, j) in sum.iter_mut().zip(pose.joints.iter()) {
            acc[0] += j[0];
            acc[1] += j[1];
            acc[2] += j[2];
        }
        used += 1;
    }
    if used == 0 {
        return Err(EvalError::AllViewsFailed(offsets.len()));
    }
    let n = used as f64;
    let joints = sum.into_iter().map(|a| [a[0] / n, a[1] / n, a[2] / n]).collect();
    Ok(MultiviewOutcome { pose: Pose::new(joints), skipped })
}

/// Mean of per-model denormalized poses on one patch.
pub fn bagging_predict(models: &[Model<f32>], sample: &PatchSample) -> Result<Pose> {
    if models.is_empty() {
        return Err(EvalError::EmptyInput("no models"));
    }
    let joints = models[0].config().joint_count;
    for m in models[1..].iter() {
        if m.config().joint_count != joints {
            return Err(EvalError::JointCountMismatch {
                frame: 0,
                preds: m.config().joint_count,
                gts: joints,
            });
        }
    }
    let mut sum = vec![[0.0f64; 3]; joints];
    for m in models {
        let out = m.infer(&sample.patch)?;
        let labels: Vec<f64> = out.iter().map(|&v| v as f64).collect();
        let pose = denormalize_labels(&labels, sample.center, &sample.extent);
        for (acc, j) in sum.iter_mut().zip(pose.joints.iter()) {
            acc[0] += j[0];
            acc[1] += j[1];
            acc[2] += j[2];
        }
    }
    let n = models.len() as f64;
    Ok(Pose::new(sum.into_iter().map(|a| [a[0] / n, a[1] / n, a[2] / n]).collect()))
}

// ── report ─────────────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub per_joint_mean_error_mm: Vec<f64>,
    pub overall_mean_error_mm: f64,
    pub success_curve: Vec<(f64, f64)>,
    pub mp: Option<f64>,
    pub map: Option<(Vec<f64>, f64)>,
}

/// Runs every configured metric over paired poses.
pub fn evaluate(
    preds: &[Pose],
    gts: &[Pose],
    thresholds: &[f64],
    fingertips: Option<&[usize]>,
    map_threshold: Option<f64>,
) -> Result<EvalReport> {
    let (per_joint, overall) = mean_3d_error(preds, gts)?;
    let curve = success_frame_curve(preds, gts, thresholds)?;
    let mp = match fingertips {
        Some(tips) => {
            Some(mean_precision_fingertips(preds, gts, tips, DEFAULT_MP_THRESHOLD_MM)?)
        }
        None => None,
    };
    let map = match map_threshold {
        Some(t) => Some(mean_average_precision(preds, gts, t)?),
        None => None,
    };
    Ok(EvalReport {
        per_joint_mean_error_mm: per_joint,
        overall_mean_error_mm: overall,
        success_curve: curve,
        mp,
        map,
    })
}

impl EvalReport {
    /// `joint,mean_error_mm` rows plus an `overall` row.
    pub fn per_joint_csv(&self) -> String {
        let mut out = String::from("joint,mean_error_mm\n");
        for (j, e) in self.per_joint_mean_error_mm.iter().enumerate() {
            out.push_str(&format!("{j},{e}\n"));
        }
        out.push_str(&format!("overall,{}\n", self.overall_mean_error_mm));
        out
    }

    /// `threshold_mm,fraction` rows.
    pub fn curve_csv(&self) -> String {
        let mut out = String::from("threshold_mm,fraction\n");
        for (t, f) in &self.success_curve {
            out.push_str(&format!("{t},{f}\n"));
        }
        out
    }
}
