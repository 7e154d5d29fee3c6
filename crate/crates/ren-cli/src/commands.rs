//! The six subcommands.

use std::fs;
use std::path::{Path, PathBuf};

use ren_core::data::{self, Dataset, FingerSpec, SyntheticHandSpec};
use ren_core::eval::{self, EvalReport};
use ren_core::geometry::{self, crop_patch, CameraIntrinsics, Pose};
use ren_core::nn::{build_model, extractor_stack, Architecture, Head, Mode, Model, ModelConfig};
use ren_core::train::{self, LossKind, TrainConfig, TrainSample, LOSS_CSV_HEADER};
use ren_core::RngStream;

use crate::config::{data_err, RunConfig};
use crate::CliError;

type Result<T> = std::result::Result<T, CliError>;

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

fn runtime(msg: impl Into<String>) -> CliError {
    CliError::Runtime(msg.into())
}

// parameter init draws from a lane of the run seed separate from the
// shuffle/augment/dropout lanes inside the training loop
const INIT_STREAM_TAG: u64 = 0x1217;

fn ensure_out_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)
        .map_err(|e| runtime(format!("cannot create {}: {e}", dir.display())))
}

fn write_file(path: &Path, content: &str) -> Result<()> {
    fs::write(path, content).map_err(|e| runtime(format!("cannot write {}: {e}", path.display())))
}

fn load_dataset(manifest: &Path) -> Result<Dataset> {
    data::read_manifest(manifest).map_err(data_err)
}

fn load_samples(ds: &Dataset) -> Result<Vec<TrainSample>> {
    let raw = data::load_dataset_frames(ds).map_err(data_err)?;
    train::prepare_samples(raw, ds.config.near_mm, ds.config.far_mm)
        .map_err(|e| usage(format!("{e}")))
}

/// Adopts the manifest's joint count unless the config pinned one.
fn reconcile_joints(rc: &mut RunConfig, ds: &Dataset) -> Result<()> {
    if rc.joints_explicit && rc.model.joint_count != ds.config.joint_count {
        return Err(usage(format!(
            "config says {} joints but the manifest has {}",
            rc.model.joint_count, ds.config.joint_count
        )));
    }
    rc.model.joint_count = ds.config.joint_count;
    rc.model.validate().map_err(|e| usage(e.to_string()))?;
    Ok(())
}

fn infer_pose(model: &Model<f32>, ds: &Dataset, sample: &TrainSample) -> Result<Pose> {
    let patch = crop_patch(
        &sample.frame,
        sample.center,
        &ds.config.extent,
        model.config().input_size,
    )
    .map_err(|e| usage(e.to_string()))?;
    let out = model.infer(&patch.patch).map_err(|e| runtime(e.to_string()))?;
    let labels: Vec<f64> = out.iter().map(|&v| v as f64).collect();
    Ok(geometry::denormalize_labels(&labels, sample.center, &ds.config.extent))
}

fn single_view_poses(model: &Model<f32>, ds: &Dataset, samples: &[TrainSample]) -> Result<Vec<Pose>> {
    samples.iter().map(|s| infer_pose(model, ds, s)).collect()
}

// ── train ──────────────────────────────────────────────────────────────

pub fn cmd_train(config: Option<&Path>, overrides: &[(String, String)]) -> Result<()> {
    let mut rc = RunConfig::load(config, overrides)?;
    let manifest = rc.manifest.clone().ok_or_else(|| usage("train needs 'manifest'"))?;
    let out = rc.out.clone().ok_or_else(|| usage("train needs 'out'"))?;
    let ds = load_dataset(&manifest)?;
    reconcile_joints(&mut rc, &ds)?;
    ensure_out_dir(&out)?;
    write_file(&out.join("resolved.cfg"), &rc.resolved_text())?;

    let samples = load_samples(&ds)?;
    let mut model: Model<f32> =
        build_model(&rc.model, &RngStream::new(rc.train.seed).derive(INIT_STREAM_TAG))
            .map_err(|e| usage(e.to_string()))?;

    let total = rc.train.total_epochs;
    let every = rc.checkpoint_every;
    let progress_step = (total / 10).max(1);
    let mut checkpoint_err: Option<CliError> = None;
    let history = train::train(
        &mut model,
        &samples,
        &ds.config.extent,
        &rc.train,
        ds.config.mirror.as_deref(),
        &mut |e, m| {
            if e.epoch % progress_step == 0 || e.epoch + 1 == total {
                eprintln!("epoch {:4}/{total}  lr {:.6}  loss {:.6}", e.epoch, e.lr, e.mean_loss);
            }
            if every > 0 && (e.epoch + 1) % every == 0 && checkpoint_err.is_none() {
                let path = out.join(format!("checkpoint_epoch{:04}.renc", e.epoch));
                if let Err(err) = data::save_checkpoint(&path, m) {
                    checkpoint_err = Some(data_err(err));
                }
            }
        },
    )
    .map_err(|e| match e {
        train::TrainError::BadConfig(_) | train::TrainError::EmptyDataset => usage(e.to_string()),
        other => runtime(other.to_string()),
    })?;
    if let Some(err) = checkpoint_err {
        return Err(err);
    }

    let mut csv = String::from(LOSS_CSV_HEADER);
    csv.push('\n');
    for r in &history {
        csv.push_str(&r.csv_line());
        csv.push('\n');
    }
    write_file(&out.join("loss.csv"), &csv)?;
    data::save_checkpoint(&out.join("checkpoint.renc"), &model).map_err(data_err)?;
    println!(
        "trained {} epochs on {} samples; final loss {}",
        total,
        samples.len(),
        history.last().map(|r| r.loss).unwrap_or(f64::NAN)
    );
    Ok(())
}

// ── eval ───────────────────────────────────────────────────────────────

pub struct EvalFlags {
    pub mp: bool,
    pub map: bool,
    pub multiview: Option<f64>,
    pub bag: Vec<PathBuf>,
    pub oracle: bool,
}

pub fn cmd_eval(
    checkpoint: &Path,
    manifest: &Path,
    out: &Path,
    flags: &EvalFlags,
) -> Result<EvalReport> {
    let model = data::load_checkpoint(checkpoint).map_err(data_err)?;
    let ds = load_dataset(manifest)?;
    if model.config().joint_count != ds.config.joint_count {
        return Err(usage(format!(
            "checkpoint has {} joints but the manifest has {}",
            model.config().joint_count,
            ds.config.joint_count
        )));
    }
    let samples = load_samples(&ds)?;
    if samples.is_empty() {
        return Err(usage("manifest lists no frames"));
    }

    let mut bag_models = Vec::new();
    for path in &flags.bag {
        let m = data::load_checkpoint(path).map_err(data_err)?;
        if m.config().joint_count != ds.config.joint_count {
            return Err(usage(format!(
                "bagged checkpoint {} has {} joints but the manifest has {}",
                path.display(),
                m.config().joint_count,
                ds.config.joint_count
            )));
        }
        bag_models.push(m);
    }

    let gts: Vec<Pose> = samples.iter().map(|s| s.pose.clone()).collect();
    let preds: Vec<Pose> = if flags.oracle {
        gts.clone()
    } else if let Some(d) = flags.multiview {
        let mut out_poses = Vec::with_capacity(samples.len());
        let mut skipped_total = 0usize;
        for s in &samples {
            let outcome =
                eval::multiview_predict(&model, &s.frame, s.center, &ds.config.extent, d)
                    .map_err(|e| runtime(e.to_string()))?;
            skipped_total += outcome.skipped;
            out_poses.push(outcome.pose);
        }
        if skipped_total > 0 {
            eprintln!("warning: {skipped_total} multi-view crops skipped");
        }
        out_poses
    } else if !bag_models.is_empty() {
        let mut all = vec![model.clone()];
        all.extend(bag_models);
        samples
            .iter()
            .map(|s| {
                let patch = crop_patch(
                    &s.frame,
                    s.center,
                    &ds.config.extent,
                    model.config().input_size,
                )
                .map_err(|e| usage(e.to_string()))?;
                eval::bagging_predict(&all, &patch).map_err(|e| runtime(e.to_string()))
            })
            .collect::<Result<Vec<_>>>()?
    } else {
        single_view_poses(&model, &ds, &samples)?
    };

    let fingertips = flags.mp.then_some(ds.config.fingertips.as_slice());
    let map_threshold = flags.map.then_some(eval::DEFAULT_MAP_THRESHOLD_MM);
    let report =
        eval::evaluate(&preds, &gts, &eval::default_thresholds(), fingertips, map_threshold)
            .map_err(|e| runtime(e.to_string()))?;

    ensure_out_dir(out)?;
    write_file(&out.join("per_joint.csv"), &report.per_joint_csv())?;
    write_file(&out.join("success_curve.csv"), &report.curve_csv())?;
    let mut resolved = format!(
        "checkpoint = {}\nmanifest = {}\nout = {}\nmp = {}\nmap = {}\noracle = {}\n",
        checkpoint.display(),
        manifest.display(),
        out.display(),
        flags.mp,
        flags.map,
        flags.oracle,
    );
    if let Some(d) = flags.multiview {
        resolved.push_str(&format!("multiview = {d}\n"));
    }
    for b in &flags.bag {
        resolved.push_str(&format!("bag = {}\n", b.display()));
    }
    write_file(&out.join("eval_resolved.cfg"), &resolved)?;

    println!("overall_mean_error_mm = {}", report.overall_mean_error_mm);
    if let Some(mp) = report.mp {
        println!("mp = {mp}");
    }
    if let Some((_, map)) = &report.map {
        println!("map = {map}");
    }
    Ok(report)
}

// ── predict ────────────────────────────────────────────────────────────

pub fn cmd_predict(
    checkpoint: &Path,
    depth: &Path,
    manifest: &Path,
    center_override: Option<[f64; 3]>,
    out: Option<&Path>,
) -> Result<Pose> {
    let model = data::load_checkpoint(checkpoint).map_err(data_err)?;
    let ds = load_dataset(manifest)?;
    let frame = data::read_depth_file(depth, ds.config.intrinsics).map_err(data_err)?;
    let center = match center_override {
        Some(c) => c,
        None => geometry::segment_and_center(&frame, ds.config.near_mm, ds.config.far_mm)
            .map_err(|e| usage(format!("{e}; pass --center x,y,z to bypass segmentation")))?,
    };
    let patch = crop_patch(&frame, center, &ds.config.extent, model.config().input_size)
        .map_err(|e| usage(e.to_string()))?;
    let raw = model.infer(&patch.patch).map_err(|e| runtime(e.to_string()))?;
    let labels: Vec<f64> = raw.iter().map(|&v| v as f64).collect();
    let pose = geometry::denormalize_labels(&labels, center, &ds.config.extent);

    let line = pose
        .flatten()
        .iter()
        .map(|v| v.to_string())
        .collect::<Vec<_>>()
        .join(" ");
    println!("{line}");
    if let Some(dir) = out {
        ensure_out_dir(dir)?;
        write_file(&dir.join("pose.txt"), &format!("{line}\n"))?;
        let resolved = format!(
            "checkpoint = {}\ndepth = {}\nmanifest = {}\ncenter = {}\n",
            checkpoint.display(),
            depth.display(),
            manifest.display(),
            center_override
                .map(|c| format!("{},{},{}", c[0], c[1], c[2]))
                .unwrap_or_else(|| "auto".into()),
        );
        write_file(&dir.join("predict_resolved.cfg"), &resolved)?;
    }
    Ok(pose)
}

// ── gen-data ───────────────────────────────────────────────────────────

fn parse_fingers(v: &str) -> Result<Vec<FingerSpec>> {
    v.split(',')
        .map(|item| {
            let (len, radius) = item
                .trim()
                .split_once(':')
                .ok_or_else(|| usage(format!("finger '{item}' needs length:radius")))?;
            let l: f64 = len.parse().map_err(|e| usage(format!("finger length: {e}")))?;
            let r: f64 = radius.parse().map_err(|e| usage(format!("finger radius: {e}")))?;
            Ok(FingerSpec { segment_lengths: [l, l * 0.8, l * 0.6], radius: r })
        })
        .collect()
}

pub fn hand_spec_from_pairs(pairs: &[(String, String)]) -> Result<SyntheticHandSpec> {
    let mut spec = SyntheticHandSpec::default();
    let mut k = spec.intrinsics;
    for (key, v) in pairs {
        let fnum = || v.parse::<f64>().map_err(|e| usage(format!("{key}: {e}")));
        match key.as_str() {
            "image_size" => {
                spec.image_size = v.parse().map_err(|e| usage(format!("image_size: {e}")))?
            }
            "fx" => k.fx = fnum()?,
            "fy" => k.fy = fnum()?,
            "cx" => k.cx = fnum()?,
            "cy" => k.cy = fnum()?,
            "palm_radius" => spec.palm_radius = fnum()?,
            "fingers" => spec.fingers = parse_fingers(v)?,
            "curl_lo" => spec.curl_deg.0 = fnum()?,
            "curl_hi" => spec.curl_deg.1 = fnum()?,
            "orient" => spec.orient_deg = fnum()?,
            "depth_lo" => spec.depth_mm.0 = fnum()?,
            "depth_hi" => spec.depth_mm.1 = fnum()?,
            "lateral" => spec.lateral_mm = fnum()?,
            "retry_budget" => {
                spec.retry_budget = v.parse().map_err(|e| usage(format!("retry_budget: {e}")))?
            }
            other => return Err(usage(format!("unknown hand spec key '{other}'"))),
        }
    }
    spec.intrinsics =
        CameraIntrinsics::new(k.fx, k.fy, k.cx, k.cy).map_err(|e| usage(e.to_string()))?;
    Ok(spec)
}

fn hand_spec_resolved(spec: &SyntheticHandSpec, n: usize, seed: u64) -> String {
    let fingers: Vec<String> = spec
        .fingers
        .iter()
        .map(|f| format!("{}:{}", f.segment_lengths[0], f.radius))
        .collect();
    format!(
        "image_size = {}\nfx = {}\nfy = {}\ncx = {}\ncy = {}\npalm_radius = {}\nfingers = {}\n\
         curl_lo = {}\ncurl_hi = {}\norient = {}\ndepth_lo = {}\ndepth_hi = {}\nlateral = {}\n\
         retry_budget = {}\ncount = {n}\nseed = {seed}\n",
        spec.image_size,
        spec.intrinsics.fx,
        spec.intrinsics.fy,
        spec.intrinsics.cx,
        spec.intrinsics.cy,
        spec.palm_radius,
        fingers.join(","),
        spec.curl_deg.0,
        spec.curl_deg.1,
        spec.orient_deg,
        spec.depth_mm.0,
        spec.depth_mm.1,
        spec.lateral_mm,
        spec.retry_budget,
    )
}

pub fn cmd_gen_data(spec_file: Option<&Path>, n: usize, seed: u64, out: &Path) -> Result<()> {
    let pairs = match spec_file {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| usage(format!("cannot read spec {}: {e}", path.display())))?;
            text.lines().filter_map(data::parse_kv).collect()
        }
        None => Vec::new(),
    };
    let spec = hand_spec_from_pairs(&pairs)?;
    ensure_out_dir(out)?;
    let manifest = data::write_synthetic_dataset(out, &spec, n, seed).map_err(data_err)?;
    write_file(&out.join("resolved.cfg"), &hand_spec_resolved(&spec, n, seed))?;
    let ds = load_dataset(&manifest)?;
    let stats = data::dataset_stats(&ds).map_err(data_err)?;
    println!(
        "wrote {} frames to {}; depth range {:?}",
        stats.frames,
        manifest.display(),
        stats.depth_range
    );
    Ok(())
}

// ── rf ─────────────────────────────────────────────────────────────────

pub const RF_CSV_HEADER: &str = "region,row_off,col_off,row_lo,row_hi,col_lo,col_hi,height,width";

pub fn rf_table(config: &ModelConfig, stack_desc: Option<&str>) -> Result<String> {
    let stack = match stack_desc {
        Some(desc) => eval::parse_stack(desc).map_err(|e| usage(e.to_string()))?,
        None => extractor_stack(config.architecture),
    };
    let geom = eval::stack_geometry(&stack);
    eprintln!("jump {}  span {}  pad_total {}", geom.jump, geom.span, geom.pad_total);
    let mut out = String::from(RF_CSV_HEADER);
    out.push('\n');
    for (i, r) in config.effective_regions().regions().iter().enumerate() {
        let rf = eval::receptive_field(&stack, *r, config.input_size)
            .map_err(|e| usage(e.to_string()))?;
        out.push_str(&format!(
            "{i},{},{},{},{},{},{},{},{}\n",
            r.row_off,
            r.col_off,
            rf.rows.0,
            rf.rows.1,
            rf.cols.0,
            rf.cols.1,
            rf.height(),
            rf.width(),
        ));
    }
    Ok(out)
}

pub fn cmd_rf(
    config: Option<&Path>,
    overrides: &[(String, String)],
    stack_desc: Option<&str>,
    out: Option<&Path>,
) -> Result<()> {
    let rc = RunConfig::load(config, overrides)?;
    let table = rf_table(&rc.model, stack_desc)?;
    print!("{table}");
    if let Some(dir) = out {
        ensure_out_dir(dir)?;
        write_file(&dir.join("rf.csv"), &table)?;
        write_file(&dir.join("resolved.cfg"), &rc.resolved_text())?;
    }
    Ok(())
}

// ── ablate ─────────────────────────────────────────────────────────────

/// The six incremental rungs; each differs from its predecessor by exactly
/// one switch.
pub fn ablation_ladder(
    base_model: &ModelConfig,
    base_train: &TrainConfig,
) -> Vec<(&'static str, ModelConfig, TrainConfig)> {
    let mut model = base_model.clone();
    let mut train = base_train.clone();
    model.architecture = Architecture::Shallow;
    model.head = Head::Single;
    train.loss = LossKind::L2;
    train.augment = false;
    let mut rungs = Vec::new();
    rungs.push(("shallow", model.clone(), train.clone()));
    model.architecture = Architecture::Basic;
    rungs.push(("+deeper", model.clone(), train.clone()));
    model.architecture = Architecture::BasicResidual;
    rungs.push(("+residual-edge", model.clone(), train.clone()));
    train.loss = LossKind::SmoothL1;
    rungs.push(("+smooth-l1", model.clone(), train.clone()));
    train.augment = true;
    rungs.push(("+augmentation", model.clone(), train.clone()));
    model.head = Head::RegionEnsemble;
    rungs.push(("+region-ensemble", model, train));
    rungs
}

pub const ABLATION_CSV_HEADER: &str = "rung,strategy,error_mm";

pub fn cmd_ablate(config: Option<&Path>, overrides: &[(String, String)]) -> Result<()> {
    let mut rc = RunConfig::load(config, overrides)?;
    let manifest = rc.manifest.clone().ok_or_else(|| usage("ablate needs 'manifest'"))?;
    let out = rc.out.clone().ok_or_else(|| usage("ablate needs 'out'"))?;
    let ds = load_dataset(&manifest)?;
    reconcile_joints(&mut rc, &ds)?;
    ensure_out_dir(&out)?;
    write_file(&out.join("resolved.cfg"), &rc.resolved_text())?;

    let samples = load_samples(&ds)?;
    let eval_ds = match &rc.eval_manifest {
        Some(p) => load_dataset(p)?,
        None => ds.clone(),
    };
    let eval_samples = if rc.eval_manifest.is_some() { load_samples(&eval_ds)? } else { samples.clone() };
    let eval_gts: Vec<Pose> = eval_samples.iter().map(|s| s.pose.clone()).collect();

    let mut csv = String::from(ABLATION_CSV_HEADER);
    csv.push('\n');
    for (i, (name, model_cfg, train_cfg)) in
        ablation_ladder(&rc.model, &rc.train).into_iter().enumerate()
    {
        let mut model: Model<f32> =
            build_model(&model_cfg, &RngStream::new(train_cfg.seed).derive(INIT_STREAM_TAG))
                .map_err(|e| usage(e.to_string()))?;
        train::train(
            &mut model,
            &samples,
            &ds.config.extent,
            &train_cfg,
            ds.config.mirror.as_deref(),
            &mut |_, _| {},
        )
        .map_err(|e| runtime(e.to_string()))?;
        model.set_mode(Mode::Eval);
        let preds = single_view_poses(&model, &eval_ds, &eval_samples)?;
        let (_, overall) =
            eval::mean_3d_error(&preds, &eval_gts).map_err(|e| runtime(e.to_string()))?;
        let row = format!("{},{name},{overall}", i + 1);
        println!("{row}");
        csv.push_str(&row);
        csv.push('\n');
    }
    write_file(&out.join("ablation.csv"), &csv)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ladder_has_six_rungs_each_one_flag_apart() {
        let base = ModelConfig {
            input_size: 48,
            region_spec: ren_core::nn::RegionSpec::four_corners(6).unwrap(),
            ..ModelConfig::default()
        };
        let ladder = ablation_ladder(&base, &TrainConfig::default());
        assert_eq!(ladder.len(), 6);
        let fingerprint = |m: &ModelConfig, t: &TrainConfig| {
            (m.architecture, m.head, t.loss, t.augment)
        };
        for w in ladder.windows(2) {
            let (a, b) = (&w[0], &w[1]);
            let fa = fingerprint(&a.1, &a.2);
            let fb = fingerprint(&b.1, &b.2);
            let diffs = [
                (fa.0 != fb.0) as usize,
                (fa.1 != fb.1) as usize,
                (fa.2 != fb.2) as usize,
                (fa.3 != fb.3) as usize,
            ]
            .iter()
            .sum::<usize>();
            assert_eq!(diffs, 1, "{} -> {} changes {diffs} flags", a.0, b.0);
        }
        assert_eq!(ladder[0].1.architecture, Architecture::Shallow);
        assert_eq!(ladder[5].1.head, Head::RegionEnsemble);
        assert_eq!(ladder[5].1.architecture, Architecture::BasicResidual);
        assert_eq!(ladder[5].2.loss, LossKind::SmoothL1);
        assert!(ladder[5].2.augment);
    }

    #[test]
    fn rf_table_prints_figure_values() {
        let cfg = ModelConfig { fc_width: 8, ..ModelConfig::default() };
        let table = rf_table(&cfg, None).unwrap();
        let lines: Vec<&str> = table.lines().collect();
        assert_eq!(lines[0], RF_CSV_HEADER);
        assert_eq!(lines.len(), 10); // header + nine regions
        // corners 62x62, edge centers 62x76 / 76x62, center 76x76
        assert!(lines[1].ends_with(",0,61,0,61,62,62"));
        assert!(lines[5].ends_with(",0,61,10,85,62,76"));
        assert!(lines[6].ends_with(",10,85,0,61,76,62"));
        assert!(lines[9].ends_with(",10,85,10,85,76,76"));
    }

    #[test]
    fn rf_custom_stack_errors_on_unknown_layer() {
        let cfg = ModelConfig::default();
        assert!(matches!(rf_table(&cfg, Some("norm:3:1")), Err(CliError::Usage(_))));
    }

    #[test]
    fn finger_spec_parsing() {
        let fingers = parse_fingers("15:5.5,17:5").unwrap();
        assert_eq!(fingers.len(), 2);
        assert_eq!(fingers[0].segment_lengths, [15.0, 12.0, 9.0]);
        assert!(parse_fingers("15").is_err());
    }
}
