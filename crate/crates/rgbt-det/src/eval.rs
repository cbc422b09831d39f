//! Evaluation pipeline: run inference over the test split, write one
//! detection file per image, then score those files against the visible and
//! thermal ground truth and average the two (the headline protocol).
//!
//! Metrics are always computed from the written detection files, so a report
//! regenerated from saved detections reproduces the live run exactly.

use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::Axis;

use crate::checkpoint::load_checkpoint;
use crate::config::RunConfig;
use crate::data::{self, ImagePair, Split};
use crate::error::{Error, Result};
use crate::fusion::{self, Detection};
use crate::metrics::{self, DualModalityReport, EvalImage, GtBox, MetricsReport};
use crate::network::Model;
use crate::supervision::Annotation;

pub struct EvalOutcome {
    pub report: DualModalityReport,
    pub detections_dir: PathBuf,
    pub report_path: PathBuf,
    pub images_per_sec: f64,
}

fn annotations_to_gt(list: &[Annotation], w: usize, h: usize) -> Vec<GtBox> {
    list.iter()
        .map(|a| {
            let (x1, y1, x2, y2) = a.corners();
            GtBox {
                class_id: a.class_id,
                x1: x1 * w as f64,
                y1: y1 * h as f64,
                x2: x2 * w as f64,
                y2: y2 * h as f64,
            }
        })
        .collect()
}

/// Inference over one pair (batch of one).
pub fn predict_pair(model: &Model<f32>, pair: &ImagePair, cfg: &RunConfig) -> Result<Vec<Detection>> {
    let (v, t) = pair.input_tensors::<f32>();
    let xv = v.insert_axis(Axis(0));
    let xt = t.insert_axis(Axis(0));
    let mut lists = match cfg.branch_select() {
        Some(branch) => fusion::predict_branch(
            model,
            &xv,
            &xt,
            branch,
            cfg.score_thresh,
            cfg.nms_iou,
        )?,
        None => fusion::predict(
            model,
            &xv,
            &xt,
            &cfg.fusion_weight_struct(),
            cfg.score_thresh,
            cfg.nms_iou,
            cfg.fusion_mode_enum(),
        )?,
    };
    Ok(lists.pop().unwrap_or_default())
}

/// Scores existing detection files against both modality ground truths.
pub fn evaluate_detections(
    detections_dir: &Path,
    data_root: &Path,
    cfg: &RunConfig,
) -> Result<DualModalityReport> {
    let stems = data::load_split_stems(data_root, Split::Test)?;
    if stems.is_empty() {
        return Err(Error::integrity(data_root, "test split is empty"));
    }
    let eval_cfg = cfg.eval_config();
    let mut images_v = Vec::with_capacity(stems.len());
    let mut images_t = Vec::with_capacity(stems.len());
    for stem in &stems {
        let det_path = detections_dir.join(format!("{stem}.txt"));
        if !det_path.exists() {
            return Err(Error::integrity(&det_path, "missing detection file"));
        }
        let dets = fusion::read_detections(&det_path)?;
        let ann_v =
            crate::supervision::read_annotations(&data_root.join(format!("annotations/visible/{stem}.txt")))?;
        let ann_t =
            crate::supervision::read_annotations(&data_root.join(format!("annotations/thermal/{stem}.txt")))?;
        let (h, w) = (cfg.image_size, cfg.image_size);
        images_v.push(EvalImage {
            dets: dets.clone(),
            gts: annotations_to_gt(&ann_v, w, h),
        });
        images_t.push(EvalImage {
            dets,
            gts: annotations_to_gt(&ann_t, w, h),
        });
    }
    let rep_v = metrics::evaluate(&images_v, cfg.num_classes, &eval_cfg)?;
    let rep_t = metrics::evaluate(&images_t, cfg.num_classes, &eval_cfg)?;
    Ok(metrics::dual_modality_report(rep_v, rep_t))
}

fn modality_lines(prefix: &str, rep: &MetricsReport, out: &mut String) {
    out.push_str(&format!("mr2_{prefix}: {:.9}\n", rep.mr2));
    out.push_str(&format!("map50_{prefix}: {:.9}\n", rep.map50));
    out.push_str(&format!("map_{prefix}: {:.9}\n", rep.map));
    for (c, ap) in rep.per_class_ap50.iter().enumerate() {
        match ap {
            Some(v) => out.push_str(&format!("ap50_class{c}_{prefix}: {v:.9}\n")),
            None => out.push_str(&format!("ap50_class{c}_{prefix}: excluded (no ground truth)\n")),
        }
    }
}

pub fn report_lines(report: &DualModalityReport, images_per_sec: f64) -> String {
    let mut s = String::new();
    s.push_str(&format!("mr2: {:.9}\n", report.mr2));
    s.push_str(&format!("map50: {:.9}\n", report.map50));
    s.push_str(&format!("map: {:.9}\n", report.map));
    modality_lines("visible", &report.visible, &mut s);
    modality_lines("thermal", &report.thermal, &mut s);
    s.push_str(&format!("images_per_sec: {images_per_sec:.3}\n"));
    s
}

fn write_curve(path: &Path, points: &[(f64, f64)]) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    for (x, y) in points {
        writeln!(f, "{x:.9} {y:.9}").map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

/// Full evaluation of a checkpoint: predict, write detection files, score
/// from the files, write the report and curve data.
pub fn evaluate_checkpoint(
    cfg: &RunConfig,
    ckpt: &Path,
    data_root: &Path,
    out_dir: &Path,
) -> Result<EvalOutcome> {
    let out_dir = crate::train::resolve_run_dir(out_dir);
    let (model, _) = load_checkpoint(ckpt)?;
    if model.cfg.input_size != (cfg.image_size, cfg.image_size) {
        return Err(Error::Checkpoint(format!(
            "{}: checkpoint input size {:?} does not match configured image_size {}",
            ckpt.display(),
            model.cfg.input_size,
            cfg.image_size
        )));
    }
    if cfg.branch_select().is_some() && !model.cfg.ms_branches && cfg.branch != "fusion" {
        return Err(Error::Config(format!(
            "checkpoint has no {} branch (trained with ms_enabled = false)",
            cfg.branch
        )));
    }

    let pairs = data::load_dataset(data_root, Split::Test)?;
    if pairs.is_empty() {
        return Err(Error::integrity(data_root, "test split is empty"));
    }
    let det_dir = out_dir.join("detections");
    std::fs::create_dir_all(&det_dir).map_err(|e| Error::io(&det_dir, e))?;

    let started = Instant::now();
    for pair in &pairs {
        let dets = predict_pair(&model, pair, cfg)?;
        fusion::write_detections(&det_dir.join(format!("{}.txt", pair.stem)), &dets)?;
    }
    let images_per_sec = pairs.len() as f64 / started.elapsed().as_secs_f64().max(1e-9);

    let report = evaluate_detections(&det_dir, data_root, cfg)?;
    let report_path = out_dir.join("metrics.txt");
    std::fs::write(&report_path, report_lines(&report, images_per_sec))
        .map_err(|e| Error::io(&report_path, e))?;
    write_curve(&out_dir.join("mr_curve_visible.txt"), &report.visible.sweep)?;
    write_curve(&out_dir.join("mr_curve_thermal.txt"), &report.thermal.sweep)?;

    Ok(EvalOutcome {
        report,
        detections_dir: det_dir,
        report_path,
        images_per_sec,
    })
}
