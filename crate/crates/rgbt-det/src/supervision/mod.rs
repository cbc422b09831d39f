//! Annotation model, union-annotation construction, and the multi-branch
//! training loss: the visible, thermal, and fusion detection branches are
//! supervised by visible, thermal, and union annotations respectively, and
//! the two stream segmentation heads by their own modality's boxes.

pub mod assign;
mod dual;
pub mod loss;

pub use assign::{assign_targets, MatchedSlot, TargetAssignment};
pub use loss::{detection_loss, segmentation_loss, DetLoss};

use std::io::{BufRead, Write as _};
use std::path::Path;

use crate::error::{Error, Result};
use crate::network::{BranchGrads, BranchOutputs, DetectionGrid, NetworkConfig};
use crate::nn::Float;

/// One axis-aligned box, center/size normalized to image fraction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Annotation {
    pub class_id: usize,
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl Annotation {
    pub fn validate(&self, num_classes: usize) -> Result<()> {
        if self.class_id >= num_classes {
            return Err(Error::Config(format!(
                "class id {} out of [0, {num_classes})",
                self.class_id
            )));
        }
        if !(self.w > 0.0 && self.w <= 1.0 && self.h > 0.0 && self.h <= 1.0) {
            return Err(Error::Config(format!(
                "box size {}x{} outside (0, 1]",
                self.w, self.h
            )));
        }
        if !(self.cx > 0.0 && self.cx < 1.0 && self.cy > 0.0 && self.cy < 1.0) {
            return Err(Error::Config(format!(
                "box center ({}, {}) outside the image",
                self.cx, self.cy
            )));
        }
        Ok(())
    }

    pub fn corners(&self) -> (f64, f64, f64, f64) {
        (
            self.cx - self.w / 2.0,
            self.cy - self.h / 2.0,
            self.cx + self.w / 2.0,
            self.cy + self.h / 2.0,
        )
    }

    pub fn iou(&self, other: &Annotation) -> f64 {
        let (ax1, ay1, ax2, ay2) = self.corners();
        let (bx1, by1, bx2, by2) = other.corners();
        let iw = (ax2.min(bx2) - ax1.max(bx1)).max(0.0);
        let ih = (ay2.min(by2) - ay1.max(by1)).max(0.0);
        let inter = iw * ih;
        let union = self.w * self.h + other.w * other.h - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }
}

/// The three annotation sets of one image pair.
#[derive(Debug, Clone, Default)]
pub struct AnnotationTriplet {
    pub visible: Vec<Annotation>,
    pub thermal: Vec<Annotation>,
    pub union: Vec<Annotation>,
}

/// Loss-term weights of the total objective.
#[derive(Debug, Clone, Copy)]
pub struct LossWeights {
    pub lambda_cls: f64,
    pub lambda_obj: f64,
    pub lambda_bbox: f64,
    pub lambda_seg: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_cls: 0.5,
            lambda_obj: 1.0,
            lambda_bbox: 0.05,
            lambda_seg: 0.25,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_cls", self.lambda_cls),
            ("lambda_obj", self.lambda_obj),
            ("lambda_bbox", self.lambda_bbox),
            ("lambda_seg", self.lambda_seg),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be non-negative, got {v}")));
            }
        }
        Ok(())
    }
}

/// Merges the per-modality annotation lists into union annotations.
///
/// Same-class cross-modal pairs are matched greedily by descending IoU;
/// pairs at or above `iou_merge` collapse to the coordinate-wise mean box,
/// everything unmatched passes through unchanged. Matched boxes keep the
/// visible list's position, unmatched thermal boxes append in order.
pub fn build_union(
    visible: &[Annotation],
    thermal: &[Annotation],
    iou_merge: f64,
) -> Vec<Annotation> {
    let mut pairs: Vec<(f64, usize, usize)> = Vec::new();
    for (i, v) in visible.iter().enumerate() {
        for (j, t) in thermal.iter().enumerate() {
            if v.class_id == t.class_id {
                let iou = v.iou(t);
                if iou >= iou_merge {
                    pairs.push((iou, i, j));
                }
            }
        }
    }
    pairs.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));

    let mut match_of_visible = vec![None; visible.len()];
    let mut thermal_taken = vec![false; thermal.len()];
    for (_, i, j) in pairs {
        if match_of_visible[i].is_none() && !thermal_taken[j] {
            match_of_visible[i] = Some(j);
            thermal_taken[j] = true;
        }
    }

    let mut out = Vec::with_capacity(visible.len() + thermal.len());
    for (i, v) in visible.iter().enumerate() {
        match match_of_visible[i] {
            Some(j) => {
                let t = &thermal[j];
                out.push(Annotation {
                    class_id: v.class_id,
                    cx: (v.cx + t.cx) / 2.0,
                    cy: (v.cy + t.cy) / 2.0,
                    w: (v.w + t.w) / 2.0,
                    h: (v.h + t.h) / 2.0,
                });
            }
            None => out.push(*v),
        }
    }
    for (j, t) in thermal.iter().enumerate() {
        if !thermal_taken[j] {
            out.push(*t);
        }
    }
    out
}

/// Per-term breakdown of the total loss; indices 0/1/2 are fusion/visible/
/// thermal.
#[derive(Debug, Clone, Copy, Default)]
pub struct LossBreakdown {
    pub cls: [f64; 3],
    pub obj: [f64; 3],
    pub bbox: [f64; 3],
    pub seg_v: f64,
    pub seg_t: f64,
    pub total: f64,
}

impl LossBreakdown {
    /// Recombines the stored terms; equals `total` up to float bookkeeping.
    pub fn recombine(&self, w: &LossWeights) -> f64 {
        w.lambda_cls * (self.cls[0] + self.cls[1] + self.cls[2])
            + w.lambda_obj * (self.obj[0] + self.obj[1] + self.obj[2])
            + w.lambda_bbox * (self.bbox[0] + self.bbox[1] + self.bbox[2])
            + w.lambda_seg * (self.seg_v + self.seg_t)
    }
}

/// Full training objective over one batch; also returns the gradients
/// w.r.t. every branch output so the backward pass can run.
///
/// Branch routing: fusion grids score against union annotations, the visible
/// branch against visible, the thermal branch against thermal; segmentation
/// heads are supervised by their own modality.
pub fn total_loss<F: Float>(
    outputs: &BranchOutputs<F>,
    triplets: &[AnnotationTriplet],
    w: &LossWeights,
    cfg: &NetworkConfig,
) -> Result<(LossBreakdown, BranchGrads<F>)> {
    w.validate()?;
    let batch = outputs.det_f.scales[0].dim().0;
    if triplets.len() != batch {
        return Err(Error::Shape(format!(
            "{} annotation triplets for a batch of {batch}",
            triplets.len()
        )));
    }

    let mut breakdown = LossBreakdown::default();

    let union_lists: Vec<&[Annotation]> = triplets.iter().map(|t| t.union.as_slice()).collect();
    let (loss_f, grad_f) = branch_loss(&outputs.det_f, &union_lists, w, cfg)?;
    breakdown.cls[0] = loss_f.cls;
    breakdown.obj[0] = loss_f.obj;
    breakdown.bbox[0] = loss_f.bbox;

    let mut grad_v = None;
    if let Some(det_v) = &outputs.det_v {
        let lists: Vec<&[Annotation]> = triplets.iter().map(|t| t.visible.as_slice()).collect();
        let (l, g) = branch_loss(det_v, &lists, w, cfg)?;
        breakdown.cls[1] = l.cls;
        breakdown.obj[1] = l.obj;
        breakdown.bbox[1] = l.bbox;
        grad_v = Some(g);
    }
    let mut grad_t = None;
    if let Some(det_t) = &outputs.det_t {
        let lists: Vec<&[Annotation]> = triplets.iter().map(|t| t.thermal.as_slice()).collect();
        let (l, g) = branch_loss(det_t, &lists, w, cfg)?;
        breakdown.cls[2] = l.cls;
        breakdown.obj[2] = l.obj;
        breakdown.bbox[2] = l.bbox;
        grad_t = Some(g);
    }

    let mut grad_seg_v = None;
    if let Some(seg) = &outputs.seg_v {
        let lists: Vec<&[Annotation]> = triplets.iter().map(|t| t.visible.as_slice()).collect();
        let (l, g) = segmentation_loss(seg, &lists, cfg, w.lambda_seg)?;
        breakdown.seg_v = l;
        grad_seg_v = Some(g);
    }
    let mut grad_seg_t = None;
    if let Some(seg) = &outputs.seg_t {
        let lists: Vec<&[Annotation]> = triplets.iter().map(|t| t.thermal.as_slice()).collect();
        let (l, g) = segmentation_loss(seg, &lists, cfg, w.lambda_seg)?;
        breakdown.seg_t = l;
        grad_seg_t = Some(g);
    }

    breakdown.total = breakdown.recombine(w);
    if !breakdown.total.is_finite() {
        return Err(Error::Diverged(format!(
            "total loss is not finite: {breakdown:?}"
        )));
    }
    Ok((
        breakdown,
        BranchGrads {
            det_f: grad_f,
            det_v: grad_v,
            det_t: grad_t,
            seg_v: grad_seg_v,
            seg_t: grad_seg_t,
        },
    ))
}

fn branch_loss<F: Float>(
    grid: &DetectionGrid<F>,
    annotations: &[&[Annotation]],
    w: &LossWeights,
    cfg: &NetworkConfig,
) -> Result<(DetLoss, Vec<ndarray::Array5<F>>)> {
    let targets = annotations
        .iter()
        .map(|a| assign_targets(a, cfg))
        .collect::<Result<Vec<_>>>()?;
    detection_loss(grid, &targets, w, cfg)
}

// ---------------------------------------------------------------------------
// annotation file format: `class_id cx cy w h` per line, six decimals
// ---------------------------------------------------------------------------

pub fn write_annotations(path: &Path, annotations: &[Annotation]) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    for a in annotations {
        writeln!(
            f,
            "{} {:.6} {:.6} {:.6} {:.6}",
            a.class_id, a.cx, a.cy, a.w, a.h
        )
        .map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

pub fn read_annotations(path: &Path) -> Result<Vec<Annotation>> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (ln, line) in std::io::BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 5 {
            return Err(Error::integrity(
                path,
                format!("line {}: expected 5 fields, got {}", ln + 1, fields.len()),
            ));
        }
        let parse = |s: &str, what: &str| -> Result<f64> {
            s.parse::<f64>().map_err(|_| {
                Error::integrity(path, format!("line {}: bad {what} `{s}`", ln + 1))
            })
        };
        out.push(Annotation {
            class_id: fields[0].parse::<usize>().map_err(|_| {
                Error::integrity(path, format!("line {}: bad class id `{}`", ln + 1, fields[0]))
            })?,
            cx: parse(fields[1], "cx")?,
            cy: parse(fields[2], "cy")?,
            w: parse(fields[3], "w")?,
            h: parse(fields[4], "h")?,
        });
    }
    Ok(out)
}
