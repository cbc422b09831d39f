//! Detection and segmentation loss terms with analytic gradients.
//!
//! Objectness is mean BCE over every slot of every scale, classification is
//! mean BCE over the matched slots' class logits, and box regression is mean
//! `1 - CIoU` between the decoded prediction and its target, differentiated
//! exactly through the decode and the complete-IoU penalty terms.

use ndarray::{Array4, Array5};

use super::dual::Dual4;
use super::{Annotation, LossWeights, TargetAssignment};
use crate::error::{Error, Result};
use crate::network::{DetectionGrid, NetworkConfig, STRIDES};
use crate::nn::{fl, Float};

/// Unweighted per-term values of one branch's detection loss.
#[derive(Debug, Clone, Copy, Default)]
pub struct DetLoss {
    pub cls: f64,
    pub obj: f64,
    pub bbox: f64,
}

/// Numerically-stable BCE with logits and its derivative.
fn bce_with_logits(z: f64, y: f64) -> (f64, f64) {
    let loss = z.max(0.0) - z * y + (-z.abs()).exp().ln_1p();
    let grad = 1.0 / (1.0 + (-z).exp()) - y;
    (loss, grad)
}

/// Complete IoU between the decoded slot prediction and a constant target
/// box, differentiated w.r.t. the four regression logits.
fn ciou_from_logits(
    t: [Dual4; 4],
    cell: (usize, usize),
    stride: f64,
    anchor: (f64, f64),
    gt: [f64; 4],
) -> Dual4 {
    let two = 2.0;
    let cx = (t[0].sigmoid() * two + (-0.5 + cell.1 as f64)) * stride;
    let cy = (t[1].sigmoid() * two + (-0.5 + cell.0 as f64)) * stride;
    let w = (t[2].sigmoid() * two).sq() * anchor.0;
    let h = (t[3].sigmoid() * two).sq() * anchor.1;

    let gx = Dual4::constant(gt[0]);
    let gy = Dual4::constant(gt[1]);
    let gw = Dual4::constant(gt[2]);
    let gh = Dual4::constant(gt[3]);

    let half = 0.5;
    let (ax1, ay1) = (cx - w * half, cy - h * half);
    let (ax2, ay2) = (cx + w * half, cy + h * half);
    let (bx1, by1) = (gx - gw * half, gy - gh * half);
    let (bx2, by2) = (gx + gw * half, gy + gh * half);

    let iw = (ax2.min(bx2) - ax1.max(bx1)).max0();
    let ih = (ay2.min(by2) - ay1.max(by1)).max0();
    let inter = iw * ih;
    let union = w * h + gw * gh - inter + 1e-9;
    let iou = inter / union;

    // squared diagonal of the enclosing box
    let cw = ax2.max(bx2) - ax1.min(bx1);
    let ch = ay2.max(by2) - ay1.min(by1);
    let c2 = cw.sq() + ch.sq() + 1e-9;
    let rho2 = (cx - gx).sq() + (cy - gy).sq();

    let four_over_pi2 = 4.0 / (std::f64::consts::PI * std::f64::consts::PI);
    let v = ((gw / gh).atan() - (w / h).atan()).sq() * four_over_pi2;
    let alpha = v / ((-iou + 1.0) + v + 1e-9);

    iou - rho2 / c2 - alpha * v
}

/// One branch's detection loss over a batch, plus the lambda-weighted
/// gradient w.r.t. the raw grids.
pub fn detection_loss<F: Float>(
    grid: &DetectionGrid<F>,
    targets: &[TargetAssignment],
    w: &LossWeights,
    cfg: &NetworkConfig,
) -> Result<(DetLoss, Vec<Array5<F>>)> {
    let nc = cfg.num_classes;
    let batch = grid.scales[0].dim().0;
    if targets.len() != batch {
        return Err(Error::Shape(format!(
            "{} target assignments for batch {batch}",
            targets.len()
        )));
    }
    for (s, g) in grid.scales.iter().enumerate() {
        let (_, a, gh, gw, e) = g.dim();
        let (wh, ww) = cfg.grid_sizes()[s];
        if a != crate::network::ANCHORS_PER_SCALE || (gh, gw) != (wh, ww) || e != 5 + nc {
            return Err(Error::Shape(format!(
                "scale {s} grid {:?} does not match config geometry",
                g.dim()
            )));
        }
        if g.iter().any(|v| !v.as_f64().is_finite()) {
            return Err(Error::Diverged(format!(
                "non-finite logits in detection grid scale {s}"
            )));
        }
    }
    for t in targets {
        super::assign::check_geometry(t, cfg)?;
    }

    let total_slots: usize = grid
        .scales
        .iter()
        .map(|g| batch * g.dim().1 * g.dim().2 * g.dim().3)
        .sum::<usize>();
    let n_matched: usize = targets.iter().map(|t| t.slots.len()).sum();

    let mut grads: Vec<Array5<F>> = grid.scales.iter().map(|g| Array5::zeros(g.dim())).collect();
    let mut loss = DetLoss::default();

    // objectness over every slot; positives are overwritten below
    let obj_scale = 1.0 / total_slots as f64;
    for (si, g) in grid.scales.iter().enumerate() {
        let (b, a, gh, gw, _) = g.dim();
        for bi in 0..b {
            for ai in 0..a {
                for yi in 0..gh {
                    for xi in 0..gw {
                        let z = g[[bi, ai, yi, xi, 4]].as_f64();
                        let (l, d) = bce_with_logits(z, 0.0);
                        loss.obj += l * obj_scale;
                        grads[si][[bi, ai, yi, xi, 4]] =
                            fl(d * obj_scale * w.lambda_obj);
                    }
                }
            }
        }
    }

    if n_matched > 0 {
        let cls_scale = 1.0 / (n_matched * nc) as f64;
        let bbox_scale = 1.0 / n_matched as f64;
        for (bi, t) in targets.iter().enumerate() {
            for slot in &t.slots {
                let g = &grid.scales[slot.scale];
                let (ai, yi, xi) = (slot.anchor, slot.cell_y, slot.cell_x);

                // objectness target flips to 1 at matched slots
                let z_obj = g[[bi, ai, yi, xi, 4]].as_f64();
                let (l0, _) = bce_with_logits(z_obj, 0.0);
                let (l1, d1) = bce_with_logits(z_obj, 1.0);
                loss.obj += (l1 - l0) * obj_scale;
                grads[slot.scale][[bi, ai, yi, xi, 4]] =
                    fl(d1 * obj_scale * w.lambda_obj);

                for c in 0..nc {
                    let y = if c == slot.class_id { 1.0 } else { 0.0 };
                    let z = g[[bi, ai, yi, xi, 5 + c]].as_f64();
                    let (l, d) = bce_with_logits(z, y);
                    loss.cls += l * cls_scale;
                    grads[slot.scale][[bi, ai, yi, xi, 5 + c]] =
                        fl(d * cls_scale * w.lambda_cls);
                }

                let t4 = [
                    Dual4::var(g[[bi, ai, yi, xi, 0]].as_f64(), 0),
                    Dual4::var(g[[bi, ai, yi, xi, 1]].as_f64(), 1),
                    Dual4::var(g[[bi, ai, yi, xi, 2]].as_f64(), 2),
                    Dual4::var(g[[bi, ai, yi, xi, 3]].as_f64(), 3),
                ];
                let anchor = cfg.anchors[slot.scale][slot.anchor];
                let ciou = ciou_from_logits(
                    t4,
                    (yi, xi),
                    STRIDES[slot.scale] as f64,
                    anchor,
                    slot.box_px,
                );
                loss.bbox += (1.0 - ciou.v) * bbox_scale;
                for k in 0..4 {
                    grads[slot.scale][[bi, ai, yi, xi, k]] =
                        fl(-ciou.d[k] * bbox_scale * w.lambda_bbox);
                }
            }
        }
    }

    Ok((loss, grads))
}

/// Mean BCE of a stride-8 logit map against box-rasterized binary masks,
/// scaled by `lambda_seg` in the returned gradient.
pub fn segmentation_loss<F: Float>(
    seg_logits: &Array4<F>,
    annotations: &[&[Annotation]],
    cfg: &NetworkConfig,
    lambda_seg: f64,
) -> Result<(f64, Array4<F>)> {
    let (b, c, gh, gw) = seg_logits.dim();
    if c != 1 {
        return Err(Error::Shape(format!("segmentation map has {c} channels")));
    }
    if annotations.len() != b {
        return Err(Error::Shape(format!(
            "{} annotation lists for a batch of {b}",
            annotations.len()
        )));
    }
    let stride_y = cfg.input_size.0 as f64 / gh as f64;
    let stride_x = cfg.input_size.1 as f64 / gw as f64;
    let (img_h, img_w) = (cfg.input_size.0 as f64, cfg.input_size.1 as f64);

    let n = (b * gh * gw) as f64;
    let mut grad = Array4::zeros((b, 1, gh, gw));
    let mut loss = 0.0;
    for bi in 0..b {
        for yi in 0..gh {
            for xi in 0..gw {
                let px = (xi as f64 + 0.5) * stride_x;
                let py = (yi as f64 + 0.5) * stride_y;
                let inside = annotations[bi].iter().any(|a| {
                    let (x1, y1, x2, y2) = a.corners();
                    px >= x1 * img_w && px < x2 * img_w && py >= y1 * img_h && py < y2 * img_h
                });
                let y = if inside { 1.0 } else { 0.0 };
                let z = seg_logits[[bi, 0, yi, xi]].as_f64();
                let (l, d) = bce_with_logits(z, y);
                loss += l / n;
                grad[[bi, 0, yi, xi]] = fl(d / n * lambda_seg);
            }
        }
    }
    Ok((loss, grad))
}
