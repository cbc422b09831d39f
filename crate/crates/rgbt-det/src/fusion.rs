//! Decision-level fusion of the three branch predictions, box decoding, and
//! non-maximum suppression.
//!
//! Fusion happens per anchor slot in probability space: activated objectness
//! and class probabilities are averaged with the branch weights and
//! re-encoded as logits, and the decoded boxes are averaged with the same
//! weights (normalized by their sum so non-normalized weights still yield
//! valid geometry). A detection-list fusion mode is available for comparison:
//! each branch is decoded separately, scores are scaled by the branch weight,
//! and the union of the lists goes through NMS.

use std::io::{BufRead, Write as _};
use std::path::Path;

use ndarray::Array5;

use crate::error::{Error, Result};
use crate::network::{DetectionGrid, Model, NetworkConfig, STRIDES};
use crate::nn::ops::{logit, sigmoid};
use crate::nn::{fl, Float};

/// Branch weights of the decision fusion.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FusionWeights {
    pub fusion: f64,
    pub visible: f64,
    pub thermal: f64,
}

impl Default for FusionWeights {
    fn default() -> Self {
        FusionWeights {
            fusion: 0.5,
            visible: 0.25,
            thermal: 0.25,
        }
    }
}

impl FusionWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("fusion", self.fusion),
            ("visible", self.visible),
            ("thermal", self.thermal),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!(
                    "fusion weight {name} must be non-negative, got {v}"
                )));
            }
        }
        if self.sum() <= 0.0 {
            return Err(Error::Config("fusion weights must not all be zero".into()));
        }
        Ok(())
    }

    pub fn sum(&self) -> f64 {
        self.fusion + self.visible + self.thermal
    }
}

/// A decoded detection in pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection {
    pub class_id: usize,
    pub score: f64,
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl Detection {
    pub fn iou(&self, other: &Detection) -> f64 {
        let iw = (self.x2.min(other.x2) - self.x1.max(other.x1)).max(0.0);
        let ih = (self.y2.min(other.y2) - self.y1.max(other.y1)).max(0.0);
        let inter = iw * ih;
        let a = (self.x2 - self.x1) * (self.y2 - self.y1);
        let b = (other.x2 - other.x1) * (other.y2 - other.y1);
        if a + b - inter <= 0.0 {
            0.0
        } else {
            inter / (a + b - inter)
        }
    }
}

/// Which grids feed decoding at inference time.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FusionMode {
    /// Eq-style slot-wise weighted averaging of probabilities and boxes.
    SlotWise,
    /// Union of per-branch decoded lists with weight-scaled scores.
    DetectionList,
}

/// Decodes raw grids into per-image detection lists.
///
/// Per slot: `center = (2*sig(t_xy) - 0.5 + cell) * stride`,
/// `size = anchor * (2*sig(t_wh))^2`, `score = sig(obj) * max_c sig(cls_c)`.
/// Boxes are clipped to image bounds; empty boxes after clipping are dropped.
pub fn decode_grid<F: Float>(
    grid: &DetectionGrid<F>,
    cfg: &NetworkConfig,
    score_thresh: f64,
) -> Vec<Vec<Detection>> {
    let batch = grid.scales[0].dim().0;
    let (img_h, img_w) = (cfg.input_size.0 as f64, cfg.input_size.1 as f64);
    let mut out = vec![Vec::new(); batch];
    for (si, g) in grid.scales.iter().enumerate() {
        let stride = STRIDES[si] as f64;
        let (b, a, gh, gw, e) = g.dim();
        let nc = e - 5;
        for bi in 0..b {
            for yi in 0..gh {
                for xi in 0..gw {
                    for ai in 0..a {
                        let obj = sigmoid(g[[bi, ai, yi, xi, 4]]).as_f64();
                        let mut best_c = 0usize;
                        let mut best_p = f64::NEG_INFINITY;
                        for c in 0..nc {
                            let p = sigmoid(g[[bi, ai, yi, xi, 5 + c]]).as_f64();
                            if p > best_p {
                                best_p = p;
                                best_c = c;
                            }
                        }
                        let score = obj * best_p;
                        if score < score_thresh {
                            continue;
                        }
                        let (aw, ah) = cfg.anchors[si][ai];
                        let cx = (2.0 * sigmoid(g[[bi, ai, yi, xi, 0]]).as_f64() - 0.5
                            + xi as f64)
                            * stride;
                        let cy = (2.0 * sigmoid(g[[bi, ai, yi, xi, 1]]).as_f64() - 0.5
                            + yi as f64)
                            * stride;
                        let w = aw * (2.0 * sigmoid(g[[bi, ai, yi, xi, 2]]).as_f64()).powi(2);
                        let h = ah * (2.0 * sigmoid(g[[bi, ai, yi, xi, 3]]).as_f64()).powi(2);
                        let x1 = (cx - w / 2.0).clamp(0.0, img_w);
                        let y1 = (cy - h / 2.0).clamp(0.0, img_h);
                        let x2 = (cx + w / 2.0).clamp(0.0, img_w);
                        let y2 = (cy + h / 2.0).clamp(0.0, img_h);
                        if x1 < x2 && y1 < y2 {
                            out[bi].push(Detection {
                                class_id: best_c,
                                score,
                                x1,
                                y1,
                                x2,
                                y2,
                            });
                        }
                    }
                }
            }
        }
    }
    out
}

/// Slot-wise decision fusion of three same-geometry grids.
pub fn fuse_grids<F: Float>(
    g_f: &DetectionGrid<F>,
    g_v: &DetectionGrid<F>,
    g_t: &DetectionGrid<F>,
    w: &FusionWeights,
    cfg: &NetworkConfig,
) -> Result<DetectionGrid<F>> {
    w.validate()?;
    if !g_f.same_geometry(g_v) || !g_f.same_geometry(g_t) {
        return Err(Error::Shape(
            "fused branches must share grid geometry".into(),
        ));
    }
    let lsum = w.sum();
    let (lf, lv, lt) = (w.fusion, w.visible, w.thermal);
    let eps = 1e-7;

    let mut scales = Vec::with_capacity(g_f.scales.len());
    for (si, gf) in g_f.scales.iter().enumerate() {
        let gv = &g_v.scales[si];
        let gt = &g_t.scales[si];
        let (b, a, gh, gw, e) = gf.dim();
        let stride = STRIDES[si] as f64;
        let mut fused = Array5::<F>::zeros((b, a, gh, gw, e));
        for bi in 0..b {
            for ai in 0..a {
                for yi in 0..gh {
                    for xi in 0..gw {
                        // probabilities: p = lf*pf + lv*pv + lt*pt, re-encoded
                        for ch in 4..e {
                            let pf = sigmoid(gf[[bi, ai, yi, xi, ch]]).as_f64();
                            let pv = sigmoid(gv[[bi, ai, yi, xi, ch]]).as_f64();
                            let pt = sigmoid(gt[[bi, ai, yi, xi, ch]]).as_f64();
                            let p = lf * pf + lv * pv + lt * pt;
                            fused[[bi, ai, yi, xi, ch]] = logit(fl::<F>(p), eps);
                        }
                        // boxes: decode, weighted-average normalized by the
                        // weight sum, re-encode
                        let decode = |g: &Array5<F>| -> (f64, f64, f64, f64) {
                            let (aw, ah) = cfg.anchors[si][ai];
                            let cx = (2.0 * sigmoid(g[[bi, ai, yi, xi, 0]]).as_f64() - 0.5
                                + xi as f64)
                                * stride;
                            let cy = (2.0 * sigmoid(g[[bi, ai, yi, xi, 1]]).as_f64() - 0.5
                                + yi as f64)
                                * stride;
                            let bw =
                                aw * (2.0 * sigmoid(g[[bi, ai, yi, xi, 2]]).as_f64()).powi(2);
                            let bh =
                                ah * (2.0 * sigmoid(g[[bi, ai, yi, xi, 3]]).as_f64()).powi(2);
                            (cx, cy, bw, bh)
                        };
                        let (fx, fy, fw, fh) = decode(gf);
                        let (vx, vy, vw, vh) = decode(gv);
                        let (tx, ty, tw, th) = decode(gt);
                        let cx = (lf * fx + lv * vx + lt * tx) / lsum;
                        let cy = (lf * fy + lv * vy + lt * ty) / lsum;
                        let bw = (lf * fw + lv * vw + lt * tw) / lsum;
                        let bh = (lf * fh + lv * vh + lt * th) / lsum;
                        let (aw, ah) = cfg.anchors[si][ai];
                        let enc_xy = |p: f64, cell: usize| -> F {
                            let o = (p / stride - cell as f64 + 0.5) / 2.0;
                            logit(fl::<F>(o), eps)
                        };
                        let enc_wh = |s: f64, anchor: f64| -> F {
                            let o = (s / anchor).sqrt() / 2.0;
                            logit(fl::<F>(o), eps)
                        };
                        fused[[bi, ai, yi, xi, 0]] = enc_xy(cx, xi);
                        fused[[bi, ai, yi, xi, 1]] = enc_xy(cy, yi);
                        fused[[bi, ai, yi, xi, 2]] = enc_wh(bw, aw);
                        fused[[bi, ai, yi, xi, 3]] = enc_wh(bh, ah);
                    }
                }
            }
        }
        scales.push(fused);
    }
    Ok(DetectionGrid { scales })
}

/// Greedy per-class NMS; survivors keep descending-score order with input
/// index as the tie-break, and no two same-class survivors overlap more than
/// `iou_thresh`.
pub fn nms(dets: &[Detection], iou_thresh: f64) -> Vec<Detection> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score).then(a.cmp(&b)));
    let mut kept: Vec<Detection> = Vec::new();
    for &i in &order {
        let d = &dets[i];
        let suppressed = kept
            .iter()
            .any(|k| k.class_id == d.class_id && k.iou(d) > iou_thresh);
        if !suppressed {
            kept.push(*d);
        }
    }
    kept
}

/// Full inference: forward, decision fusion, decode, NMS. Deterministic for
/// fixed model and inputs. With the visible/thermal branches disabled the
/// fusion branch is decoded alone.
pub fn predict<F: Float>(
    model: &Model<F>,
    x_v: &ndarray::Array4<F>,
    x_t: &ndarray::Array4<F>,
    w: &FusionWeights,
    score_thresh: f64,
    iou_thresh: f64,
    mode: FusionMode,
) -> Result<Vec<Vec<Detection>>> {
    w.validate()?;
    let out = model.forward_infer(x_v, x_t)?;
    let per_image = match (&out.det_v, &out.det_t) {
        (Some(det_v), Some(det_t)) => match mode {
            FusionMode::SlotWise => {
                let fused = fuse_grids(&out.det_f, det_v, det_t, w, &model.cfg)?;
                decode_grid(&fused, &model.cfg, score_thresh)
            }
            FusionMode::DetectionList => {
                let lists_f = decode_grid(&out.det_f, &model.cfg, score_thresh);
                let lists_v = decode_grid(det_v, &model.cfg, score_thresh);
                let lists_t = decode_grid(det_t, &model.cfg, score_thresh);
                lists_f
                    .into_iter()
                    .zip(lists_v)
                    .zip(lists_t)
                    .map(|((f, v), t)| {
                        let mut all = Vec::with_capacity(f.len() + v.len() + t.len());
                        for (list, lambda) in
                            [(f, w.fusion), (v, w.visible), (t, w.thermal)]
                        {
                            for mut d in list {
                                d.score *= lambda;
                                all.push(d);
                            }
                        }
                        all
                    })
                    .collect()
            }
        },
        _ => decode_grid(&out.det_f, &model.cfg, score_thresh),
    };
    Ok(per_image.iter().map(|dets| nms(dets, iou_thresh)).collect())
}

/// Decodes one named branch alone (single-modality baselines).
pub fn predict_branch<F: Float>(
    model: &Model<F>,
    x_v: &ndarray::Array4<F>,
    x_t: &ndarray::Array4<F>,
    branch: BranchSelect,
    score_thresh: f64,
    iou_thresh: f64,
) -> Result<Vec<Vec<Detection>>> {
    let out = model.forward_infer(x_v, x_t)?;
    let grid = match branch {
        BranchSelect::Fusion => &out.det_f,
        BranchSelect::Visible => out
            .det_v
            .as_ref()
            .ok_or_else(|| Error::Config("model has no visible branch".into()))?,
        BranchSelect::Thermal => out
            .det_t
            .as_ref()
            .ok_or_else(|| Error::Config("model has no thermal branch".into()))?,
    };
    let lists = decode_grid(grid, &model.cfg, score_thresh);
    Ok(lists.iter().map(|d| nms(d, iou_thresh)).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BranchSelect {
    Fusion,
    Visible,
    Thermal,
}

// ---------------------------------------------------------------------------
// detection file format: `class_id score x1 y1 x2 y2` per line
// ---------------------------------------------------------------------------

pub fn write_detections(path: &Path, dets: &[Detection]) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    for d in dets {
        writeln!(
            f,
            "{} {:.6} {:.6} {:.6} {:.6} {:.6}",
            d.class_id, d.score, d.x1, d.y1, d.x2, d.y2
        )
        .map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

pub fn read_detections(path: &Path) -> Result<Vec<Detection>> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (ln, line) in std::io::BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 6 {
            return Err(Error::integrity(
                path,
                format!("line {}: expected 6 fields, got {}", ln + 1, fields.len()),
            ));
        }
        let num = |s: &str| -> Result<f64> {
            s.parse::<f64>()
                .map_err(|_| Error::integrity(path, format!("line {}: bad number `{s}`", ln + 1)))
        };
        out.push(Detection {
            class_id: fields[0].parse::<usize>().map_err(|_| {
                Error::integrity(path, format!("line {}: bad class id `{}`", ln + 1, fields[0]))
            })?,
            score: num(fields[1])?,
            x1: num(fields[2])?,
            y1: num(fields[3])?,
            x2: num(fields[4])?,
            y2: num(fields[5])?,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{NetworkConfig, ANCHORS_PER_SCALE};
    use crate::supervision::{assign_targets, Annotation};
    use ndarray::Array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cfg() -> NetworkConfig {
        NetworkConfig::new((64, 64), 3, 4)
    }

    fn zero_grid(cfg: &NetworkConfig) -> DetectionGrid<f64> {
        DetectionGrid {
            scales: cfg
                .grid_sizes()
                .iter()
                .map(|&(h, w)| Array5::zeros((1, ANCHORS_PER_SCALE, h, w, 5 + cfg.num_classes)))
                .collect(),
        }
    }

    fn rand_grid(cfg: &NetworkConfig, rng: &mut ChaCha8Rng) -> DetectionGrid<f64> {
        DetectionGrid {
            scales: cfg
                .grid_sizes()
                .iter()
                .map(|&(h, w)| {
                    Array::from_shape_simple_fn(
                        (1, ANCHORS_PER_SCALE, h, w, 5 + cfg.num_classes),
                        || rng.gen_range(-3.0..3.0),
                    )
                })
                .collect(),
        }
    }

    #[test]
    fn zero_logits_decode_to_cell_centered_anchors_at_quarter_score() {
        let c = cfg();
        let grid = zero_grid(&c);
        let dets = decode_grid(&grid, &c, 0.2);
        // every slot scores exactly 0.25
        assert!(dets[0].iter().all(|d| (d.score - 0.25).abs() < 1e-12));
        // a slot away from the borders decodes to its cell center and anchor size
        let d = dets[0]
            .iter()
            .find(|d| {
                (d.x1 + d.x2) / 2.0 == 28.0 && (d.y1 + d.y2) / 2.0 == 28.0 && {
                    let (aw, ah) = c.anchors[0][0];
                    ((d.x2 - d.x1) - aw).abs() < 1e-9 && ((d.y2 - d.y1) - ah).abs() < 1e-9
                }
            })
            .copied();
        assert!(d.is_some(), "expected anchor-sized box at cell center");

        // threshold above any achievable score gives an empty list
        assert!(decode_grid(&grid, &c, 1.1)[0].is_empty());
    }

    #[test]
    fn encode_decode_round_trip_recovers_box() {
        let c = cfg();
        let ann = Annotation {
            class_id: 2,
            cx: 0.4,
            cy: 0.55,
            w: 0.3,
            h: 0.25,
        };
        let targets = assign_targets(&[ann], &c).unwrap();
        assert!(!targets.slots.is_empty());
        let mut grid = zero_grid(&c);
        for g in &mut grid.scales {
            g.slice_mut(ndarray::s![.., .., .., .., 4]).fill(-20.0);
        }
        let slot = &targets.slots[0];
        for k in 0..4 {
            grid.scales[slot.scale][[0, slot.anchor, slot.cell_y, slot.cell_x, k]] = slot.t[k];
        }
        grid.scales[slot.scale][[0, slot.anchor, slot.cell_y, slot.cell_x, 4]] = 20.0;
        grid.scales[slot.scale][[0, slot.anchor, slot.cell_y, slot.cell_x, 5 + ann.class_id]] =
            5.0;
        let dets = decode_grid(&grid, &c, 0.5);
        assert_eq!(dets[0].len(), 1);
        let d = &dets[0][0];
        assert_eq!(d.class_id, ann.class_id);
        let (ex1, ey1, ex2, ey2) = (
            (ann.cx - ann.w / 2.0) * 64.0,
            (ann.cy - ann.h / 2.0) * 64.0,
            (ann.cx + ann.w / 2.0) * 64.0,
            (ann.cy + ann.h / 2.0) * 64.0,
        );
        for (got, want) in [(d.x1, ex1), (d.y1, ey1), (d.x2, ex2), (d.y2, ey2)] {
            assert!(
                (got - want).abs() / want.abs().max(1.0) < 1e-6,
                "{got} vs {want}"
            );
        }
    }

    #[test]
    fn fuse_matches_hand_arithmetic() {
        let c = cfg();
        let p = |x: f64| (x / (1.0 - x)).ln();
        let mut gf = zero_grid(&c);
        let mut gv = zero_grid(&c);
        let mut gt = zero_grid(&c);
        gf.scales[0][[0, 0, 1, 1, 4]] = p(0.8);
        gv.scales[0][[0, 0, 1, 1, 4]] = p(0.6);
        gt.scales[0][[0, 0, 1, 1, 4]] = p(1.0 - 1e-12); // ~1.0
        let fused = fuse_grids(&gf, &gv, &gt, &FusionWeights::default(), &c).unwrap();
        let got = 1.0 / (1.0 + (-fused.scales[0][[0, 0, 1, 1, 4]]).exp());
        assert!((got - 0.80).abs() < 1e-9, "{got}");
    }

    #[test]
    fn fusing_identical_grids_is_identity() {
        let c = cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let g = rand_grid(&c, &mut rng);
        let fused = fuse_grids(&g, &g, &g, &FusionWeights::default(), &c).unwrap();
        for (a, b) in fused.scales.iter().zip(&g.scales) {
            for (x, y) in a.iter().zip(b.iter()) {
                assert!((x - y).abs() < 1e-9, "{x} vs {y}");
            }
        }
    }

    #[test]
    fn degenerate_weights_reproduce_the_fusion_branch() {
        let c = cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let gf = rand_grid(&c, &mut rng);
        let gv = rand_grid(&c, &mut rng);
        let gt = rand_grid(&c, &mut rng);
        let w = FusionWeights {
            fusion: 1.0,
            visible: 0.0,
            thermal: 0.0,
        };
        let fused = fuse_grids(&gf, &gv, &gt, &w, &c).unwrap();
        for (a, b) in fused.scales.iter().zip(&gf.scales) {
            for (x, y) in a.iter().zip(b.iter()) {
                assert!((x - y).abs() < 1e-6, "{x} vs {y}");
            }
        }
    }

    #[test]
    fn fused_probabilities_stay_in_branch_envelope() {
        let c = cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let gf = rand_grid(&c, &mut rng);
        let gv = rand_grid(&c, &mut rng);
        let gt = rand_grid(&c, &mut rng);
        let fused = fuse_grids(&gf, &gv, &gt, &FusionWeights::default(), &c).unwrap();
        let sig = |z: f64| 1.0 / (1.0 + (-z).exp());
        let mut checked = 0;
        for si in 0..3 {
            let dim = fused.scales[si].dim();
            for ai in 0..dim.1 {
                for yi in 0..dim.2 {
                    for xi in 0..dim.3 {
                        for ch in 4..dim.4 {
                            let idx = [0, ai, yi, xi, ch];
                            let pf = sig(gf.scales[si][idx]);
                            let pv = sig(gv.scales[si][idx]);
                            let pt = sig(gt.scales[si][idx]);
                            let p = sig(fused.scales[si][idx]);
                            let lo = pf.min(pv).min(pt) - 1e-9;
                            let hi = pf.max(pv).max(pt) + 1e-9;
                            assert!(p >= lo && p <= hi);
                            checked += 1;
                        }
                    }
                }
            }
        }
        assert!(checked >= 1000);
    }

    #[test]
    fn fusion_is_linear_in_probability_space() {
        let c = cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = |x: f64| (x / (1.0 - x)).ln();
        let sig = |z: f64| 1.0 / (1.0 + (-z).exp());
        for _ in 0..50 {
            let probs: Vec<f64> = (0..3).map(|_| rng.gen_range(0.05..0.95)).collect();
            let a: f64 = rng.gen_range(0.1..1.0);
            let mk = |scale: f64| {
                let mut g = zero_grid(&c);
                g.scales[0][[0, 0, 0, 0, 4]] = p(probs[0] * scale);
                let mut v = zero_grid(&c);
                v.scales[0][[0, 0, 0, 0, 4]] = p(probs[1] * scale);
                let mut t = zero_grid(&c);
                t.scales[0][[0, 0, 0, 0, 4]] = p(probs[2] * scale);
                (g, v, t)
            };
            let (gf, gv, gt) = mk(1.0);
            let (hf, hv, ht) = mk(a);
            let w = FusionWeights::default();
            let f1 = fuse_grids(&gf, &gv, &gt, &w, &c).unwrap();
            let fa = fuse_grids(&hf, &hv, &ht, &w, &c).unwrap();
            let p1 = sig(f1.scales[0][[0, 0, 0, 0, 4]]);
            let pa = sig(fa.scales[0][[0, 0, 0, 0, 4]]);
            assert!((pa - a * p1).abs() < 1e-9, "{pa} vs {}", a * p1);
        }
    }

    #[test]
    fn nms_basic_cases() {
        let d = |score: f64, x1: f64| Detection {
            class_id: 0,
            score,
            x1,
            y1: 0.0,
            x2: x1 + 10.0,
            y2: 10.0,
        };
        // identical boxes: higher score survives
        let kept = nms(&[d(0.8, 0.0), d(0.9, 0.0)], 0.5);
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].score, 0.9);
        // disjoint boxes: all kept
        let kept = nms(&[d(0.8, 0.0), d(0.9, 100.0)], 0.5);
        assert_eq!(kept.len(), 2);
        // different classes never suppress each other
        let mut other = d(0.7, 0.0);
        other.class_id = 1;
        let kept = nms(&[d(0.9, 0.0), other], 0.5);
        assert_eq!(kept.len(), 2);
    }

    #[test]
    fn nms_matches_quadratic_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let dets: Vec<Detection> = (0..20)
                .map(|_| {
                    let x1 = rng.gen_range(0.0..50.0);
                    let y1 = rng.gen_range(0.0..50.0);
                    Detection {
                        class_id: rng.gen_range(0..2),
                        score: rng.gen_range(0.0..1.0),
                        x1,
                        y1,
                        x2: x1 + rng.gen_range(5.0..30.0),
                        y2: y1 + rng.gen_range(5.0..30.0),
                    }
                })
                .collect();
            let kept = nms(&dets, 0.5);

            // reference: mark suppression by pairwise scan over score order
            let mut order: Vec<usize> = (0..dets.len()).collect();
            order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score).then(a.cmp(&b)));
            let mut alive = vec![true; dets.len()];
            for (rank, &i) in order.iter().enumerate() {
                if !alive[i] {
                    continue;
                }
                for &j in order.iter().skip(rank + 1) {
                    if alive[j]
                        && dets[i].class_id == dets[j].class_id
                        && dets[i].iou(&dets[j]) > 0.5
                    {
                        alive[j] = false;
                    }
                }
            }
            let want: Vec<Detection> = order
                .iter()
                .filter(|&&i| alive[i])
                .map(|&i| dets[i])
                .collect();
            assert_eq!(kept, want);

            // survivors are a subset; no same-class pair above threshold
            for k in &kept {
                assert!(dets.iter().any(|d| d == k));
            }
            for a in 0..kept.len() {
                for b in a + 1..kept.len() {
                    if kept[a].class_id == kept[b].class_id {
                        assert!(kept[a].iou(&kept[b]) <= 0.5);
                    }
                }
            }
        }
    }

    #[test]
    fn predict_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut c = cfg();
        c.gsma.shuffle_groups = crate::network::ShuffleGroups::Count(4);
        let model = Model::<f64>::new(&mut rng, c).unwrap();
        let xv = Array::from_shape_simple_fn((1, 3, 64, 64), || rng.gen_range(0.0..1.0));
        let xt = Array::from_shape_simple_fn((1, 3, 64, 64), || rng.gen_range(0.0..1.0));
        let w = FusionWeights::default();
        let a = predict(&model, &xv, &xt, &w, 0.1, 0.5, FusionMode::SlotWise).unwrap();
        let b = predict(&model, &xv, &xt, &w, 0.1, 0.5, FusionMode::SlotWise).unwrap();
        assert_eq!(a, b);
        // list mode runs too
        let _ = predict(&model, &xv, &xt, &w, 0.1, 0.5, FusionMode::DetectionList).unwrap();
    }

    #[test]
    fn detection_files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.txt");
        let dets = vec![
            Detection {
                class_id: 1,
                score: 0.875,
                x1: 10.0,
                y1: 20.5,
                x2: 30.25,
                y2: 44.0,
            },
            Detection {
                class_id: 0,
                score: 0.25,
                x1: 0.0,
                y1: 0.0,
                x2: 5.0,
                y2: 5.0,
            },
        ];
        write_detections(&path, &dets).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("1 0.875000 10.000000 20.500000 30.250000 44.000000\n"));
        let back = read_detections(&path).unwrap();
        assert_eq!(back.len(), 2);
        assert!((back[0].score - 0.875).abs() < 1e-9);

        std::fs::write(dir.path().join("bad.txt"), "1 0.5 1 2 3\n").unwrap();
        assert!(matches!(
            read_detections(&dir.path().join("bad.txt")),
            Err(Error::DataIntegrity { .. })
        ));
    }
}
