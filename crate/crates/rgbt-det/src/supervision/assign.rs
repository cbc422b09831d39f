//! Anchor target assignment.
//!
//! A ground-truth box matches anchor `a` at the scale whose cell contains its
//! center whenever `max(w/wa, wa/w, h/ha, ha/h) < 4.0`. One box per slot;
//! conflicts go to the box with larger shape IoU against the anchor, ties to
//! the lower box index.

use crate::error::{Error, Result};
use crate::network::{NetworkConfig, ANCHORS_PER_SCALE, STRIDES};
use crate::supervision::Annotation;

pub const RATIO_LIMIT: f64 = 4.0;

/// One positive slot of the assignment.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchedSlot {
    pub scale: usize,
    pub anchor: usize,
    pub cell_y: usize,
    pub cell_x: usize,
    pub class_id: usize,
    /// Encoded regression targets `(tx, ty, tw, th)`; decoding them through
    /// the head's box transform reproduces the ground-truth box.
    pub t: [f64; 4],
    /// Ground-truth box `(cx, cy, w, h)` in pixels.
    pub box_px: [f64; 4],
    pub box_index: usize,
}

/// All positive slots of one image; every other slot is negative.
#[derive(Debug, Clone, Default)]
pub struct TargetAssignment {
    pub slots: Vec<MatchedSlot>,
    pub skipped_degenerate: usize,
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Shape-only IoU of two (w, h) sizes anchored at a common center.
fn shape_iou(w: f64, h: f64, aw: f64, ah: f64) -> f64 {
    let inter = w.min(aw) * h.min(ah);
    inter / (w * h + aw * ah - inter)
}

pub fn assign_targets(annotations: &[Annotation], cfg: &NetworkConfig) -> Result<TargetAssignment> {
    let (img_h, img_w) = (cfg.input_size.0 as f64, cfg.input_size.1 as f64);
    let grids = cfg.grid_sizes();
    let mut out = TargetAssignment::default();
    // slot key -> index into out.slots
    let mut taken: std::collections::HashMap<(usize, usize, usize, usize), usize> =
        std::collections::HashMap::new();

    for (bi, ann) in annotations.iter().enumerate() {
        ann.validate(cfg.num_classes)?;
        let (cx, cy, w, h) = (ann.cx * img_w, ann.cy * img_h, ann.w * img_w, ann.h * img_h);
        if w <= f64::EPSILON || h <= f64::EPSILON {
            out.skipped_degenerate += 1;
            continue;
        }
        for (scale, &stride) in STRIDES.iter().enumerate() {
            let (gh, gw) = grids[scale];
            let s = stride as f64;
            for (anchor, &(aw, ah)) in cfg.anchors[scale].iter().enumerate() {
                let ratio = (w / aw).max(aw / w).max(h / ah).max(ah / h);
                if ratio >= RATIO_LIMIT {
                    continue;
                }
                let cell_x = ((cx / s).floor() as usize).min(gw - 1);
                let cell_y = ((cy / s).floor() as usize).min(gh - 1);
                // decode is center = (2*sig(t) - 0.5 + cell)*stride,
                //           size  = anchor * (2*sig(t))^2
                let tx = logit((cx / s - cell_x as f64 + 0.5) / 2.0);
                let ty = logit((cy / s - cell_y as f64 + 0.5) / 2.0);
                let tw = logit((w / aw).sqrt() / 2.0);
                let th = logit((h / ah).sqrt() / 2.0);
                let slot = MatchedSlot {
                    scale,
                    anchor,
                    cell_y,
                    cell_x,
                    class_id: ann.class_id,
                    t: [tx, ty, tw, th],
                    box_px: [cx, cy, w, h],
                    box_index: bi,
                };
                let key = (scale, anchor, cell_y, cell_x);
                match taken.get(&key) {
                    None => {
                        taken.insert(key, out.slots.len());
                        out.slots.push(slot);
                    }
                    Some(&idx) => {
                        let inc = &out.slots[idx];
                        let inc_iou = shape_iou(
                            inc.box_px[2],
                            inc.box_px[3],
                            cfg.anchors[scale][anchor].0,
                            cfg.anchors[scale][anchor].1,
                        );
                        let new_iou = shape_iou(w, h, aw, ah);
                        // larger IoU wins; ties keep the lower box index,
                        // which is the incumbent by iteration order
                        if new_iou > inc_iou {
                            out.slots[idx] = slot;
                        }
                    }
                }
            }
        }
    }
    // deterministic order for bitwise-stable iteration downstream
    out.slots.sort_by_key(|s| (s.scale, s.cell_y, s.cell_x, s.anchor));
    Ok(out)
}

/// Sanity check used by loss code: targets must fit the configured geometry.
pub fn check_geometry(t: &TargetAssignment, cfg: &NetworkConfig) -> Result<()> {
    let grids = cfg.grid_sizes();
    for s in &t.slots {
        let (gh, gw) = grids[s.scale];
        if s.cell_y >= gh || s.cell_x >= gw || s.anchor >= ANCHORS_PER_SCALE {
            return Err(Error::Shape(format!(
                "matched slot {s:?} outside the {gh}x{gw} grid"
            )));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::NetworkConfig;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cfg() -> NetworkConfig {
        NetworkConfig::new((256, 256), 3, 16)
    }

    fn sigmoid(z: f64) -> f64 {
        1.0 / (1.0 + (-z).exp())
    }

    /// Independent oracle: enumerate every (scale, cell, anchor, box) tuple
    /// over the whole grid and apply the matching rule directly.
    fn brute_force(annotations: &[Annotation], cfg: &NetworkConfig) -> Vec<MatchedSlot> {
        let (img_h, img_w) = (cfg.input_size.0 as f64, cfg.input_size.1 as f64);
        let grids = cfg.grid_sizes();
        let mut slots: Vec<MatchedSlot> = Vec::new();
        for scale in 0..3 {
            let stride = STRIDES[scale] as f64;
            let (gh, gw) = grids[scale];
            for cell_y in 0..gh {
                for cell_x in 0..gw {
                    for anchor in 0..ANCHORS_PER_SCALE {
                        let (aw, ah) = cfg.anchors[scale][anchor];
                        let mut best: Option<(f64, usize)> = None;
                        for (bi, ann) in annotations.iter().enumerate() {
                            let (cx, cy, w, h) =
                                (ann.cx * img_w, ann.cy * img_h, ann.w * img_w, ann.h * img_h);
                            if w <= f64::EPSILON || h <= f64::EPSILON {
                                continue;
                            }
                            let in_cell = ((cx / stride).floor() as usize).min(gw - 1) == cell_x
                                && ((cy / stride).floor() as usize).min(gh - 1) == cell_y;
                            if !in_cell {
                                continue;
                            }
                            let ratio = (w / aw).max(aw / w).max(h / ah).max(ah / h);
                            if ratio >= RATIO_LIMIT {
                                continue;
                            }
                            let iou = shape_iou(w, h, aw, ah);
                            let better = match best {
                                None => true,
                                Some((best_iou, best_bi)) => {
                                    iou > best_iou || (iou == best_iou && bi < best_bi)
                                }
                            };
                            if better {
                                best = Some((iou, bi));
                            }
                        }
                        if let Some((_, bi)) = best {
                            let ann = &annotations[bi];
                            let (cx, cy, w, h) =
                                (ann.cx * img_w, ann.cy * img_h, ann.w * img_w, ann.h * img_h);
                            slots.push(MatchedSlot {
                                scale,
                                anchor,
                                cell_y,
                                cell_x,
                                class_id: ann.class_id,
                                t: [
                                    logit((cx / stride - cell_x as f64 + 0.5) / 2.0),
                                    logit((cy / stride - cell_y as f64 + 0.5) / 2.0),
                                    logit((w / aw).sqrt() / 2.0),
                                    logit((h / ah).sqrt() / 2.0),
                                ],
                                box_px: [cx, cy, w, h],
                                box_index: bi,
                            });
                        }
                    }
                }
            }
        }
        slots.sort_by_key(|s| (s.scale, s.cell_y, s.cell_x, s.anchor));
        slots
    }

    #[test]
    fn empty_annotations_give_all_negative() {
        let t = assign_targets(&[], &cfg()).unwrap();
        assert!(t.slots.is_empty());
        assert_eq!(t.skipped_degenerate, 0);
    }

    #[test]
    fn anchor_shaped_box_matches_its_anchor() {
        let c = cfg();
        // box exactly the shape of anchor 0 at scale 1, centered in a cell
        let (aw, ah) = c.anchors[1][0];
        let ann = Annotation {
            class_id: 1,
            cx: (8.0 * 16.0 + 8.0) / 256.0,
            cy: (8.0 * 16.0 + 8.0) / 256.0,
            w: aw / 256.0,
            h: ah / 256.0,
        };
        let t = assign_targets(&[ann], &c).unwrap();
        assert!(t
            .slots
            .iter()
            .any(|s| s.scale == 1 && s.anchor == 0 && s.cell_y == 8 && s.cell_x == 8));
        // encoded targets decode back to the box
        for s in &t.slots {
            let stride = STRIDES[s.scale] as f64;
            let (aw, ah) = c.anchors[s.scale][s.anchor];
            let cx = (2.0 * sigmoid(s.t[0]) - 0.5 + s.cell_x as f64) * stride;
            let cy = (2.0 * sigmoid(s.t[1]) - 0.5 + s.cell_y as f64) * stride;
            let w = aw * (2.0 * sigmoid(s.t[2])).powi(2);
            let h = ah * (2.0 * sigmoid(s.t[3])).powi(2);
            assert!((cx - s.box_px[0]).abs() < 1e-9);
            assert!((cy - s.box_px[1]).abs() < 1e-9);
            assert!((w - s.box_px[2]).abs() / s.box_px[2] < 1e-9);
            assert!((h - s.box_px[3]).abs() / s.box_px[3] < 1e-9);
        }
    }

    #[test]
    fn crafted_three_box_instance_matches_brute_force() {
        let c = cfg();
        let anns = vec![
            Annotation {
                class_id: 0,
                cx: 0.31,
                cy: 0.42,
                w: 0.10,
                h: 0.12,
            },
            Annotation {
                class_id: 2,
                cx: 0.80,
                cy: 0.15,
                w: 0.30,
                h: 0.22,
            },
            // same cell as box 0 at coarse scales: conflict resolution path
            Annotation {
                class_id: 1,
                cx: 0.33,
                cy: 0.43,
                w: 0.11,
                h: 0.11,
            },
        ];
        let got = assign_targets(&anns, &c).unwrap();
        let want = brute_force(&anns, &c);
        assert_eq!(got.slots, want);
    }

    #[test]
    fn hundred_random_instances_match_brute_force_exactly() {
        let c = cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..100 {
            let n = rng.gen_range(0..6);
            let anns: Vec<Annotation> = (0..n)
                .map(|_| Annotation {
                    class_id: rng.gen_range(0..3),
                    cx: rng.gen_range(0.05..0.95),
                    cy: rng.gen_range(0.05..0.95),
                    w: rng.gen_range(0.02..0.6),
                    h: rng.gen_range(0.02..0.6),
                })
                .collect();
            let got = assign_targets(&anns, &c).unwrap();
            let want = brute_force(&anns, &c);
            assert_eq!(got.slots, want);
        }
    }
}
