//! Detection evaluation: log-average miss rate over FPPI in [1e-2, 1] and
//! 101-point interpolated mean average precision, both backed by the same
//! greedy per-image matcher.
//!
//! Matching detections in descending-score order has the prefix property:
//! the matching of the top-k detections is independent of everything scored
//! below them, so one pass labels every detection TP/FP and every threshold
//! sweep reduces to prefix sums. The test suite holds naive re-matching
//! oracles against both metrics.

use crate::error::{Error, Result};
use crate::fusion::Detection;

/// Ground-truth box in pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GtBox {
    pub class_id: usize,
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl GtBox {
    fn iou(&self, d: &Detection) -> f64 {
        let iw = (self.x2.min(d.x2) - self.x1.max(d.x1)).max(0.0);
        let ih = (self.y2.min(d.y2) - self.y1.max(d.y1)).max(0.0);
        let inter = iw * ih;
        let a = (self.x2 - self.x1) * (self.y2 - self.y1);
        let b = (d.x2 - d.x1) * (d.y2 - d.y1);
        if a + b - inter <= 0.0 {
            0.0
        } else {
            inter / (a + b - inter)
        }
    }
}

/// One image's detections and ground truths.
#[derive(Debug, Clone, Default)]
pub struct EvalImage {
    pub dets: Vec<Detection>,
    pub gts: Vec<GtBox>,
}

#[derive(Debug, Clone)]
pub struct EvalConfig {
    pub iou_match: f64,
    pub fppi_points: Vec<f64>,
    pub map_iou_set: Vec<f64>,
    pub miss_rate_floor: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            iou_match: 0.5,
            fppi_points: log_spaced(1e-2, 1.0, 9),
            map_iou_set: (0..10).map(|i| 0.5 + 0.05 * i as f64).collect(),
            miss_rate_floor: 1e-10,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.fppi_points.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::Config("fppi points must be strictly increasing".into()));
        }
        if self
            .map_iou_set
            .iter()
            .chain(std::iter::once(&self.iou_match))
            .any(|&t| !(t > 0.0 && t < 1.0))
        {
            return Err(Error::Config("iou thresholds must lie in (0, 1)".into()));
        }
        Ok(())
    }
}

pub fn log_spaced(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    let (a, b) = (lo.ln(), hi.ln());
    (0..n)
        .map(|i| (a + (b - a) * i as f64 / (n - 1) as f64).exp())
        .collect()
}

/// Greedy one-to-one matching of one image.
///
/// `dets` must already be sorted by descending score; each detection claims
/// the unmatched same-class ground truth with the highest IoU at or above
/// `iou_match`. Returns per-detection TP flags and per-GT matched flags.
pub fn match_detections(
    dets: &[Detection],
    gts: &[GtBox],
    iou_match: f64,
) -> (Vec<bool>, Vec<bool>) {
    let mut tp = vec![false; dets.len()];
    let mut matched = vec![false; gts.len()];
    for (di, d) in dets.iter().enumerate() {
        let mut best: Option<(f64, usize)> = None;
        for (gi, g) in gts.iter().enumerate() {
            if matched[gi] || g.class_id != d.class_id {
                continue;
            }
            let iou = g.iou(d);
            if iou >= iou_match && best.map_or(true, |(b, _)| iou > b) {
                best = Some((iou, gi));
            }
        }
        if let Some((_, gi)) = best {
            matched[gi] = true;
            tp[di] = true;
        }
    }
    (tp, matched)
}

/// Labels every detection TP/FP and pools them across images, sorted by
/// descending score (ties broken by image then input order, for determinism).
fn pooled_labels(images: &[EvalImage], iou_match: f64) -> (Vec<(f64, bool)>, usize) {
    let mut pooled: Vec<(f64, usize, usize, bool)> = Vec::new();
    let mut total_gt = 0usize;
    for (ii, img) in images.iter().enumerate() {
        total_gt += img.gts.len();
        let mut order: Vec<usize> = (0..img.dets.len()).collect();
        order.sort_by(|&a, &b| {
            img.dets[b]
                .score
                .total_cmp(&img.dets[a].score)
                .then(a.cmp(&b))
        });
        let sorted: Vec<Detection> = order.iter().map(|&i| img.dets[i]).collect();
        let (tp, _) = match_detections(&sorted, &img.gts, iou_match);
        for (k, &oi) in order.iter().enumerate() {
            pooled.push((sorted[k].score, ii, oi, tp[k]));
        }
    }
    pooled.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    (pooled.into_iter().map(|(s, _, _, t)| (s, t)).collect(), total_gt)
}

/// Every achieved (FPPI, miss-rate) point of the threshold sweep, in
/// ascending FPPI order (descending threshold).
pub fn miss_rate_sweep(images: &[EvalImage], iou_match: f64) -> Result<Vec<(f64, f64)>> {
    if images.is_empty() {
        return Err(Error::Config("miss-rate sweep over zero images".into()));
    }
    let (pooled, total_gt) = pooled_labels(images, iou_match);
    let n_img = images.len() as f64;
    let mut points = Vec::new();
    let mut tp = 0usize;
    let mut fp = 0usize;
    for (k, &(score, is_tp)) in pooled.iter().enumerate() {
        if is_tp {
            tp += 1;
        } else {
            fp += 1;
        }
        // a threshold equal to `score` admits every detection scored >= it
        let last_of_score = k + 1 == pooled.len() || pooled[k + 1].0 != score;
        if last_of_score {
            let fppi = fp as f64 / n_img;
            let mr = if total_gt == 0 {
                0.0
            } else {
                1.0 - tp as f64 / total_gt as f64
            };
            points.push((fppi, mr));
        }
    }
    Ok(points)
}

/// Miss rate sampled at the configured FPPI points: at each sample point the
/// miss rate of the largest achieved FPPI not exceeding it, or 1 if no sweep
/// point lies at or below it.
pub fn miss_rate_curve(images: &[EvalImage], cfg: &EvalConfig) -> Result<Vec<(f64, f64)>> {
    cfg.validate()?;
    let sweep = miss_rate_sweep(images, cfg.iou_match)?;
    Ok(cfg
        .fppi_points
        .iter()
        .map(|&p| {
            let mut mr = 1.0;
            let mut best_fppi = f64::NEG_INFINITY;
            for &(fppi, m) in &sweep {
                if fppi <= p && fppi >= best_fppi {
                    // sweep is in descending-threshold order; at equal FPPI
                    // the later (lower-threshold) point has more TPs
                    best_fppi = fppi;
                    mr = m;
                }
            }
            (p, mr)
        })
        .collect())
}

/// `exp(mean(ln(max(mr, floor)))) * 100`.
pub fn log_average_miss_rate(curve: &[(f64, f64)], floor: f64) -> f64 {
    let n = curve.len() as f64;
    let s: f64 = curve.iter().map(|&(_, mr)| mr.max(floor).ln()).sum();
    (s / n).exp() * 100.0
}

/// 101-point interpolated average precision for one class at one IoU
/// threshold; `None` when the class has no ground truth.
pub fn average_precision(images: &[EvalImage], class_id: usize, iou: f64) -> Option<f64> {
    let class_images: Vec<EvalImage> = images
        .iter()
        .map(|img| EvalImage {
            dets: img
                .dets
                .iter()
                .filter(|d| d.class_id == class_id)
                .copied()
                .collect(),
            gts: img
                .gts
                .iter()
                .filter(|g| g.class_id == class_id)
                .copied()
                .collect(),
        })
        .collect();
    let (pooled, total_gt) = pooled_labels(&class_images, iou);
    if total_gt == 0 {
        return None;
    }
    let mut tp = 0usize;
    let mut precision = Vec::with_capacity(pooled.len());
    let mut recall = Vec::with_capacity(pooled.len());
    for (k, &(_, is_tp)) in pooled.iter().enumerate() {
        if is_tp {
            tp += 1;
        }
        precision.push(tp as f64 / (k + 1) as f64);
        recall.push(tp as f64 / total_gt as f64);
    }
    // precision envelope from the right, then 101-point integration
    for k in (0..precision.len().saturating_sub(1)).rev() {
        if precision[k + 1] > precision[k] {
            precision[k] = precision[k + 1];
        }
    }
    let mut acc = 0.0;
    for i in 0..=100 {
        let r = i as f64 / 100.0;
        let p = recall
            .iter()
            .position(|&rk| rk >= r - 1e-12)
            .map(|idx| precision[idx])
            .unwrap_or(0.0);
        acc += p;
    }
    Some(acc / 101.0)
}

/// Classwise mAP at one IoU: the mean skips classes without ground truth.
pub fn map_at(images: &[EvalImage], num_classes: usize, iou: f64) -> (f64, Vec<Option<f64>>) {
    let per_class: Vec<Option<f64>> = (0..num_classes)
        .map(|c| average_precision(images, c, iou))
        .collect();
    let present: Vec<f64> = per_class.iter().filter_map(|a| *a).collect();
    let map = if present.is_empty() {
        0.0
    } else {
        present.iter().sum::<f64>() / present.len() as f64
    };
    (map, per_class)
}

/// Metric bundle of one evaluation against one ground-truth set.
#[derive(Debug, Clone)]
pub struct MetricsReport {
    pub mr2: f64,
    pub map50: f64,
    pub map: f64,
    pub per_class_ap50: Vec<Option<f64>>,
    pub excluded_classes: Vec<usize>,
    pub curve: Vec<(f64, f64)>,
    pub sweep: Vec<(f64, f64)>,
}

pub fn evaluate(images: &[EvalImage], num_classes: usize, cfg: &EvalConfig) -> Result<MetricsReport> {
    cfg.validate()?;
    let curve = miss_rate_curve(images, cfg)?;
    let mr2 = log_average_miss_rate(&curve, cfg.miss_rate_floor);
    let (map50, per_class_ap50) = map_at(images, num_classes, cfg.iou_match);
    let mut acc = 0.0;
    for &iou in &cfg.map_iou_set {
        acc += map_at(images, num_classes, iou).0;
    }
    let map = acc / cfg.map_iou_set.len() as f64;
    let excluded_classes = per_class_ap50
        .iter()
        .enumerate()
        .filter_map(|(c, ap)| ap.is_none().then_some(c))
        .collect();
    Ok(MetricsReport {
        mr2,
        map50,
        map,
        per_class_ap50,
        excluded_classes,
        curve,
        sweep: miss_rate_sweep(images, cfg.iou_match)?,
    })
}

/// The headline protocol: the same detections scored against each modality's
/// ground truth, metric values arithmetically averaged.
#[derive(Debug, Clone)]
pub struct DualModalityReport {
    pub visible: MetricsReport,
    pub thermal: MetricsReport,
    pub mr2: f64,
    pub map50: f64,
    pub map: f64,
}

pub fn dual_modality_report(visible: MetricsReport, thermal: MetricsReport) -> DualModalityReport {
    DualModalityReport {
        mr2: (visible.mr2 + thermal.mr2) / 2.0,
        map50: (visible.map50 + thermal.map50) / 2.0,
        map: (visible.map + thermal.map) / 2.0,
        visible,
        thermal,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn det(class_id: usize, score: f64, x1: f64, y1: f64, s: f64) -> Detection {
        Detection {
            class_id,
            score,
            x1,
            y1,
            x2: x1 + s,
            y2: y1 + s,
        }
    }

    fn gt(class_id: usize, x1: f64, y1: f64, s: f64) -> GtBox {
        GtBox {
            class_id,
            x1,
            y1,
            x2: x1 + s,
            y2: y1 + s,
        }
    }

    fn rand_images(rng: &mut ChaCha8Rng, n_img: usize, max_boxes: usize) -> Vec<EvalImage> {
        (0..n_img)
            .map(|_| {
                let ng = rng.gen_range(0..=max_boxes);
                let nd = rng.gen_range(0..=max_boxes);
                EvalImage {
                    gts: (0..ng)
                        .map(|_| {
                            gt(
                                rng.gen_range(0..3),
                                rng.gen_range(0.0..80.0),
                                rng.gen_range(0.0..80.0),
                                rng.gen_range(5.0..30.0),
                            )
                        })
                        .collect(),
                    dets: (0..nd)
                        .map(|_| {
                            det(
                                rng.gen_range(0..3),
                                rng.gen_range(0.0..1.0),
                                rng.gen_range(0.0..80.0),
                                rng.gen_range(0.0..80.0),
                                rng.gen_range(5.0..30.0),
                            )
                        })
                        .collect(),
                }
            })
            .collect()
    }

    /// Naive sweep oracle: re-match every image from scratch per threshold.
    fn naive_sweep(images: &[EvalImage], iou: f64) -> Vec<(f64, f64)> {
        let mut scores: Vec<f64> = images
            .iter()
            .flat_map(|i| i.dets.iter().map(|d| d.score))
            .collect();
        scores.sort_by(f64::total_cmp);
        scores.dedup();
        scores.reverse();
        let total_gt: usize = images.iter().map(|i| i.gts.len()).sum();
        scores
            .iter()
            .map(|&t| {
                let mut tp = 0usize;
                let mut fp = 0usize;
                for img in images {
                    let mut kept: Vec<Detection> = img
                        .dets
                        .iter()
                        .filter(|d| d.score >= t)
                        .copied()
                        .collect();
                    kept.sort_by(|a, b| b.score.total_cmp(&a.score));
                    let (flags, _) = match_detections(&kept, &img.gts, iou);
                    tp += flags.iter().filter(|&&f| f).count();
                    fp += flags.iter().filter(|&&f| !f).count();
                }
                let fppi = fp as f64 / images.len() as f64;
                let mr = if total_gt == 0 {
                    0.0
                } else {
                    1.0 - tp as f64 / total_gt as f64
                };
                (fppi, mr)
            })
            .collect()
    }

    /// Naive AP oracle: PR points from scratch per top-k prefix.
    fn naive_ap(images: &[EvalImage], class_id: usize, iou: f64) -> Option<f64> {
        let mut pooled: Vec<(f64, usize, usize)> = Vec::new();
        for (ii, img) in images.iter().enumerate() {
            for (di, d) in img.dets.iter().enumerate() {
                if d.class_id == class_id {
                    pooled.push((d.score, ii, di));
                }
            }
        }
        pooled.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        let total_gt: usize = images
            .iter()
            .map(|i| i.gts.iter().filter(|g| g.class_id == class_id).count())
            .sum();
        if total_gt == 0 {
            return None;
        }
        let mut pr: Vec<(f64, f64)> = Vec::new();
        for k in 1..=pooled.len() {
            // rebuild the matching from scratch using only the top-k pool
            let mut tp = 0usize;
            for (ii, img) in images.iter().enumerate() {
                let mut mine: Vec<Detection> = pooled[..k]
                    .iter()
                    .filter(|&&(_, pi, _)| pi == ii)
                    .map(|&(_, _, di)| img.dets[di])
                    .collect();
                mine.sort_by(|a, b| b.score.total_cmp(&a.score));
                let gts: Vec<GtBox> = img
                    .gts
                    .iter()
                    .filter(|g| g.class_id == class_id)
                    .copied()
                    .collect();
                let (flags, _) = match_detections(&mine, &gts, iou);
                tp += flags.iter().filter(|&&f| f).count();
            }
            pr.push((tp as f64 / k as f64, tp as f64 / total_gt as f64));
        }
        let mut acc = 0.0;
        for i in 0..=100 {
            let r = i as f64 / 100.0;
            let p = pr
                .iter()
                .filter(|&&(_, rec)| rec >= r - 1e-12)
                .map(|&(p, _)| p)
                .fold(0.0, f64::max);
            acc += p;
        }
        Some(acc / 101.0)
    }

    #[test]
    fn perfect_predictions_all_match() {
        let img = EvalImage {
            gts: vec![gt(0, 10.0, 10.0, 20.0), gt(1, 50.0, 50.0, 15.0)],
            dets: vec![det(0, 0.9, 10.0, 10.0, 20.0), det(1, 0.8, 50.0, 50.0, 15.0)],
        };
        let (tp, matched) = match_detections(&img.dets, &img.gts, 0.5);
        assert!(tp.iter().all(|&t| t));
        assert!(matched.iter().all(|&m| m));

        let (tp, matched) = match_detections(&[], &img.gts, 0.5);
        assert!(tp.is_empty());
        assert!(matched.iter().all(|&m| !m));
    }

    #[test]
    fn greedy_matching_is_one_to_one() {
        // two dets over one gt: only the higher-scored one matches
        let gts = vec![gt(0, 0.0, 0.0, 10.0)];
        let dets = vec![det(0, 0.9, 0.0, 0.0, 10.0), det(0, 0.8, 1.0, 0.0, 10.0)];
        let (tp, matched) = match_detections(&dets, &gts, 0.5);
        assert_eq!(tp, vec![true, false]);
        assert_eq!(matched, vec![true]);
    }

    #[test]
    fn single_perfect_detection_curve_is_zero() {
        let images = vec![EvalImage {
            gts: vec![gt(0, 10.0, 10.0, 20.0)],
            dets: vec![det(0, 0.9, 10.0, 10.0, 20.0)],
        }];
        let curve = miss_rate_curve(&images, &EvalConfig::default()).unwrap();
        assert_eq!(curve.len(), 9);
        assert!(curve.iter().all(|&(_, mr)| mr == 0.0));
    }

    #[test]
    fn no_detections_give_full_miss() {
        let images = vec![EvalImage {
            gts: vec![gt(0, 10.0, 10.0, 20.0)],
            dets: vec![],
        }];
        let cfg = EvalConfig::default();
        let curve = miss_rate_curve(&images, &cfg).unwrap();
        assert!(curve.iter().all(|&(_, mr)| mr == 1.0));
        assert!((log_average_miss_rate(&curve, cfg.miss_rate_floor) - 100.0).abs() < 1e-12);
    }

    #[test]
    fn zero_images_is_an_error() {
        assert!(miss_rate_curve(&[], &EvalConfig::default()).is_err());
    }

    #[test]
    fn log_average_hand_cases() {
        let flat = vec![(0.01, 0.5); 9];
        assert!((log_average_miss_rate(&flat, 1e-10) - 50.0).abs() < 1e-9);
        let mrs = [1.0, 0.1, 0.5, 0.25, 0.8, 0.33, 0.6, 0.05, 0.12];
        let curve: Vec<(f64, f64)> = mrs.iter().map(|&m| (0.1, m)).collect();
        let want = (mrs.iter().map(|m| m.ln()).sum::<f64>() / 9.0).exp() * 100.0;
        assert!((log_average_miss_rate(&curve, 1e-10) - want).abs() < 1e-9);
    }

    #[test]
    fn sweep_matches_naive_oracle_on_random_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let n = rng.gen_range(1..=10);
            let images = rand_images(&mut rng, n, 5);
            let mine = miss_rate_sweep(&images, 0.5).unwrap();
            let naive = naive_sweep(&images, 0.5);
            assert_eq!(mine.len(), naive.len());
            for (a, b) in mine.iter().zip(&naive) {
                assert!((a.0 - b.0).abs() < 1e-9, "fppi {} vs {}", a.0, b.0);
                assert!((a.1 - b.1).abs() < 1e-9, "mr {} vs {}", a.1, b.1);
            }
        }
    }

    #[test]
    fn ap_degenerate_cases() {
        let images = vec![EvalImage {
            gts: vec![gt(0, 10.0, 10.0, 20.0), gt(0, 50.0, 50.0, 20.0)],
            dets: vec![
                det(0, 0.9, 10.0, 10.0, 20.0),
                det(0, 0.8, 50.0, 50.0, 20.0),
            ],
        }];
        assert_eq!(average_precision(&images, 0, 0.5), Some(1.0));
        // zero TP detector
        let bad = vec![EvalImage {
            gts: images[0].gts.clone(),
            dets: vec![det(0, 0.9, 200.0, 200.0, 5.0)],
        }];
        assert_eq!(average_precision(&bad, 0, 0.5), Some(0.0));
        // class with no gt is excluded
        assert_eq!(average_precision(&images, 2, 0.5), None);
        let (_, per_class) = map_at(&images, 3, 0.5);
        assert_eq!(per_class[2], None);
    }

    #[test]
    fn ap_three_detection_hand_case() {
        // dets in score order: TP, FP, TP over 2 GT
        let images = vec![EvalImage {
            gts: vec![gt(0, 0.0, 0.0, 10.0), gt(0, 40.0, 40.0, 10.0)],
            dets: vec![
                det(0, 0.9, 0.0, 0.0, 10.0),
                det(0, 0.8, 100.0, 100.0, 10.0),
                det(0, 0.7, 40.0, 40.0, 10.0),
            ],
        }];
        let ap = average_precision(&images, 0, 0.5).unwrap();
        // p(r<=0.5)=1, p(0.5<r<=1)=2/3 on the 101-point grid
        let want = (51.0 + 50.0 * (2.0 / 3.0)) / 101.0;
        assert!((ap - want).abs() < 1e-9, "{ap} vs {want}");
    }

    #[test]
    fn ap_matches_naive_oracle_on_random_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..50 {
            let n = rng.gen_range(1..=10);
            let images = rand_images(&mut rng, n, 5);
            for class_id in 0..3 {
                let mine = average_precision(&images, class_id, 0.5);
                let naive = naive_ap(&images, class_id, 0.5);
                match (mine, naive) {
                    (None, None) => {}
                    (Some(a), Some(b)) => {
                        assert!((a - b).abs() < 1e-9, "class {class_id}: {a} vs {b}")
                    }
                    other => panic!("presence mismatch {other:?}"),
                }
            }
        }
    }

    #[test]
    fn removing_false_positives_never_hurts_mr2() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let cfg = EvalConfig::default();
        for _ in 0..20 {
            let images = rand_images(&mut rng, 6, 4);
            let before =
                log_average_miss_rate(&miss_rate_curve(&images, &cfg).unwrap(), cfg.miss_rate_floor);
            // identify and drop a random subset of false positives
            let mut thinned = images.clone();
            for img in &mut thinned {
                let mut order: Vec<usize> = (0..img.dets.len()).collect();
                order.sort_by(|&a, &b| {
                    img.dets[b]
                        .score
                        .total_cmp(&img.dets[a].score)
                        .then(a.cmp(&b))
                });
                let sorted: Vec<Detection> = order.iter().map(|&i| img.dets[i]).collect();
                let (tp, _) = match_detections(&sorted, &img.gts, cfg.iou_match);
                img.dets = sorted
                    .iter()
                    .zip(&tp)
                    .filter(|&(_, &is_tp)| is_tp || rng.gen_bool(0.5))
                    .map(|(d, _)| *d)
                    .collect();
            }
            let after = log_average_miss_rate(
                &miss_rate_curve(&thinned, &cfg).unwrap(),
                cfg.miss_rate_floor,
            );
            assert!(
                after <= before + 1e-9,
                "removing FPs raised MR2: {before} -> {after}"
            );
        }
    }

    #[test]
    fn dual_modality_report_averages() {
        let mk = |map50: f64| MetricsReport {
            mr2: 40.0,
            map50,
            map: map50 / 2.0,
            per_class_ap50: vec![Some(map50)],
            excluded_classes: vec![],
            curve: vec![],
            sweep: vec![],
        };
        let rep = dual_modality_report(mk(0.6), mk(0.8));
        assert!((rep.map50 - 0.7).abs() < 1e-12);
        assert!((rep.mr2 - 40.0).abs() < 1e-12);
        let same = dual_modality_report(mk(0.5), mk(0.5));
        assert_eq!(same.map50, 0.5);
    }

    #[test]
    fn evaluate_bundles_are_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let images = rand_images(&mut rng, 8, 4);
        let cfg = EvalConfig::default();
        let a = evaluate(&images, 3, &cfg).unwrap();
        let b = evaluate(&images, 3, &cfg).unwrap();
        assert_eq!(a.mr2.to_bits(), b.mr2.to_bits());
        assert_eq!(a.map.to_bits(), b.map.to_bits());
    }
}
