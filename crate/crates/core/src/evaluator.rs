//! COCO-style average precision and recall.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::boxops::{iou, BoxCxCyWH, BoxXYXY};
use crate::error::{Error, Result};
use crate::scenes::GroundTruthSet;

/// 0.50, 0.55, ..., 0.95 written out so that closed comparisons are exact.
pub const IOU_THRESHOLDS: [f64; 10] = [0.5, 0.55, 0.6, 0.65, 0.7, 0.75, 0.8, 0.85, 0.9, 0.95];

/// Area-fraction cutoffs between small/medium and medium/large objects.
pub const SMALL_AREA: f64 = 0.025;
pub const LARGE_AREA: f64 = 0.10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub image_id: u64,
    pub class: usize,
    pub bbox: BoxCxCyWH,
    pub confidence: f32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct MetricsTable {
    pub ap: f64,
    pub ap50: f64,
    pub ap75: f64,
    /// `None` when no ground truth falls in the stratum.
    pub ap_small: Option<f64>,
    pub ap_medium: Option<f64>,
    pub ap_large: Option<f64>,
    pub ar1: f64,
    pub ar10: f64,
    pub ar_k: f64,
    pub max_dets: usize,
    pub per_class_ap: Vec<Option<f64>>,
    pub images: usize,
    pub ground_truth: usize,
    pub detections: usize,
}

impl MetricsTable {
    /// The six headline columns, as percentages.
    pub fn row(&self) -> [Option<f64>; 6] {
        [
            Some(self.ap),
            Some(self.ap50),
            Some(self.ap75),
            self.ap_small,
            self.ap_medium,
            self.ap_large,
        ]
        .map(|v| v.map(|x| 100.0 * x))
    }

    pub fn text_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:>6} {:>6} {:>6} {:>6} {:>6} {:>6}", "AP", "AP50", "AP75", "AP_S", "AP_M", "AP_L");
        let cells: Vec<String> = self.row().iter().map(|v| fmt_cell(*v)).collect();
        let _ = writeln!(s, "{}", cells.join(" "));
        s
    }
}

pub fn fmt_cell(v: Option<f64>) -> String {
    match v {
        Some(x) => format!("{x:>6.1}"),
        None => format!("{:>6}", "-"),
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Stratum {
    All,
    Small,
    Medium,
    Large,
}

impl Stratum {
    fn contains(self, area: f64) -> bool {
        match self {
            Stratum::All => true,
            Stratum::Small => area < SMALL_AREA,
            Stratum::Medium => (SMALL_AREA..LARGE_AREA).contains(&area),
            Stratum::Large => area >= LARGE_AREA,
        }
    }
}

struct ClassData<'a> {
    /// Per image id: ground-truth boxes of this class with their areas.
    gt: BTreeMap<u64, Vec<(BoxXYXY, f64)>>,
    /// Detections of this class, confidence-descending, ties by image id.
    dets: Vec<&'a Detection>,
}

fn xyxy(b: BoxCxCyWH) -> BoxXYXY {
    b.to_xyxy().unwrap_or(BoxXYXY::new(0.0, 0.0, 0.0, 0.0))
}

/// Greedy matching at one threshold. Returns (true-positive flags, ignore
/// flags) for `dets` in order plus the number of counted ground truths.
fn match_class(data: &ClassData, threshold: f64, stratum: Stratum, max_dets: usize) -> (Vec<bool>, Vec<bool>, usize) {
    let mut taken: HashMap<u64, Vec<bool>> = data.gt.iter().map(|(&id, g)| (id, vec![false; g.len()])).collect();
    let mut per_image: HashMap<u64, usize> = HashMap::new();
    let npos = data
        .gt
        .values()
        .flatten()
        .filter(|(_, a)| stratum.contains(*a))
        .count();
    let mut tp = Vec::with_capacity(data.dets.len());
    let mut ignore = Vec::with_capacity(data.dets.len());
    for d in &data.dets {
        let seen = per_image.entry(d.image_id).or_insert(0);
        *seen += 1;
        if *seen > max_dets {
            tp.push(false);
            ignore.push(true);
            continue;
        }
        let db = xyxy(d.bbox);
        let gts = data.gt.get(&d.image_id).map(Vec::as_slice).unwrap_or(&[]);
        let used = taken.entry(d.image_id).or_default();
        // Counted ground truth first, then ignored; highest IoU within each.
        let mut best: Option<(bool, f64, usize)> = None;
        for (g, &(gb, area)) in gts.iter().enumerate() {
            if used[g] {
                continue;
            }
            let o = iou(db, gb);
            if o < threshold {
                continue;
            }
            let counted = stratum.contains(area);
            let better = match best {
                None => true,
                Some((bc, bo, _)) => (counted && !bc) || (counted == bc && o > bo),
            };
            if better {
                best = Some((counted, o, g));
            }
        }
        match best {
            Some((counted, _, g)) => {
                used[g] = true;
                tp.push(counted);
                ignore.push(!counted);
            }
            None => {
                tp.push(false);
                ignore.push(!stratum.contains(d.bbox.area() as f64));
            }
        }
    }
    (tp, ignore, npos)
}

/// 101-point interpolated precision average.
fn average_precision(tp: &[bool], ignore: &[bool], npos: usize) -> f64 {
    let (mut t, mut f) = (0usize, 0usize);
    let mut recall = Vec::new();
    let mut precision = Vec::new();
    for (&hit, &ign) in tp.iter().zip(ignore) {
        if ign {
            continue;
        }
        if hit {
            t += 1;
        } else {
            f += 1;
        }
        recall.push(t as f64 / npos as f64);
        precision.push(t as f64 / (t + f) as f64);
    }
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut sum = 0.0;
    for r in 0..=100 {
        let level = r as f64 / 100.0;
        let idx = recall.partition_point(|&x| x < level);
        if idx < precision.len() {
            sum += precision[idx];
        }
    }
    sum / 101.0
}

fn max_recall(tp: &[bool], npos: usize) -> f64 {
    tp.iter().filter(|&&x| x).count() as f64 / npos as f64
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Validates image ids, ranks detections by confidence, and groups by class.
fn class_data<'a>(dets: &'a [Detection], gt: &[(u64, GroundTruthSet)], classes: usize) -> Result<Vec<ClassData<'a>>> {
    let known: BTreeMap<u64, &GroundTruthSet> = gt.iter().map(|(id, g)| (*id, g)).collect();
    if let Some(d) = dets.iter().find(|d| !known.contains_key(&d.image_id)) {
        return Err(Error::Invalid(format!("detection references unknown image id {}", d.image_id)));
    }
    if let Some(d) = dets.iter().find(|d| d.class >= classes || !d.confidence.is_finite()) {
        return Err(Error::Invalid(format!("invalid detection {d:?}")));
    }
    let mut order: Vec<&Detection> = dets.iter().collect();
    order.sort_by(|a, b| b.confidence.total_cmp(&a.confidence).then(a.image_id.cmp(&b.image_id)));
    Ok((0..classes)
        .map(|c| ClassData {
            gt: known
                .iter()
                .map(|(&id, g)| {
                    let boxes = g
                        .objects
                        .iter()
                        .filter(|(k, _)| *k == c)
                        .map(|&(_, b)| (xyxy(b), b.area() as f64))
                        .collect();
                    (id, boxes)
                })
                .collect(),
            dets: order.iter().copied().filter(|d| d.class == c).collect(),
        })
        .collect())
}

/// AP over thresholds and classes, AP at 0.5/0.75, size strata, and AR at
/// 1, 10 and `max_dets` detections per image.
pub fn evaluate_detections(
    dets: &[Detection],
    gt: &[(u64, GroundTruthSet)],
    classes: usize,
    max_dets: usize,
) -> Result<MetricsTable> {
    let data = class_data(dets, gt, classes)?;
    let stratum_ap = |stratum: Stratum| -> (Option<f64>, Vec<Option<f64>>) {
        let per_class: Vec<Option<[f64; 10]>> = data
            .iter()
            .map(|cd| {
                let mut aps = [0.0; 10];
                for (i, &t) in IOU_THRESHOLDS.iter().enumerate() {
                    let (tp, ign, npos) = match_class(cd, t, stratum, max_dets);
                    if npos == 0 {
                        return None;
                    }
                    aps[i] = average_precision(&tp, &ign, npos);
                }
                Some(aps)
            })
            .collect();
        let present: Vec<[f64; 10]> = per_class.iter().flatten().copied().collect();
        let overall = (!present.is_empty()).then(|| mean(&present.iter().map(|a| mean(a)).collect::<Vec<_>>()));
        (overall, per_class.iter().map(|a| a.map(|a| mean(&a))).collect())
    };
    let (ap, per_class_ap) = stratum_ap(Stratum::All);
    let at = |i: usize| -> f64 {
        let v: Vec<f64> = data
            .iter()
            .filter_map(|cd| {
                let (tp, ign, npos) = match_class(cd, IOU_THRESHOLDS[i], Stratum::All, max_dets);
                (npos > 0).then(|| average_precision(&tp, &ign, npos))
            })
            .collect();
        if v.is_empty() {
            0.0
        } else {
            mean(&v)
        }
    };
    let recall_at = |n: usize| -> f64 {
        let v: Vec<f64> = data
            .iter()
            .filter_map(|cd| {
                let per_t: Vec<f64> = IOU_THRESHOLDS
                    .iter()
                    .map(|&t| {
                        let (tp, _, npos) = match_class(cd, t, Stratum::All, n.min(max_dets));
                        if npos == 0 {
                            f64::NAN
                        } else {
                            max_recall(&tp, npos)
                        }
                    })
                    .collect();
                (!per_t[0].is_nan()).then(|| mean(&per_t))
            })
            .collect();
        if v.is_empty() {
            0.0
        } else {
            mean(&v)
        }
    };
    Ok(MetricsTable {
        ap: ap.unwrap_or(0.0),
        ap50: at(0),
        ap75: at(5),
        ap_small: stratum_ap(Stratum::Small).0,
        ap_medium: stratum_ap(Stratum::Medium).0,
        ap_large: stratum_ap(Stratum::Large).0,
        ar1: recall_at(1),
        ar10: recall_at(10),
        ar_k: recall_at(max_dets),
        max_dets,
        per_class_ap,
        images: gt.len(),
        ground_truth: gt.iter().map(|(_, g)| g.objects.len()).sum(),
        detections: dets.len(),
    })
}

/// Class-agnostic average recall of ranked box lists, one value per entry of
/// `at`. `proposals[i]` belongs to `gt[i]`.
pub fn evaluate_recall(proposals: &[Vec<BoxCxCyWH>], gt: &[GroundTruthSet], at: &[usize]) -> Vec<f64> {
    let total: usize = gt.iter().map(|g| g.objects.len()).sum();
    at.iter()
        .map(|&n| {
            if total == 0 {
                return 0.0;
            }
            let per_t: Vec<f64> = IOU_THRESHOLDS
                .iter()
                .map(|&t| {
                    let mut hits = 0usize;
                    for (props, g) in proposals.iter().zip(gt) {
                        let gts: Vec<BoxXYXY> = g.objects.iter().map(|&(_, b)| xyxy(b)).collect();
                        let mut used = vec![false; gts.len()];
                        for p in props.iter().take(n) {
                            let pb = xyxy(*p);
                            let best = gts
                                .iter()
                                .enumerate()
                                .filter(|(i, _)| !used[*i])
                                .map(|(i, g)| (i, iou(pb, *g)))
                                .filter(|(_, o)| *o >= t)
                                .max_by(|a, b| a.1.total_cmp(&b.1).then(b.0.cmp(&a.0)));
                            if let Some((i, _)) = best {
                                used[i] = true;
                                hits += 1;
                            }
                        }
                    }
                    hits as f64 / total as f64
                })
                .collect();
            mean(&per_t)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::seq::SliceRandom;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn corners(x0: f32, y0: f32, x1: f32, y1: f32) -> BoxCxCyWH {
        BoxXYXY::new(x0, y0, x1, y1).to_cxcywh().unwrap()
    }

    fn det(image_id: u64, class: usize, bbox: BoxCxCyWH, confidence: f32) -> Detection {
        Detection {
            image_id,
            class,
            bbox,
            confidence,
        }
    }

    #[test]
    fn perfect_and_empty_detectors() {
        let g = GroundTruthSet {
            objects: vec![(0, corners(0.1, 0.1, 0.4, 0.4)), (1, corners(0.5, 0.5, 0.9, 0.8))],
        };
        let gt = vec![(7, g.clone())];
        let dets: Vec<Detection> = g.objects.iter().map(|&(c, b)| det(7, c, b, 1.0)).collect();
        let m = evaluate_detections(&dets, &gt, 2, 25).unwrap();
        assert_eq!((m.ap, m.ap50, m.ap75), (1.0, 1.0, 1.0));
        let m = evaluate_detections(&[], &gt, 2, 25).unwrap();
        assert_eq!((m.ap, m.ap50, m.ap75), (0.0, 0.0, 0.0));
        assert!(evaluate_detections(&[det(8, 0, g.objects[0].1, 1.0)], &gt, 2, 25).is_err());
    }

    #[test]
    fn partial_overlap_counts_up_to_sixty_percent() {
        // IoU of the two boxes is 0.375 / 0.625 = 0.6 exactly.
        let gt = vec![(0, GroundTruthSet {
            objects: vec![(0, corners(0.0, 0.0, 0.625, 1.0))],
        })];
        let dets = [
            det(0, 0, corners(0.0, 0.0, 0.375, 1.0), 0.9),
            det(0, 0, corners(0.8, 0.8, 0.9, 0.9), 0.8),
        ];
        let m = evaluate_detections(&dets, &gt, 1, 25).unwrap();
        assert_eq!(m.ap50, 1.0);
        assert_eq!(m.ap75, 0.0);
        assert!((m.ap - 0.3).abs() < 1e-12);
    }

    #[test]
    fn recall_fixtures() {
        let a = corners(0.1, 0.1, 0.3, 0.3);
        let b = corners(0.6, 0.6, 0.9, 0.9);
        let far = corners(0.4, 0.0, 0.5, 0.05);
        let gt = vec![GroundTruthSet {
            objects: vec![(0, a), (3, b)],
        }];
        assert_eq!(evaluate_recall(&[vec![far, b, a]], &gt, &[3]), vec![1.0]);
        assert_eq!(evaluate_recall(&[vec![far]], &gt, &[10]), vec![0.0]);
        assert_eq!(evaluate_recall(&[vec![a, far, b]], &gt, &[2]), vec![0.5]);
    }

    #[test]
    fn size_strata_follow_area_fractions() {
        let small = corners(0.0, 0.0, 0.1, 0.1); // 1%
        let medium = corners(0.5, 0.5, 0.7, 0.7); // 4%
        let gt = vec![(0, GroundTruthSet {
            objects: vec![(0, small), (0, medium)],
        })];
        let m = evaluate_detections(&[det(0, 0, medium, 1.0)], &gt, 1, 25).unwrap();
        assert_eq!(m.ap_small, Some(0.0));
        assert_eq!(m.ap_medium, Some(1.0));
        assert_eq!(m.ap_large, None);
    }

    fn random_case(seed: u64) -> (Vec<Detection>, Vec<(u64, GroundTruthSet)>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rb = |rng: &mut ChaCha8Rng| {
            let (w, h) = (rng.gen_range(0.05..0.4), rng.gen_range(0.05..0.4));
            BoxCxCyWH::new(rng.gen_range(w / 2.0..1.0 - w / 2.0), rng.gen_range(h / 2.0..1.0 - h / 2.0), w, h)
        };
        let mut gt = Vec::new();
        let mut dets = Vec::new();
        for id in 0..6u64 {
            let objects: Vec<(usize, BoxCxCyWH)> = (0..rng.gen_range(0..5)).map(|_| (rng.gen_range(0..3), rb(&mut rng))).collect();
            for &(c, b) in &objects {
                if rng.gen_bool(0.7) {
                    let j = BoxCxCyWH::new(b.cx + rng.gen_range(-0.03..0.03), b.cy + rng.gen_range(-0.03..0.03), b.w, b.h);
                    dets.push(det(id, c, j, rng.gen_range(0.0..1.0)));
                }
            }
            for _ in 0..rng.gen_range(0..3) {
                dets.push(det(id, rng.gen_range(0..3), rb(&mut rng), rng.gen_range(0.0..1.0)));
            }
            gt.push((id, GroundTruthSet { objects }));
        }
        (dets, gt)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn loosest_threshold_bounds_the_mean(seed in any::<u64>()) {
            let (dets, gt) = random_case(seed);
            let m = evaluate_detections(&dets, &gt, 3, 25).unwrap();
            prop_assert!(m.ap50 >= m.ap);
            for v in [m.ap, m.ap50, m.ap75, m.ar1, m.ar10, m.ar_k].into_iter().chain(m.ap_small).chain(m.ap_medium).chain(m.ap_large) {
                prop_assert!((0.0..=1.0).contains(&v));
            }
            prop_assert!(m.ar1 <= m.ar10 && m.ar10 <= m.ar_k);
        }

        #[test]
        fn image_order_does_not_matter(seed in any::<u64>()) {
            let (dets, mut gt) = random_case(seed);
            let m = evaluate_detections(&dets, &gt, 3, 25).unwrap();
            let mut blocks: Vec<Vec<Detection>> = gt.iter().map(|(id, _)| dets.iter().filter(|d| d.image_id == *id).copied().collect()).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 1);
            let mut order: Vec<usize> = (0..gt.len()).collect();
            order.shuffle(&mut rng);
            gt = order.iter().map(|&i| gt[i].clone()).collect();
            blocks = order.iter().map(|&i| blocks[i].clone()).collect();
            let shuffled: Vec<Detection> = blocks.concat();
            prop_assert_eq!(m, evaluate_detections(&shuffled, &gt, 3, 25).unwrap());
        }

        #[test]
        fn deleting_false_positive_never_hurts(seed in any::<u64>()) {
            let (mut dets, gt) = random_case(seed);
            let before = evaluate_detections(&dets, &gt, 3, 25).unwrap().ap;
            // Far-corner sliver overlapping nothing in any stratum-visible way.
            let fp = det(gt[0].0, 0, BoxCxCyWH::new(0.99, 0.99, 0.02, 0.02), 0.95);
            dets.push(fp);
            let with_fp = evaluate_detections(&dets, &gt, 3, 25).unwrap().ap;
            prop_assert!(before >= with_fp - 1e-12);
        }

        #[test]
        fn adding_missed_ground_truth_never_hurts(seed in any::<u64>()) {
            let (mut dets, gt) = random_case(seed);
            let before = evaluate_detections(&dets, &gt, 3, 25).unwrap().ap;
            let missed = gt.iter().flat_map(|(id, g)| g.objects.iter().map(move |o| (*id, *o))).find(|(id, (c, b))| {
                !dets.iter().any(|d| d.image_id == *id && d.class == *c && iou(xyxy(d.bbox), xyxy(*b)) >= 0.5)
            });
            if let Some((id, (c, b))) = missed {
                dets.push(det(id, c, b, 1.0));
                prop_assert!(evaluate_detections(&dets, &gt, 3, 25).unwrap().ap >= before - 1e-12);
            }
        }

        #[test]
        fn recall_grows_with_budget(seed in any::<u64>()) {
            let (dets, gt) = random_case(seed);
            let props: Vec<Vec<BoxCxCyWH>> = gt.iter().map(|(id, _)| dets.iter().filter(|d| d.image_id == *id).map(|d| d.bbox).collect()).collect();
            let g: Vec<GroundTruthSet> = gt.into_iter().map(|(_, g)| g).collect();
            let r = evaluate_recall(&props, &g, &[1, 2, 5, 10]);
            prop_assert!(r.windows(2).all(|w| w[0] <= w[1]));
        }
    }
}
