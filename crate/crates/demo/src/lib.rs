//! WebAssembly bindings for the browser demo in `www/`.

use serde::Serialize;
use wasm_bindgen::prelude::*;

use pretrain_lab::boxops::{box_cost, giou, BoxCxCyWH, BoxXYXY};
use pretrain_lab::evaluator::evaluate_recall;
use pretrain_lab::matching::hungarian_assign;
use pretrain_lab::proposals::{propose_boxes, ProposalConfig};
use pretrain_lab::scenes::{generate, GroundTruthSet, SceneImage, SceneSpec, CLASS_NAMES};

fn js_err(e: impl std::fmt::Display) -> JsError {
    JsError::new(&e.to_string())
}

#[derive(Debug, Serialize, PartialEq)]
pub struct LabeledBox {
    pub label: String,
    /// Pixel corners `[x0, y0, x1, y1]`.
    pub corners: [f32; 4],
    pub score: f32,
    /// Best IoU against any ground-truth object.
    pub best_iou: f64,
}

fn pixel_corners(b: BoxCxCyWH, size: usize) -> [f32; 4] {
    let s = size as f32;
    [
        (b.cx - b.w / 2.0) * s,
        (b.cy - b.h / 2.0) * s,
        (b.cx + b.w / 2.0) * s,
        (b.cy + b.h / 2.0) * s,
    ]
}

fn corner_box(b: BoxCxCyWH) -> BoxXYXY {
    BoxXYXY::new(b.cx - b.w / 2.0, b.cy - b.h / 2.0, b.cx + b.w / 2.0, b.cy + b.h / 2.0)
}

/// One rendered scene with its ground truth.
#[wasm_bindgen]
pub struct SceneView {
    image: SceneImage,
    truth: GroundTruthSet,
    config: ProposalConfig,
}

#[wasm_bindgen]
impl SceneView {
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u32, min_objects: usize, max_objects: usize, noise: f32) -> Result<SceneView, JsError> {
        let spec = SceneSpec {
            min_objects,
            max_objects,
            noise,
            ..SceneSpec::default()
        };
        let data = generate(&spec, 1, seed as u64, "demo", "view").map_err(js_err)?;
        let truth = data.manifest.ground_truth().remove(0);
        let image = data.images.into_iter().next().expect("one image");
        Ok(SceneView {
            image,
            truth,
            config: ProposalConfig::default(),
        })
    }

    pub fn size(&self) -> usize {
        self.image.size
    }

    /// Row-major RGBA bytes for an `ImageData`.
    pub fn rgba(&self) -> Vec<u8> {
        self.image.data.chunks_exact(3).flat_map(|p| [p[0], p[1], p[2], 255]).collect()
    }

    pub fn set_segmentation(&mut self, scale: f32, min_size: usize) {
        self.config.scale = scale;
        self.config.min_size = min_size;
    }

    /// JSON list of [`LabeledBox`] for the ground-truth objects.
    pub fn ground_truth(&self) -> String {
        serde_json::to_string(&self.truth_boxes()).expect("serializable")
    }

    /// JSON list of [`LabeledBox`] for the top `count` proposals.
    pub fn proposals(&self, count: usize, seed: u32) -> String {
        serde_json::to_string(&self.proposal_boxes(count, seed)).expect("serializable")
    }

    /// Average recall (IoU 0.5 to 0.95) of the top `count` proposals.
    pub fn recall(&self, count: usize, seed: u32) -> f64 {
        let boxes = propose_boxes(&self.image, count, seed as u64, &self.config)
            .into_iter()
            .map(|p| p.bbox)
            .collect();
        evaluate_recall(&[boxes], std::slice::from_ref(&self.truth), &[count])[0]
    }
}

impl SceneView {
    fn best_iou(&self, b: BoxCxCyWH) -> f64 {
        self.truth
            .objects
            .iter()
            .map(|&(_, t)| pretrain_lab::boxops::iou(corner_box(b), corner_box(t)))
            .fold(0.0, f64::max)
    }

    pub fn truth_boxes(&self) -> Vec<LabeledBox> {
        self.truth
            .objects
            .iter()
            .map(|&(c, b)| LabeledBox {
                label: CLASS_NAMES[c].to_string(),
                corners: pixel_corners(b, self.image.size),
                score: 1.0,
                best_iou: 1.0,
            })
            .collect()
    }

    pub fn proposal_boxes(&self, count: usize, seed: u32) -> Vec<LabeledBox> {
        propose_boxes(&self.image, count, seed as u64, &self.config)
            .into_iter()
            .enumerate()
            .map(|(i, p)| LabeledBox {
                label: format!("#{}", i + 1),
                corners: pixel_corners(p.bbox, self.image.size),
                score: p.score,
                best_iou: self.best_iou(p.bbox),
            })
            .collect()
    }
}

#[derive(Debug, Serialize, PartialEq)]
pub struct Overlap {
    pub iou: f64,
    pub giou: f64,
    /// Sum of absolute differences of (cx, cy, w, h).
    pub l1: f64,
    /// Default-weighted box part of the matching cost.
    pub cost: f64,
}

/// IoU, GIoU and regression costs of two boxes given as normalized corners
/// `[x0, y0, x1, y1]`.
pub fn overlap(a: [f32; 4], b: [f32; 4]) -> pretrain_lab::Result<Overlap> {
    let (xa, xb) = (BoxXYXY::new(a[0], a[1], a[2], a[3]), BoxXYXY::new(b[0], b[1], b[2], b[3]));
    let (iou, g) = giou(xa, xb)?;
    let (l1, giou_cost) = box_cost(xa.to_cxcywh()?, xb.to_cxcywh()?)?;
    let w = pretrain_lab::matching::LossWeights::default();
    Ok(Overlap {
        iou,
        giou: g,
        l1,
        cost: w.l1 * l1 + w.giou * giou_cost,
    })
}

/// JSON [`Overlap`] for two corner boxes (8 numbers: a then b).
#[wasm_bindgen]
pub fn box_overlap(corners: &[f32]) -> Result<String, JsError> {
    if corners.len() != 8 {
        return Err(JsError::new("expected 8 numbers"));
    }
    let a = [corners[0], corners[1], corners[2], corners[3]];
    let b = [corners[4], corners[5], corners[6], corners[7]];
    let o = overlap(a, b).map_err(js_err)?;
    Ok(serde_json::to_string(&o).expect("serializable"))
}

#[derive(Debug, Serialize, PartialEq)]
pub struct Solution {
    /// Column assigned to each row.
    pub pairs: Vec<usize>,
    pub cost: f64,
}

pub fn solve(cost: &[f64], rows: usize, cols: usize) -> pretrain_lab::Result<Solution> {
    if cost.len() != rows * cols {
        return Err(pretrain_lab::Error::Shape(format!("{} values for a {rows}x{cols} matrix", cost.len())));
    }
    let matrix: Vec<Vec<f64>> = cost.chunks(cols.max(1)).take(rows).map(<[f64]>::to_vec).collect();
    let a = hungarian_assign(&matrix)?;
    Ok(Solution {
        pairs: a.pairs,
        cost: a.cost,
    })
}

/// JSON [`Solution`] for a row-major `rows × cols` cost matrix.
#[wasm_bindgen]
pub fn assign(cost: &[f64], rows: usize, cols: usize) -> Result<String, JsError> {
    let s = solve(cost, rows, cols).map_err(js_err)?;
    Ok(serde_json::to_string(&s).expect("serializable"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scene_view_is_deterministic_and_consistent() {
        let a = SceneView::new(7, 2, 6, 0.06).unwrap();
        let b = SceneView::new(7, 2, 6, 0.06).unwrap();
        assert_eq!(a.rgba(), b.rgba());
        assert_eq!(a.rgba().len(), 64 * 64 * 4);
        let truth = a.truth_boxes();
        assert!((2..=6).contains(&truth.len()));
        assert!(truth.iter().all(|t| t.corners[0] < t.corners[2] && t.corners[2] <= 64.0));
        let props = a.proposal_boxes(10, 1);
        assert!(!props.is_empty() && props.len() <= 10);
        assert!(props.windows(2).all(|w| w[0].score >= w[1].score));
        let r = a.recall(10, 1);
        assert!((0.0..=1.0).contains(&r));
    }

    #[test]
    fn overlap_of_half_shifted_boxes() {
        // Unit-height boxes [0,0.4] and [0.2,0.6]: inter 0.2, union 0.6,
        // enclosure 0.6 → IoU = GIoU = 1/3.
        let o = overlap([0.0, 0.0, 0.4, 1.0], [0.2, 0.0, 0.6, 1.0]).unwrap();
        assert!((o.iou - 1.0 / 3.0).abs() < 1e-6);
        assert!((o.giou - 1.0 / 3.0).abs() < 1e-6);
        assert!((o.l1 - 0.2).abs() < 1e-6);
        let apart = overlap([0.0, 0.0, 0.2, 0.2], [0.6, 0.6, 0.8, 0.8]).unwrap();
        assert_eq!(apart.iou, 0.0);
        assert!(apart.giou < 0.0);
        assert!(overlap([0.1, 0.1, 0.1, 0.3], [0.0, 0.0, 1.0, 1.0]).is_err());
    }

    #[test]
    fn solve_picks_the_cheap_diagonal() {
        let s = solve(&[1.0, 9.0, 9.0, 9.0, 1.0, 9.0], 2, 3).unwrap();
        assert_eq!(s.pairs, vec![0, 1]);
        assert_eq!(s.cost, 2.0);
        assert!(solve(&[1.0, 2.0], 2, 2).is_err());
    }
}
