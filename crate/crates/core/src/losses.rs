//! Padded target sets for each pre-training scheme and the set-prediction
//! loss built on top of a fixed assignment.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Differentiable, Graph, NodeId, Scalar, Tensor};
use crate::boxops::BoxCxCyWH;
use crate::error::{Error, Result};
use crate::matching::{hungarian_assign, matching_cost_matrix, Assignment, LossWeights};
use crate::model::{forward_graph, patchify, ForwardNodes, ModelConfig, ModelParams, PredictionSet};
use crate::scenes::{GroundTruthSet, SceneImage};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    Detreg,
    DetregPseudoBox,
    SelfTrain,
    Supervised,
}

impl Scheme {
    pub const ALL: [Scheme; 4] = [Scheme::Detreg, Scheme::DetregPseudoBox, Scheme::SelfTrain, Scheme::Supervised];

    /// Class-agnostic object/no-object head plus embedding reconstruction.
    pub fn is_detreg_family(self) -> bool {
        matches!(self, Scheme::Detreg | Scheme::DetregPseudoBox)
    }

    pub fn name(self) -> &'static str {
        match self {
            Scheme::Detreg => "detreg",
            Scheme::DetregPseudoBox => "detreg_pseudo_box",
            Scheme::SelfTrain => "self_train",
            Scheme::Supervised => "supervised",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| Error::Invalid(format!("unknown scheme {s}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TargetClass {
    NoObject,
    Object,
    Class(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainTarget {
    pub class: TargetClass,
    pub bbox: Option<BoxCxCyWH>,
    pub embedding: Option<Vec<f32>>,
}

/// One raw target before ordering and padding.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetSource {
    pub bbox: BoxCxCyWH,
    pub score: f32,
    pub class: Option<usize>,
    pub embedding: Option<Vec<f32>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainTargetSet {
    pub scheme: Scheme,
    /// Exactly `k` entries; `[0, real)` are real, the rest no-object.
    pub entries: Vec<PretrainTarget>,
    pub real: usize,
}

impl PretrainTargetSet {
    /// Head index of entry `j` for a head whose no-object logit is `no_object`.
    pub fn class_index(&self, j: usize, no_object: usize) -> usize {
        match self.entries[j].class {
            TargetClass::NoObject => no_object,
            TargetClass::Object => 0,
            TargetClass::Class(c) => c,
        }
    }

    pub fn real_entries(&self, no_object: usize) -> Vec<(usize, BoxCxCyWH)> {
        (0..self.real)
            .map(|j| (self.class_index(j, no_object), self.entries[j].bbox.expect("real entries carry a box")))
            .collect()
    }
}

/// Orders sources by descending score (stable) and pads with no-object to `k`.
pub fn build_targets(scheme: Scheme, mut sources: Vec<TargetSource>, k: usize, embed_dim: usize) -> Result<PretrainTargetSet> {
    if sources.len() > k {
        return Err(Error::TooManyTargets {
            rows: sources.len(),
            cols: k,
        });
    }
    sources.sort_by(|a, b| b.score.total_cmp(&a.score));
    let mut entries = Vec::with_capacity(k);
    for s in &sources {
        s.bbox.validate()?;
        let entry = if scheme.is_detreg_family() {
            let e = s
                .embedding
                .clone()
                .ok_or_else(|| Error::Invalid(format!("{} targets need crop embeddings", scheme.name())))?;
            if e.len() != embed_dim {
                return Err(Error::Shape(format!("embedding has {} dims, expected {embed_dim}", e.len())));
            }
            PretrainTarget {
                class: TargetClass::Object,
                bbox: Some(s.bbox),
                embedding: Some(e),
            }
        } else {
            let c = s
                .class
                .ok_or_else(|| Error::Invalid(format!("{} targets need class ids", scheme.name())))?;
            PretrainTarget {
                class: TargetClass::Class(c),
                bbox: Some(s.bbox),
                embedding: None,
            }
        };
        entries.push(entry);
    }
    let real = entries.len();
    entries.resize(
        k,
        PretrainTarget {
            class: TargetClass::NoObject,
            bbox: None,
            embedding: None,
        },
    );
    Ok(PretrainTargetSet { scheme, entries, real })
}

pub fn ground_truth_sources(gt: &GroundTruthSet) -> Vec<TargetSource> {
    gt.objects
        .iter()
        .map(|&(c, b)| TargetSource {
            bbox: b,
            score: 1.0,
            class: Some(c),
            embedding: None,
        })
        .collect()
}

/// Per-term values, each already divided by `max(m, 1)`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub class: f64,
    pub boxes: f64,
    pub embedding: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct LossNodes {
    pub total: NodeId,
    pub class: NodeId,
    pub boxes: Option<NodeId>,
    pub embedding: Option<NodeId>,
}

impl LossNodes {
    pub fn breakdown<T: Scalar>(&self, g: &Graph<T>) -> LossBreakdown {
        let v = |n: Option<NodeId>| n.map_or(0.0, |n| g.value(n).item().as_f64());
        LossBreakdown {
            total: v(Some(self.total)),
            class: v(Some(self.class)),
            boxes: v(self.boxes),
            embedding: v(self.embedding),
        }
    }
}

fn check_assignment(targets: &PretrainTargetSet, assign: &Assignment, k: usize) -> Result<()> {
    if targets.entries.len() != k {
        return Err(Error::Shape(format!(
            "{} targets for {k} predictions",
            targets.entries.len()
        )));
    }
    if assign.pairs.len() != targets.real {
        return Err(Error::Invalid(format!(
            "assignment covers {} targets, set has {}",
            assign.pairs.len(),
            targets.real
        )));
    }
    let mut seen = vec![false; k];
    for &q in &assign.pairs {
        if q >= k || std::mem::replace(&mut seen[q], true) {
            return Err(Error::Invalid(format!("assignment {:?} is not injective into {k}", assign.pairs)));
        }
    }
    Ok(())
}

/// Records the loss for a fixed assignment on top of a forward pass.
pub fn loss_graph<T: Scalar>(
    g: &mut Graph<T>,
    out: &ForwardNodes,
    targets: &PretrainTargetSet,
    assign: &Assignment,
    weights: &LossWeights,
) -> Result<LossNodes> {
    let logits = g.value(out.logits);
    let (k, outputs) = (logits.rows(), logits.cols());
    check_assignment(targets, assign, k)?;
    let no_object = outputs - 1;
    let m = targets.real;

    let mut class_targets = vec![no_object; k];
    let mut class_weights = vec![T::of(weights.no_object); k];
    for (j, &q) in assign.pairs.iter().enumerate() {
        let c = targets.class_index(j, no_object);
        if c >= no_object {
            return Err(Error::Invalid(format!("target class {c} does not fit a {outputs}-way head")));
        }
        class_targets[q] = c;
        class_weights[q] = T::one();
    }
    let norm = T::of(1.0 / m.max(1) as f64);
    let ce = g.cross_entropy(out.logits, &class_targets, &class_weights);
    let class = g.scale(ce, T::of(weights.class) * norm);
    let mut total = class;

    let mut boxes = None;
    let mut embedding = None;
    if m > 0 {
        let rows: Vec<Vec<T>> = (0..m)
            .map(|j| targets.entries[j].bbox.expect("real").to_array().iter().map(|&v| T::of(v as f64)).collect())
            .collect();
        let target_boxes = Tensor::from_rows(&rows)?;
        let matched = g.gather(out.boxes, &assign.pairs);
        let l1 = g.l1(matched, target_boxes.clone());
        let l1 = g.scale(l1, T::of(weights.l1) * norm);
        let gi = g.giou_loss(matched, target_boxes);
        let gi = g.scale(gi, T::of(weights.giou) * norm);
        let b = g.add(l1, gi);
        total = g.add(total, b);
        boxes = Some(b);

        if targets.scheme.is_detreg_family() {
            let rows: Vec<Vec<T>> = (0..m)
                .map(|j| {
                    let e = targets.entries[j].embedding.as_ref().expect("detreg targets carry embeddings");
                    e.iter().map(|&v| T::of(v as f64)).collect()
                })
                .collect();
            let target_emb = Tensor::from_rows(&rows)?;
            if target_emb.cols() != g.value(out.embeddings).cols() {
                return Err(Error::Shape("embedding target width differs from the head".into()));
            }
            let matched = g.gather(out.embeddings, &assign.pairs);
            let e = g.l1(matched, target_emb);
            let e = g.scale(e, T::of(weights.embedding) * norm);
            total = g.add(total, e);
            embedding = Some(e);
        }
    }
    Ok(LossNodes {
        total,
        class,
        boxes,
        embedding,
    })
}

fn constant_forward(g: &mut Graph<f64>, preds: &PredictionSet) -> ForwardNodes {
    ForwardNodes {
        logits: g.input(preds.logits.cast()),
        boxes: g.input(preds.boxes.cast()),
        embeddings: g.input(preds.embeddings.cast()),
    }
}

/// Loss value for fixed predictions and a fixed assignment.
pub fn pretrain_loss(
    targets: &PretrainTargetSet,
    preds: &PredictionSet,
    assign: &Assignment,
    weights: &LossWeights,
) -> Result<LossBreakdown> {
    let mut g = Graph::<f64>::new();
    let out = constant_forward(&mut g, preds);
    let nodes = loss_graph(&mut g, &out, targets, assign, weights)?;
    Ok(nodes.breakdown(&g))
}

/// Ground-truth loss: the multiclass target set with no embedding term.
pub fn downstream_loss(
    gt: &GroundTruthSet,
    preds: &PredictionSet,
    assign: &Assignment,
    weights: &LossWeights,
) -> Result<LossBreakdown> {
    let targets = build_targets(Scheme::Supervised, ground_truth_sources(gt), preds.len(), preds.embeddings.cols())?;
    pretrain_loss(&targets, preds, assign, weights)
}

/// Optimal assignment of the real targets to `preds`.
pub fn assign_targets(targets: &PretrainTargetSet, preds: &PredictionSet, weights: &LossWeights) -> Result<Assignment> {
    let no_object = preds.logits.cols() - 1;
    let real = targets.real_entries(no_object);
    if real.is_empty() {
        return hungarian_assign(&[]);
    }
    hungarian_assign(&matching_cost_matrix(&real, preds, weights)?)
}

/// Result of one forward/backward pass on one image.
pub struct StepOutput {
    pub loss: LossBreakdown,
    /// Gradients for the trainable tensors, in tensor order.
    pub grads: Vec<Tensor<f32>>,
    pub assignment: Assignment,
}

/// Forward, match, and backpropagate one image.
pub fn detector_step(
    params: &ModelParams,
    img: &SceneImage,
    targets: &PretrainTargetSet,
    weights: &LossWeights,
) -> Result<StepOutput> {
    let mut g = Graph::<f32>::new();
    let ids = params.record(&mut g);
    let x = g.input(patchify(img, params.config.patch));
    let out = forward_graph(&mut g, &params.config, &ids, x);
    g.check_finite()?;
    let preds = PredictionSet::from_graph(&g, &out);
    let assignment = assign_targets(targets, &preds, weights)?;
    let nodes = loss_graph(&mut g, &out, targets, &assignment, weights)?;
    let (_, grads) = g.forward_backward(nodes.total)?;
    Ok(StepOutput {
        loss: nodes.breakdown(&g),
        grads,
        assignment,
    })
}

/// The detector loss as a function of every model tensor, with the image,
/// targets and assignment held fixed.
pub struct DetectorObjective {
    pub config: ModelConfig,
    pub patches: Tensor<f64>,
    pub targets: PretrainTargetSet,
    pub assignment: Assignment,
    pub weights: LossWeights,
}

impl DetectorObjective {
    pub fn new(params: &ModelParams, img: &SceneImage, targets: PretrainTargetSet, weights: LossWeights) -> Result<Self> {
        let preds = crate::model::forward(params, img)?;
        let assignment = assign_targets(&targets, &preds, &weights)?;
        Ok(Self {
            config: params.config.clone(),
            patches: patchify(img, params.config.patch),
            targets,
            assignment,
            weights,
        })
    }
}

impl Differentiable for DetectorObjective {
    fn build<T: Scalar>(&self, g: &mut Graph<T>, params: &[NodeId]) -> NodeId {
        let x = g.input(self.patches.cast());
        let out = forward_graph(g, &self.config, params, x);
        loss_graph(g, &out, &self.targets, &self.assignment, &self.weights)
            .expect("objective validated at construction")
            .total
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn src(cx: f32, score: f32, class: Option<usize>, emb: Option<Vec<f32>>) -> TargetSource {
        TargetSource {
            bbox: BoxCxCyWH::new(cx, 0.5, 0.2, 0.2),
            score,
            class,
            embedding: emb,
        }
    }

    /// Predictions that realize `targets` exactly on queries `0..m`.
    fn perfect(targets: &PretrainTargetSet, outputs: usize, d: usize) -> PredictionSet {
        let k = targets.entries.len();
        let no_object = outputs - 1;
        let mut logits = vec![vec![-60.0f32; outputs]; k];
        let mut boxes = vec![vec![0.5f32, 0.5, 0.1, 0.1]; k];
        let mut emb = vec![vec![0.0f32; d]; k];
        for q in 0..k {
            logits[q][targets.class_index(q, no_object)] = 60.0;
            if let Some(b) = targets.entries[q].bbox {
                boxes[q] = b.to_array().to_vec();
            }
            if let Some(e) = &targets.entries[q].embedding {
                emb[q] = e.clone();
            }
        }
        PredictionSet {
            logits: Tensor::from_rows(&logits).unwrap(),
            boxes: Tensor::from_rows(&boxes).unwrap(),
            embeddings: Tensor::from_rows(&emb).unwrap(),
        }
    }

    #[test]
    fn padding_and_ordering() {
        let s = vec![src(0.2, 0.1, Some(1), None), src(0.5, 0.9, Some(2), None), src(0.8, 0.5, Some(0), None)];
        let t = build_targets(Scheme::SelfTrain, s, 25, 8).unwrap();
        assert_eq!(t.real, 3);
        assert_eq!(t.entries.len(), 25);
        assert!(t.entries[3..].iter().all(|e| e.class == TargetClass::NoObject && e.bbox.is_none()));
        let classes: Vec<_> = t.entries[..3].iter().map(|e| e.class).collect();
        assert_eq!(classes, vec![TargetClass::Class(2), TargetClass::Class(0), TargetClass::Class(1)]);
        assert!(t.entries.iter().all(|e| e.embedding.is_none()));
    }

    #[test]
    fn detreg_targets_are_binary_with_embeddings() {
        let s = vec![src(0.3, 1.0, None, Some(vec![0.5; 8])), src(0.6, 0.5, None, Some(vec![0.1; 8]))];
        let t = build_targets(Scheme::Detreg, s.clone(), 10, 8).unwrap();
        for e in &t.entries[..2] {
            assert_eq!(e.class, TargetClass::Object);
            assert_eq!(e.embedding.as_ref().unwrap().len(), 8);
        }
        assert!(build_targets(Scheme::Detreg, s.clone(), 10, 4).is_err());
        assert!(build_targets(Scheme::SelfTrain, s.clone(), 10, 8).is_err());
        assert!(matches!(build_targets(Scheme::Detreg, s, 1, 8), Err(Error::TooManyTargets { .. })));
    }

    #[test]
    fn perfect_predictions_cost_nothing() {
        let w = LossWeights::default();
        let s = vec![src(0.3, 1.0, None, Some(vec![0.5; 4])), src(0.7, 0.5, None, Some(vec![-0.2; 4]))];
        let t = build_targets(Scheme::Detreg, s, 6, 4).unwrap();
        let p = perfect(&t, 2, 4);
        let a = assign_targets(&t, &p, &w).unwrap();
        assert_eq!(a.pairs, vec![0, 1]);
        let l = pretrain_loss(&t, &p, &a, &w).unwrap();
        assert!(l.total.abs() < 1e-12, "{l:?}");
    }

    #[test]
    fn all_no_object_uniform_logits() {
        let w = LossWeights::default();
        let t = build_targets(Scheme::Supervised, vec![], 25, 4).unwrap();
        let p = PredictionSet {
            logits: Tensor::zeros(&[25, 7]),
            boxes: Tensor::new(vec![25, 4], vec![0.5; 100]).unwrap(),
            embeddings: Tensor::zeros(&[25, 4]),
        };
        let a = assign_targets(&t, &p, &w).unwrap();
        let l = pretrain_loss(&t, &p, &a, &w).unwrap();
        let per_query = l.total / 25.0;
        assert!((per_query - 0.1 * 2.0 * 7f64.ln()).abs() < 1e-12);
        assert_eq!(l.boxes, 0.0);
    }

    #[test]
    fn one_pair_box_terms() {
        // target (0,0)-(0.5,1) against prediction (0.05,0)-(0.45,1): L1 gap 0.1, GIoU 0.8
        let w = LossWeights::default();
        let gt = GroundTruthSet {
            objects: vec![(3, BoxCxCyWH::new(0.25, 0.5, 0.5, 1.0))],
        };
        let mut logits = vec![vec![-60.0f32; 7]; 2];
        logits[0][3] = 60.0;
        logits[1][6] = 60.0;
        let p = PredictionSet {
            logits: Tensor::from_rows(&logits).unwrap(),
            boxes: Tensor::from_rows(&[vec![0.25, 0.5, 0.4, 1.0], vec![0.9, 0.9, 0.1, 0.1]]).unwrap(),
            embeddings: Tensor::zeros(&[2, 4]),
        };
        let a = Assignment {
            pairs: vec![0],
            cost: 0.0,
        };
        let l = downstream_loss(&gt, &p, &a, &w).unwrap();
        assert!((l.total - (5.0 * 0.1 + 2.0 * 0.2)).abs() < 1e-6, "{l:?}");
    }

    #[test]
    fn downstream_equals_self_training_on_ground_truth() {
        let w = LossWeights::default();
        let gt = GroundTruthSet {
            objects: vec![(1, BoxCxCyWH::new(0.3, 0.4, 0.2, 0.3)), (4, BoxCxCyWH::new(0.7, 0.6, 0.3, 0.2))],
        };
        let p = PredictionSet {
            logits: Tensor::from_rows(&[vec![0.3; 7], vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7], vec![0.0; 7]]).unwrap(),
            boxes: Tensor::from_rows(&[vec![0.3, 0.3, 0.2, 0.2], vec![0.6, 0.6, 0.3, 0.3], vec![0.5, 0.5, 0.5, 0.5]]).unwrap(),
            embeddings: Tensor::zeros(&[3, 4]),
        };
        let t = build_targets(Scheme::SelfTrain, ground_truth_sources(&gt), 3, 4).unwrap();
        let a = assign_targets(&t, &p, &w).unwrap();
        let ds = downstream_loss(&gt, &p, &a, &w).unwrap();
        let st = pretrain_loss(&t, &p, &a, &w).unwrap();
        assert_eq!(ds.total.to_bits(), st.total.to_bits());
    }

    #[test]
    fn invalid_assignments_rejected() {
        let w = LossWeights::default();
        let t = build_targets(Scheme::SelfTrain, vec![src(0.3, 1.0, Some(0), None)], 2, 4).unwrap();
        let p = perfect(&t, 7, 4);
        let dup = Assignment { pairs: vec![5], cost: 0.0 };
        assert!(pretrain_loss(&t, &p, &dup, &w).is_err());
        let short = Assignment { pairs: vec![], cost: 0.0 };
        assert!(pretrain_loss(&t, &p, &short, &w).is_err());
    }
}
