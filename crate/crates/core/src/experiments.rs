//! End-to-end pipeline: data, teacher, pseudo-labels, pre-training,
//! fine-tuning, evaluation, and matrix reports.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{AdamConfig, OptimState, Tensor};
use crate::boxops::{BoxCxCyWH, BoxXYXY};
use crate::error::{Error, Result};
use crate::evaluator::{evaluate_detections, evaluate_recall, fmt_cell, Detection, MetricsTable};
use crate::losses::{build_targets, detector_step, ground_truth_sources, LossBreakdown, PretrainTargetSet, Scheme, TargetSource};
use crate::matching::LossWeights;
use crate::model::{crop_embed, forward, init_model, transfer, Component, ModelConfig, ModelParams, PredictionSet};
use crate::proposals::{propose_boxes, ProposalConfig};
use crate::scenes::{generate, mix_seed, Annotation, Category, Dataset, DatasetManifest, SceneSpec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Fraction of `epochs` after which the learning rate is multiplied by
    /// `drop_factor`.
    pub drop_at: f64,
    pub drop_factor: f64,
    /// Global L2 norm the batch gradient is rescaled to when it exceeds it.
    pub clip_norm: Option<f64>,
    /// Optimizer steps over which the learning rate ramps up linearly.
    pub warmup_steps: usize,
}

impl Schedule {
    pub fn new(epochs: usize) -> Self {
        Self {
            epochs,
            batch_size: 16,
            lr: 1e-3,
            drop_at: 0.8,
            drop_factor: 0.1,
            clip_norm: Some(0.1),
            warmup_steps: 50,
        }
    }

    /// Learning rate for optimizer step `step` (counted from 0) in `epoch`.
    pub fn lr_at_step(&self, epoch: usize, step: usize) -> f64 {
        let ramp = if step < self.warmup_steps {
            (step + 1) as f64 / self.warmup_steps as f64
        } else {
            1.0
        };
        self.lr_at(epoch) * ramp
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        if (epoch as f64) >= (self.drop_at * self.epochs as f64).floor() && self.drop_at < 1.0 {
            self.lr * self.drop_factor
        } else {
            self.lr
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    pub pretrain_images: usize,
    pub train_images: usize,
    pub eval_images: usize,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            pretrain_images: 2000,
            train_images: 500,
            eval_images: 300,
            seed: 0,
        }
    }
}

/// How the fine-tuned model is initialized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Recipe {
    FromScratch,
    Pretrained(Scheme),
}

impl Recipe {
    pub const ALL: [Recipe; 5] = [
        Recipe::Pretrained(Scheme::Supervised),
        Recipe::Pretrained(Scheme::SelfTrain),
        Recipe::Pretrained(Scheme::DetregPseudoBox),
        Recipe::Pretrained(Scheme::Detreg),
        Recipe::FromScratch,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Recipe::FromScratch => "from_scratch",
            Recipe::Pretrained(s) => s.name(),
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "from_scratch" | "from-scratch" | "scratch" => Ok(Recipe::FromScratch),
            other => Scheme::parse(&other.replace('-', "_")).map(Recipe::Pretrained),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub scene: SceneSpec,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub weights: LossWeights,
    pub recipe: Recipe,
    pub teacher: Schedule,
    pub pretrain: Schedule,
    pub finetune: Schedule,
    pub teacher_seed: u64,
    pub model_seed: u64,
    pub train_seed: u64,
    /// Pseudo-boxes or proposals kept per pre-training image.
    pub pseudo_count: usize,
    pub proposals: ProposalConfig,
    pub components: BTreeSet<Component>,
    pub fraction: f64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            scene: SceneSpec::default(),
            data: DataConfig::default(),
            model: ModelConfig::default(),
            weights: LossWeights::default(),
            recipe: Recipe::Pretrained(Scheme::SelfTrain),
            teacher: Schedule::new(100),
            pretrain: Schedule::new(20),
            finetune: Schedule::new(30),
            teacher_seed: 0,
            model_seed: 1,
            train_seed: 1,
            pseudo_count: 10,
            proposals: ProposalConfig::default(),
            components: Component::ALL.into_iter().collect(),
            fraction: 1.0,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.scene.validate()?;
        self.model.validate()?;
        self.weights.validate()?;
        if self.pseudo_count == 0 || self.pseudo_count > self.model.queries {
            return Err(Error::Invalid(format!(
                "pseudo count {} must be in 1..={}",
                self.pseudo_count, self.model.queries
            )));
        }
        if self.scene.max_objects > self.model.queries {
            return Err(Error::Invalid("scenes can hold more objects than the model has queries".into()));
        }
        if self.model.classes != self.scene.classes {
            return Err(Error::Invalid("model and scene class counts differ".into()));
        }
        if !(self.fraction > 0.0 && self.fraction <= 1.0) {
            return Err(Error::Invalid(format!("fraction {} outside (0, 1]", self.fraction)));
        }
        for s in [&self.teacher, &self.pretrain, &self.finetune] {
            if s.batch_size == 0 || !(s.lr > 0.0) {
                return Err(Error::Invalid(format!("bad schedule {s:?}")));
            }
        }
        Ok(())
    }

    /// Hex SHA-256 of the config's canonical JSON (keys sorted).
    pub fn hash(&self) -> String {
        let value = serde_json::to_value(self).expect("config serializes");
        let bytes = serde_json::to_vec(&value).expect("value serializes");
        let digest = Sha256::digest(&bytes);
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        Self {
            model_seed: seed,
            train_seed: seed,
            ..self.clone()
        }
    }

    /// Model shape used for pre-training: a one-class head for the
    /// object/no-object schemes, otherwise the downstream head.
    pub fn pretrain_model(&self, scheme: Scheme) -> ModelConfig {
        let classes = if scheme.is_detreg_family() { 1 } else { self.model.classes };
        ModelConfig {
            classes,
            seed: self.model_seed,
            ..self.model.clone()
        }
    }

    pub fn downstream_model(&self) -> ModelConfig {
        ModelConfig {
            seed: self.model_seed,
            ..self.model.clone()
        }
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let cfg: Self = serde_json::from_slice(&bytes)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// The three corpora every run shares.
#[derive(Debug, Clone)]
pub struct Corpora {
    pub pretrain: Dataset,
    pub train: Dataset,
    pub eval: Dataset,
}

pub fn generate_corpora(cfg: &ExperimentConfig) -> Result<Corpora> {
    let d = &cfg.data;
    let id = format!("scenes-{}", d.seed);
    Ok(Corpora {
        pretrain: generate(&cfg.scene, d.pretrain_images, mix_seed(d.seed, 1_000_001), &id, "pretrain")?,
        train: generate(&cfg.scene, d.train_images, mix_seed(d.seed, 1_000_002), &id, "train")?,
        eval: generate(&cfg.scene, d.eval_images, mix_seed(d.seed, 1_000_003), &id, "eval")?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub loss: LossBreakdown,
}

/// Optimizes the trainable tensors of `params` against fixed per-image targets.
pub fn train(
    params: &mut ModelParams,
    data: &Dataset,
    targets: &[PretrainTargetSet],
    schedule: &Schedule,
    weights: &LossWeights,
    seed: u64,
) -> Result<Vec<EpochLog>> {
    if targets.len() != data.len() {
        return Err(Error::Shape(format!("{} target sets for {} images", targets.len(), data.len())));
    }
    let trainable = params.trainable_indices();
    let mut opt = {
        let refs: Vec<&Tensor<f32>> = trainable.iter().map(|&i| &params.tensors[i].value).collect();
        OptimState::new(
            AdamConfig {
                lr: schedule.lr as f32,
                ..AdamConfig::default()
            },
            &refs,
        )
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut logs = Vec::with_capacity(schedule.epochs);
    let mut global_step = 0;
    for epoch in 0..schedule.epochs {
        let lr = schedule.lr_at(epoch);
        order.shuffle(&mut rng);
        let mut sum = LossBreakdown::default();
        for (step, batch) in order.chunks(schedule.batch_size).enumerate() {
            let mut acc: Vec<Tensor<f32>> = trainable
                .iter()
                .map(|&i| Tensor::zeros(params.tensors[i].value.shape()))
                .collect();
            for &i in batch {
                let out = detector_step(params, &data.images[i], &targets[i], weights).map_err(|e| Error::Diverged {
                    epoch,
                    step,
                    reason: e.to_string(),
                })?;
                if !out.loss.total.is_finite() {
                    return Err(Error::Diverged {
                        epoch,
                        step,
                        reason: format!("loss {}", out.loss.total),
                    });
                }
                for (a, g) in acc.iter_mut().zip(&out.grads) {
                    a.data_mut().iter_mut().zip(g.data()).for_each(|(x, y)| *x += y);
                }
                sum.total += out.loss.total;
                sum.class += out.loss.class;
                sum.boxes += out.loss.boxes;
                sum.embedding += out.loss.embedding;
            }
            let mut scale = 1.0 / batch.len() as f64;
            if let Some(max) = schedule.clip_norm {
                let sq: f64 = acc.iter().flat_map(|a| a.data()).map(|&v| (v as f64).powi(2)).sum();
                let norm = sq.sqrt() * scale;
                if norm > max {
                    scale *= max / norm;
                }
            }
            for a in &mut acc {
                a.data_mut().iter_mut().for_each(|v| *v *= scale as f32);
            }
            let mut refs: Vec<&mut Tensor<f32>> = Vec::with_capacity(trainable.len());
            let mut rest: &mut [crate::model::NamedTensor] = &mut params.tensors;
            let mut offset = 0;
            for &i in &trainable {
                let (_, tail) = rest.split_at_mut(i - offset);
                let (head, tail) = tail.split_at_mut(1);
                refs.push(&mut head[0].value);
                rest = tail;
                offset = i + 1;
            }
            opt.adam_step(&mut refs, &acc, schedule.lr_at_step(epoch, global_step) as f32)?;
            global_step += 1;
        }
        let n = data.len() as f64;
        logs.push(EpochLog {
            epoch,
            lr,
            loss: LossBreakdown {
                total: sum.total / n,
                class: sum.class / n,
                boxes: sum.boxes / n,
                embedding: sum.embedding / n,
            },
        });
    }
    Ok(logs)
}

pub fn ground_truth_targets(data: &Dataset, cfg: &ModelConfig) -> Result<Vec<PretrainTargetSet>> {
    data.manifest
        .ground_truth()
        .iter()
        .map(|gt| build_targets(Scheme::Supervised, ground_truth_sources(gt), cfg.queries, cfg.embed_dim))
        .collect()
}

/// Supervised detector on the labeled split; also the pseudo-label source.
pub fn train_teacher(cfg: &ExperimentConfig, train_split: &Dataset) -> Result<(ModelParams, Vec<EpochLog>)> {
    let mc = ModelConfig {
        seed: cfg.teacher_seed,
        ..cfg.model.clone()
    };
    let mut params = init_model(&mc)?;
    params.frozen.clear();
    let targets = ground_truth_targets(train_split, &mc)?;
    let logs = train(&mut params, train_split, &targets, &cfg.teacher, &cfg.weights, cfg.teacher_seed)?;
    Ok((params, logs))
}

/// One detection per query: best foreground class and its probability.
pub fn detections_from(preds: &PredictionSet, image_id: u64) -> Vec<Detection> {
    let fg = preds.logits.cols() - 1;
    (0..preds.len())
        .map(|q| {
            let p = preds.probs(q);
            let (class, conf) = p[..fg]
                .iter()
                .enumerate()
                .fold((0, f32::MIN), |best, (c, &v)| if v > best.1 { (c, v) } else { best });
            Detection {
                image_id,
                class,
                bbox: preds.bbox(q),
                confidence: conf,
            }
        })
        .collect()
}

/// Clips a predicted box to the frame; `None` if under 4 pixels remain.
fn clip_box(b: BoxCxCyWH, image_size: usize) -> Option<BoxCxCyWH> {
    let x: BoxXYXY = b.to_xyxy().ok()?;
    let s = image_size as f32;
    if (x.x1 - x.x0) * (x.y1 - x.y0) * s * s < 4.0 {
        return None;
    }
    x.to_cxcywh().ok()
}

/// One teacher pass over `corpus`: per image, drop queries whose argmax is
/// no-object and keep the `count` most confident of the rest.
pub fn pseudo_label(teacher: &ModelParams, corpus: &Dataset, count: usize) -> Result<DatasetManifest> {
    if corpus.image_size() != teacher.config.image_size {
        return Err(Error::Dataset("corpus image size differs from the teacher's".into()));
    }
    let mut manifest = corpus.manifest.clone();
    manifest.annotations.clear();
    manifest.info.split = format!("{}-pseudo", corpus.manifest.info.split);
    let no_object = teacher.config.no_object();
    for img in &corpus.images {
        let preds = forward(teacher, img)?;
        let mut kept: Vec<Detection> = detections_from(&preds, img.id)
            .into_iter()
            .enumerate()
            .filter(|(q, _)| {
                let p = preds.probs(*q);
                let arg = p.iter().enumerate().fold(0, |b, (i, &v)| if v > p[b] { i } else { b });
                arg != no_object
            })
            .filter_map(|(_, d)| clip_box(d.bbox, img.size).map(|bbox| Detection { bbox, ..d }))
            .collect();
        kept.sort_by(|a, b| b.confidence.total_cmp(&a.confidence));
        kept.truncate(count);
        for d in kept {
            manifest.annotations.push(Annotation {
                id: manifest.annotations.len() as u64,
                image_id: img.id,
                category_id: d.class,
                bbox: Annotation::pixel_bbox(d.bbox, img.size),
                score: Some(d.confidence),
            });
        }
    }
    Ok(manifest)
}

/// Ranked region proposals stored as class-agnostic annotations.
pub fn proposal_manifest(corpus: &Dataset, count: usize, config: &ProposalConfig, seed: u64) -> Result<DatasetManifest> {
    let mut manifest = corpus.manifest.clone();
    manifest.annotations.clear();
    manifest.info.split = format!("{}-proposals", corpus.manifest.info.split);
    manifest.categories = vec![Category {
        id: 0,
        name: "object".into(),
    }];
    for img in &corpus.images {
        for p in propose_boxes(img, count, mix_seed(seed, img.id), config) {
            manifest.annotations.push(Annotation {
                id: manifest.annotations.len() as u64,
                image_id: img.id,
                category_id: 0,
                bbox: Annotation::pixel_bbox(p.bbox, img.size),
                score: Some(p.score),
            });
        }
    }
    Ok(manifest)
}

/// Per-image pre-training targets from stored annotations. Detreg-family
/// schemes get crop embeddings from `params`' frozen backbone.
pub fn pretrain_targets(
    scheme: Scheme,
    corpus: &Dataset,
    sources: &DatasetManifest,
    params: &ModelParams,
) -> Result<Vec<PretrainTargetSet>> {
    let cfg = &params.config;
    let with_sources = corpus.with_annotations(sources.clone())?;
    let gts = with_sources.manifest.ground_truth();
    let scores = with_sources.manifest.scores();
    corpus
        .images
        .iter()
        .zip(gts.iter().zip(&scores))
        .map(|(img, (gt, sc))| {
            let src = gt
                .objects
                .iter()
                .zip(sc)
                .map(|(&(class, bbox), &score)| {
                    let embedding = if scheme.is_detreg_family() {
                        Some(crop_embed(params, img, bbox)?)
                    } else {
                        None
                    };
                    Ok(TargetSource {
                        bbox,
                        score,
                        class: (!scheme.is_detreg_family()).then_some(class),
                        embedding,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            build_targets(scheme, src, cfg.queries, cfg.embed_dim)
        })
        .collect()
}

/// Pre-trains with the backbone frozen.
pub fn pretrain(
    cfg: &ExperimentConfig,
    scheme: Scheme,
    corpus: &Dataset,
    sources: &DatasetManifest,
) -> Result<(ModelParams, Vec<EpochLog>)> {
    let mut params = init_model(&cfg.pretrain_model(scheme))?;
    params.frozen = BTreeSet::from([Component::Backbone]);
    let targets = pretrain_targets(scheme, corpus, sources, &params)?;
    let logs = train(&mut params, corpus, &targets, &cfg.pretrain, &cfg.weights, cfg.train_seed)?;
    Ok((params, logs))
}

/// Downstream model: the listed components of `init` (if any) on top of a
/// fresh init; every component trainable.
pub fn finetune_init(cfg: &ExperimentConfig, init: Option<&ModelParams>) -> Result<ModelParams> {
    let target = cfg.downstream_model();
    let mut params = match init {
        Some(p) => transfer(p, &cfg.components, &target)?,
        None => init_model(&target)?,
    };
    params.frozen.clear();
    Ok(params)
}

pub fn finetune(cfg: &ExperimentConfig, init: Option<&ModelParams>, train_split: &Dataset) -> Result<(ModelParams, Vec<EpochLog>)> {
    let data = if cfg.fraction < 1.0 {
        train_split.subsample(cfg.fraction, cfg.data.seed)?
    } else {
        train_split.clone()
    };
    let mut params = finetune_init(cfg, init)?;
    let targets = ground_truth_targets(&data, &params.config)?;
    let logs = train(&mut params, &data, &targets, &cfg.finetune, &cfg.weights, mix_seed(cfg.train_seed, 7))?;
    Ok((params, logs))
}

pub fn evaluate(params: &ModelParams, eval: &Dataset) -> Result<MetricsTable> {
    let mut dets = Vec::new();
    for img in &eval.images {
        dets.extend(detections_from(&forward(params, img)?, img.id));
    }
    let gt: Vec<_> = eval
        .manifest
        .images
        .iter()
        .map(|r| r.id)
        .zip(eval.manifest.ground_truth())
        .collect();
    evaluate_detections(&dets, &gt, params.config.classes, params.config.queries)
}

/// Class-agnostic AR of stored boxes (ranked by score) against ground truth.
pub fn annotation_recall(boxes: &DatasetManifest, gt: &DatasetManifest, at: &[usize]) -> Vec<f64> {
    let mut ranked: Vec<Vec<(f32, BoxCxCyWH)>> = vec![Vec::new(); gt.images.len()];
    let index: BTreeMap<u64, usize> = gt.images.iter().enumerate().map(|(i, r)| (r.id, i)).collect();
    for a in &boxes.annotations {
        if let Some(&i) = index.get(&a.image_id) {
            ranked[i].push((a.score.unwrap_or(1.0), a.to_box(gt.info.image_size)));
        }
    }
    let props: Vec<Vec<BoxCxCyWH>> = ranked
        .into_iter()
        .map(|mut v| {
            v.sort_by(|a, b| b.0.total_cmp(&a.0));
            v.into_iter().map(|(_, b)| b).collect()
        })
        .collect();
    evaluate_recall(&props, &gt.ground_truth(), at)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub config_hash: String,
    pub recipe: String,
    pub seed: u64,
    pub pretrain_log: Vec<EpochLog>,
    pub finetune_log: Vec<EpochLog>,
    pub metrics: MetricsTable,
    pub checkpoints: Vec<PathBuf>,
    pub wall_seconds: f64,
}

impl RunRecord {
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        fs::write(path, serde_json::to_vec_pretty(self)?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_slice(&bytes)?)
    }
}

/// Memoizes the shared artifacts of one data/teacher setup so that matrix
/// cells reuse corpora, the teacher, pseudo-labels and pre-trained weights.
pub struct Lab {
    pub base: ExperimentConfig,
    pub corpora: Corpora,
    teacher: Option<ModelParams>,
    pseudo: BTreeMap<usize, DatasetManifest>,
    proposals: BTreeMap<usize, DatasetManifest>,
    pretrained: BTreeMap<String, (ModelParams, Vec<EpochLog>)>,
    pub log: Vec<String>,
}

impl Lab {
    pub fn new(base: ExperimentConfig) -> Result<Self> {
        base.validate()?;
        let corpora = generate_corpora(&base)?;
        Ok(Self {
            base,
            corpora,
            teacher: None,
            pseudo: BTreeMap::new(),
            proposals: BTreeMap::new(),
            pretrained: BTreeMap::new(),
            log: Vec::new(),
        })
    }

    fn note(&mut self, msg: String) {
        eprintln!("[lab] {msg}");
        self.log.push(msg);
    }

    pub fn teacher(&mut self) -> Result<&ModelParams> {
        if self.teacher.is_none() {
            let t = Instant::now();
            let (p, logs) = train_teacher(&self.base, &self.corpora.train)?;
            let last = logs.last().map_or(0.0, |l| l.loss.total);
            self.note(format!("teacher trained in {:.0}s, final loss {last:.3}", t.elapsed().as_secs_f64()));
            self.teacher = Some(p);
        }
        Ok(self.teacher.as_ref().expect("set above"))
    }

    pub fn pseudo_labels(&mut self, count: usize) -> Result<&DatasetManifest> {
        if !self.pseudo.contains_key(&count) {
            let teacher = self.teacher()?.clone();
            let m = pseudo_label(&teacher, &self.corpora.pretrain, count)?;
            self.pseudo.insert(count, m);
        }
        Ok(&self.pseudo[&count])
    }

    pub fn proposals(&mut self, count: usize) -> Result<&DatasetManifest> {
        if !self.proposals.contains_key(&count) {
            let t = Instant::now();
            let m = proposal_manifest(&self.corpora.pretrain, count, &self.base.proposals, self.base.data.seed)?;
            self.note(format!("proposals ({count}/image) in {:.0}s", t.elapsed().as_secs_f64()));
            self.proposals.insert(count, m);
        }
        Ok(&self.proposals[&count])
    }

    /// Pre-trained weights for (scheme, seed, pseudo count), trained once.
    pub fn pretrained(&mut self, cfg: &ExperimentConfig, scheme: Scheme) -> Result<(ModelParams, Vec<EpochLog>)> {
        let key = format!("{}/{}/{}", scheme.name(), cfg.model_seed, cfg.pseudo_count);
        if !self.pretrained.contains_key(&key) {
            let sources = match scheme {
                Scheme::Detreg => self.proposals(cfg.pseudo_count)?.clone(),
                Scheme::DetregPseudoBox | Scheme::SelfTrain => self.pseudo_labels(cfg.pseudo_count)?.clone(),
                Scheme::Supervised => self.corpora.pretrain.manifest.clone(),
            };
            let t = Instant::now();
            let out = pretrain(cfg, scheme, &self.corpora.pretrain, &sources)?;
            self.note(format!("pretrain {key} in {:.0}s", t.elapsed().as_secs_f64()));
            self.pretrained.insert(key.clone(), out);
        }
        Ok(self.pretrained[&key].clone())
    }

    /// Pre-train (unless from scratch), fine-tune, evaluate.
    pub fn run(&mut self, cfg: &ExperimentConfig) -> Result<RunRecord> {
        cfg.validate()?;
        let start = Instant::now();
        let (init, pretrain_log) = match cfg.recipe {
            Recipe::FromScratch => (None, Vec::new()),
            Recipe::Pretrained(s) => {
                let (p, l) = self.pretrained(cfg, s)?;
                (Some(p), l)
            }
        };
        let (params, finetune_log) = finetune(cfg, init.as_ref(), &self.corpora.train)?;
        let metrics = evaluate(&params, &self.corpora.eval)?;
        self.note(format!(
            "run {} seed {} fraction {} components {:?}: AP {:.1}",
            cfg.recipe.name(),
            cfg.model_seed,
            cfg.fraction,
            cfg.components,
            100.0 * metrics.ap
        ));
        Ok(RunRecord {
            config_hash: cfg.hash(),
            recipe: cfg.recipe.name().to_string(),
            seed: cfg.model_seed,
            pretrain_log,
            finetune_log,
            metrics,
            checkpoints: Vec::new(),
            wall_seconds: start.elapsed().as_secs_f64(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Axis {
    Scheme(Vec<Recipe>),
    PseudoCount(Vec<usize>),
    Components(Vec<BTreeSet<Component>>),
    Fraction(Vec<f64>),
}

impl Axis {
    pub fn name(&self) -> &'static str {
        match self {
            Axis::Scheme(_) => "scheme",
            Axis::PseudoCount(_) => "pseudo_count",
            Axis::Components(_) => "components",
            Axis::Fraction(_) => "fraction",
        }
    }

    /// (cell label, config) for every axis value.
    pub fn cells(&self, base: &ExperimentConfig) -> Vec<(String, ExperimentConfig)> {
        match self {
            Axis::Scheme(v) => v
                .iter()
                .map(|&r| (r.name().to_string(), ExperimentConfig { recipe: r, ..base.clone() }))
                .collect(),
            Axis::PseudoCount(v) => v
                .iter()
                .map(|&n| (n.to_string(), ExperimentConfig { pseudo_count: n, ..base.clone() }))
                .collect(),
            Axis::Components(v) => v
                .iter()
                .map(|c| {
                    let label = c.iter().map(|x| format!("{x:?}").to_lowercase()).collect::<Vec<_>>().join("+");
                    (label, ExperimentConfig { components: c.clone(), ..base.clone() })
                })
                .collect(),
            Axis::Fraction(v) => v
                .iter()
                .map(|&f| (format!("{f}"), ExperimentConfig { fraction: f, ..base.clone() }))
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatrixCell {
    pub label: String,
    pub runs: Vec<RunRecord>,
    pub failures: Vec<String>,
}

impl MatrixCell {
    /// Mean and sample standard deviation of one headline column (percent).
    pub fn stat(&self, column: usize) -> Option<(f64, f64)> {
        let v: Vec<f64> = self.runs.iter().filter_map(|r| r.metrics.row()[column]).collect();
        if v.is_empty() {
            return None;
        }
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        let var = if v.len() > 1 {
            v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (v.len() - 1) as f64
        } else {
            0.0
        };
        Some((mean, var.sqrt()))
    }

    pub fn mean_ap(&self) -> Option<f64> {
        self.stat(0).map(|s| s.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatrixReport {
    pub axis: String,
    pub seeds: Vec<u64>,
    pub cells: Vec<MatrixCell>,
}

pub const COLUMNS: [&str; 6] = ["AP", "AP50", "AP75", "AP_S", "AP_M", "AP_L"];

impl MatrixReport {
    pub fn cell(&self, label: &str) -> Option<&MatrixCell> {
        self.cells.iter().find(|c| c.label == label)
    }

    pub fn csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec![self.axis.clone(), "runs".into(), "failures".into()];
        for c in COLUMNS {
            header.push(format!("{c}_mean"));
            header.push(format!("{c}_sd"));
        }
        w.write_record(&header).map_err(|e| Error::Invalid(e.to_string()))?;
        for cell in &self.cells {
            let mut row = vec![cell.label.clone(), cell.runs.len().to_string(), cell.failures.len().to_string()];
            for i in 0..COLUMNS.len() {
                match cell.stat(i) {
                    Some((m, s)) => {
                        row.push(format!("{m:.3}"));
                        row.push(format!("{s:.3}"));
                    }
                    None => row.extend([String::new(), String::new()]),
                }
            }
            w.write_record(&row).map_err(|e| Error::Invalid(e.to_string()))?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Invalid(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv is utf-8"))
    }

    pub fn text_table(&self) -> String {
        let width = self.cells.iter().map(|c| c.label.len()).max().unwrap_or(0).max(self.axis.len());
        let mut s = String::new();
        let _ = write!(s, "{:<width$}", self.axis);
        for c in COLUMNS {
            let _ = write!(s, " {c:>12}");
        }
        s.push('\n');
        for cell in &self.cells {
            let _ = write!(s, "{:<width$}", cell.label);
            for i in 0..COLUMNS.len() {
                let v = match cell.stat(i) {
                    Some((m, sd)) => format!("{m:.1} ± {sd:.1}"),
                    None => fmt_cell(None).trim().to_string(),
                };
                let _ = write!(s, " {v:>12}");
            }
            if !cell.failures.is_empty() {
                let _ = write!(s, "  ({} failed)", cell.failures.len());
            }
            s.push('\n');
        }
        s
    }

    /// Writes `<axis>.csv`, `<axis>.txt` and `<axis>.json` under `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let w = |name: String, body: Vec<u8>| {
            let p = dir.join(name);
            fs::write(&p, body).map_err(|e| Error::io(&p, e))
        };
        w(format!("{}.csv", self.axis), self.csv()?.into_bytes())?;
        w(format!("{}.txt", self.axis), self.text_table().into_bytes())?;
        w(format!("{}.json", self.axis), serde_json::to_vec_pretty(self)?)
    }
}

/// Runs every (axis value, seed) cell; a failing cell is recorded and the
/// matrix continues.
pub fn run_matrix(lab: &mut Lab, base: &ExperimentConfig, axis: &Axis, seeds: &[u64]) -> MatrixReport {
    let cells = axis
        .cells(base)
        .into_iter()
        .map(|(label, cfg)| {
            let mut runs = Vec::new();
            let mut failures = Vec::new();
            for &seed in seeds {
                match lab.run(&cfg.with_seed(seed)) {
                    Ok(r) => runs.push(r),
                    Err(e) => failures.push(format!("seed {seed}: {e}")),
                }
            }
            MatrixCell { label, runs, failures }
        })
        .collect();
    MatrixReport {
        axis: axis.name().to_string(),
        seeds: seeds.to_vec(),
        cells,
    }
}

/// AP-vs-fraction curves, one row per recipe: `recipe,fraction,mean,sd`.
pub fn fraction_curves(reports: &[(Recipe, MatrixReport)]) -> String {
    let mut s = String::from("recipe,fraction,ap_mean,ap_sd\n");
    for (recipe, rep) in reports {
        for cell in &rep.cells {
            if let Some((m, sd)) = cell.stat(0) {
                let _ = writeln!(s, "{},{},{m:.3},{sd:.3}", recipe.name(), cell.label);
            }
        }
    }
    s
}


#[cfg(test)]
impl ExperimentConfig {
    fn clone_with_recipe(&self, recipe: Recipe) -> Self {
        Self { recipe, ..self.clone() }
    }
}
