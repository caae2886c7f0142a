//! Miniature query-based set-prediction detector and its checkpoint format.
//!
//! Layout: patch-embedding backbone, pre-norm self-attention encoder,
//! decoder whose learned queries cross-attend to the encoder output, and
//! three linear heads (class logits, sigmoid box, embedding).

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId, Scalar, Tensor};
use crate::boxops::BoxCxCyWH;
use crate::error::{Error, Result};
use crate::scenes::SceneImage;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub image_size: usize,
    pub patch: usize,
    pub width: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub queries: usize,
    /// Foreground classes; the class head emits one extra no-object logit.
    pub classes: usize,
    pub embed_dim: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            patch: 8,
            width: 64,
            encoder_layers: 2,
            decoder_layers: 2,
            queries: 25,
            classes: 6,
            embed_dim: 32,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Invalid(format!("model config: {m}")));
        if self.patch == 0 || self.image_size % self.patch != 0 {
            return bad("patch size must divide image size");
        }
        if self.width < 4 || self.width % 4 != 0 {
            return bad("width must be a positive multiple of 4");
        }
        if self.encoder_layers == 0 || self.decoder_layers == 0 {
            return bad("need at least one encoder and one decoder layer");
        }
        if self.queries == 0 || self.classes == 0 {
            return bad("need at least one query and one class");
        }
        if self.embed_dim < 4 {
            return bad("embedding dim must be at least 4");
        }
        Ok(())
    }

    pub fn tokens(&self) -> usize {
        (self.image_size / self.patch).pow(2)
    }

    pub fn patch_dim(&self) -> usize {
        self.patch * self.patch * 3
    }

    pub fn class_outputs(&self) -> usize {
        self.classes + 1
    }

    /// Index of the no-object logit.
    pub fn no_object(&self) -> usize {
        self.classes
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Component {
    Backbone,
    Encoder,
    Decoder,
    Queries,
    Heads,
}

impl Component {
    pub const ALL: [Component; 5] = [
        Component::Backbone,
        Component::Encoder,
        Component::Decoder,
        Component::Queries,
        Component::Heads,
    ];

    pub fn of(name: &str) -> Result<Self> {
        match name.split('.').next() {
            Some("backbone") => Ok(Component::Backbone),
            Some("encoder") => Ok(Component::Encoder),
            Some("decoder") => Ok(Component::Decoder),
            Some("queries") => Ok(Component::Queries),
            Some("heads") => Ok(Component::Heads),
            _ => Err(Error::Checkpoint(format!("tensor {name} belongs to no component"))),
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::of(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Init {
    Xavier,
    Zeros,
    Ones,
}

fn layout(cfg: &ModelConfig) -> Vec<(String, Vec<usize>, Init)> {
    let w = cfg.width;
    let mut out = Vec::new();
    let linear = |out: &mut Vec<_>, prefix: &str, i: usize, o: usize| {
        out.push((format!("{prefix}.w"), vec![i, o], Init::Xavier));
        out.push((format!("{prefix}.b"), vec![1, o], Init::Zeros));
    };
    let norm = |out: &mut Vec<(String, Vec<usize>, Init)>, prefix: &str| {
        out.push((format!("{prefix}.g"), vec![1, w], Init::Ones));
        out.push((format!("{prefix}.b"), vec![1, w], Init::Zeros));
    };
    linear(&mut out, "backbone.embed1", cfg.patch_dim(), w);
    linear(&mut out, "backbone.embed2", w, w);
    for l in 0..cfg.encoder_layers {
        let p = format!("encoder.{l}");
        norm(&mut out, &format!("{p}.norm1"));
        for m in ["q", "k", "v", "o"] {
            linear(&mut out, &format!("{p}.attn.{m}"), w, w);
        }
        norm(&mut out, &format!("{p}.norm2"));
        linear(&mut out, &format!("{p}.ffn1"), w, 2 * w);
        linear(&mut out, &format!("{p}.ffn2"), 2 * w, w);
    }
    for l in 0..cfg.decoder_layers {
        let p = format!("decoder.{l}");
        norm(&mut out, &format!("{p}.norm1"));
        for m in ["q", "k", "v", "o"] {
            linear(&mut out, &format!("{p}.self.{m}"), w, w);
        }
        norm(&mut out, &format!("{p}.norm2"));
        for m in ["q", "k", "v", "o"] {
            linear(&mut out, &format!("{p}.cross.{m}"), w, w);
        }
        norm(&mut out, &format!("{p}.norm3"));
        linear(&mut out, &format!("{p}.ffn1"), w, 2 * w);
        linear(&mut out, &format!("{p}.ffn2"), 2 * w, w);
    }
    norm(&mut out, "decoder.final_norm");
    out.push(("queries".to_string(), vec![cfg.queries, w], Init::Xavier));
    linear(&mut out, "heads.class", w, cfg.class_outputs());
    linear(&mut out, "heads.box1", w, w);
    linear(&mut out, "heads.box2", w, 4);
    linear(&mut out, "heads.embed", w, cfg.embed_dim);
    out
}

pub fn xavier_bound(shape: &[usize]) -> f32 {
    (6.0 / (shape[0] + shape[1]) as f32).sqrt()
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub component: Component,
    pub value: Tensor<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub tensors: Vec<NamedTensor>,
    pub frozen: BTreeSet<Component>,
}

/// Fresh parameters; the backbone starts frozen.
pub fn init_model(config: &ModelConfig) -> Result<ModelParams> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let tensors = layout(config)
        .into_iter()
        .map(|(name, shape, init)| {
            let n = shape.iter().product();
            let data = match init {
                Init::Zeros => vec![0.0; n],
                Init::Ones => vec![1.0; n],
                Init::Xavier => {
                    let b = xavier_bound(&shape);
                    (0..n).map(|_| rng.gen_range(-b..b)).collect()
                }
            };
            Ok(NamedTensor {
                component: Component::of(&name)?,
                name,
                value: Tensor::new(shape, data)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ModelParams {
        config: config.clone(),
        tensors,
        frozen: BTreeSet::from([Component::Backbone]),
    })
}

impl ModelParams {
    pub fn count(&self) -> usize {
        self.tensors.iter().map(|t| t.value.len()).sum()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.tensors.iter().find(|t| t.name == name).map(|t| &t.value)
    }

    pub fn is_trainable(&self, i: usize) -> bool {
        !self.frozen.contains(&self.tensors[i].component)
    }

    pub fn trainable_indices(&self) -> Vec<usize> {
        (0..self.tensors.len()).filter(|&i| self.is_trainable(i)).collect()
    }

    /// Largest absolute entry difference over one component.
    pub fn component_diff(&self, other: &ModelParams, component: Component) -> f64 {
        self.tensors
            .iter()
            .zip(&other.tensors)
            .filter(|(a, _)| a.component == component)
            .map(|(a, b)| a.value.max_abs_diff(&b.value))
            .fold(0.0, f64::max)
    }

    /// Records every tensor on `g`, frozen ones as constants. The returned
    /// ids follow `self.tensors` order.
    pub fn record<T: Scalar>(&self, g: &mut Graph<T>) -> Vec<NodeId> {
        self.tensors
            .iter()
            .map(|t| {
                let v = t.value.cast();
                if self.frozen.contains(&t.component) {
                    g.input(v)
                } else {
                    g.param(v)
                }
            })
            .collect()
    }
}

/// Image pixels cut into row-major patches, centred around zero.
pub fn patchify<T: Scalar>(img: &SceneImage, patch: usize) -> Tensor<T> {
    let grid = img.size / patch;
    let dim = patch * patch * 3;
    let mut data = Vec::with_capacity(grid * grid * dim);
    for gy in 0..grid {
        for gx in 0..grid {
            for py in 0..patch {
                for px in 0..patch {
                    for c in 0..3 {
                        data.push(T::of(img.get(gx * patch + px, gy * patch + py, c) as f64 - 0.5));
                    }
                }
            }
        }
    }
    Tensor::new(vec![grid * grid, dim], data).expect("patch layout")
}

/// Fixed 2-D sinusoidal encoding: first half of the channels encode the row,
/// second half the column.
pub fn positional_encoding<T: Scalar>(grid: usize, width: usize) -> Tensor<T> {
    let quarter = width / 4;
    let mut data = Vec::with_capacity(grid * grid * width);
    for y in 0..grid {
        for x in 0..grid {
            for pos in [y, x] {
                for i in 0..quarter {
                    let freq = 1.0 / 10000f64.powf(i as f64 / quarter as f64);
                    let a = (pos as f64 + 0.5) * freq;
                    data.push(T::of(a.sin()));
                    data.push(T::of(a.cos()));
                }
            }
        }
    }
    Tensor::new(vec![grid * grid, width], data).expect("encoding layout")
}

/// Output nodes of one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct ForwardNodes {
    pub logits: NodeId,
    pub boxes: NodeId,
    pub embeddings: NodeId,
}

struct Lookup<'a> {
    index: HashMap<&'a str, NodeId>,
}

impl Lookup<'_> {
    fn get(&self, name: &str) -> NodeId {
        *self.index.get(name).unwrap_or_else(|| panic!("missing tensor {name}"))
    }
}

fn linear<T: Scalar>(g: &mut Graph<T>, p: &Lookup, name: &str, x: NodeId) -> NodeId {
    let y = g.matmul(x, p.get(&format!("{name}.w")), false);
    g.add(y, p.get(&format!("{name}.b")))
}

fn norm<T: Scalar>(g: &mut Graph<T>, p: &Lookup, name: &str, x: NodeId) -> NodeId {
    g.layer_norm(x, p.get(&format!("{name}.g")), p.get(&format!("{name}.b")))
}

fn attention<T: Scalar>(g: &mut Graph<T>, p: &Lookup, name: &str, x: NodeId, memory: NodeId, width: usize) -> NodeId {
    let q = linear(g, p, &format!("{name}.q"), x);
    let k = linear(g, p, &format!("{name}.k"), memory);
    let v = linear(g, p, &format!("{name}.v"), memory);
    let scores = g.matmul(q, k, true);
    let scores = g.scale(scores, T::of(1.0 / (width as f64).sqrt()));
    let weights = g.softmax(scores);
    let mixed = g.matmul(weights, v, false);
    linear(g, p, &format!("{name}.o"), mixed)
}

fn feed_forward<T: Scalar>(g: &mut Graph<T>, p: &Lookup, prefix: &str, x: NodeId) -> NodeId {
    let h = linear(g, p, &format!("{prefix}.ffn1"), x);
    let h = g.relu(h);
    linear(g, p, &format!("{prefix}.ffn2"), h)
}

fn lookup<'a>(cfg: &ModelConfig, names: &'a [(String, Vec<usize>, Init)], ids: &[NodeId]) -> Lookup<'a> {
    assert_eq!(names.len(), ids.len(), "parameter count for {cfg:?}");
    Lookup {
        index: names.iter().map(|(n, _, _)| n.as_str()).zip(ids.iter().copied()).collect(),
    }
}

fn backbone<T: Scalar>(g: &mut Graph<T>, p: &Lookup, patches: NodeId) -> NodeId {
    let h = linear(g, p, "backbone.embed1", patches);
    let h = g.relu(h);
    linear(g, p, "backbone.embed2", h)
}

/// Records the full detector on `g`. `params` must follow the tensor order of
/// [`init_model`]; `patches` is the output of [`patchify`].
pub fn forward_graph<T: Scalar>(g: &mut Graph<T>, cfg: &ModelConfig, params: &[NodeId], patches: NodeId) -> ForwardNodes {
    let names = layout(cfg);
    let p = lookup(cfg, &names, params);
    let w = cfg.width;

    let features = backbone(g, &p, patches);
    let pos = g.input(positional_encoding(cfg.image_size / cfg.patch, w));
    let mut x = g.add(features, pos);
    for l in 0..cfg.encoder_layers {
        let pre = format!("encoder.{l}");
        let h = norm(g, &p, &format!("{pre}.norm1"), x);
        let a = attention(g, &p, &format!("{pre}.attn"), h, h, w);
        x = g.add(x, a);
        let h = norm(g, &p, &format!("{pre}.norm2"), x);
        let f = feed_forward(g, &p, &pre, h);
        x = g.add(x, f);
    }
    let memory = x;

    let mut t = p.get("queries");
    for l in 0..cfg.decoder_layers {
        let pre = format!("decoder.{l}");
        let h = norm(g, &p, &format!("{pre}.norm1"), t);
        let a = attention(g, &p, &format!("{pre}.self"), h, h, w);
        t = g.add(t, a);
        let h = norm(g, &p, &format!("{pre}.norm2"), t);
        let a = attention(g, &p, &format!("{pre}.cross"), h, memory, w);
        t = g.add(t, a);
        let h = norm(g, &p, &format!("{pre}.norm3"), t);
        let f = feed_forward(g, &p, &pre, h);
        t = g.add(t, f);
    }
    let t = norm(g, &p, "decoder.final_norm", t);

    let logits = linear(g, &p, "heads.class", t);
    let b = linear(g, &p, "heads.box1", t);
    let b = g.relu(b);
    let b = linear(g, &p, "heads.box2", b);
    let boxes = g.sigmoid(b);
    let embeddings = linear(g, &p, "heads.embed", t);
    ForwardNodes {
        logits,
        boxes,
        embeddings,
    }
}

/// Per-query outputs: logits (k × C+1), boxes (k × 4, cxcywh), embeddings (k × d).
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionSet {
    pub logits: Tensor<f32>,
    pub boxes: Tensor<f32>,
    pub embeddings: Tensor<f32>,
}

impl PredictionSet {
    pub fn from_graph<T: Scalar>(g: &Graph<T>, out: &ForwardNodes) -> Self {
        Self {
            logits: g.value(out.logits).cast(),
            boxes: g.value(out.boxes).cast(),
            embeddings: g.value(out.embeddings).cast(),
        }
    }

    pub fn len(&self) -> usize {
        self.logits.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn probs(&self, q: usize) -> Vec<f32> {
        let row = self.logits.row(q);
        let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let e: Vec<f32> = row.iter().map(|v| (v - max).exp()).collect();
        let s: f32 = e.iter().sum();
        e.into_iter().map(|v| v / s).collect()
    }

    pub fn bbox(&self, q: usize) -> BoxCxCyWH {
        BoxCxCyWH::from_slice(self.boxes.row(q))
    }
}

pub fn forward(params: &ModelParams, img: &SceneImage) -> Result<PredictionSet> {
    let cfg = &params.config;
    if img.size != cfg.image_size {
        return Err(Error::Shape(format!(
            "image is {}px, model expects {}px",
            img.size, cfg.image_size
        )));
    }
    let mut g = Graph::<f32>::new();
    let ids: Vec<NodeId> = params.tensors.iter().map(|t| g.input(t.value.clone())).collect();
    let x = g.input(patchify(img, cfg.patch));
    let out = forward_graph(&mut g, cfg, &ids, x);
    g.check_finite()?;
    Ok(PredictionSet::from_graph(&g, &out))
}

/// Grid (in patches per side) that crops are resampled to before embedding.
const CROP_GRID: usize = 2;

/// Frozen-backbone descriptor of an image region: bilinear resample of the
/// crop, backbone tokens, average pool, fixed seeded projection to `d` dims.
pub fn crop_embed(params: &ModelParams, img: &SceneImage, bbox: BoxCxCyWH) -> Result<Vec<f32>> {
    let cfg = &params.config;
    let b = bbox.validate()?.to_xyxy()?;
    let s = img.size as f32;
    let (x0, y0, x1, y1) = (b.x0 * s, b.y0 * s, b.x1 * s, b.y1 * s);
    if (x1 - x0) * (y1 - y0) < 4.0 {
        return Err(Error::DegenerateBox(format!("crop {bbox:?} covers under 4 pixels")));
    }
    let side = CROP_GRID * cfg.patch;
    let mut data = vec![0u8; side * side * 3];
    for oy in 0..side {
        for ox in 0..side {
            let sx = (x0 + (ox as f32 + 0.5) * (x1 - x0) / side as f32 - 0.5).clamp(0.0, s - 1.0);
            let sy = (y0 + (oy as f32 + 0.5) * (y1 - y0) / side as f32 - 0.5).clamp(0.0, s - 1.0);
            let (ix, iy) = (sx.floor() as usize, sy.floor() as usize);
            let (jx, jy) = ((ix + 1).min(img.size - 1), (iy + 1).min(img.size - 1));
            let (fx, fy) = (sx - ix as f32, sy - iy as f32);
            for c in 0..3 {
                let v = img.get(ix, iy, c) * (1.0 - fx) * (1.0 - fy)
                    + img.get(jx, iy, c) * fx * (1.0 - fy)
                    + img.get(ix, jy, c) * (1.0 - fx) * fy
                    + img.get(jx, jy, c) * fx * fy;
                data[(oy * side + ox) * 3 + c] = (v * 255.0).round() as u8;
            }
        }
    }
    let crop = SceneImage { id: img.id, size: side, data };

    let mut g = Graph::<f32>::new();
    let mut index = HashMap::new();
    for t in params.tensors.iter().filter(|t| t.component == Component::Backbone) {
        index.insert(t.name.as_str(), g.input(t.value.clone()));
    }
    let p = Lookup { index };
    let x = g.input(patchify(&crop, cfg.patch));
    let tokens = backbone(&mut g, &p, x);
    let tv = g.value(tokens);
    let mut pooled = vec![0f32; cfg.width];
    for r in 0..tv.rows() {
        for (acc, v) in pooled.iter_mut().zip(tv.row(r)) {
            *acc += v / tv.rows() as f32;
        }
    }
    let proj = embedding_projection(cfg);
    let out = (0..cfg.embed_dim)
        .map(|j| (0..cfg.width).map(|i| pooled[i] * proj[i * cfg.embed_dim + j]).sum())
        .collect();
    Ok(out)
}

fn embedding_projection(cfg: &ModelConfig) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x00e1_b0d5);
    let scale = 1.0 / (cfg.width as f32).sqrt();
    (0..cfg.width * cfg.embed_dim).map(|_| rng.gen_range(-scale..scale) * 3f32.sqrt()).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct TrainingMetadata {
    pub scheme: String,
    pub epochs: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    len: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CheckpointHeader {
    version: u32,
    config: ModelConfig,
    metadata: TrainingMetadata,
    tensors: Vec<TensorEntry>,
}

/// Header length (u64 LE), JSON header, then the f32 LE payload.
pub fn save_checkpoint(params: &ModelParams, metadata: &TrainingMetadata, path: &Path) -> Result<()> {
    let mut offset = 0;
    let tensors = params
        .tensors
        .iter()
        .map(|t| {
            let e = TensorEntry {
                name: t.name.clone(),
                shape: t.value.shape().to_vec(),
                offset,
                len: t.value.len(),
            };
            offset += t.value.len();
            e
        })
        .collect();
    let header = serde_json::to_vec(&CheckpointHeader {
        version: CHECKPOINT_VERSION,
        config: params.config.clone(),
        metadata: metadata.clone(),
        tensors,
    })?;
    let mut bytes = Vec::with_capacity(8 + header.len() + offset * 4);
    bytes.extend_from_slice(&(header.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&header);
    for t in &params.tensors {
        for v in t.value.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

pub struct LoadedCheckpoint {
    pub params: ModelParams,
    pub config: ModelConfig,
    pub metadata: TrainingMetadata,
}

fn read_checkpoint(path: &Path) -> Result<(CheckpointHeader, HashMap<String, Tensor<f32>>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let corrupt = |m: String| Error::Checkpoint(format!("{}: {m}", path.display()));
    if bytes.len() < 8 {
        return Err(corrupt("truncated header".into()));
    }
    let hlen = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes")) as usize;
    let body = bytes.get(8..8 + hlen).ok_or_else(|| corrupt("truncated header".into()))?;
    let header: CheckpointHeader =
        serde_json::from_slice(body).map_err(|e| corrupt(format!("malformed header: {e}")))?;
    if header.version != CHECKPOINT_VERSION {
        return Err(corrupt(format!(
            "version {} (expected {CHECKPOINT_VERSION})",
            header.version
        )));
    }
    let payload = &bytes[8 + hlen..];
    let mut table = HashMap::new();
    for e in &header.tensors {
        let expected: usize = e.shape.iter().product();
        let start = e.offset * 4;
        let end = (e.offset + e.len) * 4;
        if e.len != expected || end > payload.len() {
            return Err(corrupt(format!(
                "tensor {} has corrupted length ({} values for shape {:?})",
                e.name, e.len, e.shape
            )));
        }
        Component::of(&e.name)?;
        let data = payload[start..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        table.insert(e.name.clone(), Tensor::new(e.shape.clone(), data)?);
    }
    Ok((header, table))
}

/// Loads the listed components from `path` into a model shaped by `target`;
/// the rest comes from a fresh init of `target` (whose seed applies). A class
/// head whose arity differs from `target` is re-initialized rather than
/// rejected.
pub fn load_checkpoint(path: &Path, components: &BTreeSet<Component>, target: &ModelConfig) -> Result<LoadedCheckpoint> {
    let (header, table) = read_checkpoint(path)?;
    let params = assemble(table, components, target).map_err(|e| match e {
        Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
        other => other,
    })?;
    Ok(LoadedCheckpoint {
        params,
        config: header.config,
        metadata: header.metadata,
    })
}

/// Loads every tensor into the architecture stored in the header.
pub fn load_full_checkpoint(path: &Path) -> Result<LoadedCheckpoint> {
    let (header, table) = read_checkpoint(path)?;
    let all = Component::ALL.into_iter().collect();
    let mut params = assemble(table, &all, &header.config)?;
    params.frozen.clear();
    Ok(LoadedCheckpoint {
        params,
        config: header.config,
        metadata: header.metadata,
    })
}

/// In-memory counterpart of [`load_checkpoint`].
pub fn transfer(source: &ModelParams, components: &BTreeSet<Component>, target: &ModelConfig) -> Result<ModelParams> {
    let table = source.tensors.iter().map(|t| (t.name.clone(), t.value.clone())).collect();
    assemble(table, components, target)
}

fn assemble(mut table: HashMap<String, Tensor<f32>>, components: &BTreeSet<Component>, target: &ModelConfig) -> Result<ModelParams> {
    let mut params = init_model(target)?;
    let known: BTreeSet<&str> = params.tensors.iter().map(|t| t.name.as_str()).collect();
    if let Some(name) = table.keys().find(|n| !known.contains(n.as_str())) {
        return Err(Error::Checkpoint(format!("unknown tensor {name}")));
    }
    for t in &mut params.tensors {
        if !components.contains(&t.component) {
            continue;
        }
        let stored = table
            .remove(&t.name)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor {}", t.name)))?;
        if stored.shape() != t.value.shape() {
            if t.name.starts_with("heads.class") {
                continue;
            }
            return Err(Error::Checkpoint(format!(
                "tensor {} has shape {:?}, config needs {:?}",
                t.name,
                stored.shape(),
                t.value.shape()
            )));
        }
        t.value = stored;
    }
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenes::{render_scene, SceneSpec};

    fn small() -> ModelConfig {
        ModelConfig {
            width: 16,
            queries: 5,
            embed_dim: 8,
            ..ModelConfig::default()
        }
    }

    /// Closed-form count for the layout above.
    fn expected_count(c: &ModelConfig) -> usize {
        let w = c.width;
        let lin = |i: usize, o: usize| i * o + o;
        let ln = 2 * w;
        let ffn = lin(w, 2 * w) + lin(2 * w, w);
        let attn = 4 * lin(w, w);
        let backbone = lin(c.patch_dim(), w) + lin(w, w);
        let enc = c.encoder_layers * (2 * ln + attn + ffn);
        let dec = c.decoder_layers * (3 * ln + 2 * attn + ffn) + ln;
        let heads = lin(w, c.classes + 1) + lin(w, w) + lin(w, 4) + lin(w, c.embed_dim);
        backbone + enc + dec + c.queries * w + heads
    }

    #[test]
    fn parameter_count_matches_formula() {
        for cfg in [ModelConfig::default(), small()] {
            assert_eq!(init_model(&cfg).unwrap().count(), expected_count(&cfg));
        }
        // default: 12352+4160 backbone, 2*(256+16640+16576), 2*(384+33280+16576)+128,
        // 1600 queries, 455+4160+260+2080 heads
        assert_eq!(init_model(&ModelConfig::default()).unwrap().count(), 192_619);
    }

    #[test]
    fn init_is_deterministic_and_bounded() {
        let a = init_model(&small()).unwrap();
        assert_eq!(a, init_model(&small()).unwrap());
        let other = init_model(&ModelConfig { seed: 1, ..small() }).unwrap();
        assert_ne!(a, other);
        for t in &a.tensors {
            let bound = if t.value.shape()[0] == 1 { 1.0 } else { xavier_bound(t.value.shape()) };
            assert!(t.value.data().iter().all(|v| v.is_finite() && v.abs() <= bound), "{}", t.name);
        }
        assert_eq!(a.frozen, BTreeSet::from([Component::Backbone]));
    }

    #[test]
    fn forward_shapes_ranges_and_normalization() {
        let cfg = small();
        let p = init_model(&cfg).unwrap();
        let (img, _) = render_scene(&SceneSpec::default(), 1, 0);
        let out = forward(&p, &img).unwrap();
        assert_eq!(out.logits.shape(), &[5, 7]);
        assert_eq!(out.boxes.shape(), &[5, 4]);
        assert_eq!(out.embeddings.shape(), &[5, 8]);
        assert!(out.boxes.data().iter().all(|&v| v > 0.0 && v < 1.0));
        for q in 0..5 {
            assert!((out.probs(q).iter().sum::<f32>() - 1.0).abs() < 1e-5);
        }
        assert_eq!(out, forward(&p, &img).unwrap());
        let wrong = SceneImage {
            id: 0,
            size: 32,
            data: vec![0; 32 * 32 * 3],
        };
        assert!(forward(&p, &wrong).is_err());
    }

    #[test]
    fn crop_embedding_is_deterministic_and_sized() {
        let p = init_model(&small()).unwrap();
        let (img, _) = render_scene(&SceneSpec::default(), 2, 0);
        let b = BoxCxCyWH::new(0.4, 0.5, 0.3, 0.2);
        let e = crop_embed(&p, &img, b).unwrap();
        assert_eq!(e.len(), 8);
        assert_eq!(e, crop_embed(&p, &img, b).unwrap());
        assert!(crop_embed(&p, &img, BoxCxCyWH::new(0.5, 0.5, 0.01, 0.01)).is_err());
    }

    #[test]
    fn checkpoint_round_trip_and_filters() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let mut p = init_model(&small()).unwrap();
        for t in &mut p.tensors {
            t.value = t.value.map(|v| v + 0.25);
        }
        let meta = TrainingMetadata {
            scheme: "detreg".into(),
            epochs: 3,
            seed: 0,
        };
        save_checkpoint(&p, &meta, &path).unwrap();
        let all = load_checkpoint(&path, &Component::ALL.into_iter().collect(), &small()).unwrap();
        assert_eq!(all.params.tensors, p.tensors);
        assert_eq!(all.metadata, meta);

        let fresh_cfg = ModelConfig { seed: 9, ..small() };
        let fresh = init_model(&fresh_cfg).unwrap();
        let enc = load_checkpoint(&path, &BTreeSet::from([Component::Encoder]), &fresh_cfg).unwrap();
        assert_eq!(enc.params.component_diff(&p, Component::Encoder), 0.0);
        assert_eq!(enc.params.component_diff(&fresh, Component::Decoder), 0.0);
        assert_eq!(enc.params.component_diff(&fresh, Component::Heads), 0.0);

        // A different class arity keeps the stored box head but re-initializes the class head.
        let wide = ModelConfig { classes: 1, ..small() };
        let l = load_checkpoint(&path, &Component::ALL.into_iter().collect(), &wide).unwrap();
        assert_eq!(l.params.get("heads.box2.w"), p.get("heads.box2.w"));
        assert_eq!(l.params.get("heads.class.w"), init_model(&wide).unwrap().get("heads.class.w"));
    }

    #[test]
    fn corrupted_checkpoints_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let p = init_model(&small()).unwrap();
        save_checkpoint(&p, &TrainingMetadata::default(), &path).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 4);
        fs::write(&path, &bytes).unwrap();
        let err = load_checkpoint(&path, &BTreeSet::new(), &small()).err().unwrap().to_string();
        assert!(err.contains("heads.embed.b"), "{err}");

        let bigger = ModelConfig { width: 20, ..small() };
        save_checkpoint(&init_model(&bigger).unwrap(), &TrainingMetadata::default(), &path).unwrap();
        let all = Component::ALL.into_iter().collect();
        assert!(load_checkpoint(&path, &all, &small()).is_err());
    }
}
