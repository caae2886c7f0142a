//! Class-agnostic region proposals: graph-based segmentation followed by
//! greedy hierarchical grouping of adjacent segments.

use std::collections::{BTreeSet, HashMap};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::boxops::{iou, BoxCxCyWH, BoxXYXY};
use crate::scenes::SceneImage;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SegmentMap {
    pub size: usize,
    pub labels: Vec<usize>,
    pub count: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Proposal {
    pub bbox: BoxCxCyWH,
    pub score: f32,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProposalConfig {
    /// Segmentation threshold constant; larger values give larger segments.
    pub scale: f32,
    pub min_size: usize,
    /// Boxes overlapping an already kept box above this IoU are dropped.
    pub dedup_iou: f64,
}

impl Default for ProposalConfig {
    fn default() -> Self {
        Self {
            scale: 1.0,
            min_size: 20,
            dedup_iou: 0.95,
        }
    }
}

struct DisjointSets {
    parent: Vec<usize>,
    size: Vec<usize>,
    internal: Vec<f32>,
}

impl DisjointSets {
    fn new(n: usize) -> Self {
        Self {
            parent: (0..n).collect(),
            size: vec![1; n],
            internal: vec![0.0; n],
        }
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    fn union(&mut self, a: usize, b: usize, weight: f32) {
        let (big, small) = if self.size[a] >= self.size[b] { (a, b) } else { (b, a) };
        self.parent[small] = big;
        self.size[big] += self.size[small];
        self.internal[big] = weight;
    }
}

fn color_distance(img: &SceneImage, p: usize, q: usize) -> f32 {
    let a = &img.data[p * 3..p * 3 + 3];
    let b = &img.data[q * 3..q * 3 + 3];
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = (x as f32 - y as f32) / 255.0;
            d * d
        })
        .sum::<f32>()
        .sqrt()
}

/// Felzenszwalb-Huttenlocher segmentation on 8-connected colour differences.
pub fn segment_image(img: &SceneImage, scale: f32, min_size: usize, seed: u64) -> SegmentMap {
    let n = img.size;
    let mut edges: Vec<(f32, usize, usize)> = Vec::with_capacity(n * n * 4);
    for y in 0..n {
        for x in 0..n {
            let p = y * n + x;
            let mut push = |q: usize| edges.push((color_distance(img, p, q), p, q));
            if x + 1 < n {
                push(p + 1);
            }
            if y + 1 < n {
                push(p + n);
                if x + 1 < n {
                    push(p + n + 1);
                }
                if x > 0 {
                    push(p + n - 1);
                }
            }
        }
    }
    // Shuffle first so the stable sort breaks weight ties by seed.
    edges.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    edges.sort_by(|a, b| a.0.total_cmp(&b.0));

    let mut sets = DisjointSets::new(n * n);
    for &(w, p, q) in &edges {
        let (a, b) = (sets.find(p), sets.find(q));
        if a == b {
            continue;
        }
        let ta = sets.internal[a] + scale / sets.size[a] as f32;
        let tb = sets.internal[b] + scale / sets.size[b] as f32;
        if w <= ta.min(tb) {
            sets.union(a, b, w);
        }
    }
    for &(w, p, q) in &edges {
        let (a, b) = (sets.find(p), sets.find(q));
        if a != b && (sets.size[a] < min_size || sets.size[b] < min_size) {
            sets.union(a, b, w);
        }
    }

    let mut relabel = HashMap::new();
    let labels = (0..n * n)
        .map(|p| {
            let root = sets.find(p);
            let next = relabel.len();
            *relabel.entry(root).or_insert(next)
        })
        .collect();
    SegmentMap {
        size: n,
        labels,
        count: relabel.len(),
    }
}

const HIST_BINS: usize = 16;

#[derive(Debug, Clone)]
struct Region {
    size: usize,
    /// Pixel bounds, half-open on the high side.
    bounds: [usize; 4],
    hist: Vec<f32>,
    created_at: usize,
}

impl Region {
    fn merge(a: &Region, b: &Region, created_at: usize) -> Region {
        let size = a.size + b.size;
        let hist = a
            .hist
            .iter()
            .zip(&b.hist)
            .map(|(&x, &y)| (x * a.size as f32 + y * b.size as f32) / size as f32)
            .collect();
        Region {
            size,
            bounds: [
                a.bounds[0].min(b.bounds[0]),
                a.bounds[1].min(b.bounds[1]),
                a.bounds[2].max(b.bounds[2]),
                a.bounds[3].max(b.bounds[3]),
            ],
            hist,
            created_at,
        }
    }
}

fn similarity(a: &Region, b: &Region, image_area: f32) -> f32 {
    let colour: f32 = a.hist.iter().zip(&b.hist).map(|(x, y)| x.min(*y)).sum::<f32>() / 3.0;
    let size = 1.0 - (a.size + b.size) as f32 / image_area;
    let joint = [
        a.bounds[0].min(b.bounds[0]),
        a.bounds[1].min(b.bounds[1]),
        a.bounds[2].max(b.bounds[2]),
        a.bounds[3].max(b.bounds[3]),
    ];
    let joint_area = ((joint[2] - joint[0]) * (joint[3] - joint[1])) as f32;
    let fill = 1.0 - (joint_area - a.size as f32 - b.size as f32) / image_area;
    colour + size + fill
}

fn initial_regions(img: &SceneImage, seg: &SegmentMap) -> (Vec<Region>, BTreeSet<(usize, usize)>) {
    let n = img.size;
    let mut regions: Vec<Region> = (0..seg.count)
        .map(|_| Region {
            size: 0,
            bounds: [usize::MAX, usize::MAX, 0, 0],
            hist: vec![0.0; 3 * HIST_BINS],
            created_at: 0,
        })
        .collect();
    let mut adjacent = BTreeSet::new();
    for y in 0..n {
        for x in 0..n {
            let p = y * n + x;
            let l = seg.labels[p];
            let r = &mut regions[l];
            r.size += 1;
            r.bounds = [r.bounds[0].min(x), r.bounds[1].min(y), r.bounds[2].max(x + 1), r.bounds[3].max(y + 1)];
            for c in 0..3 {
                let bin = img.data[p * 3 + c] as usize * HIST_BINS / 256;
                r.hist[c * HIST_BINS + bin] += 1.0;
            }
            for q in [(x + 1 < n).then(|| p + 1), (y + 1 < n).then(|| p + n)].into_iter().flatten() {
                let m = seg.labels[q];
                if m != l {
                    adjacent.insert((l.min(m), l.max(m)));
                }
            }
        }
    }
    for r in &mut regions {
        let s = r.size as f32;
        r.hist.iter_mut().for_each(|h| *h /= s);
    }
    (regions, adjacent)
}

/// Every region of the merge hierarchy, in creation order: the initial
/// segments first, then one new region per merge.
pub fn merge_hierarchy(img: &SceneImage, seg: &SegmentMap) -> Vec<[usize; 4]> {
    hierarchy(img, seg).into_iter().map(|r| r.bounds).collect()
}

fn hierarchy(img: &SceneImage, seg: &SegmentMap) -> Vec<Region> {
    let area = (img.size * img.size) as f32;
    let (mut regions, adjacent) = initial_regions(img, seg);
    let mut sims: HashMap<(usize, usize), f32> = adjacent
        .iter()
        .map(|&(a, b)| ((a, b), similarity(&regions[a], &regions[b], area)))
        .collect();
    let mut step = 0;
    while !sims.is_empty() {
        // Highest similarity; ties resolved by smallest pair for determinism.
        let (&(a, b), _) = sims
            .iter()
            .max_by(|x, y| x.1.total_cmp(y.1).then_with(|| y.0.cmp(x.0)))
            .expect("non-empty");
        step += 1;
        let t = regions.len();
        regions.push(Region::merge(&regions[a], &regions[b], step));
        let neighbours: BTreeSet<usize> = sims
            .keys()
            .filter(|&&(i, j)| i == a || i == b || j == a || j == b)
            .map(|&(i, j)| if i == a || i == b { j } else { i })
            .filter(|&o| o != a && o != b)
            .collect();
        sims.retain(|&(i, j), _| i != a && i != b && j != a && j != b);
        for o in neighbours {
            sims.insert((o, t), similarity(&regions[o], &regions[t], area));
        }
    }
    regions
}

fn pixel_box(bounds: [usize; 4], size: usize) -> BoxXYXY {
    let s = size as f32;
    BoxXYXY::new(
        bounds[0] as f32 / s,
        bounds[1] as f32 / s,
        bounds[2] as f32 / s,
        bounds[3] as f32 / s,
    )
}

/// Ranked, deduplicated hierarchy boxes. Later merges rank higher; initial
/// segments share the lowest depth and are ordered by seed. Boxes that cover
/// essentially the whole frame go last.
pub fn propose_boxes(img: &SceneImage, max_boxes: usize, seed: u64, config: &ProposalConfig) -> Vec<Proposal> {
    let seg = segment_image(img, config.scale, config.min_size, seed);
    let regions = hierarchy(img, &seg);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0f_b0c5);
    let frame = BoxXYXY::new(0.0, 0.0, 1.0, 1.0);
    let mut keyed: Vec<(bool, usize, f32, BoxXYXY)> = regions
        .iter()
        .map(|r| {
            let b = pixel_box(r.bounds, img.size);
            (iou(b, frame) > 0.95, r.created_at, rng.gen::<f32>(), b)
        })
        .collect();
    keyed.sort_by(|x, y| {
        x.0.cmp(&y.0)
            .then(y.1.cmp(&x.1))
            .then(y.2.total_cmp(&x.2))
    });

    let mut kept: Vec<BoxXYXY> = Vec::new();
    for (_, _, _, b) in keyed {
        if b.area() > 0.0 && kept.iter().all(|k| iou(*k, b) <= config.dedup_iou) {
            kept.push(b);
            if kept.len() == max_boxes {
                break;
            }
        }
    }
    let total = kept.len() as f32;
    kept.into_iter()
        .enumerate()
        .map(|(i, b)| Proposal {
            bbox: b.to_cxcywh().expect("region boxes have positive area"),
            score: 1.0 - i as f32 / total,
        })
        .collect()
}
