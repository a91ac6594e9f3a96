//! Multi-view object association: group per-view instance embeddings, score
//! them by concentration, and greedily pick prototypes with kernel-based
//! suppression. Prototypes then label every pixel by nearest kernel.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::{log_pp_kernel_unchecked, GaussianEmbedding};
use crate::loss::{average_embeddings_with, AveragingMode};
use crate::metrics::PanopticMask;
use crate::synth::Scene;
use crate::trainer::EmbeddingTable;

/// One view-local instance collapsed to a single Gaussian.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupedFeature {
    pub embedding: GaussianEmbedding,
    /// Mean kernel between the grouped embedding and its members.
    pub score: f64,
    pub view_id: usize,
    pub local_instance_id: u32,
    pub n_members: usize,
}

/// Groups every observed instance of every view. Pixels without a visible
/// point carry no embedding and are skipped.
pub fn group_instances(scene: &Scene, table: &EmbeddingTable, mode: AveragingMode) -> Result<Vec<GroupedFeature>> {
    let per_view: Vec<Result<Vec<GroupedFeature>>> = scene
        .views
        .par_iter()
        .map(|view| {
            let mut members: BTreeMap<u32, Vec<&GaussianEmbedding>> = BTreeMap::new();
            for (i, &id) in view.observed_instance.iter().enumerate() {
                if id == 0 {
                    continue;
                }
                if let Some(p) = view.correspondence[i] {
                    let e = table.entries.get(p as usize).ok_or(Error::IndexOutOfRange {
                        index: p as usize,
                        len: table.len(),
                    })?;
                    members.entry(id).or_default().push(e);
                }
            }
            members
                .into_iter()
                .map(|(id, m)| {
                    let embedding = average_embeddings_with(&m, mode)?;
                    let score = m
                        .iter()
                        .map(|e| log_pp_kernel_unchecked(&embedding, e).exp())
                        .sum::<f64>()
                        / m.len() as f64;
                    Ok(GroupedFeature {
                        embedding,
                        score,
                        view_id: view.view_id,
                        local_instance_id: id,
                        n_members: m.len(),
                    })
                })
                .collect()
        })
        .collect();
    let mut out = Vec::new();
    for v in per_view {
        out.extend(v?);
    }
    Ok(out)
}

/// Dense symmetric kernel matrix over grouped features.
#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityGraph {
    pub n: usize,
    pub edges: Vec<f64>,
}

impl SimilarityGraph {
    pub fn edge(&self, g: usize, h: usize) -> f64 {
        self.edges[g * self.n + h]
    }
}

pub fn build_similarity_graph(features: &[GroupedFeature]) -> Result<SimilarityGraph> {
    if features.is_empty() {
        return Err(Error::Empty("grouped features"));
    }
    let n = features.len();
    let dim = features[0].embedding.dim();
    if let Some(f) = features.iter().find(|f| f.embedding.dim() != dim) {
        return Err(Error::DimensionMismatch {
            expected: dim,
            got: f.embedding.dim(),
        });
    }
    let mut edges = vec![1.0; n * n];
    let upper: Vec<(usize, usize, f64)> = (0..n)
        .into_par_iter()
        .flat_map_iter(|g| {
            ((g + 1)..n).map(move |h| (g, h, log_pp_kernel_unchecked(&features[g].embedding, &features[h].embedding).exp()))
        })
        .collect();
    for (g, h, k) in upper {
        edges[g * n + h] = k;
        edges[h * n + g] = k;
    }
    Ok(SimilarityGraph { n, edges })
}

/// How within-view kernel similarities are averaged into the suppression threshold.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ThresholdMode {
    /// Halfway between the mean-of-view-means similarity and 1. Every view
    /// contains a pair at or above its own mean, so thresholds at the mean
    /// always merge some distinct instances; the midpoint keeps the data
    /// dependence while sitting between typical distinct-instance and
    /// same-instance similarities.
    #[default]
    Midpoint,
    /// Mean over views of each view's mean pairwise kernel.
    MeanOfViewMeans,
    /// Mean over all within-view pairs pooled together.
    PooledPairs,
}

/// Suppression threshold from the average kernel between grouped features that
/// share a view. `overriding` replaces the computed value.
pub fn compute_threshold(
    features: &[GroupedFeature],
    mode: ThresholdMode,
    overriding: Option<f64>,
) -> Result<f64> {
    if let Some(t) = overriding {
        if !(t > 0.0 && t < 1.0) {
            return Err(Error::InvalidArgument(format!("threshold must lie in (0, 1), got {t}")));
        }
        return Ok(t);
    }
    let mut by_view: BTreeMap<usize, Vec<&GaussianEmbedding>> = BTreeMap::new();
    for f in features {
        by_view.entry(f.view_id).or_default().push(&f.embedding);
    }
    let mut view_means = Vec::new();
    let (mut pooled_sum, mut pooled_count) = (0.0, 0usize);
    for embs in by_view.values() {
        if embs.len() < 2 {
            continue;
        }
        let mut sum = 0.0;
        let mut count = 0usize;
        for i in 0..embs.len() {
            for j in (i + 1)..embs.len() {
                sum += log_pp_kernel_unchecked(embs[i], embs[j]).exp();
                count += 1;
            }
        }
        view_means.push(sum / count as f64);
        pooled_sum += sum;
        pooled_count += count;
    }
    if view_means.is_empty() {
        return Err(Error::ThresholdUndetermined);
    }
    Ok(match mode {
        ThresholdMode::MeanOfViewMeans => view_means.iter().sum::<f64>() / view_means.len() as f64,
        ThresholdMode::Midpoint => 0.5 * (1.0 + view_means.iter().sum::<f64>() / view_means.len() as f64),
        ThresholdMode::PooledPairs => pooled_sum / pooled_count as f64,
    })
}

/// Selected prototypes; the global instance ID of `prototypes[i]` is `i + 1`
/// (0 stays reserved for unlabeled pixels).
#[derive(Clone, Debug, PartialEq)]
pub struct PrototypeSet {
    pub prototypes: Vec<GaussianEmbedding>,
    /// Index into the input feature list for each prototype.
    pub sources: Vec<usize>,
    pub threshold: f64,
}

impl PrototypeSet {
    pub fn len(&self) -> usize {
        self.prototypes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prototypes.is_empty()
    }

    pub fn to_json(&self) -> PrototypeFile {
        PrototypeFile {
            threshold: self.threshold,
            prototypes: self
                .prototypes
                .iter()
                .map(|p| PrototypeEntry {
                    mu: p.mu.clone(),
                    log_var: p.log_var.clone(),
                })
                .collect(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(&self.to_json()).map_err(|e| Error::Json {
            path: path.into(),
            source: e,
        })?;
        fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let file: PrototypeFile = serde_json::from_str(&text).map_err(|e| Error::Json {
            path: path.into(),
            source: e,
        })?;
        let prototypes = file
            .prototypes
            .into_iter()
            .map(|p| GaussianEmbedding::new(p.mu, p.log_var))
            .collect::<Result<Vec<_>>>()
            .map_err(|e| Error::malformed(path, e.to_string()))?;
        Ok(Self {
            sources: Vec::new(),
            prototypes,
            threshold: file.threshold,
        })
    }
}

/// `{"threshold", "prototypes": [{"mu", "log_var"}]}`, ordered by global ID.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrototypeFile {
    pub threshold: f64,
    pub prototypes: Vec<PrototypeEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrototypeEntry {
    pub mu: Vec<f64>,
    pub log_var: Vec<f64>,
}

/// Greedy selection: take the highest-scoring remaining feature, then drop
/// every remaining feature whose kernel with it reaches `threshold`. Score ties
/// go to the lowest `(view_id, local_instance_id)`.
pub fn select_prototypes(
    features: &[GroupedFeature],
    graph: &SimilarityGraph,
    threshold: f64,
) -> Result<PrototypeSet> {
    if graph.n != features.len() {
        return Err(Error::DimensionMismatch {
            expected: features.len(),
            got: graph.n,
        });
    }
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::InvalidArgument(format!("threshold must lie in (0, 1), got {threshold}")));
    }
    let mut order: Vec<usize> = (0..features.len()).collect();
    order.sort_by(|&a, &b| {
        let (fa, fb) = (&features[a], &features[b]);
        fb.score
            .total_cmp(&fa.score)
            .then(fa.view_id.cmp(&fb.view_id))
            .then(fa.local_instance_id.cmp(&fb.local_instance_id))
    });
    let mut alive = vec![true; features.len()];
    let mut prototypes = Vec::new();
    let mut sources = Vec::new();
    for &m in &order {
        if !alive[m] {
            continue;
        }
        alive[m] = false;
        prototypes.push(features[m].embedding.clone());
        sources.push(m);
        for i in 0..features.len() {
            if alive[i] && graph.edge(m, i) >= threshold {
                alive[i] = false;
            }
        }
    }
    Ok(PrototypeSet {
        prototypes,
        sources,
        threshold,
    })
}

/// Majority-vote semantic class per point over every view that observes it.
/// Ties go to the lowest class; unobserved points get class 0.
pub fn point_semantics(scene: &Scene) -> Vec<u32> {
    let mut votes: Vec<BTreeMap<u32, usize>> = vec![BTreeMap::new(); scene.n_points()];
    for v in &scene.views {
        for (i, c) in v.correspondence.iter().enumerate() {
            if let Some(p) = c {
                if let Some(slot) = votes.get_mut(*p as usize) {
                    *slot.entry(v.observed_semantic[i]).or_default() += 1;
                }
            }
        }
    }
    votes
        .into_iter()
        .map(|m| {
            m.into_iter()
                .fold((0u32, 0usize), |best, (class, n)| if n > best.1 { (class, n) } else { best })
                .0
        })
        .collect()
}

/// Index of the prototype with the highest kernel to `e` (lowest index on ties).
pub fn nearest_prototype(e: &GaussianEmbedding, prototypes: &PrototypeSet) -> usize {
    let mut best = 0;
    let mut best_log = f64::NEG_INFINITY;
    for (i, p) in prototypes.prototypes.iter().enumerate() {
        // compare in log space so vanishing kernels still rank
        let l = log_pp_kernel_unchecked(e, p);
        if l > best_log {
            best_log = l;
            best = i;
        }
    }
    best
}

/// Labels one view: foreground pixels (non-zero voted class with a visible
/// point) get `1 + nearest prototype index`; everything else is background.
pub fn assign_labels(
    scene: &Scene,
    view_id: usize,
    table: &EmbeddingTable,
    prototypes: &PrototypeSet,
    semantics: &[u32],
) -> Result<PanopticMask> {
    if prototypes.is_empty() {
        return Err(Error::Empty("prototype set"));
    }
    let view = scene.view(view_id)?;
    let dim = prototypes.prototypes[0].dim();
    if table.n_dims != dim {
        return Err(Error::DimensionMismatch {
            expected: table.n_dims,
            got: dim,
        });
    }
    let mut mask = PanopticMask::background(view.width, view.height);
    for (i, c) in view.correspondence.iter().enumerate() {
        let Some(p) = c else { continue };
        let p = *p as usize;
        let class = *semantics.get(p).ok_or(Error::IndexOutOfRange {
            index: p,
            len: semantics.len(),
        })?;
        if class == 0 {
            continue;
        }
        let e = table.entries.get(p).ok_or(Error::IndexOutOfRange {
            index: p,
            len: table.len(),
        })?;
        mask.semantic[i] = class;
        mask.instance[i] = nearest_prototype(e, prototypes) as u32 + 1;
    }
    Ok(mask)
}

/// Groups, builds the graph, picks the threshold and selects prototypes.
pub fn extract_prototypes(
    scene: &Scene,
    table: &EmbeddingTable,
    averaging: AveragingMode,
    threshold_mode: ThresholdMode,
    threshold_override: Option<f64>,
) -> Result<PrototypeSet> {
    let features = group_instances(scene, table, averaging)?;
    let graph = build_similarity_graph(&features)?;
    let threshold = compute_threshold(&features, threshold_mode, threshold_override)?;
    select_prototypes(&features, &graph, threshold)
}
