//! Per-point embedding table and the optimization loop.
//!
//! The table stands in for a neural instance field: every scene point owns one
//! Gaussian embedding, and a view's feature map is a lookup through the
//! view's pixel-to-point correspondences.

use std::fs;
use std::path::Path;

use rand::seq::{index, SliceRandom};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::{log_var_max, log_var_min, EmbeddingGrad, GaussianEmbedding};
use crate::loss::{
    mine_cross_view_pairs, total_loss, AveragingMode, CrossViewTerm, LossBreakdown, LossWeights,
    Sample, SampleBatch,
};
use crate::seed::{rng, sub_seed};
use crate::synth::Scene;

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTable {
    pub n_dims: usize,
    pub entries: Vec<GaussianEmbedding>,
}

impl EmbeddingTable {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            n_dims: self.n_dims,
            n_points: self.entries.len(),
            points: self
                .entries
                .iter()
                .map(|e| CheckpointPoint {
                    mu: e.mu.clone(),
                    log_var: e.log_var.clone(),
                })
                .collect(),
        }
    }

    pub fn from_checkpoint(ck: Checkpoint) -> Result<Self> {
        if ck.points.len() != ck.n_points {
            return Err(Error::InvalidArgument(format!(
                "checkpoint declares {} points but holds {}",
                ck.n_points,
                ck.points.len()
            )));
        }
        let entries = ck
            .points
            .into_iter()
            .map(|p| {
                let e = GaussianEmbedding::new(p.mu, p.log_var)?;
                if e.dim() != ck.n_dims {
                    return Err(Error::DimensionMismatch {
                        expected: ck.n_dims,
                        got: e.dim(),
                    });
                }
                Ok(e)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            n_dims: ck.n_dims,
            entries,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string(&self.to_checkpoint()).map_err(|e| Error::Json {
            path: path.into(),
            source: e,
        })?;
        fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ck: Checkpoint = serde_json::from_str(&text).map_err(|e| Error::Json {
            path: path.into(),
            source: e,
        })?;
        Self::from_checkpoint(ck).map_err(|e| Error::malformed(path, e.to_string()))
    }
}

/// On-disk table: `{"n_dims", "n_points", "points": [{"mu", "log_var"}]}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub n_dims: usize,
    pub n_points: usize,
    pub points: Vec<CheckpointPoint>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointPoint {
    pub mu: Vec<f64>,
    pub log_var: Vec<f64>,
}

/// Dense gradient buffer matching an [`EmbeddingTable`].
#[derive(Clone, Debug)]
pub struct TableGradient {
    pub entries: Vec<EmbeddingGrad>,
}

impl TableGradient {
    pub fn zeros(n_points: usize, n_dims: usize) -> Self {
        Self {
            entries: vec![EmbeddingGrad::zeros(n_dims); n_points],
        }
    }

    pub fn for_table(table: &EmbeddingTable) -> Self {
        Self::zeros(table.len(), table.n_dims)
    }

    pub fn clear(&mut self) {
        for g in &mut self.entries {
            g.d_mu.iter_mut().for_each(|x| *x = 0.0);
            g.d_log_var.iter_mut().for_each(|x| *x = 0.0);
        }
    }
}

/// Probabilistic embeddings, or the isotropic baseline where every variance is
/// frozen at `sigma2` and the kernel reduces to an RBF.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum KernelMode {
    Probabilistic,
    Deterministic { sigma2: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerKind {
    GradientDescent,
    Adam,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub n_dims: usize,
    pub epochs: usize,
    /// Number of final epochs that sample two views per step and add the
    /// cross-view term. `None` means 20% of `epochs`.
    pub cross_view_epochs: Option<usize>,
    pub batch_pixels: usize,
    pub learning_rate: f64,
    pub tau: f64,
    pub w_cross: f64,
    pub w_reg: f64,
    pub optimizer: OptimizerKind,
    pub kernel: KernelMode,
    pub averaging: AveragingMode,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            n_dims: 3,
            epochs: 150,
            cross_view_epochs: None,
            batch_pixels: 256,
            learning_rate: 1e-2,
            tau: 0.9,
            w_cross: 0.05,
            w_reg: 0.001,
            optimizer: OptimizerKind::Adam,
            kernel: KernelMode::Probabilistic,
            averaging: AveragingMode::ParameterMean,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.n_dims == 0 {
            return bad("n_dims must be at least 1".into());
        }
        if self.cross_epochs() > self.epochs {
            return bad("cross_view_epochs cannot exceed epochs".into());
        }
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return bad(format!("tau must lie in (0, 1), got {}", self.tau));
        }
        if !(self.learning_rate > 0.0) {
            return bad("learning rate must be positive".into());
        }
        if self.batch_pixels < 2 {
            return bad("batch_pixels must be at least 2".into());
        }
        if self.w_cross < 0.0 || self.w_reg < 0.0 {
            return bad("loss weights must be non-negative".into());
        }
        if let KernelMode::Deterministic { sigma2 } = self.kernel {
            if !(sigma2 > 0.0) || !sigma2.is_finite() {
                return bad(format!("fixed sigma2 must be positive, got {sigma2}"));
            }
        }
        Ok(())
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights {
            w_cross: self.w_cross,
            w_reg: self.w_reg,
        }
    }

    pub fn cross_epochs(&self) -> usize {
        self.cross_view_epochs.unwrap_or(self.epochs / 5)
    }

    fn cross_view_active(&self, epoch: usize) -> bool {
        self.w_cross > 0.0 && epoch + self.cross_epochs() >= self.epochs
    }
}

/// Means from `N(0, 0.1^2)`; log-variances at 0, or at `ln sigma2` in the deterministic mode.
pub fn init_table(scene: &Scene, config: &TrainConfig) -> Result<EmbeddingTable> {
    if scene.n_points() == 0 {
        return Err(Error::Empty("scene points"));
    }
    if config.n_dims == 0 {
        return Err(Error::InvalidArgument("n_dims must be at least 1".into()));
    }
    let mut r = rng(sub_seed(config.seed, "init"));
    let normal = Normal::new(0.0, 0.1).expect("valid normal");
    let log_var = match config.kernel {
        KernelMode::Probabilistic => 0.0,
        KernelMode::Deterministic { sigma2 } => sigma2.ln(),
    };
    let entries = (0..scene.n_points())
        .map(|_| GaussianEmbedding {
            mu: (0..config.n_dims).map(|_| normal.sample(&mut r)).collect(),
            log_var: vec![log_var; config.n_dims],
        })
        .collect();
    Ok(EmbeddingTable {
        n_dims: config.n_dims,
        entries,
    })
}

/// Draws up to `k` foreground pixels of one view without replacement.
pub fn sample_batch<R: Rng + ?Sized>(scene: &Scene, view_id: usize, k: usize, rng: &mut R) -> Result<SampleBatch> {
    if k < 2 {
        return Err(Error::InvalidArgument(format!("batch size must be at least 2, got {k}")));
    }
    let view = scene.view(view_id)?;
    let fg = view.foreground_pixels();
    if fg.is_empty() {
        return Err(Error::NoForeground(view_id));
    }
    let picks = index::sample(rng, fg.len(), k.min(fg.len()));
    let samples = picks
        .into_iter()
        .map(|i| {
            let px = fg[i];
            Sample {
                point: view.correspondence[px].expect("foreground has a point") as usize,
                instance: view.observed_instance[px],
                view: view_id,
            }
        })
        .collect();
    SampleBatch::new(samples)
}

/// Per-pixel embeddings of a view; `None` where no point is visible.
pub fn lookup_view_embeddings<'t>(
    scene: &Scene,
    view_id: usize,
    table: &'t EmbeddingTable,
) -> Result<Vec<Option<&'t GaussianEmbedding>>> {
    let view = scene.view(view_id)?;
    view.correspondence
        .iter()
        .map(|c| match c {
            None => Ok(None),
            Some(p) => table
                .entries
                .get(*p as usize)
                .map(Some)
                .ok_or(Error::IndexOutOfRange {
                    index: *p as usize,
                    len: table.len(),
                }),
        })
        .collect()
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

enum Optimizer {
    Sgd,
    Adam(Adam),
}

impl Optimizer {
    fn new(kind: OptimizerKind, n_params: usize) -> Self {
        match kind {
            OptimizerKind::GradientDescent => Optimizer::Sgd,
            OptimizerKind::Adam => Optimizer::Adam(Adam {
                m: vec![0.0; n_params],
                v: vec![0.0; n_params],
                t: 0,
            }),
        }
    }

    fn step(&mut self, table: &mut EmbeddingTable, grad: &TableGradient, lr: f64, freeze_log_var: bool) {
        let n = table.n_dims;
        match self {
            Optimizer::Sgd => {
                for (e, g) in table.entries.iter_mut().zip(&grad.entries) {
                    for d in 0..n {
                        e.mu[d] -= lr * g.d_mu[d];
                        if !freeze_log_var {
                            e.log_var[d] -= lr * g.d_log_var[d];
                        }
                    }
                }
            }
            Optimizer::Adam(state) => {
                state.t += 1;
                let bc1 = 1.0 - BETA1.powi(state.t);
                let bc2 = 1.0 - BETA2.powi(state.t);
                let mut update = |param: &mut f64, g: f64, slot: usize| {
                    let m = &mut state.m[slot];
                    let v = &mut state.v[slot];
                    *m = BETA1 * *m + (1.0 - BETA1) * g;
                    *v = BETA2 * *v + (1.0 - BETA2) * g * g;
                    *param -= lr * (*m / bc1) / ((*v / bc2).sqrt() + ADAM_EPS);
                };
                for (i, (e, g)) in table.entries.iter_mut().zip(&grad.entries).enumerate() {
                    let base = i * 2 * n;
                    for d in 0..n {
                        update(&mut e.mu[d], g.d_mu[d], base + d);
                        if !freeze_log_var {
                            update(&mut e.log_var[d], g.d_log_var[d], base + n + d);
                        }
                    }
                }
            }
        }
        if !freeze_log_var {
            for e in &mut table.entries {
                for l in &mut e.log_var {
                    *l = l.clamp(log_var_min(), log_var_max());
                }
            }
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean loss terms per epoch.
    pub history: Vec<LossBreakdown>,
    /// Mean number of mined cross-view pairs per cross-view step, per epoch.
    pub mined_pairs: Vec<f64>,
}

/// Runs the full schedule: single-view steps, then two-view steps with the
/// cross-view constraint for the last `cross_view_epochs` epochs.
pub fn train(scene: &Scene, config: &TrainConfig) -> Result<(EmbeddingTable, TrainReport)> {
    let table = init_table(scene, config)?;
    train_from(scene, config, table)
}

/// Same as [`train`] but starts from an existing table.
pub fn train_from(
    scene: &Scene,
    config: &TrainConfig,
    mut table: EmbeddingTable,
) -> Result<(EmbeddingTable, TrainReport)> {
    config.validate()?;
    if table.len() != scene.n_points() {
        return Err(Error::PointCountMismatch {
            scene: scene.n_points(),
            checkpoint: table.len(),
        });
    }
    let trainable: Vec<usize> = scene
        .views
        .iter()
        .filter(|v| v.foreground_pixels().len() >= 2)
        .map(|v| v.view_id)
        .collect();
    if trainable.is_empty() && config.epochs > 0 {
        return Err(Error::Empty("views with foreground pixels"));
    }
    let uses_cross = config.w_cross > 0.0 && config.cross_epochs() > 0;
    if uses_cross && trainable.len() < 2 {
        return Err(Error::InvalidArgument(
            "cross-view training needs at least two views with foreground".into(),
        ));
    }

    let freeze = matches!(config.kernel, KernelMode::Deterministic { .. });
    let mut sampler: ChaCha8Rng = rng(sub_seed(config.seed, "sampling"));
    let mut opt = Optimizer::new(config.optimizer, table.len() * 2 * table.n_dims);
    let mut grad = TableGradient::for_table(&table);
    let weights = config.weights();
    let mut report = TrainReport::default();

    for epoch in 0..config.epochs {
        let cross = config.cross_view_active(epoch);
        let mut order = trainable.clone();
        order.shuffle(&mut sampler);
        let mut acc = LossBreakdown::default();
        let mut pair_count = 0usize;

        for &view in &order {
            grad.clear();
            let stats = if cross {
                let a = sampler.random_range(0..trainable.len());
                let mut b = sampler.random_range(0..trainable.len() - 1);
                if b >= a {
                    b += 1;
                }
                let (vm, vn) = (trainable[a], trainable[b]);
                let batches = [
                    sample_batch(scene, vm, config.batch_pixels, &mut sampler)?,
                    sample_batch(scene, vn, config.batch_pixels, &mut sampler)?,
                ];
                let pairs = mine_cross_view_pairs(
                    &batches[0].embeddings(&table)?,
                    vm,
                    &batches[1].embeddings(&table)?,
                    vn,
                    config.tau,
                )?;
                pair_count += pairs.len();
                let term = CrossViewTerm {
                    pairs: &pairs,
                    batch_m: 0,
                    batch_n: 1,
                };
                total_loss(&batches, Some(term), &table, weights, config.averaging, &mut grad)?
            } else {
                let batch = sample_batch(scene, view, config.batch_pixels, &mut sampler)?;
                total_loss(&[batch], None, &table, weights, config.averaging, &mut grad)?
            };
            opt.step(&mut table, &grad, config.learning_rate, freeze);
            acc.pixel_contra += stats.pixel_contra;
            acc.concen += stats.concen;
            acc.cross += stats.cross;
            acc.reg += stats.reg;
            acc.total += stats.total;
        }

        let steps = order.len().max(1) as f64;
        report.history.push(LossBreakdown {
            pixel_contra: acc.pixel_contra / steps,
            concen: acc.concen / steps,
            cross: acc.cross / steps,
            reg: acc.reg / steps,
            total: acc.total / steps,
        });
        report.mined_pairs.push(if cross { pair_count as f64 / steps } else { 0.0 });
    }
    Ok((table, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::loss::regularization_loss;
    use crate::synth::{generate_scene, SceneParams};

    fn toy() -> Scene {
        generate_scene(
            &SceneParams {
                k_instances: 3,
                n_views: 2,
                canvas_width: 24,
                canvas_height: 24,
                view_width: 20,
                view_height: 20,
                min_size: 3,
                max_size: 6,
                n_thing_classes: 2,
            },
            1,
        )
        .unwrap()
    }

    #[test]
    fn init_is_seeded() {
        let s = toy();
        let c = TrainConfig::default();
        assert_eq!(init_table(&s, &c).unwrap(), init_table(&s, &c).unwrap());
        let other = TrainConfig { seed: 1, ..c };
        assert_ne!(init_table(&s, &c).unwrap().entries[0].mu, init_table(&s, &other).unwrap().entries[0].mu);
        let t = init_table(&s, &c).unwrap();
        assert!(t.entries.iter().all(|e| regularization_loss(e).0 == 0.0));
    }

    #[test]
    fn deterministic_mode_initializes_fixed_variance() {
        let s = toy();
        let c = TrainConfig {
            kernel: KernelMode::Deterministic { sigma2: 0.5 },
            ..TrainConfig::default()
        };
        let t = init_table(&s, &c).unwrap();
        assert!(t.entries.iter().all(|e| e.log_var.iter().all(|&l| l == 0.5f64.ln())));
    }

    #[test]
    fn batch_sampling_contract() {
        let s = toy();
        let view = &s.views[0];
        let fg = view.foreground_pixels().len();
        let b = sample_batch(&s, 0, fg + 50, &mut rng(3)).unwrap();
        assert_eq!(b.len(), fg);
        let a1 = sample_batch(&s, 0, 10, &mut rng(3)).unwrap();
        let a2 = sample_batch(&s, 0, 10, &mut rng(3)).unwrap();
        assert_eq!(a1, a2);
        let ids = view.observed_ids();
        assert!(a1.samples.iter().all(|x| ids.contains(&x.instance)));
        assert!(sample_batch(&s, 0, 1, &mut rng(0)).is_err());
        assert!(matches!(sample_batch(&s, 9, 4, &mut rng(0)), Err(Error::UnknownView(9))));
    }

    #[test]
    fn empty_view_rejected() {
        let mut s = toy();
        s.views[0].observed_instance.iter_mut().for_each(|x| *x = 0);
        assert!(matches!(sample_batch(&s, 0, 4, &mut rng(0)), Err(Error::NoForeground(0))));
    }

    #[test]
    fn lookup_marks_background_absent() {
        let s = toy();
        let t = init_table(&s, &TrainConfig::default()).unwrap();
        let map = lookup_view_embeddings(&s, 0, &t).unwrap();
        let v = &s.views[0];
        for (i, e) in map.iter().enumerate() {
            match v.correspondence[i] {
                None => assert!(e.is_none()),
                Some(p) => assert_eq!(*e, Some(&t.entries[p as usize])),
            }
        }
        let short = EmbeddingTable {
            n_dims: 3,
            entries: t.entries[..1].to_vec(),
        };
        assert!(lookup_view_embeddings(&s, 0, &short).is_err());
    }

    #[test]
    fn zero_cross_weight_matches_single_view_schedule() {
        let s = toy();
        let base = TrainConfig {
            epochs: 5,
            batch_pixels: 32,
            ..TrainConfig::default()
        };
        let a = train(&s, &TrainConfig { w_cross: 0.0, cross_view_epochs: Some(3), ..base }).unwrap();
        let b = train(&s, &TrainConfig { w_cross: 0.0, cross_view_epochs: Some(0), ..base }).unwrap();
        assert_eq!(a.0, b.0);
    }

    #[test]
    fn deterministic_mode_freezes_variance() {
        let s = toy();
        let c = TrainConfig {
            epochs: 4,
            batch_pixels: 32,
            kernel: KernelMode::Deterministic { sigma2: 2.0 },
            ..TrainConfig::default()
        };
        let (t, _) = train(&s, &c).unwrap();
        assert!(t.entries.iter().all(|e| e.log_var.iter().all(|&l| l == 2.0f64.ln())));
    }

    #[test]
    fn cross_view_needs_two_views() {
        let mut s = toy();
        s.views.truncate(1);
        let c = TrainConfig {
            epochs: 2,
            cross_view_epochs: Some(1),
            ..TrainConfig::default()
        };
        assert!(train(&s, &c).is_err());
    }

    #[test]
    fn config_validation() {
        let c = TrainConfig::default();
        assert!(c.validate().is_ok());
        assert!(TrainConfig { cross_view_epochs: Some(c.epochs + 1), ..c }.validate().is_err());
        assert!(TrainConfig { tau: 1.0, ..c }.validate().is_err());
        assert!(TrainConfig { learning_rate: 0.0, ..c }.validate().is_err());
        assert!(TrainConfig { batch_pixels: 1, ..c }.validate().is_err());
    }

    #[test]
    fn checkpoint_roundtrip() {
        let s = toy();
        let t = init_table(&s, &TrainConfig::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("ck.json");
        t.save(&p).unwrap();
        assert_eq!(EmbeddingTable::load(&p).unwrap(), t);
        let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(&p).unwrap()).unwrap();
        assert_eq!(v["n_dims"], 3);
        assert!(v["points"][0]["mu"].is_array());
        assert!(v["points"][0]["log_var"].is_array());
    }
}
