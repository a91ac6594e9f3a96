//! Training objectives over sampled pixels: pixel-wise contrastive loss,
//! concentration loss, cross-view constraint and the covariance regularizer.
//!
//! Every loss has a slot-level form that works on a plain slice of embeddings
//! (one slot per sample) and returns per-slot gradients, and a table-level
//! form that reads embeddings through a [`SampleBatch`].

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::{
    log_pp_kernel_grad_unchecked, EmbeddingGrad, GaussianEmbedding, Packed,
};
use crate::trainer::{EmbeddingTable, TableGradient};

/// One sampled pixel: the scene point it sees and its observed view-local instance ID.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sample {
    pub point: usize,
    pub instance: u32,
    pub view: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampleBatch {
    pub samples: Vec<Sample>,
}

impl SampleBatch {
    pub fn new(samples: Vec<Sample>) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Empty("sample batch"));
        }
        Ok(Self { samples })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// The single view this batch was drawn from.
    pub fn view_id(&self) -> Result<usize> {
        let first = self.samples.first().ok_or(Error::Empty("sample batch"))?.view;
        match self.samples.iter().find(|s| s.view != first) {
            Some(s) => Err(Error::MixedViews(first, s.view)),
            None => Ok(first),
        }
    }

    pub fn instance_ids(&self) -> Vec<u32> {
        self.samples.iter().map(|s| s.instance).collect()
    }

    pub fn embeddings<'t>(&self, table: &'t EmbeddingTable) -> Result<Vec<&'t GaussianEmbedding>> {
        self.samples
            .iter()
            .map(|s| {
                table.entries.get(s.point).ok_or(Error::IndexOutOfRange {
                    index: s.point,
                    len: table.entries.len(),
                })
            })
            .collect()
    }

    fn check_single_view(&self) -> Result<()> {
        if self.samples.len() < 2 {
            return Err(Error::BatchTooSmall(self.samples.len()));
        }
        self.view_id().map(|_| ())
    }
}

/// Loss value plus gradients, one per batch slot.
#[derive(Clone, Debug)]
pub struct LossTerm {
    pub value: f64,
    pub grads: Vec<EmbeddingGrad>,
}

impl LossTerm {
    pub fn accumulate_into(&self, batch: &SampleBatch, grad: &mut TableGradient, weight: f64) {
        for (s, g) in batch.samples.iter().zip(&self.grads) {
            grad.entries[s.point].add_scaled(g, weight);
        }
    }
}

/// How a set of Gaussians is collapsed into one.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AveragingMode {
    /// Mean of means and mean of variances.
    #[default]
    ParameterMean,
    /// Variance of the average of independent Gaussians: sum of variances over n².
    IndependentSum,
}

pub fn average_embeddings(members: &[&GaussianEmbedding]) -> Result<GaussianEmbedding> {
    average_embeddings_with(members, AveragingMode::ParameterMean)
}

pub fn average_embeddings_with(
    members: &[&GaussianEmbedding],
    mode: AveragingMode,
) -> Result<GaussianEmbedding> {
    let first = members.first().ok_or(Error::Empty("embedding list"))?;
    let n_dims = first.dim();
    for m in members {
        if m.dim() != n_dims {
            return Err(Error::DimensionMismatch {
                expected: n_dims,
                got: m.dim(),
            });
        }
    }
    if members.len() == 1 {
        return Ok((*first).clone());
    }
    Ok(average_unchecked(members, mode))
}

fn average_unchecked(members: &[&GaussianEmbedding], mode: AveragingMode) -> GaussianEmbedding {
    let n_dims = members[0].dim();
    let count = members.len() as f64;
    let mut mu = vec![0.0; n_dims];
    let mut var = vec![0.0; n_dims];
    for m in members {
        for d in 0..n_dims {
            mu[d] += m.mu[d];
            var[d] += m.var(d);
        }
    }
    let var_div = match mode {
        AveragingMode::ParameterMean => count,
        AveragingMode::IndependentSum => count * count,
    };
    GaussianEmbedding {
        mu: mu.into_iter().map(|x| x / count).collect(),
        log_var: var.into_iter().map(|v| (v / var_div).ln()).collect(),
    }
}

/// Backpropagates a gradient on the average into its members.
fn average_backward(members: &[&GaussianEmbedding], avg_grad: &EmbeddingGrad) -> Vec<EmbeddingGrad> {
    let n_dims = members[0].dim();
    let count = members.len() as f64;
    let var_sums: Vec<f64> = (0..n_dims)
        .map(|d| members.iter().map(|m| m.var(d)).sum())
        .collect();
    let mut out = vec![EmbeddingGrad::zeros(n_dims); members.len()];
    for (m, g) in members.iter().zip(out.iter_mut()) {
        for d in 0..n_dims {
            g.d_mu[d] += avg_grad.d_mu[d] / count;
            let l = m.log_var[d];
            if l >= crate::kernel::log_var_min() && l <= crate::kernel::log_var_max() {
                // d ln(sum v / c) / d ln v_i = v_i / sum v, for either divisor.
                g.d_log_var[d] += avg_grad.d_log_var[d] * m.var(d) / var_sums[d];
            }
        }
    }
    out
}

/// Pixel-wise contrastive loss over one view's samples.
///
/// `-(1/|B|) sum_u ln( sum_{v same id} e^{K_uv} / sum_v e^{K_uv} )`, with `v` ranging
/// over the whole batch including `u` itself.
pub fn pixel_contrastive(embs: &[&GaussianEmbedding], ids: &[u32]) -> Result<LossTerm> {
    let b = embs.len();
    if b < 2 {
        return Err(Error::BatchTooSmall(b));
    }
    if ids.len() != b {
        return Err(Error::DimensionMismatch {
            expected: b,
            got: ids.len(),
        });
    }
    let inv_b = 1.0 / b as f64;

    let packed = Packed::new(embs);
    let n = packed.dim();

    // K_uv and tanh(ln v_u - ln v_v) per dimension, row-major; the upper
    // triangle is computed and mirrored.
    let upper: Vec<(Vec<f64>, Vec<f64>)> = (0..b)
        .into_par_iter()
        .map(|u| {
            let mut ks = Vec::with_capacity(b - u);
            let mut th = vec![0.0; (b - u) * n];
            for (off, v) in (u..b).enumerate() {
                ks.push(packed.log_k_tanh(u, v, &mut th[off * n..(off + 1) * n]).exp());
            }
            (ks, th)
        })
        .collect();
    let mut k = vec![0.0f64; b * b];
    let mut tanh = vec![0.0f64; b * b * n];
    for (u, (ks, th)) in upper.iter().enumerate() {
        for (off, &x) in ks.iter().enumerate() {
            let v = u + off;
            k[u * b + v] = x;
            k[v * b + u] = x;
            for d in 0..n {
                tanh[(u * b + v) * n + d] = th[off * n + d];
                tanh[(v * b + u) * n + d] = -th[off * n + d];
            }
        }
    }
    let exp_k: Vec<f64> = k.iter().map(|x| x.exp()).collect();

    let mut value = 0.0;
    let mut pos_sum = vec![0.0; b];
    let mut all_sum = vec![0.0; b];
    for u in 0..b {
        let row = &exp_k[u * b..(u + 1) * b];
        let mut p = 0.0;
        let mut z = 0.0;
        for v in 0..b {
            z += row[v];
            if ids[v] == ids[u] {
                p += row[v];
            }
        }
        pos_sum[u] = p;
        all_sum[u] = z;
        value -= (p / z).ln();
    }
    value *= inv_b;

    // dL/dK_uv collects e^K_uv (1/Z_u - [same id] 1/P_u) / |B| from row u and
    // the mirrored term from row v; e^K is symmetric.
    let inv_z: Vec<f64> = all_sum.iter().map(|z| 1.0 / z).collect();
    let inv_p: Vec<f64> = pos_sum.iter().map(|p| 1.0 / p).collect();
    let coef = |u: usize, v: usize| -> f64 {
        let mut w = inv_z[u] + inv_z[v];
        if ids[u] == ids[v] {
            w -= inv_p[u] + inv_p[v];
        }
        exp_k[u * b + v] * w * inv_b
    };

    let grads: Vec<EmbeddingGrad> = (0..b)
        .into_par_iter()
        .map(|u| {
            let mut g = EmbeddingGrad::zeros(embs[u].dim());
            for v in 0..b {
                if v == u {
                    continue;
                }
                let c = coef(u, v);
                if c == 0.0 {
                    continue;
                }
                let t = &tanh[(u * b + v) * n..(u * b + v + 1) * n];
                packed.add_grad_a(u, v, t, c * k[u * b + v], &mut g.d_mu, &mut g.d_log_var);
            }
            g
        })
        .collect();

    Ok(LossTerm { value, grads })
}

/// Groups slot indices by instance ID, ordered by first appearance.
fn group_slots(ids: &[u32]) -> Vec<Vec<usize>> {
    let mut order: Vec<u32> = Vec::new();
    let mut groups: Vec<Vec<usize>> = Vec::new();
    for (i, id) in ids.iter().enumerate() {
        match order.iter().position(|x| x == id) {
            Some(g) => groups[g].push(i),
            None => {
                order.push(*id);
                groups.push(vec![i]);
            }
        }
    }
    groups
}

/// Concentration loss: `-(1/|B|) sum_u ln K(F_u, mean of u's instance)`.
/// Gradients flow through the average into every member.
pub fn concentration(
    embs: &[&GaussianEmbedding],
    ids: &[u32],
    mode: AveragingMode,
) -> Result<LossTerm> {
    let b = embs.len();
    if b < 2 {
        return Err(Error::BatchTooSmall(b));
    }
    if ids.len() != b {
        return Err(Error::DimensionMismatch {
            expected: b,
            got: ids.len(),
        });
    }
    let inv_b = 1.0 / b as f64;
    let n_dims = embs[0].dim();
    let mut grads = vec![EmbeddingGrad::zeros(n_dims); b];
    let mut value = 0.0;

    for slots in group_slots(ids) {
        let members: Vec<&GaussianEmbedding> = slots.iter().map(|&i| embs[i]).collect();
        let avg = average_unchecked(&members, mode);
        let mut avg_grad = EmbeddingGrad::zeros(n_dims);
        for &i in &slots {
            let (log_k, kg) = log_pp_kernel_grad_unchecked(embs[i], &avg);
            value -= log_k;
            for d in 0..n_dims {
                grads[i].d_mu[d] -= inv_b * kg.d_mu_a[d];
                grads[i].d_log_var[d] -= inv_b * kg.d_logvar_a[d];
                avg_grad.d_mu[d] -= inv_b * kg.d_mu_b[d];
                avg_grad.d_log_var[d] -= inv_b * kg.d_logvar_b[d];
            }
        }
        for (&i, g) in slots.iter().zip(average_backward(&members, &avg_grad)) {
            grads[i].add_scaled(&g, 1.0);
        }
    }
    Ok(LossTerm {
        value: value * inv_b,
        grads,
    })
}

pub fn pixel_contrastive_loss(batch: &SampleBatch, table: &EmbeddingTable) -> Result<LossTerm> {
    batch.check_single_view()?;
    pixel_contrastive(&batch.embeddings(table)?, &batch.instance_ids())
}

pub fn concentration_loss(
    batch: &SampleBatch,
    table: &EmbeddingTable,
    mode: AveragingMode,
) -> Result<LossTerm> {
    batch.check_single_view()?;
    concentration(&batch.embeddings(table)?, &batch.instance_ids(), mode)
}

/// Sum of the pixel-contrastive and concentration losses.
pub fn combined_contrastive_loss(
    batch: &SampleBatch,
    table: &EmbeddingTable,
    mode: AveragingMode,
) -> Result<LossTerm> {
    let a = pixel_contrastive_loss(batch, table)?;
    let b = concentration_loss(batch, table, mode)?;
    let grads = a
        .grads
        .into_iter()
        .zip(b.grads)
        .map(|(mut x, y)| {
            x.add_scaled(&y, 1.0);
            x
        })
        .collect();
    Ok(LossTerm {
        value: a.value + b.value,
        grads,
    })
}

/// Index pairs `(r, s)` into two per-view embedding lists.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct PositivePairSet {
    pub pairs: Vec<(usize, usize)>,
}

impl PositivePairSet {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

/// Collects every pair whose kernel exceeds `tau`. No gradient flows through the mining.
pub fn mine_cross_view_pairs(
    emb_m: &[&GaussianEmbedding],
    view_m: usize,
    emb_n: &[&GaussianEmbedding],
    view_n: usize,
    tau: f64,
) -> Result<PositivePairSet> {
    if view_m == view_n {
        return Err(Error::InvalidArgument(format!(
            "cross-view mining needs two distinct views, got {view_m} twice"
        )));
    }
    if emb_m.is_empty() || emb_n.is_empty() {
        return Err(Error::Empty("embedding list"));
    }
    if !(tau > 0.0 && tau < 1.0) {
        return Err(Error::InvalidArgument(format!("tau must lie in (0, 1), got {tau}")));
    }
    let n_dims = emb_m[0].dim();
    if let Some(e) = emb_m.iter().chain(emb_n).find(|e| e.dim() != n_dims) {
        return Err(Error::DimensionMismatch {
            expected: n_dims,
            got: e.dim(),
        });
    }
    let all: Vec<&GaussianEmbedding> = emb_m.iter().chain(emb_n).copied().collect();
    let packed = Packed::new(&all);
    let off = emb_m.len();
    let pairs = (0..emb_m.len())
        .into_par_iter()
        .flat_map_iter(|r| {
            let packed = &packed;
            (0..emb_n.len())
                .filter(move |&s| packed.log_k(r, off + s).exp() > tau)
                .map(move |s| (r, s))
        })
        .collect();
    Ok(PositivePairSet { pairs })
}

/// Cross-view constraint `-(1/|P|) sum ln K(F_r, F_s)`. Empty pair sets give zero loss.
pub fn cross_view(
    pairs: &PositivePairSet,
    emb_m: &[&GaussianEmbedding],
    emb_n: &[&GaussianEmbedding],
) -> Result<(f64, Vec<EmbeddingGrad>, Vec<EmbeddingGrad>)> {
    let n_dims = emb_m.first().or(emb_n.first()).map_or(1, |e| e.dim());
    let mut gm = vec![EmbeddingGrad::zeros(n_dims); emb_m.len()];
    let mut gn = vec![EmbeddingGrad::zeros(n_dims); emb_n.len()];
    if pairs.is_empty() {
        return Ok((0.0, gm, gn));
    }
    let inv = 1.0 / pairs.len() as f64;
    let mut value = 0.0;
    for &(r, s) in &pairs.pairs {
        let a = emb_m.get(r).ok_or(Error::IndexOutOfRange {
            index: r,
            len: emb_m.len(),
        })?;
        let b = emb_n.get(s).ok_or(Error::IndexOutOfRange {
            index: s,
            len: emb_n.len(),
        })?;
        let (log_k, kg) = log_pp_kernel_grad_unchecked(a, b);
        value -= log_k;
        for d in 0..n_dims {
            gm[r].d_mu[d] -= inv * kg.d_mu_a[d];
            gm[r].d_log_var[d] -= inv * kg.d_logvar_a[d];
            gn[s].d_mu[d] -= inv * kg.d_mu_b[d];
            gn[s].d_log_var[d] -= inv * kg.d_logvar_b[d];
        }
    }
    Ok((value * inv, gm, gn))
}

/// Table-level cross-view loss over two batches of distinct views.
pub fn cross_view_loss(
    pairs: &PositivePairSet,
    batch_m: &SampleBatch,
    batch_n: &SampleBatch,
    table: &EmbeddingTable,
) -> Result<(LossTerm, LossTerm)> {
    let (value, gm, gn) = cross_view(pairs, &batch_m.embeddings(table)?, &batch_n.embeddings(table)?)?;
    Ok((
        LossTerm { value, grads: gm },
        LossTerm {
            value,
            grads: gn,
        },
    ))
}

/// Log of the variance product, `sum_d log_var[d]`; its gradient is 1 per log-variance.
pub fn regularization_loss(e: &GaussianEmbedding) -> (f64, EmbeddingGrad) {
    let n = e.dim();
    let value = (0..n).map(|d| e.clamped_log_var(d)).sum();
    let mut g = EmbeddingGrad::zeros(n);
    for d in 0..n {
        let l = e.log_var[d];
        if l >= crate::kernel::log_var_min() && l <= crate::kernel::log_var_max() {
            g.d_log_var[d] = 1.0;
        }
    }
    (value, g)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub w_cross: f64,
    pub w_reg: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            w_cross: 0.05,
            w_reg: 0.001,
        }
    }
}

/// Per-term values of one total-loss evaluation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub pixel_contra: f64,
    pub concen: f64,
    pub cross: f64,
    pub reg: f64,
    pub total: f64,
}

/// Cross-view pairs mined between `batches[batch_m]` and `batches[batch_n]`.
#[derive(Clone, Copy, Debug)]
pub struct CrossViewTerm<'a> {
    pub pairs: &'a PositivePairSet,
    pub batch_m: usize,
    pub batch_n: usize,
}

/// Full objective: contrastive terms summed over batches, plus the weighted
/// cross-view term and the weighted regularizer averaged over every sampled
/// embedding. Gradients are added into `grad`.
pub fn total_loss(
    batches: &[SampleBatch],
    cross: Option<CrossViewTerm<'_>>,
    table: &EmbeddingTable,
    weights: LossWeights,
    mode: AveragingMode,
    grad: &mut TableGradient,
) -> Result<LossBreakdown> {
    if weights.w_cross < 0.0 || weights.w_reg < 0.0 {
        return Err(Error::InvalidArgument("loss weights must be non-negative".into()));
    }
    if batches.is_empty() {
        return Err(Error::Empty("batch list"));
    }
    let mut out = LossBreakdown::default();
    for batch in batches {
        let pc = pixel_contrastive_loss(batch, table)?;
        let cc = concentration_loss(batch, table, mode)?;
        pc.accumulate_into(batch, grad, 1.0);
        cc.accumulate_into(batch, grad, 1.0);
        out.pixel_contra += pc.value;
        out.concen += cc.value;
    }

    if let Some(term) = cross {
        let bm = batches.get(term.batch_m).ok_or(Error::IndexOutOfRange {
            index: term.batch_m,
            len: batches.len(),
        })?;
        let bn = batches.get(term.batch_n).ok_or(Error::IndexOutOfRange {
            index: term.batch_n,
            len: batches.len(),
        })?;
        let (lm, ln) = cross_view_loss(term.pairs, bm, bn, table)?;
        if weights.w_cross != 0.0 {
            lm.accumulate_into(bm, grad, weights.w_cross);
            ln.accumulate_into(bn, grad, weights.w_cross);
        }
        out.cross = lm.value;
    }

    let count: usize = batches.iter().map(|b| b.len()).sum();
    let scale = 1.0 / count as f64;
    for batch in batches {
        for s in &batch.samples {
            let (v, g) = regularization_loss(&table.entries[s.point]);
            out.reg += v * scale;
            if weights.w_reg != 0.0 {
                grad.entries[s.point].add_scaled(&g, weights.w_reg * scale);
            }
        }
    }

    out.total = out.pixel_contra + out.concen + weights.w_cross * out.cross + weights.w_reg * out.reg;
    Ok(out)
}
