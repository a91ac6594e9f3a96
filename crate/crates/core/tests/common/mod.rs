//! Independent oracles shared by the integration tests and the acceptance suite.
#![allow(dead_code)]

use std::collections::{BTreeMap, HashSet};

use probfuse::kernel::{pp_kernel, GaussianEmbedding};
use probfuse::metrics::{ClassQuality, PqReport, SceneSegment};
use probfuse::mvoa::GroupedFeature;
use rand::Rng;

pub mod grad;

pub const FD_STEP: f64 = 1e-5;
pub const FD_REL_TOL: f64 = 1e-4;
/// Magnitude below which errors are measured against this scale instead.
pub const FD_SCALE_FLOOR: f64 = 1e-5;

pub fn random_embedding<R: Rng>(rng: &mut R, n: usize) -> GaussianEmbedding {
    GaussianEmbedding::new(
        (0..n).map(|_| rng.random_range(-2.0..2.0)).collect(),
        (0..n).map(|_| rng.random_range(-1.5..1.5)).collect(),
    )
    .unwrap()
}

/// `[mu_0.., log_var_0.., mu_1.., log_var_1.., ...]`
pub fn flatten(embs: &[GaussianEmbedding]) -> Vec<f64> {
    embs.iter()
        .flat_map(|e| e.mu.iter().chain(&e.log_var).copied())
        .collect()
}

pub fn unflatten(x: &[f64], n_dims: usize) -> Vec<GaussianEmbedding> {
    x.chunks(2 * n_dims)
        .map(|c| GaussianEmbedding::new(c[..n_dims].to_vec(), c[n_dims..].to_vec()).unwrap())
        .collect()
}

pub fn central_difference(f: &dyn Fn(&[f64]) -> f64, x: &[f64]) -> Vec<f64> {
    let mut p = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = p[i];
            p[i] = orig + FD_STEP;
            let hi = f(&p);
            p[i] = orig - FD_STEP;
            let lo = f(&p);
            p[i] = orig;
            (hi - lo) / (2.0 * FD_STEP)
        })
        .collect()
}

/// Largest relative error between two gradients. Components smaller than
/// the floor are compared on the floor's scale, so tiny gradients need a
/// tiny absolute error rather than being skipped. NaN counts as infinite.
pub fn max_rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| {
            let e = (a - n).abs() / a.abs().max(n.abs()).max(FD_SCALE_FLOOR);
            if e.is_nan() {
                f64::INFINITY
            } else {
                e
            }
        })
        .fold(0.0, f64::max)
}

/// Step-by-step transcription of the greedy association pseudocode, working
/// on explicit candidate lists and recomputing kernels directly.
pub fn reference_mvoa(features: &[GroupedFeature], threshold: f64) -> Vec<usize> {
    let mut c: Vec<usize> = (0..features.len()).collect();
    let mut d = Vec::new();
    while !c.is_empty() {
        // argmax over the remaining scores; ties to lowest (view, local id)
        let mut best = 0;
        for pos in 1..c.len() {
            let (a, b) = (&features[c[pos]], &features[c[best]]);
            let better = a.score > b.score
                || (a.score == b.score
                    && (a.view_id, a.local_instance_id) < (b.view_id, b.local_instance_id));
            if better {
                best = pos;
            }
        }
        let m = c.remove(best);
        d.push(m);
        let mut kept = Vec::new();
        for &i in &c {
            let k = pp_kernel(&features[m].embedding, &features[i].embedding).unwrap();
            if !(k >= threshold) {
                kept.push(i);
            }
        }
        c = kept;
    }
    d
}

fn iou(a: &HashSet<u64>, b: &HashSet<u64>) -> (usize, f64) {
    let inter = a.intersection(b).count();
    let union = a.len() + b.len() - inter;
    (inter, inter as f64 / union as f64)
}

/// Enumerates every class-respecting partial matching restricted to pairs with
/// IoU above one half and keeps the one with the most matches (then the largest
/// IoU sum); counts and averages per class present in the ground truth.
pub fn brute_force_pq(pred: &[SceneSegment], gt: &[SceneSegment]) -> PqReport {
    let ps: Vec<HashSet<u64>> = pred.iter().map(|s| s.pixels.iter().copied().collect()).collect();
    let gs: Vec<HashSet<u64>> = gt.iter().map(|s| s.pixels.iter().copied().collect()).collect();
    let mut best: Vec<Option<usize>> = vec![None; pred.len()];
    let mut best_score = (0usize, 0.0f64);
    let mut current: Vec<Option<usize>> = vec![None; pred.len()];
    let mut used = vec![false; gt.len()];

    fn recurse(
        p: usize,
        pred: &[SceneSegment],
        gt: &[SceneSegment],
        ps: &[HashSet<u64>],
        gs: &[HashSet<u64>],
        current: &mut Vec<Option<usize>>,
        used: &mut Vec<bool>,
        best: &mut Vec<Option<usize>>,
        best_score: &mut (usize, f64),
    ) {
        if p == pred.len() {
            let mut count = 0;
            let mut sum = 0.0;
            for (i, m) in current.iter().enumerate() {
                if let Some(g) = m {
                    count += 1;
                    sum += iou(&ps[i], &gs[*g]).1;
                }
            }
            if count > best_score.0 || (count == best_score.0 && sum > best_score.1) {
                *best_score = (count, sum);
                *best = current.clone();
            }
            return;
        }
        current[p] = None;
        recurse(p + 1, pred, gt, ps, gs, current, used, best, best_score);
        for g in 0..gt.len() {
            if used[g] || gt[g].semantic_class != pred[p].semantic_class {
                continue;
            }
            if iou(&ps[p], &gs[g]).1 <= 0.5 {
                continue;
            }
            used[g] = true;
            current[p] = Some(g);
            recurse(p + 1, pred, gt, ps, gs, current, used, best, best_score);
            used[g] = false;
            current[p] = None;
        }
    }
    recurse(0, pred, gt, &ps, &gs, &mut current, &mut used, &mut best, &mut best_score);

    let mut per_class: BTreeMap<u32, ClassQuality> = BTreeMap::new();
    let mut gt_hit = vec![false; gt.len()];
    for (p, m) in best.iter().enumerate() {
        let c = per_class.entry(pred[p].semantic_class).or_default();
        match m {
            Some(g) => {
                c.tp += 1;
                c.iou_sum += iou(&ps[p], &gs[*g]).1;
                gt_hit[*g] = true;
            }
            None => c.fp += 1,
        }
    }
    for (g, seg) in gt.iter().enumerate() {
        if !gt_hit[g] {
            per_class.entry(seg.semantic_class).or_default().fn_ += 1;
        }
    }
    let mut report = PqReport::default();
    for c in per_class.values_mut() {
        c.sq = if c.tp > 0 { c.iou_sum / c.tp as f64 } else { 0.0 };
        let denom = c.tp as f64 + 0.5 * c.fp as f64 + 0.5 * c.fn_ as f64;
        c.rq = if denom > 0.0 { c.tp as f64 / denom } else { 0.0 };
        c.pq = c.sq * c.rq;
        report.n_tp += c.tp;
        report.n_fp += c.fp;
        report.n_fn += c.fn_;
    }
    let mut classes: Vec<u32> = gt.iter().map(|s| s.semantic_class).collect();
    classes.sort_unstable();
    classes.dedup();
    let n = classes.len() as f64;
    report.pq = classes.iter().map(|c| per_class[c].pq).sum::<f64>() / n;
    report.sq = classes.iter().map(|c| per_class[c].sq).sum::<f64>() / n;
    report.rq = classes.iter().map(|c| per_class[c].rq).sum::<f64>() / n;
    report.per_class = per_class;
    report
}

/// Up to `max_n` grouped features over a few views with quantized scores, so
/// score ties and near-threshold kernels both occur.
pub fn random_features<R: Rng>(r: &mut R, max_n: usize) -> Vec<GroupedFeature> {
    let n = r.random_range(1..=max_n);
    let dim = r.random_range(1..=3);
    let mut next_local = [0u32; 4];
    (0..n)
        .map(|_| {
            let view = r.random_range(0..4usize);
            next_local[view] += 1;
            GroupedFeature {
                embedding: GaussianEmbedding::new(
                    (0..dim).map(|_| r.random_range(-1.5..1.5)).collect(),
                    (0..dim).map(|_| r.random_range(-1.0..1.0)).collect(),
                )
                .unwrap(),
                score: r.random_range(1..=5u32) as f64 / 5.0,
                view_id: view,
                local_instance_id: next_local[view],
                n_members: 1,
            }
        })
        .collect()
}

/// Features for the three-node hand trace: scores 0.9/0.8/0.7 with
/// K(1,2) = 0.95 and K(1,3) = K(2,3) = 0.1 at unit variance in 2-D.
pub fn hand_trace_features() -> Vec<GroupedFeature> {
    // offset d gives K = exp(-d^2 / 8) at unit variance
    let off = |k: f64| (-8.0 * k.ln()).sqrt();
    let d12 = off(0.95);
    let d13 = off(0.1);
    // place 3 so that it sits at distance d13 from both 1 and 2
    let x3 = d12 / 2.0;
    let y3 = (d13 * d13 - x3 * x3).sqrt();
    let pts = [(0.0, 0.0, 0.9), (d12, 0.0, 0.8), (x3, y3, 0.7)];
    pts.iter()
        .enumerate()
        .map(|(i, &(x, y, s))| GroupedFeature {
            embedding: GaussianEmbedding::isotropic(vec![x, y], 1.0).unwrap(),
            score: s,
            view_id: 0,
            local_instance_id: i as u32 + 1,
            n_members: 1,
        })
        .collect()
}

/// Random per-view panoptic masks: up to four (class, instance) labels painted
/// as rectangles, and a prediction that perturbs and relabels them.
pub fn random_mask_pair<R: Rng>(
    r: &mut R,
) -> (Vec<probfuse::metrics::PanopticMask>, Vec<probfuse::metrics::PanopticMask>) {
    use probfuse::metrics::PanopticMask;
    let w = r.random_range(2..=16usize);
    let h = r.random_range(2..=16usize);
    let n_views = r.random_range(1..=2usize);
    let n_things = r.random_range(1..=3u32);
    let labels: Vec<(u32, u32)> = (1..=n_things).map(|i| (r.random_range(1..=2u32), i)).collect();
    let paint = |r: &mut R, m: &mut PanopticMask, lab: &[(u32, u32)], rects: usize| {
        for _ in 0..rects {
            let (c, i) = lab[r.random_range(0..lab.len())];
            let (x0, y0) = (r.random_range(0..w), r.random_range(0..h));
            let (x1, y1) = (r.random_range(x0..w) + 1, r.random_range(y0..h) + 1);
            for y in y0..y1 {
                for x in x0..x1 {
                    m.semantic[y * w + x] = c;
                    m.instance[y * w + x] = i;
                }
            }
        }
    };
    let mut gt = Vec::new();
    let mut pred = Vec::new();
    for _ in 0..n_views {
        let mut g = PanopticMask::background(w, h);
        paint(r, &mut g, &labels, n_things as usize);
        let mut p = g.clone();
        let mut noisy = labels.clone();
        noisy.push((0, 0));
        let extra = r.random_range(0..=2);
        paint(r, &mut p, &noisy, extra);
        gt.push(g);
        pred.push(p);
    }
    // relabel predicted instances consistently across views
    let shift = r.random_range(0..5u32);
    for p in &mut pred {
        for i in p.instance.iter_mut().filter(|i| **i != 0) {
            *i += shift;
        }
    }
    (pred, gt)
}
