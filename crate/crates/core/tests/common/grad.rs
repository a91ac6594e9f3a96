//! Finite-difference checks of every analytic gradient, on random configurations.

use probfuse::kernel::{pp_kernel, pp_kernel_grad, GaussianEmbedding};
use probfuse::loss::{
    concentration, cross_view, pixel_contrastive, regularization_loss, total_loss, AveragingMode,
    CrossViewTerm, LossWeights, PositivePairSet, Sample, SampleBatch,
};
use probfuse::seed::rng;
use probfuse::trainer::{EmbeddingTable, TableGradient};
use rand::Rng;

use super::{central_difference, flatten, max_rel_error, random_embedding, unflatten};

/// Outcome of one gradient family: worst relative error over `configs` draws.
pub struct GradCheck {
    pub name: &'static str,
    pub configs: usize,
    pub max_rel_error: f64,
}

fn flat_grads(g: &[probfuse::kernel::EmbeddingGrad]) -> Vec<f64> {
    g.iter()
        .flat_map(|e| e.d_mu.iter().chain(&e.d_log_var).copied())
        .collect()
}

fn random_ids<R: Rng>(r: &mut R, b: usize) -> Vec<u32> {
    let k = r.random_range(1..=3u32);
    (0..b).map(|_| r.random_range(1..=k)).collect()
}

pub fn pp_kernel_check(seed: u64, configs: usize) -> GradCheck {
    let mut r = rng(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..configs {
        let n = r.random_range(1..=4);
        let embs = vec![random_embedding(&mut r, n), random_embedding(&mut r, n)];
        let (_, g) = pp_kernel_grad(&embs[0], &embs[1]).unwrap();
        let analytic = flat_grads(&[g.a(), g.b()]);
        let f = |x: &[f64]| {
            let e = unflatten(x, n);
            pp_kernel(&e[0], &e[1]).unwrap()
        };
        worst = worst.max(max_rel_error(&analytic, &central_difference(&f, &flatten(&embs))));
    }
    GradCheck {
        name: "pp_kernel",
        configs,
        max_rel_error: worst,
    }
}

fn refs(e: &[GaussianEmbedding]) -> Vec<&GaussianEmbedding> {
    e.iter().collect()
}

pub fn pixel_contrastive_check(seed: u64, configs: usize) -> GradCheck {
    let mut r = rng(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..configs {
        let n = r.random_range(1..=3);
        let b = r.random_range(2..=7);
        let embs: Vec<_> = (0..b).map(|_| random_embedding(&mut r, n)).collect();
        let ids = random_ids(&mut r, b);
        let analytic = flat_grads(&pixel_contrastive(&refs(&embs), &ids).unwrap().grads);
        let f = |x: &[f64]| pixel_contrastive(&refs(&unflatten(x, n)), &ids).unwrap().value;
        worst = worst.max(max_rel_error(&analytic, &central_difference(&f, &flatten(&embs))));
    }
    GradCheck {
        name: "pixel_contrastive",
        configs,
        max_rel_error: worst,
    }
}

pub fn concentration_check(seed: u64, configs: usize, mode: AveragingMode) -> GradCheck {
    let mut r = rng(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..configs {
        let n = r.random_range(1..=3);
        let b = r.random_range(2..=7);
        let embs: Vec<_> = (0..b).map(|_| random_embedding(&mut r, n)).collect();
        let ids = random_ids(&mut r, b);
        let analytic = flat_grads(&concentration(&refs(&embs), &ids, mode).unwrap().grads);
        let f = |x: &[f64]| concentration(&refs(&unflatten(x, n)), &ids, mode).unwrap().value;
        worst = worst.max(max_rel_error(&analytic, &central_difference(&f, &flatten(&embs))));
    }
    GradCheck {
        name: match mode {
            AveragingMode::ParameterMean => "concentration",
            AveragingMode::IndependentSum => "concentration (independent-sum averaging)",
        },
        configs,
        max_rel_error: worst,
    }
}

pub fn cross_view_check(seed: u64, configs: usize) -> GradCheck {
    let mut r = rng(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..configs {
        let n = r.random_range(1..=3);
        let (bm, bn) = (r.random_range(1..=5), r.random_range(1..=5));
        let embs: Vec<_> = (0..bm + bn).map(|_| random_embedding(&mut r, n)).collect();
        let n_pairs = r.random_range(1..=6);
        // pair membership is fixed (stop-gradient), so any set is valid here
        let pairs = PositivePairSet {
            pairs: (0..n_pairs)
                .map(|_| (r.random_range(0..bm), r.random_range(0..bn)))
                .collect(),
        };
        let (_, gm, gn) = cross_view(&pairs, &refs(&embs[..bm]), &refs(&embs[bm..])).unwrap();
        let mut analytic = flat_grads(&gm);
        analytic.extend(flat_grads(&gn));
        let f = |x: &[f64]| {
            let e = unflatten(x, n);
            cross_view(&pairs, &refs(&e[..bm]), &refs(&e[bm..])).unwrap().0
        };
        worst = worst.max(max_rel_error(&analytic, &central_difference(&f, &flatten(&embs))));
    }
    GradCheck {
        name: "cross_view",
        configs,
        max_rel_error: worst,
    }
}

pub fn regularization_check(seed: u64, configs: usize) -> GradCheck {
    let mut r = rng(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..configs {
        let n = r.random_range(1..=4);
        let e = random_embedding(&mut r, n);
        let (_, g) = regularization_loss(&e);
        let analytic = flat_grads(&[g]);
        let f = |x: &[f64]| regularization_loss(&unflatten(x, n)[0]).0;
        worst = worst.max(max_rel_error(&analytic, &central_difference(&f, &flatten(&[e.clone()]))));
    }
    GradCheck {
        name: "regularization",
        configs,
        max_rel_error: worst,
    }
}

/// Full weighted objective over two batches from different views that share
/// table points, with a mined pair set.
pub fn total_loss_check(seed: u64, configs: usize) -> GradCheck {
    let mut r = rng(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..configs {
        let n = r.random_range(1..=3);
        let n_points = r.random_range(3..=8);
        let entries: Vec<_> = (0..n_points).map(|_| random_embedding(&mut r, n)).collect();
        let batch = |view: usize, r: &mut rand_chacha::ChaCha8Rng| {
            let b = r.random_range(2..=5);
            SampleBatch::new(
                (0..b)
                    .map(|_| Sample {
                        point: r.random_range(0..n_points),
                        instance: r.random_range(1..=2),
                        view,
                    })
                    .collect(),
            )
            .unwrap()
        };
        let batches = vec![batch(0, &mut r), batch(1, &mut r)];
        let pairs = PositivePairSet {
            pairs: (0..r.random_range(0..=4))
                .map(|_| {
                    (
                        r.random_range(0..batches[0].len()),
                        r.random_range(0..batches[1].len()),
                    )
                })
                .collect(),
        };
        let weights = LossWeights {
            w_cross: r.random_range(0.0..1.0),
            w_reg: r.random_range(0.0..0.5),
        };
        let mode = if r.random_bool(0.5) {
            AveragingMode::ParameterMean
        } else {
            AveragingMode::IndependentSum
        };
        let eval = |table: &EmbeddingTable, grad: &mut TableGradient| {
            let term = CrossViewTerm {
                pairs: &pairs,
                batch_m: 0,
                batch_n: 1,
            };
            total_loss(&batches, Some(term), table, weights, mode, grad).unwrap().total
        };
        let table = EmbeddingTable {
            n_dims: n,
            entries: entries.clone(),
        };
        let mut grad = TableGradient::for_table(&table);
        eval(&table, &mut grad);
        let analytic = flat_grads(&grad.entries);
        let f = |x: &[f64]| {
            let t = EmbeddingTable {
                n_dims: n,
                entries: unflatten(x, n),
            };
            let mut scratch = TableGradient::for_table(&t);
            eval(&t, &mut scratch)
        };
        worst = worst.max(max_rel_error(&analytic, &central_difference(&f, &flatten(&entries))));
    }
    GradCheck {
        name: "total_loss",
        configs,
        max_rel_error: worst,
    }
}

pub fn all_checks(seed: u64, configs: usize) -> Vec<GradCheck> {
    vec![
        pp_kernel_check(seed, configs),
        pixel_contrastive_check(seed + 1, configs),
        concentration_check(seed + 2, configs, AveragingMode::ParameterMean),
        concentration_check(seed + 3, configs, AveragingMode::IndependentSum),
        cross_view_check(seed + 4, configs),
        regularization_check(seed + 5, configs),
        total_loss_check(seed + 6, configs),
    ]
}
