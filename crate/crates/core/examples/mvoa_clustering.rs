//! Greedy prototype selection on hand-built grouped features, and how the
//! threshold rule decides how many objects survive.
//!
//! `cargo run --release --example mvoa_clustering`

use probfuse::mvoa::{build_similarity_graph, compute_threshold, select_prototypes, GroupedFeature, ThresholdMode};
use probfuse::{GaussianEmbedding, Result};

fn feature(mu: [f64; 2], var: f64, score: f64, view: usize, id: u32) -> Result<GroupedFeature> {
    Ok(GroupedFeature {
        embedding: GaussianEmbedding::isotropic(mu.to_vec(), var)?,
        score,
        view_id: view,
        local_instance_id: id,
        n_members: 1,
    })
}

fn main() -> Result<()> {
    // three objects seen from three views; object B is uncertain in view 2,
    // and the variance mismatch alone keeps it apart under a strict threshold
    let features = vec![
        feature([0.0, 0.0], 0.2, 0.95, 0, 1)?,
        feature([3.0, 0.0], 0.2, 0.90, 0, 2)?,
        feature([0.0, 3.0], 0.2, 0.92, 0, 3)?,
        feature([0.1, 0.0], 0.2, 0.93, 1, 1)?,
        feature([3.0, 0.1], 0.2, 0.91, 1, 2)?,
        feature([2.7, 0.3], 1.5, 0.60, 2, 1)?,
        feature([0.0, 2.9], 0.2, 0.88, 2, 2)?,
    ];
    let graph = build_similarity_graph(&features)?;

    for mode in [ThresholdMode::Midpoint, ThresholdMode::MeanOfViewMeans, ThresholdMode::PooledPairs] {
        let t = compute_threshold(&features, mode, None)?;
        let d = select_prototypes(&features, &graph, t)?;
        println!("{mode:?}: threshold {t:.4}, {} prototypes from features {:?}", d.len(), d.sources);
    }
    for t in [0.05, 0.5, 0.999] {
        let d = select_prototypes(&features, &graph, t)?;
        println!("manual {t}: {} prototypes", d.len());
    }
    Ok(())
}
