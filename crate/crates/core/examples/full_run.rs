//! End-to-end run on a clean synthetic scene, all in memory.
//!
//! `cargo run --release --example full_run -- [seed]`

use std::time::Instant;

use probfuse::pipeline::{run_in_memory, RunConfig};

fn main() -> probfuse::Result<()> {
    let seed = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(0);
    let config = RunConfig {
        seed,
        ..RunConfig::default()
    };
    let t = Instant::now();
    let out = run_in_memory(&config)?;
    let last = out.training.history.last().copied().unwrap_or_default();
    println!("trained {} epochs, final loss {:.4}", out.training.history.len(), last.total);
    println!(
        "prototypes {} (ground truth {}), threshold {:.4}",
        out.clustering.prototypes.len(),
        out.scene.gt_instance_count(),
        out.clustering.prototypes.threshold
    );
    println!("PQ {:.4}  SQ {:.4}  RQ {:.4}", out.metrics.pq, out.metrics.sq, out.metrics.rq);
    println!(
        "variance product: boundary {:.3e}, interior {:.3e}",
        out.uncertainty.boundary_mean, out.uncertainty.interior_mean
    );
    println!("elapsed {:.2?}", t.elapsed());
    Ok(())
}
