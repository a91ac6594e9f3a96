//! Where the learned variance ends up: train on a scene with boundary noise
//! and compare the variance product near ground-truth edges with the interior.
//!
//! `cargo run --release --example uncertainty -- [window] [seed]`

use probfuse::metrics::uncertainty_stats;
use probfuse::pipeline::{synthesize, RunConfig};
use probfuse::trainer::train;
use probfuse::Result;

fn main() -> Result<()> {
    let mut args = std::env::args().skip(1).map(|a| a.parse::<u64>().ok());
    let mut config = RunConfig::default();
    config.noise.n_anchors = 100;
    config.noise.window = args.next().flatten().unwrap_or(5) as usize;
    config.noise.split_prob = 0.3;
    config.seed = args.next().flatten().unwrap_or(0);

    let scene = synthesize(&config)?;
    let (table, _) = train(&scene, &config.train_config())?;
    let stats = uncertainty_stats(&scene, &table, config.band_radius)?;

    println!(
        "mean variance product: boundary {:.3e}, interior {:.3e}, ratio {:.3}",
        stats.boundary_mean,
        stats.interior_mean,
        stats.boundary_mean / stats.interior_mean
    );
    println!("\nlog10 bin        boundary  interior");
    let (b, i) = (stats.boundary.frequencies(), stats.interior.frequencies());
    let edges = stats.boundary.bin_edges();
    for k in 0..b.len() {
        if b[k] > 0.0 || i[k] > 0.0 {
            println!("[{:>5.1},{:>5.1})   {:>7.4}   {:>7.4}", edges[k], edges[k + 1], b[k], i[k]);
        }
    }
    Ok(())
}
