//! Train per-point Gaussian embeddings on a synthetic scene and watch the
//! loss terms and the instance separation evolve.
//!
//! `cargo run --release --example training -- [epochs] [seed]`

use probfuse::pipeline::{synthesize, RunConfig};
use probfuse::trainer::train;
use probfuse::{log_pp_kernel, Result};

fn main() -> Result<()> {
    let mut args = std::env::args().skip(1).map(|a| a.parse::<u64>().ok());
    let mut config = RunConfig::default();
    if let Some(e) = args.next().flatten() {
        config.train.epochs = e as usize;
    }
    config.seed = args.next().flatten().unwrap_or(0);

    let scene = synthesize(&config)?;
    let (table, report) = train(&scene, &config.train_config())?;

    println!("epoch  pixel_contra  concen    cross     reg       total");
    for (e, l) in report.history.iter().enumerate() {
        if e % 10 == 0 || e + 1 == report.history.len() {
            println!(
                "{e:>5}  {:<12.5} {:<9.5} {:<9.5} {:<9.5} {:.5}",
                l.pixel_contra, l.concen, l.cross, l.reg, l.total
            );
        }
    }

    // one point per instance, taken from the rectangle centers
    let centers: Vec<usize> = scene
        .instances
        .iter()
        .map(|r| (r.y + r.h / 2) * scene.canvas_width + r.x + r.w / 2)
        .collect();
    let mut worst_between = f64::NEG_INFINITY;
    for (i, &a) in centers.iter().enumerate() {
        for &b in &centers[i + 1..] {
            worst_between = worst_between.max(log_pp_kernel(&table.entries[a], &table.entries[b])?.exp());
        }
    }
    println!("(the last {} epochs add a second view per step, so the totals jump)", config.train.cross_epochs());
    println!("\nlargest similarity between instance centers: {worst_between:.4}");
    Ok(())
}
