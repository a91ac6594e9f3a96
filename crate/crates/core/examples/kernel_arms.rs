//! Probabilistic embeddings against the fixed-variance baseline on the same
//! noisy scene. With equal isotropic variance the kernel is an RBF kernel,
//! so the baseline cannot down-weight unreliable pixels.
//!
//! `cargo run --release --example kernel_arms -- [window] [seed]`

use probfuse::pipeline::{run_in_memory, RunConfig};
use probfuse::synth::SceneParams;
use probfuse::trainer::KernelMode;
use probfuse::Result;

fn main() -> Result<()> {
    let mut args = std::env::args().skip(1).map(|a| a.parse::<u64>().ok());
    let mut config = RunConfig {
        scene: SceneParams {
            k_instances: 20,
            n_views: 8,
            canvas_width: 96,
            canvas_height: 96,
            view_width: 80,
            view_height: 80,
            ..SceneParams::default()
        },
        ..RunConfig::default()
    };
    config.noise.split_prob = 0.3;
    config.noise.n_anchors = 100;
    config.noise.window = args.next().flatten().unwrap_or(5) as usize;
    config.seed = args.next().flatten().unwrap_or(0);

    for (name, kernel) in [
        ("probabilistic", KernelMode::Probabilistic),
        ("fixed variance", KernelMode::Deterministic { sigma2: 1.0 }),
    ] {
        let o = run_in_memory(&config.clone().with_kernel(kernel))?;
        println!(
            "{name:<15} PQ {:.4}  SQ {:.4}  RQ {:.4}  prototypes {} of {}",
            o.metrics.pq,
            o.metrics.sq,
            o.metrics.rq,
            o.clustering.prototypes.len(),
            o.scene.gt_instance_count()
        );
    }
    Ok(())
}
