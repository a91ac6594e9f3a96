//! Similarity between Gaussian embeddings: how the mean offset and the
//! variances shape the probability product kernel, and where it reduces to
//! an RBF kernel.
//!
//! `cargo run --release --example kernel_basics`

use probfuse::{pp_kernel, pp_kernel_grad, rbf_kernel, GaussianEmbedding};

fn main() -> probfuse::Result<()> {
    let anchor = GaussianEmbedding::isotropic(vec![0.0, 0.0], 1.0)?;

    println!("mean offset vs similarity (unit variance)");
    for d in [0.0, 0.5, 1.0, 2.0, 4.0] {
        let other = GaussianEmbedding::isotropic(vec![d, 0.0], 1.0)?;
        let rbf = rbf_kernel(&anchor.mu, &other.mu, 1.0)?;
        println!("  offset {d:>3}: K {:.6}  rbf {rbf:.6}", pp_kernel(&anchor, &other)?);
    }

    // an uncertain embedding is forgiving about distance, but pays for the
    // variance mismatch itself
    println!("\nvariance of the second embedding at offset 2");
    for var in [0.1, 1.0, 10.0, 100.0] {
        let other = GaussianEmbedding::isotropic(vec![2.0, 0.0], var)?;
        println!("  var {var:>5}: K {:.6}", pp_kernel(&anchor, &other)?);
    }

    let b = GaussianEmbedding::from_var(vec![1.0, -0.5], &[2.0, 0.5])?;
    let (k, g) = pp_kernel_grad(&anchor, &b)?;
    println!("\nK {k:.6}");
    println!("  dK/dmu_a      {:?}", g.d_mu_a);
    println!("  dK/dlog_var_a {:?}", g.d_logvar_a);
    Ok(())
}
