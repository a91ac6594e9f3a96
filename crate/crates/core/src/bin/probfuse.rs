use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};

use probfuse::pipeline::{cmd_cluster, cmd_eval, cmd_run, cmd_synth, cmd_train, RunConfig};
use probfuse::trainer::KernelMode;

#[derive(Parser)]
#[command(name = "probfuse", about = "Multi-view panoptic fusion with probabilistic embeddings")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic scene into <out>/scene.
    Synth(Common),
    /// Train embeddings on a scene directory.
    Train {
        #[arg(long)]
        scene: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Extract prototypes and predict per-view masks.
    Cluster {
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Score predicted masks against the scene's ground truth.
    Eval {
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        pred: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// synth, train, cluster, eval and visualization in one go.
    Run(Common),
}

#[derive(Clone, Copy, ValueEnum)]
enum KernelArg {
    Probabilistic,
    Deterministic,
}

#[derive(Args)]
struct Common {
    /// JSON run configuration; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value_t = 1)]
    threads: usize,
    #[arg(long, value_enum)]
    kernel: Option<KernelArg>,
    /// Fixed variance of the deterministic arm.
    #[arg(long)]
    fixed_sigma2: Option<f64>,
    #[arg(long)]
    permute_ids: bool,
    #[arg(long)]
    split_prob: Option<f64>,
    #[arg(long)]
    anchors: Option<usize>,
    /// Boundary-noise window size (odd).
    #[arg(long)]
    window: Option<usize>,
    /// Suppression threshold override.
    #[arg(long)]
    threshold: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
}

const DEFAULT_FIXED_SIGMA2: f64 = 1.0;

impl Common {
    fn config(&self) -> anyhow::Result<RunConfig> {
        let mut c = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(s) = self.seed {
            c.seed = s;
        }
        let current_sigma2 = match c.train.kernel {
            KernelMode::Deterministic { sigma2 } => Some(sigma2),
            KernelMode::Probabilistic => None,
        };
        match self.kernel {
            Some(KernelArg::Probabilistic) => {
                if self.fixed_sigma2.is_some() {
                    bail!("--fixed-sigma2 applies to the deterministic kernel only");
                }
                c.train.kernel = KernelMode::Probabilistic;
            }
            Some(KernelArg::Deterministic) => {
                let sigma2 = self.fixed_sigma2.or(current_sigma2).unwrap_or(DEFAULT_FIXED_SIGMA2);
                c.train.kernel = KernelMode::Deterministic { sigma2 };
            }
            None => match (self.fixed_sigma2, current_sigma2) {
                (Some(sigma2), Some(_)) => c.train.kernel = KernelMode::Deterministic { sigma2 },
                (Some(_), None) => bail!("--fixed-sigma2 needs --kernel deterministic"),
                _ => {}
            },
        }
        if self.permute_ids {
            c.noise.permute_ids = true;
        }
        if let Some(p) = self.split_prob {
            c.noise.split_prob = p;
        }
        if let Some(n) = self.anchors {
            c.noise.n_anchors = n;
        }
        if let Some(w) = self.window {
            c.noise.window = w;
        }
        if let Some(t) = self.threshold {
            c.threshold = Some(t);
        }
        if let Some(e) = self.epochs {
            c.train.epochs = e;
        }
        Ok(c)
    }

    fn init_threads(&self) -> anyhow::Result<()> {
        if self.threads == 0 {
            bail!("--threads must be at least 1");
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(self.threads)
            .build_global()
            .context("thread pool")
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Synth(common) => {
            common.init_threads()?;
            let s = cmd_synth(&common.config()?, &common.out)?;
            println!(
                "scene: {} instances, {} views, {} points, noise: permute={} split={} anchors={} window={}",
                s.n_instances,
                s.n_views,
                s.n_points,
                s.noise.permute_ids,
                s.noise.split_prob,
                s.noise.n_anchors,
                s.noise.window
            );
        }
        Command::Train { scene, common } => {
            common.init_threads()?;
            let report = cmd_train(&common.config()?, &scene, &common.out)?;
            match report.history.last() {
                Some(last) => println!("trained {} epochs, final loss {:.6}", report.history.len(), last.total),
                None => println!("trained 0 epochs, checkpoint holds the initialization"),
            }
        }
        Command::Cluster {
            scene,
            checkpoint,
            common,
        } => {
            common.init_threads()?;
            let p = cmd_cluster(&common.config()?, &scene, &checkpoint, &common.out)?;
            println!("prototypes: {}, threshold: {:.6}", p.len(), p.threshold);
        }
        Command::Eval { scene, pred, common } => {
            common.init_threads()?;
            let r = cmd_eval(&scene, &pred, &common.out)?;
            println!("PQ {:.4} SQ {:.4} RQ {:.4}", r.pq, r.sq, r.rq);
        }
        Command::Run(common) => {
            common.init_threads()?;
            let o = cmd_run(&common.config()?, &common.out)?;
            println!(
                "prototypes: {}, threshold: {:.6}",
                o.clustering.prototypes.len(),
                o.clustering.prototypes.threshold
            );
            println!("PQ {:.4} SQ {:.4} RQ {:.4}", o.metrics.pq, o.metrics.sq, o.metrics.rq);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = format!("{e:#}").replace('\n', " ");
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}
