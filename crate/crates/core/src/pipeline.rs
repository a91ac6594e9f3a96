//! Run configuration and the file-level commands: `synth`, `train`,
//! `cluster`, `eval` and `run`.
//!
//! Output layout of a full run under `out/`:
//!
//! ```text
//! effective_config.json
//! scene/            scene.json + view_<id>_{corr,inst,sem,gt}.pgm
//! checkpoint.json
//! loss.csv          epoch,pixel_contra,concen,cross,reg,total
//! prototypes.json
//! pred/             view_<id>_{inst,sem}.pgm
//! metrics.json
//! vis/              view_<id>_{pred,gt}.ppm
//! uncertainty.csv
//! ```
//!
//! The standalone commands write the same files into their own `out`.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{evaluate_masks, uncertainty_stats, PanopticMask, PqReport, UncertaintyStats};
use crate::mvoa::{assign_labels, extract_prototypes, point_semantics, PrototypeSet, ThresholdMode};
use crate::raster::{palette, read_pgm16, write_pgm16, write_ppm, Gray16};
use crate::seed::sub_seed;
use crate::synth::{apply_noise, generate_scene, load_scene, save_scene, NoiseConfig, Scene, SceneParams};
use crate::trainer::{init_table, train, EmbeddingTable, KernelMode, TrainConfig, TrainReport};

/// Everything a run needs. Loaded from JSON with every field optional;
/// `train.seed` is ignored in favor of the top-level `seed`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub scene: SceneParams,
    pub noise: NoiseConfig,
    pub train: TrainConfig,
    /// Fixed suppression threshold; `None` derives it from the features.
    pub threshold: Option<f64>,
    pub threshold_mode: ThresholdMode,
    /// Half-width of the boundary band in the covariance statistics.
    pub band_radius: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            scene: SceneParams::default(),
            noise: NoiseConfig::default(),
            train: TrainConfig::default(),
            threshold: None,
            threshold_mode: ThresholdMode::default(),
            band_radius: 2,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Json {
            path: path.into(),
            source: e,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.noise.validate()?;
        self.train_config().validate()?;
        if let Some(t) = self.threshold {
            if !(t > 0.0 && t < 1.0) {
                return Err(Error::InvalidArgument(format!("threshold must lie in (0, 1), got {t}")));
            }
        }
        Ok(())
    }

    /// Training settings with the run seed threaded in.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            ..self.train
        }
    }

    /// Switches between the probabilistic arm and the fixed-variance baseline.
    pub fn with_kernel(mut self, kernel: KernelMode) -> Self {
        self.train.kernel = kernel;
        self
    }

    pub fn scene_seed(&self) -> u64 {
        sub_seed(self.seed, "scene")
    }

    pub fn noise_seed(&self) -> u64 {
        sub_seed(self.seed, "noise")
    }

    /// Writes the config with the effective seed into `train` as well.
    pub fn save_effective(&self, dir: &Path) -> Result<()> {
        let effective = RunConfig {
            train: self.train_config(),
            ..self.clone()
        };
        write_json(&dir.join("effective_config.json"), &effective)
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let json = serde_json::to_string_pretty(value).map_err(|e| Error::Json {
        path: path.into(),
        source: e,
    })?;
    fs::write(path, json).map_err(|e| Error::io(path, e))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Generates the scene and applies the configured noise.
pub fn synthesize(config: &RunConfig) -> Result<Scene> {
    config.noise.validate()?;
    let mut scene = generate_scene(&config.scene, config.scene_seed())?;
    apply_noise(&mut scene, &config.noise, config.noise_seed())?;
    Ok(scene)
}

/// Prototypes plus one predicted mask per view, in view order.
#[derive(Clone, Debug)]
pub struct Clustering {
    pub prototypes: PrototypeSet,
    pub masks: Vec<PanopticMask>,
}

pub fn cluster(scene: &Scene, table: &EmbeddingTable, config: &RunConfig) -> Result<Clustering> {
    if table.len() != scene.n_points() {
        return Err(Error::PointCountMismatch {
            scene: scene.n_points(),
            checkpoint: table.len(),
        });
    }
    let prototypes = extract_prototypes(
        scene,
        table,
        config.train.averaging,
        config.threshold_mode,
        config.threshold,
    )?;
    let semantics = point_semantics(scene);
    let masks = scene
        .views
        .iter()
        .map(|v| assign_labels(scene, v.view_id, table, &prototypes, &semantics))
        .collect::<Result<Vec<_>>>()?;
    Ok(Clustering { prototypes, masks })
}

pub fn ground_truth_masks(scene: &Scene) -> Result<Vec<PanopticMask>> {
    scene
        .views
        .iter()
        .map(|v| PanopticMask::ground_truth(scene, v.view_id))
        .collect()
}

pub fn evaluate(scene: &Scene, predictions: &[PanopticMask]) -> Result<PqReport> {
    evaluate_masks(predictions, &ground_truth_masks(scene)?)
}

/// In-memory result of every stage.
#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub scene: Scene,
    pub table: EmbeddingTable,
    pub training: TrainReport,
    pub clustering: Clustering,
    pub metrics: PqReport,
    pub uncertainty: UncertaintyStats,
}

/// The full pipeline without touching the filesystem. Errors carry the
/// failing stage.
pub fn run_in_memory(config: &RunConfig) -> Result<RunOutcome> {
    config.validate().map_err(|e| e.in_stage("config"))?;
    let scene = synthesize(config).map_err(|e| e.in_stage("synth"))?;
    let (table, training) = train(&scene, &config.train_config()).map_err(|e| e.in_stage("train"))?;
    let clustering = cluster(&scene, &table, config).map_err(|e| e.in_stage("cluster"))?;
    let metrics = evaluate(&scene, &clustering.masks).map_err(|e| e.in_stage("eval"))?;
    let uncertainty =
        uncertainty_stats(&scene, &table, config.band_radius).map_err(|e| e.in_stage("uncertainty"))?;
    Ok(RunOutcome {
        scene,
        table,
        training,
        clustering,
        metrics,
        uncertainty,
    })
}

/// One row per epoch: `epoch,pixel_contra,concen,cross,reg,total`.
pub fn loss_csv(report: &TrainReport) -> String {
    let mut s = String::from("epoch,pixel_contra,concen,cross,reg,total\n");
    for (i, b) in report.history.iter().enumerate() {
        let _ = writeln!(s, "{},{},{},{},{},{}", i, b.pixel_contra, b.concen, b.cross, b.reg, b.total);
    }
    s
}

fn mask_to_pgms(mask: &PanopticMask) -> Result<(Gray16, Gray16)> {
    let conv = |v: &[u32]| {
        v.iter()
            .map(|&x| u16::try_from(x).map_err(|_| Error::InvalidArgument(format!("label {x} exceeds 16 bits"))))
            .collect::<Result<Vec<u16>>>()
    };
    Ok((
        Gray16::new(mask.width, mask.height, conv(&mask.instance)?),
        Gray16::new(mask.width, mask.height, conv(&mask.semantic)?),
    ))
}

pub fn prediction_file(dir: &Path, view_id: usize, kind: &str) -> PathBuf {
    dir.join(format!("view_{view_id}_{kind}.pgm"))
}

/// Writes `view_<id>_inst.pgm` and `view_<id>_sem.pgm` for every view.
pub fn save_predictions(scene: &Scene, masks: &[PanopticMask], dir: &Path) -> Result<()> {
    create_dir(dir)?;
    for (view, mask) in scene.views.iter().zip(masks) {
        let (inst, sem) = mask_to_pgms(mask)?;
        write_pgm16(&prediction_file(dir, view.view_id, "inst"), &inst)?;
        write_pgm16(&prediction_file(dir, view.view_id, "sem"), &sem)?;
    }
    Ok(())
}

/// Reads one predicted mask per scene view; a missing or mis-sized file is an error.
pub fn load_predictions(scene: &Scene, dir: &Path) -> Result<Vec<PanopticMask>> {
    scene
        .views
        .iter()
        .map(|view| {
            let inst_path = prediction_file(dir, view.view_id, "inst");
            let sem_path = prediction_file(dir, view.view_id, "sem");
            let inst = read_pgm16(&inst_path)?;
            let sem = read_pgm16(&sem_path)?;
            for (img, path) in [(&inst, &inst_path), (&sem, &sem_path)] {
                if img.width != view.width || img.height != view.height {
                    return Err(Error::malformed(
                        path,
                        format!(
                            "size {}x{} does not match view {}x{}",
                            img.width, img.height, view.width, view.height
                        ),
                    ));
                }
            }
            Ok(PanopticMask {
                width: view.width,
                height: view.height,
                semantic: sem.data.iter().map(|&v| v as u32).collect(),
                instance: inst.data.iter().map(|&v| v as u32).collect(),
            })
        })
        .collect()
}

fn save_visualization(scene: &Scene, masks: &[PanopticMask], dir: &Path) -> Result<()> {
    create_dir(dir)?;
    let gt = ground_truth_masks(scene)?;
    for ((view, pred), gt) in scene.views.iter().zip(masks).zip(&gt) {
        for (kind, m) in [("pred", pred), ("gt", gt)] {
            let rgb: Vec<[u8; 3]> = m.instance.iter().map(|&id| palette(id)).collect();
            write_ppm(&dir.join(format!("view_{}_{kind}.ppm", view.view_id)), m.width, m.height, &rgb)?;
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SynthSummary {
    pub n_instances: usize,
    pub n_views: usize,
    pub n_points: usize,
    pub noise: NoiseConfig,
}

impl SynthSummary {
    fn of(scene: &Scene) -> Self {
        Self {
            n_instances: scene.instances.len(),
            n_views: scene.views.len(),
            n_points: scene.n_points(),
            noise: scene.noise,
        }
    }
}

/// Generates a scene into `out/scene`.
pub fn cmd_synth(config: &RunConfig, out: &Path) -> Result<SynthSummary> {
    config.noise.validate()?;
    create_dir(out)?;
    config.save_effective(out)?;
    let scene = synthesize(config)?;
    save_scene(&scene, &out.join("scene"))?;
    Ok(SynthSummary::of(&scene))
}

/// Trains on a scene directory; writes `checkpoint.json` and `loss.csv`.
pub fn cmd_train(config: &RunConfig, scene_dir: &Path, out: &Path) -> Result<TrainReport> {
    let tc = config.train_config();
    tc.validate()?;
    let scene = load_scene(scene_dir)?;
    create_dir(out)?;
    config.save_effective(out)?;
    let (table, report) = if tc.epochs == 0 {
        (init_table(&scene, &tc)?, TrainReport::default())
    } else {
        train(&scene, &tc)?
    };
    table.save(&out.join("checkpoint.json"))?;
    let csv = out.join("loss.csv");
    fs::write(&csv, loss_csv(&report)).map_err(|e| Error::io(&csv, e))?;
    Ok(report)
}

/// Clusters a trained table; writes `prototypes.json` and `pred/`.
pub fn cmd_cluster(config: &RunConfig, scene_dir: &Path, checkpoint: &Path, out: &Path) -> Result<PrototypeSet> {
    config.validate()?;
    let scene = load_scene(scene_dir)?;
    let table = EmbeddingTable::load(checkpoint)?;
    let result = cluster(&scene, &table, config)?;
    create_dir(out)?;
    config.save_effective(out)?;
    result.prototypes.save(&out.join("prototypes.json"))?;
    save_predictions(&scene, &result.masks, &out.join("pred"))?;
    Ok(result.prototypes)
}

/// Scores predictions in `pred_dir` against the scene; writes `metrics.json`.
pub fn cmd_eval(scene_dir: &Path, pred_dir: &Path, out: &Path) -> Result<PqReport> {
    let scene = load_scene(scene_dir)?;
    let predictions = load_predictions(&scene, pred_dir)?;
    let report = evaluate(&scene, &predictions)?;
    create_dir(out)?;
    report.save(&out.join("metrics.json"))?;
    Ok(report)
}

/// Every stage, through the on-disk formats, plus visualization and the
/// covariance histograms.
pub fn cmd_run(config: &RunConfig, out: &Path) -> Result<RunOutcome> {
    config.validate().map_err(|e| e.in_stage("config"))?;
    create_dir(out).map_err(|e| e.in_stage("setup"))?;
    config.save_effective(out).map_err(|e| e.in_stage("setup"))?;
    let scene_dir = out.join("scene");
    let pred_dir = out.join("pred");

    let synth = || -> Result<Scene> {
        let scene = synthesize(config)?;
        save_scene(&scene, &scene_dir)?;
        Ok(scene)
    };
    let scene = synth().map_err(|e| e.in_stage("synth"))?;

    let tc = config.train_config();
    let stage_train = || -> Result<(EmbeddingTable, TrainReport)> {
        let (table, report) = train(&scene, &tc)?;
        table.save(&out.join("checkpoint.json"))?;
        let csv = out.join("loss.csv");
        fs::write(&csv, loss_csv(&report)).map_err(|e| Error::io(&csv, e))?;
        Ok((table, report))
    };
    let (table, training) = stage_train().map_err(|e| e.in_stage("train"))?;

    let stage_cluster = || -> Result<Clustering> {
        let c = cluster(&scene, &table, config)?;
        c.prototypes.save(&out.join("prototypes.json"))?;
        save_predictions(&scene, &c.masks, &pred_dir)?;
        Ok(c)
    };
    let clustering = stage_cluster().map_err(|e| e.in_stage("cluster"))?;

    let stage_eval = || -> Result<PqReport> {
        let loaded = load_predictions(&scene, &pred_dir)?;
        let report = evaluate(&scene, &loaded)?;
        report.save(&out.join("metrics.json"))?;
        Ok(report)
    };
    let metrics = stage_eval().map_err(|e| e.in_stage("eval"))?;

    let stage_vis = || -> Result<UncertaintyStats> {
        save_visualization(&scene, &clustering.masks, &out.join("vis"))?;
        let stats = uncertainty_stats(&scene, &table, config.band_radius)?;
        let csv = out.join("uncertainty.csv");
        fs::write(&csv, stats.to_csv()).map_err(|e| Error::io(&csv, e))?;
        Ok(stats)
    };
    let uncertainty = stage_vis().map_err(|e| e.in_stage("visualize"))?;

    Ok(RunOutcome {
        scene,
        table,
        training,
        clustering,
        metrics,
        uncertainty,
    })
}
