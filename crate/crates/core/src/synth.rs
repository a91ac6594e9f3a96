//! Synthetic multi-view scenes and label-noise protocols.
//!
//! A scene is a 2D canvas of rectangular instances; each canvas cell is one
//! point. A view is a translated window into the canvas, so pixel-to-point
//! correspondences are exact. Background cells have no correspondence.
//!
//! Noise only touches the observed instance mask of a view and is applied in
//! the fixed order permute, split, boundary.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{read_pgm16, write_pgm16, Gray16};
use crate::seed::{indexed_seed, rng, sub_seed};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstanceRect {
    /// Global instance ID, starting at 1.
    pub id: u32,
    pub class: u32,
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
}

impl InstanceRect {
    fn overlaps(&self, o: &InstanceRect) -> bool {
        self.x < o.x + o.w && o.x < self.x + self.w && self.y < o.y + o.h && o.y < self.y + self.h
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ScenePoint {
    pub point_id: u32,
    /// 0 for background cells.
    pub gt_instance_id: u32,
    /// 0 for background cells.
    pub gt_semantic_class: u32,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct View {
    pub view_id: usize,
    pub width: usize,
    pub height: usize,
    pub offset_x: usize,
    pub offset_y: usize,
    pub correspondence: Vec<Option<u32>>,
    /// Observed, possibly noisy, view-local instance IDs (0 = background).
    pub observed_instance: Vec<u32>,
    pub observed_semantic: Vec<u32>,
    /// Clean global instance IDs, for evaluation only.
    pub gt_instance: Vec<u32>,
}

impl View {
    pub fn len(&self) -> usize {
        self.width * self.height
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Sorted distinct non-zero observed IDs.
    pub fn observed_ids(&self) -> Vec<u32> {
        let set: BTreeSet<u32> = self.observed_instance.iter().copied().filter(|&i| i != 0).collect();
        set.into_iter().collect()
    }

    /// Pixels usable for training: a point is visible and the observed ID is non-zero.
    pub fn foreground_pixels(&self) -> Vec<usize> {
        (0..self.len())
            .filter(|&i| self.correspondence[i].is_some() && self.observed_instance[i] != 0)
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneParams {
    pub k_instances: usize,
    pub n_views: usize,
    pub canvas_width: usize,
    pub canvas_height: usize,
    pub view_width: usize,
    pub view_height: usize,
    pub min_size: usize,
    pub max_size: usize,
    pub n_thing_classes: u32,
}

impl Default for SceneParams {
    fn default() -> Self {
        Self {
            k_instances: 10,
            n_views: 6,
            canvas_width: 80,
            canvas_height: 80,
            view_width: 64,
            view_height: 64,
            min_size: 6,
            max_size: 16,
            n_thing_classes: 3,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NoiseConfig {
    pub permute_ids: bool,
    pub split_prob: f64,
    pub n_anchors: usize,
    pub window: usize,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self {
            permute_ids: false,
            split_prob: 0.0,
            n_anchors: 0,
            window: 1,
        }
    }
}

impl NoiseConfig {
    /// The hand-crafted boundary noise protocol uses 100 anchors per mask.
    pub const DEFAULT_ANCHORS: usize = 100;

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.split_prob) {
            return Err(Error::InvalidArgument(format!(
                "split probability must lie in [0, 1], got {}",
                self.split_prob
            )));
        }
        if self.window == 0 || self.window % 2 == 0 {
            return Err(Error::InvalidArgument(format!(
                "window must be odd and >= 1, got {}",
                self.window
            )));
        }
        Ok(())
    }

    pub fn is_clean(&self) -> bool {
        !self.permute_ids && self.split_prob == 0.0 && (self.n_anchors == 0 || self.window == 1)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub canvas_width: usize,
    pub canvas_height: usize,
    pub n_thing_classes: u32,
    pub instances: Vec<InstanceRect>,
    pub points: Vec<ScenePoint>,
    pub views: Vec<View>,
    pub seed: u64,
    pub noise: NoiseConfig,
    pub noise_seed: u64,
}

impl Scene {
    pub fn n_points(&self) -> usize {
        self.points.len()
    }

    pub fn view(&self, view_id: usize) -> Result<&View> {
        self.views
            .iter()
            .find(|v| v.view_id == view_id)
            .ok_or(Error::UnknownView(view_id))
    }

    pub fn view_mut(&mut self, view_id: usize) -> Result<&mut View> {
        self.views
            .iter_mut()
            .find(|v| v.view_id == view_id)
            .ok_or(Error::UnknownView(view_id))
    }

    pub fn gt_instance_count(&self) -> usize {
        self.instances.len()
    }
}

const PLACEMENT_ATTEMPTS: usize = 10_000;
const VIEW_ATTEMPTS: usize = 20_000;

fn points_from_instances(width: usize, height: usize, instances: &[InstanceRect]) -> Vec<ScenePoint> {
    let mut points: Vec<ScenePoint> = (0..width * height)
        .map(|i| ScenePoint {
            point_id: i as u32,
            gt_instance_id: 0,
            gt_semantic_class: 0,
        })
        .collect();
    for r in instances {
        for y in r.y..r.y + r.h {
            for x in r.x..r.x + r.w {
                let p = &mut points[y * width + x];
                p.gt_instance_id = r.id;
                p.gt_semantic_class = r.class;
            }
        }
    }
    points
}

fn make_view(
    view_id: usize,
    offset: (usize, usize),
    size: (usize, usize),
    canvas_width: usize,
    points: &[ScenePoint],
) -> View {
    let (width, height) = size;
    let n = width * height;
    let mut view = View {
        view_id,
        width,
        height,
        offset_x: offset.0,
        offset_y: offset.1,
        correspondence: vec![None; n],
        observed_instance: vec![0; n],
        observed_semantic: vec![0; n],
        gt_instance: vec![0; n],
    };
    for y in 0..height {
        for x in 0..width {
            let p = &points[(y + offset.1) * canvas_width + x + offset.0];
            if p.gt_instance_id != 0 {
                let i = y * width + x;
                view.correspondence[i] = Some(p.point_id);
                view.observed_instance[i] = p.gt_instance_id;
                view.observed_semantic[i] = p.gt_semantic_class;
                view.gt_instance[i] = p.gt_instance_id;
            }
        }
    }
    view
}

/// Places `k_instances` non-overlapping rectangles inside the view-sized stage
/// centered on the canvas and cuts `n_views` random windows. Windows are
/// redrawn until every instance is seen by two views and every pair of
/// instances shares at least one view.
pub fn generate_scene(params: &SceneParams, seed: u64) -> Result<Scene> {
    let p = params;
    if p.k_instances == 0 {
        return Err(Error::InvalidArgument("need at least one instance".into()));
    }
    if p.n_views < 2 {
        return Err(Error::InvalidArgument("need at least two views".into()));
    }
    if p.view_width > p.canvas_width || p.view_height > p.canvas_height || p.view_width == 0 || p.view_height == 0 {
        return Err(Error::InvalidArgument("view window must fit inside the canvas".into()));
    }
    if p.min_size == 0 || p.min_size > p.max_size || p.max_size > p.view_width.min(p.view_height) {
        return Err(Error::InvalidArgument("invalid instance size range".into()));
    }
    if p.n_thing_classes == 0 {
        return Err(Error::InvalidArgument("need at least one thing class".into()));
    }
    if p.canvas_width * p.canvas_height >= u16::MAX as usize {
        return Err(Error::InvalidArgument("canvas has too many points for 16-bit correspondence maps".into()));
    }

    let stage_x = (p.canvas_width - p.view_width) / 2;
    let stage_y = (p.canvas_height - p.view_height) / 2;
    let mut r = rng(seed);
    let mut instances: Vec<InstanceRect> = Vec::with_capacity(p.k_instances);
    let mut attempts = 0;
    while instances.len() < p.k_instances {
        attempts += 1;
        if attempts > PLACEMENT_ATTEMPTS {
            return Err(Error::PlacementFailed(PLACEMENT_ATTEMPTS));
        }
        let w = r.random_range(p.min_size..=p.max_size);
        let h = r.random_range(p.min_size..=p.max_size);
        let cand = InstanceRect {
            id: instances.len() as u32 + 1,
            class: 1 + (instances.len() as u32 % p.n_thing_classes),
            x: stage_x + r.random_range(0..=p.view_width - w),
            y: stage_y + r.random_range(0..=p.view_height - h),
            w,
            h,
        };
        if instances.iter().all(|o| !o.overlaps(&cand)) {
            instances.push(cand);
        }
    }
    let points = points_from_instances(p.canvas_width, p.canvas_height, &instances);

    for _ in 0..VIEW_ATTEMPTS {
        let offsets: Vec<(usize, usize)> = (0..p.n_views)
            .map(|_| {
                (
                    r.random_range(0..=p.canvas_width - p.view_width),
                    r.random_range(0..=p.canvas_height - p.view_height),
                )
            })
            .collect();
        let sees: Vec<Vec<bool>> = offsets
            .iter()
            .map(|&(ox, oy)| {
                instances
                    .iter()
                    .map(|inst| {
                        inst.x < ox + p.view_width
                            && ox < inst.x + inst.w
                            && inst.y < oy + p.view_height
                            && oy < inst.y + inst.h
                    })
                    .collect()
            })
            .collect();
        let k = instances.len();
        let visible_in_two = (0..k).all(|i| sees.iter().filter(|v| v[i]).count() >= 2);
        let pairs_covered =
            (0..k).all(|i| ((i + 1)..k).all(|j| sees.iter().any(|v| v[i] && v[j])));
        if visible_in_two && pairs_covered {
            let views = offsets
                .into_iter()
                .enumerate()
                .map(|(id, off)| make_view(id, off, (p.view_width, p.view_height), p.canvas_width, &points))
                .collect();
            return Ok(Scene {
                canvas_width: p.canvas_width,
                canvas_height: p.canvas_height,
                n_thing_classes: p.n_thing_classes,
                instances,
                points,
                views,
                seed,
                noise: NoiseConfig::default(),
                noise_seed: 0,
            });
        }
    }
    Err(Error::ViewCoverageFailed(VIEW_ATTEMPTS))
}

/// Applies a random bijection to the non-zero observed IDs of `view`.
/// Returns the mapping as `(old, new)` pairs sorted by `old`.
pub fn permute_ids(view: &mut View, seed: u64) -> Vec<(u32, u32)> {
    let ids = view.observed_ids();
    let mut shuffled = ids.clone();
    shuffled.shuffle(&mut rng(seed));
    let mapping: Vec<(u32, u32)> = ids.into_iter().zip(shuffled).collect();
    for v in view.observed_instance.iter_mut() {
        if *v != 0 {
            // ids are sorted, so binary search finds the source
            let i = mapping.binary_search_by_key(v, |m| m.0).expect("id present");
            *v = mapping[i].1;
        }
    }
    mapping
}

/// Splits each observed instance with probability `split_prob` along a random
/// axis-aligned line through its bounding box. Both halves get fresh IDs.
/// Instances one pixel wide in both directions are left alone.
pub fn split_instances(view: &mut View, split_prob: f64, seed: u64) -> Result<()> {
    if !(0.0..=1.0).contains(&split_prob) {
        return Err(Error::InvalidArgument(format!(
            "split probability must lie in [0, 1], got {split_prob}"
        )));
    }
    let mut r = rng(seed);
    let ids = view.observed_ids();
    let mut next_id = ids.last().copied().unwrap_or(0) + 1;
    let w = view.width;
    for id in ids {
        if !r.random_bool(split_prob) {
            continue;
        }
        let pixels: Vec<usize> = (0..view.len()).filter(|&i| view.observed_instance[i] == id).collect();
        let (mut x0, mut x1, mut y0, mut y1) = (usize::MAX, 0, usize::MAX, 0);
        for &i in &pixels {
            let (x, y) = (i % w, i / w);
            x0 = x0.min(x);
            x1 = x1.max(x);
            y0 = y0.min(y);
            y1 = y1.max(y);
        }
        let axes: Vec<bool> = [(x1 > x0, true), (y1 > y0, false)]
            .into_iter()
            .filter(|a| a.0)
            .map(|a| a.1)
            .collect();
        if axes.is_empty() {
            continue;
        }
        let along_x = axes[r.random_range(0..axes.len())];
        let cut = if along_x {
            r.random_range(x0 + 1..=x1)
        } else {
            r.random_range(y0 + 1..=y1)
        };
        let first_side = |i: usize| if along_x { i % w < cut } else { i / w < cut };
        let n_first = pixels.iter().filter(|&&i| first_side(i)).count();
        if n_first == 0 || n_first == pixels.len() {
            continue;
        }
        for &i in &pixels {
            view.observed_instance[i] = if first_side(i) { next_id } else { next_id + 1 };
        }
        next_id += 2;
    }
    Ok(())
}

/// Boundary noise: for each of `n_anchors` random anchors, copy the ID of one
/// random pixel inside the `window x window` box around the anchor (clipped to
/// the image) over the whole clipped box. Anchors apply in draw order.
pub fn inject_boundary_noise(view: &mut View, n_anchors: usize, window: usize, seed: u64) -> Result<()> {
    if window == 0 || window % 2 == 0 {
        return Err(Error::InvalidArgument(format!("window must be odd and >= 1, got {window}")));
    }
    let mut r = rng(seed);
    let half = window / 2;
    let (w, h) = (view.width, view.height);
    for _ in 0..n_anchors {
        let ax = r.random_range(0..w);
        let ay = r.random_range(0..h);
        let (x0, x1) = (ax.saturating_sub(half), (ax + half).min(w - 1));
        let (y0, y1) = (ay.saturating_sub(half), (ay + half).min(h - 1));
        let sx = r.random_range(x0..=x1);
        let sy = r.random_range(y0..=y1);
        let id = view.observed_instance[sy * w + sx];
        for y in y0..=y1 {
            for x in x0..=x1 {
                view.observed_instance[y * w + x] = id;
            }
        }
    }
    Ok(())
}

/// Applies the configured noise to every view, permute then split then boundary.
pub fn apply_noise(scene: &mut Scene, noise: &NoiseConfig, seed: u64) -> Result<()> {
    noise.validate()?;
    for view in scene.views.iter_mut() {
        let vs = indexed_seed(seed, view.view_id as u64);
        if noise.permute_ids {
            permute_ids(view, sub_seed(vs, "permute"));
        }
        if noise.split_prob > 0.0 {
            split_instances(view, noise.split_prob, sub_seed(vs, "split"))?;
        }
        if noise.n_anchors > 0 {
            inject_boundary_noise(view, noise.n_anchors, noise.window, sub_seed(vs, "boundary"))?;
        }
    }
    scene.noise = *noise;
    scene.noise_seed = seed;
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct ClassEntry {
    id: u32,
    name: String,
    thing: bool,
}

#[derive(Serialize, Deserialize)]
struct ViewEntry {
    view_id: usize,
    width: usize,
    height: usize,
    offset_x: usize,
    offset_y: usize,
}

#[derive(Serialize, Deserialize)]
struct SceneFile {
    canvas_width: usize,
    canvas_height: usize,
    n_points: usize,
    classes: Vec<ClassEntry>,
    seed: u64,
    noise_seed: u64,
    noise: NoiseConfig,
    instances: Vec<InstanceRect>,
    views: Vec<ViewEntry>,
}

pub fn view_file(dir: &Path, view_id: usize, kind: &str) -> std::path::PathBuf {
    dir.join(format!("view_{view_id}_{kind}.pgm"))
}

fn to_u16(values: impl Iterator<Item = u32>, what: &str) -> Result<Vec<u16>> {
    values
        .map(|v| u16::try_from(v).map_err(|_| Error::InvalidArgument(format!("{what} value {v} exceeds 16 bits"))))
        .collect()
}

/// Writes `scene.json` plus four 16-bit PGMs per view.
pub fn save_scene(scene: &Scene, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut classes = vec![ClassEntry {
        id: 0,
        name: "background".into(),
        thing: false,
    }];
    classes.extend((1..=scene.n_thing_classes).map(|c| ClassEntry {
        id: c,
        name: format!("thing_{c}"),
        thing: true,
    }));
    let file = SceneFile {
        canvas_width: scene.canvas_width,
        canvas_height: scene.canvas_height,
        n_points: scene.n_points(),
        classes,
        seed: scene.seed,
        noise_seed: scene.noise_seed,
        noise: scene.noise,
        instances: scene.instances.clone(),
        views: scene
            .views
            .iter()
            .map(|v| ViewEntry {
                view_id: v.view_id,
                width: v.width,
                height: v.height,
                offset_x: v.offset_x,
                offset_y: v.offset_y,
            })
            .collect(),
    };
    let path = dir.join("scene.json");
    let json = serde_json::to_string_pretty(&file).map_err(|e| Error::Json {
        path: path.clone(),
        source: e,
    })?;
    fs::write(&path, json).map_err(|e| Error::io(&path, e))?;

    for v in &scene.views {
        let corr = to_u16(v.correspondence.iter().map(|c| c.map_or(0, |p| p + 1)), "correspondence")?;
        let layers = [
            ("corr", corr),
            ("inst", to_u16(v.observed_instance.iter().copied(), "instance")?),
            ("sem", to_u16(v.observed_semantic.iter().copied(), "semantic")?),
            ("gt", to_u16(v.gt_instance.iter().copied(), "gt")?),
        ];
        for (kind, data) in layers {
            write_pgm16(&view_file(dir, v.view_id, kind), &Gray16::new(v.width, v.height, data))?;
        }
    }
    Ok(())
}

pub fn load_scene(dir: &Path) -> Result<Scene> {
    let path = dir.join("scene.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let file: SceneFile = serde_json::from_str(&text).map_err(|e| Error::Json {
        path: path.clone(),
        source: e,
    })?;
    if file.n_points != file.canvas_width * file.canvas_height {
        return Err(Error::malformed(&path, "n_points does not match the canvas size"));
    }
    for inst in &file.instances {
        if inst.x + inst.w > file.canvas_width || inst.y + inst.h > file.canvas_height {
            return Err(Error::malformed(&path, format!("instance {} leaves the canvas", inst.id)));
        }
    }
    let points = points_from_instances(file.canvas_width, file.canvas_height, &file.instances);
    let n_thing_classes = file.classes.iter().filter(|c| c.thing).count() as u32;

    let mut views = Vec::with_capacity(file.views.len());
    for ve in &file.views {
        let read = |kind: &str| -> Result<Vec<u32>> {
            let p = view_file(dir, ve.view_id, kind);
            let img = read_pgm16(&p)?;
            if img.width != ve.width || img.height != ve.height {
                return Err(Error::malformed(&p, "dimensions differ from scene.json"));
            }
            Ok(img.data.into_iter().map(u32::from).collect())
        };
        let corr_path = view_file(dir, ve.view_id, "corr");
        let correspondence = read("corr")?
            .into_iter()
            .map(|c| match c {
                0 => Ok(None),
                c if (c as usize) <= points.len() => Ok(Some(c - 1)),
                c => Err(Error::malformed(&corr_path, format!("point {} does not exist", c - 1))),
            })
            .collect::<Result<Vec<_>>>()?;
        views.push(View {
            view_id: ve.view_id,
            width: ve.width,
            height: ve.height,
            offset_x: ve.offset_x,
            offset_y: ve.offset_y,
            correspondence,
            observed_instance: read("inst")?,
            observed_semantic: read("sem")?,
            gt_instance: read("gt")?,
        });
    }
    Ok(Scene {
        canvas_width: file.canvas_width,
        canvas_height: file.canvas_height,
        n_thing_classes,
        instances: file.instances,
        points,
        views,
        seed: file.seed,
        noise: file.noise,
        noise_seed: file.noise_seed,
    })
}
