//! Scene-level panoptic quality and covariance statistics.
//!
//! Segments are unions of pixels over all views that share a (class,
//! instance) label, so an instance whose ID flips between views is penalized.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::synth::Scene;
use crate::trainer::EmbeddingTable;

/// Per-pixel semantic class and instance ID for one view. Class 0 is the
/// background (stuff) class; instance 0 means "no instance".
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PanopticMask {
    pub width: usize,
    pub height: usize,
    pub semantic: Vec<u32>,
    pub instance: Vec<u32>,
}

impl PanopticMask {
    pub fn background(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            semantic: vec![0; width * height],
            instance: vec![0; width * height],
        }
    }

    pub fn len(&self) -> usize {
        self.width * self.height
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Ground-truth mask of a view: clean instance IDs with their classes.
    pub fn ground_truth(scene: &Scene, view_id: usize) -> Result<Self> {
        let view = scene.view(view_id)?;
        let mut m = Self::background(view.width, view.height);
        for i in 0..view.len() {
            let id = view.gt_instance[i];
            if id != 0 {
                m.instance[i] = id;
                m.semantic[i] = view.correspondence[i]
                    .map(|p| scene.points[p as usize].gt_semantic_class)
                    .unwrap_or(view.observed_semantic[i]);
            }
        }
        Ok(m)
    }
}

/// Pixels of one (class, instance) label across every view. Pixels are encoded
/// as `view_index * width * height + y * width + x` and kept sorted.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SceneSegment {
    pub semantic_class: u32,
    pub instance_id: u32,
    pub pixels: Vec<u64>,
}

impl SceneSegment {
    pub fn area(&self) -> usize {
        self.pixels.len()
    }
}

pub fn merge_to_scene_segments(masks: &[PanopticMask]) -> Result<Vec<SceneSegment>> {
    let first = masks.first().ok_or(Error::Empty("mask list"))?;
    let (w, h) = (first.width, first.height);
    let mut groups: BTreeMap<(u32, u32), Vec<u64>> = BTreeMap::new();
    for (v, m) in masks.iter().enumerate() {
        if m.width != w || m.height != h || m.semantic.len() != w * h || m.instance.len() != w * h {
            return Err(Error::InvalidArgument(format!(
                "mask {v} is {}x{}, expected {w}x{h}",
                m.width, m.height
            )));
        }
        for i in 0..w * h {
            let (class, inst) = (m.semantic[i], m.instance[i]);
            if class == 0 && inst != 0 {
                return Err(Error::InvalidArgument(format!(
                    "mask {v} has instance {inst} on a background pixel"
                )));
            }
            groups
                .entry((class, inst))
                .or_default()
                .push((v * w * h + i) as u64);
        }
    }
    Ok(groups
        .into_iter()
        .map(|((semantic_class, instance_id), pixels)| SceneSegment {
            semantic_class,
            instance_id,
            pixels,
        })
        .collect())
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ClassQuality {
    pub pq: f64,
    pub sq: f64,
    pub rq: f64,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub iou_sum: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PqReport {
    pub pq: f64,
    pub sq: f64,
    pub rq: f64,
    pub per_class: BTreeMap<u32, ClassQuality>,
    pub n_tp: usize,
    pub n_fp: usize,
    pub n_fn: usize,
}

impl PqReport {
    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self).map_err(|e| Error::Json {
            path: path.into(),
            source: e,
        })?;
        fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Json {
            path: path.into(),
            source: e,
        })
    }
}

/// Intersection-over-union threshold for a match; strictly above one half
/// makes matches unique.
pub const MATCH_IOU: f64 = 0.5;

fn finish_class(c: &mut ClassQuality) {
    c.sq = if c.tp > 0 { c.iou_sum / c.tp as f64 } else { 0.0 };
    let denom = c.tp as f64 + 0.5 * c.fp as f64 + 0.5 * c.fn_ as f64;
    c.rq = if denom > 0.0 { c.tp as f64 / denom } else { 0.0 };
    c.pq = c.sq * c.rq;
}

/// Assembles a report from per-class counts, averaging over classes present in `gt`.
pub fn summarize(mut per_class: BTreeMap<u32, ClassQuality>, gt_classes: &[u32]) -> PqReport {
    let mut report = PqReport::default();
    for c in per_class.values_mut() {
        finish_class(c);
        report.n_tp += c.tp;
        report.n_fp += c.fp;
        report.n_fn += c.fn_;
    }
    let present: Vec<&ClassQuality> = gt_classes.iter().filter_map(|c| per_class.get(c)).collect();
    let n = present.len() as f64;
    report.pq = present.iter().map(|c| c.pq).sum::<f64>() / n;
    report.sq = present.iter().map(|c| c.sq).sum::<f64>() / n;
    report.rq = present.iter().map(|c| c.rq).sum::<f64>() / n;
    report.per_class = per_class;
    report
}

/// Scene-level PQ/SQ/RQ. Pairs of equal class with IoU above one half are matches.
pub fn pq_scene(pred: &[SceneSegment], gt: &[SceneSegment]) -> Result<PqReport> {
    if gt.is_empty() {
        return Err(Error::Empty("ground-truth segments"));
    }
    let mut owner: HashMap<u64, usize> = HashMap::new();
    for (g, seg) in gt.iter().enumerate() {
        for &px in &seg.pixels {
            owner.insert(px, g);
        }
    }

    let mut gt_matched = vec![false; gt.len()];
    let mut pred_matched = vec![false; pred.len()];
    let mut per_class: BTreeMap<u32, ClassQuality> = BTreeMap::new();

    for (p, seg) in pred.iter().enumerate() {
        let mut inter: BTreeMap<usize, usize> = BTreeMap::new();
        for px in &seg.pixels {
            if let Some(&g) = owner.get(px) {
                *inter.entry(g).or_default() += 1;
            }
        }
        for (g, n) in inter {
            if gt[g].semantic_class != seg.semantic_class {
                continue;
            }
            let union = seg.area() + gt[g].area() - n;
            let iou = n as f64 / union as f64;
            if iou > MATCH_IOU {
                assert!(
                    !gt_matched[g] && !pred_matched[p],
                    "IoU above one half matched a segment twice"
                );
                gt_matched[g] = true;
                pred_matched[p] = true;
                let c = per_class.entry(seg.semantic_class).or_default();
                c.tp += 1;
                c.iou_sum += iou;
            }
        }
    }
    for (p, seg) in pred.iter().enumerate() {
        if !pred_matched[p] {
            per_class.entry(seg.semantic_class).or_default().fp += 1;
        }
    }
    for (g, seg) in gt.iter().enumerate() {
        if !gt_matched[g] {
            per_class.entry(seg.semantic_class).or_default().fn_ += 1;
        }
    }
    let mut gt_classes: Vec<u32> = gt.iter().map(|s| s.semantic_class).collect();
    gt_classes.sort_unstable();
    gt_classes.dedup();
    Ok(summarize(per_class, &gt_classes))
}

/// Convenience wrapper over per-view prediction and ground-truth masks.
pub fn evaluate_masks(pred: &[PanopticMask], gt: &[PanopticMask]) -> Result<PqReport> {
    if pred.len() != gt.len() {
        return Err(Error::InvalidArgument(format!(
            "{} predicted views for {} ground-truth views",
            pred.len(),
            gt.len()
        )));
    }
    pq_scene(&merge_to_scene_segments(pred)?, &merge_to_scene_segments(gt)?)
}

/// Fixed-range histogram over `log10` of a positive quantity.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub log10_lo: f64,
    pub log10_hi: f64,
    pub counts: Vec<usize>,
}

impl Histogram {
    pub fn new(log10_lo: f64, log10_hi: f64, bins: usize) -> Self {
        Self {
            log10_lo,
            log10_hi,
            counts: vec![0; bins],
        }
    }

    pub fn add(&mut self, value: f64) {
        let bins = self.counts.len();
        let t = (value.log10() - self.log10_lo) / (self.log10_hi - self.log10_lo);
        let b = ((t * bins as f64).floor().max(0.0) as usize).min(bins - 1);
        self.counts[b] += 1;
    }

    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }

    /// Counts normalized to sum to one (all zeros when empty).
    pub fn frequencies(&self) -> Vec<f64> {
        let t = self.total();
        self.counts
            .iter()
            .map(|&c| if t == 0 { 0.0 } else { c as f64 / t as f64 })
            .collect()
    }

    pub fn bin_edges(&self) -> Vec<f64> {
        let bins = self.counts.len();
        (0..=bins)
            .map(|i| self.log10_lo + (self.log10_hi - self.log10_lo) * i as f64 / bins as f64)
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UncertaintyStats {
    pub boundary: Histogram,
    pub interior: Histogram,
    pub boundary_mean: f64,
    pub interior_mean: f64,
}

impl UncertaintyStats {
    /// CSV with columns `log10_lo,log10_hi,boundary,interior`.
    pub fn to_csv(&self) -> String {
        let edges = self.boundary.bin_edges();
        let mut s = String::from("log10_lo,log10_hi,boundary,interior\n");
        for i in 0..self.boundary.counts.len() {
            s.push_str(&format!(
                "{},{},{},{}\n",
                edges[i], edges[i + 1], self.boundary.counts[i], self.interior.counts[i]
            ));
        }
        s
    }
}

pub const HIST_LOG10_LO: f64 = -18.0;
pub const HIST_LOG10_HI: f64 = 18.0;
pub const HIST_BINS: usize = 72;

/// Splits the visible ground-truth foreground pixels of every view into a
/// boundary band (some pixel within Chebyshev distance `band_radius` carries a
/// different ground-truth label) and the interior, and histograms the
/// variance product of each pixel's embedding.
pub fn uncertainty_stats(scene: &Scene, table: &EmbeddingTable, band_radius: usize) -> Result<UncertaintyStats> {
    let mut boundary = Histogram::new(HIST_LOG10_LO, HIST_LOG10_HI, HIST_BINS);
    let mut interior = boundary.clone();
    let (mut b_sum, mut i_sum) = (0.0, 0.0);
    for view in &scene.views {
        let (w, h) = (view.width, view.height);
        if 2 * band_radius >= w.min(h) {
            return Err(Error::InvalidArgument(format!(
                "band radius {band_radius} too large for a {w}x{h} view"
            )));
        }
        let r = band_radius;
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                let Some(p) = view.correspondence[i] else { continue };
                let label = view.gt_instance[i];
                if label == 0 {
                    continue;
                }
                let e = table.entries.get(p as usize).ok_or(Error::IndexOutOfRange {
                    index: p as usize,
                    len: table.len(),
                })?;
                let near_edge = (y.saturating_sub(r)..=(y + r).min(h - 1)).any(|yy| {
                    (x.saturating_sub(r)..=(x + r).min(w - 1)).any(|xx| view.gt_instance[yy * w + xx] != label)
                });
                let v = e.variance_product();
                if near_edge {
                    boundary.add(v);
                    b_sum += v;
                } else {
                    interior.add(v);
                    i_sum += v;
                }
            }
        }
    }
    let mean = |s: f64, n: usize| if n == 0 { 0.0 } else { s / n as f64 };
    Ok(UncertaintyStats {
        boundary_mean: mean(b_sum, boundary.total()),
        interior_mean: mean(i_sum, interior.total()),
        boundary,
        interior,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask(w: usize, h: usize, sem: &[u32], inst: &[u32]) -> PanopticMask {
        PanopticMask {
            width: w,
            height: h,
            semantic: sem.to_vec(),
            instance: inst.to_vec(),
        }
    }

    #[test]
    fn one_view_one_instance() {
        let m = mask(2, 2, &[1, 1, 0, 0], &[5, 5, 0, 0]);
        let segs = merge_to_scene_segments(&[m]).unwrap();
        assert_eq!(segs.len(), 2);
        assert_eq!(segs.iter().map(|s| s.area()).sum::<usize>(), 4);
    }

    #[test]
    fn same_id_merges_across_views() {
        let a = mask(2, 1, &[1, 0], &[3, 0]);
        let b = mask(2, 1, &[1, 1], &[3, 3]);
        let segs = merge_to_scene_segments(&[a, b]).unwrap();
        let thing = segs.iter().find(|s| s.instance_id == 3).unwrap();
        assert_eq!(thing.area(), 3);
        assert_eq!(segs.iter().map(|s| s.area()).sum::<usize>(), 4);
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let a = mask(2, 1, &[0, 0], &[0, 0]);
        let b = mask(1, 2, &[0, 0], &[0, 0]);
        assert!(merge_to_scene_segments(&[a, b]).is_err());
    }

    #[test]
    fn perfect_prediction() {
        let m = mask(3, 1, &[1, 2, 0], &[1, 2, 0]);
        let r = evaluate_masks(&[m.clone()], &[m]).unwrap();
        assert_eq!((r.pq, r.sq, r.rq), (1.0, 1.0, 1.0));
    }

    #[test]
    fn eight_of_ten_overlap() {
        let gt = SceneSegment {
            semantic_class: 1,
            instance_id: 1,
            pixels: (0..10).collect(),
        };
        let pred = SceneSegment {
            semantic_class: 1,
            instance_id: 7,
            pixels: (0..8).collect(),
        };
        let r = pq_scene(&[pred], &[gt]).unwrap();
        let c = r.per_class[&1];
        assert_eq!(c.tp, 1);
        assert!((c.sq - 0.8).abs() < 1e-15);
        assert_eq!(c.rq, 1.0);
        assert!((c.pq - 0.8).abs() < 1e-15);
    }

    #[test]
    fn empty_prediction_counts_false_negatives() {
        let gt = mask(2, 1, &[1, 0], &[1, 0]);
        let pred = mask(2, 1, &[0, 0], &[0, 0]);
        let r = evaluate_masks(&[pred], &[gt]).unwrap();
        assert_eq!(r.per_class[&1].fn_, 1);
        assert_eq!(r.per_class[&1].rq, 0.0);
        assert!(pq_scene(&[], &[]).is_err());
    }

    #[test]
    fn report_json_has_expected_keys() {
        let m = mask(2, 1, &[1, 0], &[1, 0]);
        let r = evaluate_masks(&[m.clone()], &[m]).unwrap();
        let v = serde_json::to_value(&r).unwrap();
        for k in ["pq", "sq", "rq", "per_class", "n_tp", "n_fp", "n_fn"] {
            assert!(v.get(k).is_some(), "missing {k}");
        }
        let back: PqReport = serde_json::from_value(v).unwrap();
        assert_eq!(back, r);
    }

    #[test]
    fn histogram_binning() {
        let mut h = Histogram::new(-2.0, 2.0, 4);
        h.add(1.0);
        h.add(1e-9);
        h.add(1e9);
        assert_eq!(h.counts, vec![1, 0, 1, 1]);
        assert_eq!(h.bin_edges(), vec![-2.0, -1.0, 0.0, 1.0, 2.0]);
    }
}
