//! Detection metrics: per-class average precision and FROC sensitivity.
//!
//! Matching is greedy in descending score order: a detection takes the
//! same-class ground truth it overlaps most; it is a true positive when that
//! overlap reaches the threshold and the box is still free. AP is the area
//! under the all-points interpolated precision-recall curve.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{load_annotations, ClassLabel, ClassMap};
use crate::detector::Detection;
use crate::error::{Error, Result};
use crate::geometry::{iou, BBox, GtBox};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Overlap {
    Iou,
    /// Intersection over the detected box's area.
    Iobb,
}

impl Overlap {
    pub fn measure(self, det: &BBox, gt: &BBox) -> f64 {
        match self {
            Overlap::Iou => iou(det, gt),
            Overlap::Iobb => {
                let [ax1, ay1, ax2, ay2] = det.corners();
                let [bx1, by1, bx2, by2] = gt.corners();
                let iw = (ax2.min(bx2) - ax1.max(bx1)).max(0.0);
                let ih = (ay2.min(by2) - ay1.max(by1)).max(0.0);
                (iw * ih / det.area()).clamp(0.0, 1.0)
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub iou_threshold: f64,
    pub overlap: Overlap,
    pub fp_budgets: Vec<f64>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            iou_threshold: 0.5,
            overlap: Overlap::Iou,
            fp_budgets: vec![0.5, 1.0, 2.0, 4.0],
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.iou_threshold > 0.0 && self.iou_threshold <= 1.0) {
            return Err(Error::config("iou_threshold must lie in (0, 1]"));
        }
        if self.fp_budgets.iter().any(|b| !(*b >= 0.0)) || self.fp_budgets.windows(2).any(|w| w[0] > w[1]) {
            return Err(Error::config("fp_budgets must be non-negative and ascending"));
        }
        Ok(())
    }
}

/// TP flags for detections of one class in one image, given in descending
/// score order.
pub fn match_detections(dets: &[BBox], gts: &[BBox], threshold: f64, overlap: Overlap) -> Vec<bool> {
    let mut taken = vec![false; gts.len()];
    dets.iter()
        .map(|d| {
            let mut best: Option<(usize, f64)> = None;
            for (j, g) in gts.iter().enumerate() {
                let o = overlap.measure(d, g);
                if best.is_none_or(|(_, b)| o > b) {
                    best = Some((j, o));
                }
            }
            match best {
                Some((j, o)) if o >= threshold && !taken[j] => {
                    taken[j] = true;
                    true
                }
                _ => false,
            }
        })
        .collect()
}

/// Precision at every rank of a ranked list of TP flags.
fn precisions(flags: &[bool]) -> Vec<f64> {
    let mut tp = 0usize;
    flags
        .iter()
        .enumerate()
        .map(|(i, &f)| {
            tp += f as usize;
            tp as f64 / (i + 1) as f64
        })
        .collect()
}

/// All-points interpolated AP for flags in descending score order.
///
/// `None` when there is nothing to score (no ground truth and no
/// detections); detections without ground truth give 0.
pub fn average_precision(flags: &[bool], num_gt: usize) -> Option<f64> {
    if num_gt == 0 {
        return if flags.is_empty() { None } else { Some(0.0) };
    }
    let mut env = precisions(flags);
    for i in (0..env.len().saturating_sub(1)).rev() {
        env[i] = env[i].max(env[i + 1]);
    }
    let sum = flags.iter().zip(&env).filter(|(f, _)| **f).fold(0.0, |acc, (_, p)| acc + p);
    Some(sum / num_gt as f64)
}

/// Precision-recall points `(recall, precision)` of a ranked list.
pub fn pr_curve(flags: &[bool], num_gt: usize) -> Vec<(f64, f64)> {
    let mut tp = 0usize;
    flags
        .iter()
        .enumerate()
        .map(|(i, &f)| {
            tp += f as usize;
            (tp as f64 / num_gt.max(1) as f64, tp as f64 / (i + 1) as f64)
        })
        .collect()
}

/// FROC points `(false positives per image, sensitivity)`, one per distinct
/// score threshold, starting at `(0, 0)`. `scored` holds `(score, is_tp)`.
pub fn froc_curve(scored: &[(f64, bool)], num_gt: usize, num_images: usize) -> Vec<(f64, f64)> {
    let mut order: Vec<usize> = (0..scored.len()).collect();
    order.sort_by(|&a, &b| scored[b].0.total_cmp(&scored[a].0).then(a.cmp(&b)));
    let (n, g) = (num_images.max(1) as f64, num_gt.max(1) as f64);
    let mut points = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0usize, 0usize);
    for (k, &i) in order.iter().enumerate() {
        if scored[i].1 {
            tp += 1;
        } else {
            fp += 1;
        }
        let last_of_group = order.get(k + 1).is_none_or(|&j| scored[j].0 != scored[i].0);
        if last_of_group {
            points.push((fp as f64 / n, tp as f64 / g));
        }
    }
    points
}

/// Sensitivity at a false-positive budget on a FROC curve: the last point
/// within budget, linearly interpolated toward the next one.
pub fn sensitivity_at(curve: &[(f64, f64)], budget: f64) -> f64 {
    let Some(k) = curve.iter().rposition(|p| p.0 <= budget) else {
        return 0.0;
    };
    let (f0, s0) = curve[k];
    match curve.get(k + 1) {
        Some(&(f1, s1)) if f1 > f0 => s0 + (s1 - s0) * (budget - f0) / (f1 - f0),
        _ => s0,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// AP of class `i + 1`; `None` when the class is absent from both
    /// detections and ground truth.
    pub per_class_ap: Vec<Option<f64>>,
    pub map: f64,
    pub sensitivities: Vec<(f64, f64)>,
    pub pr_curves: Vec<Vec<(f64, f64)>>,
    pub froc_curve: Vec<(f64, f64)>,
    pub num_images: usize,
    pub num_gt: usize,
}

/// Evaluates per-image detections against per-image ground truth. Classes
/// are `1..=num_classes`.
pub fn evaluate(dets: &[Vec<Detection>], gts: &[Vec<GtBox>], num_classes: usize, config: &EvalConfig) -> Result<EvalReport> {
    config.validate()?;
    if dets.len() != gts.len() {
        return Err(Error::shape(format!("{} prediction lists for {} images", dets.len(), gts.len())));
    }
    if let Some(d) = dets.iter().flatten().find(|d| !d.score.is_finite() || d.class == 0 || d.class > num_classes) {
        return Err(Error::Data(format!("invalid detection {d:?}")));
    }
    let mut per_class_ap = Vec::with_capacity(num_classes);
    let mut pr_curves = Vec::with_capacity(num_classes);
    let mut scored: Vec<(f64, bool)> = Vec::new();
    for class in 1..=num_classes {
        // (score, image, rank within image, tp)
        let mut ranked: Vec<(f64, usize, usize, bool)> = Vec::new();
        let mut num_gt = 0;
        for (img, (d, g)) in dets.iter().zip(gts).enumerate() {
            let mut mine: Vec<&Detection> = d.iter().filter(|x| x.class == class).collect();
            mine.sort_by(|a, b| b.score.total_cmp(&a.score));
            let gt_boxes: Vec<BBox> = g.iter().filter(|x| x.class == class).map(|x| x.bbox).collect();
            num_gt += gt_boxes.len();
            let boxes: Vec<BBox> = mine.iter().map(|x| x.bbox).collect();
            let flags = match_detections(&boxes, &gt_boxes, config.iou_threshold, config.overlap);
            ranked.extend(mine.iter().zip(flags).enumerate().map(|(r, (x, f))| (x.score, img, r, f)));
        }
        ranked.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        let flags: Vec<bool> = ranked.iter().map(|r| r.3).collect();
        per_class_ap.push(average_precision(&flags, num_gt));
        pr_curves.push(pr_curve(&flags, num_gt));
        scored.extend(ranked.iter().map(|r| (r.0, r.3)));
    }
    let present: Vec<f64> = per_class_ap.iter().flatten().copied().collect();
    let map = if present.is_empty() { 0.0 } else { present.iter().fold(0.0, |a, b| a + b) / present.len() as f64 };
    let num_gt: usize = gts.iter().map(Vec::len).sum();
    let froc = if scored.is_empty() { vec![(0.0, 0.0)] } else { froc_curve(&scored, num_gt, gts.len()) };
    let sensitivities = config
        .fp_budgets
        .iter()
        .map(|&b| (b, if num_gt == 0 { 0.0 } else { sensitivity_at(&froc, b) }))
        .collect();
    Ok(EvalReport {
        per_class_ap,
        map,
        sensitivities,
        pr_curves,
        froc_curve: froc,
        num_images: gts.len(),
        num_gt,
    })
}

/// Which parts of a report to write.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MetricSet {
    Map,
    Froc,
    All,
}

/// Writes `report.csv` (`metric,value`) plus curve files `pr_curve.csv`
/// and `froc_curve.csv`.
pub fn write_report(dir: &Path, report: &EvalReport, metrics: MetricSet) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut w = csv::Writer::from_path(dir.join("report.csv"))?;
    w.write_record(["metric", "value"])?;
    if metrics != MetricSet::Froc {
        w.write_record(["mAP".to_string(), report.map.to_string()])?;
        for (i, ap) in report.per_class_ap.iter().enumerate() {
            let v = ap.map_or_else(|| "absent".to_string(), |v| v.to_string());
            w.write_record([format!("AP_class_{}", i + 1), v])?;
        }
    }
    if metrics != MetricSet::Map {
        for (b, s) in &report.sensitivities {
            w.write_record([format!("sensitivity@{b}"), s.to_string()])?;
        }
    }
    w.flush()?;
    if metrics != MetricSet::Froc {
        let mut w = csv::Writer::from_path(dir.join("pr_curve.csv"))?;
        w.write_record(["class", "recall", "precision"])?;
        for (i, c) in report.pr_curves.iter().enumerate() {
            for (r, p) in c {
                w.write_record([(i + 1).to_string(), r.to_string(), p.to_string()])?;
            }
        }
        w.flush()?;
    }
    if metrics != MetricSet::Map {
        let mut w = csv::Writer::from_path(dir.join("froc_curve.csv"))?;
        w.write_record(["fp_per_image", "sensitivity"])?;
        for (f, s) in &report.froc_curve {
            w.write_record([f.to_string(), s.to_string()])?;
        }
        w.flush()?;
    }
    Ok(())
}

/// One detection in a predictions file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectionRecord {
    pub image: String,
    pub class: ClassLabel,
    pub score: f64,
    #[serde(rename = "box")]
    pub bbox: [f64; 4],
}

pub fn save_detections(path: &Path, records: &[DetectionRecord]) -> Result<()> {
    let mut out = BufWriter::new(fs::File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn load_detections(path: &Path) -> Result<Vec<DetectionRecord>> {
    let mut out = Vec::new();
    let mut bad = Vec::new();
    for (i, line) in BufReader::new(fs::File::open(path)?).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<DetectionRecord>(&line) {
            Ok(r) if r.score.is_finite() && r.bbox[2] > r.bbox[0] && r.bbox[3] > r.bbox[1] => out.push(r),
            _ => bad.push(i + 1),
        }
    }
    if !bad.is_empty() {
        return Err(Error::MalformedAnnotations {
            path: path.to_path_buf(),
            lines: bad,
        });
    }
    Ok(out)
}

/// Evaluates a predictions file against a ground-truth annotation file.
/// Images are identified by the annotation `path`; predictions for images
/// not in the ground truth are rejected.
pub fn evaluate_files(predictions: &Path, ground_truth: &Path, config: &EvalConfig) -> Result<EvalReport> {
    let gt_records = load_annotations(ground_truth)?;
    let classes = ClassMap::from_records(&gt_records);
    let index: BTreeMap<&str, usize> = gt_records.iter().enumerate().map(|(i, r)| (r.path.as_str(), i)).collect();
    let gts = gt_records.iter().map(|r| r.gt_boxes(&classes)).collect::<Result<Vec<_>>>()?;
    let mut dets: Vec<Vec<Detection>> = vec![Vec::new(); gts.len()];
    for r in load_detections(predictions)? {
        let img = *index
            .get(r.image.as_str())
            .ok_or_else(|| Error::Data(format!("prediction for unknown image {}", r.image)))?;
        let [x1, y1, x2, y2] = r.bbox;
        dets[img].push(Detection {
            bbox: BBox::from_corners(x1, y1, x2, y2)?,
            class: classes.id(&r.class)?,
            score: r.score,
        });
    }
    evaluate(&dets, &gts, classes.names().len(), config)
}
