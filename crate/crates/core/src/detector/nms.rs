use crate::geometry::iou;

use super::Detection;

/// Greedy suppression ignoring classes. Returns indices of the kept
/// detections in descending score order (ties keep input order). A
/// candidate is dropped when its IoU with a kept box exceeds `iou_threshold`.
pub fn nms(dets: &[Detection], iou_threshold: f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score).then(a.cmp(&b)));
    let mut kept: Vec<usize> = Vec::new();
    for i in order {
        if kept
            .iter()
            .all(|&k| iou(&dets[k].bbox, &dets[i].bbox) <= iou_threshold)
        {
            kept.push(i);
        }
    }
    kept
}

/// Per-class suppression; boxes of different classes never suppress each
/// other.
pub fn batched_nms(dets: &[Detection], iou_threshold: f64) -> Vec<Detection> {
    let mut classes: Vec<usize> = dets.iter().map(|d| d.class).collect();
    classes.sort_unstable();
    classes.dedup();
    let mut out = Vec::new();
    for c in classes {
        let group: Vec<Detection> = dets.iter().copied().filter(|d| d.class == c).collect();
        out.extend(nms(&group, iou_threshold).into_iter().map(|i| group[i]));
    }
    out.sort_by(|a, b| b.score.total_cmp(&a.score));
    out
}
