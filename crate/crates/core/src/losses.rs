//! Supervised detection loss and the adaptive consistency cost.
//!
//! Both losses work directly on [`DetectorOutput`] values and return the
//! gradient with respect to those outputs; the detector graph takes it from
//! there. Class terms are written in probability space, the group softmax in
//! the graph handles the rest.

use serde::{Deserialize, Serialize};

use crate::detector::ClassLossKind;
use crate::error::{Error, Result};
use crate::geometry::{encode_box, Anchor, AnchorLabel, BoxDelta};
use crate::output::DetectorOutput;

/// Floor applied to probabilities inside logarithms.
pub const PROB_FLOOR: f64 = 1e-7;

fn ln_floor(p: f64) -> f64 {
    p.max(PROB_FLOOR).ln()
}

/// `((1 - ps[0])^2 + (1 - pt[0])^2) / 2`: close to 0 when both networks see
/// background, close to 1 when both see an object.
pub fn adaptive_weight(ps: &[f64], pt: &[f64]) -> f64 {
    ((1.0 - ps[0]).powi(2) + (1.0 - pt[0]).powi(2)) / 2.0
}

/// `KL(ps || pt)` with probabilities floored at [`PROB_FLOOR`] inside the
/// logarithms.
pub fn kl_class(ps: &[f64], pt: &[f64]) -> f64 {
    ps.iter()
        .zip(pt)
        .map(|(&s, &t)| if s > 0.0 { s * (ln_floor(s) - ln_floor(t)) } else { 0.0 })
        .sum()
}

pub fn mse_loc(ds: &BoxDelta, dt: &BoxDelta) -> f64 {
    ds.to_array()
        .iter()
        .zip(dt.to_array())
        .map(|(a, b)| (a - b).powi(2))
        .sum()
}

/// Which terms of the consistency cost are active.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Components {
    pub class: bool,
    pub x: bool,
    pub y: bool,
    pub w: bool,
    pub h: bool,
}

impl Default for Components {
    fn default() -> Self {
        Self {
            class: true,
            x: true,
            y: true,
            w: true,
            h: true,
        }
    }
}

impl Components {
    fn deltas(&self) -> [bool; 4] {
        [self.x, self.y, self.w, self.h]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Reduction {
    Mean,
    Sum,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConsistencyConfig {
    /// Weight every position by [`adaptive_weight`]; off means weight 1.
    pub adaptive: bool,
    pub components: Components,
    /// `Mean` divides by the number of anchor positions over all levels.
    pub reduction: Reduction,
}

impl Default for ConsistencyConfig {
    fn default() -> Self {
        Self {
            adaptive: true,
            components: Components::default(),
            reduction: Reduction::Mean,
        }
    }
}

/// A loss value with its gradients with respect to both outputs.
#[derive(Clone, Debug)]
pub struct ConsistencyLoss {
    pub value: f64,
    pub grad_student: DetectorOutput,
    /// Gradient with respect to the (already mirrored) teacher output. The
    /// trainer ignores it; the adversarial search uses it.
    pub grad_teacher: DetectorOutput,
}

/// Dense consistency between a student output and a teacher output already
/// mapped onto the student grid.
///
/// `mask`, if given, has one entry per anchor position in global order;
/// masked-out positions contribute nothing but still count in the mean.
pub fn consistency_cost(
    student: &DetectorOutput,
    teacher: &DetectorOutput,
    config: &ConsistencyConfig,
    mask: Option<&[bool]>,
) -> Result<ConsistencyLoss> {
    student.check_same_layout(teacher)?;
    let n = student.num_positions();
    if let Some(m) = mask {
        if m.len() != n {
            return Err(Error::shape(format!("mask has {} entries for {n} positions", m.len())));
        }
    }
    let norm = match config.reduction {
        Reduction::Mean => 1.0 / n.max(1) as f64,
        Reduction::Sum => 1.0,
    };
    let comps = config.components.deltas();
    let mut gs = student.zeros_like();
    let mut gt = student.zeros_like();
    let mut total = 0.0;
    let mut pos = 0;
    for (li, (ls, lt)) in student.levels.iter().zip(&teacher.levels).enumerate() {
        let k = ls.classes;
        for i in 0..ls.len() {
            let active = mask.is_none_or(|m| m[pos]);
            pos += 1;
            if !active {
                continue;
            }
            let (a, y, x) = ls.unravel(i);
            let ps = ls.class_dist(a, y, x);
            let pt = lt.class_dist(a, y, x);
            let w = if config.adaptive { adaptive_weight(&ps, &pt) } else { 1.0 };
            let kl = if config.components.class { kl_class(&ps, &pt) } else { 0.0 };
            let mut mse = 0.0;
            for (j, on) in comps.iter().enumerate() {
                if *on {
                    let d = ls.deltas[ls.delta_index(a, j, y, x)] - lt.deltas[lt.delta_index(a, j, y, x)];
                    mse += d * d;
                }
            }
            let inner = kl + mse;
            total += w * inner;

            let (gsl, gtl) = (&mut gs.levels[li], &mut gt.levels[li]);
            if config.components.class {
                for c in 0..k {
                    let idx = ls.prob_index(a, c, y, x);
                    let (s, t) = (ps[c], pt[c]);
                    if s > 0.0 {
                        let ds = ln_floor(s) + if s > PROB_FLOOR { 1.0 } else { 0.0 } - ln_floor(t);
                        gsl.probs[idx] += norm * w * ds;
                        if t > PROB_FLOOR {
                            gtl.probs[idx] -= norm * w * s / t;
                        }
                    }
                }
            }
            if config.adaptive {
                let idx = ls.prob_index(a, 0, y, x);
                gsl.probs[idx] -= norm * (1.0 - ps[0]) * inner;
                gtl.probs[idx] -= norm * (1.0 - pt[0]) * inner;
            }
            for (j, on) in comps.iter().enumerate() {
                if *on {
                    let idx = ls.delta_index(a, j, y, x);
                    let d = 2.0 * norm * w * (ls.deltas[idx] - lt.deltas[idx]);
                    gsl.deltas[idx] += d;
                    gtl.deltas[idx] -= d;
                }
            }
        }
    }
    Ok(ConsistencyLoss {
        value: total * norm,
        grad_student: gs,
        grad_teacher: gt,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SupervisedConfig {
    pub pos_iou: f64,
    pub neg_iou: f64,
    /// Hard negatives kept per positive (cross-entropy only).
    pub neg_pos_ratio: f64,
    pub smooth_l1_beta: f64,
    /// Foreground weight of the focal loss; background gets `1 - alpha`.
    pub focal_alpha: f64,
    pub focal_gamma: f64,
}

impl Default for SupervisedConfig {
    fn default() -> Self {
        Self {
            pos_iou: 0.5,
            neg_iou: 0.4,
            neg_pos_ratio: 3.0,
            smooth_l1_beta: 1.0,
            focal_alpha: 0.25,
            focal_gamma: 2.0,
        }
    }
}

impl SupervisedConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.pos_iou > self.neg_iou && self.neg_iou >= 0.0 && self.pos_iou <= 1.0) {
            return Err(Error::config("need 0 <= neg_iou < pos_iou <= 1"));
        }
        if !(self.neg_pos_ratio >= 0.0 && self.smooth_l1_beta > 0.0 && self.focal_gamma >= 0.0) {
            return Err(Error::config("invalid supervised loss constants"));
        }
        if !(0.0..=1.0).contains(&self.focal_alpha) {
            return Err(Error::config("focal_alpha must lie in [0, 1]"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct SupervisedLoss {
    pub value: f64,
    pub classification: f64,
    pub regression: f64,
    pub num_positive: usize,
    pub grad: DetectorOutput,
}

pub fn smooth_l1(d: f64, beta: f64) -> f64 {
    let a = d.abs();
    if a < beta {
        0.5 * a * a / beta
    } else {
        a - 0.5 * beta
    }
}

fn smooth_l1_grad(d: f64, beta: f64) -> f64 {
    (d / beta).clamp(-1.0, 1.0)
}

/// Classification plus SmoothL1 box regression, each divided by
/// `max(#positives, 1)`.
///
/// `labels` and `anchors` are in global anchor order. With cross-entropy the
/// negatives are the `neg_pos_ratio * max(#positives, 1)` hardest ones
/// (largest `-ln p[0]`, ties broken by index); focal loss uses every
/// non-ignored anchor.
pub fn supervised_loss(
    output: &DetectorOutput,
    labels: &[AnchorLabel],
    anchors: &[Anchor],
    kind: ClassLossKind,
    config: &SupervisedConfig,
) -> Result<SupervisedLoss> {
    let n = output.num_positions();
    if labels.len() != n || anchors.len() != n {
        return Err(Error::shape(format!(
            "{} labels / {} anchors for {n} positions",
            labels.len(),
            anchors.len()
        )));
    }
    let mut grad = output.zeros_like();
    let positions: Vec<(usize, usize, usize, usize)> = output.positions().collect();
    let num_pos = labels.iter().filter(|l| l.is_positive()).count();
    let norm = 1.0 / num_pos.max(1) as f64;
    let prob = |i: usize, k: usize| {
        let (li, a, y, x) = positions[i];
        let l = &output.levels[li];
        (li, l.prob_index(a, k, y, x), l.probs[l.prob_index(a, k, y, x)])
    };

    // (anchor, target class) pairs entering the classification term.
    let mut terms: Vec<(usize, usize)> = Vec::new();
    match kind {
        ClassLossKind::CrossEntropy => {
            let mut negs: Vec<(usize, f64)> = labels
                .iter()
                .enumerate()
                .filter(|(_, l)| matches!(l, AnchorLabel::Negative))
                .map(|(i, _)| (i, -ln_floor(prob(i, 0).2)))
                .collect();
            negs.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
            let keep = ((config.neg_pos_ratio * num_pos.max(1) as f64).floor() as usize).min(negs.len());
            for (i, l) in labels.iter().enumerate() {
                if let AnchorLabel::Positive { class, .. } = l {
                    terms.push((i, *class));
                }
            }
            terms.extend(negs[..keep].iter().map(|&(i, _)| (i, 0)));
        }
        ClassLossKind::Focal => {
            for (i, l) in labels.iter().enumerate() {
                match l {
                    AnchorLabel::Positive { class, .. } => terms.push((i, *class)),
                    AnchorLabel::Negative => terms.push((i, 0)),
                    AnchorLabel::Ignore => {}
                }
            }
        }
    }

    let mut cls = 0.0;
    for &(i, k) in &terms {
        let (li, idx, p) = prob(i, k);
        let (v, dp) = match kind {
            ClassLossKind::CrossEntropy => {
                let dp = if p > PROB_FLOOR { -1.0 / p } else { 0.0 };
                (-ln_floor(p), dp)
            }
            ClassLossKind::Focal => {
                let alpha = if k == 0 { 1.0 - config.focal_alpha } else { config.focal_alpha };
                let g = config.focal_gamma;
                let q = 1.0 - p;
                let lp = ln_floor(p);
                let v = -alpha * q.powf(g) * lp;
                let dlp = if p > PROB_FLOOR { 1.0 / p } else { 0.0 };
                let dq = if g == 0.0 { 0.0 } else { g * q.powf(g - 1.0) };
                (v, alpha * (dq * lp - q.powf(g) * dlp))
            }
        };
        cls += v;
        grad.levels[li].probs[idx] += norm * dp;
    }

    let mut reg = 0.0;
    for (i, l) in labels.iter().enumerate() {
        if let AnchorLabel::Positive { target, .. } = l {
            let t = encode_box(target, &anchors[i])?.to_array();
            let (li, a, y, x) = positions[i];
            let level = &output.levels[li];
            for (j, tj) in t.iter().enumerate() {
                let idx = level.delta_index(a, j, y, x);
                let d = level.deltas[idx] - tj;
                reg += smooth_l1(d, config.smooth_l1_beta);
                grad.levels[li].deltas[idx] += norm * smooth_l1_grad(d, config.smooth_l1_beta);
            }
        }
    }
    let (classification, regression) = (cls * norm, reg * norm);
    Ok(SupervisedLoss {
        value: classification + regression,
        classification,
        regression,
        num_positive: num_pos,
        grad,
    })
}
