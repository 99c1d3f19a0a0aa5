//! Boxes, anchors, the box-delta codec, IoU, anchor assignment and the
//! horizontal-mirror correspondence between prediction grids.
//!
//! Boxes are center-size internally; corner form only appears at file
//! boundaries. Pixel `i` covers the continuous interval `[i, i + 1)`, so a
//! horizontal flip maps `x` to `W - x`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::output::DetectorOutput;

/// Upper bound on `pw`/`ph` before exponentiation in [`decode_box`].
pub const MAX_LOG_SCALE: f64 = 6.907_755_278_982_137; // ln(1000)

/// Axis-aligned box in center-size form (pixels).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Result<Self> {
        let b = Self { x, y, w, h };
        b.validate()?;
        Ok(b)
    }

    pub fn from_corners(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        Self::new((x1 + x2) / 2.0, (y1 + y2) / 2.0, x2 - x1, y2 - y1)
    }

    pub fn corners(&self) -> [f64; 4] {
        [
            self.x - self.w / 2.0,
            self.y - self.h / 2.0,
            self.x + self.w / 2.0,
            self.y + self.h / 2.0,
        ]
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    fn validate(&self) -> Result<()> {
        let finite = [self.x, self.y, self.w, self.h].iter().all(|v| v.is_finite());
        if !finite || self.w <= 0.0 || self.h <= 0.0 {
            return Err(Error::InvalidGeometry(format!(
                "box needs finite values and positive extent, got {self:?}"
            )));
        }
        Ok(())
    }

    /// Mirror image under a horizontal flip of an image `image_width` wide.
    pub fn hflip(&self, image_width: f64) -> Self {
        Self {
            x: image_width - self.x,
            ..*self
        }
    }
}

/// A default anchor box. Same semantics as [`BBox`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Anchor {
    pub xa: f64,
    pub ya: f64,
    pub wa: f64,
    pub ha: f64,
}

impl Anchor {
    pub fn new(xa: f64, ya: f64, wa: f64, ha: f64) -> Result<Self> {
        if !(wa > 0.0 && ha > 0.0) || !xa.is_finite() || !ya.is_finite() {
            return Err(Error::InvalidGeometry(format!(
                "anchor needs positive extent, got ({xa}, {ya}, {wa}, {ha})"
            )));
        }
        Ok(Self { xa, ya, wa, ha })
    }

    pub fn as_box(&self) -> BBox {
        BBox {
            x: self.xa,
            y: self.ya,
            w: self.wa,
            h: self.ha,
        }
    }
}

/// Regression target of a box relative to an anchor: offsets `px`, `py` in
/// anchor units and log-scale ratios `pw`, `ph`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BoxDelta {
    pub px: f64,
    pub py: f64,
    pub pw: f64,
    pub ph: f64,
}

impl BoxDelta {
    pub fn new(px: f64, py: f64, pw: f64, ph: f64) -> Self {
        Self { px, py, pw, ph }
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.px, self.py, self.pw, self.ph]
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }
}

pub fn encode_box(b: &BBox, a: &Anchor) -> Result<BoxDelta> {
    b.validate()?;
    if !(a.wa > 0.0 && a.ha > 0.0) {
        return Err(Error::InvalidGeometry(format!("anchor {a:?} has non-positive extent")));
    }
    Ok(BoxDelta {
        px: (b.x - a.xa) / a.wa,
        py: (b.y - a.ya) / a.ha,
        pw: (b.w / a.wa).ln(),
        ph: (b.h / a.ha).ln(),
    })
}

/// Inverse of [`encode_box`]. Log scales above [`MAX_LOG_SCALE`] are clamped
/// (with a warning) so untrained networks cannot overflow `exp`.
pub fn decode_box(d: &BoxDelta, a: &Anchor) -> BBox {
    let clamp = |v: f64| {
        if v > MAX_LOG_SCALE {
            log::warn!("clamping log-scale delta {v} to ln(1000)");
            MAX_LOG_SCALE
        } else {
            v
        }
    };
    BBox {
        x: a.xa + d.px * a.wa,
        y: a.ya + d.py * a.ha,
        w: a.wa * clamp(d.pw).exp(),
        h: a.ha * clamp(d.ph).exp(),
    }
}

pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let [ax1, ay1, ax2, ay2] = a.corners();
    let [bx1, by1, bx2, by2] = b.corners();
    let iw = (ax2.min(bx2) - ax1.max(bx1)).max(0.0);
    let ih = (ay2.min(by2) - ay1.max(by1)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

/// One pyramid level of anchors: a `height x width` lattice with spacing
/// `stride`, each cell carrying the same list of `(w, h)` shapes.
#[derive(Clone, Debug, PartialEq)]
pub struct AnchorLevel {
    pub stride: usize,
    pub height: usize,
    pub width: usize,
    pub shapes: Vec<(f64, f64)>,
}

impl AnchorLevel {
    pub fn len(&self) -> usize {
        self.height * self.width * self.shapes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Anchor at within-level index `i`, ordered `(y, x, shape)`.
    pub fn anchor(&self, i: usize) -> Anchor {
        let a = i % self.shapes.len();
        let cell = i / self.shapes.len();
        let (y, x) = (cell / self.width, cell % self.width);
        let s = self.stride as f64;
        let (wa, ha) = self.shapes[a];
        Anchor {
            xa: (x as f64 + 0.5) * s,
            ya: (y as f64 + 0.5) * s,
            wa,
            ha,
        }
    }
}

/// Anchors for every level, coarse-to-fine; the global anchor index runs
/// over levels in that order.
#[derive(Clone, Debug, PartialEq)]
pub struct AnchorGrid {
    pub levels: Vec<AnchorLevel>,
}

impl AnchorGrid {
    /// Builds the lattice for an `image_height x image_width` input.
    ///
    /// Each level's base size is `size_factor * stride`; the shapes are every
    /// `scale x ratio` combination with `ratio = h / w`. Ratios are kept as a
    /// set closed under horizontal mirroring (a flip does not change `w` or
    /// `h`), so the mirror map on shape indices is the identity.
    pub fn new(
        image_height: usize,
        image_width: usize,
        strides: &[usize],
        size_factor: f64,
        scales: &[f64],
        ratios: &[f64],
    ) -> Result<Self> {
        let mut levels = Vec::with_capacity(strides.len());
        for &stride in strides {
            if stride == 0 || image_height % stride != 0 || image_width % stride != 0 {
                return Err(Error::shape(format!(
                    "image {image_height}x{image_width} is not a multiple of stride {stride}"
                )));
            }
            let base = size_factor * stride as f64;
            let shapes = scales
                .iter()
                .flat_map(|&s| {
                    ratios
                        .iter()
                        .map(move |&r| (base * s / r.sqrt(), base * s * r.sqrt()))
                })
                .collect();
            levels.push(AnchorLevel {
                stride,
                height: image_height / stride,
                width: image_width / stride,
                shapes,
            });
        }
        Ok(Self { levels })
    }

    pub fn len(&self) -> usize {
        self.levels.iter().map(AnchorLevel::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// All anchors in global order.
    pub fn anchors(&self) -> Vec<Anchor> {
        self.levels
            .iter()
            .flat_map(|l| (0..l.len()).map(move |i| l.anchor(i)))
            .collect()
    }
}

/// A ground-truth box with its foreground class (`>= 1`).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GtBox {
    pub bbox: BBox,
    pub class: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum AnchorLabel {
    Positive { class: usize, target: BBox, gt: usize },
    Negative,
    Ignore,
}

impl AnchorLabel {
    pub fn is_positive(&self) -> bool {
        matches!(self, AnchorLabel::Positive { .. })
    }
}

/// Max-IoU anchor matching.
///
/// Anchors whose best IoU is `>= pos_iou` become positive for that ground
/// truth, `< neg_iou` negative, anything in between is ignored. Afterwards
/// every ground-truth box claims its best-overlapping anchor not already
/// claimed by an earlier box, so each box has at least one positive.
pub fn assign_anchors(
    gt: &[GtBox],
    grid: &AnchorGrid,
    pos_iou: f64,
    neg_iou: f64,
) -> Result<Vec<AnchorLabel>> {
    if grid.is_empty() {
        return Err(Error::InvalidGeometry("anchor grid is empty".into()));
    }
    if pos_iou <= neg_iou {
        return Err(Error::config(format!(
            "pos_iou ({pos_iou}) must exceed neg_iou ({neg_iou})"
        )));
    }
    let anchors = grid.anchors();
    if gt.is_empty() {
        return Ok(vec![AnchorLabel::Negative; anchors.len()]);
    }
    let ious: Vec<Vec<f64>> = anchors
        .iter()
        .map(|a| gt.iter().map(|g| iou(&a.as_box(), &g.bbox)).collect())
        .collect();

    let mut labels: Vec<AnchorLabel> = ious
        .iter()
        .map(|row| {
            let (best, &v) = row
                .iter()
                .enumerate()
                .fold((0, &f64::NEG_INFINITY), |acc, (i, v)| if v > acc.1 { (i, v) } else { acc });
            if v >= pos_iou {
                AnchorLabel::Positive {
                    class: gt[best].class,
                    target: gt[best].bbox,
                    gt: best,
                }
            } else if v < neg_iou {
                AnchorLabel::Negative
            } else {
                AnchorLabel::Ignore
            }
        })
        .collect();

    let mut claimed = vec![false; anchors.len()];
    for (gi, g) in gt.iter().enumerate() {
        let mut best: Option<(usize, f64)> = None;
        for (ai, row) in ious.iter().enumerate() {
            if claimed[ai] {
                continue;
            }
            if best.is_none_or(|(_, v)| row[gi] > v) {
                best = Some((ai, row[gi]));
            }
        }
        if let Some((ai, _)) = best {
            claimed[ai] = true;
            labels[ai] = AnchorLabel::Positive {
                class: g.class,
                target: g.bbox,
                gt: gi,
            };
        }
    }
    Ok(labels)
}

/// Maps predictions made on an image onto the grid of its horizontal mirror.
///
/// Column `j` of every level goes to column `W_level - 1 - j`; `px` changes
/// sign; class distributions and `py`, `pw`, `ph` are unchanged. Anchor
/// shape `a` maps to shape `a`: the shape set is mirror-symmetric (see
/// [`AnchorGrid::new`]), and the consistency loss relies on this.
pub fn mirror_predictions(output: &DetectorOutput) -> DetectorOutput {
    let mut out = output.clone();
    for level in &mut out.levels {
        let w = level.width;
        for row in level.probs.chunks_mut(w) {
            row.reverse();
        }
        for (ri, row) in level.deltas.chunks_mut(w).enumerate() {
            row.reverse();
            // Rows are ordered (channel, y); channel % 4 == 0 is px.
            if (ri / level.height) % 4 == 0 {
                row.iter_mut().for_each(|v| *v = -*v);
            }
        }
    }
    out
}

/// Vertical counterpart of [`mirror_predictions`]: rows are reversed and
/// `py` changes sign.
pub fn vmirror_predictions(output: &DetectorOutput) -> DetectorOutput {
    let mut out = output.clone();
    for level in &mut out.levels {
        let (h, w) = (level.height, level.width);
        let plane = h * w;
        for ch in level.probs.chunks_mut(plane) {
            reverse_rows(ch, w);
        }
        for (ci, ch) in level.deltas.chunks_mut(plane).enumerate() {
            reverse_rows(ch, w);
            if ci % 4 == 1 {
                ch.iter_mut().for_each(|v| *v = -*v);
            }
        }
    }
    out
}

fn reverse_rows(plane: &mut [f64], width: usize) {
    let h = plane.len() / width;
    for y in 0..h / 2 {
        let (top, bottom) = plane.split_at_mut((h - 1 - y) * width);
        top[y * width..(y + 1) * width].swap_with_slice(&mut bottom[..width]);
    }
}

/// Geometric map from the student view to the teacher view. Both flips are
/// involutions, commute, and act on prediction grids as signed
/// permutations, so [`Correspondence::apply`] is its own inverse and its
/// own transpose (gradients map back through the same call).
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Correspondence {
    pub hflip: bool,
    pub vflip: bool,
}

impl Correspondence {
    pub fn apply(&self, output: &DetectorOutput) -> DetectorOutput {
        let out = if self.hflip { mirror_predictions(output) } else { output.clone() };
        if self.vflip {
            vmirror_predictions(&out)
        } else {
            out
        }
    }

    pub fn apply_image(&self, image: &Image) -> Image {
        let out = if self.hflip { image.hflip() } else { image.clone() };
        if self.vflip {
            out.vflip()
        } else {
            out
        }
    }
}

/// Result of [`rotate_boxes`]: surviving boxes tagged with their input
/// index, and the indices rotated entirely out of frame.
#[derive(Clone, Debug, PartialEq)]
pub struct RotatedBoxes {
    pub kept: Vec<(usize, BBox)>,
    pub dropped: Vec<usize>,
}

/// Rotates boxes by `angle_deg` about the image center and returns the
/// axis-aligned hull of each rotated rectangle, clipped to the image.
///
/// Uses the same point map as image rotation in the augmentation module:
/// `p' = c + R(angle) (p - c)` in pixel coordinates.
pub fn rotate_boxes(
    boxes: &[BBox],
    angle_deg: f64,
    image_height: usize,
    image_width: usize,
) -> RotatedBoxes {
    let (cx, cy) = (image_width as f64 / 2.0, image_height as f64 / 2.0);
    let (s, c) = angle_deg.to_radians().sin_cos();
    let (wmax, hmax) = (image_width as f64, image_height as f64);
    let mut kept = Vec::with_capacity(boxes.len());
    let mut dropped = Vec::new();
    for (i, b) in boxes.iter().enumerate() {
        let [x1, y1, x2, y2] = b.corners();
        let mut lo = (f64::INFINITY, f64::INFINITY);
        let mut hi = (f64::NEG_INFINITY, f64::NEG_INFINITY);
        for (px, py) in [(x1, y1), (x2, y1), (x2, y2), (x1, y2)] {
            let (dx, dy) = (px - cx, py - cy);
            let rx = cx + c * dx - s * dy;
            let ry = cy + s * dx + c * dy;
            lo = (lo.0.min(rx), lo.1.min(ry));
            hi = (hi.0.max(rx), hi.1.max(ry));
        }
        let (nx1, ny1) = (lo.0.max(0.0), lo.1.max(0.0));
        let (nx2, ny2) = (hi.0.min(wmax), hi.1.min(hmax));
        match BBox::from_corners(nx1, ny1, nx2, ny2) {
            Ok(r) if nx2 - nx1 >= 1.0 && ny2 - ny1 >= 1.0 => kept.push((i, r)),
            _ => dropped.push(i),
        }
    }
    RotatedBoxes { kept, dropped }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::output::LevelOutput;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn bx(x: f64, y: f64, w: f64, h: f64) -> BBox {
        BBox::new(x, y, w, h).unwrap()
    }

    #[test]
    fn encode_hand_example() {
        let d = encode_box(&bx(12.0, 10.0, 8.0, 4.0), &Anchor::new(10.0, 10.0, 4.0, 4.0).unwrap()).unwrap();
        assert!((d.px - 0.5).abs() < 1e-12);
        assert_eq!(d.py, 0.0);
        assert!((d.pw - 2f64.ln()).abs() < 1e-12);
        assert_eq!(d.ph, 0.0);
    }

    #[test]
    fn encode_identity_is_zero() {
        let a = Anchor::new(7.0, 3.0, 5.0, 2.0).unwrap();
        assert_eq!(encode_box(&a.as_box(), &a).unwrap(), BoxDelta::default());
    }

    #[test]
    fn decode_examples() {
        let a = Anchor::new(10.0, 10.0, 4.0, 4.0).unwrap();
        assert_eq!(decode_box(&BoxDelta::default(), &a), bx(10.0, 10.0, 4.0, 4.0));
        let b = decode_box(&BoxDelta::new(0.5, 0.0, 2f64.ln(), 0.0), &a);
        assert!((b.x - 12.0).abs() < 1e-12 && (b.w - 8.0).abs() < 1e-12);
        assert_eq!((b.y, b.h), (10.0, 4.0));
    }

    #[test]
    fn decode_clamps_huge_scales() {
        let a = Anchor::new(0.0, 0.0, 2.0, 2.0).unwrap();
        let b = decode_box(&BoxDelta::new(0.0, 0.0, 1e6, 1e6), &a);
        assert!((b.w - 2000.0).abs() < 1e-6);
        assert!(b.h.is_finite());
    }

    #[test]
    fn encode_rejects_degenerate_extent() {
        let a = Anchor::new(0.0, 0.0, 2.0, 2.0).unwrap();
        let bad = BBox { x: 0.0, y: 0.0, w: 0.0, h: 1.0 };
        assert!(matches!(encode_box(&bad, &a), Err(Error::InvalidGeometry(_))));
        assert!(Anchor::new(0.0, 0.0, -1.0, 1.0).is_err());
    }

    #[test]
    fn iou_examples() {
        let a = bx(5.0, 5.0, 10.0, 10.0);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &bx(50.0, 50.0, 10.0, 10.0)), 0.0);
        assert!((iou(&a, &bx(10.0, 5.0, 10.0, 10.0)) - 50.0 / 150.0).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn iou_symmetric_and_bounded(
            x1 in -50.0..50.0f64, y1 in -50.0..50.0f64, w1 in 0.1..40.0f64, h1 in 0.1..40.0f64,
            x2 in -50.0..50.0f64, y2 in -50.0..50.0f64, w2 in 0.1..40.0f64, h2 in 0.1..40.0f64,
        ) {
            let a = bx(x1, y1, w1, h1);
            let b = bx(x2, y2, w2, h2);
            let v = iou(&a, &b);
            prop_assert!((0.0..=1.0).contains(&v));
            prop_assert_eq!(v, iou(&b, &a));
            prop_assert!((iou(&a, &a) - 1.0).abs() < 1e-12);
        }

        #[test]
        fn codec_round_trip(
            x in -100.0..100.0f64, y in -100.0..100.0f64, w in 0.5..100.0f64, h in 0.5..100.0f64,
            xa in -100.0..100.0f64, ya in -100.0..100.0f64, wa in 0.5..100.0f64, ha in 0.5..100.0f64,
        ) {
            let b = bx(x, y, w, h);
            let a = Anchor::new(xa, ya, wa, ha).unwrap();
            let r = decode_box(&encode_box(&b, &a).unwrap(), &a);
            for (p, q) in [(r.x, x), (r.y, y), (r.w, w), (r.h, h)] {
                prop_assert!((p - q).abs() < 1e-6);
            }
        }
    }

    fn small_grid() -> AnchorGrid {
        AnchorGrid::new(32, 32, &[16, 8], 2.0, &[1.0], &[0.5, 1.0, 2.0]).unwrap()
    }

    #[test]
    fn grid_counts_and_order() {
        let g = small_grid();
        assert_eq!(g.levels[0].len(), 2 * 2 * 3);
        assert_eq!(g.levels[1].len(), 4 * 4 * 3);
        assert_eq!(g.len(), 60);
        let a = g.levels[1].anchor(3 * 5 + 1);
        assert_eq!((a.xa, a.ya), (12.0, 12.0));
        assert!(AnchorGrid::new(30, 32, &[16], 2.0, &[1.0], &[1.0]).is_err());
    }

    #[test]
    fn assign_without_ground_truth_is_all_negative() {
        let labels = assign_anchors(&[], &small_grid(), 0.5, 0.4).unwrap();
        assert!(labels.iter().all(|l| *l == AnchorLabel::Negative));
    }

    #[test]
    fn assign_exact_anchor_match() {
        let g = small_grid();
        let anchor = g.levels[1].anchor(7);
        let gt = [GtBox { bbox: anchor.as_box(), class: 2 }];
        let labels = assign_anchors(&gt, &g, 0.5, 0.4).unwrap();
        let idx = g.levels[0].len() + 7;
        match labels[idx] {
            AnchorLabel::Positive { class, target, .. } => {
                assert_eq!(class, 2);
                assert_eq!(encode_box(&target, &anchor).unwrap(), BoxDelta::default());
            }
            other => panic!("expected positive, got {other:?}"),
        }
    }

    #[test]
    fn assign_rejects_bad_thresholds_and_empty_grid() {
        assert!(assign_anchors(&[], &small_grid(), 0.4, 0.5).is_err());
        let empty = AnchorGrid { levels: vec![] };
        assert!(assign_anchors(&[], &empty, 0.5, 0.4).is_err());
    }

    /// Independent brute-force assignment: threshold by max IoU, then force
    /// each ground truth onto its best still-unclaimed anchor.
    fn brute_force(gt: &[GtBox], anchors: &[Anchor], pos: f64, neg: f64) -> Vec<Option<Option<usize>>> {
        // None = ignore, Some(None) = negative, Some(Some(g)) = positive for g
        let mut out = Vec::new();
        for a in anchors {
            let mut best = None;
            let mut bv = -1.0;
            for (gi, g) in gt.iter().enumerate() {
                let v = iou(&a.as_box(), &g.bbox);
                if v > bv {
                    bv = v;
                    best = Some(gi);
                }
            }
            out.push(if bv >= pos {
                Some(best)
            } else if bv < neg {
                Some(None)
            } else {
                None
            });
        }
        let mut taken = vec![false; anchors.len()];
        for (gi, g) in gt.iter().enumerate() {
            let mut bi = usize::MAX;
            let mut bv = -1.0;
            for (ai, a) in anchors.iter().enumerate() {
                let v = iou(&a.as_box(), &g.bbox);
                if !taken[ai] && v > bv {
                    bv = v;
                    bi = ai;
                }
            }
            taken[bi] = true;
            out[bi] = Some(Some(gi));
        }
        out
    }

    #[test]
    fn assign_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        // 20 anchors: a 2x2 lattice at stride 16 with five shapes.
        let grid = AnchorGrid::new(32, 32, &[16], 1.5, &[0.8, 1.2], &[0.5, 1.0, 2.0]).unwrap();
        let grid = AnchorGrid {
            levels: vec![AnchorLevel {
                shapes: grid.levels[0].shapes[..5].to_vec(),
                ..grid.levels[0].clone()
            }],
        };
        assert_eq!(grid.len(), 20);
        for _ in 0..200 {
            let gt: Vec<GtBox> = (0..3)
                .map(|k| GtBox {
                    bbox: bx(
                        rng.random_range(4.0..28.0),
                        rng.random_range(4.0..28.0),
                        rng.random_range(6.0..30.0),
                        rng.random_range(6.0..30.0),
                    ),
                    class: k + 1,
                })
                .collect();
            let labels = assign_anchors(&gt, &grid, 0.5, 0.4).unwrap();
            let oracle = brute_force(&gt, &grid.anchors(), 0.5, 0.4);
            for (l, o) in labels.iter().zip(&oracle) {
                match (l, o) {
                    (AnchorLabel::Positive { gt: g, .. }, Some(Some(og))) => assert_eq!(g, og),
                    (AnchorLabel::Negative, Some(None)) | (AnchorLabel::Ignore, None) => {}
                    other => panic!("mismatch {other:?}"),
                }
            }
            for gi in 0..gt.len() {
                assert!(labels
                    .iter()
                    .any(|l| matches!(l, AnchorLabel::Positive { gt, .. } if *gt == gi)));
            }
        }
    }

    fn random_output(rng: &mut ChaCha8Rng) -> DetectorOutput {
        let mut level = LevelOutput::zeros(8, 3, 5, 2, 3);
        level.probs.iter_mut().for_each(|v| *v = rng.random());
        level.deltas.iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
        DetectorOutput { levels: vec![level] }
    }

    #[test]
    fn mirror_is_an_involution() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let o = random_output(&mut rng);
        assert_eq!(mirror_predictions(&mirror_predictions(&o)), o);
    }

    #[test]
    fn mirror_moves_columns_and_negates_px() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let o = random_output(&mut rng);
        let m = mirror_predictions(&o);
        let (l, ml) = (&o.levels[0], &m.levels[0]);
        for a in 0..2 {
            for y in 0..3 {
                for x in 0..5 {
                    assert_eq!(ml.class_dist(a, y, 4 - x), l.class_dist(a, y, x));
                    let (d, md) = (l.box_delta(a, y, x), ml.box_delta(a, y, 4 - x));
                    assert_eq!(md, BoxDelta::new(-d.px, d.py, d.pw, d.ph));
                }
            }
        }
    }

    #[test]
    fn mirror_single_column_negates_in_place() {
        let mut level = LevelOutput::zeros(8, 2, 1, 1, 2);
        level.deltas = vec![0.3, -0.2, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let m = mirror_predictions(&DetectorOutput { levels: vec![level.clone()] });
        assert_eq!(m.levels[0].deltas[..2], [-0.3, 0.2]);
        assert_eq!(m.levels[0].deltas[2..], level.deltas[2..]);
    }

    #[test]
    fn vertical_mirror_moves_rows_and_negates_py() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let o = random_output(&mut rng);
        let m = vmirror_predictions(&o);
        assert_eq!(vmirror_predictions(&m), o);
        let (l, ml) = (&o.levels[0], &m.levels[0]);
        for a in 0..2 {
            for y in 0..3 {
                for x in 0..5 {
                    assert_eq!(ml.class_dist(a, 2 - y, x), l.class_dist(a, y, x));
                    let (d, md) = (l.box_delta(a, y, x), ml.box_delta(a, 2 - y, x));
                    assert_eq!(md, BoxDelta::new(d.px, -d.py, d.pw, d.ph));
                }
            }
        }
    }

    /// `<apply(u), v> == <u, apply(v)>`, which is what lets gradients travel
    /// back through the same map.
    #[test]
    fn correspondence_is_self_adjoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let (u, v) = (random_output(&mut rng), random_output(&mut rng));
        let dot = |a: &DetectorOutput, b: &DetectorOutput| {
            a.levels[0].probs.iter().zip(&b.levels[0].probs).map(|(x, y)| x * y).sum::<f64>()
                + a.levels[0].deltas.iter().zip(&b.levels[0].deltas).map(|(x, y)| x * y).sum::<f64>()
        };
        for (hflip, vflip) in [(false, false), (true, false), (false, true), (true, true)] {
            let c = Correspondence { hflip, vflip };
            assert!((dot(&c.apply(&u), &v) - dot(&u, &c.apply(&v))).abs() < 1e-12);
            assert_eq!(c.apply(&c.apply(&u)), u);
        }
    }

    #[test]
    fn rotate_zero_is_identity() {
        let boxes = [bx(100.0, 100.0, 40.0, 20.0), bx(10.0, 30.0, 6.0, 8.0)];
        let r = rotate_boxes(&boxes, 0.0, 448, 448);
        assert!(r.dropped.is_empty());
        for ((i, b), orig) in r.kept.iter().zip(&boxes) {
            assert_eq!(boxes[*i], *orig);
            assert!((b.x - orig.x).abs() < 1e-9 && (b.w - orig.w).abs() < 1e-9);
        }
    }

    #[test]
    fn rotate_centered_square_by_right_angle() {
        let sq = bx(224.0, 224.0, 50.0, 50.0);
        let r = rotate_boxes(&[sq], 90.0, 448, 448);
        let b = r.kept[0].1;
        for (p, q) in [(b.x, sq.x), (b.y, sq.y), (b.w, sq.w), (b.h, sq.h)] {
            assert!((p - q).abs() < 1e-9);
        }
    }

    #[test]
    fn rotate_matches_corner_oracle() {
        // Hand-built oracle: rotate the four corners about (224, 224) by 10
        // degrees and take the extremes.
        let (s, c) = 10f64.to_radians().sin_cos();
        let corners = [(80.0, 90.0), (120.0, 90.0), (120.0, 110.0), (80.0, 110.0)];
        let rot: Vec<(f64, f64)> = corners
            .iter()
            .map(|&(x, y)| {
                let (dx, dy) = (x - 224.0, y - 224.0);
                (224.0 + c * dx - s * dy, 224.0 + s * dx + c * dy)
            })
            .collect();
        let x1 = rot.iter().map(|p| p.0).fold(f64::INFINITY, f64::min);
        let x2 = rot.iter().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max);
        let y1 = rot.iter().map(|p| p.1).fold(f64::INFINITY, f64::min);
        let y2 = rot.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max);
        let r = rotate_boxes(&[bx(100.0, 100.0, 40.0, 20.0)], 10.0, 448, 448);
        let got = r.kept[0].1.corners();
        for (g, e) in got.iter().zip([x1, y1, x2, y2]) {
            assert!((g - e).abs() < 1e-9);
        }
    }

    #[test]
    fn rotate_reports_boxes_leaving_the_frame() {
        // A box hugging a corner leaves the image under a 45 degree turn.
        let r = rotate_boxes(&[bx(1.0, 1.0, 2.0, 2.0), bx(16.0, 16.0, 4.0, 4.0)], 45.0, 32, 32);
        assert_eq!(r.dropped, vec![0]);
        assert_eq!(r.kept.len(), 1);
    }
}
