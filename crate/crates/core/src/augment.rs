//! Paired student/teacher views: shared rotation, teacher-side flip and
//! independent cutout.
//!
//! ```text
//! student = cutout(rotate(X, theta))
//! teacher = cutout(flip(rotate(X, theta)))
//! ```
//!
//! Flipping after rotating keeps the map between the two views a pure
//! mirror, so the prediction grids correspond cell by cell.

use rand::{Rng, RngCore, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{rotate_boxes, BBox, Correspondence, GtBox};
use crate::image::Image;
use crate::rng::StreamRng;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    /// Rotation angle is drawn uniformly from `[-max_rotation, max_rotation]`
    /// degrees.
    pub max_rotation: f64,
    pub cutout_n: usize,
    /// Cutout side at `reference_size`; scaled with the image width.
    pub cutout_s: f64,
    pub reference_size: f64,
    /// Mirror the teacher view horizontally. Set from the run's feature
    /// flags rather than read from config files.
    #[serde(skip)]
    pub flip: bool,
    /// Also mirror the teacher view vertically.
    pub vflip: bool,
    /// Randomly mirror the source image before building the pair.
    pub random_flip: bool,
    /// Intensity used for cutout and for pixels rotated in from outside.
    /// After standardization the dataset mean is 0.
    pub fill: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            max_rotation: 10.0,
            cutout_n: 5,
            cutout_s: 70.0,
            reference_size: 448.0,
            flip: true,
            vflip: false,
            random_flip: true,
            fill: 0.0,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=45.0).contains(&self.max_rotation) {
            return Err(Error::config("max_rotation must lie in [0, 45] degrees"));
        }
        if !(self.cutout_s >= 0.0) || !(self.reference_size > 0.0) || !self.fill.is_finite() {
            return Err(Error::config("cutout size must be >= 0 and reference size > 0"));
        }
        Ok(())
    }

    /// Cutout side in pixels for an image `width` wide.
    pub fn cutout_side(&self, width: usize) -> usize {
        (self.cutout_s * width as f64 / self.reference_size).round() as usize
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ViewPair {
    pub student: Image,
    pub teacher: Image,
    /// Ground truth in student-view coordinates, when the source is labeled.
    pub boxes: Option<Vec<GtBox>>,
    pub correspondence: Correspondence,
    pub angle: f64,
}

/// Bilinear rotation by `angle_deg` about the image center. Pixel `(i, j)`
/// has its center at `(j + 0.5, i + 0.5)`; samples outside the image read
/// `fill`.
pub fn rotate_image(image: &Image, angle_deg: f64, fill: f64) -> Image {
    if angle_deg == 0.0 {
        return image.clone();
    }
    let (h, w) = (image.height, image.width);
    let (cx, cy) = (w as f64 / 2.0, h as f64 / 2.0);
    let (s, c) = angle_deg.to_radians().sin_cos();
    let mut out = image.clone();
    for y in 0..h {
        for x in 0..w {
            let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
            // Inverse rotation back into the source.
            let sx = cx + c * dx + s * dy - 0.5;
            let sy = cy - s * dx + c * dy - 0.5;
            let (x0, y0) = (sx.floor(), sy.floor());
            let (fx, fy) = (sx - x0, sy - y0);
            for ch in 0..image.channels {
                let at = |yy: f64, xx: f64| {
                    if yy < 0.0 || xx < 0.0 || yy >= h as f64 || xx >= w as f64 {
                        fill
                    } else {
                        image.get(ch, yy as usize, xx as usize)
                    }
                };
                let v = (1.0 - fy) * ((1.0 - fx) * at(y0, x0) + fx * at(y0, x0 + 1.0))
                    + fy * ((1.0 - fx) * at(y0 + 1.0, x0) + fx * at(y0 + 1.0, x0 + 1.0));
                let i = out.index(ch, y, x);
                out.data[i] = v;
            }
        }
    }
    out
}

/// Sets `n` squares of side `s`, centered uniformly at random and clipped to
/// the image, to `fill`.
pub fn cutout<R: Rng + ?Sized>(image: &Image, n: usize, s: usize, fill: f64, rng: &mut R) -> Result<Image> {
    let (h, w) = (image.height, image.width);
    if n > 0 && n * s * s >= h * w {
        return Err(Error::config(format!(
            "{n} cutout squares of side {s} cannot fit a {h}x{w} image"
        )));
    }
    let mut out = image.clone();
    if s == 0 {
        return Ok(out);
    }
    for _ in 0..n {
        let cx = rng.random_range(0..w) as isize;
        let cy = rng.random_range(0..h) as isize;
        let half = (s / 2) as isize;
        let (x0, y0) = ((cx - half).max(0) as usize, (cy - half).max(0) as usize);
        let x1 = ((cx - half + s as isize).max(0) as usize).min(w);
        let y1 = ((cy - half + s as isize).max(0) as usize).min(h);
        for ch in 0..image.channels {
            for y in y0..y1 {
                for x in x0..x1 {
                    let i = out.index(ch, y, x);
                    out.data[i] = fill;
                }
            }
        }
    }
    Ok(out)
}

/// Mirrors an image and its boxes with probability 1/2.
pub fn random_hflip<R: Rng + ?Sized>(image: &Image, boxes: Option<&[GtBox]>, rng: &mut R) -> (Image, Option<Vec<GtBox>>) {
    if rng.random_bool(0.5) {
        let w = image.width as f64;
        let flipped = boxes.map(|b| {
            b.iter()
                .map(|g| GtBox {
                    bbox: g.bbox.hflip(w),
                    class: g.class,
                })
                .collect()
        });
        (image.hflip(), flipped)
    } else {
        (image.clone(), boxes.map(<[GtBox]>::to_vec))
    }
}

/// Builds the student/teacher pair for one source image.
///
/// One angle is drawn for both views. If the source has boxes and all of
/// them rotate out of frame, the pair is rebuilt with angle 0. Each view's
/// cutout uses its own sub-stream split off `rng`.
pub fn build_views(
    image: &Image,
    boxes: Option<&[GtBox]>,
    config: &AugmentConfig,
    rng: &mut StreamRng,
) -> Result<ViewPair> {
    config.validate()?;
    let mut angle = if config.max_rotation > 0.0 {
        rng.random_range(-config.max_rotation..=config.max_rotation)
    } else {
        0.0
    };
    let mut student_rng = StreamRng::seed_from_u64(rng.next_u64());
    let mut teacher_rng = StreamRng::seed_from_u64(rng.next_u64());

    let mut rotated_boxes = None;
    if let Some(b) = boxes {
        let bb: Vec<BBox> = b.iter().map(|g| g.bbox).collect();
        let mut r = rotate_boxes(&bb, angle, image.height, image.width);
        if !b.is_empty() && r.kept.is_empty() {
            angle = 0.0;
            r = rotate_boxes(&bb, 0.0, image.height, image.width);
        }
        rotated_boxes = Some(
            r.kept
                .into_iter()
                .map(|(i, bbox)| GtBox { bbox, class: b[i].class })
                .collect(),
        );
    }

    let rotated = rotate_image(image, angle, config.fill);
    let correspondence = Correspondence {
        hflip: config.flip,
        vflip: config.vflip,
    };
    let s = config.cutout_side(image.width);
    let student = cutout(&rotated, config.cutout_n, s, config.fill, &mut student_rng)?;
    let teacher = cutout(&correspondence.apply_image(&rotated), config.cutout_n, s, config.fill, &mut teacher_rng)?;
    Ok(ViewPair {
        student,
        teacher,
        boxes: rotated_boxes,
        correspondence,
        angle,
    })
}
