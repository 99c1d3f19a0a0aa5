//! Seeded synthetic detection images: hard-edged elliptical blobs on a noisy
//! background, one ground-truth box per blob.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{BBox, GtBox};
use crate::image::Image;
use crate::rng::{stream_rng, Stream};

use super::{Dataset, Sample};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub image_size: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    pub num_classes: usize,
    /// Range of the ellipse semi-axes, pixels.
    pub radius_min: f64,
    pub radius_max: f64,
    /// Minor-to-major semi-axis ratio lower bound (1 = circles only).
    pub min_axis_ratio: f64,
    /// Mean blob intensity of the dimmest and brightest class, in `[0, 255]`.
    /// Classes in between are spaced evenly.
    pub intensity_lo: f64,
    pub intensity_hi: f64,
    /// Per-blob intensity jitter (standard deviation).
    pub intensity_jitter: f64,
    pub background: f64,
    /// Per-pixel Gaussian noise (standard deviation).
    pub noise: f64,
    /// Minimum gap between blob boxes, pixels.
    pub gap: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            image_size: 64,
            min_objects: 3,
            max_objects: 8,
            num_classes: 2,
            radius_min: 3.0,
            radius_max: 7.0,
            min_axis_ratio: 0.6,
            intensity_lo: 140.0,
            intensity_hi: 200.0,
            intensity_jitter: 8.0,
            background: 40.0,
            noise: 35.0,
            gap: 1.0,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.image_size < 8 || self.num_classes == 0 || self.min_objects > self.max_objects {
            return Err(Error::config(format!("invalid synthetic spec: {self:?}")));
        }
        if !(self.radius_min >= 1.0 && self.radius_max >= self.radius_min)
            || 2.0 * self.radius_max + 2.0 > self.image_size as f64
        {
            return Err(Error::config("blob radii must satisfy 1 <= min <= max and fit the image"));
        }
        if !(self.min_axis_ratio > 0.0 && self.min_axis_ratio <= 1.0) || !(self.noise >= 0.0) {
            return Err(Error::config("axis ratio must lie in (0, 1] and noise must be >= 0"));
        }
        Ok(())
    }

    pub fn class_intensity(&self, class: usize) -> f64 {
        if self.num_classes == 1 {
            return self.intensity_hi;
        }
        let t = (class - 1) as f64 / (self.num_classes - 1) as f64;
        self.intensity_lo + t * (self.intensity_hi - self.intensity_lo)
    }
}

/// An axis-rotated ellipse; `theta` in radians.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ellipse {
    pub cx: f64,
    pub cy: f64,
    pub a: f64,
    pub b: f64,
    pub theta: f64,
}

impl Ellipse {
    pub fn contains(&self, x: f64, y: f64) -> bool {
        let (s, c) = self.theta.sin_cos();
        let (dx, dy) = (x - self.cx, y - self.cy);
        let u = c * dx + s * dy;
        let v = -s * dx + c * dy;
        (u / self.a).powi(2) + (v / self.b).powi(2) <= 1.0
    }

    /// Exact bounding box of the continuous ellipse.
    pub fn bbox(&self) -> BBox {
        let (s, c) = self.theta.sin_cos();
        let hw = ((self.a * c).powi(2) + (self.b * s).powi(2)).sqrt();
        let hh = ((self.a * s).powi(2) + (self.b * c).powi(2)).sqrt();
        BBox {
            x: self.cx,
            y: self.cy,
            w: 2.0 * hw,
            h: 2.0 * hh,
        }
    }
}

fn overlaps(a: &BBox, b: &BBox, gap: f64) -> bool {
    let [ax1, ay1, ax2, ay2] = a.corners();
    let [bx1, by1, bx2, by2] = b.corners();
    ax1 < bx2 + gap && bx1 < ax2 + gap && ay1 < by2 + gap && by1 < ay2 + gap
}

/// Blob layout of image `index`: ellipses with their classes.
pub fn layout(spec: &SyntheticSpec, index: u64) -> Result<Vec<(Ellipse, usize)>> {
    let size = spec.image_size as f64;
    for attempt in 0..100u64 {
        let mut rng = stream_rng(spec.seed, Stream::Data, &[index, 0, attempt]);
        let count = rng.random_range(spec.min_objects..=spec.max_objects);
        let mut blobs: Vec<(Ellipse, usize)> = Vec::with_capacity(count);
        let mut tries = 0;
        while blobs.len() < count && tries < 500 {
            tries += 1;
            let a = rng.random_range(spec.radius_min..=spec.radius_max);
            let b = a * rng.random_range(spec.min_axis_ratio..=1.0);
            let theta = rng.random_range(0.0..std::f64::consts::PI);
            let class = rng.random_range(1..=spec.num_classes);
            let mut e = Ellipse { cx: 0.0, cy: 0.0, a, b, theta };
            let bb = e.bbox();
            // Keep the whole blob (plus one pixel) inside the frame.
            let (mx, my) = (bb.w / 2.0 + 1.0, bb.h / 2.0 + 1.0);
            e.cx = rng.random_range(mx..size - mx);
            e.cy = rng.random_range(my..size - my);
            let bb = e.bbox();
            if blobs.iter().all(|(o, _)| !overlaps(&o.bbox(), &bb, spec.gap)) {
                blobs.push((e, class));
            }
        }
        if blobs.len() == count {
            return Ok(blobs);
        }
    }
    Err(Error::Data(format!("could not place blobs for synthetic image {index}")))
}

/// Renders image `index` as 8-bit intensities (stored as `f64`).
pub fn render(spec: &SyntheticSpec, index: u64) -> Result<Sample> {
    spec.validate()?;
    let blobs = layout(spec, index)?;
    let n = spec.image_size;
    let mut rng = stream_rng(spec.seed, Stream::Data, &[index, 1]);
    let noise = Normal::new(0.0, spec.noise.max(0.0)).map_err(|e| Error::config(e.to_string()))?;
    let levels: Vec<f64> = blobs
        .iter()
        .map(|(_, c)| spec.class_intensity(*c) + rng.random_range(-1.0..=1.0) * spec.intensity_jitter)
        .collect();
    let mut data = vec![0.0; n * n];
    for y in 0..n {
        for x in 0..n {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let base = blobs
                .iter()
                .zip(&levels)
                .find(|((e, _), _)| e.contains(px, py))
                .map_or(spec.background, |(_, &v)| v);
            let v = if spec.noise > 0.0 { base + noise.sample(&mut rng) } else { base };
            data[y * n + x] = v.round().clamp(0.0, 255.0);
        }
    }
    let boxes = blobs
        .iter()
        .map(|(e, c)| GtBox {
            bbox: e.bbox(),
            class: *c,
        })
        .collect();
    Ok(Sample {
        image: Image::new(1, n, n, data)?,
        boxes,
    })
}

pub fn generate(spec: &SyntheticSpec, count: usize) -> Result<Dataset> {
    if count == 0 {
        return Err(Error::config("count must be at least 1"));
    }
    let samples = (0..count as u64).map(|i| render(spec, i)).collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        samples,
        class_names: (1..=spec.num_classes).map(|c| c.to_string()).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rendering_is_deterministic_per_index() {
        let spec = SyntheticSpec {
            seed: 5,
            ..Default::default()
        };
        assert_eq!(render(&spec, 3).unwrap(), render(&spec, 3).unwrap());
        assert_ne!(render(&spec, 3).unwrap(), render(&spec, 4).unwrap());
    }

    #[test]
    fn single_clean_blob_matches_analytic_box() {
        let spec = SyntheticSpec {
            min_objects: 1,
            max_objects: 1,
            noise: 0.0,
            intensity_jitter: 0.0,
            ..Default::default()
        };
        for index in 0..20 {
            let s = render(&spec, index).unwrap();
            let n = spec.image_size;
            let (mut x1, mut y1, mut x2, mut y2) = (n, n, 0, 0);
            for y in 0..n {
                for x in 0..n {
                    if s.image.data[y * n + x] != spec.background {
                        x1 = x1.min(x);
                        y1 = y1.min(y);
                        x2 = x2.max(x + 1);
                        y2 = y2.max(y + 1);
                    }
                }
            }
            let [bx1, by1, bx2, by2] = s.boxes[0].bbox.corners();
            for (p, q) in [(x1 as f64, bx1), (y1 as f64, by1), (x2 as f64, bx2), (y2 as f64, by2)] {
                assert!((p - q).abs() <= 1.0, "pixel extent {p} vs analytic {q}");
            }
        }
    }

    #[test]
    fn object_counts_stay_in_range_and_boxes_in_frame() {
        let spec = SyntheticSpec::default();
        let ds = generate(&spec, 100).unwrap();
        let mut hist = vec![0usize; spec.max_objects + 1];
        for s in &ds.samples {
            hist[s.boxes.len()] += 1;
            for g in &s.boxes {
                let [x1, y1, x2, y2] = g.bbox.corners();
                assert!(x1 >= 0.0 && y1 >= 0.0 && x2 <= 64.0 && y2 <= 64.0);
                assert!((1..=2).contains(&g.class));
            }
            assert!(s.image.data.iter().all(|v| v.fract() == 0.0 && (0.0..=255.0).contains(v)));
        }
        assert!(hist[..spec.min_objects].iter().all(|&c| c == 0));
        // Uniform over 6 counts: each should be hit at least a few times.
        assert!(hist[spec.min_objects..].iter().all(|&c| c >= 5), "{hist:?}");
    }

    #[test]
    fn ellipse_bbox_touches_the_curve() {
        let e = Ellipse { cx: 10.0, cy: 12.0, a: 5.0, b: 2.0, theta: 0.7 };
        let b = e.bbox();
        let [x1, _, x2, _] = b.corners();
        let (s, c) = e.theta.sin_cos();
        let xs: Vec<f64> = (0..100_000)
            .map(|i| {
                let t = i as f64 / 100_000.0 * std::f64::consts::TAU;
                e.cx + e.a * t.cos() * c - e.b * t.sin() * s
            })
            .collect();
        let lo = xs.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        assert!((lo - x1).abs() < 1e-6 && (hi - x2).abs() < 1e-6);
    }
}
