//! Datasets: synthetic generation, splits, intensity preprocessing and the
//! on-disk annotation format.
//!
//! Annotation files are JSON Lines, one image per line:
//!
//! ```text
//! {"path":"images/00000.png","width":64,"height":64,"boxes":[[10,20,30,60,1]]}
//! ```
//!
//! Boxes are `[x1, y1, x2, y2, class]` in pixels; `class` is an integer or a
//! string. Classes are mapped to contiguous ids `1..=C` (0 is background).

pub mod synthetic;

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{BBox, GtBox};
use crate::image::Image;
use crate::rng::{stream_rng, Stream};

pub use synthetic::{generate, render, SyntheticSpec};

/// An image with its ground truth (empty when unlabeled).
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: Image,
    pub boxes: Vec<GtBox>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    /// `class_names[i]` names class id `i + 1`.
    pub class_names: Vec<String>,
}

impl Dataset {
    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitSpec {
    pub labeled_ratio: f64,
    pub train: f64,
    pub val: f64,
    pub test: f64,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            labeled_ratio: 0.1,
            train: 0.8,
            val: 0.1,
            test: 0.1,
            seed: 0,
        }
    }
}

/// Index sets into a dataset; each is sorted.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Split {
    pub labeled: Vec<usize>,
    pub unlabeled: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl Split {
    pub fn train_len(&self) -> usize {
        self.labeled.len() + self.unlabeled.len()
    }
}

/// Shuffles `0..n` with the split stream, cuts train/val/test by rounding
/// each fraction, and labels the first `round(r * |train|)` train images.
pub fn split(n: usize, spec: &SplitSpec) -> Result<Split> {
    let fr = [spec.train, spec.val, spec.test];
    if fr.iter().any(|f| !(*f >= 0.0)) || fr.iter().sum::<f64>() > 1.0 + 1e-9 {
        return Err(Error::config(format!(
            "split fractions must be non-negative and sum to at most 1, got {fr:?}"
        )));
    }
    if !(spec.labeled_ratio > 0.0 && spec.labeled_ratio <= 1.0) {
        return Err(Error::config(format!(
            "labeled ratio must lie in (0, 1], got {}",
            spec.labeled_ratio
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut stream_rng(spec.seed, Stream::Split, &[n as u64]));
    let n_train = ((spec.train * n as f64).round() as usize).min(n);
    let n_val = ((spec.val * n as f64).round() as usize).min(n - n_train);
    let n_test = ((spec.test * n as f64).round() as usize).min(n - n_train - n_val);
    let n_lab = (spec.labeled_ratio * n_train as f64).round() as usize;
    let sorted = |s: &[usize]| {
        let mut v = s.to_vec();
        v.sort_unstable();
        v
    };
    let train = &order[..n_train];
    Ok(Split {
        labeled: sorted(&train[..n_lab]),
        unlabeled: sorted(&train[n_lab..]),
        val: sorted(&order[n_train..n_train + n_val]),
        test: sorted(&order[n_train + n_val..n_train + n_val + n_test]),
    })
}

/// Clamps to `[lo, hi]` and maps affinely onto `[-1, 1]`.
pub fn window_and_normalize(image: &Image, lo: f64, hi: f64) -> Result<Image> {
    if !(lo < hi) {
        return Err(Error::config(format!("window needs lo < hi, got [{lo}, {hi}]")));
    }
    let mut out = image.clone();
    out.data
        .iter_mut()
        .for_each(|v| *v = 2.0 * (v.clamp(lo, hi) - lo) / (hi - lo) - 1.0);
    Ok(out)
}

/// Intensity pipeline: window to `[-1, 1]`, then standardize with the
/// training-set mean and standard deviation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Preprocess {
    pub lo: f64,
    pub hi: f64,
    pub mean: f64,
    pub std: f64,
}

impl Preprocess {
    /// Fits mean/std over every pixel of `images` after windowing.
    pub fn fit<'a>(images: impl IntoIterator<Item = &'a Image>, lo: f64, hi: f64) -> Result<Self> {
        let (mut sum, mut sq, mut n) = (0.0, 0.0, 0usize);
        for img in images {
            for v in window_and_normalize(img, lo, hi)?.data {
                sum += v;
                sq += v * v;
                n += 1;
            }
        }
        if n == 0 {
            return Err(Error::Data("cannot fit normalization on an empty training set".into()));
        }
        let mean = sum / n as f64;
        let var = (sq / n as f64 - mean * mean).max(0.0);
        let std = if var > 0.0 { var.sqrt() } else { 1.0 };
        Ok(Self { lo, hi, mean, std })
    }

    pub fn apply(&self, image: &Image) -> Result<Image> {
        let mut out = window_and_normalize(image, self.lo, self.hi)?;
        out.data.iter_mut().for_each(|v| *v = (*v - self.mean) / self.std);
        Ok(out)
    }
}

/// Training-ready partitions of a dataset, still in raw intensities.
#[derive(Clone, Debug, PartialEq)]
pub struct SplitData {
    pub labeled: Vec<Sample>,
    pub unlabeled: Vec<Sample>,
    pub val: Vec<Sample>,
    pub test: Vec<Sample>,
    pub class_names: Vec<String>,
}

impl SplitData {
    /// Unlabeled samples lose their boxes.
    pub fn from_dataset(dataset: &Dataset, split: &Split) -> Self {
        let take = |idx: &[usize], keep_boxes: bool| {
            idx.iter()
                .map(|&i| Sample {
                    image: dataset.samples[i].image.clone(),
                    boxes: if keep_boxes { dataset.samples[i].boxes.clone() } else { Vec::new() },
                })
                .collect()
        };
        Self {
            labeled: take(&split.labeled, true),
            unlabeled: take(&split.unlabeled, false),
            val: take(&split.val, true),
            test: take(&split.test, true),
            class_names: dataset.class_names.clone(),
        }
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn train_images(&self) -> impl Iterator<Item = &Image> {
        self.labeled.iter().chain(&self.unlabeled).map(|s| &s.image)
    }
}

/// A class label as written in annotation files.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ClassLabel {
    Id(u64),
    Name(String),
}

impl ClassLabel {
    fn sort_key(&self) -> (u8, u64, &str) {
        match self {
            ClassLabel::Id(i) => (0, *i, ""),
            ClassLabel::Name(s) => (1, 0, s.as_str()),
        }
    }

    pub fn name(&self) -> String {
        match self {
            ClassLabel::Id(i) => i.to_string(),
            ClassLabel::Name(s) => s.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnotationRecord {
    pub path: String,
    pub width: usize,
    pub height: usize,
    pub boxes: Vec<(f64, f64, f64, f64, ClassLabel)>,
}

impl AnnotationRecord {
    fn check(&self) -> std::result::Result<(), String> {
        for (x1, y1, x2, y2, _) in &self.boxes {
            if ![x1, y1, x2, y2].iter().all(|v| v.is_finite()) || x2 <= x1 || y2 <= y1 {
                return Err(format!("degenerate box [{x1}, {y1}, {x2}, {y2}]"));
            }
        }
        Ok(())
    }

    /// Ground truth in center form, with classes looked up in `classes`.
    pub fn gt_boxes(&self, classes: &ClassMap) -> Result<Vec<GtBox>> {
        self.boxes
            .iter()
            .map(|(x1, y1, x2, y2, label)| {
                Ok(GtBox {
                    bbox: BBox::from_corners(*x1, *y1, *x2, *y2)?,
                    class: classes.id(label)?,
                })
            })
            .collect()
    }
}

/// Contiguous class ids for the labels found in a set of records: integer
/// labels first (ascending), then names (lexicographic).
#[derive(Clone, Debug, PartialEq)]
pub struct ClassMap {
    labels: Vec<ClassLabel>,
}

impl ClassMap {
    pub fn from_records(records: &[AnnotationRecord]) -> Self {
        let mut labels: Vec<ClassLabel> = records
            .iter()
            .flat_map(|r| r.boxes.iter().map(|b| b.4.clone()))
            .collect();
        labels.sort_by(|a, b| a.sort_key().cmp(&b.sort_key()));
        labels.dedup();
        Self { labels }
    }

    pub fn id(&self, label: &ClassLabel) -> Result<usize> {
        self.labels
            .iter()
            .position(|l| l == label)
            .map(|i| i + 1)
            .ok_or_else(|| Error::Data(format!("unknown class label {label:?}")))
    }

    pub fn names(&self) -> Vec<String> {
        self.labels.iter().map(ClassLabel::name).collect()
    }
}

/// Reads a JSON Lines annotation file. Blank lines are skipped; every
/// malformed line is reported by its 1-based number.
pub fn load_annotations(path: &Path) -> Result<Vec<AnnotationRecord>> {
    let file = fs::File::open(path)?;
    let mut records = Vec::new();
    let mut bad = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<AnnotationRecord>(&line) {
            Ok(r) => match r.check() {
                Ok(()) => records.push(r),
                Err(msg) => {
                    log::warn!("{}:{}: {msg}", path.display(), i + 1);
                    bad.push(i + 1);
                }
            },
            Err(e) => {
                log::warn!("{}:{}: {e}", path.display(), i + 1);
                bad.push(i + 1);
            }
        }
    }
    if !bad.is_empty() {
        return Err(Error::MalformedAnnotations {
            path: path.to_path_buf(),
            lines: bad,
        });
    }
    Ok(records)
}

pub fn save_annotations(path: &Path, records: &[AnnotationRecord]) -> Result<()> {
    let mut out = BufWriter::new(fs::File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

/// Loads images and boxes listed in an annotation file; image paths are
/// relative to the file's directory.
pub fn load_external(path: &Path) -> Result<Dataset> {
    let records = load_annotations(path)?;
    let classes = ClassMap::from_records(&records);
    load_records(path, &records, &classes)
}

fn load_records(path: &Path, records: &[AnnotationRecord], classes: &ClassMap) -> Result<Dataset> {
    let base = path.parent().unwrap_or(Path::new("."));
    let samples = records
        .iter()
        .map(|r| {
            let image = read_png(&base.join(&r.path))?;
            if image.width != r.width || image.height != r.height {
                return Err(Error::Data(format!(
                    "{}: annotated as {}x{}, image is {}x{}",
                    r.path, r.width, r.height, image.width, image.height
                )));
            }
            Ok(Sample {
                image,
                boxes: r.gt_boxes(classes)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        samples,
        class_names: classes.names(),
    })
}

/// Reads an 8- or 16-bit PNG as a one-channel image with intensities in
/// `[0, 255]`; color images are averaged over their color channels.
pub fn read_png(path: &Path) -> Result<Image> {
    let file = fs::File::open(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let mut decoder = png::Decoder::new(BufReader::new(file));
    decoder.set_transformations(png::Transformations::EXPAND);
    let mut reader = decoder
        .read_info()
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let mut buf = vec![0; reader.output_buffer_size().unwrap_or(0)];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let (w, h) = (info.width as usize, info.height as usize);
    let samples = info.color_type.samples();
    let color = match info.color_type {
        png::ColorType::Grayscale | png::ColorType::GrayscaleAlpha => 1,
        _ => 3,
    };
    let wide = info.bit_depth == png::BitDepth::Sixteen;
    let bytes = &buf[..info.buffer_size()];
    let value = |i: usize| {
        if wide {
            u16::from_be_bytes([bytes[2 * i], bytes[2 * i + 1]]) as f64 / 257.0
        } else {
            bytes[i] as f64
        }
    };
    let data = (0..w * h)
        .map(|p| (0..color).map(|c| value(p * samples + c)).sum::<f64>() / color as f64)
        .collect();
    Image::new(1, h, w, data)
}

/// Writes channel 0 as an 8-bit grayscale PNG (values rounded and clamped
/// to `[0, 255]`).
pub fn write_png(path: &Path, image: &Image) -> Result<()> {
    let bytes: Vec<u8> = image.data[..image.height * image.width]
        .iter()
        .map(|v| v.round().clamp(0.0, 255.0) as u8)
        .collect();
    write_png_bytes(path, image.width, image.height, png::ColorType::Grayscale, &bytes)
}

pub fn write_png_bytes(path: &Path, width: usize, height: usize, color: png::ColorType, bytes: &[u8]) -> Result<()> {
    let file = BufWriter::new(fs::File::create(path)?);
    let mut enc = png::Encoder::new(file, width as u32, height as u32);
    enc.set_color(color);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc
        .write_header()
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    writer
        .write_image_data(bytes)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    writer
        .finish()
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    Ok(())
}

/// Metadata written next to a generated dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetMeta {
    pub count: usize,
    pub synthetic: SyntheticSpec,
    pub split: SplitSpec,
    pub class_names: Vec<String>,
}

pub const SPLIT_FILES: [&str; 4] = ["labeled.jsonl", "unlabeled.jsonl", "val.jsonl", "test.jsonl"];

fn record_for(sample: &Sample, path: String, keep_boxes: bool) -> AnnotationRecord {
    AnnotationRecord {
        path,
        width: sample.image.width,
        height: sample.image.height,
        boxes: if keep_boxes {
            sample
                .boxes
                .iter()
                .map(|g| {
                    let [x1, y1, x2, y2] = g.bbox.corners();
                    (x1, y1, x2, y2, ClassLabel::Id(g.class as u64))
                })
                .collect()
        } else {
            Vec::new()
        },
    }
}

/// Writes `images/NNNNN.png`, one annotation file per partition and
/// `dataset.json`.
pub fn write_dataset_dir(dir: &Path, dataset: &Dataset, split: &Split, meta: &DatasetMeta) -> Result<()> {
    fs::create_dir_all(dir.join("images"))?;
    let name = |i: usize| format!("images/{i:05}.png");
    for (i, s) in dataset.samples.iter().enumerate() {
        write_png(&dir.join(name(i)), &s.image)?;
    }
    let parts: [(&[usize], bool); 4] = [(&split.labeled, true), (&split.unlabeled, false), (&split.val, true), (&split.test, true)];
    for (file, (idx, keep)) in SPLIT_FILES.iter().zip(parts) {
        let records: Vec<AnnotationRecord> = idx
            .iter()
            .map(|&i| record_for(&dataset.samples[i], name(i), keep))
            .collect();
        save_annotations(&dir.join(file), &records)?;
    }
    fs::write(dir.join("dataset.json"), serde_json::to_string_pretty(meta)? + "\n")?;
    Ok(())
}

/// Reads a directory written by [`write_dataset_dir`] (or laid out the same
/// way by hand).
pub fn read_dataset_dir(dir: &Path) -> Result<SplitData> {
    let paths: Vec<PathBuf> = SPLIT_FILES.iter().map(|f| dir.join(f)).collect();
    for p in &paths {
        if !p.exists() {
            return Err(Error::Data(format!("missing {}", p.display())));
        }
    }
    let records: Vec<Vec<AnnotationRecord>> = paths.iter().map(|p| load_annotations(p)).collect::<Result<_>>()?;
    let all: Vec<AnnotationRecord> = records.iter().flatten().cloned().collect();
    let classes = ClassMap::from_records(&all);
    let mut parts = paths
        .iter()
        .zip(&records)
        .map(|(p, r)| load_records(p, r, &classes).map(|d| d.samples));
    let mut next = || parts.next().expect("four partitions");
    let (labeled, unlabeled, val, test) = (next()?, next()?, next()?, next()?);
    let mut class_names = classes.names();
    if let Ok(text) = fs::read_to_string(dir.join("dataset.json")) {
        let meta: DatasetMeta = serde_json::from_str(&text)?;
        if meta.class_names.len() >= class_names.len() {
            class_names = meta.class_names;
        }
    }
    Ok(SplitData {
        labeled,
        unlabeled,
        val,
        test,
        class_names,
    })
}

/// Counts of images per class id, handy for reports.
pub fn class_histogram(samples: &[Sample]) -> BTreeMap<usize, usize> {
    let mut h = BTreeMap::new();
    for s in samples {
        for g in &s.boxes {
            *h.entry(g.class).or_insert(0) += 1;
        }
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_sizes_and_disjointness() {
        for seed in 0..100 {
            let spec = SplitSpec {
                labeled_ratio: 0.5,
                seed,
                ..Default::default()
            };
            let s = split(250, &spec).unwrap();
            assert_eq!((s.labeled.len(), s.unlabeled.len(), s.val.len(), s.test.len()), (100, 100, 25, 25));
            let mut all: Vec<usize> = [&s.labeled, &s.unlabeled, &s.val, &s.test].into_iter().flatten().copied().collect();
            all.sort_unstable();
            assert_eq!(all, (0..250).collect::<Vec<_>>());
            assert_eq!(s, split(250, &spec).unwrap());
        }
        let full = split(100, &SplitSpec { labeled_ratio: 1.0, ..Default::default() }).unwrap();
        assert!(full.unlabeled.is_empty());
        let tenth = split(100, &SplitSpec::default()).unwrap();
        assert_eq!((tenth.labeled.len(), tenth.train_len()), (8, 80));
    }

    #[test]
    fn split_rejects_bad_ratios() {
        assert!(split(10, &SplitSpec { train: 0.9, val: 0.2, ..Default::default() }).is_err());
        assert!(split(10, &SplitSpec { labeled_ratio: 0.0, ..Default::default() }).is_err());
        assert!(split(10, &SplitSpec { labeled_ratio: 1.5, ..Default::default() }).is_err());
    }

    #[test]
    fn window_examples() {
        let img = Image::new(1, 1, 4, vec![-1100.0, 0.0, 1100.0, 1200.0]).unwrap();
        let out = window_and_normalize(&img, -1100.0, 1100.0).unwrap();
        assert_eq!(out.data, vec![-1.0, 0.0, 1.0, 1.0]);
        assert!(window_and_normalize(&img, 1.0, 1.0).is_err());
    }

    #[test]
    fn standardization_centers_training_pixels() {
        let ds = generate(&SyntheticSpec::default(), 6).unwrap();
        let p = Preprocess::fit(ds.samples.iter().map(|s| &s.image), 0.0, 255.0).unwrap();
        let all: Vec<f64> = ds.samples.iter().flat_map(|s| p.apply(&s.image).unwrap().data).collect();
        let mean = all.iter().sum::<f64>() / all.len() as f64;
        let var = all.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / all.len() as f64;
        assert!(mean.abs() < 1e-10 && (var - 1.0).abs() < 1e-10);
    }

    #[test]
    fn corner_boxes_convert_to_center_form() {
        let r = AnnotationRecord {
            path: "a.png".into(),
            width: 64,
            height: 64,
            boxes: vec![(10.0, 20.0, 30.0, 60.0, ClassLabel::Name("lesion".into()))],
        };
        let classes = ClassMap::from_records(std::slice::from_ref(&r));
        let g = r.gt_boxes(&classes).unwrap()[0];
        assert_eq!((g.bbox.x, g.bbox.y, g.bbox.w, g.bbox.h, g.class), (20.0, 40.0, 20.0, 40.0, 1));
    }

    #[test]
    fn class_map_orders_ids_then_names() {
        let r = AnnotationRecord {
            path: "a.png".into(),
            width: 8,
            height: 8,
            boxes: vec![
                (0.0, 0.0, 1.0, 1.0, ClassLabel::Name("b".into())),
                (0.0, 0.0, 1.0, 1.0, ClassLabel::Id(7)),
                (0.0, 0.0, 1.0, 1.0, ClassLabel::Name("a".into())),
                (0.0, 0.0, 1.0, 1.0, ClassLabel::Id(3)),
            ],
        };
        let m = ClassMap::from_records(&[r]);
        assert_eq!(m.names(), vec!["3", "7", "a", "b"]);
        assert_eq!(m.id(&ClassLabel::Name("a".into())).unwrap(), 3);
    }

    #[test]
    fn annotation_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.jsonl");
        let r = AnnotationRecord {
            path: "x.png".into(),
            width: 64,
            height: 48,
            boxes: vec![(0.1 + 0.2, 1.0 / 3.0, 17.123456789012345, 40.0, ClassLabel::Id(2))],
        };
        save_annotations(&path, std::slice::from_ref(&r)).unwrap();
        assert_eq!(load_annotations(&path).unwrap(), vec![r]);
        save_annotations(&path, &[]).unwrap();
        assert!(load_annotations(&path).unwrap().is_empty());
    }

    #[test]
    fn malformed_lines_are_reported_by_number() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.jsonl");
        let good = r#"{"path":"a.png","width":4,"height":4,"boxes":[[0,0,2,2,1]]}"#;
        let text = format!("{good}\nnot json\n\n{good}\n{{\"path\":\"b.png\",\"width\":4,\"height\":4,\"boxes\":[[3,0,2,2,1]]}}\n{{\"path\":\"c\",\"width\":1,\"height\":1,\"boxes\":[],\"extra\":1}}\n");
        fs::write(&path, text).unwrap();
        match load_annotations(&path) {
            Err(Error::MalformedAnnotations { lines, .. }) => assert_eq!(lines, vec![2, 5, 6]),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn dataset_directory_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SyntheticSpec::default();
        let ds = generate(&spec, 10).unwrap();
        let sp = SplitSpec { labeled_ratio: 0.5, ..Default::default() };
        let s = split(10, &sp).unwrap();
        let meta = DatasetMeta {
            count: 10,
            synthetic: spec,
            split: sp,
            class_names: ds.class_names.clone(),
        };
        write_dataset_dir(dir.path(), &ds, &s, &meta).unwrap();
        let back = read_dataset_dir(dir.path()).unwrap();
        let expected = SplitData::from_dataset(&ds, &s);
        assert_eq!(back.labeled.len(), 4);
        assert_eq!(back.labeled[0].image, expected.labeled[0].image);
        for (a, b) in back.labeled.iter().zip(&expected.labeled) {
            for (ga, gb) in a.boxes.iter().zip(&b.boxes) {
                assert_eq!(ga.class, gb.class);
                for (p, q) in ga.bbox.corners().iter().zip(gb.bbox.corners()) {
                    assert!((p - q).abs() < 1e-12);
                }
            }
        }
        assert!(back.unlabeled.iter().all(|s| s.boxes.is_empty()));
        assert_eq!(back.class_names, vec!["1", "2"]);
    }
}
