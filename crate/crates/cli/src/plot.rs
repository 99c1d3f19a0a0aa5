use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Result};
use plotters::prelude::*;
use ssmd_core::data::{read_png, write_png_bytes};
use ssmd_core::detector::Detector;
use ssmd_core::evaluation::load_detections;
use ssmd_core::geometry::BBox;
use ssmd_core::image::Image;
use ssmd_core::trainer::{read_rows, StepMetrics, TrainState, ValidationRow, METRICS_FILE, VALIDATION_FILE};

use crate::commands::checkpoint_path;
use crate::PlotArgs;

type Series = (String, Vec<(f64, f64)>);

const PALETTE: [(u8, u8, u8); 6] = [(230, 50, 50), (40, 200, 60), (60, 110, 255), (250, 190, 0), (220, 60, 220), (0, 200, 210)];

pub fn run(a: &PlotArgs) -> Result<()> {
    let mut written = Vec::new();
    let mut curve_dir = None;
    if let Some(run) = &a.run {
        let dir = a.out.clone().unwrap_or_else(|| run.join("plots"));
        written.extend(curves(run, &dir)?);
        curve_dir = Some(dir);
    }
    if let Some(image) = &a.image {
        let out = match (&curve_dir, &a.out) {
            (Some(d), _) => d.join("overlay.png"),
            (None, Some(p)) => p.clone(),
            (None, None) => PathBuf::from("overlay.png"),
        };
        let n = overlay(image, a, &out)?;
        println!("drew {n} boxes");
        written.push(out);
    }
    for p in written {
        println!("{}", p.display());
    }
    Ok(())
}

/// One SVG per curve found in the run directory.
fn curves(run: &Path, dir: &Path) -> Result<Vec<PathBuf>> {
    let metrics: Vec<StepMetrics> = read_rows(&run.join(METRICS_FILE))?;
    if metrics.is_empty() {
        bail!("{} has no logged steps", run.join(METRICS_FILE).display());
    }
    std::fs::create_dir_all(dir)?;
    let mut out = Vec::new();
    let per_step: [(&str, &str, fn(&StepMetrics) -> f64); 5] = [
        ("loss_sup", "supervised loss", |m| m.loss_sup),
        ("loss_cont", "consistency loss", |m| m.loss_cont),
        ("lambda", "consistency weight", |m| m.lambda),
        ("lr", "learning rate", |m| m.lr),
        ("grad_norm", "gradient norm", |m| m.grad_norm),
    ];
    for (name, title, f) in per_step {
        let pts = metrics.iter().map(|m| (m.iteration as f64, f(m))).collect();
        let p = dir.join(format!("{name}.svg"));
        line_chart(&p, title, "iteration", name, &[(name.into(), pts)], None)?;
        out.push(p);
    }
    let val_path = run.join(VALIDATION_FILE);
    if val_path.exists() {
        let rows: Vec<ValidationRow> = read_rows(&val_path)?;
        if !rows.is_empty() {
            let pts = rows.iter().map(|r| (r.iteration as f64, r.map)).collect();
            let p = dir.join("validation_map.svg");
            line_chart(&p, "validation mAP", "iteration", "mAP", &[("mAP".into(), pts)], None)?;
            out.push(p);
        }
    }
    let pr_path = run.join("pr_curve.csv");
    if pr_path.exists() {
        let rows: Vec<(usize, f64, f64)> = read_rows(&pr_path)?;
        let mut by_class: BTreeMap<usize, Vec<(f64, f64)>> = BTreeMap::new();
        for (c, r, p) in rows {
            by_class.entry(c).or_default().push((r, p));
        }
        let series: Vec<Series> = by_class.into_iter().map(|(c, pts)| (format!("class {c}"), pts)).collect();
        let p = dir.join("pr_curve.svg");
        line_chart(&p, "precision-recall", "recall", "precision", &series, Some(((0.0, 1.0), (0.0, 1.0))))?;
        out.push(p);
    }
    let froc_path = run.join("froc_curve.csv");
    if froc_path.exists() {
        let pts: Vec<(f64, f64)> = read_rows(&froc_path)?;
        let xmax = pts.iter().map(|p| p.0).fold(1.0, f64::max);
        let p = dir.join("froc_curve.svg");
        line_chart(&p, "FROC", "false positives per image", "sensitivity", &[("FROC".into(), pts)], Some(((0.0, xmax), (0.0, 1.0))))?;
        out.push(p);
    }
    Ok(out)
}

fn padded(lo: f64, hi: f64) -> (f64, f64) {
    if !(lo.is_finite() && hi.is_finite()) {
        return (0.0, 1.0);
    }
    if hi - lo < 1e-12 {
        let d = lo.abs().max(1.0) * 0.05;
        return (lo - d, hi + d);
    }
    let d = (hi - lo) * 0.05;
    (lo - d, hi + d)
}

fn line_chart(path: &Path, title: &str, x_desc: &str, y_desc: &str, series: &[Series], range: Option<((f64, f64), (f64, f64))>) -> Result<()> {
    let finite: Vec<(f64, f64)> = series
        .iter()
        .flat_map(|s| s.1.iter().copied())
        .filter(|(x, y)| x.is_finite() && y.is_finite())
        .collect();
    let ((x0, x1), (y0, y1)) = range.unwrap_or_else(|| {
        let ext = |f: fn(&(f64, f64)) -> f64| {
            finite.iter().map(f).fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)))
        };
        let (xl, xh) = ext(|p| p.0);
        let (yl, yh) = ext(|p| p.1);
        (padded(xl, xh), padded(yl, yh))
    });
    let root = SVGBackend::new(path, (720, 440)).into_drawing_area();
    let draw = || -> std::result::Result<(), Box<dyn std::error::Error>> {
        root.fill(&WHITE)?;
        let mut chart = ChartBuilder::on(&root)
            .caption(title, ("sans-serif", 20))
            .margin(12)
            .x_label_area_size(40)
            .y_label_area_size(60)
            .build_cartesian_2d(x0..x1, y0..y1)?;
        chart.configure_mesh().x_desc(x_desc).y_desc(y_desc).draw()?;
        for (i, (name, pts)) in series.iter().enumerate() {
            let (r, g, b) = PALETTE[i % PALETTE.len()];
            let color = RGBColor(r, g, b);
            chart
                .draw_series(LineSeries::new(pts.iter().copied().filter(|(x, y)| x.is_finite() && y.is_finite()), color.stroke_width(2)))?
                .label(name.as_str())
                .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 18, y)], color.stroke_width(2)));
        }
        if series.len() > 1 {
            chart.configure_series_labels().background_style(WHITE).border_style(BLACK).draw()?;
        }
        root.present()?;
        Ok(())
    };
    draw().map_err(|e| anyhow::anyhow!("drawing {}: {e}", path.display()))
}

/// Draws detection outlines on a grayscale image and writes an RGB PNG.
/// Returns the number of boxes drawn.
fn overlay(image_path: &Path, a: &PlotArgs, out: &Path) -> Result<usize> {
    let image = read_png(image_path)?;
    let boxes: Vec<(BBox, usize)> = if let Some(det_path) = &a.detections {
        let name = image_path.file_name();
        load_detections(det_path)?
            .into_iter()
            .filter(|r| Path::new(&r.image) == image_path || Path::new(&r.image).file_name() == name)
            .filter(|r| r.score >= a.min_score)
            .map(|r| {
                let [x1, y1, x2, y2] = r.bbox;
                let class = match &r.class {
                    ssmd_core::data::ClassLabel::Id(i) => *i as usize,
                    ssmd_core::data::ClassLabel::Name(_) => 0,
                };
                Ok((BBox::from_corners(x1, y1, x2, y2)?, class))
            })
            .collect::<ssmd_core::Result<_>>()?
    } else if let Some(ckpt) = &a.checkpoint {
        let state = TrainState::load(&checkpoint_path(ckpt))?;
        let detector = Detector::new(state.config.resolve().detector)?;
        let input = state.preprocess.apply(&image)?;
        detector
            .detect(state.inference_weights(), &input, &state.config.detect)?
            .into_iter()
            .filter(|d| d.score >= a.min_score)
            .map(|d| (d.bbox, d.class))
            .collect()
    } else {
        bail!(crate::UsageError("--image needs --detections or --checkpoint".into()));
    };
    if boxes.is_empty() {
        log::warn!("no detections to draw on {}", image_path.display());
    }
    let rgb = draw_boxes(&image, &boxes);
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    write_png_bytes(out, image.width, image.height, png::ColorType::Rgb, &rgb)?;
    Ok(boxes.len())
}

fn draw_boxes(image: &Image, boxes: &[(BBox, usize)]) -> Vec<u8> {
    let (w, h) = (image.width, image.height);
    let mut rgb: Vec<u8> = image.data[..w * h]
        .iter()
        .flat_map(|v| [v.round().clamp(0.0, 255.0) as u8; 3])
        .collect();
    for (b, class) in boxes {
        let (r, g, bl) = PALETTE[class % PALETTE.len()];
        let [x1, y1, x2, y2] = b.corners();
        let clamp = |v: f64, n: usize| (v.round().max(0.0) as usize).min(n - 1);
        let (x1, x2, y1, y2) = (clamp(x1, w), clamp(x2, w), clamp(y1, h), clamp(y2, h));
        let mut put = |x: usize, y: usize| {
            let i = 3 * (y * w + x);
            rgb[i..i + 3].copy_from_slice(&[r, g, bl]);
        };
        for x in x1..=x2 {
            put(x, y1);
            put(x, y2);
        }
        for y in y1..=y2 {
            put(x1, y);
            put(x2, y);
        }
    }
    rgb
}
