use super::*;
use crate::geometry::mirror_predictions;
use crate::rng::{stream_rng, Stream};
use rand::SeedableRng;

fn tiny(scales: usize) -> DetectorConfig {
    DetectorConfig {
        in_channels: 1,
        num_classes: 2,
        scales,
        anchor_scales: vec![1.0],
        anchor_ratios: vec![0.5, 2.0],
        stem_channels: 3,
        stage_channels: [3, 4, 4, 5],
        blocks_per_stage: 1,
        fpn_channels: 4,
        head_convs: 1,
        ..Default::default()
    }
}

fn random_image(c: usize, h: usize, w: usize, seed: u64) -> Image {
    let mut rng = StreamRng::seed_from_u64(seed);
    Image::new(c, h, w, (0..c * h * w).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Replaces every kernel by its horizontally symmetric part, except the
/// `px` output channels of the box head which become antisymmetric with
/// zero bias.
fn symmetrize(det: &Detector, w: &mut ModelWeights) {
    let reg_out = det.layout.reg_out;
    for (slot, t) in w.tensors_mut().iter_mut().enumerate() {
        let shape = t.shape().to_vec();
        if shape.len() == 1 {
            if slot == reg_out.b {
                t.data_mut().iter_mut().step_by(4).for_each(|v| *v = 0.0);
            }
            continue;
        }
        let (co, ci, kh, kw) = (shape[0], shape[1], shape[2], shape[3]);
        let src = t.data().to_vec();
        let d = t.data_mut();
        for o in 0..co {
            let sign = if slot == reg_out.w && o % 4 == 0 { -1.0 } else { 1.0 };
            for i in 0..ci {
                for y in 0..kh {
                    for x in 0..kw {
                        let at = |x: usize| ((o * ci + i) * kh + y) * kw + x;
                        d[at(x)] = 0.5 * (src[at(x)] + sign * src[at(kw - 1 - x)]);
                    }
                }
            }
        }
    }
}

#[test]
fn emits_one_grid_per_scale_with_expected_shapes() {
    for (scales, side) in [(1, 32), (3, 32), (5, 64)] {
        let det = Detector::new(tiny(scales)).unwrap();
        let w = det.init_weights(&mut StreamRng::seed_from_u64(1));
        let out = det.forward(&w, &random_image(1, side, side, 2), Mode::Infer, None).unwrap();
        assert_eq!(out.levels.len(), scales);
        for (l, s) in out.levels.iter().zip(det.config().strides()) {
            assert_eq!((l.height, l.width, l.stride), (side / s, side / s, s));
            assert_eq!(l.probs.len(), 2 * 3 * l.cells());
            assert_eq!(l.deltas.len(), 2 * 4 * l.cells());
        }
        let grid = det.anchor_grid(side, side).unwrap();
        assert_eq!(grid.len(), out.num_positions());
    }
}

#[test]
fn class_distributions_sum_to_one() {
    let det = Detector::new(tiny(3)).unwrap();
    let w = det.init_weights(&mut StreamRng::seed_from_u64(3));
    let out = det.forward(&w, &random_image(1, 32, 32, 4), Mode::Infer, None).unwrap();
    for (li, a, y, x) in out.positions() {
        let p = out.levels[li].class_dist(a, y, x);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(p.iter().all(|v| *v > 0.0));
    }
}

#[test]
fn background_prior_sets_initial_foreground_probability() {
    let mut cfg = tiny(1);
    cfg.head_convs = 0;
    let det = Detector::new(cfg).unwrap();
    let mut w = det.init_weights(&mut StreamRng::seed_from_u64(5));
    let cls_out = det.layout.cls_out.w;
    w.tensors_mut()[cls_out].data_mut().iter_mut().for_each(|v| *v = 0.0);
    let out = det.forward(&w, &random_image(1, 16, 16, 6), Mode::Infer, None).unwrap();
    let p = out.levels[0].class_dist(0, 0, 0);
    assert!((p[1] + p[2] - 0.01).abs() < 1e-12);
}

#[test]
fn rejects_bad_inputs() {
    assert!(Detector::new(DetectorConfig { scales: 2, ..tiny(1) }).is_err());
    let det = Detector::new(tiny(3)).unwrap();
    let w = det.init_weights(&mut StreamRng::seed_from_u64(1));
    assert!(det.forward(&w, &random_image(1, 24, 32, 1), Mode::Infer, None).is_err());
    assert!(det.forward(&w, &random_image(2, 32, 32, 1), Mode::Infer, None).is_err());
    let other = Detector::new(tiny(5)).unwrap();
    let w5 = other.init_weights(&mut StreamRng::seed_from_u64(1));
    assert!(matches!(
        det.forward(&w5, &random_image(1, 32, 32, 1), Mode::Infer, None),
        Err(Error::Layout(_))
    ));
}

#[test]
fn gate_parameters_exist_only_when_enabled() {
    let off = Detector::new(tiny(3)).unwrap();
    let on = Detector::new(DetectorConfig { nrb_enabled: true, ..tiny(3) }).unwrap();
    assert!(off.param_specs().iter().all(|s| !s.name.contains("nrb")));
    assert_eq!(on.param_specs().iter().filter(|s| s.name.contains("nrb")).count(), 8);
}

#[test]
fn gates_are_inactive_at_inference_and_without_noise() {
    let det = Detector::new(DetectorConfig { nrb_enabled: true, ..tiny(3) }).unwrap();
    let w = det.init_weights(&mut StreamRng::seed_from_u64(7));
    let img = random_image(1, 32, 32, 8);
    let a = det.forward(&w, &img, Mode::Infer, Some(&mut StreamRng::seed_from_u64(1))).unwrap();
    let b = det.forward(&w, &img, Mode::Train, None).unwrap();
    let c = det.forward(&w, &img, Mode::Train, Some(&mut StreamRng::seed_from_u64(1))).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
}

#[test]
fn flipped_input_gives_mirrored_output_for_symmetric_kernels() {
    for scales in [1, 3, 5] {
        let det = Detector::new(tiny(scales)).unwrap();
        let mut w = det.init_weights(&mut stream_rng(9, Stream::Init, &[scales as u64]));
        symmetrize(&det, &mut w);
        let img = random_image(1, 32, 64, 10);
        let student = det.forward(&w, &img, Mode::Infer, None).unwrap();
        let teacher = det.forward(&w, &img.hflip(), Mode::Infer, None).unwrap();
        let mirrored = mirror_predictions(&student);
        for (t, m) in teacher.levels.iter().zip(&mirrored.levels) {
            for (a, b) in t.probs.iter().zip(&m.probs).chain(t.deltas.iter().zip(&m.deltas)) {
                assert!((a - b).abs() < 1e-12, "{a} vs {b}");
            }
        }
    }
}

#[test]
fn gradients_match_central_differences() {
    let cfg = DetectorConfig {
        nrb_enabled: true,
        ..tiny(3)
    };
    let det = Detector::new(cfg).unwrap();
    let mut w = det.init_weights(&mut StreamRng::seed_from_u64(11));
    // Zero biases put ReLU inputs exactly on the kink wherever a patch is
    // dead, so give every bias a small random value.
    let mut brng = StreamRng::seed_from_u64(21);
    for t in w.tensors_mut().iter_mut().filter(|t| t.shape().len() == 1) {
        t.data_mut().iter_mut().for_each(|v| *v += brng.random_range(-0.1..0.1));
    }
    // Larger output weights so the check is not dominated by rounding.
    for slot in [det.layout.cls_out.w, det.layout.reg_out.w] {
        w.tensors_mut()[slot].data_mut().iter_mut().for_each(|v| *v *= 30.0);
    }
    let img = random_image(1, 16, 16, 12);
    let probe = det.forward(&w, &img, Mode::Infer, None).unwrap();
    let mut cot = probe.zeros_like();
    let mut rng = StreamRng::seed_from_u64(13);
    for l in &mut cot.levels {
        l.probs.iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
        l.deltas.iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
    }
    let objective = |w: &ModelWeights, img: &Image| {
        let out = det
            .forward(w, img, Mode::Train, Some(&mut StreamRng::seed_from_u64(99)))
            .unwrap();
        out.levels
            .iter()
            .zip(&cot.levels)
            .map(|(o, c)| {
                o.probs.iter().zip(&c.probs).map(|(a, b)| a * b).sum::<f64>()
                    + o.deltas.iter().zip(&c.deltas).map(|(a, b)| a * b).sum::<f64>()
            })
            .sum::<f64>()
    };

    let mut g = Graph::new();
    let x = g.input(img.to_tensor(), true);
    let levels = det
        .build(&mut g, &w, x, Mode::Train, Some(&mut StreamRng::seed_from_u64(99)), true)
        .unwrap();
    let grads = det.backward(&g, &levels, &cot).unwrap();

    let h = 1e-5;
    let check = |analytic: f64, numeric: f64, what: &str| {
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6);
        assert!(rel < 1e-4, "{what}: analytic {analytic} numeric {numeric}");
    };
    for slot in 0..w.num_slots() {
        let n = w.tensor(slot).len();
        for i in [0, n / 2, n - 1] {
            let (mut p, mut m) = (w.clone(), w.clone());
            p.tensors_mut()[slot].data_mut()[i] += h;
            m.tensors_mut()[slot].data_mut()[i] -= h;
            let num = (objective(&p, &img) - objective(&m, &img)) / (2.0 * h);
            check(grads.param(slot).unwrap()[i], num, &w.specs()[slot].name);
        }
    }
    for i in [0, 37, 130, 255] {
        let (mut p, mut m) = (img.clone(), img.clone());
        p.data[i] += h;
        m.data[i] -= h;
        let num = (objective(&w, &p) - objective(&w, &m)) / (2.0 * h);
        check(grads.wrt(x).unwrap()[i], num, "input");
    }
}

#[test]
fn detect_respects_threshold_and_limits() {
    let det = Detector::new(tiny(3)).unwrap();
    let w = det.init_weights(&mut StreamRng::seed_from_u64(14));
    let img = random_image(1, 32, 32, 15);
    let params = DetectParams {
        score_threshold: 0.0,
        max_detections: 7,
        ..Default::default()
    };
    let dets = det.detect(&w, &img, &params).unwrap();
    assert!(dets.len() <= 7);
    assert!(dets.windows(2).all(|p| p[0].score >= p[1].score));
    for d in &dets {
        let [x1, y1, x2, y2] = d.bbox.corners();
        assert!(x1 >= -1e-9 && y1 >= -1e-9 && x2 <= 32.0 + 1e-9 && y2 <= 32.0 + 1e-9);
        assert!(d.class >= 1 && d.class <= 2);
    }
    let none = det
        .detect(&w, &img, &DetectParams { score_threshold: 1.0, ..Default::default() })
        .unwrap();
    assert!(none.is_empty());
}
