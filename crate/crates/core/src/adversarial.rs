//! Instance-level adversarial perturbation of the teacher input.
//!
//! One extra forward/backward pass per view: the teacher sees its view plus
//! a tiny random probe, the consistency cost is restricted to positions the
//! student confidently calls foreground, and the input gradient of that cost
//! sets the direction of a perturbation of fixed L2 norm.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autograd::Graph;
use crate::detector::{Detector, Mode, ModelWeights};
use crate::error::{Error, Result};
use crate::geometry::Correspondence;
use crate::image::Image;
use crate::losses::{consistency_cost, ConsistencyConfig};
use crate::output::DetectorOutput;
use crate::rng::StreamRng;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PerturbationConfig {
    /// Scale of the random probe.
    pub xi: f64,
    /// L2 norm of the final perturbation.
    pub eps: f64,
    /// Foreground-confidence threshold of the position mask.
    pub tau: f64,
    /// Gradients with a smaller norm yield no perturbation.
    pub grad_floor: f64,
}

impl Default for PerturbationConfig {
    fn default() -> Self {
        Self {
            xi: 5e-7,
            eps: 2.0,
            tau: 0.95,
            grad_floor: 1e-12,
        }
    }
}

impl PerturbationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.xi > 0.0 && self.xi <= 1.0) || !(self.eps > 0.0) || !(self.tau > 0.0 && self.tau < 1.0) {
            return Err(Error::config(format!(
                "adversarial settings need 0 < xi <= 1, eps > 0, 0 < tau < 1; got {self:?}"
            )));
        }
        if !(self.grad_floor >= 0.0) {
            return Err(Error::config("grad_floor must be non-negative"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdversarialState {
    /// Perturbation to add to the teacher view; norm `eps` or all zeros.
    pub r_adv: Vec<f64>,
    /// Gradient of the masked cost with respect to the probe.
    pub grad: Vec<f64>,
    pub grad_norm: f64,
    pub masked_positions: usize,
}

impl AdversarialState {
    fn zero(len: usize) -> Self {
        Self {
            r_adv: vec![0.0; len],
            grad: vec![0.0; len],
            grad_norm: 0.0,
            masked_positions: 0,
        }
    }
}

pub fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Standard-normal draw scaled to unit L2 norm.
pub fn seed_noise<R: Rng + ?Sized>(len: usize, rng: &mut R) -> Vec<f64> {
    let mut v: Vec<f64> = (0..len).map(|_| rng.sample(StandardNormal)).collect();
    let n = l2_norm(&v);
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    v
}

/// Positions whose foreground mass `1 - p[0]` exceeds `tau`, in global
/// anchor order.
pub fn foreground_mask(output: &DetectorOutput, tau: f64) -> Vec<bool> {
    output
        .positions()
        .map(|(li, a, y, x)| {
            let l = &output.levels[li];
            1.0 - l.probs[l.prob_index(a, 0, y, x)] > tau
        })
        .collect()
}

/// Masked consistency between `student` and the teacher's prediction on
/// `teacher_input`. `noise` drives the teacher's noisy gates, if any.
#[allow(clippy::too_many_arguments)]
pub fn masked_consistency(
    detector: &Detector,
    teacher: &ModelWeights,
    teacher_input: &Image,
    student: &DetectorOutput,
    correspondence: Correspondence,
    mask: &[bool],
    consistency: &ConsistencyConfig,
    noise: Option<&mut StreamRng>,
) -> Result<f64> {
    let t = detector.forward(teacher, teacher_input, Mode::Train, noise)?;
    Ok(consistency_cost(student, &correspondence.apply(&t), consistency, Some(mask))?.value)
}

/// Builds the perturbation for one teacher view.
///
/// `student` is the student's prediction on the matching (unperturbed)
/// student view; the mask comes from it and stays fixed. Weights are only
/// read.
#[allow(clippy::too_many_arguments)]
pub fn synthesize(
    detector: &Detector,
    teacher: &ModelWeights,
    teacher_view: &Image,
    student: &DetectorOutput,
    correspondence: Correspondence,
    config: &PerturbationConfig,
    consistency: &ConsistencyConfig,
    rng: &mut StreamRng,
    noise: Option<&mut StreamRng>,
) -> Result<AdversarialState> {
    let len = teacher_view.data.len();
    let mask = foreground_mask(student, config.tau);
    let masked = mask.iter().filter(|m| **m).count();
    if masked == 0 {
        return Ok(AdversarialState::zero(len));
    }
    let d = seed_noise(len, rng);
    let probe: Vec<f64> = d.iter().map(|v| config.xi * v).collect();
    let input = teacher_view.add(&probe)?;

    let mut g = Graph::new();
    let x = g.input(input.to_tensor(), true);
    let levels = detector.build(&mut g, teacher, x, Mode::Train, noise, false)?;
    let t = detector.collect(&g, &levels);
    let loss = consistency_cost(student, &correspondence.apply(&t), consistency, Some(&mask))?;
    let back = correspondence.apply(&loss.grad_teacher);
    let grads = detector.backward(&g, &levels, &back)?;
    let gx = grads
        .wrt(x)
        .ok_or_else(|| Error::shape("teacher input gradient was not recorded"))?;
    // d(loss)/d(d) = xi * d(loss)/d(input).
    let grad: Vec<f64> = gx.iter().map(|v| config.xi * v).collect();
    let grad_norm = l2_norm(&grad);
    if !grad_norm.is_finite() || !loss.value.is_finite() {
        return Err(Error::Numerical {
            iteration: 0,
            seed: 0,
            message: format!("adversarial gradient is not finite (loss {})", loss.value),
        });
    }
    let r_adv = if grad_norm > config.grad_floor {
        grad.iter().map(|v| config.eps * v / grad_norm).collect()
    } else {
        vec![0.0; len]
    };
    Ok(AdversarialState {
        r_adv,
        grad,
        grad_norm,
        masked_positions: masked,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detector::DetectorConfig;
    use rand::SeedableRng;

    #[test]
    fn seed_noise_has_unit_norm_and_zero_mean() {
        let mut rng = StreamRng::seed_from_u64(1);
        let a = seed_noise(4096, &mut rng);
        assert!((l2_norm(&a) - 1.0).abs() < 1e-6);
        let b = seed_noise(4096, &mut StreamRng::seed_from_u64(2));
        assert_ne!(a, b);
        let big = seed_noise(1_000_000, &mut rng);
        // Unit-norm entries have std 1 / sqrt(n); the mean of n of them has
        // std 1 / n.
        let mean = big.iter().sum::<f64>() / big.len() as f64;
        assert!(mean.abs() < 4.0 / big.len() as f64, "{mean}");
    }

    fn setup() -> (Detector, ModelWeights, Image, DetectorOutput) {
        let det = Detector::new(DetectorConfig {
            anchor_scales: vec![1.0],
            anchor_ratios: vec![1.0],
            stem_channels: 4,
            stage_channels: [4, 6, 6, 8],
            fpn_channels: 6,
            ..Default::default()
        })
        .unwrap();
        let mut w = det.init_weights(&mut StreamRng::seed_from_u64(3));
        // Pull the classifier toward foreground so the mask is non-empty.
        let slot = w.index_of("head.cls_out.bias").unwrap();
        w.tensors_mut()[slot].data_mut().iter_mut().for_each(|v| *v = if *v > 0.0 { -1.5 } else { 1.5 });
        for name in ["head.cls_out.weight", "head.reg_out.weight"] {
            let slot = w.index_of(name).unwrap();
            w.tensors_mut()[slot].data_mut().iter_mut().for_each(|v| *v *= 40.0);
        }
        let mut rng = StreamRng::seed_from_u64(4);
        let img = Image::new(1, 32, 32, (0..1024).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let student = det.forward(&w, &img, Mode::Infer, None).unwrap();
        (det, w, img, student)
    }

    #[test]
    fn perturbation_has_norm_eps_and_weights_are_untouched() {
        let (det, w, img, student) = setup();
        let before = w.clone();
        let cfg = PerturbationConfig { tau: 0.5, ..Default::default() };
        let corr = Correspondence { hflip: true, vflip: false };
        let s = synthesize(&det, &w, &img.hflip(), &student, corr, &cfg, &ConsistencyConfig::default(), &mut StreamRng::seed_from_u64(5), None)
            .unwrap();
        assert!(s.masked_positions > 0);
        assert!(s.grad_norm > cfg.grad_floor);
        assert!((l2_norm(&s.r_adv) - cfg.eps).abs() < 1e-5 * cfg.eps);
        assert_eq!(w, before);
    }

    #[test]
    fn empty_mask_gives_zero_perturbation() {
        let (det, w, img, student) = setup();
        let cfg = PerturbationConfig { tau: 0.999_999_999, ..Default::default() };
        let s = synthesize(&det, &w, &img, &student, Correspondence::default(), &cfg, &ConsistencyConfig::default(), &mut StreamRng::seed_from_u64(6), None)
            .unwrap();
        assert_eq!(s.masked_positions, 0);
        assert!(s.r_adv.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn tiny_gradient_falls_back_to_zero() {
        let (det, w, img, student) = setup();
        let cfg = PerturbationConfig { tau: 0.5, grad_floor: 1e300, ..Default::default() };
        let s = synthesize(&det, &w, &img, &student, Correspondence::default(), &cfg, &ConsistencyConfig::default(), &mut StreamRng::seed_from_u64(7), None)
            .unwrap();
        assert!(s.r_adv.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn adversarial_direction_beats_random_directions() {
        let (det, w, img, student) = setup();
        let cfg = PerturbationConfig { tau: 0.5, eps: 0.5, ..Default::default() };
        let corr = Correspondence { hflip: true, vflip: false };
        let cc = ConsistencyConfig::default();
        let teacher_view = img.hflip();
        let mask = foreground_mask(&student, cfg.tau);
        let s = synthesize(&det, &w, &teacher_view, &student, corr, &cfg, &cc, &mut StreamRng::seed_from_u64(8), None).unwrap();
        let loss = |r: &[f64]| {
            masked_consistency(&det, &w, &teacher_view.add(r).unwrap(), &student, corr, &mask, &cc, None).unwrap()
        };
        let adv = loss(&s.r_adv);
        let base = loss(&vec![0.0; img.data.len()]);
        assert!(adv > base);
        let mut rng = StreamRng::seed_from_u64(9);
        let wins = (0..100)
            .filter(|_| {
                let r: Vec<f64> = seed_noise(img.data.len(), &mut rng).iter().map(|v| v * cfg.eps).collect();
                adv >= loss(&r)
            })
            .count();
        assert!(wins >= 80, "{wins}");
    }

    #[test]
    fn small_steps_along_the_perturbation_ascend() {
        let (det, w, img, student) = setup();
        let cfg = PerturbationConfig { tau: 0.5, ..Default::default() };
        let corr = Correspondence { hflip: true, vflip: false };
        let cc = ConsistencyConfig::default();
        let view = img.hflip();
        let mask = foreground_mask(&student, cfg.tau);
        let s = synthesize(&det, &w, &view, &student, corr, &cfg, &cc, &mut StreamRng::seed_from_u64(10), None).unwrap();
        let at = |t: f64| {
            let r: Vec<f64> = s.r_adv.iter().map(|v| t * v / cfg.eps).collect();
            masked_consistency(&det, &w, &view.add(&r).unwrap(), &student, corr, &mask, &cc, None).unwrap()
        };
        let base = at(0.0);
        for t in [1e-4, 1e-3, 1e-2] {
            assert!(at(t) >= base - 1e-12);
        }
    }

    #[test]
    fn invalid_config_is_rejected() {
        for c in [
            PerturbationConfig { xi: 0.0, ..Default::default() },
            PerturbationConfig { eps: -1.0, ..Default::default() },
            PerturbationConfig { tau: 1.0, ..Default::default() },
        ] {
            assert!(c.validate().is_err());
        }
        assert!(PerturbationConfig::default().validate().is_ok());
    }
}
