//! A small anchor-based single-stage detector with a feature-pyramid neck.
//!
//! Backbone: a 3x3 stem, then four stages that each halve resolution with a
//! 2x2/2 convolution and run `blocks_per_stage` residual blocks; a noisy
//! residual gate follows every stage when enabled. Neck: top-down pyramid
//! built from 1x1 laterals and nearest upsampling. Heads: class and box
//! subnets shared across levels.
//!
//! Every spatial operation is mirror-symmetric on even-sized maps (3x3 with
//! unit padding, 2x2/2 downsampling, nearest upsampling), so a network with
//! horizontally symmetric kernels is exactly flip-equivariant. Tests use
//! that to validate the student/teacher grid correspondence.

mod nms;
mod weights;

pub use nms::{batched_nms, nms};
pub use weights::{ModelWeights, ParamSpec, WeightRole};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autograd::{Gradients, Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::feature_perturbation::{nrb_apply, GateProjection, NoisyResidualGate};
use crate::geometry::{decode_box, AnchorGrid, BBox};
use crate::image::Image;
use crate::output::{DetectorOutput, LevelOutput};
use crate::rng::StreamRng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassLossKind {
    CrossEntropy,
    Focal,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DetectorConfig {
    pub in_channels: usize,
    /// Foreground classes; index 0 is background everywhere.
    pub num_classes: usize,
    /// Pyramid levels emitted: 1, 3 or 5.
    pub scales: usize,
    pub anchor_scales: Vec<f64>,
    /// Height / width ratios; must be closed under `r -> r` mirroring, which
    /// every ratio set trivially is.
    pub anchor_ratios: Vec<f64>,
    /// Anchor base size as a multiple of the level stride.
    pub anchor_size_factor: f64,
    pub stem_channels: usize,
    pub stage_channels: [usize; 4],
    pub blocks_per_stage: usize,
    pub fpn_channels: usize,
    pub head_convs: usize,
    /// Initial foreground probability of the classifier.
    pub prior_foreground: f64,
    #[serde(skip)]
    pub nrb_enabled: bool,
    pub nrb: NoisyResidualGate,
    pub loss: ClassLossKind,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            in_channels: 1,
            num_classes: 2,
            scales: 3,
            anchor_scales: vec![1.0, 2f64.powf(1.0 / 3.0), 2f64.powf(2.0 / 3.0)],
            anchor_ratios: vec![0.5, 1.0, 2.0],
            anchor_size_factor: 2.0,
            stem_channels: 8,
            stage_channels: [8, 16, 24, 32],
            blocks_per_stage: 1,
            fpn_channels: 24,
            head_convs: 1,
            prior_foreground: 0.01,
            nrb_enabled: false,
            nrb: NoisyResidualGate::default(),
            loss: ClassLossKind::CrossEntropy,
        }
    }
}

impl DetectorConfig {
    pub fn anchors_per_cell(&self) -> usize {
        self.anchor_scales.len() * self.anchor_ratios.len()
    }

    /// `C + 1`, background included.
    pub fn class_channels(&self) -> usize {
        self.num_classes + 1
    }

    /// Pyramid strides, coarse-to-fine.
    pub fn strides(&self) -> Vec<usize> {
        match self.scales {
            1 => vec![8],
            3 => vec![16, 8, 4],
            _ => vec![32, 16, 8, 4, 2],
        }
    }

    pub fn coarsest_stride(&self) -> usize {
        self.strides()[0].max(16)
    }

    pub fn validate(&self) -> Result<()> {
        if ![1, 3, 5].contains(&self.scales) {
            return Err(Error::config(format!("scales must be 1, 3 or 5, got {}", self.scales)));
        }
        if self.num_classes == 0 || self.in_channels == 0 {
            return Err(Error::config("need at least one input channel and one class"));
        }
        if self.anchors_per_cell() == 0 || self.anchor_ratios.iter().chain(&self.anchor_scales).any(|v| !(*v > 0.0)) {
            return Err(Error::config("anchor scales and ratios must be non-empty and positive"));
        }
        if self.stem_channels == 0 || self.stage_channels.contains(&0) || self.fpn_channels == 0 {
            return Err(Error::config("channel widths must be positive"));
        }
        if !(self.prior_foreground > 0.0 && self.prior_foreground < 1.0) {
            return Err(Error::config("prior_foreground must lie in (0, 1)"));
        }
        self.nrb.validate()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

#[derive(Clone, Copy, Debug)]
struct ConvSlots {
    w: usize,
    b: usize,
}

#[derive(Clone, Debug)]
struct StageSlots {
    down: ConvSlots,
    blocks: Vec<(ConvSlots, ConvSlots)>,
    gate: Option<ConvSlots>,
}

#[derive(Clone, Copy, Debug)]
enum InitKind {
    /// He-normal for layers followed by ReLU.
    He,
    /// Unit-gain normal for linear layers.
    Linear,
    /// Small normal with a fixed bias.
    Output { std: f64 },
    Gate,
}

#[derive(Clone, Debug)]
struct Layout {
    specs: Vec<ParamSpec>,
    inits: Vec<InitKind>,
    stem: ConvSlots,
    stages: Vec<StageSlots>,
    /// Laterals for C1..C4 (index 0 = stride 2).
    laterals: [Option<ConvSlots>; 4],
    extra: Option<ConvSlots>,
    cls: Vec<ConvSlots>,
    cls_out: ConvSlots,
    reg: Vec<ConvSlots>,
    reg_out: ConvSlots,
}

impl Layout {
    fn conv(&mut self, name: &str, cout: usize, cin: usize, k: usize, init: InitKind) -> ConvSlots {
        self.specs.push(ParamSpec {
            name: format!("{name}.weight"),
            shape: vec![cout, cin, k, k],
        });
        self.inits.push(init);
        self.specs.push(ParamSpec {
            name: format!("{name}.bias"),
            shape: vec![cout],
        });
        self.inits.push(init);
        ConvSlots {
            w: self.specs.len() - 2,
            b: self.specs.len() - 1,
        }
    }

    fn build(cfg: &DetectorConfig) -> Self {
        let placeholder = ConvSlots { w: 0, b: 0 };
        let mut l = Layout {
            specs: Vec::new(),
            inits: Vec::new(),
            stem: placeholder,
            stages: Vec::new(),
            laterals: [None; 4],
            extra: None,
            cls: Vec::new(),
            cls_out: placeholder,
            reg: Vec::new(),
            reg_out: placeholder,
        };
        l.stem = l.conv("stem", cfg.stem_channels, cfg.in_channels, 3, InitKind::He);
        let mut cin = cfg.stem_channels;
        for (si, &c) in cfg.stage_channels.iter().enumerate() {
            let down = l.conv(&format!("stage{si}.down"), c, cin, 2, InitKind::He);
            let blocks = (0..cfg.blocks_per_stage)
                .map(|bi| {
                    (
                        l.conv(&format!("stage{si}.block{bi}.conv1"), c, c, 3, InitKind::He),
                        l.conv(&format!("stage{si}.block{bi}.conv2"), c, c, 3, InitKind::He),
                    )
                })
                .collect();
            let gate = cfg
                .nrb_enabled
                .then(|| l.conv(&format!("stage{si}.nrb"), c, c, 1, InitKind::Gate));
            l.stages.push(StageSlots { down, blocks, gate });
            cin = c;
        }
        let f = cfg.fpn_channels;
        let finest = match cfg.scales {
            1 => 2,
            3 => 1,
            _ => 0,
        };
        for ci in (finest..4).rev() {
            l.laterals[ci] = Some(l.conv(
                &format!("fpn.lateral{}", ci + 1),
                f,
                cfg.stage_channels[ci],
                1,
                InitKind::Linear,
            ));
        }
        if cfg.scales == 5 {
            l.extra = Some(l.conv("fpn.extra", f, f, 2, InitKind::Linear));
        }
        let a = cfg.anchors_per_cell();
        let k = cfg.class_channels();
        for hi in 0..cfg.head_convs {
            let s = l.conv(&format!("head.cls{hi}"), f, f, 3, InitKind::He);
            l.cls.push(s);
        }
        l.cls_out = l.conv("head.cls_out", a * k, f, 3, InitKind::Output { std: 0.01 });
        for hi in 0..cfg.head_convs {
            let s = l.conv(&format!("head.reg{hi}"), f, f, 3, InitKind::He);
            l.reg.push(s);
        }
        l.reg_out = l.conv("head.reg_out", a * 4, f, 3, InitKind::Output { std: 0.01 });
        l
    }
}

/// Graph nodes of one emitted level.
#[derive(Clone, Copy, Debug)]
pub struct LevelVars {
    pub probs: Var,
    pub deltas: Var,
}

#[derive(Clone, Debug)]
pub struct Detector {
    config: DetectorConfig,
    layout: Layout,
}

/// One decoded detection.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BBox,
    pub class: usize,
    pub score: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DetectParams {
    pub score_threshold: f64,
    pub nms_iou: f64,
    /// Highest-scoring candidates kept per class before suppression.
    pub max_candidates: usize,
    pub max_detections: usize,
}

impl Default for DetectParams {
    fn default() -> Self {
        Self {
            score_threshold: 0.05,
            nms_iou: 0.5,
            max_candidates: 1000,
            max_detections: 100,
        }
    }
}

impl Detector {
    pub fn new(config: DetectorConfig) -> Result<Self> {
        config.validate()?;
        let layout = Layout::build(&config);
        Ok(Self { config, layout })
    }

    pub fn config(&self) -> &DetectorConfig {
        &self.config
    }

    pub fn param_specs(&self) -> &[ParamSpec] {
        &self.layout.specs
    }

    pub fn num_slots(&self) -> usize {
        self.layout.specs.len()
    }

    pub fn anchor_grid(&self, height: usize, width: usize) -> Result<AnchorGrid> {
        AnchorGrid::new(
            height,
            width,
            &self.config.strides(),
            self.config.anchor_size_factor,
            &self.config.anchor_scales,
            &self.config.anchor_ratios,
        )
    }

    pub fn init_weights<R: Rng + ?Sized>(&self, rng: &mut R) -> ModelWeights {
        let k = self.config.class_channels() as f64;
        let bg_bias = ((k - 1.0) * (1.0 - self.config.prior_foreground) / self.config.prior_foreground).ln();
        let tensors = self
            .layout
            .specs
            .iter()
            .zip(&self.layout.inits)
            .enumerate()
            .map(|(slot, (spec, init))| {
                let is_bias = spec.shape.len() == 1;
                let fan_in: usize = spec.shape.iter().skip(1).product();
                let mut data = vec![0.0; spec.len()];
                if is_bias {
                    if slot == self.layout.cls_out.b {
                        let kc = self.config.class_channels();
                        for (i, v) in data.iter_mut().enumerate() {
                            if i % kc == 0 {
                                *v = bg_bias;
                            }
                        }
                    }
                } else {
                    let std = match init {
                        InitKind::He => (2.0 / fan_in as f64).sqrt(),
                        InitKind::Linear => (1.0 / fan_in as f64).sqrt(),
                        InitKind::Output { std } => *std,
                        InitKind::Gate => 0.01,
                    };
                    let normal = Normal::new(0.0, std).expect("finite std");
                    data.iter_mut().for_each(|v| *v = normal.sample(rng));
                }
                Tensor::new(spec.shape.clone(), data).expect("spec shape")
            })
            .collect();
        ModelWeights::new(WeightRole::Student, self.layout.specs.clone(), tensors)
            .expect("layout-built weights")
    }

    /// Checks an input image against the configuration.
    pub fn check_input(&self, image: &Image) -> Result<()> {
        self.check_dims(image.channels, image.height, image.width)
    }

    fn check_dims(&self, c: usize, h: usize, w: usize) -> Result<()> {
        let s = self.config.coarsest_stride();
        if c != self.config.in_channels || h == 0 || w == 0 || h % s != 0 || w % s != 0 {
            return Err(Error::shape(format!(
                "detector expects {} channel(s) with sides a multiple of {s}, got {c}x{h}x{w}",
                self.config.in_channels
            )));
        }
        Ok(())
    }

    /// Records the forward pass on `g`.
    ///
    /// With `param_grads` false the weights enter as constants (used when only
    /// the input gradient is wanted). Noise gates draw from `noise` only in
    /// [`Mode::Train`] with the gates enabled.
    pub fn build(
        &self,
        g: &mut Graph,
        weights: &ModelWeights,
        input: Var,
        mode: Mode,
        mut noise: Option<&mut StreamRng>,
        param_grads: bool,
    ) -> Result<Vec<LevelVars>> {
        let specs = weights.specs();
        if specs != self.layout.specs.as_slice() {
            return Err(Error::Layout(format!(
                "weights have {} tensors, detector expects {}",
                specs.len(),
                self.layout.specs.len()
            )));
        }
        let (c, h, w) = g.value(input).dims3()?;
        self.check_dims(c, h, w)?;
        let p: Vec<Var> = weights
            .tensors()
            .iter()
            .enumerate()
            .map(|(i, t)| {
                if param_grads {
                    g.param(i, t)
                } else {
                    g.input(t.clone(), false)
                }
            })
            .collect();
        let conv = |g: &mut Graph, x: Var, s: ConvSlots, stride: usize, pad: usize| {
            g.conv2d(x, p[s.w], Some(p[s.b]), stride, pad)
        };
        let gates_on = mode == Mode::Train && self.config.nrb_enabled;

        let mut x = conv(g, input, self.layout.stem, 1, 1)?;
        x = g.relu(x);
        let mut feats = Vec::with_capacity(4);
        for stage in &self.layout.stages {
            x = conv(g, x, stage.down, 2, 0)?;
            x = g.relu(x);
            for &(c1, c2) in &stage.blocks {
                let y = conv(g, x, c1, 1, 1)?;
                let y = g.relu(y);
                let y = conv(g, y, c2, 1, 1)?;
                let y = g.add(x, y)?;
                x = g.relu(y);
            }
            if let (Some(gs), true) = (stage.gate, gates_on) {
                if let Some(rng) = noise.as_deref_mut() {
                    let proj = GateProjection {
                        weight: p[gs.w],
                        bias: p[gs.b],
                    };
                    x = nrb_apply(g, &self.config.nrb, proj, x, rng, true)?;
                }
            }
            feats.push(x);
        }

        // Top-down pyramid; pyramid[i] has the stride of stage i.
        let mut pyramid: [Option<Var>; 4] = [None; 4];
        let mut top: Option<Var> = None;
        for ci in (0..4).rev() {
            let Some(lat) = self.layout.laterals[ci] else {
                break;
            };
            let mut level = conv(g, feats[ci], lat, 1, 0)?;
            if let Some(t) = top {
                let up = g.upsample2(t)?;
                level = g.add(level, up)?;
            }
            pyramid[ci] = Some(level);
            top = Some(level);
        }
        let mut levels: Vec<Var> = Vec::new();
        if let Some(extra) = self.layout.extra {
            let p4 = pyramid[3].expect("top level always present");
            levels.push(conv(g, p4, extra, 2, 0)?);
        }
        let strides = self.config.strides();
        for &s in &strides[levels.len()..] {
            let ci = s.trailing_zeros() as usize - 1;
            levels.push(pyramid[ci].expect("lateral exists for every emitted level"));
        }

        let kc = self.config.class_channels();
        let mut out = Vec::with_capacity(levels.len());
        for feat in levels {
            let mut hc = feat;
            for &s in &self.layout.cls {
                hc = conv(g, hc, s, 1, 1)?;
                hc = g.relu(hc);
            }
            let logits = conv(g, hc, self.layout.cls_out, 1, 1)?;
            let probs = g.group_softmax(logits, kc)?;
            let mut hr = feat;
            for &s in &self.layout.reg {
                hr = conv(g, hr, s, 1, 1)?;
                hr = g.relu(hr);
            }
            let deltas = conv(g, hr, self.layout.reg_out, 1, 1)?;
            out.push(LevelVars { probs, deltas });
        }
        Ok(out)
    }

    /// Reads the emitted levels off the graph.
    pub fn collect(&self, g: &Graph, levels: &[LevelVars]) -> DetectorOutput {
        let a = self.config.anchors_per_cell();
        let kc = self.config.class_channels();
        let strides = self.config.strides();
        DetectorOutput {
            levels: levels
                .iter()
                .zip(strides)
                .map(|(lv, stride)| {
                    let probs = g.value(lv.probs);
                    let (_, h, w) = probs.dims3().expect("head output is 3-D");
                    LevelOutput {
                        stride,
                        height: h,
                        width: w,
                        anchors: a,
                        classes: kc,
                        probs: probs.data().to_vec(),
                        deltas: g.value(lv.deltas).data().to_vec(),
                    }
                })
                .collect(),
        }
    }

    /// Back-propagates a cotangent on the outputs.
    pub fn backward(&self, g: &Graph, levels: &[LevelVars], grad: &DetectorOutput) -> Result<Gradients> {
        if grad.levels.len() != levels.len() {
            return Err(Error::shape("gradient level count differs from the forward pass"));
        }
        let seeds: Vec<(Var, &[f64])> = levels
            .iter()
            .zip(&grad.levels)
            .flat_map(|(lv, gl)| [(lv.probs, gl.probs.as_slice()), (lv.deltas, gl.deltas.as_slice())])
            .collect();
        g.backward(&seeds, self.num_slots())
    }

    /// Forward pass without recording gradients.
    pub fn forward(
        &self,
        weights: &ModelWeights,
        image: &Image,
        mode: Mode,
        noise: Option<&mut StreamRng>,
    ) -> Result<DetectorOutput> {
        self.check_input(image)?;
        let mut g = Graph::no_grad();
        let x = g.input(image.to_tensor(), false);
        let levels = self.build(&mut g, weights, x, mode, noise, false)?;
        Ok(self.collect(&g, &levels))
    }

    /// Decodes an output into boxes and applies per-class NMS. Results are
    /// sorted by descending score.
    pub fn decode(&self, output: &DetectorOutput, height: usize, width: usize, params: &DetectParams) -> Result<Vec<Detection>> {
        let grid = self.anchor_grid(height, width)?;
        let anchors = grid.anchors();
        let (wmax, hmax) = (width as f64, height as f64);
        let mut per_class: Vec<Vec<Detection>> = vec![Vec::new(); self.config.num_classes + 1];
        let mut idx = 0;
        for level in &output.levels {
            for i in 0..level.len() {
                let (a, y, x) = level.unravel(i);
                let anchor = &anchors[idx];
                idx += 1;
                let mut decoded: Option<Option<BBox>> = None;
                for (k, dets) in per_class.iter_mut().enumerate().skip(1) {
                    let score = level.probs[level.prob_index(a, k, y, x)];
                    if score <= params.score_threshold {
                        continue;
                    }
                    let bbox = *decoded.get_or_insert_with(|| {
                        let b = decode_box(&level.box_delta(a, y, x), anchor);
                        let [x1, y1, x2, y2] = b.corners();
                        BBox::from_corners(x1.max(0.0), y1.max(0.0), x2.min(wmax), y2.min(hmax)).ok()
                    });
                    if let Some(bbox) = bbox {
                        dets.push(Detection { bbox, class: k, score });
                    }
                }
            }
        }
        let mut out = Vec::new();
        for mut dets in per_class {
            dets.sort_by(|a, b| b.score.total_cmp(&a.score));
            dets.truncate(params.max_candidates);
            out.extend(batched_nms(&dets, params.nms_iou));
        }
        out.sort_by(|a, b| b.score.total_cmp(&a.score));
        out.truncate(params.max_detections);
        Ok(out)
    }

    /// Inference: forward without noise, decode, suppress.
    pub fn detect(&self, weights: &ModelWeights, image: &Image, params: &DetectParams) -> Result<Vec<Detection>> {
        let out = self.forward(weights, image, Mode::Infer, None)?;
        self.decode(&out, image.height, image.width, params)
    }
}

#[cfg(test)]
mod tests;
