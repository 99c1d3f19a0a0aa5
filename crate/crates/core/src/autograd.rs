//! A small reverse-mode automatic differentiation engine over dense tensors.
//!
//! Feature maps are laid out channel-major (`[C, H, W]`), convolution
//! kernels as `[C_out, C_in, K_h, K_w]`. A [`Graph`] records every operation
//! applied to its nodes; [`Graph::backward`] walks the tape in reverse and
//! returns gradients for parameters and for any input created with
//! `requires_grad`.
//!
//! The op set is exactly what the detector needs: convolution, addition,
//! ReLU, nearest-neighbour upsampling, global average pooling, sigmoid,
//! scaling, a channel-broadcast product with a constant map, and a grouped
//! softmax over channels.

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::shape(format!(
                "shape {shape:?} needs {expected} elements, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// `(C, H, W)` of a rank-3 tensor.
    pub fn dims3(&self) -> Result<(usize, usize, usize)> {
        match self.shape.as_slice() {
            &[c, h, w] => Ok((c, h, w)),
            other => Err(Error::shape(format!("expected [C, H, W], got {other:?}"))),
        }
    }
}

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Input,
    Param(usize),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
        /// im2col buffer of `x`; only kept when the graph tracks gradients.
        cols: Option<Vec<f64>>,
    },
    Add(Var, Var),
    Relu(Var),
    Upsample2(Var),
    GlobalAvgPool(Var),
    Sigmoid(Var),
    Scale(Var, f64),
    ChannelGate {
        map: Vec<f64>,
        gate: Var,
    },
    GroupSoftmax {
        x: Var,
        group: usize,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients {
    params: Vec<Option<Vec<f64>>>,
    nodes: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient for parameter slot `index`, `None` if it never received one.
    pub fn param(&self, index: usize) -> Option<&[f64]> {
        self.params.get(index).and_then(|g| g.as_deref())
    }

    /// Gradient with respect to any node that requires gradients.
    pub fn wrt(&self, var: Var) -> Option<&[f64]> {
        self.nodes.get(var.0).and_then(|g| g.as_deref())
    }

    pub fn num_param_slots(&self) -> usize {
        self.params.len()
    }

    pub fn into_params(self) -> Vec<Option<Vec<f64>>> {
        self.params
    }
}

#[derive(Debug)]
pub struct Graph {
    nodes: Vec<Node>,
    track: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    /// A graph that records what backward needs.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            track: true,
        }
    }

    /// A forward-only graph: nothing requires gradients and no buffers are kept.
    pub fn no_grad() -> Self {
        Self {
            nodes: Vec::new(),
            track: false,
        }
    }

    pub fn is_tracking(&self) -> bool {
        self.track
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad: requires_grad && self.track,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn input(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Input, requires_grad)
    }

    /// Registers parameter slot `index`; its gradient is reported under that slot.
    pub fn param(&mut self, index: usize, value: &Tensor) -> Var {
        self.push(value.clone(), Op::Param(index), true)
    }

    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let (c, h, wd) = self.value(x).dims3()?;
        let (cout, cin, kh, kw) = match self.value(w).shape() {
            &[o, i, kh, kw] => (o, i, kh, kw),
            other => return Err(Error::shape(format!("conv kernel must be 4-D, got {other:?}"))),
        };
        if cin != c {
            return Err(Error::shape(format!(
                "conv expects {cin} input channels, got {c}"
            )));
        }
        if stride == 0 || h + 2 * pad < kh || wd + 2 * pad < kw {
            return Err(Error::shape(format!(
                "conv {kh}x{kw}/{stride} pad {pad} does not fit a {h}x{wd} map"
            )));
        }
        if let Some(b) = b {
            if self.value(b).len() != cout {
                return Err(Error::shape("conv bias length must equal output channels"));
            }
        }
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (wd + 2 * pad - kw) / stride + 1;
        let k = cin * kh * kw;
        let n = ho * wo;
        let mut cols = vec![0.0; k * n];
        im2col(
            self.value(x).data(),
            (c, h, wd),
            (kh, kw),
            stride,
            pad,
            (ho, wo),
            &mut cols,
        );
        let mut out = vec![0.0; cout * n];
        gemm(cout, k, n, self.value(w).data(), false, &cols, false, &mut out, false);
        if let Some(b) = b {
            let bias = self.value(b).data();
            for (o, row) in out.chunks_mut(n).enumerate() {
                row.iter_mut().for_each(|v| *v += bias[o]);
            }
        }
        let requires = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        let cols = (self.track && requires).then_some(cols);
        Ok(self.push(
            Tensor::new(vec![cout, ho, wo], out)?,
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
                cols,
            },
            requires,
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::shape(format!(
                "add: {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let value = Tensor::new(self.value(a).shape().to_vec(), data)?;
        let requires = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Add(a, b), requires))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let src = self.value(a);
        let value = Tensor {
            shape: src.shape.clone(),
            data: src.data.iter().map(|&v| v.max(0.0)).collect(),
        };
        let requires = self.needs(a);
        self.push(value, Op::Relu(a), requires)
    }

    /// Nearest-neighbour 2x upsampling of a `[C, H, W]` map.
    pub fn upsample2(&mut self, a: Var) -> Result<Var> {
        let (c, h, w) = self.value(a).dims3()?;
        let src = self.value(a).data();
        let (h2, w2) = (2 * h, 2 * w);
        let mut out = vec![0.0; c * h2 * w2];
        for ch in 0..c {
            for y in 0..h2 {
                let srow = &src[(ch * h + y / 2) * w..(ch * h + y / 2 + 1) * w];
                let drow = &mut out[(ch * h2 + y) * w2..(ch * h2 + y + 1) * w2];
                for (x, d) in drow.iter_mut().enumerate() {
                    *d = srow[x / 2];
                }
            }
        }
        let requires = self.needs(a);
        Ok(self.push(Tensor::new(vec![c, h2, w2], out)?, Op::Upsample2(a), requires))
    }

    /// `[C, H, W]` to `[C, 1, 1]` by spatial mean.
    pub fn global_avg_pool(&mut self, a: Var) -> Result<Var> {
        let (c, h, w) = self.value(a).dims3()?;
        let hw = (h * w) as f64;
        let out = self
            .value(a)
            .data()
            .chunks(h * w)
            .map(|plane| plane.iter().sum::<f64>() / hw)
            .collect();
        let requires = self.needs(a);
        Ok(self.push(
            Tensor::new(vec![c, 1, 1], out)?,
            Op::GlobalAvgPool(a),
            requires,
        ))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let src = self.value(a);
        let value = Tensor {
            shape: src.shape.clone(),
            data: src.data.iter().map(|&v| sigmoid(v)).collect(),
        };
        let requires = self.needs(a);
        self.push(value, Op::Sigmoid(a), requires)
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let src = self.value(a);
        let value = Tensor {
            shape: src.shape.clone(),
            data: src.data.iter().map(|&v| v * factor).collect(),
        };
        let requires = self.needs(a);
        self.push(value, Op::Scale(a, factor), requires)
    }

    /// `out[c, y, x] = map[c, y, x] * gate[c]` for a constant `map` of shape
    /// `[C, H, W]` and a `[C, 1, 1]` gate node.
    pub fn channel_gate(&mut self, map: Tensor, gate: Var) -> Result<Var> {
        let (c, h, w) = map.dims3()?;
        if self.value(gate).len() != c {
            return Err(Error::shape(format!(
                "gate has {} channels, map has {c}",
                self.value(gate).len()
            )));
        }
        let g = self.value(gate).data();
        let mut out = map.data.clone();
        for (ch, plane) in out.chunks_mut(h * w).enumerate() {
            plane.iter_mut().for_each(|v| *v *= g[ch]);
        }
        let requires = self.needs(gate);
        let map = if self.track && requires {
            map.data
        } else {
            Vec::new()
        };
        Ok(self.push(
            Tensor::new(vec![c, h, w], out)?,
            Op::ChannelGate { map, gate },
            requires,
        ))
    }

    /// Softmax over consecutive channel groups of size `group` at every
    /// spatial position: channel `a * group + k` is class `k` of group `a`.
    pub fn group_softmax(&mut self, a: Var, group: usize) -> Result<Var> {
        let (c, h, w) = self.value(a).dims3()?;
        if group == 0 || c % group != 0 {
            return Err(Error::shape(format!(
                "{c} channels do not split into groups of {group}"
            )));
        }
        let hw = h * w;
        let src = self.value(a).data();
        let mut out = vec![0.0; src.len()];
        for g in 0..c / group {
            let base = g * group * hw;
            for p in 0..hw {
                let mut max = f64::NEG_INFINITY;
                for k in 0..group {
                    max = max.max(src[base + k * hw + p]);
                }
                let mut sum = 0.0;
                for k in 0..group {
                    let e = (src[base + k * hw + p] - max).exp();
                    out[base + k * hw + p] = e;
                    sum += e;
                }
                for k in 0..group {
                    out[base + k * hw + p] /= sum;
                }
            }
        }
        let requires = self.needs(a);
        Ok(self.push(
            Tensor::new(vec![c, h, w], out)?,
            Op::GroupSoftmax { x: a, group },
            requires,
        ))
    }

    /// Back-propagates the given output cotangents through the tape.
    ///
    /// `num_param_slots` sizes the returned parameter table; slots never
    /// reached stay `None`.
    pub fn backward(&self, seeds: &[(Var, &[f64])], num_param_slots: usize) -> Result<Gradients> {
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        for &(v, g) in seeds {
            if g.len() != self.value(v).len() {
                return Err(Error::shape(format!(
                    "seed gradient has {} elements, node has {}",
                    g.len(),
                    self.value(v).len()
                )));
            }
            if self.needs(v) {
                accumulate(&mut grads[v.0], g);
            }
        }
        let mut params: Vec<Option<Vec<f64>>> = vec![None; num_param_slots];

        for idx in (0..self.nodes.len()).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(gout) = grads[idx].take() else {
                continue;
            };
            match &node.op {
                Op::Input => {
                    grads[idx] = Some(gout);
                }
                Op::Param(slot) => {
                    let slot = *slot;
                    if slot >= params.len() {
                        return Err(Error::Layout(format!(
                            "parameter slot {slot} outside table of {}",
                            params.len()
                        )));
                    }
                    accumulate(&mut params[slot], &gout);
                    grads[idx] = Some(gout);
                }
                Op::Conv2d {
                    x,
                    w,
                    b,
                    stride,
                    pad,
                    cols,
                } => {
                    let cols = cols
                        .as_ref()
                        .expect("tracked conv keeps its im2col buffer");
                    let (c, h, wd) = self.value(*x).dims3()?;
                    let wshape = self.value(*w).shape();
                    let (cout, kh, kw) = (wshape[0], wshape[2], wshape[3]);
                    let (_, ho, wo) = node.value.dims3()?;
                    let k = c * kh * kw;
                    let n = ho * wo;
                    if self.needs(*w) {
                        let mut dw = vec![0.0; cout * k];
                        gemm(cout, n, k, &gout, false, cols, true, &mut dw, false);
                        accumulate(&mut grads[w.0], &dw);
                    }
                    if let Some(b) = b {
                        if self.needs(*b) {
                            let db: Vec<f64> = gout.chunks(n).map(|r| r.iter().sum()).collect();
                            accumulate(&mut grads[b.0], &db);
                        }
                    }
                    if self.needs(*x) {
                        let mut dcols = vec![0.0; k * n];
                        gemm(
                            k,
                            cout,
                            n,
                            self.value(*w).data(),
                            true,
                            &gout,
                            false,
                            &mut dcols,
                            false,
                        );
                        let mut dx = vec![0.0; c * h * wd];
                        col2im(&dcols, (c, h, wd), (kh, kw), *stride, *pad, (ho, wo), &mut dx);
                        accumulate(&mut grads[x.0], &dx);
                    }
                }
                Op::Add(a, b) => {
                    for v in [a, b] {
                        if self.needs(*v) {
                            accumulate(&mut grads[v.0], &gout);
                        }
                    }
                }
                Op::Relu(a) => {
                    if self.needs(*a) {
                        let d: Vec<f64> = gout
                            .iter()
                            .zip(node.value.data())
                            .map(|(g, &y)| if y > 0.0 { *g } else { 0.0 })
                            .collect();
                        accumulate(&mut grads[a.0], &d);
                    }
                }
                Op::Upsample2(a) => {
                    if self.needs(*a) {
                        let (c, h, w) = self.value(*a).dims3()?;
                        let (h2, w2) = (2 * h, 2 * w);
                        let mut d = vec![0.0; c * h * w];
                        for ch in 0..c {
                            for y in 0..h2 {
                                for x in 0..w2 {
                                    d[(ch * h + y / 2) * w + x / 2] += gout[(ch * h2 + y) * w2 + x];
                                }
                            }
                        }
                        accumulate(&mut grads[a.0], &d);
                    }
                }
                Op::GlobalAvgPool(a) => {
                    if self.needs(*a) {
                        let (c, h, w) = self.value(*a).dims3()?;
                        let hw = h * w;
                        let mut d = vec![0.0; c * hw];
                        for ch in 0..c {
                            let g = gout[ch] / hw as f64;
                            d[ch * hw..(ch + 1) * hw].iter_mut().for_each(|v| *v = g);
                        }
                        accumulate(&mut grads[a.0], &d);
                    }
                }
                Op::Sigmoid(a) => {
                    if self.needs(*a) {
                        let d: Vec<f64> = gout
                            .iter()
                            .zip(node.value.data())
                            .map(|(g, &s)| g * s * (1.0 - s))
                            .collect();
                        accumulate(&mut grads[a.0], &d);
                    }
                }
                Op::Scale(a, f) => {
                    if self.needs(*a) {
                        let d: Vec<f64> = gout.iter().map(|g| g * f).collect();
                        accumulate(&mut grads[a.0], &d);
                    }
                }
                Op::ChannelGate { map, gate } => {
                    if self.needs(*gate) {
                        let c = self.value(*gate).len();
                        let hw = map.len() / c;
                        let d: Vec<f64> = (0..c)
                            .map(|ch| {
                                map[ch * hw..(ch + 1) * hw]
                                    .iter()
                                    .zip(&gout[ch * hw..(ch + 1) * hw])
                                    .map(|(m, g)| m * g)
                                    .sum()
                            })
                            .collect();
                        accumulate(&mut grads[gate.0], &d);
                    }
                }
                Op::GroupSoftmax { x, group } => {
                    if self.needs(*x) {
                        let (c, h, w) = node.value.dims3()?;
                        let hw = h * w;
                        let p = node.value.data();
                        let mut d = vec![0.0; p.len()];
                        for g in 0..c / group {
                            let base = g * group * hw;
                            for pos in 0..hw {
                                let dot: f64 = (0..*group)
                                    .map(|k| p[base + k * hw + pos] * gout[base + k * hw + pos])
                                    .sum();
                                for k in 0..*group {
                                    let i = base + k * hw + pos;
                                    d[i] = p[i] * (gout[i] - dot);
                                }
                            }
                        }
                        accumulate(&mut grads[x.0], &d);
                    }
                }
            }
        }
        Ok(Gradients {
            params,
            nodes: grads,
        })
    }
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

fn accumulate(slot: &mut Option<Vec<f64>>, g: &[f64]) {
    match slot {
        Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
        None => *slot = Some(g.to_vec()),
    }
}

/// `C = op(A) * op(B)`, row-major, `op(A)` is `m x k` and `op(B)` is `k x n`.
/// With `accumulate` the product is added to `C`.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the asserts above pin every buffer to the extents implied by
    // (m, k, n) and the chosen strides, so all accesses stay in bounds.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn im2col(
    x: &[f64],
    (c, h, w): (usize, usize, usize),
    (kh, kw): (usize, usize),
    stride: usize,
    pad: usize,
    (ho, wo): (usize, usize),
    cols: &mut [f64],
) {
    let n = ho * wo;
    for ch in 0..c {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (ch * kh + ky) * kw + kx;
                let dst = &mut cols[row * n..(row + 1) * n];
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    let drow = &mut dst[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= h as isize {
                        drow.iter_mut().for_each(|v| *v = 0.0);
                        continue;
                    }
                    let src = &x[(ch * h + iy as usize) * w..(ch * h + iy as usize + 1) * w];
                    for (ox, d) in drow.iter_mut().enumerate() {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        *d = if ix < 0 || ix >= w as isize {
                            0.0
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im(
    cols: &[f64],
    (c, h, w): (usize, usize, usize),
    (kh, kw): (usize, usize),
    stride: usize,
    pad: usize,
    (ho, wo): (usize, usize),
    dx: &mut [f64],
) {
    let n = ho * wo;
    for ch in 0..c {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (ch * kh + ky) * kw + kx;
                let src = &cols[row * n..(row + 1) * n];
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let drow = &mut dx[(ch * h + iy as usize) * w..(ch * h + iy as usize + 1) * w];
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            drow[ix as usize] += src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}
