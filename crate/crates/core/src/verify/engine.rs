//! Dense per-sample tensor engine: forward pass, reverse-mode gradients and
//! single-layer forward-mode tangents.
//!
//! Tensors are flat `Vec<f64>` in channel-major (CHW) order. Convolutions are
//! naive direct loops.

use std::ops::Range;

use rand::Rng;

use crate::graph::{EdgeList, EdgeShape, GraphError, LayerInfo, NetworkGraph, OpKind};

#[derive(Debug, Clone, PartialEq)]
pub enum NodeKind {
    Conv { layer: usize, k: usize, stride: usize },
    Linear { layer: usize },
    AvgPool { k: usize, stride: usize },
    MaxPool { k: usize, stride: usize },
    Relu,
    Dropout { p: f64 },
    Scale(f64),
    Learnable(usize),
    Bias(usize),
    Residual { alpha: f64, beta: f64, main: Vec<Node>, shortcut: Vec<Node> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Node {
    pub kind: NodeKind,
    pub input: EdgeShape,
    pub output: EdgeShape,
    /// Weighted-layer indices owned by this node.
    pub layers: Range<usize>,
}

/// A graph compiled for execution, parameters resolved to indices.
#[derive(Debug, Clone, PartialEq)]
pub struct Program {
    pub input: EdgeShape,
    pub output: EdgeShape,
    pub nodes: Vec<Node>,
    pub layers: Vec<LayerInfo>,
    /// Channel count of each bias, depth-first.
    pub bias_channels: Vec<usize>,
    /// Initial value of each learnable scalar, depth-first.
    pub learnable_init: Vec<f64>,
    pub has_dropout: bool,
}

/// Weights, biases and learnable scalars (or gradients / tangents of them).
#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
    pub scalars: Vec<f64>,
}

impl Params {
    pub fn zeros_like(&self) -> Self {
        Self {
            weights: self.weights.iter().map(|w| vec![0.0; w.len()]).collect(),
            biases: self.biases.iter().map(|b| vec![0.0; b.len()]).collect(),
            scalars: vec![0.0; self.scalars.len()],
        }
    }

    pub fn fill_zero(&mut self) {
        self.weights.iter_mut().for_each(|w| w.fill(0.0));
        self.biases.iter_mut().for_each(|b| b.fill(0.0));
        self.scalars.fill(0.0);
    }
}

struct Counters {
    layer: usize,
    bias: usize,
    learnable: usize,
}

impl Program {
    pub fn compile(graph: &NetworkGraph) -> Result<Self, GraphError> {
        let shapes = graph.shapes()?;
        let mut counters = Counters { layer: 0, bias: 0, learnable: 0 };
        let mut program = Program {
            input: graph.input,
            output: *shapes.last(),
            nodes: Vec::new(),
            layers: graph.layers()?,
            bias_channels: Vec::new(),
            learnable_init: Vec::new(),
            has_dropout: false,
        };
        program.nodes = program.compile_list(&graph.ops, shapes, &mut counters);
        Ok(program)
    }

    fn compile_list(&mut self, ops: &[OpKind], shapes: &EdgeList<EdgeShape>, c: &mut Counters) -> Vec<Node> {
        let mut nodes = Vec::with_capacity(ops.len());
        for (i, op) in ops.iter().enumerate() {
            let (input, output) = (shapes.edges[i], shapes.edges[i + 1]);
            let start = c.layer;
            let kind = match op {
                OpKind::Conv { k, stride, .. } => {
                    c.layer += 1;
                    NodeKind::Conv { layer: start, k: *k, stride: *stride }
                }
                OpKind::Linear { .. } => {
                    c.layer += 1;
                    NodeKind::Linear { layer: start }
                }
                OpKind::AvgPool { k, stride } => NodeKind::AvgPool { k: *k, stride: *stride },
                OpKind::MaxPool { k, stride } => NodeKind::MaxPool { k: *k, stride: *stride },
                OpKind::Relu => NodeKind::Relu,
                OpKind::Dropout { p } => {
                    self.has_dropout |= *p > 0.0;
                    NodeKind::Dropout { p: *p }
                }
                OpKind::FixedScalar { value } => NodeKind::Scale(*value),
                OpKind::LearnableScalar { init } => {
                    self.learnable_init.push(*init);
                    c.learnable += 1;
                    NodeKind::Learnable(c.learnable - 1)
                }
                OpKind::BiasAdd => {
                    self.bias_channels.push(input.n);
                    c.bias += 1;
                    NodeKind::Bias(c.bias - 1)
                }
                OpKind::Residual(block) => {
                    let b = shapes.branches[i].as_ref().expect("residual op has branch shapes");
                    let main = self.compile_list(&block.main, &b.main, c);
                    let shortcut = self.compile_list(&block.shortcut, &b.shortcut, c);
                    NodeKind::Residual { alpha: block.alpha, beta: block.beta, main, shortcut }
                }
            };
            nodes.push(Node { kind, input, output, layers: start..c.layer });
        }
        nodes
    }

    /// Number of entries in each weight tensor.
    pub fn weight_len(&self, layer: usize) -> usize {
        self.layers[layer].param_count()
    }

    /// Parameters with zero weights, zero biases and initial scalars.
    pub fn zero_params(&self) -> Params {
        Params {
            weights: (0..self.layers.len()).map(|l| vec![0.0; self.weight_len(l)]).collect(),
            biases: self.bias_channels.iter().map(|&n| vec![0.0; n]).collect(),
            scalars: self.learnable_init.clone(),
        }
    }
}

/// Activations on every edge of one op list, plus per-op auxiliary data.
#[derive(Debug, Clone)]
pub struct Trace {
    pub acts: Vec<Vec<f64>>,
    pub subs: Vec<Option<Box<[Trace; 2]>>>,
    /// Dropout keep-mask (already scaled by `1/(1-p)`), per op.
    masks: Vec<Option<Vec<f64>>>,
    /// MaxPool argmax input index for each output, per op.
    argmax: Vec<Option<Vec<usize>>>,
}

impl Trace {
    pub fn output(&self) -> &[f64] {
        self.acts.last().expect("trace has an input edge")
    }
}

fn pad_before(input: usize, output: usize, k: usize, stride: usize) -> isize {
    ((output as isize - 1) * stride as isize + k as isize - input as isize) / 2
}

/// Window geometry shared by conv and pooling.
#[derive(Clone, Copy)]
struct Window {
    k: usize,
    stride: usize,
    pad_h: isize,
    pad_w: isize,
    inp: EdgeShape,
    out: EdgeShape,
}

impl Window {
    fn new(k: usize, stride: usize, inp: EdgeShape, out: EdgeShape) -> Self {
        Self {
            k,
            stride,
            pad_h: pad_before(inp.h, out.h, k, stride),
            pad_w: pad_before(inp.w, out.w, k, stride),
            inp,
            out,
        }
    }

    /// Input row/column for output position `o` and kernel offset `d`.
    #[inline]
    fn src(&self, o: usize, d: usize, pad: isize, size: usize) -> Option<usize> {
        let v = (o * self.stride + d) as isize - pad;
        (v >= 0 && (v as usize) < size).then_some(v as usize)
    }
}

/// Patch matrix: row `p` holds the receptive field of output position `p`
/// in weight order `(i, ky, kx)`, zeros where the window leaves the input.
fn im2col(x: &[f64], win: Window) -> Vec<f64> {
    let (ni, k) = (win.inp.n, win.k);
    let (ih, iw, oh, ow) = (win.inp.h, win.inp.w, win.out.h, win.out.w);
    let len = ni * k * k;
    let mut cols = vec![0.0; oh * ow * len];
    for oy in 0..oh {
        for ox in 0..ow {
            let row = &mut cols[(oy * ow + ox) * len..][..len];
            for ky in 0..k {
                let Some(sy) = win.src(oy, ky, win.pad_h, ih) else { continue };
                for kx in 0..k {
                    let Some(sx) = win.src(ox, kx, win.pad_w, iw) else { continue };
                    for i in 0..ni {
                        row[(i * k + ky) * k + kx] = x[(i * ih + sy) * iw + sx];
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`], accumulating into `gx`.
fn col2im(cols: &[f64], win: Window, gx: &mut [f64]) {
    let (ni, k) = (win.inp.n, win.k);
    let (ih, iw, oh, ow) = (win.inp.h, win.inp.w, win.out.h, win.out.w);
    let len = ni * k * k;
    for oy in 0..oh {
        for ox in 0..ow {
            let row = &cols[(oy * ow + ox) * len..][..len];
            for ky in 0..k {
                let Some(sy) = win.src(oy, ky, win.pad_h, ih) else { continue };
                for kx in 0..k {
                    let Some(sx) = win.src(ox, kx, win.pad_w, iw) else { continue };
                    for i in 0..ni {
                        gx[(i * ih + sy) * iw + sx] += row[(i * k + ky) * k + kx];
                    }
                }
            }
        }
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for j in 0..4 {
            acc[j] += x[j] * y[j];
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

fn conv_forward(x: &[f64], w: &[f64], win: Window) -> Vec<f64> {
    let cols = im2col(x, win);
    let len = win.inp.n * win.k * win.k;
    let positions = win.out.area();
    let mut y = vec![0.0; win.out.n * positions];
    for (o, yo) in y.chunks_exact_mut(positions).enumerate() {
        let wo = &w[o * len..][..len];
        for (p, v) in yo.iter_mut().enumerate() {
            *v = dot(wo, &cols[p * len..][..len]);
        }
    }
    y
}

/// Accumulates `∂L/∂x` into `gx` and `∂L/∂W` into `gw` (either may be skipped).
fn conv_backward(x: &[f64], w: &[f64], gy: &[f64], win: Window, gx: Option<&mut [f64]>, mut gw: Option<&mut [f64]>) {
    let len = win.inp.n * win.k * win.k;
    let positions = win.out.area();
    let cols = gw.is_some().then(|| im2col(x, win));
    let mut gcols = gx.is_some().then(|| vec![0.0; positions * len]);
    for (o, go) in gy.chunks_exact(positions).enumerate() {
        let wo = &w[o * len..][..len];
        for (p, &g) in go.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            if let (Some(gw), Some(cols)) = (gw.as_deref_mut(), &cols) {
                axpy(g, &cols[p * len..][..len], &mut gw[o * len..][..len]);
            }
            if let Some(gc) = gcols.as_mut() {
                axpy(g, wo, &mut gc[p * len..][..len]);
            }
        }
    }
    if let (Some(gx), Some(gc)) = (gx, gcols) {
        col2im(&gc, win, gx);
    }
}

fn linear_forward(x: &[f64], w: &[f64], out: usize) -> Vec<f64> {
    let n = x.len();
    (0..out).map(|o| dot(&w[o * n..(o + 1) * n], x)).collect()
}

fn linear_backward(x: &[f64], w: &[f64], gy: &[f64], gx: Option<&mut [f64]>, gw: Option<&mut [f64]>) {
    let n = x.len();
    if let Some(gx) = gx {
        for (o, g) in gy.iter().enumerate() {
            for (gxi, wi) in gx.iter_mut().zip(&w[o * n..(o + 1) * n]) {
                *gxi += g * wi;
            }
        }
    }
    if let Some(gw) = gw {
        for (o, g) in gy.iter().enumerate() {
            for (gwi, xi) in gw[o * n..(o + 1) * n].iter_mut().zip(x) {
                *gwi += g * xi;
            }
        }
    }
}

fn avgpool_forward(x: &[f64], win: Window) -> Vec<f64> {
    let (n, k) = (win.inp.n, win.k);
    let (ih, iw, oh, ow) = (win.inp.h, win.inp.w, win.out.h, win.out.w);
    let scale = 1.0 / (k * k) as f64;
    let mut y = vec![0.0; n * oh * ow];
    for c in 0..n {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = 0.0;
                for ky in 0..k {
                    let Some(sy) = win.src(oy, ky, win.pad_h, ih) else { continue };
                    for kx in 0..k {
                        let Some(sx) = win.src(ox, kx, win.pad_w, iw) else { continue };
                        acc += x[(c * ih + sy) * iw + sx];
                    }
                }
                y[(c * oh + oy) * ow + ox] = acc * scale;
            }
        }
    }
    y
}

fn avgpool_backward(gy: &[f64], win: Window) -> Vec<f64> {
    let (n, k) = (win.inp.n, win.k);
    let (ih, iw, oh, ow) = (win.inp.h, win.inp.w, win.out.h, win.out.w);
    let scale = 1.0 / (k * k) as f64;
    let mut gx = vec![0.0; n * ih * iw];
    for c in 0..n {
        for oy in 0..oh {
            for ox in 0..ow {
                let g = gy[(c * oh + oy) * ow + ox] * scale;
                for ky in 0..k {
                    let Some(sy) = win.src(oy, ky, win.pad_h, ih) else { continue };
                    for kx in 0..k {
                        let Some(sx) = win.src(ox, kx, win.pad_w, iw) else { continue };
                        gx[(c * ih + sy) * iw + sx] += g;
                    }
                }
            }
        }
    }
    gx
}

/// Max over each window (padding never wins), with the winning input index.
fn maxpool_forward(x: &[f64], win: Window) -> (Vec<f64>, Vec<usize>) {
    let (n, k) = (win.inp.n, win.k);
    let (ih, iw, oh, ow) = (win.inp.h, win.inp.w, win.out.h, win.out.w);
    let mut y = vec![0.0; n * oh * ow];
    let mut arg = vec![0; n * oh * ow];
    for c in 0..n {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = (f64::NEG_INFINITY, 0);
                for ky in 0..k {
                    let Some(sy) = win.src(oy, ky, win.pad_h, ih) else { continue };
                    for kx in 0..k {
                        let Some(sx) = win.src(ox, kx, win.pad_w, iw) else { continue };
                        let idx = (c * ih + sy) * iw + sx;
                        if x[idx] > best.0 {
                            best = (x[idx], idx);
                        }
                    }
                }
                let o = (c * oh + oy) * ow + ox;
                y[o] = best.0;
                arg[o] = best.1;
            }
        }
    }
    (y, arg)
}

fn add_bias(x: &mut [f64], b: &[f64], shape: EdgeShape) {
    let area = shape.area();
    for (c, bc) in b.iter().enumerate() {
        x[c * area..(c + 1) * area].iter_mut().for_each(|v| *v += bc);
    }
}

/// Run one sample. `dropout` supplies randomness for dropout ops; without it
/// dropout is the identity.
pub fn forward(program: &Program, params: &Params, x: &[f64], dropout: Option<&mut dyn rand::RngCore>) -> Trace {
    assert_eq!(x.len(), program.input.numel(), "input size does not match the network input");
    let mut dropout = dropout;
    forward_list(&program.nodes, params, x.to_vec(), &mut dropout)
}

fn forward_list(nodes: &[Node], params: &Params, x: Vec<f64>, dropout: &mut Option<&mut dyn rand::RngCore>) -> Trace {
    let mut trace = Trace {
        acts: Vec::with_capacity(nodes.len() + 1),
        subs: Vec::with_capacity(nodes.len()),
        masks: Vec::with_capacity(nodes.len()),
        argmax: Vec::with_capacity(nodes.len()),
    };
    trace.acts.push(x);
    for node in nodes {
        let x = trace.acts.last().expect("trace has an input edge");
        let (mut sub, mut mask, mut arg) = (None, None, None);
        let y = match &node.kind {
            NodeKind::Conv { layer, k, stride } => conv_forward(x, &params.weights[*layer], Window::new(*k, *stride, node.input, node.output)),
            NodeKind::Linear { layer } => linear_forward(x, &params.weights[*layer], node.output.n),
            NodeKind::AvgPool { k, stride } => avgpool_forward(x, Window::new(*k, *stride, node.input, node.output)),
            NodeKind::MaxPool { k, stride } => {
                let (y, a) = maxpool_forward(x, Window::new(*k, *stride, node.input, node.output));
                arg = Some(a);
                y
            }
            NodeKind::Relu => x.iter().map(|v| v.max(0.0)).collect(),
            NodeKind::Dropout { p } => match dropout.as_deref_mut() {
                Some(rng) if *p > 0.0 => {
                    let keep = 1.0 / (1.0 - p);
                    let m: Vec<f64> = (0..x.len()).map(|_| if rng.random::<f64>() < *p { 0.0 } else { keep }).collect();
                    let y = x.iter().zip(&m).map(|(a, b)| a * b).collect();
                    mask = Some(m);
                    y
                }
                _ => x.clone(),
            },
            NodeKind::Scale(u) => x.iter().map(|v| v * u).collect(),
            NodeKind::Learnable(i) => x.iter().map(|v| v * params.scalars[*i]).collect(),
            NodeKind::Bias(i) => {
                let mut y = x.clone();
                add_bias(&mut y, &params.biases[*i], node.input);
                y
            }
            NodeKind::Residual { alpha, beta, main, shortcut } => {
                let f = forward_list(main, params, x.clone(), dropout);
                let s = forward_list(shortcut, params, x.clone(), dropout);
                let y = f.output().iter().zip(s.output()).map(|(a, b)| beta * a + alpha * b).collect();
                sub = Some(Box::new([f, s]));
                y
            }
        };
        trace.acts.push(y);
        trace.subs.push(sub);
        trace.masks.push(mask);
        trace.argmax.push(arg);
    }
    trace
}

/// What a backward pass must produce.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Request {
    /// Return the gradient with respect to the network input.
    pub input: bool,
    /// Only accumulate this layer's weight gradient; biases and scalars are
    /// skipped and the pass stops once the layer is reached.
    pub only_layer: Option<usize>,
    /// Accumulate parameter gradients at all.
    pub params: bool,
}

impl Request {
    pub const ALL: Request = Request { input: true, only_layer: None, params: true };
    /// Edge gradients only.
    pub const EDGES: Request = Request { input: true, only_layer: None, params: false };

    pub fn layer(l: usize) -> Self {
        Request { input: false, only_layer: Some(l), params: true }
    }
}

/// Per-edge sums of mean-squared gradients, laid out like the graph edges.
pub type EdgeSums = EdgeList<f64>;

/// Reverse pass from `grad_out` at the output. Parameter gradients are added
/// to `grads`; `sums`, when given, receives the mean square of the gradient on
/// every edge reached.
pub fn backward(
    program: &Program,
    params: &Params,
    trace: &Trace,
    grad_out: Vec<f64>,
    req: Request,
    grads: &mut Params,
    sums: Option<&mut EdgeSums>,
) -> Option<Vec<f64>> {
    let mut sums = sums;
    backward_list(&program.nodes, params, trace, grad_out, req, req.input, grads, &mut sums)
}

fn mean_square(v: &[f64]) -> f64 {
    dot(v, v) / v.len() as f64
}

#[allow(clippy::too_many_arguments)]
fn backward_list(
    nodes: &[Node],
    params: &Params,
    trace: &Trace,
    grad_out: Vec<f64>,
    req: Request,
    need_input: bool,
    grads: &mut Params,
    sums: &mut Option<&mut EdgeSums>,
) -> Option<Vec<f64>> {
    let mut g = grad_out;
    if let Some(s) = sums.as_deref_mut() {
        s.edges[nodes.len()] += mean_square(&g);
    }
    for (j, node) in nodes.iter().enumerate().rev() {
        let (needs_in, contains) = match req.only_layer {
            Some(l) => (need_input || l < node.layers.start, node.layers.contains(&l)),
            None => (true, req.params),
        };
        let needs_in = needs_in || need_input;
        if !needs_in && !contains {
            return None;
        }
        let x = &trace.acts[j];
        let full = req.only_layer.is_none() && req.params;
        let gx = match &node.kind {
            NodeKind::Conv { layer, k, stride } => {
                let win = Window::new(*k, *stride, node.input, node.output);
                let mut gx = needs_in.then(|| vec![0.0; x.len()]);
                let gw = contains.then(|| grads.weights[*layer].as_mut_slice());
                conv_backward(x, &params.weights[*layer], &g, win, gx.as_deref_mut(), gw);
                gx
            }
            NodeKind::Linear { layer } => {
                let mut gx = needs_in.then(|| vec![0.0; x.len()]);
                let gw = contains.then(|| grads.weights[*layer].as_mut_slice());
                linear_backward(x, &params.weights[*layer], &g, gx.as_deref_mut(), gw);
                gx
            }
            NodeKind::AvgPool { k, stride } => Some(avgpool_backward(&g, Window::new(*k, *stride, node.input, node.output))),
            NodeKind::MaxPool { .. } => {
                let arg = trace.argmax[j].as_ref().expect("maxpool records argmax");
                let mut gx = vec![0.0; x.len()];
                for (gi, &a) in g.iter().zip(arg) {
                    gx[a] += gi;
                }
                Some(gx)
            }
            NodeKind::Relu => Some(x.iter().zip(&g).map(|(xi, gi)| if *xi > 0.0 { *gi } else { 0.0 }).collect()),
            NodeKind::Dropout { .. } => Some(match &trace.masks[j] {
                Some(m) => g.iter().zip(m).map(|(a, b)| a * b).collect(),
                None => g,
            }),
            NodeKind::Scale(u) => Some(g.iter().map(|v| v * u).collect()),
            NodeKind::Learnable(i) => {
                if full {
                    grads.scalars[*i] += dot(x, &g);
                }
                Some(g.iter().map(|v| v * params.scalars[*i]).collect())
            }
            NodeKind::Bias(i) => {
                if full {
                    let area = node.input.area();
                    for (c, gb) in grads.biases[*i].iter_mut().enumerate() {
                        *gb += g[c * area..(c + 1) * area].iter().sum::<f64>();
                    }
                }
                Some(g)
            }
            NodeKind::Residual { alpha, beta, main, shortcut } => {
                let subs = trace.subs[j].as_ref().expect("residual records branches");
                let branch_need = needs_in;
                let mut sub_sums = sums.as_deref_mut().map(|s| s.branches[j].as_mut().expect("residual has branch sums"));
                let gm: Vec<f64> = g.iter().map(|v| v * beta).collect();
                let gs: Vec<f64> = g.iter().map(|v| v * alpha).collect();
                let mut ms = sub_sums.as_deref_mut().map(|b| &mut b.main);
                let a = backward_list(main, params, &subs[0], gm, req, branch_need, grads, &mut ms);
                let mut ss = sub_sums.map(|b| &mut b.shortcut);
                let b = backward_list(shortcut, params, &subs[1], gs, req, branch_need, grads, &mut ss);
                match (a, b) {
                    (Some(a), Some(b)) => Some(a.iter().zip(&b).map(|(p, q)| p + q).collect()),
                    _ => None,
                }
            }
        };
        match gx {
            Some(gx) if needs_in => {
                g = gx;
                if let Some(s) = sums.as_deref_mut() {
                    s.edges[j] += mean_square(&g);
                }
            }
            _ => return None,
        }
    }
    Some(g)
}

/// Output tangent for a weight perturbation `dir` on one layer, with the
/// network held at the activation pattern recorded in `trace`. Dropout acts
/// as the identity here.
pub fn jvp_layer(program: &Program, params: &Params, trace: &Trace, layer: usize, dir: &[f64]) -> Vec<f64> {
    jvp_list(&program.nodes, params, trace, None, layer, dir).unwrap_or_else(|| vec![0.0; program.output.numel()])
}

fn jvp_list(nodes: &[Node], params: &Params, trace: &Trace, t_in: Option<Vec<f64>>, layer: usize, dir: &[f64]) -> Option<Vec<f64>> {
    let mut t = t_in;
    for (j, node) in nodes.iter().enumerate() {
        if t.is_none() && !node.layers.contains(&layer) {
            continue;
        }
        let x = &trace.acts[j];
        t = match &node.kind {
            NodeKind::Conv { layer: l, k, stride } => {
                let win = Window::new(*k, *stride, node.input, node.output);
                let mut out = match &t {
                    Some(t) => conv_forward(t, &params.weights[*l], win),
                    None => vec![0.0; node.output.numel()],
                };
                if *l == layer {
                    let d = conv_forward(x, dir, win);
                    out.iter_mut().zip(d).for_each(|(a, b)| *a += b);
                }
                Some(out)
            }
            NodeKind::Linear { layer: l } => {
                let mut out = match &t {
                    Some(t) => linear_forward(t, &params.weights[*l], node.output.n),
                    None => vec![0.0; node.output.n],
                };
                if *l == layer {
                    let d = linear_forward(x, dir, node.output.n);
                    out.iter_mut().zip(d).for_each(|(a, b)| *a += b);
                }
                Some(out)
            }
            NodeKind::AvgPool { k, stride } => t.map(|t| avgpool_forward(&t, Window::new(*k, *stride, node.input, node.output))),
            NodeKind::MaxPool { .. } => {
                let arg = trace.argmax[j].as_ref().expect("maxpool records argmax");
                t.map(|t| arg.iter().map(|&a| t[a]).collect())
            }
            NodeKind::Relu => t.map(|t| t.iter().zip(x).map(|(ti, xi)| if *xi > 0.0 { *ti } else { 0.0 }).collect()),
            NodeKind::Dropout { .. } | NodeKind::Bias(_) => t,
            NodeKind::Scale(u) => t.map(|t| t.iter().map(|v| v * u).collect()),
            NodeKind::Learnable(i) => t.map(|t| t.iter().map(|v| v * params.scalars[*i]).collect()),
            NodeKind::Residual { alpha, beta, main, shortcut } => {
                let subs = trace.subs[j].as_ref().expect("residual records branches");
                let f = jvp_list(main, params, &subs[0], t.clone(), layer, dir);
                let s = jvp_list(shortcut, params, &subs[1], t, layer, dir);
                match (f, s) {
                    (None, None) => None,
                    (f, s) => {
                        let n = node.output.numel();
                        let f = f.unwrap_or_else(|| vec![0.0; n]);
                        let s = s.unwrap_or_else(|| vec![0.0; n]);
                        Some(f.iter().zip(&s).map(|(a, b)| beta * a + alpha * b).collect())
                    }
                }
            }
        };
    }
    t
}

/// Add the mean square of every activation in `trace` to `sums`.
pub fn accumulate_forward(trace: &Trace, sums: &mut EdgeSums) {
    for (s, a) in sums.edges.iter_mut().zip(&trace.acts) {
        *s += mean_square(a);
    }
    for (b, sub) in sums.branches.iter_mut().zip(&trace.subs) {
        if let (Some(b), Some(sub)) = (b.as_mut(), sub.as_ref()) {
            accumulate_forward(&sub[0], &mut b.main);
            accumulate_forward(&sub[1], &mut b.shortcut);
        }
    }
}

/// Sample standard normals into a fresh vector.
pub fn normal_vec(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(rand_distr::StandardNormal)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::infer_shapes;

    fn program(input: EdgeShape, ops: Vec<OpKind>) -> Program {
        Program::compile(&infer_shapes(&NetworkGraph::new(input, ops)).unwrap()).unwrap()
    }

    #[test]
    fn identity_scalar_net() {
        let p = program(EdgeShape::square(2, 2), vec![OpKind::FixedScalar { value: 1.0 }]);
        let x = vec![1.0, -2.0, 3.0, 0.5, 0.0, 1.0, 2.0, -1.0];
        assert_eq!(forward(&p, &p.zero_params(), &x, None).output(), x.as_slice());
    }

    #[test]
    fn one_by_one_conv_multiplies() {
        let p = program(EdgeShape::square(1, 1), vec![OpKind::Conv { out: 1, k: 1, stride: 1 }]);
        let mut params = p.zero_params();
        params.weights[0] = vec![2.0];
        assert_eq!(forward(&p, &params, &[3.0], None).output(), &[6.0]);
    }

    #[test]
    fn same_padding_for_stride_one() {
        assert_eq!(pad_before(8, 8, 3, 1), 1);
        assert_eq!(pad_before(8, 4, 2, 2), 0);
        assert_eq!(pad_before(8, 8, 1, 1), 0);
        // 3x3 all-ones kernel on a 3x3 all-ones image: corner sees 4 pixels, centre 9.
        let p = program(EdgeShape::square(1, 3), vec![OpKind::Conv { out: 1, k: 3, stride: 1 }]);
        let mut params = p.zero_params();
        params.weights[0] = vec![1.0; 9];
        let y = forward(&p, &params, &[1.0; 9], None);
        assert_eq!(y.output(), &[4.0, 6.0, 4.0, 6.0, 9.0, 6.0, 4.0, 6.0, 4.0]);
    }

    #[test]
    fn avgpool_and_maxpool() {
        let x: Vec<f64> = (0..16).map(|v| v as f64).collect();
        let p = program(EdgeShape::square(1, 4), vec![OpKind::AvgPool { k: 2, stride: 2 }]);
        assert_eq!(forward(&p, &p.zero_params(), &x, None).output(), &[2.5, 4.5, 10.5, 12.5]);
        let p = program(EdgeShape::square(1, 4), vec![OpKind::MaxPool { k: 2, stride: 2 }]);
        assert_eq!(forward(&p, &p.zero_params(), &x, None).output(), &[5.0, 7.0, 13.0, 15.0]);
    }

    #[test]
    fn residual_combines_branches() {
        let block = crate::graph::ResidualBlock::new(0.6, 0.8, vec![OpKind::FixedScalar { value: 2.0 }], vec![]).unwrap();
        let p = program(EdgeShape::square(1, 1), vec![OpKind::Residual(block)]);
        let y = forward(&p, &p.zero_params(), &[1.0], None);
        assert!((y.output()[0] - (0.8 * 2.0 + 0.6)).abs() < 1e-15);
    }

    #[test]
    fn layer_only_backward_matches_full() {
        let p = program(
            EdgeShape::square(2, 4),
            vec![
                OpKind::Conv { out: 3, k: 2, stride: 2 },
                OpKind::Relu,
                OpKind::BiasAdd,
                OpKind::Linear { out: 2 },
            ],
        );
        let mut params = p.zero_params();
        let mut rng = rand_chacha::ChaCha8Rng::from_seed([7; 32]);
        for w in &mut params.weights {
            *w = normal_vec(&mut rng, w.len());
        }
        let x = normal_vec(&mut rng, 32);
        let trace = forward(&p, &params, &x, None);
        let mut full = params.zeros_like();
        backward(&p, &params, &trace, vec![1.0, -0.5], Request::ALL, &mut full, None).unwrap();
        let mut part = params.zeros_like();
        assert!(backward(&p, &params, &trace, vec![1.0, -0.5], Request::layer(0), &mut part, None).is_none());
        assert_eq!(full.weights[0], part.weights[0]);
        assert!(part.weights[1].iter().all(|v| *v == 0.0));
    }

    use rand::SeedableRng;
}
