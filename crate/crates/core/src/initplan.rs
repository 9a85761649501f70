//! Initialization schemes and corrective scalars.
//!
//! [`plan`] turns a graph into a planned network: per-layer weight second
//! moments plus inserted fixed scalars. Under the geometric scheme the planned
//! network has one `γ` for every weighted layer and learnable scalar and one
//! `γ_b` for every bias, which the tests check by re-propagating moments.

use std::collections::{BTreeMap, VecDeque};
use std::fmt;

use serde::Serialize;
use serde_json::{json, Value};
use thiserror::Error;

use crate::graph::{
    infer_shapes, op_output_shape, to_document, EdgeShape, GraphError, NetworkGraph, OpKind, OpPath, ResidualBlock, Step,
};
use crate::moments::{forward_moments, op_transfer, MomentError, MomentPair, MomentTape};

/// Default output standard deviation for the output-norm scalar.
pub const DEFAULT_TARGET_STD: f64 = 0.05;

/// Scalars whose value is within this of 1 are not inserted.
const UNIT_TOL: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PlanError {
    #[error("network has no conv or linear layers")]
    NoWeightedLayers,
    #[error("geometric constant c must be resolved before computing second moments")]
    UnresolvedC,
    #[error("{what} must be positive and finite, got {value}")]
    NonPositive { what: &'static str, value: f64 },
    #[error("residual rewrite: {0}")]
    Rewrite(String),
    #[error("plan has no output-norm scalar")]
    NoOutputNorm,
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Moments(#[from] MomentError),
}

fn positive(what: &'static str, value: f64) -> Result<f64, PlanError> {
    if value.is_finite() && value > 0.0 {
        Ok(value)
    } else {
        Err(PlanError::NonPositive { what, value })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Scheme {
    FanIn,
    FanOut,
    /// Arithmetic mean of fan-in and fan-out (the CLI's `xavier`).
    Arithmetic,
    /// `c = None` resolves to [`choose_c`].
    Geometric { c: Option<f64> },
}

impl Scheme {
    pub fn name(&self) -> &'static str {
        match self {
            Scheme::FanIn => "fan-in",
            Scheme::FanOut => "fan-out",
            Scheme::Arithmetic => "arithmetic",
            Scheme::Geometric { .. } => "geometric",
        }
    }

    pub fn is_geometric(&self) -> bool {
        matches!(self, Scheme::Geometric { .. })
    }

    /// Replace an automatic `c` by the graph's `2/k_typ`.
    pub fn resolve(self, graph: &NetworkGraph) -> Result<Self, PlanError> {
        Ok(match self {
            Scheme::Geometric { c: None } => Scheme::Geometric { c: Some(choose_c(graph)?) },
            Scheme::Geometric { c: Some(c) } => Scheme::Geometric { c: Some(positive("c", c)?) },
            s => s,
        })
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl Serialize for Scheme {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(self.name())
    }
}

/// `E[W²]` for a layer with `n_in` inputs, `n_out` outputs and a `k×k` kernel.
pub fn init_second_moment(scheme: Scheme, n_in: usize, n_out: usize, k: usize) -> Result<f64, PlanError> {
    let (n_in, n_out, k) = (n_in as f64, n_out as f64, k as f64);
    Ok(match scheme {
        Scheme::FanIn => 2.0 / (n_in * k * k),
        Scheme::FanOut => 2.0 / (n_out * k * k),
        Scheme::Arithmetic => 4.0 / ((n_in + n_out) * k * k),
        Scheme::Geometric { c: Some(c) } => c / (k * (n_in * n_out).sqrt()),
        Scheme::Geometric { c: None } => return Err(PlanError::UnresolvedC),
    })
}

fn all_kernels(ops: &[OpKind], out: &mut Vec<usize>) {
    for op in ops {
        match op {
            OpKind::Residual(b) => {
                all_kernels(&b.main, out);
                all_kernels(&b.shortcut, out);
            }
            op => out.extend(op.kernel()),
        }
    }
}

/// Most common kernel size among weighted layers, ties going to the smaller.
pub fn typical_kernel(graph: &NetworkGraph) -> Result<usize, PlanError> {
    let mut kernels = Vec::new();
    all_kernels(&graph.ops, &mut kernels);
    let mut counts = BTreeMap::new();
    for k in kernels {
        *counts.entry(k).or_insert(0usize) += 1;
    }
    let mut best: Option<(usize, usize)> = None;
    for (k, n) in counts {
        if best.is_none_or(|(_, m)| n > m) {
            best = Some((k, n));
        }
    }
    best.map(|(k, _)| k).ok_or(PlanError::NoWeightedLayers)
}

/// `c = 2/k_typ`.
pub fn choose_c(graph: &NetworkGraph) -> Result<f64, PlanError> {
    Ok(2.0 / typical_kernel(graph)? as f64)
}

/// `√(k_typ/k)`, the fixed scalar placed before a `k×k` layer in a network
/// planned with `c = 2/k_typ`.
pub fn kernel_correction(k: usize, k_typ: usize) -> f64 {
    (k_typ as f64 / k as f64).sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct InputScale {
    /// `E[x_0²] = 1/√(n_0·k_0²)` at the first layer's input.
    pub target_m2: f64,
    /// `(n_0·k_0²)^(-1/4)` for unit-second-moment data.
    pub forward_scalar: f64,
}

pub fn input_scale_plan(n0: usize, k0: usize) -> InputScale {
    let fan = (n0 * k0 * k0) as f64;
    InputScale {
        target_m2: 1.0 / fan.sqrt(),
        forward_scalar: fan.powf(-0.25),
    }
}

/// Output scalar giving the network output the standard deviation `target_std`.
pub fn output_norm_plan(tape: &MomentTape, target_std: f64) -> Result<f64, PlanError> {
    output_norm_scalar(tape.output().fwd, target_std)
}

pub fn output_norm_scalar(predicted_m2: f64, target_std: f64) -> Result<f64, PlanError> {
    positive("predicted output second moment", predicted_m2)?;
    positive("target std", target_std)?;
    Ok(target_std / predicted_m2.sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Reason {
    KernelCorrection,
    InputScale,
    OutputNorm,
    ResidualRecipe,
    /// A pair `a`, `1/a` around a bias that no layer correction reaches.
    BiasBalance,
}

impl Reason {
    pub fn code(&self) -> &'static str {
        match self {
            Reason::KernelCorrection => "kernel-correction",
            Reason::InputScale => "input-scale",
            Reason::OutputNorm => "output-norm",
            Reason::ResidualRecipe => "residual-recipe",
            Reason::BiasBalance => "bias-balance",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Distribution {
    #[default]
    Gaussian,
    /// Symmetric uniform with half-width `√(3·E[W²])`.
    Uniform,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerPlan {
    pub index: usize,
    pub path: String,
    pub kind: &'static str,
    pub scheme: Scheme,
    pub fan_in: usize,
    pub fan_out: usize,
    pub k: usize,
    /// Geometric numerator actually used (`c` scaled inside residual branches).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub numerator: Option<f64>,
    pub second_moment: f64,
    pub distribution: Distribution,
}

impl LayerPlan {
    pub fn std(&self) -> f64 {
        self.second_moment.sqrt()
    }

    pub fn half_width(&self) -> f64 {
        (3.0 * self.second_moment).sqrt()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InsertedScalar {
    pub position: String,
    pub value: f64,
    pub reason: Reason,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LearnablePlan {
    pub position: String,
    pub init: f64,
}

/// How recognized bottleneck residual blocks are rewritten.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Recipe {
    /// Correction values computed so every bias and weight balances exactly.
    #[default]
    Balanced,
    /// The fixed reference constants, with unit outer `c`.
    Printed,
    /// Leave residual blocks as given.
    Off,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlanOptions {
    pub input_scale: bool,
    /// Target output standard deviation; `None` skips the output scalar.
    pub output_norm: Option<f64>,
    pub recipe: Recipe,
    pub distribution: Distribution,
}

impl Default for PlanOptions {
    fn default() -> Self {
        Self {
            input_scale: true,
            output_norm: Some(DEFAULT_TARGET_STD),
            recipe: Recipe::Balanced,
            distribution: Distribution::Gaussian,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InitPlan {
    /// Resolved scheme.
    pub scheme: Scheme,
    pub source: NetworkGraph,
    /// The planned network, shapes inferred.
    pub network: NetworkGraph,
    /// `E[W²]` for every weighted layer of `network`, depth-first.
    pub weights: Vec<f64>,
    pub layers: Vec<LayerPlan>,
    pub scalars: Vec<InsertedScalar>,
    pub learnable: Vec<LearnablePlan>,
    pub input_scale: Option<InputScale>,
    /// `n·E[x²]²/s` shared by every bias edge (geometric plans only).
    pub k_star: Option<f64>,
    /// Output second moment for unit-second-moment data, before the output scalar.
    pub output_m2_before_norm: f64,
    pub predicted_output_m2: f64,
    pub notes: Vec<String>,
}

impl InitPlan {
    pub fn c(&self) -> Option<f64> {
        match self.scheme {
            Scheme::Geometric { c } => c,
            _ => None,
        }
    }

    /// Multiply the output-norm scalar by `factor`, e.g. after measuring the
    /// output of the planned network on real data.
    pub fn rescale_output_norm(&mut self, factor: f64) -> Result<(), PlanError> {
        positive("output scale factor", factor)?;
        let record = self.scalars.iter_mut().rfind(|s| s.reason == Reason::OutputNorm);
        let (Some(record), Some(OpKind::FixedScalar { value })) = (record, self.network.ops.last_mut()) else {
            return Err(PlanError::NoOutputNorm);
        };
        *value *= factor;
        record.value = *value;
        self.predicted_output_m2 *= factor * factor;
        Ok(())
    }

    pub fn to_json(&self) -> Value {
        json!({
            "scheme": self.scheme,
            "c": self.c(),
            "layers": self.layers,
            "scalars": self.scalars,
            "learnable": self.learnable,
            "input_scale": self.input_scale,
            "k_star": self.k_star,
            "output_m2_before_norm": self.output_m2_before_norm,
            "predicted_output_m2": self.predicted_output_m2,
            "notes": self.notes,
            "source": to_document(&self.source, None),
            "network": to_document(&self.network, Some(&self.weights)),
        })
    }
}

/// Dimensions of a recognized bottleneck block: `n → w → w → m`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Bottleneck {
    pub n: usize,
    pub m: usize,
    pub w: usize,
    pub downsample: bool,
}

/// A residual block whose main-branch weighted layers are convs with kernels
/// 1, 3, 1 and whose resolution is kept or halved.
pub fn recognize_bottleneck(block: &ResidualBlock, input: EdgeShape) -> Result<Option<Bottleneck>, PlanError> {
    let g = infer_shapes(&NetworkGraph::new(input, vec![OpKind::Residual(block.clone())]))?;
    let out = g.output_shape()?;
    let mut convs = Vec::new();
    for op in &block.main {
        match op {
            OpKind::Conv { out, k, .. } => convs.push((*k, *out)),
            OpKind::Linear { .. } | OpKind::Residual(_) => return Ok(None),
            _ => {}
        }
    }
    if convs.len() != 3 || convs.iter().map(|c| c.0).ne([1, 3, 1]) || convs[1].1 != convs[0].1 {
        return Ok(None);
    }
    let downsample = match (input.h, input.w) {
        (h, w) if out.h == h && out.w == w => false,
        (h, w) if out.h * 2 == h && out.w * 2 == w => true,
        _ => return Ok(None),
    };
    Ok(Some(Bottleneck {
        n: input.n,
        m: out.n,
        w: convs[0].1,
        downsample,
    }))
}

/// A rewritten block plus the geometric numerator of each of its weighted
/// layers, main branch first.
#[derive(Debug, Clone, PartialEq)]
pub struct RewrittenBlock {
    pub block: ResidualBlock,
    pub numerators: Vec<f64>,
    pub weights: Vec<f64>,
}

/// Planning context for a residual block: the outer `c`, the network's
/// shared bias constant `K*`, the block input second moment and the branch
/// factor the block itself sits in.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlockContext {
    pub c: f64,
    pub k_star: f64,
    pub input_m2: f64,
    pub branch_factor: f64,
}

fn conv(out: usize, k: usize) -> OpKind {
    OpKind::Conv { out, k, stride: 1 }
}

fn fixed(value: f64) -> OpKind {
    OpKind::FixedScalar { value }
}

const POOL: OpKind = OpKind::AvgPool { k: 2, stride: 2 };

/// The reference block with its literal constants and numerators.
fn printed_block(alpha: f64, beta: f64, b: Bottleneck) -> (ResidualBlock, Vec<f64>) {
    let mut main = vec![
        fixed(beta.sqrt()),
        OpKind::Relu,
        fixed((2.0 / beta).sqrt()),
        OpKind::BiasAdd,
        conv(b.w, 1),
        OpKind::Relu,
        fixed((2.0 / (3.0 * beta)).sqrt()),
        OpKind::BiasAdd,
        conv(b.w, 3),
    ];
    if b.downsample {
        main.push(POOL);
    }
    main.extend([
        OpKind::Relu,
        fixed((2.0 / beta).sqrt()),
        OpKind::BiasAdd,
        conv(b.m, 1),
        OpKind::LearnableScalar { init: beta.sqrt() },
        fixed(1.0 / beta.sqrt()),
        fixed((b.m as f64 / (beta * b.n as f64)).sqrt()),
    ]);
    let mut numerators = vec![beta; 3];
    let shortcut = if b.downsample {
        numerators.push(alpha / 4.0);
        vec![POOL, OpKind::BiasAdd, conv(b.m, 1), fixed(1.0 / (alpha / 4.0).sqrt())]
    } else if b.n != b.m {
        numerators.push(alpha);
        vec![OpKind::BiasAdd, conv(b.m, 1), fixed(1.0 / alpha.sqrt())]
    } else {
        vec![]
    };
    let block = ResidualBlock { alpha, beta, main, shortcut };
    (block, numerators)
}

/// The block structure the balanced planner fills in. Corrections before each
/// bias and the restoring scalar at each branch end are added by the walk.
fn balanced_skeleton(alpha: f64, beta: f64, b: Bottleneck, c: f64) -> ResidualBlock {
    let mut main = vec![fixed(beta.sqrt()), OpKind::Relu, OpKind::BiasAdd, conv(b.w, 1), OpKind::Relu, OpKind::BiasAdd, conv(b.w, 3)];
    if b.downsample {
        main.push(POOL);
    }
    let v = (c * beta).sqrt();
    main.extend([OpKind::Relu, OpKind::BiasAdd, conv(b.m, 1), OpKind::LearnableScalar { init: v }, fixed(1.0 / v)]);
    let shortcut = if b.downsample {
        vec![POOL, OpKind::BiasAdd, conv(b.m, 1)]
    } else if b.n != b.m {
        vec![OpKind::BiasAdd, conv(b.m, 1)]
    } else {
        vec![]
    };
    ResidualBlock { alpha, beta, main, shortcut }
}

/// Rewrite a bottleneck block into the well-scaled pre-activation form.
///
/// `Balanced` computes every correction from `ctx` so that, propagated,
/// the block's biases share the outer `γ_b`, its layers and learnable scalar
/// share the outer `γ`, and each branch returns `E[x²]`. `Printed` emits the
/// fixed reference constants and ignores `ctx`.
pub fn residual_block_rewrite(
    alpha: f64,
    beta: f64,
    b: Bottleneck,
    recipe: Recipe,
    ctx: BlockContext,
) -> Result<RewrittenBlock, PlanError> {
    if b.n == 0 || b.m == 0 || b.w == 0 {
        return Err(PlanError::Rewrite(format!("widths must be positive (n={}, w={}, m={})", b.n, b.w, b.m)));
    }
    if (alpha * alpha + beta * beta - 1.0).abs() > crate::graph::RESIDUAL_NORM_TOL || alpha <= 0.0 || beta <= 0.0 {
        return Err(PlanError::Rewrite(format!("need positive alpha, beta with unit norm, got {alpha}, {beta}")));
    }
    positive("c", ctx.c)?;
    positive("K*", ctx.k_star)?;
    positive("block input second moment", ctx.input_m2)?;
    positive("branch factor", ctx.branch_factor)?;
    // Any resolution works for the analytic walk; it only needs to be even.
    let side = if b.downsample { 2 } else { 1 };
    let input = EdgeShape::square(b.n, side);
    let (block, literal) = match recipe {
        Recipe::Printed => {
            let (block, numerators) = printed_block(alpha, beta, b);
            (block, Some(numerators))
        }
        Recipe::Balanced => (balanced_skeleton(alpha, beta, b, ctx.c), None),
        Recipe::Off => return Err(PlanError::Rewrite("recipe is off".into())),
    };
    let mut walker = Walker::new(Scheme::Geometric { c: Some(ctx.c) }, Recipe::Off, Distribution::Gaussian, Some(ctx.k_star));
    walker.first_done = true;
    let numerators = literal.clone();
    walker.literal = literal.map(VecDeque::from);
    let lit = walker.literal.is_some();
    let frame = Frame {
        s: ctx.branch_factor,
        literal: lit,
        recipe_scope: true,
    };
    let (out, _, _) = walker.walk(&[OpKind::Residual(block)], Vec::new(), input, ctx.input_m2, &OpPath::root(), frame)?;
    let Some(OpKind::Residual(block)) = out.into_iter().next() else {
        unreachable!("walk keeps the residual op")
    };
    Ok(RewrittenBlock {
        block,
        numerators: numerators.unwrap_or_else(|| walker.layers.iter().filter_map(|l| l.numerator).collect()),
        weights: walker.weights,
    })
}

#[derive(Debug, Clone, Copy)]
struct Frame {
    /// Branch factor: product of `β²`/`α²` of enclosing residual branches.
    s: f64,
    /// Keep values as given (printed recipe).
    literal: bool,
    recipe_scope: bool,
}

struct Walker {
    scheme: Scheme,
    recipe: Recipe,
    distribution: Distribution,
    k_star: Option<f64>,
    first_done: bool,
    literal: Option<VecDeque<f64>>,
    layers: Vec<LayerPlan>,
    weights: Vec<f64>,
    scalars: Vec<InsertedScalar>,
    learnable: Vec<LearnablePlan>,
    notes: Vec<String>,
}

fn trivial(a2: f64) -> bool {
    (a2 - 1.0).abs() <= UNIT_TOL
}

impl Walker {
    fn new(scheme: Scheme, recipe: Recipe, distribution: Distribution, k_star: Option<f64>) -> Self {
        Self {
            scheme,
            recipe,
            distribution,
            k_star,
            first_done: false,
            literal: None,
            layers: Vec::new(),
            weights: Vec::new(),
            scalars: Vec::new(),
            learnable: Vec::new(),
            notes: Vec::new(),
        }
    }

    fn c(&self) -> Option<f64> {
        match self.scheme {
            Scheme::Geometric { c } => c,
            _ => None,
        }
    }

    fn balancing(&self, frame: Frame) -> bool {
        self.scheme.is_geometric() && !frame.literal
    }

    fn push_scalar(&mut self, out: &mut Vec<OpKind>, list: &OpPath, value: f64, reason: Reason) {
        self.scalars.push(InsertedScalar {
            position: list.child(Step::Op(out.len())).to_string(),
            value,
            reason,
        });
        out.push(fixed(value));
    }

    fn correction_reason(frame: Frame) -> Reason {
        if frame.recipe_scope {
            Reason::ResidualRecipe
        } else {
            Reason::KernelCorrection
        }
    }

    /// Walk one op list. Returns the planned ops, the output shape and the
    /// output forward moment.
    fn walk(
        &mut self,
        ops: &[OpKind],
        mut out: Vec<OpKind>,
        mut shape: EdgeShape,
        mut f: f64,
        list: &OpPath,
        frame: Frame,
    ) -> Result<(Vec<OpKind>, EdgeShape, f64), PlanError> {
        let mut corrected = false;
        let mut i = 0;
        while i < ops.len() {
            let path = list.child(Step::Op(i));
            match &ops[i] {
                OpKind::BiasAdd => {
                    let end = (i..ops.len()).find(|&j| ops[j] != OpKind::BiasAdd).unwrap_or(ops.len());
                    let before_layer = end < ops.len() && ops[end].is_weighted() && self.first_done;
                    let mut closing = None;
                    if let (true, Some(k_star)) = (self.balancing(frame), self.k_star) {
                        let a2 = (frame.s * k_star / shape.n as f64).sqrt() / f;
                        if before_layer {
                            if !trivial(a2) {
                                self.push_scalar(&mut out, list, a2.sqrt(), Self::correction_reason(frame));
                                f *= a2;
                            }
                            corrected = true;
                        } else if !trivial(a2) {
                            self.push_scalar(&mut out, list, a2.sqrt(), Reason::BiasBalance);
                            closing = Some(1.0 / a2.sqrt());
                        }
                    }
                    out.extend(std::iter::repeat_n(OpKind::BiasAdd, end - i));
                    if let Some(v) = closing {
                        self.push_scalar(&mut out, list, v, Reason::BiasBalance);
                    }
                    i = end;
                    continue;
                }
                op @ (OpKind::Conv { .. } | OpKind::Linear { .. }) => {
                    let out_shape = op_output_shape(op, shape, &path)?;
                    let (fan_in, k) = match op {
                        OpKind::Conv { k, .. } => (shape.n, *k),
                        _ => (shape.numel(), 1),
                    };
                    let fan_out = out_shape.n;
                    let (numerator, m2) = match (self.c(), self.literal.as_mut()) {
                        (Some(_), Some(queue)) if frame.literal => {
                            let num = queue.pop_front().ok_or_else(|| PlanError::Rewrite("too few printed numerators".into()))?;
                            (Some(num), init_second_moment(Scheme::Geometric { c: Some(num) }, fan_in, fan_out, k)?)
                        }
                        (Some(c), _) => {
                            let num = c * frame.s.sqrt();
                            (Some(num), init_second_moment(Scheme::Geometric { c: Some(num) }, fan_in, fan_out, k)?)
                        }
                        (None, _) => (None, init_second_moment(self.scheme, fan_in, fan_out, k)?),
                    };
                    let gain = |f: f64| op_transfer(op, Some(m2), MomentPair::new(f, 1.0), shape, out_shape).map(|m| m.fwd);
                    if let (true, true, false, Some(k_star)) = (self.balancing(frame), self.first_done, corrected, self.k_star) {
                        let a2 = (frame.s * k_star / fan_out as f64).sqrt() / gain(f)?;
                        if !trivial(a2) {
                            self.push_scalar(&mut out, list, a2.sqrt(), Self::correction_reason(frame));
                            f *= a2;
                        }
                    }
                    corrected = false;
                    self.layers.push(LayerPlan {
                        index: self.layers.len(),
                        path: list.child(Step::Op(out.len())).to_string(),
                        kind: op.name(),
                        scheme: self.scheme,
                        fan_in,
                        fan_out,
                        k,
                        numerator,
                        second_moment: m2,
                        distribution: self.distribution,
                    });
                    self.weights.push(m2);
                    out.push(op.clone());
                    f = gain(f)?;
                    shape = out_shape;
                    if !self.first_done {
                        self.first_done = true;
                        self.k_star.get_or_insert(fan_out as f64 * f * f / frame.s);
                    }
                }
                OpKind::LearnableScalar { init } => {
                    let u = match self.c() {
                        Some(c) if !frame.literal => (frame.s * c * c).powf(0.25),
                        _ => *init,
                    };
                    self.learnable.push(LearnablePlan {
                        position: list.child(Step::Op(out.len())).to_string(),
                        init: u,
                    });
                    out.push(OpKind::LearnableScalar { init: u });
                    f *= u * u;
                }
                OpKind::Residual(block) => {
                    let (planned, f_out) = self.walk_residual(block, shape, f, list.child(Step::Op(out.len())), &path, frame)?;
                    let g = infer_shapes(&NetworkGraph::new(shape, vec![OpKind::Residual(planned.clone())]))?;
                    shape = g.output_shape()?;
                    out.push(OpKind::Residual(planned));
                    f = f_out;
                }
                op => {
                    let out_shape = op_output_shape(op, shape, &path)?;
                    f = op_transfer(op, None, MomentPair::new(f, 1.0), shape, out_shape)
                        .map_err(|e| match e {
                            MomentError::Unsupported { op, .. } => MomentError::Unsupported { path: path.to_string(), op },
                            e => e,
                        })?
                        .fwd;
                    out.push(op.clone());
                    shape = out_shape;
                }
            }
            if !matches!(ops[i], OpKind::Conv { .. } | OpKind::Linear { .. }) {
                corrected = false;
            }
            i += 1;
        }
        Ok((out, shape, f))
    }

    fn walk_residual(
        &mut self,
        block: &ResidualBlock,
        shape: EdgeShape,
        f: f64,
        at: OpPath,
        source_path: &OpPath,
        frame: Frame,
    ) -> Result<(ResidualBlock, f64), PlanError> {
        let mut frame = frame;
        let mut block = block.clone();
        let mut restore_literal = None;
        if let (true, Some(c)) = (self.balancing(frame) && self.recipe != Recipe::Off, self.c()) {
            if let Some(b) = recognize_bottleneck(&block, shape)? {
                frame.recipe_scope = true;
                match self.recipe {
                    Recipe::Balanced => {
                        block = balanced_skeleton(block.alpha, block.beta, b, c);
                        self.notes.push(format!(
                            "{source_path}: bottleneck block rewritten; its final 1x1 conv mirrors the first (relu, scalar, bias, conv) as an interpretation"
                        ));
                    }
                    Recipe::Printed => {
                        let (printed, numerators) = printed_block(block.alpha, block.beta, b);
                        block = printed;
                        restore_literal = Some(self.literal.replace(VecDeque::from(numerators)));
                        frame.literal = true;
                        self.notes.push(format!(
                            "{source_path}: bottleneck block rewritten with the printed constants; bias and block output scales are not balanced"
                        ));
                    }
                    Recipe::Off => unreachable!(),
                }
            }
        }
        let balance = self.balancing(frame);
        let branch = |walker: &mut Self, ops: &[OpKind], factor: f64, step: Step| -> Result<(Vec<OpKind>, f64), PlanError> {
            let list = at.child(step);
            let sub = Frame { s: frame.s * factor, ..frame };
            let (mut ops, _, mut f_out) = walker.walk(ops, Vec::new(), shape, f, &list, sub)?;
            if balance && !ops.is_empty() {
                let a2 = f / f_out;
                if !trivial(a2) {
                    walker.push_scalar(&mut ops, &list, a2.sqrt(), Reason::ResidualRecipe);
                    f_out = f;
                }
            }
            Ok((ops, f_out))
        };
        let (main, f_main) = branch(self, &block.main, block.beta * block.beta, Step::Main)?;
        let (shortcut, f_short) = branch(self, &block.shortcut, block.alpha * block.alpha, Step::Shortcut)?;
        if let Some(previous) = restore_literal {
            self.literal = previous;
        }
        let f_out = block.alpha * block.alpha * f_short + block.beta * block.beta * f_main;
        Ok((ResidualBlock { main, shortcut, ..block }, f_out))
    }
}

/// Forward moment at the input of the first top-level weighted layer, for
/// unit-second-moment data and no input scalar.
fn moment_before_first_layer(graph: &NetworkGraph) -> Result<f64, PlanError> {
    let shapes = graph.shapes()?;
    let mut f = 1.0;
    for (i, op) in graph.ops.iter().enumerate() {
        if op.is_weighted() || matches!(op, OpKind::Residual(_)) {
            break;
        }
        if matches!(op, OpKind::LearnableScalar { .. }) && graph.ops[..i].iter().all(|o| !o.is_weighted()) {
            // Learnable values are re-planned; treat them as unit here.
            continue;
        }
        f = op_transfer(op, None, MomentPair::new(f, 1.0), shapes.edges[i], shapes.edges[i + 1])?.fwd;
    }
    Ok(f)
}

/// Plan initialization and corrective scalars for `graph`.
///
/// Non-geometric schemes only get the input and output scalars; the geometric
/// scheme additionally gets kernel corrections, bias balancing, residual
/// rewriting and branch-restoring scalars.
pub fn plan(graph: &NetworkGraph, scheme: Scheme, opts: &PlanOptions) -> Result<InitPlan, PlanError> {
    let graph = infer_shapes(graph)?;
    let layers = graph.layers()?;
    let first = layers.first().ok_or(PlanError::NoWeightedLayers)?;
    let scheme = scheme.resolve(&graph)?;
    if let Some(t) = opts.output_norm {
        positive("target std", t)?;
    }

    let input_scale = opts.input_scale.then(|| input_scale_plan(first.fan_in, first.k));
    let input_value = match input_scale {
        Some(is) if first.path.0.len() == 1 => Some((is.target_m2 / moment_before_first_layer(&graph)?).sqrt()),
        Some(is) => Some(is.forward_scalar),
        None => None,
    };

    let run = |k_star: Option<f64>| -> Result<(Walker, Vec<OpKind>, f64), PlanError> {
        let mut walker = Walker::new(scheme, opts.recipe, opts.distribution, k_star);
        let mut prefix = Vec::new();
        let mut f = 1.0;
        if let Some(v) = input_value {
            walker.push_scalar(&mut prefix, &OpPath::root(), v, Reason::InputScale);
            f = v * v;
        }
        let frame = Frame {
            s: 1.0,
            literal: false,
            recipe_scope: false,
        };
        let (ops, _, f) = walker.walk(&graph.ops, prefix, graph.input, f, &OpPath::root(), frame)?;
        Ok((walker, ops, f))
    };
    let (mut walker, mut ops, f) = run(None)?;
    if scheme.is_geometric() {
        // Biases ahead of the first layer need K*, which the first pass found.
        (walker, ops, _) = run(walker.k_star)?;
    }

    let mut predicted = f;
    if let Some(target_std) = opts.output_norm {
        let s = output_norm_scalar(f, target_std)?;
        walker.push_scalar(&mut ops, &OpPath::root(), s, Reason::OutputNorm);
        predicted = f * s * s;
    }
    let network = infer_shapes(&NetworkGraph::new(graph.input, ops))?;
    Ok(InitPlan {
        scheme,
        source: graph,
        network,
        weights: walker.weights,
        layers: walker.layers,
        scalars: walker.scalars,
        learnable: walker.learnable,
        input_scale,
        k_star: walker.k_star.filter(|_| scheme.is_geometric()),
        output_m2_before_norm: f,
        predicted_output_m2: predicted,
        notes: walker.notes,
    })
}

/// Forward moments of a planned network for unit-second-moment data.
pub fn planned_forward(plan: &InitPlan) -> Result<crate::graph::EdgeList<f64>, PlanError> {
    Ok(forward_moments(&plan.network, &plan.weights, 1.0)?)
}
