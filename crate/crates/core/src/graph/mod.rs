//! Network intermediate representation.
//!
//! A network is a single-input, single-output sequence of typed ops. Residual
//! ops nest two sub-sequences (main and shortcut) that reconverge at a
//! weighted sum. Every position between two ops is an *edge*; a list of `L`
//! ops has `L + 1` edges, and each residual op owns the edges of its two
//! branches.

mod lint;
mod parse;
mod shape;

use std::fmt;

use thiserror::Error;

pub use lint::{is_clean, lint_scaling, Diagnostic, Severity};
pub use parse::{parse_document, parse_spec, to_document, SpecDocument};
pub use shape::infer_shapes;
pub(crate) use shape::op_output_shape;

/// Tolerance on `alpha² + beta² = 1` for residual blocks.
pub const RESIDUAL_NORM_TOL: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GraphError {
    #[error("syntax error at line {line}, column {column}: {message}")]
    Syntax {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("{path}: expected {expected}")]
    Expected { path: String, expected: String },
    #[error("{path}: unknown op kind '{kind}'")]
    UnknownOp { path: String, kind: String },
    #[error("{path}: op '{kind}' has no analytic scaling rule and is rejected")]
    Unsupported { path: String, kind: String },
    #[error("{path}: unexpected field '{field}'")]
    UnexpectedField { path: String, field: String },
    #[error("{path}: {field} must be a positive integer, got {value}")]
    NonPositive {
        path: String,
        field: String,
        value: String,
    },
    #[error("{path}: {message}")]
    Invalid { path: String, message: String },
    #[error("{path}: alpha²+beta² must equal 1 (got {sum})")]
    ResidualNorm { path: String, sum: f64 },
    #[error("{path}: stride {stride} does not divide resolution {size}")]
    StrideDivision {
        path: String,
        stride: usize,
        size: usize,
    },
    #[error("{path}: residual branch shapes differ (main {main}, shortcut {shortcut})")]
    BranchMismatch {
        path: String,
        main: EdgeShape,
        shortcut: EdgeShape,
    },
    #[error("shapes have not been inferred for this graph")]
    NotInferred,
}

/// Channel count and spatial extent of the tensor on one edge.
///
/// The spatial size is kept as separate height and width; wherever the
/// square side `rho` would appear squared, [`EdgeShape::area`] is used.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct EdgeShape {
    pub n: usize,
    pub h: usize,
    pub w: usize,
}

impl EdgeShape {
    pub fn new(n: usize, h: usize, w: usize) -> Self {
        Self { n, h, w }
    }

    pub fn square(n: usize, rho: usize) -> Self {
        Self { n, h: rho, w: rho }
    }

    /// Spatial size, the `rho²` of the square case.
    pub fn area(&self) -> usize {
        self.h * self.w
    }

    pub fn numel(&self) -> usize {
        self.n * self.area()
    }
}

impl fmt::Display for EdgeShape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}x{})", self.n, self.h, self.w)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResidualBlock {
    pub alpha: f64,
    pub beta: f64,
    pub main: Vec<OpKind>,
    /// An empty shortcut is the identity.
    pub shortcut: Vec<OpKind>,
}

impl ResidualBlock {
    pub fn new(
        alpha: f64,
        beta: f64,
        main: Vec<OpKind>,
        shortcut: Vec<OpKind>,
    ) -> Result<Self, GraphError> {
        let sum = alpha * alpha + beta * beta;
        if !alpha.is_finite() || !beta.is_finite() || (sum - 1.0).abs() > RESIDUAL_NORM_TOL {
            return Err(GraphError::ResidualNorm {
                path: "residual".into(),
                sum,
            });
        }
        Ok(Self {
            alpha,
            beta,
            main,
            shortcut,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum OpKind {
    /// Dense layer. A spatial input is flattened, so the fan-in is `n·h·w`.
    Linear { out: usize },
    Conv { out: usize, k: usize, stride: usize },
    AvgPool { k: usize, stride: usize },
    MaxPool { k: usize, stride: usize },
    Relu,
    /// Inverted dropout: kept units are multiplied by `1/(1-p)`.
    Dropout { p: f64 },
    FixedScalar { value: f64 },
    LearnableScalar { init: f64 },
    BiasAdd,
    Residual(ResidualBlock),
}

impl OpKind {
    pub fn name(&self) -> &'static str {
        match self {
            OpKind::Linear { .. } => "linear",
            OpKind::Conv { .. } => "conv",
            OpKind::AvgPool { .. } => "avgpool",
            OpKind::MaxPool { .. } => "maxpool",
            OpKind::Relu => "relu",
            OpKind::Dropout { .. } => "dropout",
            OpKind::FixedScalar { .. } | OpKind::LearnableScalar { .. } => "scalar",
            OpKind::BiasAdd => "bias",
            OpKind::Residual(_) => "residual",
        }
    }

    pub fn is_weighted(&self) -> bool {
        matches!(self, OpKind::Linear { .. } | OpKind::Conv { .. })
    }

    /// Kernel side of a weighted op; linear layers count as `k = 1`.
    pub fn kernel(&self) -> Option<usize> {
        match self {
            OpKind::Linear { .. } => Some(1),
            OpKind::Conv { k, .. } => Some(*k),
            _ => None,
        }
    }
}

/// One step of a path into the nested op lists.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Step {
    Op(usize),
    Main,
    Shortcut,
}

/// Location of an op (or of an op list, when it ends in a branch step).
#[derive(Debug, Clone, Default, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct OpPath(pub Vec<Step>);

impl OpPath {
    pub fn root() -> Self {
        Self(Vec::new())
    }

    pub fn child(&self, step: Step) -> Self {
        let mut steps = self.0.clone();
        steps.push(step);
        Self(steps)
    }
}

impl fmt::Display for OpPath {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.0.is_empty() {
            return write!(f, "<root>");
        }
        for (i, step) in self.0.iter().enumerate() {
            if i > 0 {
                write!(f, ".")?;
            }
            match step {
                Step::Op(idx) => write!(f, "{idx}")?,
                Step::Main => write!(f, "main")?,
                Step::Shortcut => write!(f, "shortcut")?,
            }
        }
        Ok(())
    }
}

/// An edge: the list it lives in plus its index within that list.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct EdgePos {
    pub list: OpPath,
    pub index: usize,
}

impl fmt::Display for EdgePos {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.list.0.is_empty() {
            write!(f, "#{}", self.index)
        } else {
            write!(f, "{}#{}", self.list, self.index)
        }
    }
}

/// Per-edge values laid out like the op lists of a graph.
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeList<T> {
    /// `ops.len() + 1` values, one per edge of this list.
    pub edges: Vec<T>,
    /// One slot per op; `Some` exactly for residual ops.
    pub branches: Vec<Option<Box<BranchEdges<T>>>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BranchEdges<T> {
    pub main: EdgeList<T>,
    pub shortcut: EdgeList<T>,
}

impl<T> EdgeList<T> {
    pub fn first(&self) -> &T {
        &self.edges[0]
    }

    pub fn last(&self) -> &T {
        self.edges.last().expect("edge list is never empty")
    }

    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> EdgeList<U> {
        EdgeList {
            edges: self.edges.iter().map(&mut *f).collect(),
            branches: self
                .branches
                .iter()
                .map(|b| {
                    b.as_ref().map(|b| {
                        Box::new(BranchEdges {
                            main: b.main.map(f),
                            shortcut: b.shortcut.map(f),
                        })
                    })
                })
                .collect(),
        }
    }

    /// Combine two lists of identical layout.
    pub fn zip_with<U, V>(&self, other: &EdgeList<U>, f: &mut impl FnMut(&T, &U) -> V) -> EdgeList<V> {
        assert_eq!(self.edges.len(), other.edges.len(), "edge layouts differ");
        EdgeList {
            edges: self
                .edges
                .iter()
                .zip(&other.edges)
                .map(|(a, b)| f(a, b))
                .collect(),
            branches: self
                .branches
                .iter()
                .zip(&other.branches)
                .map(|(a, b)| match (a, b) {
                    (Some(a), Some(b)) => Some(Box::new(BranchEdges {
                        main: a.main.zip_with(&b.main, f),
                        shortcut: a.shortcut.zip_with(&b.shortcut, f),
                    })),
                    (None, None) => None,
                    _ => panic!("edge layouts differ"),
                })
                .collect(),
        }
    }

    /// All edges in depth-first order: an op's branch edges come right after
    /// the edge feeding it.
    pub fn flatten(&self) -> Vec<(EdgePos, &T)> {
        let mut out = Vec::new();
        self.flatten_into(&OpPath::root(), &mut out);
        out
    }

    fn flatten_into<'a>(&'a self, list: &OpPath, out: &mut Vec<(EdgePos, &'a T)>) {
        for (i, value) in self.edges.iter().enumerate() {
            out.push((
                EdgePos {
                    list: list.clone(),
                    index: i,
                },
                value,
            ));
            if let Some(Some(b)) = self.branches.get(i) {
                let op = list.child(Step::Op(i));
                b.main.flatten_into(&op.child(Step::Main), out);
                b.shortcut.flatten_into(&op.child(Step::Shortcut), out);
            }
        }
    }

    pub fn get(&self, pos: &EdgePos) -> Option<&T> {
        let mut list = self;
        let mut steps = pos.list.0.iter();
        while let Some(step) = steps.next() {
            let Step::Op(i) = step else { return None };
            let branches = list.branches.get(*i)?.as_ref()?;
            list = match steps.next()? {
                Step::Main => &branches.main,
                Step::Shortcut => &branches.shortcut,
                Step::Op(_) => return None,
            };
        }
        list.edges.get(pos.index)
    }

    pub fn len(&self) -> usize {
        self.edges.len()
            + self
                .branches
                .iter()
                .flatten()
                .map(|b| b.main.len() + b.shortcut.len())
                .sum::<usize>()
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

/// A visited op together with the edges around it.
#[derive(Debug, Clone)]
pub struct OpSite<'a> {
    pub path: OpPath,
    pub op: &'a OpKind,
    pub input: EdgePos,
    pub output: EdgePos,
    pub input_shape: EdgeShape,
    pub output_shape: EdgeShape,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    Conv,
    Linear,
}

impl LayerKind {
    pub fn name(&self) -> &'static str {
        match self {
            LayerKind::Conv => "conv",
            LayerKind::Linear => "linear",
        }
    }
}

/// A weighted (Conv or Linear) layer with the dimensions the calculus uses.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerInfo {
    /// Position among weighted layers in depth-first order.
    pub index: usize,
    pub path: OpPath,
    pub kind: LayerKind,
    /// `n_l`: input channels, or the flattened input size for linear layers.
    pub fan_in: usize,
    /// `n_{l+1}`.
    pub fan_out: usize,
    pub k: usize,
    pub stride: usize,
    pub input: EdgePos,
    pub output: EdgePos,
    pub input_shape: EdgeShape,
    pub output_shape: EdgeShape,
}

impl LayerInfo {
    pub fn param_count(&self) -> usize {
        self.fan_in * self.fan_out * self.k * self.k
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkGraph {
    pub input: EdgeShape,
    pub ops: Vec<OpKind>,
    /// Filled in by [`infer_shapes`].
    pub edges: Option<EdgeList<EdgeShape>>,
}

impl NetworkGraph {
    pub fn new(input: EdgeShape, ops: Vec<OpKind>) -> Self {
        Self {
            input,
            ops,
            edges: None,
        }
    }

    pub fn shapes(&self) -> Result<&EdgeList<EdgeShape>, GraphError> {
        self.edges.as_ref().ok_or(GraphError::NotInferred)
    }

    pub fn output_shape(&self) -> Result<EdgeShape, GraphError> {
        Ok(*self.shapes()?.last())
    }

    /// Every op in depth-first order (a residual op precedes its branches).
    pub fn sites(&self) -> Result<Vec<OpSite<'_>>, GraphError> {
        let shapes = self.shapes()?;
        let mut out = Vec::new();
        collect_sites(&self.ops, shapes, &OpPath::root(), &mut out);
        Ok(out)
    }

    pub fn layers(&self) -> Result<Vec<LayerInfo>, GraphError> {
        let mut layers = Vec::new();
        for site in self.sites()? {
            let (kind, k, stride, fan_in) = match site.op {
                OpKind::Conv { k, stride, .. } => (LayerKind::Conv, *k, *stride, site.input_shape.n),
                OpKind::Linear { .. } => (LayerKind::Linear, 1, 1, site.input_shape.numel()),
                _ => continue,
            };
            layers.push(LayerInfo {
                index: layers.len(),
                path: site.path.clone(),
                kind,
                fan_in,
                fan_out: site.output_shape.n,
                k,
                stride,
                input: site.input.clone(),
                output: site.output.clone(),
                input_shape: site.input_shape,
                output_shape: site.output_shape,
            });
        }
        Ok(layers)
    }

    pub fn weighted_count(&self) -> usize {
        fn count(ops: &[OpKind]) -> usize {
            ops.iter()
                .map(|op| match op {
                    OpKind::Residual(b) => count(&b.main) + count(&b.shortcut),
                    op if op.is_weighted() => 1,
                    _ => 0,
                })
                .sum()
        }
        count(&self.ops)
    }

    pub fn op_at(&self, path: &OpPath) -> Option<&OpKind> {
        let mut list = &self.ops;
        let mut found = None;
        let mut steps = path.0.iter();
        while let Some(step) = steps.next() {
            let Step::Op(i) = step else { return None };
            let op = list.get(*i)?;
            found = Some(op);
            match (op, steps.clone().next()) {
                (_, None) => break,
                (OpKind::Residual(b), Some(Step::Main)) => list = &b.main,
                (OpKind::Residual(b), Some(Step::Shortcut)) => list = &b.shortcut,
                _ => return None,
            }
            steps.next();
        }
        found
    }
}

fn collect_sites<'a>(
    ops: &'a [OpKind],
    shapes: &EdgeList<EdgeShape>,
    list: &OpPath,
    out: &mut Vec<OpSite<'a>>,
) {
    for (i, op) in ops.iter().enumerate() {
        let path = list.child(Step::Op(i));
        out.push(OpSite {
            path: path.clone(),
            op,
            input: EdgePos {
                list: list.clone(),
                index: i,
            },
            output: EdgePos {
                list: list.clone(),
                index: i + 1,
            },
            input_shape: shapes.edges[i],
            output_shape: shapes.edges[i + 1],
        });
        if let (OpKind::Residual(block), Some(branches)) = (op, &shapes.branches[i]) {
            collect_sites(&block.main, &branches.main, &path.child(Step::Main), out);
            collect_sites(&block.shortcut, &branches.shortcut, &path.child(Step::Shortcut), out);
        }
    }
}
