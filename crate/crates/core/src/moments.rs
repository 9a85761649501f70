//! Analytic propagation of uncentered second moments.
//!
//! Forward moments `E[x²]` run from the input towards the output, backward
//! moments `E[Δx²]` from the output towards the input. Both are products of
//! per-op gains, so each direction is linear in its seed.

use serde::Serialize;
use thiserror::Error;

use crate::graph::{BranchEdges, EdgeList, EdgeShape, GraphError, NetworkGraph, OpKind, OpPath, Step};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MomentError {
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error("expected {expected} weight second moments, got {got}")]
    WeightCount { expected: usize, got: usize },
    #[error("weight second moment of layer {index} must be positive and finite, got {value}")]
    BadWeight { index: usize, value: f64 },
    #[error("{path}: {op} has no analytic moment rule")]
    Unsupported { path: String, op: &'static str },
    #[error("{what} must be positive and finite, got {value}")]
    BadSeed { what: &'static str, value: f64 },
    #[error("moment overflow at {path}")]
    NonFinite { path: String },
}

/// Forward and backward second moments on one edge.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MomentPair {
    /// `E[x²]`
    pub fwd: f64,
    /// `E[Δx²]`
    pub bwd: f64,
}

impl MomentPair {
    pub fn new(fwd: f64, bwd: f64) -> Self {
        Self { fwd, bwd }
    }
}

/// Both moment directions on every edge, plus the weight moments used.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentTape {
    pub edges: EdgeList<MomentPair>,
    pub weight_m2: Vec<f64>,
}

impl MomentTape {
    pub fn input(&self) -> MomentPair {
        *self.edges.first()
    }

    pub fn output(&self) -> MomentPair {
        *self.edges.last()
    }
}

/// Apply one op's moment rule.
///
/// `m.fwd` is the forward moment on the op's input edge and `m.bwd` the
/// backward moment on its output edge; the result carries the forward moment
/// on the output edge and the backward moment on the input edge.
pub fn op_transfer(
    op: &OpKind,
    weight_m2: Option<f64>,
    m: MomentPair,
    input: EdgeShape,
    output: EdgeShape,
) -> Result<MomentPair, MomentError> {
    let area_ratio = output.area() as f64 / input.area() as f64;
    let weight = |index_hint: usize| {
        weight_m2.ok_or(MomentError::WeightCount {
            expected: index_hint + 1,
            got: index_hint,
        })
    };
    Ok(match op {
        OpKind::Conv { k, .. } => {
            let w = weight(0)?;
            let k2 = (k * k) as f64;
            MomentPair {
                fwd: input.n as f64 * k2 * w * m.fwd,
                bwd: area_ratio * output.n as f64 * k2 * w * m.bwd,
            }
        }
        OpKind::Linear { .. } => {
            let w = weight(0)?;
            MomentPair {
                fwd: input.numel() as f64 * w * m.fwd,
                bwd: output.n as f64 * w * m.bwd,
            }
        }
        OpKind::AvgPool { k, .. } => {
            let k2 = (k * k) as f64;
            // Zero-mean approximation going forward; exact going backward.
            MomentPair {
                fwd: m.fwd / k2,
                bwd: m.bwd * area_ratio / k2,
            }
        }
        OpKind::Relu => MomentPair {
            fwd: m.fwd / 2.0,
            bwd: m.bwd / 2.0,
        },
        OpKind::Dropout { p } => MomentPair {
            fwd: m.fwd / (1.0 - p),
            bwd: m.bwd / (1.0 - p),
        },
        OpKind::FixedScalar { value: u } | OpKind::LearnableScalar { init: u } => MomentPair {
            fwd: m.fwd * u * u,
            bwd: m.bwd * u * u,
        },
        OpKind::BiasAdd => m,
        OpKind::MaxPool { .. } => {
            return Err(MomentError::Unsupported {
                path: String::new(),
                op: "maxpool",
            })
        }
        OpKind::Residual(_) => {
            return Err(MomentError::Unsupported {
                path: String::new(),
                op: "residual (composite op, propagate the graph instead)",
            })
        }
    })
}

fn check_weights(graph: &NetworkGraph, weights: &[f64]) -> Result<(), MomentError> {
    let expected = graph.weighted_count();
    if weights.len() != expected {
        return Err(MomentError::WeightCount {
            expected,
            got: weights.len(),
        });
    }
    if let Some((index, &value)) = weights
        .iter()
        .enumerate()
        .find(|(_, w)| !(w.is_finite() && **w > 0.0))
    {
        return Err(MomentError::BadWeight { index, value });
    }
    Ok(())
}

fn check_seed(what: &'static str, value: f64) -> Result<(), MomentError> {
    if value.is_finite() && value > 0.0 {
        Ok(())
    } else {
        Err(MomentError::BadSeed { what, value })
    }
}

fn weighted_in(ops: &[OpKind]) -> usize {
    ops.iter()
        .map(|op| match op {
            OpKind::Residual(b) => weighted_in(&b.main) + weighted_in(&b.shortcut),
            op if op.is_weighted() => 1,
            _ => 0,
        })
        .sum()
}

fn transfer_at(
    op: &OpKind,
    weights: &[f64],
    cursor: usize,
    m: MomentPair,
    input: EdgeShape,
    output: EdgeShape,
    path: &OpPath,
) -> Result<MomentPair, MomentError> {
    let w = op.is_weighted().then(|| weights[cursor]);
    let out = op_transfer(op, w, m, input, output).map_err(|e| match e {
        MomentError::Unsupported { op, .. } => MomentError::Unsupported {
            path: path.to_string(),
            op,
        },
        e => e,
    })?;
    if !(out.fwd.is_finite() && out.bwd.is_finite()) {
        return Err(MomentError::NonFinite {
            path: path.to_string(),
        });
    }
    Ok(out)
}

/// Forward second moments on every edge, seeded with `E[x_0²] = input_m2`.
pub fn forward_moments(graph: &NetworkGraph, weights: &[f64], input_m2: f64) -> Result<EdgeList<f64>, MomentError> {
    check_weights(graph, weights)?;
    check_seed("input second moment", input_m2)?;
    let shapes = graph.shapes()?;
    forward_list(&graph.ops, shapes, weights, 0, input_m2, &OpPath::root())
}

fn forward_list(
    ops: &[OpKind],
    shapes: &EdgeList<EdgeShape>,
    weights: &[f64],
    mut cursor: usize,
    input: f64,
    list: &OpPath,
) -> Result<EdgeList<f64>, MomentError> {
    let mut edges = vec![input];
    let mut branches = Vec::with_capacity(ops.len());
    let mut current = input;
    for (i, op) in ops.iter().enumerate() {
        let path = list.child(Step::Op(i));
        if let OpKind::Residual(block) = op {
            let b = shapes.branches[i].as_ref().expect("residual op has branch shapes");
            let main = forward_list(&block.main, &b.main, weights, cursor, current, &path.child(Step::Main))?;
            cursor += weighted_in(&block.main);
            let shortcut = forward_list(&block.shortcut, &b.shortcut, weights, cursor, current, &path.child(Step::Shortcut))?;
            cursor += weighted_in(&block.shortcut);
            current = block.alpha.powi(2) * shortcut.last() + block.beta.powi(2) * main.last();
            branches.push(Some(Box::new(BranchEdges { main, shortcut })));
        } else {
            let m = MomentPair::new(current, 1.0);
            current = transfer_at(op, weights, cursor, m, shapes.edges[i], shapes.edges[i + 1], &path)?.fwd;
            if op.is_weighted() {
                cursor += 1;
            }
            branches.push(None);
        }
        edges.push(current);
    }
    Ok(EdgeList { edges, branches })
}

/// Backward second moments on every edge, seeded with
/// `E[Δx_L²] = output_g2` at the network output.
pub fn backward_moments(graph: &NetworkGraph, weights: &[f64], output_g2: f64) -> Result<EdgeList<f64>, MomentError> {
    check_weights(graph, weights)?;
    check_seed("output gradient second moment", output_g2)?;
    let shapes = graph.shapes()?;
    backward_list(&graph.ops, shapes, weights, 0, output_g2, &OpPath::root())
}

fn backward_list(
    ops: &[OpKind],
    shapes: &EdgeList<EdgeShape>,
    weights: &[f64],
    first_weight: usize,
    output: f64,
    list: &OpPath,
) -> Result<EdgeList<f64>, MomentError> {
    // Index of the first weight owned by each op.
    let mut offsets = Vec::with_capacity(ops.len());
    let mut cursor = first_weight;
    for op in ops {
        offsets.push(cursor);
        cursor += weighted_in(std::slice::from_ref(op));
    }

    let mut edges = vec![0.0; ops.len() + 1];
    let mut branches: Vec<Option<Box<BranchEdges<f64>>>> = vec![None; ops.len()];
    edges[ops.len()] = output;
    for (i, op) in ops.iter().enumerate().rev() {
        let path = list.child(Step::Op(i));
        let grad_out = edges[i + 1];
        if let OpKind::Residual(block) = op {
            let b = shapes.branches[i].as_ref().expect("residual op has branch shapes");
            let main = backward_list(
                &block.main,
                &b.main,
                weights,
                offsets[i],
                block.beta.powi(2) * grad_out,
                &path.child(Step::Main),
            )?;
            let shortcut = backward_list(
                &block.shortcut,
                &b.shortcut,
                weights,
                offsets[i] + weighted_in(&block.main),
                block.alpha.powi(2) * grad_out,
                &path.child(Step::Shortcut),
            )?;
            edges[i] = main.first() + shortcut.first();
            branches[i] = Some(Box::new(BranchEdges { main, shortcut }));
        } else {
            let m = MomentPair::new(1.0, grad_out);
            edges[i] = transfer_at(op, weights, offsets[i], m, shapes.edges[i], shapes.edges[i + 1], &path)?.bwd;
        }
    }
    Ok(EdgeList { edges, branches })
}

/// Forward and backward moments together.
pub fn propagate(
    graph: &NetworkGraph,
    weights: &[f64],
    input_m2: f64,
    output_g2: f64,
) -> Result<MomentTape, MomentError> {
    let fwd = forward_moments(graph, weights, input_m2)?;
    let bwd = backward_moments(graph, weights, output_g2)?;
    Ok(MomentTape {
        edges: fwd.zip_with(&bwd, &mut |f, b| MomentPair::new(*f, *b)),
        weight_m2: weights.to_vec(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{infer_shapes, ResidualBlock};

    fn close(a: f64, b: f64) -> bool {
        (a - b).abs() <= 1e-12 * a.abs().max(b.abs()).max(1.0)
    }

    #[test]
    fn conv_forward_rule() {
        // n_l k² E[W²] E[x²] = 3 · 9 · 0.1 · 1
        let s = EdgeShape::square(3, 8);
        let m = op_transfer(&OpKind::Conv { out: 4, k: 3, stride: 1 }, Some(0.1), MomentPair::new(1.0, 1.0), s, EdgeShape::square(4, 8)).unwrap();
        assert!(close(m.fwd, 2.7), "{}", m.fwd);
    }

    #[test]
    fn relu_halves_both_directions() {
        let s = EdgeShape::square(2, 2);
        let m = op_transfer(&OpKind::Relu, None, MomentPair::new(1.0, 1.0), s, s).unwrap();
        assert_eq!(m.fwd, 0.5);
        let m = op_transfer(&OpKind::Relu, None, MomentPair::new(2.0, 2.0), s, s).unwrap();
        assert_eq!(m, MomentPair::new(1.0, 1.0));
    }

    #[test]
    fn sqrt_two_scalar_doubles() {
        let s = EdgeShape::square(2, 2);
        let op = OpKind::FixedScalar { value: 2f64.sqrt() };
        let m = op_transfer(&op, None, MomentPair::new(1.0, 1.0), s, s).unwrap();
        assert!(close(m.fwd, 2.0) && close(m.bwd, 2.0));
    }

    #[test]
    fn identity_ops() {
        let s = EdgeShape::square(2, 2);
        let m = MomentPair::new(0.3, 7.0);
        assert_eq!(op_transfer(&OpKind::Dropout { p: 0.0 }, None, m, s, s).unwrap(), m);
        assert_eq!(op_transfer(&OpKind::FixedScalar { value: 1.0 }, None, m, s, s).unwrap(), m);
        assert_eq!(op_transfer(&OpKind::BiasAdd, None, m, s, s).unwrap(), m);
    }

    #[test]
    fn avgpool_backward_is_one_over_k4() {
        let op = OpKind::AvgPool { k: 2, stride: 2 };
        let m = op_transfer(&op, None, MomentPair::new(1.0, 1.0), EdgeShape::square(3, 8), EdgeShape::square(3, 4)).unwrap();
        assert_eq!(m.bwd, 1.0 / 16.0);
        assert_eq!(m.fwd, 0.25);
    }

    #[test]
    fn maxpool_is_unsupported() {
        let graph = infer_shapes(&NetworkGraph::new(EdgeShape::square(1, 4), vec![OpKind::MaxPool { k: 2, stride: 2 }])).unwrap();
        let err = forward_moments(&graph, &[], 1.0).unwrap_err();
        assert_eq!(err, MomentError::Unsupported { path: "0".into(), op: "maxpool" });
    }

    #[test]
    fn missing_weight_moment() {
        let graph = infer_shapes(&NetworkGraph::new(EdgeShape::square(1, 1), vec![OpKind::Linear { out: 2 }])).unwrap();
        assert!(matches!(forward_moments(&graph, &[], 1.0), Err(MomentError::WeightCount { expected: 1, got: 0 })));
    }

    #[test]
    fn residual_gradient_sums_branches() {
        let block = ResidualBlock::new(0.6, 0.8, vec![], vec![]).unwrap();
        let graph = infer_shapes(&NetworkGraph::new(EdgeShape::square(2, 2), vec![OpKind::Residual(block)])).unwrap();
        let bwd = backward_moments(&graph, &[], 1.0).unwrap();
        assert!(close(bwd.edges[0], 1.0));
        let fwd = forward_moments(&graph, &[], 3.0).unwrap();
        assert!(close(fwd.edges[1], 3.0));
    }

    #[test]
    fn composition_matches_op_transfer() {
        let ops = vec![
            OpKind::Conv { out: 5, k: 2, stride: 2 },
            OpKind::Relu,
            OpKind::FixedScalar { value: 1.3 },
            OpKind::AvgPool { k: 2, stride: 2 },
            OpKind::Dropout { p: 0.25 },
            OpKind::Linear { out: 7 },
        ];
        let graph = infer_shapes(&NetworkGraph::new(EdgeShape::square(3, 8), ops.clone())).unwrap();
        let weights = [0.2, 0.05];
        let tape = propagate(&graph, &weights, 1.5, 0.7).unwrap();
        let shapes = graph.shapes().unwrap();
        let mut f = 1.5;
        let mut w = weights.iter();
        for (i, op) in ops.iter().enumerate() {
            let wm = op.is_weighted().then(|| *w.next().unwrap());
            f = op_transfer(op, wm, MomentPair::new(f, 1.0), shapes.edges[i], shapes.edges[i + 1]).unwrap().fwd;
            assert!(close(tape.edges.edges[i + 1].fwd, f));
        }
        let mut b = 0.7;
        for (i, op) in ops.iter().enumerate().rev() {
            let wm = op.is_weighted().then(|| weights[if i == 0 { 0 } else { 1 }]);
            b = op_transfer(op, wm, MomentPair::new(1.0, b), shapes.edges[i], shapes.edges[i + 1]).unwrap().bwd;
            assert!(close(tape.edges.edges[i].bwd, b));
        }
    }
}
