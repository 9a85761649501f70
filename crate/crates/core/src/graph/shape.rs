use super::{BranchEdges, EdgeList, EdgeShape, GraphError, NetworkGraph, OpKind, OpPath, Step};

/// Annotate every edge with its shape.
///
/// Convs map `(n, h, w)` to `(out, h/stride, w/stride)`, pools keep the
/// channel count and divide the resolution, linear layers flatten to
/// `(out, 1, 1)` and everything else preserves the shape.
pub fn infer_shapes(graph: &NetworkGraph) -> Result<NetworkGraph, GraphError> {
    check_positive(graph.input.n, "n", "$.input")?;
    check_positive(graph.input.h, "h", "$.input")?;
    check_positive(graph.input.w, "w", "$.input")?;
    let edges = infer_list(&graph.ops, graph.input, &OpPath::root())?;
    Ok(NetworkGraph {
        input: graph.input,
        ops: graph.ops.clone(),
        edges: Some(edges),
    })
}

fn infer_list(ops: &[OpKind], input: EdgeShape, list: &OpPath) -> Result<EdgeList<EdgeShape>, GraphError> {
    let mut edges = Vec::with_capacity(ops.len() + 1);
    let mut branches = Vec::with_capacity(ops.len());
    edges.push(input);
    let mut current = input;
    for (i, op) in ops.iter().enumerate() {
        let path = list.child(Step::Op(i));
        let (next, branch) = infer_op(op, current, &path)?;
        edges.push(next);
        branches.push(branch);
        current = next;
    }
    Ok(EdgeList { edges, branches })
}

/// Output shape of a single non-residual op.
pub(crate) fn op_output_shape(op: &OpKind, input: EdgeShape, path: &OpPath) -> Result<EdgeShape, GraphError> {
    infer_op(op, input, path).map(|(shape, _)| shape)
}

type OpShape = (EdgeShape, Option<Box<BranchEdges<EdgeShape>>>);

fn infer_op(op: &OpKind, input: EdgeShape, path: &OpPath) -> Result<OpShape, GraphError> {
    let at = path.to_string();
    let out = match op {
        OpKind::Conv { out, k, stride } => {
            check_positive(*out, "out", &at)?;
            check_positive(*k, "k", &at)?;
            check_positive(*stride, "stride", &at)?;
            let (h, w) = downsample(input, *stride, &at)?;
            EdgeShape::new(*out, h, w)
        }
        OpKind::AvgPool { k, stride } | OpKind::MaxPool { k, stride } => {
            check_positive(*k, "k", &at)?;
            check_positive(*stride, "stride", &at)?;
            let (h, w) = downsample(input, *stride, &at)?;
            EdgeShape::new(input.n, h, w)
        }
        OpKind::Linear { out } => {
            check_positive(*out, "out", &at)?;
            EdgeShape::new(*out, 1, 1)
        }
        OpKind::Residual(block) => {
            let main = infer_list(&block.main, input, &path.child(Step::Main))?;
            let shortcut = infer_list(&block.shortcut, input, &path.child(Step::Shortcut))?;
            let (m, s) = (*main.last(), *shortcut.last());
            if m != s {
                return Err(GraphError::BranchMismatch {
                    path: at,
                    main: m,
                    shortcut: s,
                });
            }
            return Ok((m, Some(Box::new(BranchEdges { main, shortcut }))));
        }
        OpKind::Relu
        | OpKind::Dropout { .. }
        | OpKind::FixedScalar { .. }
        | OpKind::LearnableScalar { .. }
        | OpKind::BiasAdd => input,
    };
    Ok((out, None))
}

fn downsample(input: EdgeShape, stride: usize, at: &str) -> Result<(usize, usize), GraphError> {
    for size in [input.h, input.w] {
        if size % stride != 0 {
            return Err(GraphError::StrideDivision {
                path: at.to_string(),
                stride,
                size,
            });
        }
    }
    Ok((input.h / stride, input.w / stride))
}

fn check_positive(value: usize, field: &str, at: &str) -> Result<(), GraphError> {
    if value == 0 {
        return Err(GraphError::NonPositive {
            path: at.to_string(),
            field: field.to_string(),
            value: "0".into(),
        });
    }
    Ok(())
}
