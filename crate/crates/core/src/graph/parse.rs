//! JSON spec documents.
//!
//! ```json
//! {"input": {"n": 3, "h": 32, "w": 32},
//!  "ops": [{"op": "conv", "out": 6, "k": 4, "stride": 4}, {"op": "relu"}]}
//! ```
//!
//! Weighted ops may carry an `"m2"` field (the weight second moment); a
//! document either annotates every weighted op or none of them.

use serde_json::{Map, Value};

use super::{EdgeShape, GraphError, NetworkGraph, OpKind, ResidualBlock, RESIDUAL_NORM_TOL};

/// A parsed document: the graph plus optional per-layer weight moments in
/// depth-first layer order.
#[derive(Debug, Clone, PartialEq)]
pub struct SpecDocument {
    pub graph: NetworkGraph,
    pub weight_m2: Option<Vec<f64>>,
}

pub fn parse_spec(text: &str) -> Result<NetworkGraph, GraphError> {
    parse_document(text).map(|doc| doc.graph)
}

pub fn parse_document(text: &str) -> Result<SpecDocument, GraphError> {
    let root: Value = serde_json::from_str(text).map_err(|e| GraphError::Syntax {
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })?;
    let obj = as_object(&root, "$")?;
    reject_unknown(obj, "$", &["input", "ops"])?;

    let input = obj.get("input").ok_or_else(|| expected("$", "field 'input'"))?;
    let input_obj = as_object(input, "$.input")?;
    reject_unknown(input_obj, "$.input", &["n", "h", "w"])?;
    let input = EdgeShape::new(
        positive(input_obj, "$.input", "n")?,
        positive(input_obj, "$.input", "h")?,
        positive(input_obj, "$.input", "w")?,
    );

    let ops = obj.get("ops").ok_or_else(|| expected("$", "field 'ops'"))?;
    let mut m2 = Vec::new();
    let ops = parse_ops(ops, "$.ops", &mut m2)?;

    let annotated = m2.iter().filter(|m| m.is_some()).count();
    let weight_m2 = if annotated == 0 {
        None
    } else if annotated == m2.len() {
        Some(m2.into_iter().flatten().collect())
    } else {
        return Err(GraphError::Invalid {
            path: "$.ops".into(),
            message: format!(
                "'m2' given on {annotated} of {} weighted ops; annotate all or none",
                m2.len()
            ),
        });
    };

    Ok(SpecDocument {
        graph: NetworkGraph::new(input, ops),
        weight_m2,
    })
}

fn parse_ops(value: &Value, path: &str, m2: &mut Vec<Option<f64>>) -> Result<Vec<OpKind>, GraphError> {
    let items = value
        .as_array()
        .ok_or_else(|| expected(path, "an array of ops"))?;
    items
        .iter()
        .enumerate()
        .map(|(i, item)| parse_op(item, &format!("{path}[{i}]"), m2))
        .collect()
}

fn parse_op(value: &Value, path: &str, m2: &mut Vec<Option<f64>>) -> Result<OpKind, GraphError> {
    let obj = as_object(value, path)?;
    let kind = obj
        .get("op")
        .ok_or_else(|| expected(path, "field 'op'"))?
        .as_str()
        .ok_or_else(|| expected(&format!("{path}.op"), "a string"))?;

    let op = match kind {
        "conv" => {
            reject_unknown(obj, path, &["op", "out", "k", "stride", "m2"])?;
            let k = positive(obj, path, "k")?;
            let stride = optional_positive(obj, path, "stride")?.unwrap_or(k);
            m2.push(weight_moment(obj, path)?);
            OpKind::Conv {
                out: positive(obj, path, "out")?,
                k,
                stride,
            }
        }
        "linear" => {
            reject_unknown(obj, path, &["op", "out", "m2"])?;
            m2.push(weight_moment(obj, path)?);
            OpKind::Linear {
                out: positive(obj, path, "out")?,
            }
        }
        "avgpool" | "maxpool" => {
            reject_unknown(obj, path, &["op", "k", "stride"])?;
            let k = positive(obj, path, "k")?;
            let stride = optional_positive(obj, path, "stride")?.unwrap_or(k);
            if kind == "avgpool" {
                OpKind::AvgPool { k, stride }
            } else {
                OpKind::MaxPool { k, stride }
            }
        }
        "relu" => {
            reject_unknown(obj, path, &["op"])?;
            OpKind::Relu
        }
        "bias" => {
            reject_unknown(obj, path, &["op"])?;
            OpKind::BiasAdd
        }
        "dropout" => {
            reject_unknown(obj, path, &["op", "p"])?;
            let p = real(obj, path, "p")?;
            if !(0.0..1.0).contains(&p) {
                return Err(GraphError::Invalid {
                    path: format!("{path}.p"),
                    message: format!("dropout probability must be in [0, 1), got {p}"),
                });
            }
            OpKind::Dropout { p }
        }
        "scalar" => {
            reject_unknown(obj, path, &["op", "value", "learnable"])?;
            let value = real(obj, path, "value")?;
            if value <= 0.0 {
                return Err(GraphError::Invalid {
                    path: format!("{path}.value"),
                    message: format!("scalar multiplier must be positive, got {value}"),
                });
            }
            let learnable = match obj.get("learnable") {
                None => false,
                Some(v) => v
                    .as_bool()
                    .ok_or_else(|| expected(&format!("{path}.learnable"), "a boolean"))?,
            };
            if learnable {
                OpKind::LearnableScalar { init: value }
            } else {
                OpKind::FixedScalar { value }
            }
        }
        "residual" => {
            reject_unknown(obj, path, &["op", "alpha", "beta", "main", "shortcut"])?;
            let alpha = real(obj, path, "alpha")?;
            let beta = real(obj, path, "beta")?;
            let sum = alpha * alpha + beta * beta;
            if (sum - 1.0).abs() > RESIDUAL_NORM_TOL {
                return Err(GraphError::ResidualNorm {
                    path: path.to_string(),
                    sum,
                });
            }
            let main = obj
                .get("main")
                .ok_or_else(|| expected(path, "field 'main'"))?;
            let main = parse_ops(main, &format!("{path}.main"), m2)?;
            let shortcut = match obj.get("shortcut") {
                Some(v) => parse_ops(v, &format!("{path}.shortcut"), m2)?,
                None => Vec::new(),
            };
            OpKind::Residual(ResidualBlock {
                alpha,
                beta,
                main,
                shortcut,
            })
        }
        "sigmoid" | "tanh" => {
            return Err(GraphError::Unsupported {
                path: path.to_string(),
                kind: kind.to_string(),
            })
        }
        other => {
            return Err(GraphError::UnknownOp {
                path: path.to_string(),
                kind: other.to_string(),
            })
        }
    };
    Ok(op)
}

fn weight_moment(obj: &Map<String, Value>, path: &str) -> Result<Option<f64>, GraphError> {
    if !obj.contains_key("m2") {
        return Ok(None);
    }
    let m2 = real(obj, path, "m2")?;
    if m2 <= 0.0 {
        return Err(GraphError::Invalid {
            path: format!("{path}.m2"),
            message: format!("weight second moment must be positive, got {m2}"),
        });
    }
    Ok(Some(m2))
}

fn expected(path: &str, what: &str) -> GraphError {
    GraphError::Expected {
        path: path.to_string(),
        expected: what.to_string(),
    }
}

fn as_object<'a>(value: &'a Value, path: &str) -> Result<&'a Map<String, Value>, GraphError> {
    value.as_object().ok_or_else(|| expected(path, "an object"))
}

fn reject_unknown(obj: &Map<String, Value>, path: &str, allowed: &[&str]) -> Result<(), GraphError> {
    match obj.keys().find(|k| !allowed.contains(&k.as_str())) {
        Some(field) => Err(GraphError::UnexpectedField {
            path: path.to_string(),
            field: field.clone(),
        }),
        None => Ok(()),
    }
}

fn positive(obj: &Map<String, Value>, path: &str, field: &str) -> Result<usize, GraphError> {
    optional_positive(obj, path, field)?.ok_or_else(|| expected(path, &format!("field '{field}'")))
}

fn optional_positive(obj: &Map<String, Value>, path: &str, field: &str) -> Result<Option<usize>, GraphError> {
    let Some(value) = obj.get(field) else {
        return Ok(None);
    };
    match value.as_i64() {
        Some(v) if v > 0 => Ok(Some(v as usize)),
        _ => Err(GraphError::NonPositive {
            path: path.to_string(),
            field: field.to_string(),
            value: value.to_string(),
        }),
    }
}

fn real(obj: &Map<String, Value>, path: &str, field: &str) -> Result<f64, GraphError> {
    obj.get(field)
        .ok_or_else(|| expected(path, &format!("field '{field}'")))?
        .as_f64()
        .filter(|v| v.is_finite())
        .ok_or_else(|| expected(&format!("{path}.{field}"), "a finite number"))
}

/// Render a graph (and optionally its weight moments) as a spec document.
pub fn to_document(graph: &NetworkGraph, weight_m2: Option<&[f64]>) -> Value {
    let mut m2 = weight_m2.map(|m| m.iter());
    let ops = ops_to_json(&graph.ops, &mut m2);
    serde_json::json!({
        "input": {"n": graph.input.n, "h": graph.input.h, "w": graph.input.w},
        "ops": ops,
    })
}

fn ops_to_json<'a>(ops: &[OpKind], m2: &mut Option<impl Iterator<Item = &'a f64>>) -> Value {
    Value::Array(ops.iter().map(|op| op_to_json(op, m2)).collect())
}

fn op_to_json<'a>(op: &OpKind, m2: &mut Option<impl Iterator<Item = &'a f64>>) -> Value {
    use serde_json::json;
    let mut value = match op {
        OpKind::Linear { out } => json!({"op": "linear", "out": out}),
        OpKind::Conv { out, k, stride } => json!({"op": "conv", "out": out, "k": k, "stride": stride}),
        OpKind::AvgPool { k, stride } => json!({"op": "avgpool", "k": k, "stride": stride}),
        OpKind::MaxPool { k, stride } => json!({"op": "maxpool", "k": k, "stride": stride}),
        OpKind::Relu => json!({"op": "relu"}),
        OpKind::Dropout { p } => json!({"op": "dropout", "p": p}),
        OpKind::FixedScalar { value } => json!({"op": "scalar", "value": value}),
        OpKind::LearnableScalar { init } => json!({"op": "scalar", "value": init, "learnable": true}),
        OpKind::BiasAdd => json!({"op": "bias"}),
        OpKind::Residual(block) => json!({
            "op": "residual",
            "alpha": block.alpha,
            "beta": block.beta,
            "main": ops_to_json(&block.main, m2),
            "shortcut": ops_to_json(&block.shortcut, m2),
        }),
    };
    if op.is_weighted() {
        if let Some(next) = m2.as_mut().and_then(|it| it.next()) {
            value["m2"] = json!(next);
        }
    }
    value
}
