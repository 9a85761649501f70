use std::fmt;

use serde::Serialize;

use super::{GraphError, NetworkGraph, OpKind, OpPath, Step};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Severity {
    Info,
    Warning,
    Error,
}

impl fmt::Display for Severity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Severity::Info => "info",
            Severity::Warning => "warning",
            Severity::Error => "error",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Diagnostic {
    pub severity: Severity,
    pub position: OpPath,
    pub code: &'static str,
    pub message: String,
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} [{}] at {}: {}", self.severity, self.code, self.position, self.message)
    }
}

impl Serialize for Diagnostic {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        use serde::ser::SerializeStruct;
        let mut s = serializer.serialize_struct("Diagnostic", 4)?;
        s.serialize_field("severity", &self.severity)?;
        s.serialize_field("position", &self.position.to_string())?;
        s.serialize_field("code", self.code)?;
        s.serialize_field("message", &self.message)?;
        s.end()
    }
}

/// Flag ops whose scaling is not covered by the analytic rules.
///
/// Warnings mark places where the calculus is unsupported or approximate;
/// `Info` notes mark accepted ops with a caveat. Never fails on a
/// shape-inferred graph.
pub fn lint_scaling(graph: &NetworkGraph) -> Result<Vec<Diagnostic>, GraphError> {
    graph.shapes()?;
    let mut out = Vec::new();
    lint_list(&graph.ops, &OpPath::root(), &mut out);
    out.sort_by(|a, b| a.position.cmp(&b.position).then(a.code.cmp(b.code)));
    Ok(out)
}

fn lint_list(ops: &[OpKind], list: &OpPath, out: &mut Vec<Diagnostic>) {
    let mut prev: Option<&OpKind> = None;
    for (i, op) in ops.iter().enumerate() {
        let path = list.child(Step::Op(i));
        let mut emit = |severity, code, message: String| {
            out.push(Diagnostic {
                severity,
                position: path.clone(),
                code,
                message,
            })
        };
        match op {
            OpKind::MaxPool { .. } => emit(
                Severity::Warning,
                "MAXPOOL_UNSCALED",
                "max pooling does not maintain the activation scaling factor; use a strided op".into(),
            ),
            OpKind::Conv { k, stride, .. } | OpKind::AvgPool { k, stride } => {
                if *stride > 1 && stride != k {
                    emit(
                        Severity::Warning,
                        "STRIDE_NEQ_KERNEL",
                        format!("stride {stride} differs from kernel size {k}; scaling is only maintained when they are equal"),
                    );
                } else if *stride == 1 && *k > 1 {
                    emit(
                        Severity::Info,
                        "STRIDE_ONE_PADDED",
                        format!("stride-1 {k}x{k} {} treated as same-padded; boundary effects are ignored", op.name()),
                    );
                }
                if matches!(op, OpKind::AvgPool { .. }) && matches!(prev, Some(OpKind::Relu)) {
                    emit(
                        Severity::Warning,
                        "AVGPOOL_AFTER_RELU",
                        "average pooling of non-centered (post-ReLU) values; the forward moment rule assumes zero mean".into(),
                    );
                }
            }
            OpKind::Residual(block) => {
                lint_list(&block.main, &path.child(Step::Main), out);
                lint_list(&block.shortcut, &path.child(Step::Shortcut), out);
            }
            _ => {}
        }
        prev = Some(op);
    }
}

/// True when every op is one the calculus handles exactly.
pub fn is_clean(diagnostics: &[Diagnostic]) -> bool {
    diagnostics.iter().all(|d| d.severity == Severity::Info)
}
