//! Scaling factors derived from a moment tape.
//!
//! For a layer, `γ` is the ratio `E[ΔW²]/E[W²]` a plain SGD step would see at
//! initialization. Equal `γ` across layers is what "preconditioned" means
//! here, with biases and learnable scalars judged the same way.

use serde::Serialize;
use thiserror::Error;

use crate::graph::{EdgeShape, GraphError, LayerInfo, LayerKind, NetworkGraph, OpKind};
use crate::moments::{propagate, MomentError, MomentPair, MomentTape};

/// Default relative tolerance for analytic verdicts.
pub const DEFAULT_REL_TOL: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ScalingError {
    #[error("{what} must be positive and finite, got {value}")]
    NonPositive { what: &'static str, value: f64 },
    #[error("report has no weights or scalars to compare")]
    Empty,
    #[error(transparent)]
    Moments(#[from] MomentError),
    #[error(transparent)]
    Graph(#[from] GraphError),
}

fn positive(what: &'static str, value: f64) -> Result<f64, ScalingError> {
    if value.is_finite() && value > 0.0 {
        Ok(value)
    } else {
        Err(ScalingError::NonPositive { what, value })
    }
}

/// `ς = n·ρ²·E[Δx²]·E[x²]` on one edge.
pub fn activation_scale(edge: EdgeShape, m: MomentPair) -> Result<f64, ScalingError> {
    positive("forward moment", m.fwd)?;
    positive("backward moment", m.bwd)?;
    Ok(edge.numel() as f64 * m.bwd * m.fwd)
}

/// `γ = ς / (n_out·n_in·k²·E[W²]²)` from the input-edge `ς`.
pub fn weight_scale_intrinsic(layer: &LayerInfo, sigma_in: f64, ew2: f64) -> Result<f64, ScalingError> {
    positive("weight second moment", ew2)?;
    positive("activation scale", sigma_in)?;
    let k2 = (layer.k * layer.k) as f64;
    Ok(sigma_in / (layer.fan_out as f64 * layer.fan_in as f64 * k2 * ew2 * ew2))
}

/// `γ = n_in·k²·ρ_out²·E[x_in²]²·E[Δx_out²]/E[x_out²]`, from moments alone.
pub fn weight_scale_extrinsic(layer: &LayerInfo, m_in: MomentPair, m_out: MomentPair) -> Result<f64, ScalingError> {
    extrinsic(layer, m_in, m_out, layer.output_shape.area())
}

/// The same expression with the input resolution `ρ_in²` in place of
/// `ρ_out²`. It agrees with [`weight_scale_extrinsic`] only when the layer
/// keeps the spatial size.
pub fn weight_scale_extrinsic_input_res(layer: &LayerInfo, m_in: MomentPair, m_out: MomentPair) -> Result<f64, ScalingError> {
    let area = match layer.kind {
        LayerKind::Conv => layer.input_shape.area(),
        LayerKind::Linear => 1,
    };
    extrinsic(layer, m_in, m_out, area)
}

fn extrinsic(layer: &LayerInfo, m_in: MomentPair, m_out: MomentPair, area: usize) -> Result<f64, ScalingError> {
    positive("forward moment", m_in.fwd)?;
    positive("forward moment", m_out.fwd)?;
    positive("backward moment", m_out.bwd)?;
    let k2 = (layer.k * layer.k) as f64;
    Ok(layer.fan_in as f64 * k2 * area as f64 * m_in.fwd * m_in.fwd * m_out.bwd / m_out.fwd)
}

/// Analytic `E[ΔW²]/E[W²]` with `E[ΔW²] = ρ_out²·E[x_in²]·E[Δx_out²]`.
pub fn weight_gradient_ratio(layer: &LayerInfo, m_in: MomentPair, m_out: MomentPair, ew2: f64) -> Result<f64, ScalingError> {
    positive("weight second moment", ew2)?;
    Ok(layer.output_shape.area() as f64 * m_in.fwd * m_out.bwd / ew2)
}

/// `γ_b = ρ²·E[Δx²]/E[x²]` on the edge the bias is added to.
pub fn bias_scale(shape: EdgeShape, m: MomentPair) -> Result<f64, ScalingError> {
    positive("forward moment", m.fwd)?;
    positive("backward moment", m.bwd)?;
    Ok(shape.area() as f64 * m.bwd / m.fwd)
}

/// `ν = ς / E[u²]²` for a learnable scalar multiplier.
pub fn scalar_scale(u2: f64, sigma: f64) -> Result<f64, ScalingError> {
    positive("scalar second moment", u2)?;
    positive("activation scale", sigma)?;
    Ok(sigma / (u2 * u2))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum RecordKind {
    Conv,
    Linear,
    Bias,
    Scalar,
}

/// One weight, bias or learnable scalar.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScalingRecord {
    /// Position among records of the same kind.
    pub index: usize,
    pub kind: RecordKind,
    pub path: String,
    /// `ς` on the record's input edge.
    pub sigma: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gamma_intrinsic: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gamma_extrinsic: Option<f64>,
    /// Main-text variant with `ρ_in²`; present only where it differs.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gamma_extrinsic_input_res: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gamma_bias: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub nu_scalar: Option<f64>,
}

impl ScalingRecord {
    /// The value compared by [`preconditioned_check`].
    pub fn value(&self) -> f64 {
        self.gamma_intrinsic
            .or(self.nu_scalar)
            .or(self.gamma_bias)
            .expect("record carries a scale")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EdgeScale {
    pub position: String,
    pub shape: String,
    pub fwd: f64,
    pub bwd: f64,
    pub sigma: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScalingReport {
    pub edges: Vec<EdgeScale>,
    pub records: Vec<ScalingRecord>,
}

impl ScalingReport {
    pub fn layers(&self) -> impl Iterator<Item = &ScalingRecord> {
        self.records
            .iter()
            .filter(|r| matches!(r.kind, RecordKind::Conv | RecordKind::Linear))
    }

    pub fn biases(&self) -> impl Iterator<Item = &ScalingRecord> {
        self.records.iter().filter(|r| r.kind == RecordKind::Bias)
    }

    pub fn scalars(&self) -> impl Iterator<Item = &ScalingRecord> {
        self.records.iter().filter(|r| r.kind == RecordKind::Scalar)
    }
}

/// Scaling factors for every edge, weighted layer, bias and learnable scalar.
pub fn build_report(graph: &NetworkGraph, tape: &MomentTape) -> Result<ScalingReport, ScalingError> {
    let shapes = graph.shapes()?;
    let edges = shapes
        .flatten()
        .into_iter()
        .map(|(pos, shape)| {
            let m = *tape.edges.get(&pos).expect("tape matches graph layout");
            Ok(EdgeScale {
                position: pos.to_string(),
                shape: shape.to_string(),
                fwd: m.fwd,
                bwd: m.bwd,
                sigma: activation_scale(*shape, m)?,
            })
        })
        .collect::<Result<Vec<_>, ScalingError>>()?;

    let layers = graph.layers()?;
    let mut layer_iter = layers.iter();
    let mut records = Vec::new();
    let (mut n_bias, mut n_scalar) = (0, 0);
    for site in graph.sites()? {
        let m_in = *tape.edges.get(&site.input).expect("tape matches graph layout");
        let m_out = *tape.edges.get(&site.output).expect("tape matches graph layout");
        let sigma = activation_scale(site.input_shape, m_in)?;
        let mut record = ScalingRecord {
            index: 0,
            kind: RecordKind::Bias,
            path: site.path.to_string(),
            sigma,
            gamma_intrinsic: None,
            gamma_extrinsic: None,
            gamma_extrinsic_input_res: None,
            gamma_bias: None,
            nu_scalar: None,
        };
        match site.op {
            OpKind::Conv { .. } | OpKind::Linear { .. } => {
                let layer = layer_iter.next().expect("one layer per weighted site");
                let ew2 = tape.weight_m2[layer.index];
                let extrinsic = weight_scale_extrinsic(layer, m_in, m_out)?;
                let input_res = weight_scale_extrinsic_input_res(layer, m_in, m_out)?;
                record.index = layer.index;
                record.kind = match layer.kind {
                    LayerKind::Conv => RecordKind::Conv,
                    LayerKind::Linear => RecordKind::Linear,
                };
                record.gamma_intrinsic = Some(weight_scale_intrinsic(layer, sigma, ew2)?);
                record.gamma_extrinsic = Some(extrinsic);
                record.gamma_extrinsic_input_res = ((input_res - extrinsic).abs() > 1e-12 * extrinsic).then_some(input_res);
            }
            OpKind::BiasAdd => {
                record.index = n_bias;
                n_bias += 1;
                record.gamma_bias = Some(bias_scale(site.input_shape, m_in)?);
            }
            OpKind::LearnableScalar { init } => {
                record.index = n_scalar;
                n_scalar += 1;
                record.kind = RecordKind::Scalar;
                record.nu_scalar = Some(scalar_scale(init * init, sigma)?);
            }
            _ => continue,
        }
        records.push(record);
    }
    Ok(ScalingReport { edges, records })
}

/// Propagate moments and build the report in one step.
pub fn analyze(graph: &NetworkGraph, weights: &[f64], input_m2: f64, output_g2: f64) -> Result<(MomentTape, ScalingReport), ScalingError> {
    let tape = propagate(graph, weights, input_m2, output_g2)?;
    let report = build_report(graph, &tape)?;
    Ok((tape, report))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Verdict {
    pub preconditioned: bool,
    /// max/min of `γ` over weights and learnable scalars.
    pub weight_ratio: f64,
    /// max/min of `γ_b`, when the network has biases.
    pub bias_ratio: Option<f64>,
}

fn spread(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (lo, hi) = values.fold((f64::INFINITY, 0.0f64), |(lo, hi), v| (lo.min(v), hi.max(v)));
    (hi > 0.0).then(|| hi / lo)
}

/// Preconditioned iff weight and scalar scales agree within `1 + rel_tol`,
/// and separately all bias scales do.
pub fn preconditioned_check(report: &ScalingReport, rel_tol: f64) -> Result<Verdict, ScalingError> {
    let weight_ratio = spread(report.layers().chain(report.scalars()).map(ScalingRecord::value)).ok_or(ScalingError::Empty)?;
    let bias_ratio = spread(report.biases().map(ScalingRecord::value));
    let limit = 1.0 + rel_tol;
    Ok(Verdict {
        preconditioned: weight_ratio <= limit && bias_ratio.is_none_or(|r| r <= limit),
        weight_ratio,
        bias_ratio,
    })
}
