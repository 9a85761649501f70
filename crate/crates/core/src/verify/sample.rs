use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::engine::{Params, Program};
use super::VerifyError;
use crate::graph::{infer_shapes, NetworkGraph};
use crate::initplan::{Distribution, InitPlan};

/// Relative tolerance of the sampling sanity check.
pub const SANITY_TOL: f64 = 0.05;
/// Layers smaller than this are exempt from the sanity check.
pub const SANITY_MIN_PARAMS: usize = 1000;

/// A network description with a planned `E[W²]` for every weighted layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub graph: NetworkGraph,
    pub weight_m2: Vec<f64>,
    pub distribution: Distribution,
}

impl Model {
    pub fn new(graph: &NetworkGraph, weight_m2: Vec<f64>, distribution: Distribution) -> Result<Self, VerifyError> {
        let graph = infer_shapes(graph)?;
        let expected = graph.weighted_count();
        if weight_m2.len() != expected {
            return Err(VerifyError::Mismatch(format!(
                "network has {expected} weighted layers but {} weight moments were given",
                weight_m2.len()
            )));
        }
        if let Some(m) = weight_m2.iter().find(|m| !(m.is_finite() && **m > 0.0)) {
            return Err(VerifyError::Mismatch(format!("weight second moment must be positive, got {m}")));
        }
        Ok(Self { graph, weight_m2, distribution })
    }

    pub fn from_plan(plan: &InitPlan) -> Self {
        Self {
            graph: plan.network.clone(),
            weight_m2: plan.weights.clone(),
            distribution: plan.layers.first().map(|l| l.distribution).unwrap_or_default(),
        }
    }
}

/// Concrete weights for a [`Model`]; biases are zero, scalars at their
/// planned values.
#[derive(Debug, Clone, PartialEq)]
pub struct SampledNet {
    pub program: Program,
    pub params: Params,
    pub weight_m2: Vec<f64>,
}

impl SampledNet {
    pub fn empirical_m2(&self, layer: usize) -> f64 {
        let w = &self.params.weights[layer];
        w.iter().map(|v| v * v).sum::<f64>() / w.len() as f64
    }

    /// Layers of at least [`SANITY_MIN_PARAMS`] entries whose empirical mean
    /// square is off the plan by more than [`SANITY_TOL`].
    pub fn sanity_warnings(&self) -> Vec<String> {
        (0..self.params.weights.len())
            .filter(|&l| self.params.weights[l].len() >= SANITY_MIN_PARAMS)
            .filter_map(|l| {
                let rel = self.empirical_m2(l) / self.weight_m2[l] - 1.0;
                (rel.abs() > SANITY_TOL).then(|| format!("layer {l}: sampled E[W²] is {:+.1}% off the plan", 100.0 * rel))
            })
            .collect()
    }
}

pub(crate) fn sample_with(model: &Model, rng: &mut impl Rng) -> Result<SampledNet, VerifyError> {
    let program = Program::compile(&model.graph)?;
    let mut params = program.zero_params();
    for (w, m2) in params.weights.iter_mut().zip(&model.weight_m2) {
        match model.distribution {
            Distribution::Gaussian => {
                let std = m2.sqrt();
                w.iter_mut().for_each(|v| *v = std * rng.sample::<f64, _>(rand_distr::StandardNormal));
            }
            Distribution::Uniform => {
                let half = (3.0 * m2).sqrt();
                w.iter_mut().for_each(|v| *v = rng.random_range(-half..half));
            }
        }
    }
    Ok(SampledNet {
        program,
        params,
        weight_m2: model.weight_m2.clone(),
    })
}

/// Purposes of the independent random streams.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub(crate) enum Purpose {
    Weights = 1,
    Loss = 2,
    Data = 3,
    Probe = 4,
    Dropout = 5,
}

/// The stream for `(trial, chunk, purpose)` under `seed`.
pub(crate) fn stream_rng(seed: u64, trial: u64, chunk: u64, purpose: Purpose) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((trial << 32) | (chunk << 8) | purpose as u64);
    rng
}

/// Draw weights; the same seed always gives bit-identical weights, and trial
/// 0 of a verification run uses exactly these.
pub fn sample_weights(model: &Model, seed: u64) -> Result<SampledNet, VerifyError> {
    sample_with(model, &mut stream_rng(seed, 0, 0, Purpose::Weights))
}
