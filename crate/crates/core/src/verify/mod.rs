//! Monte-Carlo checks of the analytic calculus.
//!
//! Each trial samples fresh weights, a random quadratic loss `yᵀSy` and a
//! batch of standard-normal inputs, then measures per-sample quantities:
//! edge moments, the weight-to-gradient ratio `ν̂` and the mean squared
//! singular value `ĝ` of each layer's Gauss-Newton block. Trials and batch
//! chunks draw from independent streams keyed by `(seed, trial, chunk)` and
//! are reduced in index order, so reports do not depend on thread count.

mod engine;
mod loss;
mod sample;

use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

pub use engine::{backward, forward, jvp_layer, normal_vec, EdgeSums, Node, NodeKind, Params, Program, Request, Trace};
pub use loss::QuadraticLoss;
pub use sample::{sample_weights, Model, SampledNet, SANITY_MIN_PARAMS, SANITY_TOL};

use crate::graph::{EdgeList, GraphError};
use crate::moments::{MomentError, MomentPair};
use crate::scaling::{analyze, weight_scale_extrinsic, ScalingError, ScalingReport};
use engine::accumulate_forward;
use sample::{sample_with, stream_rng, Purpose};

/// Samples per batch chunk; chunks are the unit of parallel work.
const CHUNK: usize = 128;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum VerifyError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("mismatch: {0}")]
    Mismatch(String),
    #[error("non-finite value in {0}; the network overflows")]
    NonFinite(String),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Moments(#[from] MomentError),
    #[error(transparent)]
    Scaling(#[from] ScalingError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProbeMode {
    /// `count` i.i.d. standard-normal probes per sample.
    Gaussian { count: usize },
    /// `r = √d·e_j` for every coordinate `j`; exact `‖G‖_F²/d`.
    Basis,
}

impl std::fmt::Display for ProbeMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ProbeMode::Gaussian { count } => write!(f, "gaussian x{count}"),
            ProbeMode::Basis => write!(f, "basis"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EstimationConfig {
    pub batch: usize,
    pub trials: usize,
    pub seed: u64,
    pub probes: ProbeMode,
}

impl Default for EstimationConfig {
    fn default() -> Self {
        Self {
            batch: 1024,
            trials: 10,
            seed: 0,
            probes: ProbeMode::Gaussian { count: 1 },
        }
    }
}

impl EstimationConfig {
    pub fn validate(&self) -> Result<(), VerifyError> {
        if self.batch == 0 || self.trials == 0 {
            return Err(VerifyError::Config(format!("batch and trials must be at least 1 (got {}, {})", self.batch, self.trials)));
        }
        if self.probes == (ProbeMode::Gaussian { count: 0 }) {
            return Err(VerifyError::Config("probe count must be at least 1".into()));
        }
        Ok(())
    }
}

fn mean_square(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>() / v.len() as f64
}

/// Per-layer mean of `ΔW²` for one sample's loss gradient.
pub fn weight_gradient_sample(net: &SampledNet, loss: &QuadraticLoss, x: &[f64]) -> Vec<f64> {
    let trace = forward(&net.program, &net.params, x, None);
    let mut grads = net.params.zeros_like();
    backward(&net.program, &net.params, &trace, loss.gradient(trace.output()), Request::ALL, &mut grads, None);
    grads.weights.iter().map(|g| mean_square(g)).collect()
}

/// `mean_r ‖G_l r‖²/d` for one sample, with `G_l = J_lᵀ H J_l`.
pub fn probe_sample(net: &SampledNet, loss: &QuadraticLoss, trace: &Trace, layer: usize, probes: ProbeMode, rng: &mut impl rand::Rng) -> f64 {
    let d = net.program.weight_len(layer);
    let mut gw = net.params.zeros_like();
    let mut one = |r: &[f64]| {
        let t = jvp_layer(&net.program, &net.params, trace, layer, r);
        let u = loss.hessian_mul(&t);
        gw.weights[layer].fill(0.0);
        backward(&net.program, &net.params, trace, u, Request::layer(layer), &mut gw, None);
        gw.weights[layer].iter().map(|v| v * v).sum::<f64>() / d as f64
    };
    match probes {
        ProbeMode::Gaussian { count } => (0..count).map(|_| one(&normal_vec(rng, d))).sum::<f64>() / count as f64,
        ProbeMode::Basis => {
            let scale = (d as f64).sqrt();
            let mut r = vec![0.0; d];
            let mut total = 0.0;
            for j in 0..d {
                r[j] = scale;
                total += one(&r);
                r[j] = 0.0;
            }
            total / d as f64
        }
    }
}

/// Everything a trial draws before probing: the network, the loss and the
/// batch of inputs, exactly as [`run_verification`] sees them.
#[derive(Debug, Clone, PartialEq)]
pub struct TrialSetup {
    pub net: SampledNet,
    pub loss: QuadraticLoss,
    pub inputs: Vec<Vec<f64>>,
}

pub fn trial_setup(model: &Model, cfg: &EstimationConfig, trial: usize) -> Result<TrialSetup, VerifyError> {
    cfg.validate()?;
    let net = sample_with(model, &mut stream_rng(cfg.seed, trial as u64, 0, Purpose::Weights))?;
    let loss = QuadraticLoss::random(net.program.output.numel(), &mut stream_rng(cfg.seed, trial as u64, 0, Purpose::Loss));
    let numel = net.program.input.numel();
    let mut inputs = Vec::with_capacity(cfg.batch);
    for c in 0..cfg.batch.div_ceil(CHUNK) {
        let mut data = stream_rng(cfg.seed, trial as u64, c as u64, Purpose::Data);
        for _ in 0..CHUNK.min(cfg.batch - c * CHUNK) {
            inputs.push(normal_vec(&mut data, numel));
        }
    }
    Ok(TrialSetup { net, loss, inputs })
}

#[derive(Debug, Clone, Copy)]
struct Tasks {
    moments: bool,
    nu: bool,
    probe: bool,
}

/// Sums over one chunk (or, once reduced, one trial).
#[derive(Debug, Clone)]
struct Sums {
    fwd: EdgeSums,
    bwd: EdgeSums,
    nu: Vec<f64>,
    g: Vec<f64>,
}

impl Sums {
    fn zeros(layout: &EdgeSums, layers: usize) -> Self {
        Self {
            fwd: layout.clone(),
            bwd: layout.clone(),
            nu: vec![0.0; layers],
            g: vec![0.0; layers],
        }
    }

    fn add(mut self, other: &Sums) -> Self {
        self.fwd = self.fwd.zip_with(&other.fwd, &mut |a, b| a + b);
        self.bwd = self.bwd.zip_with(&other.bwd, &mut |a, b| a + b);
        self.nu.iter_mut().zip(&other.nu).for_each(|(a, b)| *a += b);
        self.g.iter_mut().zip(&other.g).for_each(|(a, b)| *a += b);
        self
    }
}

/// Results of one trial, already normalized by the batch size.
#[derive(Debug, Clone)]
struct TrialStats {
    fwd: EdgeList<f64>,
    bwd: EdgeList<f64>,
    nu_hat: Vec<f64>,
    g_hat: Vec<f64>,
    /// `γ` from this trial's measured edge moments; empty unless moments
    /// were estimated.
    gamma_measured: Vec<f64>,
    /// `‖H‖_F²/n_out`, which maps `E[y²]` to `E[Δy²]` at the output.
    loss_gain: f64,
    warnings: Vec<String>,
}

fn run_chunk(net: &SampledNet, loss: &QuadraticLoss, cfg: &EstimationConfig, trial: usize, chunk: usize, tasks: Tasks, layout: &EdgeSums) -> Sums {
    let (t, c) = (trial as u64, chunk as u64);
    let mut data = stream_rng(cfg.seed, t, c, Purpose::Data);
    let mut probe_rng = stream_rng(cfg.seed, t, c, Purpose::Probe);
    let mut drop_rng = stream_rng(cfg.seed, t, c, Purpose::Dropout);
    let program = &net.program;
    let layers = program.layers.len();
    let mut sums = Sums::zeros(layout, layers);
    let mut grads = net.params.zeros_like();
    let count = CHUNK.min(cfg.batch - chunk * CHUNK);
    for _ in 0..count {
        let x = normal_vec(&mut data, program.input.numel());
        let dropout: Option<&mut dyn rand::RngCore> = (program.has_dropout && (tasks.moments || tasks.nu)).then_some(&mut drop_rng);
        let trace = forward(program, &net.params, &x, dropout);
        if tasks.moments {
            accumulate_forward(&trace, &mut sums.fwd);
        }
        if tasks.moments || tasks.nu {
            grads.fill_zero();
            let edge_sums = tasks.moments.then_some(&mut sums.bwd);
            let req = if tasks.nu { Request::ALL } else { Request::EDGES };
            backward(program, &net.params, &trace, loss.gradient(trace.output()), req, &mut grads, edge_sums);
            for (s, g) in sums.nu.iter_mut().zip(&grads.weights) {
                *s += mean_square(g);
            }
        }
        if tasks.probe {
            let clean;
            let trace = if program.has_dropout {
                clean = forward(program, &net.params, &x, None);
                &clean
            } else {
                &trace
            };
            for l in 0..layers {
                sums.g[l] += probe_sample(net, loss, trace, l, cfg.probes, &mut probe_rng);
            }
        }
    }
    sums
}

fn run_trial(model: &Model, cfg: &EstimationConfig, trial: usize, tasks: Tasks) -> Result<TrialStats, VerifyError> {
    let net = sample_with(model, &mut stream_rng(cfg.seed, trial as u64, 0, Purpose::Weights))?;
    let n_out = net.program.output.numel();
    let loss = QuadraticLoss::random(n_out, &mut stream_rng(cfg.seed, trial as u64, 0, Purpose::Loss));
    let layout = model.graph.shapes()?.map(&mut |_| 0.0);
    let layers = net.program.layers.len();
    let chunks = cfg.batch.div_ceil(CHUNK);
    let parts: Vec<Sums> = (0..chunks)
        .into_par_iter()
        .map(|c| run_chunk(&net, &loss, cfg, trial, c, tasks, &layout))
        .collect();
    let total = parts.iter().fold(Sums::zeros(&layout, layers), |acc, s| acc.add(s));
    let b = cfg.batch as f64;
    let probes_done = tasks.probe;
    let (fwd, bwd) = (total.fwd.map(&mut |v| v / b), total.bwd.map(&mut |v| v / b));
    let mut gamma_measured = Vec::new();
    if tasks.moments {
        let pair = |pos| MomentPair::new(*fwd.get(pos).expect("edge"), *bwd.get(pos).expect("edge"));
        for info in &net.program.layers {
            let g = weight_scale_extrinsic(info, pair(&info.input), pair(&info.output)).map_err(|_| VerifyError::NonFinite(format!("trial {trial}: moments around {}", info.path)))?;
            gamma_measured.push(g);
        }
    }
    let stats = TrialStats {
        gamma_measured,
        fwd,
        bwd,
        nu_hat: total.nu.iter().enumerate().map(|(l, s)| s / b / net.empirical_m2(l)).collect(),
        g_hat: if probes_done { total.g.iter().map(|s| s / b).collect() } else { vec![0.0; layers] },
        loss_gain: loss.hessian_frobenius2() / n_out as f64,
        warnings: net.sanity_warnings().into_iter().map(|w| format!("trial {trial}: {w}")).collect(),
    };
    let finite = |v: &[f64]| v.iter().all(|x| x.is_finite());
    if !finite(&stats.nu_hat) || !finite(&stats.g_hat) || !stats.fwd.flatten().iter().chain(stats.bwd.flatten().iter()).all(|(_, v)| v.is_finite()) {
        return Err(VerifyError::NonFinite(format!("trial {trial}")));
    }
    Ok(stats)
}

fn run_trials(model: &Model, cfg: &EstimationConfig, tasks: Tasks) -> Result<Vec<TrialStats>, VerifyError> {
    cfg.validate()?;
    model.graph.shapes()?;
    (0..cfg.trials).into_par_iter().map(|t| run_trial(model, cfg, t, tasks)).collect()
}

fn pooled(stats: &[TrialStats], pick: impl Fn(&TrialStats) -> &EdgeList<f64>) -> EdgeList<f64> {
    let n = stats.len() as f64;
    let sum = stats[1..].iter().fold(pick(&stats[0]).clone(), |acc, s| acc.zip_with(pick(s), &mut |a, b| a + b));
    sum.map(&mut |v| v / n)
}

/// Empirical `E[x²]` and `E[Δx²]` on every edge, pooled over batch and trials.
pub fn estimate_edge_moments(model: &Model, cfg: &EstimationConfig) -> Result<EdgeList<MomentPair>, VerifyError> {
    let stats = run_trials(model, cfg, Tasks { moments: true, nu: false, probe: false })?;
    let (fwd, bwd) = (pooled(&stats, |s| &s.fwd), pooled(&stats, |s| &s.bwd));
    Ok(fwd.zip_with(&bwd, &mut |f, b| MomentPair::new(*f, *b)))
}

/// Per-layer `ν̂ = mean(ΔW²)/mean(W²)` from per-sample gradients, averaged
/// over trials.
pub fn estimate_weight_gradient_ratio(model: &Model, cfg: &EstimationConfig) -> Result<Vec<f64>, VerifyError> {
    let stats = run_trials(model, cfg, Tasks { moments: false, nu: true, probe: false })?;
    Ok(mean_over(&stats, |s| &s.nu_hat))
}

/// `ĝ` for one layer, averaged over batch and trials.
pub fn gn_block_probe(model: &Model, layer: usize, cfg: &EstimationConfig) -> Result<f64, VerifyError> {
    if layer >= model.weight_m2.len() {
        return Err(VerifyError::Mismatch(format!("layer {layer} does not exist ({} weighted layers)", model.weight_m2.len())));
    }
    let stats = run_trials(model, cfg, Tasks { moments: false, nu: false, probe: true })?;
    Ok(mean_over(&stats, |s| &s.g_hat)[layer])
}

fn mean_over(stats: &[TrialStats], pick: impl Fn(&TrialStats) -> &Vec<f64>) -> Vec<f64> {
    let n = stats.len() as f64;
    let mut out = vec![0.0; pick(&stats[0]).len()];
    for s in stats {
        out.iter_mut().zip(pick(s)).for_each(|(a, b)| *a += b / n);
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerVerify {
    pub index: usize,
    pub path: String,
    pub kind: &'static str,
    pub nu_hat: f64,
    pub g_hat: f64,
    /// `γ` evaluated on measured edge moments, averaged over trials.
    pub gamma_theory: f64,
    /// `γ` from propagated moments at the trial-mean loss curvature.
    pub gamma_analytic: f64,
    /// `γ_theory/ν̂`
    pub ratio_nu: f64,
    /// `γ_theory/ĝ`
    pub ratio_g: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EdgeVerify {
    pub position: String,
    pub fwd: f64,
    pub bwd: f64,
    pub fwd_theory: f64,
    pub bwd_theory: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrialRecord {
    pub trial: usize,
    pub gamma_theory: Vec<f64>,
    pub gamma_analytic: Vec<f64>,
    pub nu_hat: Vec<f64>,
    pub g_hat: Vec<f64>,
    pub ratio_nu: Vec<f64>,
    pub ratio_g: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VerifyReport {
    pub batch: usize,
    pub trials: usize,
    pub seed: u64,
    pub probes: String,
    /// Trial means of `γ_theory` and of the estimates.
    pub layers: Vec<LayerVerify>,
    pub edges: Vec<EdgeVerify>,
    pub per_trial: Vec<TrialRecord>,
    /// Every per-trial, per-layer `γ_theory/ĝ`.
    pub pooled_ratio_g: Vec<f64>,
    pub pooled_ratio_nu: Vec<f64>,
    /// Analytic report at the trial-mean output curvature.
    #[serde(skip)]
    pub analytic: ScalingReport,
    pub warnings: Vec<String>,
}

/// Analytic report for standard-normal data and a loss with
/// `E[Δy²] = loss_gain·E[y²]` at the output.
fn analytic_for(model: &Model, loss_gain: f64) -> Result<ScalingReport, VerifyError> {
    let fwd = crate::moments::forward_moments(&model.graph, &model.weight_m2, 1.0)?;
    let (_, report) = analyze(&model.graph, &model.weight_m2, 1.0, loss_gain * fwd.last())?;
    Ok(report)
}

fn gammas(report: &ScalingReport) -> Vec<f64> {
    report.layers().map(|l| l.gamma_extrinsic.expect("layer record")).collect()
}

/// Run every estimate and set it against the analytic prediction.
pub fn run_verification(model: &Model, cfg: &EstimationConfig) -> Result<VerifyReport, VerifyError> {
    let stats = run_trials(model, cfg, Tasks { moments: true, nu: true, probe: true })?;
    let mut per_trial = Vec::with_capacity(stats.len());
    for (t, s) in stats.iter().enumerate() {
        let gamma = &s.gamma_measured;
        per_trial.push(TrialRecord {
            trial: t,
            gamma_theory: gamma.clone(),
            gamma_analytic: gammas(&analytic_for(model, s.loss_gain)?),
            ratio_nu: gamma.iter().zip(&s.nu_hat).map(|(g, n)| g / n).collect(),
            ratio_g: gamma.iter().zip(&s.g_hat).map(|(g, n)| g / n).collect(),
            nu_hat: s.nu_hat.clone(),
            g_hat: s.g_hat.clone(),
        });
    }
    let mean_gain = stats.iter().map(|s| s.loss_gain).sum::<f64>() / stats.len() as f64;
    let analytic = analytic_for(model, mean_gain)?;
    let (nu_hat, g_hat) = (mean_over(&stats, |s| &s.nu_hat), mean_over(&stats, |s| &s.g_hat));
    let gamma_theory = mean_over(&stats, |s| &s.gamma_measured);
    let layers = analytic
        .layers()
        .zip(&model.graph.layers()?)
        .enumerate()
        .map(|(l, (rec, info))| {
            let gamma = gamma_theory[l];
            LayerVerify {
                index: l,
                path: info.path.to_string(),
                kind: info.kind.name(),
                nu_hat: nu_hat[l],
                g_hat: g_hat[l],
                gamma_theory: gamma,
                gamma_analytic: rec.gamma_extrinsic.expect("layer record"),
                ratio_nu: gamma / nu_hat[l],
                ratio_g: gamma / g_hat[l],
            }
        })
        .collect();
    let (fwd, bwd) = (pooled(&stats, |s| &s.fwd), pooled(&stats, |s| &s.bwd));
    let edges = fwd
        .flatten()
        .into_iter()
        .zip(bwd.flatten())
        .zip(&analytic.edges)
        .map(|(((pos, f), (_, b)), a)| EdgeVerify {
            position: pos.to_string(),
            fwd: *f,
            bwd: *b,
            fwd_theory: a.fwd,
            bwd_theory: a.bwd,
        })
        .collect();
    let pooled_ratio_g = per_trial.iter().flat_map(|t| t.ratio_g.iter().copied()).collect();
    let pooled_ratio_nu = per_trial.iter().flat_map(|t| t.ratio_nu.iter().copied()).collect();
    Ok(VerifyReport {
        batch: cfg.batch,
        trials: cfg.trials,
        seed: cfg.seed,
        probes: cfg.probes.to_string(),
        layers,
        edges,
        per_trial,
        pooled_ratio_g,
        pooled_ratio_nu,
        analytic,
        warnings: stats.into_iter().flat_map(|s| s.warnings).collect(),
    })
}

/// Mean output second moment of trial-0 weights over one batch of
/// standard-normal inputs.
pub fn empirical_output_m2(model: &Model, batch: usize, seed: u64) -> Result<f64, VerifyError> {
    let cfg = EstimationConfig { batch, trials: 1, seed, probes: ProbeMode::Gaussian { count: 1 } };
    let tape = estimate_edge_moments(model, &cfg)?;
    Ok(tape.last().fwd)
}

/// Factor that brings the measured output standard deviation to `target_std`.
pub fn calibrate_output_norm(model: &Model, target_std: f64, batch: usize, seed: u64) -> Result<f64, VerifyError> {
    let m2 = empirical_output_m2(model, batch, seed)?;
    if !(m2.is_finite() && m2 > 0.0) {
        return Err(VerifyError::NonFinite("output second moment".into()));
    }
    Ok(target_std / m2.sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CompareOptions {
    /// A ratio passes when it lies in `[1/tol, tol]`.
    pub tol: f64,
    /// Fraction of layers that must pass.
    pub min_fraction: f64,
}

impl Default for CompareOptions {
    fn default() -> Self {
        Self { tol: 2.0, min_fraction: 0.9 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerVerdict {
    pub index: usize,
    pub path: String,
    pub ratio_g: f64,
    pub ratio_nu: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Comparison {
    pub tol: f64,
    pub min_fraction: f64,
    pub layers: Vec<LayerVerdict>,
    pub fraction: f64,
    pub pass: bool,
}

/// Judge an empirical report against an analytic one over the same graph.
pub fn compare(analytic: &ScalingReport, empirical: &VerifyReport, opts: CompareOptions) -> Result<Comparison, VerifyError> {
    if opts.tol.is_nan() || opts.tol < 1.0 {
        return Err(VerifyError::Config(format!("tolerance must be at least 1, got {}", opts.tol)));
    }
    let theory: Vec<_> = analytic.layers().collect();
    if theory.len() != empirical.layers.len() {
        return Err(VerifyError::Mismatch(format!(
            "analytic report has {} layers, empirical has {}",
            theory.len(),
            empirical.layers.len()
        )));
    }
    let within = |r: f64| r.is_finite() && r >= 1.0 / opts.tol && r <= opts.tol;
    let mut layers = Vec::with_capacity(theory.len());
    for (t, e) in theory.iter().zip(&empirical.layers) {
        if t.path != e.path {
            return Err(VerifyError::Mismatch(format!("layer {} is at {} in one report and {} in the other", e.index, t.path, e.path)));
        }
        let gamma = t.gamma_extrinsic.expect("layer record");
        let (ratio_g, ratio_nu) = (gamma / e.g_hat, gamma / e.nu_hat);
        layers.push(LayerVerdict {
            index: e.index,
            path: e.path.clone(),
            ratio_g,
            ratio_nu,
            pass: within(ratio_g) && within(ratio_nu),
        });
    }
    let fraction = if layers.is_empty() { 1.0 } else { layers.iter().filter(|l| l.pass).count() as f64 / layers.len() as f64 };
    Ok(Comparison {
        tol: opts.tol,
        min_fraction: opts.min_fraction,
        pass: fraction >= opts.min_fraction,
        fraction,
        layers,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{infer_shapes, EdgeShape, NetworkGraph, OpKind};
    use crate::initplan::Distribution;

    fn linear_model() -> Model {
        let g = NetworkGraph::new(EdgeShape::square(2, 1), vec![OpKind::Linear { out: 1 }]);
        Model::new(&g, vec![0.5], Distribution::Gaussian).unwrap()
    }

    #[test]
    fn hand_computed_nu_for_tiny_linear_layer() {
        let mut net = sample_weights(&linear_model(), 0).unwrap();
        net.params.weights[0] = vec![1.0, 2.0];
        let loss = QuadraticLoss::from_matrix(1, &[0.5]);
        // y = 1·3 + 2·(-1) = 1, ∂L/∂y = 2·0.5·1 = 1, ΔW = x = (3, -1).
        let g = weight_gradient_sample(&net, &loss, &[3.0, -1.0]);
        assert_eq!(g, vec![5.0]);
        assert_eq!(g[0] / net.empirical_m2(0), 2.0);
    }

    #[test]
    fn scalar_identity_probe() {
        // One weight, x = 1, L = ½y²: G = 1 and ĝ = E[r²].
        let g = NetworkGraph::new(EdgeShape::square(1, 1), vec![OpKind::Linear { out: 1 }]);
        let mut net = sample_weights(&Model::new(&g, vec![1.0], Distribution::Gaussian).unwrap(), 0).unwrap();
        net.params.weights[0] = vec![0.7];
        let loss = QuadraticLoss::from_matrix(1, &[0.5]);
        let trace = forward(&net.program, &net.params, &[1.0], None);
        let mut rng = stream_rng(0, 0, 0, Purpose::Probe);
        assert!((probe_sample(&net, &loss, &trace, 0, ProbeMode::Basis, &mut rng) - 1.0).abs() < 1e-15);
        let g = probe_sample(&net, &loss, &trace, 0, ProbeMode::Gaussian { count: 20000 }, &mut rng);
        assert!((g - 1.0).abs() < 0.05, "{g}");
    }

    #[test]
    fn scalar_only_net_has_no_ratios() {
        let g = NetworkGraph::new(EdgeShape::square(2, 1), vec![OpKind::FixedScalar { value: 2.0 }]);
        let m = Model::new(&g, vec![], Distribution::Gaussian).unwrap();
        let cfg = EstimationConfig { batch: 4, trials: 1, ..Default::default() };
        assert!(estimate_weight_gradient_ratio(&m, &cfg).unwrap().is_empty());
    }

    #[test]
    fn deterministic_ops_have_exact_moments() {
        let s = 2f64.sqrt();
        let g = infer_shapes(&NetworkGraph::new(
            EdgeShape::square(3, 4),
            vec![OpKind::FixedScalar { value: s }, OpKind::Relu, OpKind::Linear { out: 4 }],
        ))
        .unwrap();
        let m = Model::new(&g, vec![0.1], Distribution::Gaussian).unwrap();
        let cfg = EstimationConfig { batch: 256, trials: 2, ..Default::default() };
        let tape = estimate_edge_moments(&m, &cfg).unwrap();
        assert!((tape.edges[1].fwd / tape.edges[0].fwd - 2.0).abs() < 1e-12);
        let relu = tape.edges[2].fwd / tape.edges[1].fwd;
        assert!((relu - 0.5).abs() < 0.05, "{relu}");
    }

    #[test]
    fn bad_config() {
        let cfg = EstimationConfig { batch: 0, ..Default::default() };
        assert!(matches!(estimate_edge_moments(&linear_model(), &cfg), Err(VerifyError::Config(_))));
        assert!(matches!(gn_block_probe(&linear_model(), 3, &EstimationConfig::default()), Err(VerifyError::Mismatch(_))));
    }

    fn small_report() -> VerifyReport {
        let g = NetworkGraph::new(
            EdgeShape::square(3, 4),
            vec![OpKind::Conv { out: 4, k: 2, stride: 2 }, OpKind::Relu, OpKind::Linear { out: 3 }],
        );
        let m = Model::new(&g, vec![0.1, 0.05], Distribution::Gaussian).unwrap();
        run_verification(&m, &EstimationConfig { batch: 64, trials: 2, ..Default::default() }).unwrap()
    }

    #[test]
    fn compare_identical_and_doubled() {
        let mut r = small_report();
        for l in &mut r.layers {
            l.g_hat = l.gamma_analytic;
            l.nu_hat = l.gamma_analytic;
        }
        let a = r.analytic.clone();
        let c = compare(&a, &r, CompareOptions::default()).unwrap();
        assert!(c.pass);
        assert!(c.layers.iter().all(|l| (l.ratio_g - 1.0).abs() < 1e-12));
        for l in &mut r.layers {
            l.g_hat *= 2.0;
            l.nu_hat *= 2.0;
        }
        let c = compare(&a, &r, CompareOptions { tol: 1.25, min_fraction: 0.9 }).unwrap();
        assert!(!c.pass);
        assert!(c.layers.iter().all(|l| (l.ratio_g - 0.5).abs() < 1e-12));
        r.layers.pop();
        assert!(matches!(compare(&a, &r, CompareOptions::default()), Err(VerifyError::Mismatch(_))));
    }

    #[test]
    fn report_is_deterministic() {
        assert_eq!(small_report(), small_report());
        let v = serde_json::to_value(small_report()).unwrap();
        for key in ["index", "nu_hat", "g_hat", "gamma_theory", "ratio_nu", "ratio_g"] {
            assert!(v["layers"][0].get(key).is_some(), "{key}");
        }
    }
}
