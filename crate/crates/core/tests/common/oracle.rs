//! Finite-difference and dense-matrix oracles for the numerical engine.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use relu_precond::graph::{infer_shapes, EdgeShape, NetworkGraph, OpKind, ResidualBlock};
use relu_precond::verify::{backward, forward, jvp_layer, normal_vec, Params, Program, QuadraticLoss, Request, SampledNet};

use super::conv;

const H: f64 = 1e-6;
const TOL: f64 = 1e-5;

pub struct Case {
    program: Program,
    params: Params,
    loss: QuadraticLoss,
    x: Vec<f64>,
    dropout_seed: Option<u64>,
}

impl Case {
    pub fn new(input: EdgeShape, ops: Vec<OpKind>, seed: u64) -> Self {
        let graph = infer_shapes(&NetworkGraph::new(input, ops)).unwrap();
        let program = Program::compile(&graph).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = program.zero_params();
        for w in &mut params.weights {
            *w = normal_vec(&mut rng, w.len());
        }
        for b in &mut params.biases {
            *b = normal_vec(&mut rng, b.len());
        }
        for s in &mut params.scalars {
            *s = rng.random_range(0.5..2.0);
        }
        let loss = QuadraticLoss::random(program.output.numel(), &mut rng);
        let x = normal_vec(&mut rng, input.numel());
        let dropout_seed = program.has_dropout.then_some(seed);
        Self { program, params, loss, x, dropout_seed }
    }

    fn run(&self, params: &Params, x: &[f64]) -> relu_precond::verify::Trace {
        let mut rng = self.dropout_seed.map(ChaCha8Rng::seed_from_u64);
        let dropout = rng.as_mut().map(|r| r as &mut dyn rand::RngCore);
        forward(&self.program, params, x, dropout)
    }

    fn loss_at(&self, params: &Params, x: &[f64]) -> f64 {
        self.loss.loss(self.run(params, x).output())
    }

    fn gradients(&self) -> (Vec<f64>, Params) {
        let trace = self.run(&self.params, &self.x);
        let mut grads = self.params.zeros_like();
        let gx = backward(&self.program, &self.params, &trace, self.loss.gradient(trace.output()), Request::ALL, &mut grads, None);
        (gx.unwrap(), grads)
    }
}

fn fd(f: impl Fn(f64) -> f64) -> f64 {
    (f(H) - f(-H)) / (2.0 * H)
}

fn check(name: &str, analytic: &[f64], numeric: &[f64]) -> Result<(), String> {
    if analytic.len() != numeric.len() {
        return Err(format!("{name}: {} analytic entries, {} numeric", analytic.len(), numeric.len()));
    }
    let scale = analytic.iter().chain(numeric).fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);
    for (i, (a, n)) in analytic.iter().zip(numeric).enumerate() {
        if (a - n).abs() > TOL * scale {
            return Err(format!("{name}[{i}]: analytic {a} vs numeric {n} (scale {scale})"));
        }
    }
    Ok(())
}

pub fn gradient_check(name: &str, case: &Case) -> Result<(), String> {
    let (gx, grads) = case.gradients();
    let numeric_x: Vec<f64> = (0..case.x.len())
        .map(|i| {
            fd(|h| {
                let mut x = case.x.clone();
                x[i] += h;
                case.loss_at(&case.params, &x)
            })
        })
        .collect();
    check(&format!("{name}: input"), &gx, &numeric_x)?;

    let perturbed = |edit: &dyn Fn(&mut Params, f64)| {
        fd(|h| {
            let mut p = case.params.clone();
            edit(&mut p, h);
            case.loss_at(&p, &case.x)
        })
    };
    for (l, w) in case.params.weights.iter().enumerate() {
        let numeric: Vec<f64> = (0..w.len()).map(|i| perturbed(&|p, h| p.weights[l][i] += h)).collect();
        check(&format!("{name}: weight {l}"), &grads.weights[l], &numeric)?;
    }
    for (b, bias) in case.params.biases.iter().enumerate() {
        let numeric: Vec<f64> = (0..bias.len()).map(|i| perturbed(&|p, h| p.biases[b][i] += h)).collect();
        check(&format!("{name}: bias {b}"), &grads.biases[b], &numeric)?;
    }
    let numeric: Vec<f64> = (0..case.params.scalars.len()).map(|s| perturbed(&|p, h| p.scalars[s] += h)).collect();
    check(&format!("{name}: scalars"), &grads.scalars, &numeric)
}

pub fn tangent_check(name: &str, case: &Case) -> Result<(), String> {
    let trace = forward(&case.program, &case.params, &case.x, None);
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for l in 0..case.params.weights.len() {
        let dir = normal_vec(&mut rng, case.params.weights[l].len());
        let tangent = jvp_layer(&case.program, &case.params, &trace, l, &dir);
        let numeric: Vec<f64> = (0..tangent.len())
            .map(|o| {
                fd(|h| {
                    let mut p = case.params.clone();
                    p.weights[l].iter_mut().zip(&dir).for_each(|(w, d)| *w += h * d);
                    forward(&case.program, &p, &case.x, None).output()[o]
                })
            })
            .collect();
        check(&format!("{name}: tangent {l}"), &tangent, &numeric)?;
    }
    Ok(())
}

pub fn cases() -> Vec<(&'static str, EdgeShape, Vec<OpKind>)> {
    let block = |alpha: f64, k: usize, shortcut| {
        let main = vec![OpKind::Relu, conv(3, 1, 1), OpKind::Relu, conv(2, k, k)];
        OpKind::Residual(ResidualBlock::new(alpha, (1.0 - alpha * alpha).sqrt(), main, shortcut).unwrap())
    };
    vec![
        ("conv stride = kernel", EdgeShape::square(2, 4), vec![conv(3, 2, 2)]),
        ("conv 1x1", EdgeShape::square(3, 2), vec![conv(2, 1, 1)]),
        ("conv same padding", EdgeShape::square(2, 4), vec![conv(2, 3, 1)]),
        ("conv even kernel stride 1", EdgeShape::new(1, 4, 3), vec![conv(2, 2, 1)]),
        ("linear", EdgeShape::square(2, 1), vec![OpKind::Linear { out: 3 }]),
        ("linear flattening", EdgeShape::square(2, 2), vec![OpKind::Linear { out: 3 }]),
        ("avgpool", EdgeShape::square(2, 4), vec![OpKind::AvgPool { k: 2, stride: 2 }]),
        ("avgpool overlapping", EdgeShape::square(1, 4), vec![OpKind::AvgPool { k: 3, stride: 1 }]),
        ("maxpool", EdgeShape::square(2, 4), vec![OpKind::MaxPool { k: 2, stride: 2 }]),
        ("relu", EdgeShape::square(2, 3), vec![OpKind::Relu]),
        ("dropout", EdgeShape::square(2, 3), vec![OpKind::Dropout { p: 0.4 }]),
        ("fixed scalar", EdgeShape::square(2, 2), vec![OpKind::FixedScalar { value: 1.7 }]),
        ("learnable scalar", EdgeShape::square(2, 2), vec![OpKind::LearnableScalar { init: 0.8 }]),
        ("bias", EdgeShape::square(2, 2), vec![OpKind::BiasAdd]),
        ("residual identity", EdgeShape::square(2, 4), vec![OpKind::AvgPool { k: 2, stride: 2 }, block(0.6, 1, vec![])]),
        (
            "residual projection",
            EdgeShape::square(2, 4),
            vec![block(0.6, 2, vec![OpKind::AvgPool { k: 2, stride: 2 }, conv(2, 1, 1)])],
        ),
        (
            "stack",
            EdgeShape::square(2, 4),
            vec![
                conv(4, 2, 2),
                OpKind::BiasAdd,
                OpKind::Relu,
                OpKind::LearnableScalar { init: 1.2 },
                OpKind::Dropout { p: 0.2 },
                OpKind::Linear { out: 3 },
                OpKind::Relu,
                OpKind::Linear { out: 2 },
            ],
        ),
    ]
}

/// Mean squared singular value of `JᵀHJ` for one sample, `J` by central
/// differences of the network output.
pub fn dense_mean_sq_singular(net: &SampledNet, loss: &QuadraticLoss, x: &[f64], layer: usize) -> f64 {
    let d = net.params.weights[layer].len();
    let n_out = net.program.output.numel();
    let h = 1e-5;
    let mut jac = DMatrix::zeros(n_out, d);
    for j in 0..d {
        let at = |delta: f64| {
            let mut p = net.params.clone();
            p.weights[layer][j] += delta;
            forward(&net.program, &p, x, None).output().to_vec()
        };
        let (plus, minus) = (at(h), at(-h));
        for o in 0..n_out {
            jac[(o, j)] = (plus[o] - minus[o]) / (2.0 * h);
        }
    }
    let hess = DMatrix::from_fn(n_out, n_out, |i, j| 2.0 * loss.s[i * n_out + j]);
    let g = jac.transpose() * hess * &jac;
    let sv = g.singular_values();
    sv.iter().map(|s| s * s).sum::<f64>() / d as f64
}

/// Small networks whose layers all have at most 36 weights.
pub fn probe_nets() -> Vec<NetworkGraph> {
    let block = ResidualBlock::new(0.6, 0.8, vec![OpKind::Relu, conv(3, 1, 1), OpKind::Relu, conv(2, 1, 1)], vec![]).unwrap();
    vec![
        NetworkGraph::new(
            EdgeShape::square(2, 4),
            vec![conv(2, 2, 2), OpKind::Relu, OpKind::Linear { out: 3 }, OpKind::Relu, OpKind::Linear { out: 2 }],
        ),
        NetworkGraph::new(
            EdgeShape::square(2, 4),
            vec![
                OpKind::FixedScalar { value: 1.3 },
                conv(3, 1, 1),
                OpKind::BiasAdd,
                OpKind::Relu,
                OpKind::AvgPool { k: 2, stride: 2 },
                conv(2, 2, 2),
                OpKind::LearnableScalar { init: 0.7 },
                OpKind::Relu,
                OpKind::Linear { out: 4 },
            ],
        ),
        NetworkGraph::new(
            EdgeShape::square(2, 2),
            vec![conv(2, 1, 1), OpKind::Residual(block), OpKind::Relu, OpKind::MaxPool { k: 2, stride: 2 }, OpKind::Linear { out: 3 }],
        ),
    ]
}

