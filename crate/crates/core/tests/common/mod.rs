#![allow(dead_code)]

pub mod oracle;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use relu_precond::graph::{infer_shapes, EdgeShape, NetworkGraph, OpKind, ResidualBlock};

pub fn conv(out: usize, k: usize, stride: usize) -> OpKind {
    OpKind::Conv { out, k, stride }
}

/// Strided LeNet on 32×32 RGB: pooling replaced by stride.
pub fn lenet() -> NetworkGraph {
    NetworkGraph::new(
        EdgeShape::square(3, 32),
        vec![
            conv(6, 4, 4),
            OpKind::Relu,
            conv(16, 2, 2),
            OpKind::Relu,
            OpKind::Linear { out: 120 },
            OpKind::Relu,
            OpKind::Linear { out: 84 },
            OpKind::Relu,
            OpKind::Linear { out: 10 },
        ],
    )
}

/// [`lenet`] with a bias after every weighted layer.
pub fn lenet_with_biases() -> NetworkGraph {
    let mut ops = Vec::new();
    for op in lenet().ops {
        let weighted = op.is_weighted();
        ops.push(op);
        if weighted {
            ops.push(OpKind::BiasAdd);
        }
    }
    NetworkGraph::new(EdgeShape::square(3, 32), ops)
}

/// Four stride-2 convs with ReLU, widths 3 → 64 → 128 → 256 → 512.
pub fn plain_net() -> NetworkGraph {
    let mut ops = Vec::new();
    for out in [64, 128, 256, 512] {
        ops.push(conv(out, 2, 2));
        ops.push(OpKind::Relu);
    }
    NetworkGraph::new(EdgeShape::square(3, 16), ops)
}

fn bottleneck(n: usize, w: usize, m: usize, downsample: bool, alpha: f64) -> OpKind {
    let main = vec![
        OpKind::Relu,
        conv(w, 1, 1),
        OpKind::Relu,
        conv(w, 3, if downsample { 2 } else { 1 }),
        OpKind::Relu,
        conv(m, 1, 1),
    ];
    let shortcut = match (downsample, n == m) {
        (false, true) => vec![],
        (false, false) => vec![conv(m, 1, 1)],
        (true, _) => vec![OpKind::AvgPool { k: 2, stride: 2 }, conv(m, 1, 1)],
    };
    let beta = (1.0 - alpha * alpha).sqrt();
    OpKind::Residual(ResidualBlock::new(alpha, beta, main, shortcut).unwrap())
}

/// Stem, three bottleneck blocks (the middle one downsampling) and a head.
pub fn residual_net() -> NetworkGraph {
    NetworkGraph::new(
        EdgeShape::square(3, 16),
        vec![
            conv(16, 2, 2),
            OpKind::BiasAdd,
            bottleneck(16, 4, 16, false, 0.8),
            bottleneck(16, 8, 32, true, 0.8),
            bottleneck(32, 8, 32, false, 0.8),
            OpKind::Relu,
            OpKind::BiasAdd,
            OpKind::Linear { out: 10 },
        ],
    )
}

/// A random shape-valid graph of well-scaled ops (stride equal to kernel,
/// no max pooling), with a positive `E[W²]` for every weighted layer. With
/// `residual` set, identity-shortcut blocks may appear.
pub fn random_graph(seed: u64, residual: bool) -> (NetworkGraph, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n0 = rng.random_range(1..=4);
    let rho0 = [1, 2, 4, 8][rng.random_range(0..4)];
    let (mut n, mut rho) = (n0, rho0);
    let mut ops = Vec::new();
    for _ in 0..rng.random_range(2..=8) {
        let op = match rng.random_range(0..9) {
            0 | 1 => {
                let ks: Vec<usize> = [1, 2, 4].into_iter().filter(|k| rho % k == 0).collect();
                let k = ks[rng.random_range(0..ks.len())];
                n = rng.random_range(1..=8);
                rho /= k;
                conv(n, k, k)
            }
            2 => {
                n = rng.random_range(1..=8);
                rho = 1;
                OpKind::Linear { out: n }
            }
            3 if rho % 2 == 0 => {
                rho /= 2;
                OpKind::AvgPool { k: 2, stride: 2 }
            }
            4 => OpKind::Dropout { p: rng.random_range(0.0..0.6) },
            5 => OpKind::FixedScalar { value: rng.random_range(0.2..3.0) },
            6 => OpKind::LearnableScalar { init: rng.random_range(0.2..3.0) },
            7 => OpKind::BiasAdd,
            8 if residual => {
                let alpha: f64 = rng.random_range(0.1..0.95);
                let w = rng.random_range(1..=6);
                let main = vec![OpKind::Relu, conv(w, 1, 1), OpKind::Relu, conv(n, 1, 1)];
                OpKind::Residual(ResidualBlock::new(alpha, (1.0 - alpha * alpha).sqrt(), main, vec![]).unwrap())
            }
            _ => OpKind::Relu,
        };
        ops.push(op);
    }
    ops.push(OpKind::Linear { out: rng.random_range(1..=6) });
    let graph = infer_shapes(&NetworkGraph::new(EdgeShape::square(n0, rho0), ops)).unwrap();
    let weights = (0..graph.weighted_count()).map(|_| rng.random_range(0.01..1.0)).collect();
    (graph, weights)
}
