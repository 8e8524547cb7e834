//! Shared fixtures for the criterion benchmarks: random rule parameters and
//! input sequences at the published head geometry (d = 32).

use fastweights::featmap::{FeatureMapKind, FeatureMapParams};
use fastweights::rules::{GateParams, RuleConfig, RuleKind, RuleParams};
use fastweights::tensor::{Matrix, Vector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const HEAD_DIM: usize = 32;

pub fn rand_vector(rng: &mut ChaCha8Rng, n: usize) -> Vector<f32> {
    Vector::from_vec((0..n).map(|_| rng.gen_range(-0.5..0.5)).collect())
}

pub fn rand_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix<f32> {
    let scale = 1.0 / (cols as f32).sqrt();
    Matrix::from_vec(
        rows,
        cols,
        (0..rows * cols).map(|_| rng.gen_range(-scale..scale)).collect(),
    )
    .expect("shape matches data")
}

/// Random parameters for `rule` with a learned linear feature map of width
/// `m`, mirroring the shapes used by the trained models.
pub fn linear_rule_params(rule: RuleKind, m: usize, seed: u64) -> RuleParams<f32> {
    let d = HEAD_DIM;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let config = RuleConfig {
        rule,
        feature_map: FeatureMapKind::Linear,
        sum_norm: rule == RuleKind::Delta,
        attention_norm: false,
        d,
        m,
    };
    let feature = FeatureMapParams::linear(rand_matrix(&mut rng, m, d));
    let gate = match rule {
        RuleKind::Add => GateParams::None,
        RuleKind::Gated | RuleKind::Delta => GateParams::Scalar {
            w_g: rand_vector(&mut rng, d),
            b_g: rng.gen_range(-1.0..1.0),
        },
        RuleKind::Decay => GateParams::Factored {
            w_z: rand_matrix(&mut rng, d, d),
            b_z: rand_vector(&mut rng, d),
            w_f: rand_matrix(&mut rng, m, d),
            b_f: rand_vector(&mut rng, m),
        },
    };
    RuleParams::validated(config, feature, gate).expect("bench params are valid")
}

/// A length-`t` batch of (x, q, k, v) input vectors.
pub type Inputs = (Vec<Vector<f32>>, Vec<Vector<f32>>, Vec<Vector<f32>>, Vec<Vector<f32>>);

pub fn random_inputs(t: usize, seed: u64) -> Inputs {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut make = |_: usize| (0..t).map(|_| rand_vector(&mut rng, HEAD_DIM)).collect::<Vec<_>>();
    (make(0), make(1), make(2), make(3))
}
