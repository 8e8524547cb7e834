//! A small decoder-only byte-level language model with a pluggable token
//! mixer.
//!
//! Each block is a standard pre-norm residual pair:
//!
//! ```text
//!     x <- x + W_o . Mixer(LN_1(x))
//!     x <- x + FFN(LN_2(x))
//! ```
//!
//! The mixer is exact causal softmax attention, sliding-window local
//! attention, or one fast-weight memory per head driven by an update rule.
//! A final layer norm feeds a linear head tied to the input embedding.
//! Learned positional embeddings are added for every mixer kind, so model
//! variants differ only in the mixer itself.
//!
//! Two forward paths are provided and agree bit-for-bit by construction:
//! a teacher-forced whole-sequence pass (`forward_lm`, used for training,
//! with a recorded trace for the analytic backward pass) and an incremental
//! one-token-at-a-time pass (`step_logits` over a [`GenerationState`]).
//! For rule mixers the generation state is a fixed set of fast-weight
//! matrices whose byte size does not depend on how many tokens have been
//! consumed; for attention mixers it is the usual growing KV cache (bounded
//! by the window for local attention).
//!
//! `convert_mixer` re-targets a softmax-attention model onto an update rule:
//! q/k/v/o projections are copied verbatim, fresh rule parameters are
//! initialized (decay gates by uniform gate initialization), and the value
//! projection is rescaled so that the first readouts after conversion match
//! the magnitudes the surrounding network expects.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::softmax_attention_step_probs;
use crate::error::{Error, Result};
use crate::featmap::{FeatureMapKind, FeatureMapParams};
use crate::gradients::{backward_scan, GateGradients};
use crate::real::{logit, sigmoid, Real};
use crate::rules::{
    init_state, scan_with_cache, step as rule_step, FastWeightState, GateParams, RuleConfig,
    RuleKind, RuleParams, SequenceCache,
};
use crate::tensor::{axpy, Matrix, Vector};

/// Layer-norm epsilon, matching the usual transformer default.
const LN_EPS: f64 = 1e-5;

/// Weight scale for embeddings and projections at initialization.
const INIT_STD: f64 = 0.02;

/// tanh-approximation constants for GELU.
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Gate value the delta rule is converted to, from the observation that
/// fine-tuning recovers fastest when the converted model starts out writing
/// almost nothing into its fast weights.
const DELTA_CONVERT_GATE: f64 = 0.007;

/// Value-projection rescale for the add rule without a feature map, whose
/// normalizer grows without bound early in fine-tuning.
const ADD_CONVERT_SCALE: f64 = 1.0 / 512.0;

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

/// Token-mixing layer selection, shared by every block of a model.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MixerKind {
    /// Exact causal softmax attention with a KV cache at generation time.
    Softmax,
    /// Softmax attention restricted to the trailing `window` positions.
    Local { window: usize },
    /// One fast-weight memory per head, updated by the configured rule.
    Rule(RuleConfig),
}

impl MixerKind {
    /// Short tag used in reports and benchmark CSVs.
    pub fn label(&self) -> String {
        match self {
            MixerKind::Softmax => "softmax".into(),
            MixerKind::Local { window } => format!("local{window}"),
            MixerKind::Rule(rc) => rc.rule.name().into(),
        }
    }
}

/// Shape of the model. `d_model = n_heads * head_dim` always; `feature_dim`
/// mirrors the rule config's `m` when the mixer is a rule.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub head_dim: usize,
    pub feature_dim: usize,
    pub n_layers: usize,
    pub ffn_mult: usize,
    pub max_t: usize,
    pub mixer: MixerKind,
}

impl ModelConfig {
    /// Desk-scale defaults: byte vocabulary, 4 layers, d_model 128, 4 heads
    /// of width 32.
    pub fn desk(mixer: MixerKind) -> Self {
        let feature_dim = match &mixer {
            MixerKind::Rule(rc) => rc.m,
            _ => 32,
        };
        ModelConfig {
            vocab_size: 256,
            d_model: 128,
            n_heads: 4,
            head_dim: 32,
            feature_dim,
            n_layers: 4,
            ffn_mult: 4,
            max_t: 512,
            mixer,
        }
    }

    pub fn d_ff(&self) -> usize {
        self.ffn_mult * self.d_model
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size == 0
            || self.d_model == 0
            || self.n_heads == 0
            || self.head_dim == 0
            || self.feature_dim == 0
            || self.n_layers == 0
            || self.ffn_mult == 0
            || self.max_t == 0
        {
            return Err(Error::InvalidConfig(
                "all model dimensions must be positive".into(),
            ));
        }
        if self.d_model != self.n_heads * self.head_dim {
            return Err(Error::InvalidConfig(format!(
                "d_model = {} but n_heads * head_dim = {}",
                self.d_model,
                self.n_heads * self.head_dim
            )));
        }
        match &self.mixer {
            MixerKind::Softmax => Ok(()),
            MixerKind::Local { window } => {
                if *window == 0 {
                    Err(Error::InvalidConfig(
                        "local attention window must be positive".into(),
                    ))
                } else {
                    Ok(())
                }
            }
            MixerKind::Rule(rc) => {
                rc.validate()?;
                if rc.d != self.head_dim || rc.m != self.feature_dim {
                    return Err(Error::InvalidConfig(format!(
                        "rule dims (d={}, m={}) disagree with model (head_dim={}, feature_dim={})",
                        rc.d, rc.m, self.head_dim, self.feature_dim
                    )));
                }
                Ok(())
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Parameters
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNormParams<T> {
    pub scale: Vector<T>,
    pub shift: Vector<T>,
}

impl<T: Real> LayerNormParams<T> {
    fn identity(dim: usize) -> Self {
        LayerNormParams {
            scale: Vector::from_vec(vec![T::one(); dim]),
            shift: Vector::zeros(dim),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FfnParams<T> {
    pub w1: Matrix<T>,
    pub b1: Vector<T>,
    pub w2: Matrix<T>,
    pub b2: Vector<T>,
}

/// Merged-head projections plus per-head rule parameters (empty unless the
/// mixer is a rule).
#[derive(Clone, Debug, PartialEq)]
pub struct MixerParams<T> {
    pub w_q: Matrix<T>,
    pub w_k: Matrix<T>,
    pub w_v: Matrix<T>,
    pub w_o: Matrix<T>,
    pub heads: Vec<RuleParams<T>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams<T> {
    pub ln1: LayerNormParams<T>,
    pub mixer: MixerParams<T>,
    pub ln2: LayerNormParams<T>,
    pub ffn: FfnParams<T>,
}

/// The full model: tied embedding/head, learned positional table, blocks,
/// and the final norm.
#[derive(Clone, Debug, PartialEq)]
pub struct Model<T> {
    pub config: ModelConfig,
    /// vocab_size x d_model; also the output head (logits = E . h).
    pub embedding: Matrix<T>,
    /// max_t x d_model.
    pub pos_embedding: Matrix<T>,
    pub layers: Vec<LayerParams<T>>,
    pub final_norm: LayerNormParams<T>,
}

/// One standard normal via Box-Muller, scaled to `std`.
fn normal<T: Real, R: Rng + ?Sized>(rng: &mut R, std: f64) -> T {
    let u1: f64 = 1.0 - rng.gen::<f64>(); // in (0, 1], keeps the log finite
    let u2: f64 = rng.gen();
    let z = (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos();
    T::from_f64(std * z)
}

fn random_matrix<T: Real, R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize, std: f64) -> Matrix<T> {
    let data = (0..rows * cols).map(|_| normal(rng, std)).collect();
    Matrix::from_vec(rows, cols, data).expect("shape matches data")
}

/// One uniform gate-bias sample: b = logit(u), u ~ Uniform(0,1), so the
/// initial gate sigmoid(b) is itself uniform on (0,1).
fn ugi_sample<T: Real, R: Rng + ?Sized>(rng: &mut R) -> T {
    let u = loop {
        let u = rng.gen::<f64>();
        if u > 0.0 && u < 1.0 {
            break u;
        }
    };
    T::from_f64(logit(u))
}

/// Fresh per-head rule parameters. Projection-style weights (W_phi, W_z,
/// W_f) are drawn with standard deviation 1/sqrt(d) so that gates start
/// near sigmoid(bias); scalar-gate weights start at zero with bias
/// `scalar_gate_bias`; decay biases use uniform gate initialization.
fn fresh_rule_params<T: Real, R: Rng + ?Sized>(
    rc: &RuleConfig,
    rng: &mut R,
    scalar_gate_bias: f64,
) -> RuleParams<T> {
    let (d, m) = (rc.d, rc.m);
    let proj_std = 1.0 / (d as f64).sqrt();
    let feature = match rc.feature_map {
        FeatureMapKind::Identity | FeatureMapKind::Elu1 => FeatureMapParams::none(),
        FeatureMapKind::Linear => FeatureMapParams::linear(random_matrix(rng, m, d, proj_std)),
        FeatureMapKind::Relu => {
            FeatureMapParams::relu(random_matrix(rng, m, d, proj_std), Vector::zeros(m))
        }
    };
    let gate = match rc.rule {
        RuleKind::Add => GateParams::None,
        RuleKind::Gated | RuleKind::Delta => GateParams::Scalar {
            w_g: Vector::zeros(d),
            b_g: T::from_f64(scalar_gate_bias),
        },
        RuleKind::Decay => GateParams::Factored {
            w_z: random_matrix(rng, d, d, proj_std),
            b_z: Vector::from_vec((0..d).map(|_| ugi_sample(rng)).collect()),
            w_f: random_matrix(rng, m, d, proj_std),
            b_f: Vector::from_vec((0..m).map(|_| ugi_sample(rng)).collect()),
        },
    };
    RuleParams {
        config: *rc,
        feature,
        gate,
    }
}

/// Build a forward-ready model with deterministic initialization: weights
/// N(0, 0.02), residual output projections additionally shrunk by
/// 1/sqrt(2 * n_layers), biases zero, layer norms at identity. Rule gates
/// start neutral (bias 0) except decay, which always uses uniform gate
/// initialization.
pub fn build_model<T: Real>(config: &ModelConfig, seed: u64) -> Result<Model<T>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dm = config.d_model;
    let d_ff = config.d_ff();
    let resid_std = INIT_STD / (2.0 * config.n_layers as f64).sqrt();

    let embedding = random_matrix(&mut rng, config.vocab_size, dm, INIT_STD);
    let pos_embedding = random_matrix(&mut rng, config.max_t, dm, INIT_STD);
    let mut layers = Vec::with_capacity(config.n_layers);
    for _ in 0..config.n_layers {
        let w_q = random_matrix(&mut rng, dm, dm, INIT_STD);
        let w_k = random_matrix(&mut rng, dm, dm, INIT_STD);
        let w_v = random_matrix(&mut rng, dm, dm, INIT_STD);
        let w_o = random_matrix(&mut rng, dm, dm, resid_std);
        let heads = match &config.mixer {
            MixerKind::Rule(rc) => (0..config.n_heads)
                .map(|_| fresh_rule_params(rc, &mut rng, 0.0))
                .collect(),
            _ => Vec::new(),
        };
        let ffn = FfnParams {
            w1: random_matrix(&mut rng, d_ff, dm, INIT_STD),
            b1: Vector::zeros(d_ff),
            w2: random_matrix(&mut rng, dm, d_ff, resid_std),
            b2: Vector::zeros(dm),
        };
        layers.push(LayerParams {
            ln1: LayerNormParams::identity(dm),
            mixer: MixerParams {
                w_q,
                w_k,
                w_v,
                w_o,
                heads,
            },
            ln2: LayerNormParams::identity(dm),
            ffn,
        });
    }
    Ok(Model {
        config: *config,
        embedding,
        pos_embedding,
        layers,
        final_norm: LayerNormParams::identity(dm),
    })
}

// ---------------------------------------------------------------------------
// Parameter traversal
// ---------------------------------------------------------------------------

impl<T: Real> Model<T> {
    /// Visit every parameter tensor in a fixed canonical order. The order is
    /// the flattening contract shared by checkpoints and the optimizer.
    pub fn visit_params(&self, f: &mut impl FnMut(String, &[usize], &[T])) {
        let mat = |f: &mut dyn FnMut(String, &[usize], &[T]), name: String, m: &Matrix<T>| {
            f(name, &[m.rows(), m.cols()], m.data());
        };
        let vec = |f: &mut dyn FnMut(String, &[usize], &[T]), name: String, v: &Vector<T>| {
            f(name, &[v.len()], v.data());
        };
        mat(f, "embedding".into(), &self.embedding);
        mat(f, "pos_embedding".into(), &self.pos_embedding);
        for (l, layer) in self.layers.iter().enumerate() {
            vec(f, format!("layer{l}.ln1.scale"), &layer.ln1.scale);
            vec(f, format!("layer{l}.ln1.shift"), &layer.ln1.shift);
            mat(f, format!("layer{l}.w_q"), &layer.mixer.w_q);
            mat(f, format!("layer{l}.w_k"), &layer.mixer.w_k);
            mat(f, format!("layer{l}.w_v"), &layer.mixer.w_v);
            mat(f, format!("layer{l}.w_o"), &layer.mixer.w_o);
            for (h, head) in layer.mixer.heads.iter().enumerate() {
                if let Some(w_phi) = &head.feature.w_phi {
                    mat(f, format!("layer{l}.head{h}.w_phi"), w_phi);
                }
                if let Some(b_phi) = &head.feature.b_phi {
                    vec(f, format!("layer{l}.head{h}.b_phi"), b_phi);
                }
                match &head.gate {
                    GateParams::None => {}
                    GateParams::Scalar { w_g, b_g } => {
                        vec(f, format!("layer{l}.head{h}.w_g"), w_g);
                        f(
                            format!("layer{l}.head{h}.b_g"),
                            &[1],
                            std::slice::from_ref(b_g),
                        );
                    }
                    GateParams::Factored { w_z, b_z, w_f, b_f } => {
                        mat(f, format!("layer{l}.head{h}.w_z"), w_z);
                        vec(f, format!("layer{l}.head{h}.b_z"), b_z);
                        mat(f, format!("layer{l}.head{h}.w_f"), w_f);
                        vec(f, format!("layer{l}.head{h}.b_f"), b_f);
                    }
                }
            }
            vec(f, format!("layer{l}.ln2.scale"), &layer.ln2.scale);
            vec(f, format!("layer{l}.ln2.shift"), &layer.ln2.shift);
            mat(f, format!("layer{l}.ffn.w1"), &layer.ffn.w1);
            vec(f, format!("layer{l}.ffn.b1"), &layer.ffn.b1);
            mat(f, format!("layer{l}.ffn.w2"), &layer.ffn.w2);
            vec(f, format!("layer{l}.ffn.b2"), &layer.ffn.b2);
        }
        vec(f, "final_norm.scale".into(), &self.final_norm.scale);
        vec(f, "final_norm.shift".into(), &self.final_norm.shift);
    }

    /// Mutable traversal in the same canonical order as [`visit_params`].
    pub fn visit_params_mut(&mut self, f: &mut impl FnMut(String, &mut [T])) {
        f("embedding".into(), self.embedding.data_mut());
        f("pos_embedding".into(), self.pos_embedding.data_mut());
        for (l, layer) in self.layers.iter_mut().enumerate() {
            f(format!("layer{l}.ln1.scale"), layer.ln1.scale.data_mut());
            f(format!("layer{l}.ln1.shift"), layer.ln1.shift.data_mut());
            f(format!("layer{l}.w_q"), layer.mixer.w_q.data_mut());
            f(format!("layer{l}.w_k"), layer.mixer.w_k.data_mut());
            f(format!("layer{l}.w_v"), layer.mixer.w_v.data_mut());
            f(format!("layer{l}.w_o"), layer.mixer.w_o.data_mut());
            for (h, head) in layer.mixer.heads.iter_mut().enumerate() {
                if let Some(w_phi) = &mut head.feature.w_phi {
                    f(format!("layer{l}.head{h}.w_phi"), w_phi.data_mut());
                }
                if let Some(b_phi) = &mut head.feature.b_phi {
                    f(format!("layer{l}.head{h}.b_phi"), b_phi.data_mut());
                }
                match &mut head.gate {
                    GateParams::None => {}
                    GateParams::Scalar { w_g, b_g } => {
                        f(format!("layer{l}.head{h}.w_g"), w_g.data_mut());
                        f(format!("layer{l}.head{h}.b_g"), std::slice::from_mut(b_g));
                    }
                    GateParams::Factored { w_z, b_z, w_f, b_f } => {
                        f(format!("layer{l}.head{h}.w_z"), w_z.data_mut());
                        f(format!("layer{l}.head{h}.b_z"), b_z.data_mut());
                        f(format!("layer{l}.head{h}.w_f"), w_f.data_mut());
                        f(format!("layer{l}.head{h}.b_f"), b_f.data_mut());
                    }
                }
            }
            f(format!("layer{l}.ln2.scale"), layer.ln2.scale.data_mut());
            f(format!("layer{l}.ln2.shift"), layer.ln2.shift.data_mut());
            f(format!("layer{l}.ffn.w1"), layer.ffn.w1.data_mut());
            f(format!("layer{l}.ffn.b1"), layer.ffn.b1.data_mut());
            f(format!("layer{l}.ffn.w2"), layer.ffn.w2.data_mut());
            f(format!("layer{l}.ffn.b2"), layer.ffn.b2.data_mut());
        }
        f("final_norm.scale".into(), self.final_norm.scale.data_mut());
        f("final_norm.shift".into(), self.final_norm.shift.data_mut());
    }

    /// Total number of learned scalars.
    pub fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |_, _, data| n += data.len());
        n
    }

    /// All parameters concatenated in canonical order.
    pub fn flatten_params(&self) -> Vec<T> {
        let mut out = Vec::with_capacity(self.param_count());
        self.visit_params(&mut |_, _, data| out.extend_from_slice(data));
        out
    }

    /// Overwrite all parameters from a canonical-order flat slice.
    pub fn load_flat_params(&mut self, flat: &[T]) -> Result<()> {
        let mut cursor = 0usize;
        let mut overrun = false;
        self.visit_params_mut(&mut |_, data| {
            if cursor + data.len() <= flat.len() {
                data.copy_from_slice(&flat[cursor..cursor + data.len()]);
            } else {
                overrun = true;
            }
            cursor += data.len();
        });
        if overrun || cursor != flat.len() {
            return Err(Error::DimMismatch(format!(
                "flat parameter vector has {} elements, model needs {}",
                flat.len(),
                cursor
            )));
        }
        Ok(())
    }

    /// A same-shape model with every parameter zeroed: the gradient buffer.
    pub fn zeros_like(&self) -> Model<T> {
        let mut g = self.clone();
        g.visit_params_mut(&mut |_, data| data.fill(T::zero()));
        g
    }
}

// ---------------------------------------------------------------------------
// Forward primitives
// ---------------------------------------------------------------------------

/// Layer norm of one position; returns (output, x_hat, 1/std) so the
/// backward pass can reuse the normalized activations.
fn layer_norm_apply<T: Real>(
    ln: &LayerNormParams<T>,
    x: &Vector<T>,
) -> (Vector<T>, Vector<T>, T) {
    let n = x.len();
    let inv_n = T::one() / T::from_f64(n as f64);
    let mut mean = T::zero();
    for &v in x.data() {
        mean += v;
    }
    mean *= inv_n;
    let mut var = T::zero();
    for &v in x.data() {
        let c = v - mean;
        var += c * c;
    }
    var *= inv_n;
    let inv_std = T::one() / (var + T::from_f64(LN_EPS)).sqrt();
    let mut xhat = Vector::zeros(n);
    let mut y = Vector::zeros(n);
    for i in 0..n {
        let h = (x.get(i) - mean) * inv_std;
        xhat.set(i, h);
        y.set(i, h * ln.scale.get(i) + ln.shift.get(i));
    }
    (y, xhat, inv_std)
}

fn gelu<T: Real>(x: T) -> T {
    let u = T::from_f64(GELU_C) * (x + T::from_f64(GELU_A) * x * x * x);
    T::from_f64(0.5) * x * (T::one() + u.tanh())
}

fn gelu_deriv<T: Real>(x: T) -> T {
    let c = T::from_f64(GELU_C);
    let u = c * (x + T::from_f64(GELU_A) * x * x * x);
    let t = u.tanh();
    let du = c * (T::one() + T::from_f64(3.0 * GELU_A) * x * x);
    let half = T::from_f64(0.5);
    half * (T::one() + t) + half * x * (T::one() - t * t) * du
}

fn head_slice<T: Real>(full: &Vector<T>, h: usize, d: usize) -> Vector<T> {
    Vector::from_slice(&full.data()[h * d..(h + 1) * d])
}

/// Embed one token at one absolute position.
fn embed<T: Real>(model: &Model<T>, token: usize, t: usize) -> Result<Vector<T>> {
    let cfg = &model.config;
    if token >= cfg.vocab_size {
        return Err(Error::TokenOutOfVocab {
            token: token as u32,
            vocab: cfg.vocab_size,
        });
    }
    if t >= cfg.max_t {
        return Err(Error::InvalidConfig(format!(
            "position {t} reaches past max_t = {}",
            cfg.max_t
        )));
    }
    let e = model.embedding.row(token);
    let p = model.pos_embedding.row(t);
    Ok(Vector::from_vec(
        e.iter().zip(p).map(|(&a, &b)| a + b).collect(),
    ))
}

/// FFN of one position: W2 gelu(W1 u + b1) + b2, returning intermediates.
fn ffn_apply<T: Real>(ffn: &FfnParams<T>, u: &Vector<T>) -> (Vector<T>, Vector<T>, Vector<T>) {
    let mut pre = ffn.w1.matvec(u).expect("ffn shapes fixed at build");
    pre.add_in_place(&ffn.b1);
    let act = Vector::from_vec(pre.data().iter().map(|&x| gelu(x)).collect());
    let mut out = ffn.w2.matvec(&act).expect("ffn shapes fixed at build");
    out.add_in_place(&ffn.b2);
    (out, pre, act)
}

// ---------------------------------------------------------------------------
// Teacher-forced forward with trace
// ---------------------------------------------------------------------------

struct LnTrace<T> {
    xhat: Vec<Vector<T>>,
    inv_std: Vec<T>,
}

struct AttnHeadTrace<T> {
    qs: Vec<Vector<T>>,
    ks: Vec<Vector<T>>,
    vs: Vec<Vector<T>>,
    /// probs[t] covers source positions lo..=t where lo depends on the window.
    probs: Vec<Vec<T>>,
}

enum MixerTrace<T> {
    Attn(Vec<AttnHeadTrace<T>>),
    Rule(Vec<SequenceCache<T>>),
}

struct LayerTrace<T> {
    ln1: LnTrace<T>,
    u1: Vec<Vector<T>>,
    mixer: MixerTrace<T>,
    y_concat: Vec<Vector<T>>,
    ln2: LnTrace<T>,
    u2: Vec<Vector<T>>,
    ffn_pre: Vec<Vector<T>>,
    ffn_act: Vec<Vector<T>>,
}

struct Trace<T> {
    layers: Vec<LayerTrace<T>>,
    ln_f: LnTrace<T>,
    hf: Vec<Vector<T>>,
    logits: Matrix<T>,
}

fn layer_norm_seq<T: Real>(
    ln: &LayerNormParams<T>,
    xs: &[Vector<T>],
) -> (Vec<Vector<T>>, LnTrace<T>) {
    let mut ys = Vec::with_capacity(xs.len());
    let mut xhat = Vec::with_capacity(xs.len());
    let mut inv_std = Vec::with_capacity(xs.len());
    for x in xs {
        let (y, h, inv) = layer_norm_apply(ln, x);
        ys.push(y);
        xhat.push(h);
        inv_std.push(inv);
    }
    (ys, LnTrace { xhat, inv_std })
}

fn forward_trace<T: Real>(model: &Model<T>, tokens: &[usize]) -> Result<Trace<T>> {
    let cfg = &model.config;
    if tokens.is_empty() {
        return Err(Error::EmptyInput("forward on an empty sequence".into()));
    }
    if tokens.len() > cfg.max_t {
        return Err(Error::InvalidConfig(format!(
            "sequence length {} exceeds max_t = {}",
            tokens.len(),
            cfg.max_t
        )));
    }
    let t_len = tokens.len();
    let (nh, hd) = (cfg.n_heads, cfg.head_dim);

    let mut xs: Vec<Vector<T>> = Vec::with_capacity(t_len);
    for (t, &tok) in tokens.iter().enumerate() {
        xs.push(embed(model, tok, t)?);
    }

    let mut layer_traces = Vec::with_capacity(cfg.n_layers);
    for layer in &model.layers {
        let (u1, ln1) = layer_norm_seq(&layer.ln1, &xs);

        // Merged projections, then split per head.
        let mut q_h: Vec<Vec<Vector<T>>> = vec![Vec::with_capacity(t_len); nh];
        let mut k_h: Vec<Vec<Vector<T>>> = vec![Vec::with_capacity(t_len); nh];
        let mut v_h: Vec<Vec<Vector<T>>> = vec![Vec::with_capacity(t_len); nh];
        let mut x_h: Vec<Vec<Vector<T>>> = vec![Vec::with_capacity(t_len); nh];
        for u in &u1 {
            let q = layer.mixer.w_q.matvec(u)?;
            let k = layer.mixer.w_k.matvec(u)?;
            let v = layer.mixer.w_v.matvec(u)?;
            for h in 0..nh {
                q_h[h].push(head_slice(&q, h, hd));
                k_h[h].push(head_slice(&k, h, hd));
                v_h[h].push(head_slice(&v, h, hd));
                x_h[h].push(head_slice(u, h, hd));
            }
        }

        let window = match &cfg.mixer {
            MixerKind::Local { window } => Some(*window),
            _ => None,
        };
        let mut y_concat = vec![Vector::zeros(cfg.d_model); t_len];
        let mixer_trace = match &cfg.mixer {
            MixerKind::Softmax | MixerKind::Local { .. } => {
                let mut heads = Vec::with_capacity(nh);
                for h in 0..nh {
                    let mut probs = Vec::with_capacity(t_len);
                    for t in 0..t_len {
                        let lo = window.map_or(0, |w| (t + 1).saturating_sub(w));
                        let (y, p) = softmax_attention_step_probs(
                            &q_h[h][t],
                            &k_h[h][lo..=t],
                            &v_h[h][lo..=t],
                        )?;
                        probs.push(p);
                        y_concat[t].data_mut()[h * hd..(h + 1) * hd].copy_from_slice(y.data());
                    }
                    heads.push(AttnHeadTrace {
                        qs: std::mem::take(&mut q_h[h]),
                        ks: std::mem::take(&mut k_h[h]),
                        vs: std::mem::take(&mut v_h[h]),
                        probs,
                    });
                }
                MixerTrace::Attn(heads)
            }
            MixerKind::Rule(rc) => {
                let mut caches = Vec::with_capacity(nh);
                for h in 0..nh {
                    let params = &layer.mixer.heads[h];
                    let init = init_state::<T>(rc);
                    let cache =
                        scan_with_cache(params, &init, &x_h[h], &q_h[h], &k_h[h], &v_h[h])?;
                    for t in 0..t_len {
                        y_concat[t].data_mut()[h * hd..(h + 1) * hd]
                            .copy_from_slice(cache.ys[t].data());
                    }
                    caches.push(cache);
                }
                MixerTrace::Rule(caches)
            }
        };

        for (t, x) in xs.iter_mut().enumerate() {
            let mixed = layer.mixer.w_o.matvec(&y_concat[t])?;
            x.add_in_place(&mixed);
        }

        let (u2, ln2) = layer_norm_seq(&layer.ln2, &xs);
        let mut ffn_pre = Vec::with_capacity(t_len);
        let mut ffn_act = Vec::with_capacity(t_len);
        for (t, x) in xs.iter_mut().enumerate() {
            let (out, pre, act) = ffn_apply(&layer.ffn, &u2[t]);
            ffn_pre.push(pre);
            ffn_act.push(act);
            x.add_in_place(&out);
        }

        layer_traces.push(LayerTrace {
            ln1,
            u1,
            mixer: mixer_trace,
            y_concat,
            ln2,
            u2,
            ffn_pre,
            ffn_act,
        });
    }

    let (hf, ln_f) = layer_norm_seq(&model.final_norm, &xs);
    let mut logits = Matrix::zeros(t_len, cfg.vocab_size);
    for t in 0..t_len {
        let row = model.embedding.matvec(&hf[t])?;
        logits.row_mut(t).copy_from_slice(row.data());
    }
    Ok(Trace {
        layers: layer_traces,
        ln_f,
        hf,
        logits,
    })
}

/// Teacher-forced logits for every position: row t is the next-token
/// distribution after consuming `tokens[..=t]`.
pub fn forward_logits<T: Real>(model: &Model<T>, tokens: &[usize]) -> Result<Matrix<T>> {
    Ok(forward_trace(model, tokens)?.logits)
}

/// Mean next-token cross-entropy of `logits` row t against `targets[t]`.
fn loss_from_logits<T: Real>(logits: &Matrix<T>, targets: &[usize]) -> T {
    let n = targets.len();
    let mut total = T::zero();
    for (t, &target) in targets.iter().enumerate() {
        let row = logits.row(t);
        let mut max = row[0];
        for &v in row {
            if v > max {
                max = v;
            }
        }
        let mut sum = T::zero();
        for &v in row {
            sum += (v - max).exp();
        }
        let lse = max + sum.ln();
        total += lse - row[target];
    }
    total / T::from_f64(n as f64)
}

/// Teacher-forced language-model pass. `tokens` supplies both inputs and
/// targets: position t predicts `tokens[t + 1]`, so a sequence of length
/// T + 1 yields T predictions; T = 1 (two tokens) is the smallest legal
/// call. Returns the T x vocab logits over prediction positions and the
/// mean next-token cross-entropy.
pub fn forward_lm<T: Real>(model: &Model<T>, tokens: &[usize]) -> Result<(Matrix<T>, T)> {
    if tokens.len() < 2 {
        return Err(Error::EmptyInput(
            "forward_lm needs at least two tokens (one prediction)".into(),
        ));
    }
    let inputs = &tokens[..tokens.len() - 1];
    let targets = &tokens[1..];
    for &t in targets {
        if t >= model.config.vocab_size {
            return Err(Error::TokenOutOfVocab {
                token: t as u32,
                vocab: model.config.vocab_size,
            });
        }
    }
    let trace = forward_trace(model, inputs)?;
    let loss = loss_from_logits(&trace.logits, targets);
    Ok((trace.logits, loss))
}

// ---------------------------------------------------------------------------
// Backward
// ---------------------------------------------------------------------------

/// Backward through a layer norm over a sequence; accumulates parameter
/// gradients and returns the input gradients.
fn layer_norm_backward<T: Real>(
    ln: &LayerNormParams<T>,
    trace: &LnTrace<T>,
    d_ys: &[Vector<T>],
    d_scale: &mut Vector<T>,
    d_shift: &mut Vector<T>,
) -> Vec<Vector<T>> {
    let n = ln.scale.len();
    let inv_n = T::one() / T::from_f64(n as f64);
    let mut d_xs = Vec::with_capacity(d_ys.len());
    for (t, dy) in d_ys.iter().enumerate() {
        let xhat = &trace.xhat[t];
        let inv = trace.inv_std[t];
        let mut m1 = T::zero();
        let mut m2 = T::zero();
        let mut d_xhat = Vector::zeros(n);
        for i in 0..n {
            let dyi = dy.get(i);
            d_scale.set(i, d_scale.get(i) + dyi * xhat.get(i));
            d_shift.set(i, d_shift.get(i) + dyi);
            let dh = dyi * ln.scale.get(i);
            d_xhat.set(i, dh);
            m1 += dh;
            m2 += dh * xhat.get(i);
        }
        m1 *= inv_n;
        m2 *= inv_n;
        let mut dx = Vector::zeros(n);
        for i in 0..n {
            dx.set(i, inv * (d_xhat.get(i) - m1 - xhat.get(i) * m2));
        }
        d_xs.push(dx);
    }
    d_xs
}

/// Backward through one attention head given cached probabilities.
/// Returns per-position gradients for q, k, v of this head.
fn attention_head_backward<T: Real>(
    trace: &AttnHeadTrace<T>,
    window: Option<usize>,
    d_ys: &[Vector<T>],
) -> (Vec<Vector<T>>, Vec<Vector<T>>, Vec<Vector<T>>) {
    let t_len = d_ys.len();
    let d = trace.qs[0].len();
    let scale = T::one() / T::from_f64(d as f64).sqrt();
    let mut d_q = vec![Vector::zeros(d); t_len];
    let mut d_k = vec![Vector::zeros(d); t_len];
    let mut d_v = vec![Vector::zeros(d); t_len];
    for t in 0..t_len {
        let lo = window.map_or(0, |w| (t + 1).saturating_sub(w));
        let probs = &trace.probs[t];
        let dy = &d_ys[t];
        // dp_j = dy . v_s; softmax backward needs the probability-weighted
        // mean of dp subtracted back out.
        let mut dp = vec![T::zero(); probs.len()];
        let mut pull = T::zero();
        for (j, s) in (lo..=t).enumerate() {
            axpy(d_v[s].data_mut(), probs[j], dy.data());
            let g = dy.dot(&trace.vs[s]).expect("head dims agree");
            dp[j] = g;
            pull += probs[j] * g;
        }
        for (j, s) in (lo..=t).enumerate() {
            let da = probs[j] * (dp[j] - pull) * scale;
            axpy(d_q[t].data_mut(), da, trace.ks[s].data());
            axpy(d_k[s].data_mut(), da, trace.qs[t].data());
        }
    }
    (d_q, d_k, d_v)
}

/// Accumulate per-head rule parameter gradients into the gradient model.
fn accumulate_rule_grads<T: Real>(
    head_grads: &mut RuleParams<T>,
    d_w_phi: Option<Matrix<T>>,
    d_b_phi: Option<Vector<T>>,
    d_gate: GateGradients<T>,
) {
    if let (Some(acc), Some(g)) = (head_grads.feature.w_phi.as_mut(), d_w_phi) {
        acc.add_in_place(&g);
    }
    if let (Some(acc), Some(g)) = (head_grads.feature.b_phi.as_mut(), d_b_phi) {
        acc.add_in_place(&g);
    }
    match (&mut head_grads.gate, d_gate) {
        (GateParams::None, GateGradients::None) => {}
        (GateParams::Scalar { w_g, b_g }, GateGradients::Scalar { d_w_g, d_b_g }) => {
            w_g.add_in_place(&d_w_g);
            *b_g += d_b_g;
        }
        (
            GateParams::Factored { w_z, b_z, w_f, b_f },
            GateGradients::Factored {
                d_w_z,
                d_b_z,
                d_w_f,
                d_b_f,
            },
        ) => {
            w_z.add_in_place(&d_w_z);
            b_z.add_in_place(&d_b_z);
            w_f.add_in_place(&d_w_f);
            b_f.add_in_place(&d_b_f);
        }
        _ => unreachable!("gradient variant matches parameter variant"),
    }
}

/// Full forward + analytic backward for one sequence. Accumulates into
/// `grads` (a [`Model::zeros_like`] buffer, or a running sum across a
/// batch) and returns the mean next-token cross-entropy.
pub fn loss_and_grad<T: Real>(
    model: &Model<T>,
    tokens: &[usize],
    grads: &mut Model<T>,
) -> Result<T> {
    if tokens.len() < 2 {
        return Err(Error::EmptyInput(
            "loss_and_grad needs at least two tokens (one prediction)".into(),
        ));
    }
    let cfg = &model.config;
    let inputs = &tokens[..tokens.len() - 1];
    let targets = &tokens[1..];
    for &t in targets {
        if t >= cfg.vocab_size {
            return Err(Error::TokenOutOfVocab {
                token: t as u32,
                vocab: cfg.vocab_size,
            });
        }
    }
    let trace = forward_trace(model, inputs)?;
    let t_len = inputs.len();
    let (nh, hd, dm) = (cfg.n_heads, cfg.head_dim, cfg.d_model);
    let inv_n = T::one() / T::from_f64(t_len as f64);

    // Cross-entropy + tied head backward in one pass over positions.
    let mut loss = T::zero();
    let mut d_hf = Vec::with_capacity(t_len);
    for (t, &target) in targets.iter().enumerate() {
        let row = trace.logits.row(t);
        let mut max = row[0];
        for &v in row {
            if v > max {
                max = v;
            }
        }
        let mut sum = T::zero();
        for &v in row {
            sum += (v - max).exp();
        }
        let lse = max + sum.ln();
        loss += lse - row[target];
        let mut d_logits = Vector::from_vec(
            row.iter()
                .map(|&v| (v - lse).exp() * inv_n)
                .collect::<Vec<_>>(),
        );
        let slot = d_logits.get(target);
        d_logits.set(target, slot - inv_n);
        // logits_t = E . hf_t: gradient reaches both the embedding and hf.
        grads
            .embedding
            .add_outer(d_logits.data(), trace.hf[t].data(), T::one());
        d_hf.push(model.embedding.matvec_transpose(&d_logits)?);
    }
    loss *= inv_n;

    let mut d_x = layer_norm_backward(
        &model.final_norm,
        &trace.ln_f,
        &d_hf,
        &mut grads.final_norm.scale,
        &mut grads.final_norm.shift,
    );

    for (l, layer) in model.layers.iter().enumerate().rev() {
        let ltr = &trace.layers[l];
        let glayer = &mut grads.layers[l];

        // FFN block: x_out = x_mid + W2 gelu(W1 u2 + b1) + b2.
        let mut d_u2 = Vec::with_capacity(t_len);
        for t in 0..t_len {
            let d_out = &d_x[t];
            glayer.ffn.w2.add_outer(d_out.data(), ltr.ffn_act[t].data(), T::one());
            glayer.ffn.b2.add_in_place(d_out);
            let d_act = layer.ffn.w2.matvec_transpose(d_out)?;
            let d_pre = Vector::from_vec(
                d_act
                    .data()
                    .iter()
                    .zip(ltr.ffn_pre[t].data())
                    .map(|(&da, &p)| da * gelu_deriv(p))
                    .collect::<Vec<_>>(),
            );
            glayer.ffn.w1.add_outer(d_pre.data(), ltr.u2[t].data(), T::one());
            glayer.ffn.b1.add_in_place(&d_pre);
            d_u2.push(layer.ffn.w1.matvec_transpose(&d_pre)?);
        }
        let d_ln2_in = layer_norm_backward(
            &layer.ln2,
            &ltr.ln2,
            &d_u2,
            &mut glayer.ln2.scale,
            &mut glayer.ln2.shift,
        );
        for t in 0..t_len {
            d_x[t].add_in_place(&d_ln2_in[t]);
        }

        // Mixer block: x_mid = x_in + W_o y_concat.
        let mut d_yc = Vec::with_capacity(t_len);
        for t in 0..t_len {
            glayer
                .mixer
                .w_o
                .add_outer(d_x[t].data(), ltr.y_concat[t].data(), T::one());
            d_yc.push(layer.mixer.w_o.matvec_transpose(&d_x[t])?);
        }

        // Per-head backward into q/k/v (and the rule's direct input path).
        let mut d_q_full = vec![Vector::zeros(dm); t_len];
        let mut d_k_full = vec![Vector::zeros(dm); t_len];
        let mut d_v_full = vec![Vector::zeros(dm); t_len];
        let mut d_u1 = vec![Vector::zeros(dm); t_len];
        let window = match &cfg.mixer {
            MixerKind::Local { window } => Some(*window),
            _ => None,
        };
        for h in 0..nh {
            let d_ys_h: Vec<Vector<T>> = (0..t_len)
                .map(|t| Vector::from_slice(&d_yc[t].data()[h * hd..(h + 1) * hd]))
                .collect();
            let (d_q_h, d_k_h, d_v_h) = match &ltr.mixer {
                MixerTrace::Attn(heads) => attention_head_backward(&heads[h], window, &d_ys_h),
                MixerTrace::Rule(caches) => {
                    let rg = backward_scan(&layer.mixer.heads[h], &caches[h], &d_ys_h)?;
                    accumulate_rule_grads(
                        &mut glayer.mixer.heads[h],
                        rg.d_w_phi,
                        rg.d_b_phi,
                        rg.d_gate,
                    );
                    for t in 0..t_len {
                        axpy(
                            &mut d_u1[t].data_mut()[h * hd..(h + 1) * hd],
                            T::one(),
                            rg.d_xs[t].data(),
                        );
                    }
                    (rg.d_qs, rg.d_ks, rg.d_vs)
                }
            };
            for t in 0..t_len {
                d_q_full[t].data_mut()[h * hd..(h + 1) * hd].copy_from_slice(d_q_h[t].data());
                d_k_full[t].data_mut()[h * hd..(h + 1) * hd].copy_from_slice(d_k_h[t].data());
                d_v_full[t].data_mut()[h * hd..(h + 1) * hd].copy_from_slice(d_v_h[t].data());
            }
        }

        for t in 0..t_len {
            glayer
                .mixer
                .w_q
                .add_outer(d_q_full[t].data(), ltr.u1[t].data(), T::one());
            glayer
                .mixer
                .w_k
                .add_outer(d_k_full[t].data(), ltr.u1[t].data(), T::one());
            glayer
                .mixer
                .w_v
                .add_outer(d_v_full[t].data(), ltr.u1[t].data(), T::one());
            layer
                .mixer
                .w_q
                .matvec_transpose_add_into(d_q_full[t].data(), d_u1[t].data_mut());
            layer
                .mixer
                .w_k
                .matvec_transpose_add_into(d_k_full[t].data(), d_u1[t].data_mut());
            layer
                .mixer
                .w_v
                .matvec_transpose_add_into(d_v_full[t].data(), d_u1[t].data_mut());
        }
        let d_ln1_in = layer_norm_backward(
            &layer.ln1,
            &ltr.ln1,
            &d_u1,
            &mut glayer.ln1.scale,
            &mut glayer.ln1.shift,
        );
        for t in 0..t_len {
            d_x[t].add_in_place(&d_ln1_in[t]);
        }
    }

    // Embedding lookup + positional table.
    for (t, &tok) in inputs.iter().enumerate() {
        axpy(grads.embedding.row_mut(tok), T::one(), d_x[t].data());
        axpy(grads.pos_embedding.row_mut(t), T::one(), d_x[t].data());
    }
    Ok(loss)
}

// ---------------------------------------------------------------------------
// Incremental generation
// ---------------------------------------------------------------------------

/// How to pick the next token from a logit row.
#[derive(Clone, Copy, Debug)]
pub enum Sampling {
    /// First-index argmax; the determinism baseline.
    Greedy,
    /// Softmax at temperature `tau` with an explicit seeded generator.
    Temperature { tau: f64, seed: u64 },
}

#[derive(Clone, Debug)]
struct KvHead<T> {
    ks: Vec<Vector<T>>,
    vs: Vec<Vector<T>>,
}

#[derive(Clone, Debug)]
enum LayerGenState<T> {
    Rule(Vec<FastWeightState<T>>),
    Kv {
        heads: Vec<KvHead<T>>,
        window: Option<usize>,
    },
}

/// Single-sequence decoding state: per-layer, per-head fast weights for rule
/// mixers, or cached K/V rows for attention mixers (a ring bounded by the
/// window for local attention).
#[derive(Clone, Debug)]
pub struct GenerationState<T> {
    pos: usize,
    layers: Vec<LayerGenState<T>>,
}

impl<T: Real> GenerationState<T> {
    pub fn new(model: &Model<T>) -> Self {
        let layers = model
            .layers
            .iter()
            .map(|_| match &model.config.mixer {
                MixerKind::Rule(rc) => {
                    LayerGenState::Rule((0..model.config.n_heads).map(|_| init_state(rc)).collect())
                }
                MixerKind::Softmax => LayerGenState::Kv {
                    heads: (0..model.config.n_heads)
                        .map(|_| KvHead {
                            ks: Vec::new(),
                            vs: Vec::new(),
                        })
                        .collect(),
                    window: None,
                },
                MixerKind::Local { window } => LayerGenState::Kv {
                    heads: (0..model.config.n_heads)
                        .map(|_| KvHead {
                            ks: Vec::new(),
                            vs: Vec::new(),
                        })
                        .collect(),
                    window: Some(*window),
                },
            })
            .collect();
        GenerationState { pos: 0, layers }
    }

    /// Number of tokens consumed so far.
    pub fn position(&self) -> usize {
        self.pos
    }

    /// Bytes held in state buffers: fast-weight matrices (plus normalizers)
    /// for rule mixers, cached K/V rows for attention mixers. Constant in
    /// the token count for rules; linear for softmax attention.
    pub fn live_bytes(&self) -> usize {
        let mut bytes = 0usize;
        for layer in &self.layers {
            match layer {
                LayerGenState::Rule(heads) => {
                    bytes += heads.iter().map(|s| s.live_bytes()).sum::<usize>();
                }
                LayerGenState::Kv { heads, .. } => {
                    for head in heads {
                        let elems = head.ks.iter().map(|k| k.len()).sum::<usize>()
                            + head.vs.iter().map(|v| v.len()).sum::<usize>();
                        bytes += elems * std::mem::size_of::<T>();
                    }
                }
            }
        }
        bytes
    }
}

/// Consume one token and return the next-token logits. Per-token cost is
/// independent of position for rule mixers; attention mixers pay for their
/// cache length.
pub fn step_logits<T: Real>(
    model: &Model<T>,
    state: &mut GenerationState<T>,
    token: usize,
) -> Result<Vector<T>> {
    let cfg = &model.config;
    let t = state.pos;
    let (nh, hd) = (cfg.n_heads, cfg.head_dim);
    let mut x = embed(model, token, t)?;
    for (layer, lstate) in model.layers.iter().zip(state.layers.iter_mut()) {
        let (u1, _, _) = layer_norm_apply(&layer.ln1, &x);
        let q = layer.mixer.w_q.matvec(&u1)?;
        let k = layer.mixer.w_k.matvec(&u1)?;
        let v = layer.mixer.w_v.matvec(&u1)?;
        let mut y_concat = Vector::zeros(cfg.d_model);
        for h in 0..nh {
            let q_h = head_slice(&q, h, hd);
            let k_h = head_slice(&k, h, hd);
            let v_h = head_slice(&v, h, hd);
            let y_h = match lstate {
                LayerGenState::Rule(states) => {
                    let x_h = head_slice(&u1, h, hd);
                    rule_step(
                        &layer.mixer.heads[h],
                        &mut states[h],
                        &x_h,
                        &q_h,
                        &k_h,
                        &v_h,
                        t,
                        None,
                    )?
                }
                LayerGenState::Kv { heads, window } => {
                    let head = &mut heads[h];
                    head.ks.push(k_h);
                    head.vs.push(v_h);
                    if let Some(w) = window {
                        if head.ks.len() > *w {
                            head.ks.remove(0);
                            head.vs.remove(0);
                        }
                    }
                    crate::attention::softmax_attention_step(&q_h, &head.ks, &head.vs)?
                }
            };
            y_concat.data_mut()[h * hd..(h + 1) * hd].copy_from_slice(y_h.data());
        }
        let mixed = layer.mixer.w_o.matvec(&y_concat)?;
        x.add_in_place(&mixed);
        let (u2, _, _) = layer_norm_apply(&layer.ln2, &x);
        let (out, _, _) = ffn_apply(&layer.ffn, &u2);
        x.add_in_place(&out);
    }
    let (hf, _, _) = layer_norm_apply(&model.final_norm, &x);
    let logits = model.embedding.matvec(&hf)?;
    state.pos = t + 1;
    Ok(logits)
}

fn sample_token<T: Real>(
    logits: &Vector<T>,
    sampling: &Sampling,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<usize> {
    match sampling {
        Sampling::Greedy => {
            let mut best = 0usize;
            let mut best_v = logits.get(0);
            for i in 1..logits.len() {
                if logits.get(i) > best_v {
                    best = i;
                    best_v = logits.get(i);
                }
            }
            Ok(best)
        }
        Sampling::Temperature { tau, .. } => {
            if *tau <= 0.0 {
                return Err(Error::InvalidConfig(format!(
                    "sampling temperature must be positive, got {tau}"
                )));
            }
            let inv = T::from_f64(1.0 / tau);
            let scaled = Vector::from_vec(logits.data().iter().map(|&v| v * inv).collect());
            let probs = crate::tensor::softmax(&scaled);
            let rng = rng.expect("temperature sampling carries a generator");
            let r = rng.gen::<f64>();
            let mut acc = 0.0f64;
            for i in 0..probs.len() {
                acc += probs.get(i).to_f64_lossy();
                if r < acc {
                    return Ok(i);
                }
            }
            Ok(probs.len() - 1)
        }
    }
}

/// Generate `n_tokens` continuations of `prompt` using an existing state
/// (which must be fresh). Returns only the generated tokens; the state is
/// left positioned after the last *consumed* token, so the final sampled
/// token is never fed back in.
pub fn generate_with_state<T: Real>(
    model: &Model<T>,
    state: &mut GenerationState<T>,
    prompt: &[usize],
    n_tokens: usize,
    sampling: &Sampling,
) -> Result<Vec<usize>> {
    if prompt.is_empty() {
        return Err(Error::EmptyInput("generation needs a non-empty prompt".into()));
    }
    let mut rng = match sampling {
        Sampling::Temperature { seed, .. } => Some(ChaCha8Rng::seed_from_u64(*seed)),
        Sampling::Greedy => None,
    };
    let mut logits = Vector::zeros(0);
    for &tok in prompt {
        logits = step_logits(model, state, tok)?;
    }
    let mut out = Vec::with_capacity(n_tokens);
    for i in 0..n_tokens {
        let tok = sample_token(&logits, sampling, rng.as_mut())?;
        out.push(tok);
        if i + 1 < n_tokens {
            logits = step_logits(model, state, tok)?;
        }
    }
    Ok(out)
}

/// Convenience wrapper building a fresh [`GenerationState`].
pub fn generate<T: Real>(
    model: &Model<T>,
    prompt: &[usize],
    n_tokens: usize,
    sampling: &Sampling,
) -> Result<Vec<usize>> {
    let mut state = GenerationState::new(model);
    generate_with_state(model, &mut state, prompt, n_tokens, sampling)
}

// ---------------------------------------------------------------------------
// Attention -> rule conversion
// ---------------------------------------------------------------------------

/// Re-target a softmax-attention model onto a fast-weight rule.
///
/// The trained q/k/v/o projections (and everything outside the mixer) are
/// copied bit-for-bit, then new rule parameters are drawn: decay gate
/// biases by uniform gate initialization with W_z/W_f at scale 1/sqrt(d);
/// the delta gate starts at sigmoid(b_g) = 0.007 so the converted model
/// initially writes almost nothing; feature-map weights at scale
/// 1/sqrt(d) with zero bias. Two value-projection rescalings keep early
/// readouts in the trained network's operating range: decay scales each
/// W_v row by (1 - sigmoid(b_z_i)) for its head, and the add rule without
/// a feature map scales W_v by 1/512 because its normalizer-free readout
/// grows with every token.
pub fn convert_mixer<T: Real>(
    model: &Model<T>,
    target: &RuleConfig,
    seed: u64,
) -> Result<Model<T>> {
    if model.config.mixer != MixerKind::Softmax {
        return Err(Error::InvalidConfig(format!(
            "convert_mixer expects a softmax-mixer source, got {}",
            model.config.mixer.label()
        )));
    }
    target.validate()?;
    if target.d != model.config.head_dim {
        return Err(Error::InvalidConfig(format!(
            "target rule d = {} but model head_dim = {}",
            target.d, model.config.head_dim
        )));
    }
    let mut out = model.clone();
    out.config.feature_dim = target.m;
    out.config.mixer = MixerKind::Rule(*target);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let hd = model.config.head_dim;
    for layer in &mut out.layers {
        let mut heads = Vec::with_capacity(model.config.n_heads);
        for h in 0..model.config.n_heads {
            let bias = if target.rule == RuleKind::Delta {
                logit(DELTA_CONVERT_GATE)
            } else {
                0.0
            };
            let params = fresh_rule_params::<T, _>(target, &mut rng, bias);
            if let GateParams::Factored { b_z, .. } = &params.gate {
                // Decay: each state row i keeps fraction sigmoid(b_z_i) per
                // step, so shrinking W_v row i by the complement keeps the
                // steady-state readout near the attention model's scale.
                for i in 0..hd {
                    let keep = T::one() - sigmoid(b_z.get(i));
                    for w in layer.mixer.w_v.row_mut(h * hd + i) {
                        *w *= keep;
                    }
                }
            }
            heads.push(params);
        }
        // "No feature map" covers both the literal identity and the learned
        // linear projection, which subsumes into W_q/W_k and is equivalent.
        if target.rule == RuleKind::Add
            && matches!(
                target.feature_map,
                FeatureMapKind::Identity | FeatureMapKind::Linear
            )
        {
            let s = T::from_f64(ADD_CONVERT_SCALE);
            layer.mixer.w_v.scale_in_place(s);
        }
        layer.mixer.heads = heads;
    }
    Ok(out)
}
