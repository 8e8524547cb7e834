//! Fast-weight update rules: the recurrent state, the four write rules, and
//! sequence processing in both inference (`step`) and training
//! (`scan_with_cache`) forms.
//!
//! The state is a matrix `S` of shape d x m, optionally paired with a
//! normalizer vector `z` of length m when attention normalization is on.
//! With feature-mapped key/query `k~`, `q~` and value `v`, one token updates
//! the state and reads an output:
//!
//! ```text
//! add:    S' = S + v k~^T                         z' = z + k~
//! gated:  S' = g S + (1-g) v k~^T                 z' = g z + (1-g) k~
//!         g  = sigmoid(w_g . x + b_g)
//! delta:  S' = S + g (v - S k~) k~^T              z' = z + k~
//!         g  = sigmoid(w_g . x + b_g)
//! decay:  S' = G (.) S + v k~^T                   (no normalizer)
//!         G  = sigmoid(W_z x + b_z) sigmoid(W_f x + b_f)^T
//!
//! read:   y = S' q~              or    y = (S' q~) / (z' . q~)
//! ```
//!
//! `step` advances a carried state in place and is O(d m) per token
//! regardless of how many tokens came before — this is what the generation
//! benchmark measures. `scan_with_cache` runs the same recurrence over a
//! whole sequence while recording every intermediate needed by the
//! analytical backward pass.

use crate::error::{Error, Result};
use crate::featmap::{apply_feature_map, sum_normalize, FeatureMapKind, FeatureMapParams};
use crate::real::{sigmoid, Real};
use crate::tensor::{axpy, Matrix, Vector};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RuleKind {
    Add,
    Gated,
    Delta,
    Decay,
}

impl RuleKind {
    pub fn name(self) -> &'static str {
        match self {
            RuleKind::Add => "add",
            RuleKind::Gated => "gated",
            RuleKind::Delta => "delta",
            RuleKind::Decay => "decay",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "add" => Ok(RuleKind::Add),
            "gated" => Ok(RuleKind::Gated),
            "delta" => Ok(RuleKind::Delta),
            "decay" => Ok(RuleKind::Decay),
            other => Err(Error::InvalidConfig(format!("unknown update rule {other:?}"))),
        }
    }

    /// Rules driven by a scalar input gate g = sigmoid(w_g . x + b_g).
    pub fn uses_scalar_gate(self) -> bool {
        matches!(self, RuleKind::Gated | RuleKind::Delta)
    }

    /// Rules driven by a rank-1 factored decay matrix.
    pub fn uses_factored_gate(self) -> bool {
        matches!(self, RuleKind::Decay)
    }
}

/// Shape and composition choices for one fast-weight memory.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RuleConfig {
    pub rule: RuleKind,
    pub feature_map: FeatureMapKind,
    /// Rescale feature vectors to sum to 1 before they touch the state.
    pub sum_norm: bool,
    /// Divide the readout by z . q~. Requires a normalizer, which the decay
    /// rule does not carry, so decay rejects this flag.
    pub attention_norm: bool,
    /// Key/query/value dimension.
    pub d: usize,
    /// Feature dimension (columns of S).
    pub m: usize,
}

impl RuleConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.m == 0 {
            return Err(Error::InvalidConfig(format!(
                "dimensions must be positive (d={}, m={})",
                self.d, self.m
            )));
        }
        if self.feature_map.requires_square() && self.d != self.m {
            return Err(Error::InvalidConfig(format!(
                "{} feature map requires m == d (got d={}, m={})",
                self.feature_map.name(),
                self.d,
                self.m
            )));
        }
        if self.rule == RuleKind::Decay && self.attention_norm {
            return Err(Error::InvalidConfig(
                "decay rule has no normalizer; attention normalization is unavailable".into(),
            ));
        }
        Ok(())
    }

    /// Whether the state carries the normalizer vector z.
    pub fn carries_normalizer(&self) -> bool {
        self.attention_norm
    }

    /// Short human-readable tag, e.g. "delta/elu1+sum+att".
    pub fn describe(&self) -> String {
        let mut tags = vec![self.feature_map.name().to_string()];
        if self.sum_norm {
            tags.push("sum".into());
        }
        if self.attention_norm {
            tags.push("att".into());
        }
        format!("{}/{}", self.rule.name(), tags.join("+"))
    }
}

/// Gate parameters. The variant must match the rule: `None` for add,
/// `Scalar` for gated and delta, `Factored` for decay.
#[derive(Clone, Debug, PartialEq)]
pub enum GateParams<T> {
    None,
    Scalar { w_g: Vector<T>, b_g: T },
    Factored {
        w_z: Matrix<T>,
        b_z: Vector<T>,
        w_f: Matrix<T>,
        b_f: Vector<T>,
    },
}

impl<T: Real> GateParams<T> {
    pub fn param_count(&self) -> usize {
        match self {
            GateParams::None => 0,
            GateParams::Scalar { w_g, .. } => w_g.len() + 1,
            GateParams::Factored { w_z, b_z, w_f, b_f } => {
                w_z.data().len() + b_z.len() + w_f.data().len() + b_f.len()
            }
        }
    }
}

/// All learned parameters of one fast-weight memory.
#[derive(Clone, Debug, PartialEq)]
pub struct RuleParams<T> {
    pub config: RuleConfig,
    pub feature: FeatureMapParams<T>,
    pub gate: GateParams<T>,
}

impl<T: Real> RuleParams<T> {
    /// Construct after checking that shapes and variants are consistent.
    pub fn validated(
        config: RuleConfig,
        feature: FeatureMapParams<T>,
        gate: GateParams<T>,
    ) -> Result<Self> {
        let p = RuleParams { config, feature, gate };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        self.feature
            .validate(self.config.feature_map, self.config.d, self.config.m)?;
        let (d, m) = (self.config.d, self.config.m);
        match (&self.gate, self.config.rule) {
            (GateParams::None, RuleKind::Add) => Ok(()),
            (GateParams::Scalar { w_g, .. }, RuleKind::Gated | RuleKind::Delta) => {
                if w_g.len() != d {
                    return Err(Error::DimMismatch(format!(
                        "w_g has length {}, expected {d}",
                        w_g.len()
                    )));
                }
                Ok(())
            }
            (GateParams::Factored { w_z, b_z, w_f, b_f }, RuleKind::Decay) => {
                if w_z.rows() != d || w_z.cols() != d || b_z.len() != d {
                    return Err(Error::DimMismatch(format!(
                        "decay row gate: W_z {}x{}, b_z {}, expected {d}x{d} and {d}",
                        w_z.rows(),
                        w_z.cols(),
                        b_z.len()
                    )));
                }
                if w_f.rows() != m || w_f.cols() != d || b_f.len() != m {
                    return Err(Error::DimMismatch(format!(
                        "decay column gate: W_f {}x{}, b_f {}, expected {m}x{d} and {m}",
                        w_f.rows(),
                        w_f.cols(),
                        b_f.len()
                    )));
                }
                Ok(())
            }
            (gate, rule) => Err(Error::InvalidConfig(format!(
                "gate parameters do not match rule {}: {:?} variant",
                rule.name(),
                match gate {
                    GateParams::None => "None",
                    GateParams::Scalar { .. } => "Scalar",
                    GateParams::Factored { .. } => "Factored",
                }
            ))),
        }
    }

    pub fn param_count(&self) -> usize {
        self.feature.param_count() + self.gate.param_count()
    }
}

/// The carried recurrent state: fast-weight matrix and optional normalizer.
#[derive(Clone, Debug, PartialEq)]
pub struct FastWeightState<T> {
    pub s: Matrix<T>,
    pub z: Option<Vector<T>>,
}

impl<T: Real> FastWeightState<T> {
    /// Bytes held by this state; what an incremental decoder keeps per memory.
    pub fn live_bytes(&self) -> usize {
        let elems = self.s.data().len() + self.z.as_ref().map_or(0, |z| z.len());
        elems * std::mem::size_of::<T>()
    }

    pub fn all_finite(&self) -> bool {
        self.s.all_finite() && self.z.as_ref().map_or(true, |z| z.all_finite())
    }
}

/// Zeroed state matching `config`: S = 0, and z = 0 when the configuration
/// carries a normalizer.
pub fn init_state<T: Real>(config: &RuleConfig) -> FastWeightState<T> {
    FastWeightState {
        s: Matrix::zeros(config.d, config.m),
        z: config
            .carries_normalizer()
            .then(|| Vector::zeros(config.m)),
    }
}

/// Test and inspection hook: replace the computed gate for one step.
#[derive(Clone, Debug)]
pub enum GateOverride<T> {
    /// Force the scalar gate of the gated or delta rule.
    Scalar(T),
    /// Force the full decay matrix G (entries in [0, 1]).
    Matrix(Matrix<T>),
}

fn featurize<T: Real>(params: &RuleParams<T>, x: &Vector<T>) -> Result<Vector<T>> {
    let phi = apply_feature_map(params.config.feature_map, &params.feature, x)?;
    if params.config.sum_norm {
        sum_normalize(&phi)
    } else {
        Ok(phi)
    }
}

/// Scalar gate for the gated and delta rules.
pub fn scalar_gate<T: Real>(params: &RuleParams<T>, x: &Vector<T>) -> Result<T> {
    match &params.gate {
        GateParams::Scalar { w_g, b_g } => Ok(sigmoid(w_g.dot(x)? + *b_g)),
        _ => Err(Error::InvalidConfig(format!(
            "rule {} has no scalar gate",
            params.config.rule.name()
        ))),
    }
}

/// Factors (c, f) of the decay matrix G = c f^T, each entry in (0, 1).
pub fn factored_gate<T: Real>(params: &RuleParams<T>, x: &Vector<T>) -> Result<(Vector<T>, Vector<T>)> {
    match &params.gate {
        GateParams::Factored { w_z, b_z, w_f, b_f } => {
            let mut c = w_z.matvec(x)?;
            for (ci, &bi) in c.data_mut().iter_mut().zip(b_z.data()) {
                *ci = sigmoid(*ci + bi);
            }
            let mut f = w_f.matvec(x)?;
            for (fi, &bi) in f.data_mut().iter_mut().zip(b_f.data()) {
                *fi = sigmoid(*fi + bi);
            }
            Ok((c, f))
        }
        _ => Err(Error::InvalidConfig(format!(
            "rule {} has no factored gate",
            params.config.rule.name()
        ))),
    }
}

fn check_unit_interval<T: Real>(g: T) -> Result<()> {
    if g < T::zero() || g > T::one() || !g.is_finite() {
        return Err(Error::GateOutOfRange(g.to_f64_lossy()));
    }
    Ok(())
}

/// Advance the state by one token in place and return the readout.
///
/// `t` is the position used in error reports. `gate_override`, when given,
/// replaces the computed gate for this step only.
pub fn step<T: Real>(
    params: &RuleParams<T>,
    state: &mut FastWeightState<T>,
    x: &Vector<T>,
    q: &Vector<T>,
    k: &Vector<T>,
    v: &Vector<T>,
    t: usize,
    gate_override: Option<&GateOverride<T>>,
) -> Result<Vector<T>> {
    params.validate()?;
    let cfg = &params.config;
    if x.len() != cfg.d || q.len() != cfg.d || k.len() != cfg.d || v.len() != cfg.d {
        return Err(Error::DimMismatch(format!(
            "step inputs must have length d={}, got x={} q={} k={} v={}",
            cfg.d,
            x.len(),
            q.len(),
            k.len(),
            v.len()
        )));
    }
    if state.s.rows() != cfg.d || state.s.cols() != cfg.m
        || state.z.is_some() != cfg.carries_normalizer()
    {
        return Err(Error::DimMismatch("state does not match configuration".into()));
    }
    let k_tilde = featurize(params, k)?;
    let q_tilde = featurize(params, q)?;
    let (d, m) = (cfg.d, cfg.m);

    match cfg.rule {
        RuleKind::Add => {
            state.s.add_outer(v.data(), k_tilde.data(), T::one());
            if let Some(z) = state.z.as_mut() {
                z.add_in_place(&k_tilde);
            }
        }
        RuleKind::Gated => {
            let g = match gate_override {
                Some(GateOverride::Scalar(g)) => {
                    check_unit_interval(*g)?;
                    *g
                }
                Some(GateOverride::Matrix(_)) => {
                    return Err(Error::InvalidConfig(
                        "gated rule takes a scalar gate override".into(),
                    ))
                }
                None => scalar_gate(params, x)?,
            };
            let one_minus = T::one() - g;
            for i in 0..d {
                let write = one_minus * v.get(i);
                let row = state.s.row_mut(i);
                for j in 0..m {
                    row[j] = g * row[j] + write * k_tilde.get(j);
                }
            }
            if let Some(z) = state.z.as_mut() {
                for j in 0..m {
                    let zj = g * z.get(j) + one_minus * k_tilde.get(j);
                    z.set(j, zj);
                }
            }
        }
        RuleKind::Delta => {
            let g = match gate_override {
                Some(GateOverride::Scalar(g)) => {
                    check_unit_interval(*g)?;
                    *g
                }
                Some(GateOverride::Matrix(_)) => {
                    return Err(Error::InvalidConfig(
                        "delta rule takes a scalar gate override".into(),
                    ))
                }
                None => scalar_gate(params, x)?,
            };
            let s_minus = state.s.matvec(&k_tilde)?;
            for i in 0..d {
                let write = g * (v.get(i) - s_minus.get(i));
                let row = state.s.row_mut(i);
                for j in 0..m {
                    row[j] = row[j] + write * k_tilde.get(j);
                }
            }
            if let Some(z) = state.z.as_mut() {
                z.add_in_place(&k_tilde);
            }
        }
        RuleKind::Decay => {
            match gate_override {
                Some(GateOverride::Matrix(gm)) => {
                    if gm.rows() != d || gm.cols() != m {
                        return Err(Error::DimMismatch(format!(
                            "decay override is {}x{}, expected {d}x{m}",
                            gm.rows(),
                            gm.cols()
                        )));
                    }
                    for &gij in gm.data() {
                        check_unit_interval(gij)?;
                    }
                    for i in 0..d {
                        let vi = v.get(i);
                        let grow = gm.row(i);
                        let row = state.s.row_mut(i);
                        for j in 0..m {
                            row[j] = grow[j] * row[j] + vi * k_tilde.get(j);
                        }
                    }
                }
                Some(GateOverride::Scalar(_)) => {
                    return Err(Error::InvalidConfig(
                        "decay rule takes a matrix gate override".into(),
                    ))
                }
                None => {
                    let (c, f) = factored_gate(params, x)?;
                    for i in 0..d {
                        let ci = c.get(i);
                        let vi = v.get(i);
                        let row = state.s.row_mut(i);
                        for j in 0..m {
                            row[j] = ci * f.get(j) * row[j] + vi * k_tilde.get(j);
                        }
                    }
                }
            }
        }
    }

    let numer = state.s.matvec(&q_tilde)?;
    let y = if cfg.attention_norm {
        let z = state
            .z
            .as_ref()
            .expect("attention normalization carries a normalizer");
        let denom = z.dot(&q_tilde)?;
        if denom.abs() <= T::EPS_NORM {
            return Err(Error::NormalizerUnderflow {
                step: t,
                denom: denom.to_f64_lossy(),
                floor: T::EPS_NORM.to_f64_lossy(),
            });
        }
        let mut y = numer;
        y.scale_in_place(T::one() / denom);
        y
    } else {
        numer
    };
    if !y.all_finite() {
        return Err(Error::DivergedState { step: t, what: "readout" });
    }
    Ok(y)
}

/// Per-step gate values recorded by `scan_with_cache`.
#[derive(Clone, Debug)]
pub enum GateCache<T> {
    None,
    Scalar(Vec<T>),
    Factored { c: Vec<Vector<T>>, f: Vec<Vector<T>> },
}

/// Everything the backward pass needs from a forward scan: inputs, feature
/// vectors before and after normalization, gates, the full state trajectory
/// (entry 0 is the initial state), and readouts. Memory grows linearly with
/// sequence length, which is exactly the cost `step` avoids at inference.
#[derive(Clone, Debug)]
pub struct SequenceCache<T> {
    pub xs: Vec<Vector<T>>,
    pub qs: Vec<Vector<T>>,
    pub ks: Vec<Vector<T>>,
    pub vs: Vec<Vector<T>>,
    /// Feature map outputs before sum normalization.
    pub phi_k: Vec<Vector<T>>,
    pub phi_q: Vec<Vector<T>>,
    /// Component sums used by sum normalization, present when it is on.
    pub k_sums: Option<Vec<T>>,
    pub q_sums: Option<Vec<T>>,
    /// Feature vectors as seen by the recurrence.
    pub k_tilde: Vec<Vector<T>>,
    pub q_tilde: Vec<Vector<T>>,
    pub gates: GateCache<T>,
    /// s_states[t] is S after t tokens; s_states[0] is the initial state.
    pub s_states: Vec<Matrix<T>>,
    pub z_states: Option<Vec<Vector<T>>>,
    /// Delta rule only: S_{t-1} k~_t for each step.
    pub s_minus: Option<Vec<Vector<T>>>,
    /// Attention-norm denominators z_t . q~_t.
    pub denoms: Option<Vec<T>>,
    pub ys: Vec<Vector<T>>,
}

impl<T: Real> SequenceCache<T> {
    pub fn len(&self) -> usize {
        self.ys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ys.is_empty()
    }

    pub fn final_state(&self) -> FastWeightState<T> {
        FastWeightState {
            s: self.s_states.last().expect("cache holds initial state").clone(),
            z: self.z_states.as_ref().map(|zs| zs.last().unwrap().clone()),
        }
    }

    /// Total bytes held by the cache buffers.
    pub fn live_bytes(&self) -> usize {
        let vec_elems = |vs: &Vec<Vector<T>>| vs.iter().map(|v| v.len()).sum::<usize>();
        let mut elems = vec_elems(&self.xs)
            + vec_elems(&self.qs)
            + vec_elems(&self.ks)
            + vec_elems(&self.vs)
            + vec_elems(&self.phi_k)
            + vec_elems(&self.phi_q)
            + vec_elems(&self.k_tilde)
            + vec_elems(&self.q_tilde)
            + vec_elems(&self.ys);
        elems += self.k_sums.as_ref().map_or(0, |s| s.len());
        elems += self.q_sums.as_ref().map_or(0, |s| s.len());
        elems += match &self.gates {
            GateCache::None => 0,
            GateCache::Scalar(g) => g.len(),
            GateCache::Factored { c, f } => vec_elems(c) + vec_elems(f),
        };
        elems += self.s_states.iter().map(|s| s.data().len()).sum::<usize>();
        elems += self
            .z_states
            .as_ref()
            .map_or(0, |zs| zs.iter().map(|z| z.len()).sum::<usize>());
        elems += self.s_minus.as_ref().map_or(0, |sm| vec_elems(sm));
        elems += self.denoms.as_ref().map_or(0, |d| d.len());
        elems * std::mem::size_of::<T>()
    }
}

/// Run the recurrence over a whole sequence, recording all intermediates.
pub fn scan_with_cache<T: Real>(
    params: &RuleParams<T>,
    init: &FastWeightState<T>,
    xs: &[Vector<T>],
    qs: &[Vector<T>],
    ks: &[Vector<T>],
    vs: &[Vector<T>],
) -> Result<SequenceCache<T>> {
    let cfg = &params.config;
    let t_len = xs.len();
    if qs.len() != t_len || ks.len() != t_len || vs.len() != t_len {
        return Err(Error::DimMismatch(format!(
            "scan inputs disagree on length: xs={} qs={} ks={} vs={}",
            xs.len(),
            qs.len(),
            ks.len(),
            vs.len()
        )));
    }
    if init.s.rows() != cfg.d || init.s.cols() != cfg.m {
        return Err(Error::DimMismatch(format!(
            "initial state is {}x{}, expected {}x{}",
            init.s.rows(),
            init.s.cols(),
            cfg.d,
            cfg.m
        )));
    }
    if init.z.is_some() != cfg.carries_normalizer() {
        return Err(Error::InvalidConfig(
            "initial state normalizer does not match configuration".into(),
        ));
    }

    let mut cache = SequenceCache {
        xs: xs.to_vec(),
        qs: qs.to_vec(),
        ks: ks.to_vec(),
        vs: vs.to_vec(),
        phi_k: Vec::with_capacity(t_len),
        phi_q: Vec::with_capacity(t_len),
        k_sums: cfg.sum_norm.then(|| Vec::with_capacity(t_len)),
        q_sums: cfg.sum_norm.then(|| Vec::with_capacity(t_len)),
        k_tilde: Vec::with_capacity(t_len),
        q_tilde: Vec::with_capacity(t_len),
        gates: match cfg.rule {
            RuleKind::Add => GateCache::None,
            RuleKind::Gated | RuleKind::Delta => GateCache::Scalar(Vec::with_capacity(t_len)),
            RuleKind::Decay => GateCache::Factored {
                c: Vec::with_capacity(t_len),
                f: Vec::with_capacity(t_len),
            },
        },
        s_states: Vec::with_capacity(t_len + 1),
        z_states: cfg.carries_normalizer().then(|| Vec::with_capacity(t_len + 1)),
        s_minus: (cfg.rule == RuleKind::Delta).then(|| Vec::with_capacity(t_len)),
        denoms: cfg.attention_norm.then(|| Vec::with_capacity(t_len)),
        ys: Vec::with_capacity(t_len),
    };
    cache.s_states.push(init.s.clone());
    if let (Some(zs), Some(z0)) = (cache.z_states.as_mut(), init.z.as_ref()) {
        zs.push(z0.clone());
    }

    for t in 0..t_len {
        // Features. Record the pre-normalization vectors and their sums so
        // the backward pass can differentiate through the rescaling.
        let phi_k = apply_feature_map(cfg.feature_map, &params.feature, &ks[t])?;
        let phi_q = apply_feature_map(cfg.feature_map, &params.feature, &qs[t])?;
        let (k_tilde, q_tilde) = if cfg.sum_norm {
            let ks_sum = phi_k.sum();
            let qs_sum = phi_q.sum();
            let k_tilde = sum_normalize(&phi_k)?;
            let q_tilde = sum_normalize(&phi_q)?;
            cache.k_sums.as_mut().unwrap().push(ks_sum);
            cache.q_sums.as_mut().unwrap().push(qs_sum);
            (k_tilde, q_tilde)
        } else {
            (phi_k.clone(), phi_q.clone())
        };
        cache.phi_k.push(phi_k);
        cache.phi_q.push(phi_q);

        // State transition from the recorded previous state.
        let s_prev = cache.s_states.last().unwrap();
        let mut s_new = s_prev.clone();
        let mut z_new = cache
            .z_states
            .as_ref()
            .map(|zs| zs.last().unwrap().clone());
        match cfg.rule {
            RuleKind::Add => {
                s_new.add_outer(vs[t].data(), k_tilde.data(), T::one());
                if let Some(z) = z_new.as_mut() {
                    z.add_in_place(&k_tilde);
                }
            }
            RuleKind::Gated => {
                let g = scalar_gate(params, &xs[t])?;
                let one_minus = T::one() - g;
                s_new.scale_in_place(g);
                s_new.add_outer(vs[t].data(), k_tilde.data(), one_minus);
                if let Some(z) = z_new.as_mut() {
                    z.scale_in_place(g);
                    axpy(z.data_mut(), one_minus, k_tilde.data());
                }
                match &mut cache.gates {
                    GateCache::Scalar(gs) => gs.push(g),
                    _ => unreachable!(),
                }
            }
            RuleKind::Delta => {
                let g = scalar_gate(params, &xs[t])?;
                let s_minus = s_prev.matvec(&k_tilde)?;
                let mut residual = vs[t].clone();
                residual.sub_in_place(&s_minus);
                s_new.add_outer(residual.data(), k_tilde.data(), g);
                if let Some(z) = z_new.as_mut() {
                    z.add_in_place(&k_tilde);
                }
                cache.s_minus.as_mut().unwrap().push(s_minus);
                match &mut cache.gates {
                    GateCache::Scalar(gs) => gs.push(g),
                    _ => unreachable!(),
                }
            }
            RuleKind::Decay => {
                let (c, f) = factored_gate(params, &xs[t])?;
                for i in 0..cfg.d {
                    let ci = c.get(i);
                    let vi = vs[t].get(i);
                    let row = s_new.row_mut(i);
                    for j in 0..cfg.m {
                        row[j] = ci * f.get(j) * row[j] + vi * k_tilde.get(j);
                    }
                }
                match &mut cache.gates {
                    GateCache::Factored { c: cs, f: fs } => {
                        cs.push(c);
                        fs.push(f);
                    }
                    _ => unreachable!(),
                }
            }
        }

        // Readout from the updated state.
        let numer = s_new.matvec(&q_tilde)?;
        let y = if cfg.attention_norm {
            let z = z_new.as_ref().expect("normalizer present");
            let denom = z.dot(&q_tilde)?;
            if denom.abs() <= T::EPS_NORM {
                return Err(Error::NormalizerUnderflow {
                    step: t,
                    denom: denom.to_f64_lossy(),
                    floor: T::EPS_NORM.to_f64_lossy(),
                });
            }
            cache.denoms.as_mut().unwrap().push(denom);
            let mut y = numer;
            y.scale_in_place(T::one() / denom);
            y
        } else {
            numer
        };
        if !y.all_finite() {
            return Err(Error::DivergedState { step: t, what: "readout" });
        }

        cache.k_tilde.push(k_tilde);
        cache.q_tilde.push(q_tilde);
        cache.s_states.push(s_new);
        if let (Some(zs), Some(z)) = (cache.z_states.as_mut(), z_new) {
            zs.push(z);
        }
        cache.ys.push(y);
    }
    Ok(cache)
}

/// Training-mode convenience: run the scan and return only the readouts and
/// final state. Incremental decoding should use `step` instead.
pub fn scan<T: Real>(
    params: &RuleParams<T>,
    init: &FastWeightState<T>,
    xs: &[Vector<T>],
    qs: &[Vector<T>],
    ks: &[Vector<T>],
    vs: &[Vector<T>],
) -> Result<(Vec<Vector<T>>, FastWeightState<T>)> {
    let cache = scan_with_cache(params, init, xs, qs, ks, vs)?;
    let final_state = cache.final_state();
    Ok((cache.ys, final_state))
}
