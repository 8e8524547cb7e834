//! Analytical backward passes for the update rules, plus a central
//! finite-difference checker to verify them.
//!
//! `backward_scan` walks a recorded forward pass in reverse, carrying the
//! adjoints of the recurrent state:
//!
//! ```text
//! S^_t = dL/dS_t,   z^_t = dL/dz_t
//! ```
//!
//! At each step the readout contributes to the adjoints, the write rule is
//! differentiated to produce gradients for v, k~, and the gate, the state
//! adjoint is pulled through the transition Jacobian, and finally the
//! feature map (with optional sum normalization) routes dk~ and dq~ back to
//! raw inputs and feature parameters. Everything is closed form; there is
//! no tape or autodiff here, which keeps training allocation-free beyond
//! the forward cache.

use crate::error::{Error, Result};
use crate::featmap::{FeatureMapKind, FeatureMapParams};
use crate::real::{elu1_deriv, Real};
use crate::rules::{
    init_state, scan_with_cache, FastWeightState, GateCache, GateParams, RuleConfig, RuleKind,
    RuleParams, SequenceCache,
};
use crate::tensor::{axpy, Matrix, Vector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Gradients of the gate parameters, mirroring [`GateParams`].
#[derive(Clone, Debug)]
pub enum GateGradients<T> {
    None,
    Scalar { d_w_g: Vector<T>, d_b_g: T },
    Factored {
        d_w_z: Matrix<T>,
        d_b_z: Vector<T>,
        d_w_f: Matrix<T>,
        d_b_f: Vector<T>,
    },
}

/// Gradients produced by [`backward_scan`]: one entry per input token plus
/// parameter and initial-state gradients. Fields are `None` exactly when
/// the corresponding parameter is absent from the configuration.
#[derive(Clone, Debug)]
pub struct RuleGradients<T> {
    pub d_xs: Vec<Vector<T>>,
    pub d_qs: Vec<Vector<T>>,
    pub d_ks: Vec<Vector<T>>,
    pub d_vs: Vec<Vector<T>>,
    pub d_w_phi: Option<Matrix<T>>,
    pub d_b_phi: Option<Vector<T>>,
    pub d_gate: GateGradients<T>,
    pub d_init_s: Matrix<T>,
    pub d_init_z: Option<Vector<T>>,
}

fn frob_dot<T: Real>(a: &Matrix<T>, b: &Matrix<T>) -> T {
    debug_assert_eq!(a.data().len(), b.data().len());
    let mut acc = T::zero();
    for (x, y) in a.data().iter().zip(b.data()) {
        acc = acc + *x * *y;
    }
    acc
}

/// Route a gradient on the normalized feature vector back through sum
/// normalization (when present) and the feature map, accumulating into the
/// raw-input gradient and the shared feature parameters.
#[allow(clippy::too_many_arguments)]
fn feature_backward<T: Real>(
    kind: FeatureMapKind,
    feature: &FeatureMapParams<T>,
    d_tilde: &Vector<T>,
    tilde: &Vector<T>,
    phi: &Vector<T>,
    sigma: Option<T>,
    raw: &Vector<T>,
    d_raw: &mut Vector<T>,
    d_w_phi: &mut Option<Matrix<T>>,
    d_b_phi: &mut Option<Vector<T>>,
) -> Result<()> {
    // Sum normalization: k~ = phi / sigma with sigma = sum(phi), so
    // d_phi_l = (d_tilde_l - d_tilde . k~) / sigma.
    let d_phi = match sigma {
        Some(sigma) => {
            let pull = d_tilde.dot(tilde)?;
            let inv = T::one() / sigma;
            Vector::from_vec(
                d_tilde
                    .data()
                    .iter()
                    .map(|&dl| (dl - pull) * inv)
                    .collect(),
            )
        }
        None => d_tilde.clone(),
    };
    match kind {
        FeatureMapKind::Identity => {
            d_raw.add_in_place(&d_phi);
        }
        FeatureMapKind::Elu1 => {
            for i in 0..d_raw.len() {
                let g = d_raw.get(i) + d_phi.get(i) * elu1_deriv(raw.get(i));
                d_raw.set(i, g);
            }
        }
        FeatureMapKind::Linear => {
            let w = feature.w_phi.as_ref().expect("validated linear map");
            d_w_phi
                .as_mut()
                .expect("gradient slot for W_phi")
                .add_outer(d_phi.data(), raw.data(), T::one());
            let back = w.matvec_transpose(&d_phi)?;
            d_raw.add_in_place(&back);
        }
        FeatureMapKind::Relu => {
            let w = feature.w_phi.as_ref().expect("validated relu map");
            // The kink mask: post-activation > 0 iff pre-activation > 0.
            let d_pre = Vector::from_vec(
                d_phi
                    .data()
                    .iter()
                    .zip(phi.data())
                    .map(|(&dp, &p)| if p > T::zero() { dp } else { T::zero() })
                    .collect(),
            );
            d_w_phi
                .as_mut()
                .expect("gradient slot for W_phi")
                .add_outer(d_pre.data(), raw.data(), T::one());
            d_b_phi
                .as_mut()
                .expect("gradient slot for b_phi")
                .add_in_place(&d_pre);
            let back = w.matvec_transpose(&d_pre)?;
            d_raw.add_in_place(&back);
        }
    }
    Ok(())
}

/// Reverse pass over a recorded scan. `d_ys[t]` is dL/dy_t; the result
/// contains dL for every input token, every parameter, and the initial state.
pub fn backward_scan<T: Real>(
    params: &RuleParams<T>,
    cache: &SequenceCache<T>,
    d_ys: &[Vector<T>],
) -> Result<RuleGradients<T>> {
    params.validate()?;
    let cfg = &params.config;
    let (d, m) = (cfg.d, cfg.m);
    let t_len = cache.len();
    if d_ys.len() != t_len {
        return Err(Error::DimMismatch(format!(
            "backward_scan: {} output gradients for {} steps",
            d_ys.len(),
            t_len
        )));
    }

    let mut s_hat = Matrix::<T>::zeros(d, m);
    let mut z_hat = cfg.carries_normalizer().then(|| Vector::<T>::zeros(m));

    let mut grads = RuleGradients {
        d_xs: vec![Vector::zeros(d); t_len],
        d_qs: vec![Vector::zeros(d); t_len],
        d_ks: vec![Vector::zeros(d); t_len],
        d_vs: vec![Vector::zeros(d); t_len],
        d_w_phi: params
            .feature
            .w_phi
            .as_ref()
            .map(|w| Matrix::zeros(w.rows(), w.cols())),
        d_b_phi: params.feature.b_phi.as_ref().map(|b| Vector::zeros(b.len())),
        d_gate: match &params.gate {
            GateParams::None => GateGradients::None,
            GateParams::Scalar { w_g, .. } => GateGradients::Scalar {
                d_w_g: Vector::zeros(w_g.len()),
                d_b_g: T::zero(),
            },
            GateParams::Factored { w_z, w_f, .. } => GateGradients::Factored {
                d_w_z: Matrix::zeros(w_z.rows(), w_z.cols()),
                d_b_z: Vector::zeros(w_z.rows()),
                d_w_f: Matrix::zeros(w_f.rows(), w_f.cols()),
                d_b_f: Vector::zeros(w_f.rows()),
            },
        },
        d_init_s: Matrix::zeros(d, m),
        d_init_z: cfg.carries_normalizer().then(|| Vector::zeros(m)),
    };

    for t in (0..t_len).rev() {
        let s_curr = &cache.s_states[t + 1];
        let s_prev = &cache.s_states[t];
        let k_tilde = &cache.k_tilde[t];
        let q_tilde = &cache.q_tilde[t];
        let v_t = &cache.vs[t];
        let x_t = &cache.xs[t];
        let dy = &d_ys[t];

        // Readout: y = S_t q~ (optionally divided by b = z_t . q~).
        let mut dq_tilde;
        if cfg.attention_norm {
            let b = cache.denoms.as_ref().expect("denoms recorded")[t];
            let z_curr = &cache.z_states.as_ref().expect("z recorded")[t + 1];
            let inv_b = T::one() / b;
            let mut da = dy.clone();
            da.scale_in_place(inv_b);
            // a = y b, so dy . a = (dy . y) b and db = -(dy . a) / b^2.
            let db = -(dy.dot(&cache.ys[t])?) * inv_b;
            s_hat.add_outer(da.data(), q_tilde.data(), T::one());
            dq_tilde = s_curr.matvec_transpose(&da)?;
            axpy(dq_tilde.data_mut(), db, z_curr.data());
            axpy(
                z_hat.as_mut().expect("normalizer adjoint").data_mut(),
                db,
                q_tilde.data(),
            );
        } else {
            s_hat.add_outer(dy.data(), q_tilde.data(), T::one());
            dq_tilde = s_curr.matvec_transpose(dy)?;
        }

        // Write-rule transition.
        let mut dk_tilde;
        match cfg.rule {
            RuleKind::Add => {
                let dv = s_hat.matvec(k_tilde)?;
                grads.d_vs[t].add_in_place(&dv);
                dk_tilde = s_hat.matvec_transpose(v_t)?;
                if let Some(zh) = z_hat.as_ref() {
                    dk_tilde.add_in_place(zh);
                }
                // S and z pass through unchanged: adjoints carry over as-is.
            }
            RuleKind::Gated => {
                let g = match &cache.gates {
                    GateCache::Scalar(gs) => gs[t],
                    _ => unreachable!("gated rule records scalar gates"),
                };
                let one_minus = T::one() - g;
                let w = s_hat.matvec(k_tilde)?;
                let mut dg = frob_dot(&s_hat, s_prev) - v_t.dot(&w)?;
                let mut dv = w;
                dv.scale_in_place(one_minus);
                grads.d_vs[t].add_in_place(&dv);
                dk_tilde = s_hat.matvec_transpose(v_t)?;
                dk_tilde.scale_in_place(one_minus);
                if let Some(zh) = z_hat.as_mut() {
                    let z_prev = &cache.z_states.as_ref().expect("z recorded")[t];
                    dg += zh.dot(z_prev)? - zh.dot(k_tilde)?;
                    axpy(dk_tilde.data_mut(), one_minus, zh.data());
                    zh.scale_in_place(g);
                }
                s_hat.scale_in_place(g);
                scalar_gate_backward(params, &mut grads, dg, g, x_t, t)?;
            }
            RuleKind::Delta => {
                let g = match &cache.gates {
                    GateCache::Scalar(gs) => gs[t],
                    _ => unreachable!("delta rule records scalar gates"),
                };
                let s_minus = &cache.s_minus.as_ref().expect("delta residuals recorded")[t];
                let w = s_hat.matvec(k_tilde)?;
                let mut resid = v_t.clone();
                resid.sub_in_place(s_minus);
                let dg = resid.dot(&w)?;
                let mut dv = w.clone();
                dv.scale_in_place(g);
                grads.d_vs[t].add_in_place(&dv);
                dk_tilde = s_hat.matvec_transpose(&resid)?;
                dk_tilde.scale_in_place(g);
                let through_residual = s_prev.matvec_transpose(&w)?;
                axpy(dk_tilde.data_mut(), -g, through_residual.data());
                if let Some(zh) = z_hat.as_ref() {
                    dk_tilde.add_in_place(zh);
                }
                // dS_{t-1} = S^ (I - g k~ k~^T): subtract the rank-1 piece.
                s_hat.add_outer(w.data(), k_tilde.data(), -g);
                scalar_gate_backward(params, &mut grads, dg, g, x_t, t)?;
            }
            RuleKind::Decay => {
                let (c, f) = match &cache.gates {
                    GateCache::Factored { c, f } => (&c[t], &f[t]),
                    _ => unreachable!("decay rule records factored gates"),
                };
                let dv = s_hat.matvec(k_tilde)?;
                grads.d_vs[t].add_in_place(&dv);
                dk_tilde = s_hat.matvec_transpose(v_t)?;
                // dG = S^ (.) S_{t-1}; fold it into the gate factors while
                // scaling the adjoint S^ <- G (.) S^ in the same sweep.
                let mut dc = Vector::<T>::zeros(d);
                let mut df = Vector::<T>::zeros(m);
                for i in 0..d {
                    let ci = c.get(i);
                    let sp_row = s_prev.row(i);
                    let sh_row = s_hat.row_mut(i);
                    let mut acc = T::zero();
                    for j in 0..m {
                        let dgij = sh_row[j] * sp_row[j];
                        acc = acc + dgij * f.get(j);
                        let dfj = df.get(j) + dgij * ci;
                        df.set(j, dfj);
                        sh_row[j] = ci * f.get(j) * sh_row[j];
                    }
                    dc.set(i, acc);
                }
                factored_gate_backward(params, &mut grads, &dc, &df, c, f, x_t, t)?;
            }
        }

        // Feature map and sum normalization, key path then query path.
        feature_backward(
            cfg.feature_map,
            &params.feature,
            &dk_tilde,
            k_tilde,
            &cache.phi_k[t],
            cache.k_sums.as_ref().map(|s| s[t]),
            &cache.ks[t],
            &mut grads.d_ks[t],
            &mut grads.d_w_phi,
            &mut grads.d_b_phi,
        )?;
        feature_backward(
            cfg.feature_map,
            &params.feature,
            &dq_tilde,
            q_tilde,
            &cache.phi_q[t],
            cache.q_sums.as_ref().map(|s| s[t]),
            &cache.qs[t],
            &mut grads.d_qs[t],
            &mut grads.d_w_phi,
            &mut grads.d_b_phi,
        )?;
    }

    grads.d_init_s = s_hat;
    grads.d_init_z = z_hat;
    Ok(grads)
}

fn scalar_gate_backward<T: Real>(
    params: &RuleParams<T>,
    grads: &mut RuleGradients<T>,
    dg: T,
    g: T,
    x_t: &Vector<T>,
    t: usize,
) -> Result<()> {
    let w_g = match &params.gate {
        GateParams::Scalar { w_g, .. } => w_g,
        _ => unreachable!("scalar gate backward on scalar-gated rule"),
    };
    let du = dg * g * (T::one() - g);
    match &mut grads.d_gate {
        GateGradients::Scalar { d_w_g, d_b_g } => {
            axpy(d_w_g.data_mut(), du, x_t.data());
            *d_b_g += du;
        }
        _ => unreachable!(),
    }
    axpy(grads.d_xs[t].data_mut(), du, w_g.data());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn factored_gate_backward<T: Real>(
    params: &RuleParams<T>,
    grads: &mut RuleGradients<T>,
    dc: &Vector<T>,
    df: &Vector<T>,
    c: &Vector<T>,
    f: &Vector<T>,
    x_t: &Vector<T>,
    t: usize,
) -> Result<()> {
    let (w_z, w_f) = match &params.gate {
        GateParams::Factored { w_z, w_f, .. } => (w_z, w_f),
        _ => unreachable!("factored gate backward on decay rule"),
    };
    let du_c = Vector::from_vec(
        dc.data()
            .iter()
            .zip(c.data())
            .map(|(&d, &s)| d * s * (T::one() - s))
            .collect(),
    );
    let du_f = Vector::from_vec(
        df.data()
            .iter()
            .zip(f.data())
            .map(|(&d, &s)| d * s * (T::one() - s))
            .collect(),
    );
    match &mut grads.d_gate {
        GateGradients::Factored { d_w_z, d_b_z, d_w_f, d_b_f } => {
            d_w_z.add_outer(du_c.data(), x_t.data(), T::one());
            d_b_z.add_in_place(&du_c);
            d_w_f.add_outer(du_f.data(), x_t.data(), T::one());
            d_b_f.add_in_place(&du_f);
        }
        _ => unreachable!(),
    }
    let back_c = w_z.matvec_transpose(&du_c)?;
    grads.d_xs[t].add_in_place(&back_c);
    let back_f = w_f.matvec_transpose(&du_f)?;
    grads.d_xs[t].add_in_place(&back_f);
    Ok(())
}

/// Result of a finite-difference comparison.
#[derive(Clone, Debug)]
pub struct FdReport {
    pub checked: usize,
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
}

/// Coordinates below this magnitude are measured on an absolute scale: the
/// central-difference oracle's own noise is about |loss| * machine-eps /
/// eps (~1e-11 at unit loss and eps = 1e-5), so a pure relative error on a
/// near-zero coordinate reports that noise rather than a gradient defect.
/// Flooring the denominator at 1e-4 turns the 1e-5 relative tolerance into
/// a 1e-9 absolute tolerance there — still far above oracle noise, far
/// below any real term that could go missing.
pub const FD_DENOM_FLOOR: f64 = 1e-4;

/// Compare an analytic gradient against central differences of `loss`.
///
/// Relative error per coordinate is |a - n| / max(|a|, |n|, floor) with
/// floor = `FD_DENOM_FLOOR`; the report carries the worst offender.
pub fn central_difference_check<F>(
    mut loss: F,
    theta: &[f64],
    analytic: &[f64],
    eps: f64,
) -> Result<FdReport>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    if theta.len() != analytic.len() {
        return Err(Error::DimMismatch(format!(
            "finite differences: {} parameters vs {} gradients",
            theta.len(),
            analytic.len()
        )));
    }
    let mut work = theta.to_vec();
    let mut report = FdReport {
        checked: theta.len(),
        max_rel_err: 0.0,
        worst_index: 0,
        worst_analytic: 0.0,
        worst_numeric: 0.0,
    };
    for i in 0..theta.len() {
        work[i] = theta[i] + eps;
        let plus = loss(&work)?;
        work[i] = theta[i] - eps;
        let minus = loss(&work)?;
        work[i] = theta[i];
        let numeric = (plus - minus) / (2.0 * eps);
        let a = analytic[i];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(FD_DENOM_FLOOR);
        if rel > report.max_rel_err {
            report.max_rel_err = rel;
            report.worst_index = i;
            report.worst_analytic = a;
            report.worst_numeric = numeric;
        }
    }
    Ok(report)
}

/// A self-contained differentiation problem: random parameters and inputs
/// for one rule configuration, with the linear loss L = sum_t w_t . y_t.
///
/// The whole problem (parameters, inputs, initial state) flattens into one
/// coordinate vector so every partial derivative can be checked.
pub struct RuleProblem {
    pub params: RuleParams<f64>,
    pub xs: Vec<Vector<f64>>,
    pub qs: Vec<Vector<f64>>,
    pub ks: Vec<Vector<f64>>,
    pub vs: Vec<Vector<f64>>,
    pub init: FastWeightState<f64>,
    pub loss_weights: Vec<Vector<f64>>,
}

impl RuleProblem {
    /// Draw a random, numerically well-posed problem for `config`.
    ///
    /// Central differences are only meaningful where the loss is smooth, so
    /// sampling keeps a margin much larger than any probe step away from the
    /// two non-smooth mechanisms: relu kinks (units are either robustly
    /// active or robustly dead) and normalization denominators near their
    /// floors (positive features wherever a denominator exists).
    pub fn random(config: RuleConfig, t_len: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (d, m) = (config.d, config.m);
        let needs_positive = config.sum_norm || config.attention_norm;
        let mat = |rows: usize, cols: usize, lo: f64, hi: f64, rng: &mut ChaCha8Rng| {
            Matrix::from_vec(
                rows,
                cols,
                (0..rows * cols).map(|_| rng.gen_range(lo..hi)).collect(),
            )
            .unwrap()
        };
        let feature = match config.feature_map {
            FeatureMapKind::Identity | FeatureMapKind::Elu1 => FeatureMapParams::none(),
            FeatureMapKind::Linear => {
                if needs_positive {
                    // Positive weights on positive inputs bound every sum
                    // and denominator away from zero.
                    FeatureMapParams::linear(mat(m, d, 0.1 / d as f64, 0.9 / d as f64, &mut rng))
                } else {
                    FeatureMapParams::linear(mat(m, d, -0.7, 0.7, &mut rng))
                }
            }
            FeatureMapKind::Relu => {
                let w = mat(m, d, -0.25, 0.25, &mut rng);
                // |W x| <= 0.25 * d * 0.5 = 0.5 for the inputs below, so a
                // bias of at least 0.6 keeps a unit active under any probe
                // while -2 keeps one robustly dead, exercising the mask.
                let mut b: Vec<f64> = (0..m).map(|_| rng.gen_range(0.6..1.2)).collect();
                if m >= 3 {
                    b[m - 1] = -2.0;
                }
                FeatureMapParams::relu(w, Vector::from_vec(b))
            }
        };
        let gate = match config.rule {
            RuleKind::Add => GateParams::None,
            RuleKind::Gated | RuleKind::Delta => GateParams::Scalar {
                w_g: Vector::from_vec((0..d).map(|_| rng.gen_range(-0.7..0.7)).collect()),
                b_g: rng.gen_range(-0.5..0.5),
            },
            RuleKind::Decay => GateParams::Factored {
                w_z: mat(d, d, -0.7, 0.7, &mut rng),
                b_z: Vector::from_vec((0..d).map(|_| rng.gen_range(-0.5..0.5)).collect()),
                w_f: mat(m, d, -0.7, 0.7, &mut rng),
                b_f: Vector::from_vec((0..m).map(|_| rng.gen_range(-0.5..0.5)).collect()),
            },
        };
        let params = RuleParams::validated(config, feature, gate)?;
        let vecs = |n: usize, lo: f64, hi: f64, rng: &mut ChaCha8Rng| {
            (0..t_len)
                .map(|_| Vector::from_vec((0..n).map(|_| rng.gen_range(lo..hi)).collect()))
                .collect::<Vec<_>>()
        };
        let xs = vecs(d, -0.8, 0.8, &mut rng);
        let (klo, khi) = match config.feature_map {
            FeatureMapKind::Relu => (-0.5, 0.5),
            FeatureMapKind::Elu1 => (-0.8, 0.8),
            FeatureMapKind::Identity | FeatureMapKind::Linear => {
                if needs_positive {
                    (0.1, 0.9)
                } else {
                    (-0.8, 0.8)
                }
            }
        };
        let qs = vecs(d, klo, khi, &mut rng);
        let ks = vecs(d, klo, khi, &mut rng);
        let vs = vecs(d, -0.8, 0.8, &mut rng);
        let loss_weights = vecs(d, -1.0, 1.0, &mut rng);
        // A non-trivial initial state serves two purposes: its own gradient
        // gets checked, and it breaks the first-token degeneracy y_1 = v_1
        // under attention normalization, whose exact cancellation would
        // otherwise leave dL/dq_1 as a mathematical zero that central
        // differences can only see as rounding noise.
        let mut init = init_state(&config);
        for s in init.s.data_mut() {
            *s = rng.gen_range(-0.5..0.5);
        }
        if let Some(z) = init.z.as_mut() {
            for zi in z.data_mut() {
                *zi = rng.gen_range(0.5..1.5);
            }
        }
        Ok(RuleProblem {
            params,
            xs,
            qs,
            ks,
            vs,
            init,
            loss_weights,
        })
    }

    fn segments(&self) -> Vec<(&'static str, usize)> {
        let mut segs = Vec::new();
        if let Some(w) = &self.params.feature.w_phi {
            segs.push(("W_phi", w.data().len()));
        }
        if let Some(b) = &self.params.feature.b_phi {
            segs.push(("b_phi", b.len()));
        }
        match &self.params.gate {
            GateParams::None => {}
            GateParams::Scalar { w_g, .. } => {
                segs.push(("w_g", w_g.len()));
                segs.push(("b_g", 1));
            }
            GateParams::Factored { w_z, b_z, w_f, b_f } => {
                segs.push(("W_z", w_z.data().len()));
                segs.push(("b_z", b_z.len()));
                segs.push(("W_f", w_f.data().len()));
                segs.push(("b_f", b_f.len()));
            }
        }
        let t_len = self.xs.len();
        let d = self.params.config.d;
        segs.push(("x", t_len * d));
        segs.push(("q", t_len * d));
        segs.push(("k", t_len * d));
        segs.push(("v", t_len * d));
        segs.push(("S_0", self.init.s.data().len()));
        if let Some(z) = &self.init.z {
            segs.push(("z_0", z.len()));
        }
        segs
    }

    /// Human-readable location of a flat coordinate, e.g. "W_z[5]".
    pub fn coordinate_label(&self, index: usize) -> String {
        let mut offset = 0;
        for (name, len) in self.segments() {
            if index < offset + len {
                return format!("{name}[{}]", index - offset);
            }
            offset += len;
        }
        format!("<out of range {index}>")
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut theta = Vec::new();
        if let Some(w) = &self.params.feature.w_phi {
            theta.extend_from_slice(w.data());
        }
        if let Some(b) = &self.params.feature.b_phi {
            theta.extend_from_slice(b.data());
        }
        match &self.params.gate {
            GateParams::None => {}
            GateParams::Scalar { w_g, b_g } => {
                theta.extend_from_slice(w_g.data());
                theta.push(*b_g);
            }
            GateParams::Factored { w_z, b_z, w_f, b_f } => {
                theta.extend_from_slice(w_z.data());
                theta.extend_from_slice(b_z.data());
                theta.extend_from_slice(w_f.data());
                theta.extend_from_slice(b_f.data());
            }
        }
        for group in [&self.xs, &self.qs, &self.ks, &self.vs] {
            for v in group {
                theta.extend_from_slice(v.data());
            }
        }
        theta.extend_from_slice(self.init.s.data());
        if let Some(z) = &self.init.z {
            theta.extend_from_slice(z.data());
        }
        theta
    }

    /// Rebuild a problem from a flat coordinate vector (inverse of `flatten`).
    pub fn unflatten(&self, theta: &[f64]) -> Result<RuleProblem> {
        let mut pos = 0;
        let mut take = |n: usize| -> Result<Vec<f64>> {
            if pos + n > theta.len() {
                return Err(Error::DimMismatch("flat vector too short".into()));
            }
            let out = theta[pos..pos + n].to_vec();
            pos += n;
            Ok(out)
        };
        let feature = FeatureMapParams {
            w_phi: match &self.params.feature.w_phi {
                Some(w) => Some(Matrix::from_vec(w.rows(), w.cols(), take(w.data().len())?)?),
                None => None,
            },
            b_phi: match &self.params.feature.b_phi {
                Some(b) => Some(Vector::from_vec(take(b.len())?)),
                None => None,
            },
        };
        let gate = match &self.params.gate {
            GateParams::None => GateParams::None,
            GateParams::Scalar { w_g, .. } => GateParams::Scalar {
                w_g: Vector::from_vec(take(w_g.len())?),
                b_g: take(1)?[0],
            },
            GateParams::Factored { w_z, b_z, w_f, b_f } => GateParams::Factored {
                w_z: Matrix::from_vec(w_z.rows(), w_z.cols(), take(w_z.data().len())?)?,
                b_z: Vector::from_vec(take(b_z.len())?),
                w_f: Matrix::from_vec(w_f.rows(), w_f.cols(), take(w_f.data().len())?)?,
                b_f: Vector::from_vec(take(b_f.len())?),
            },
        };
        let t_len = self.xs.len();
        let d = self.params.config.d;
        let mut group = |_: usize| -> Result<Vec<Vector<f64>>> {
            (0..t_len)
                .map(|_| Ok(Vector::from_vec(take(d)?)))
                .collect()
        };
        let xs = group(0)?;
        let qs = group(0)?;
        let ks = group(0)?;
        let vs = group(0)?;
        let init = FastWeightState {
            s: Matrix::from_vec(
                self.init.s.rows(),
                self.init.s.cols(),
                take(self.init.s.data().len())?,
            )?,
            z: match &self.init.z {
                Some(z) => Some(Vector::from_vec(take(z.len())?)),
                None => None,
            },
        };
        if pos != theta.len() {
            return Err(Error::DimMismatch(format!(
                "flat vector has {} extra coordinates",
                theta.len() - pos
            )));
        }
        Ok(RuleProblem {
            params: RuleParams::validated(self.params.config, feature, gate)?,
            xs,
            qs,
            ks,
            vs,
            init,
            loss_weights: self.loss_weights.clone(),
        })
    }

    /// L = sum_t w_t . y_t for the problem encoded by `theta`.
    pub fn loss(&self, theta: &[f64]) -> Result<f64> {
        let p = self.unflatten(theta)?;
        let cache = scan_with_cache(&p.params, &p.init, &p.xs, &p.qs, &p.ks, &p.vs)?;
        let mut total = 0.0;
        for (y, w) in cache.ys.iter().zip(&self.loss_weights) {
            total += w.dot(y)?;
        }
        Ok(total)
    }

    /// Analytic gradient of the loss, flattened in `flatten` order.
    pub fn analytic_gradient(&self) -> Result<Vec<f64>> {
        let cache = scan_with_cache(&self.params, &self.init, &self.xs, &self.qs, &self.ks, &self.vs)?;
        let grads = backward_scan(&self.params, &cache, &self.loss_weights)?;
        let mut flat = Vec::new();
        if let Some(w) = &grads.d_w_phi {
            flat.extend_from_slice(w.data());
        }
        if let Some(b) = &grads.d_b_phi {
            flat.extend_from_slice(b.data());
        }
        match &grads.d_gate {
            GateGradients::None => {}
            GateGradients::Scalar { d_w_g, d_b_g } => {
                flat.extend_from_slice(d_w_g.data());
                flat.push(*d_b_g);
            }
            GateGradients::Factored { d_w_z, d_b_z, d_w_f, d_b_f } => {
                flat.extend_from_slice(d_w_z.data());
                flat.extend_from_slice(d_b_z.data());
                flat.extend_from_slice(d_w_f.data());
                flat.extend_from_slice(d_b_f.data());
            }
        }
        for group in [&grads.d_xs, &grads.d_qs, &grads.d_ks, &grads.d_vs] {
            for v in group {
                flat.extend_from_slice(v.data());
            }
        }
        flat.extend_from_slice(grads.d_init_s.data());
        if let Some(z) = &grads.d_init_z {
            flat.extend_from_slice(z.data());
        }
        Ok(flat)
    }

    /// Run the central-difference comparison over every coordinate.
    pub fn check(&self, eps: f64) -> Result<FdReport> {
        let theta = self.flatten();
        let analytic = self.analytic_gradient()?;
        central_difference_check(|t| self.loss(t), &theta, &analytic, eps)
    }
}

/// Convenience wrapper: random problem for `config`, checked at `eps`.
pub fn gradcheck_rule(config: RuleConfig, t_len: usize, seed: u64, eps: f64) -> Result<FdReport> {
    RuleProblem::random(config, t_len, seed)?.check(eps)
}
