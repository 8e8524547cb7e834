//! Exact quadratic-time attention references.
//!
//! These are the ground truth the recurrent rules are measured against:
//!
//! ```text
//! softmax:  y_t = sum_{s<=t} softmax_s(q_t . k_s / sqrt(d)) v_s
//! kernel:   y_t = sum_{s<=t} v_s (k~_s . q~_t)                    unnormalized
//!           y_t = sum_{s<=t} v_s (k~_s . q~_t) / sum_{s<=t} (k~_s . q~_t)
//! local:    softmax attention restricted to the last w positions
//! ```
//!
//! `kernel_attention_direct` evaluates kernel attention by the double loop
//! over (t, s) pairs, touching every past token for every output. The add
//! rule computes the same quantity with a single pass and O(d m) state; the
//! two must agree to near machine precision, which is the core correctness
//! check for the recurrent formulation.

use crate::error::{Error, Result};
use crate::featmap::{apply_feature_map, sum_normalize, FeatureMapKind, FeatureMapParams};
use crate::real::Real;
use crate::tensor::{axpy, softmax_into, Vector};

fn check_lengths<T>(qs: &[Vector<T>], ks: &[Vector<T>], vs: &[Vector<T>]) -> Result<()> {
    if qs.len() != ks.len() || qs.len() != vs.len() {
        return Err(Error::DimMismatch(format!(
            "attention inputs disagree on length: qs={} ks={} vs={}",
            qs.len(),
            ks.len(),
            vs.len()
        )));
    }
    Ok(())
}

/// One row of causal softmax attention: attend `q` over `ks`/`vs`.
///
/// This is also the incremental-decoding primitive: with a KV cache holding
/// everything seen so far, one new token costs one call.
pub fn softmax_attention_step<T: Real>(
    q: &Vector<T>,
    ks: &[Vector<T>],
    vs: &[Vector<T>],
) -> Result<Vector<T>> {
    Ok(softmax_attention_step_probs(q, ks, vs)?.0)
}

/// Like [`softmax_attention_step`] but also returns the attention weights,
/// which a backward pass needs. The readout arithmetic is shared, so both
/// entry points produce bit-identical outputs.
pub fn softmax_attention_step_probs<T: Real>(
    q: &Vector<T>,
    ks: &[Vector<T>],
    vs: &[Vector<T>],
) -> Result<(Vector<T>, Vec<T>)> {
    if ks.is_empty() || ks.len() != vs.len() {
        return Err(Error::DimMismatch(format!(
            "attention step over ks={} vs={}",
            ks.len(),
            vs.len()
        )));
    }
    let d = q.len();
    let scale = T::one() / T::from_f64(d as f64).sqrt();
    let mut logits = Vec::with_capacity(ks.len());
    for k in ks {
        logits.push(q.dot(k)? * scale);
    }
    let mut probs = vec![T::zero(); logits.len()];
    softmax_into(&logits, &mut probs);
    let mut y = Vector::zeros(vs[0].len());
    for (s, v) in vs.iter().enumerate() {
        axpy(y.data_mut(), probs[s], v.data());
    }
    Ok((y, probs))
}

/// Causal softmax attention over a whole sequence.
pub fn softmax_attention<T: Real>(
    qs: &[Vector<T>],
    ks: &[Vector<T>],
    vs: &[Vector<T>],
) -> Result<Vec<Vector<T>>> {
    check_lengths(qs, ks, vs)?;
    let mut ys = Vec::with_capacity(qs.len());
    for t in 0..qs.len() {
        ys.push(softmax_attention_step(&qs[t], &ks[..=t], &vs[..=t])?);
    }
    Ok(ys)
}

/// Causal softmax attention restricted to a sliding window: position t
/// attends to positions max(0, t - w + 1) ..= t.
pub fn local_attention<T: Real>(
    qs: &[Vector<T>],
    ks: &[Vector<T>],
    vs: &[Vector<T>],
    window: usize,
) -> Result<Vec<Vector<T>>> {
    check_lengths(qs, ks, vs)?;
    if window == 0 {
        return Err(Error::InvalidConfig("local attention window must be positive".into()));
    }
    let mut ys = Vec::with_capacity(qs.len());
    for t in 0..qs.len() {
        let lo = (t + 1).saturating_sub(window);
        ys.push(softmax_attention_step(&qs[t], &ks[lo..=t], &vs[lo..=t])?);
    }
    Ok(ys)
}

/// Kernel attention by direct summation over all causal (t, s) pairs.
///
/// Applies `feature_map` (and sum normalization when `sum_norm`) to keys and
/// queries, then evaluates the quadratic-time formula. With
/// `attention_norm`, each output divides by the accumulated kernel mass and
/// a vanishing denominator is reported as an error at the offending step.
pub fn kernel_attention_direct<T: Real>(
    feature_map: FeatureMapKind,
    feature: &FeatureMapParams<T>,
    sum_norm: bool,
    attention_norm: bool,
    qs: &[Vector<T>],
    ks: &[Vector<T>],
    vs: &[Vector<T>],
) -> Result<Vec<Vector<T>>> {
    check_lengths(qs, ks, vs)?;
    let featurize = |x: &Vector<T>| -> Result<Vector<T>> {
        let phi = apply_feature_map(feature_map, feature, x)?;
        if sum_norm {
            sum_normalize(&phi)
        } else {
            Ok(phi)
        }
    };
    let k_tilde: Vec<Vector<T>> = ks.iter().map(&featurize).collect::<Result<_>>()?;
    let q_tilde: Vec<Vector<T>> = qs.iter().map(&featurize).collect::<Result<_>>()?;

    let mut ys = Vec::with_capacity(qs.len());
    for t in 0..qs.len() {
        let dim = vs[t].len();
        let mut numer = Vector::zeros(dim);
        let mut denom = T::zero();
        for s in 0..=t {
            let w = k_tilde[s].dot(&q_tilde[t])?;
            axpy(numer.data_mut(), w, vs[s].data());
            denom += w;
        }
        if attention_norm {
            if denom.abs() <= T::EPS_NORM {
                return Err(Error::NormalizerUnderflow {
                    step: t,
                    denom: denom.to_f64_lossy(),
                    floor: T::EPS_NORM.to_f64_lossy(),
                });
            }
            numer.scale_in_place(T::one() / denom);
        }
        ys.push(numer);
    }
    Ok(ys)
}
