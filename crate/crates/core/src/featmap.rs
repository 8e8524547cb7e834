//! Kernel feature maps applied to keys and queries before the recurrence,
//! plus sum normalization.
//!
//! Supported maps:
//!
//! ```text
//! identity:  phi(x) = x                      (m == d)
//! linear:    phi(x) = W x                    (any m; "no feature map" when
//!                                             the projection is folded away)
//! relu:      phi(x) = max(0, W x + b)        (any m; entries >= 0)
//! elu1:      phi(x) = ELU(x) + 1             (m == d; entries > 0)
//! ```
//!
//! Sum normalization rescales a feature vector so its components sum to 1.
//! A near-zero sum is surfaced as an error: dividing by it is the
//! divergence mechanism that non-positive maps trigger under normalization.

use crate::error::{Error, Result};
use crate::real::{elu1, relu, Real};
use crate::tensor::{Matrix, Vector};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FeatureMapKind {
    Identity,
    Linear,
    Relu,
    Elu1,
}

impl FeatureMapKind {
    /// identity and elu1 operate coordinatewise, so they force m == d.
    pub fn requires_square(self) -> bool {
        matches!(self, FeatureMapKind::Identity | FeatureMapKind::Elu1)
    }

    pub fn name(self) -> &'static str {
        match self {
            FeatureMapKind::Identity => "identity",
            FeatureMapKind::Linear => "linear",
            FeatureMapKind::Relu => "relu",
            FeatureMapKind::Elu1 => "elu1",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "identity" => Ok(FeatureMapKind::Identity),
            "linear" => Ok(FeatureMapKind::Linear),
            "relu" => Ok(FeatureMapKind::Relu),
            "elu1" => Ok(FeatureMapKind::Elu1),
            other => Err(Error::InvalidConfig(format!("unknown feature map {other:?}"))),
        }
    }
}

/// Learned parameters for the linear and relu maps; empty otherwise.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMapParams<T> {
    pub w_phi: Option<Matrix<T>>,
    pub b_phi: Option<Vector<T>>,
}

impl<T: Real> FeatureMapParams<T> {
    pub fn none() -> Self {
        FeatureMapParams {
            w_phi: None,
            b_phi: None,
        }
    }

    pub fn linear(w_phi: Matrix<T>) -> Self {
        FeatureMapParams {
            w_phi: Some(w_phi),
            b_phi: None,
        }
    }

    pub fn relu(w_phi: Matrix<T>, b_phi: Vector<T>) -> Self {
        FeatureMapParams {
            w_phi: Some(w_phi),
            b_phi: Some(b_phi),
        }
    }

    /// Check presence and shapes for `kind` lifting d -> m.
    pub fn validate(&self, kind: FeatureMapKind, d: usize, m: usize) -> Result<()> {
        if kind.requires_square() && d != m {
            return Err(Error::InvalidConfig(format!(
                "{} feature map requires m == d (got d={d}, m={m})",
                kind.name()
            )));
        }
        match kind {
            FeatureMapKind::Identity | FeatureMapKind::Elu1 => {
                if self.w_phi.is_some() || self.b_phi.is_some() {
                    return Err(Error::InvalidConfig(format!(
                        "{} feature map takes no parameters",
                        kind.name()
                    )));
                }
            }
            FeatureMapKind::Linear => {
                let w = self.w_phi.as_ref().ok_or_else(|| {
                    Error::InvalidConfig("linear feature map requires W_phi".into())
                })?;
                if w.rows() != m || w.cols() != d {
                    return Err(Error::DimMismatch(format!(
                        "W_phi is {}x{}, expected {m}x{d}",
                        w.rows(),
                        w.cols()
                    )));
                }
                if self.b_phi.is_some() {
                    return Err(Error::InvalidConfig(
                        "linear feature map takes no bias".into(),
                    ));
                }
            }
            FeatureMapKind::Relu => {
                let w = self.w_phi.as_ref().ok_or_else(|| {
                    Error::InvalidConfig("relu feature map requires W_phi".into())
                })?;
                let b = self.b_phi.as_ref().ok_or_else(|| {
                    Error::InvalidConfig("relu feature map requires b_phi".into())
                })?;
                if w.rows() != m || w.cols() != d || b.len() != m {
                    return Err(Error::DimMismatch(format!(
                        "relu map: W_phi {}x{}, b_phi {}, expected {m}x{d} and {m}",
                        w.rows(),
                        w.cols(),
                        b.len()
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        self.w_phi.as_ref().map_or(0, |w| w.data().len())
            + self.b_phi.as_ref().map_or(0, |b| b.len())
    }
}

/// Apply the feature map, lifting `x` from d to m dimensions.
pub fn apply_feature_map<T: Real>(
    kind: FeatureMapKind,
    params: &FeatureMapParams<T>,
    x: &Vector<T>,
) -> Result<Vector<T>> {
    match kind {
        FeatureMapKind::Identity => Ok(x.clone()),
        FeatureMapKind::Elu1 => Ok(Vector::from_vec(
            x.data().iter().map(|&v| elu1(v)).collect(),
        )),
        FeatureMapKind::Linear => {
            let w = params
                .w_phi
                .as_ref()
                .ok_or_else(|| Error::InvalidConfig("linear feature map requires W_phi".into()))?;
            w.matvec(x)
        }
        FeatureMapKind::Relu => {
            let w = params
                .w_phi
                .as_ref()
                .ok_or_else(|| Error::InvalidConfig("relu feature map requires W_phi".into()))?;
            let b = params
                .b_phi
                .as_ref()
                .ok_or_else(|| Error::InvalidConfig("relu feature map requires b_phi".into()))?;
            let mut pre = w.matvec(x)?;
            if pre.len() != b.len() {
                return Err(Error::DimMismatch("relu map bias length".into()));
            }
            for (p, &bv) in pre.data_mut().iter_mut().zip(b.data()) {
                *p = relu(*p + bv);
            }
            Ok(pre)
        }
    }
}

/// Rescale so components sum to 1, using the precision's default floor.
pub fn sum_normalize<T: Real>(u: &Vector<T>) -> Result<Vector<T>> {
    sum_normalize_with(u, T::EPS_SUM)
}

/// Rescale so components sum to 1; errors when |sum u| <= eps_sum.
pub fn sum_normalize_with<T: Real>(u: &Vector<T>, eps_sum: T) -> Result<Vector<T>> {
    let total = u.sum();
    if total.abs() <= eps_sum {
        return Err(Error::NearZeroSum {
            sum: total.to_f64_lossy(),
            floor: eps_sum.to_f64_lossy(),
        });
    }
    let mut out = u.clone();
    out.scale_in_place(T::one() / total);
    Ok(out)
}
