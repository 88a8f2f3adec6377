//! Declarative kernel specifications and their evaluation.
//!
//! A [`KernelSpec`] describes a positive semidefinite kernel over
//! label/conditioning-variable vectors. Composite kernels are built with
//! `scaled` and `product`; the product variant carries slice ranges so each
//! factor sees only its own coordinates of the concatenated `(y, z)` input.
//! Every variant except `delta` has a closed-form gradient in its inputs,
//! which the MMD estimators use for their hand-written adjoints.
//!
//! The `tanh_threshold` kernel is deliberately not universal: it is the
//! differentiable relaxation of the sign-agreement kernel for threshold
//! decisions, sensitive only to which side of the cutoff a label falls on.
//! It is still PSD, being the rank-one feature map `y ↦ tanh(y − c)`.

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum KernelError {
    #[error("kernel input dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: String, got: usize },
    #[error("min kernel input {value} outside domain [0, {upper}]")]
    MinOutOfDomain { value: f64, upper: f64 },
    #[error("invalid kernel spec: {0}")]
    InvalidSpec(String),
}

/// A kernel over real vectors, serializable as part of an experiment config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "variant", rename_all = "snake_case")]
pub enum KernelSpec {
    /// `exp(−‖u−v‖² / (2·bandwidth²))`; bandwidth is a length scale.
    Rbf { bandwidth: f64 },
    /// Dot product `⟨u, v⟩`.
    Linear,
    /// Scalar moment kernel `⟨(y, y²), (y′, y′²)⟩`, matching the first two
    /// moments of a distribution (point-estimate decisions under squared loss).
    Moment,
    /// Scalar `min{y, y′}` on `[0, upper]`, the cdf feature map for
    /// threshold decisions with unknown cutoffs.
    Min { upper: f64 },
    /// Scalar `tanh(y − c)·tanh(y′ − c)`, the differentiable relaxation of
    /// sign-agreement around the decision threshold `c`.
    TanhThreshold { c: f64 },
    /// Exact-match indicator for discrete codes (groups, actions, classes).
    Delta,
    /// `alpha · inner`.
    Scaled { alpha: f64, inner: Box<KernelSpec> },
    /// `left(u[left_slice], v[left_slice]) · right(u[right_slice], v[right_slice])`.
    /// Slices are `[start, end)` into the concatenated input vector.
    Product {
        left: Box<KernelSpec>,
        right: Box<KernelSpec>,
        left_slice: [usize; 2],
        right_slice: [usize; 2],
    },
}

impl KernelSpec {
    /// Shorthand for the common `k_y × k_z` layout: `k_y` on coordinate 0,
    /// `k_z` on coordinates `1..=dz`.
    pub fn product_yz(k_y: KernelSpec, k_z: KernelSpec, dz: usize) -> KernelSpec {
        KernelSpec::Product {
            left: Box::new(k_y),
            right: Box::new(k_z),
            left_slice: [0, 1],
            right_slice: [1, 1 + dz],
        }
    }

    /// Structural validation against an input dimension.
    pub fn validate(&self, dim: usize) -> Result<(), KernelError> {
        match self {
            KernelSpec::Rbf { bandwidth } => {
                if *bandwidth <= 0.0 || !bandwidth.is_finite() {
                    return Err(KernelError::InvalidSpec(format!(
                        "rbf bandwidth must be positive, got {bandwidth}"
                    )));
                }
            }
            KernelSpec::Linear | KernelSpec::Delta => {}
            KernelSpec::Moment | KernelSpec::TanhThreshold { .. } => {
                if dim != 1 {
                    return Err(KernelError::DimensionMismatch {
                        expected: "1 (scalar kernel)".into(),
                        got: dim,
                    });
                }
            }
            KernelSpec::Min { upper } => {
                if *upper <= 0.0 {
                    return Err(KernelError::InvalidSpec(format!(
                        "min kernel upper bound must be positive, got {upper}"
                    )));
                }
                if dim != 1 {
                    return Err(KernelError::DimensionMismatch {
                        expected: "1 (scalar kernel)".into(),
                        got: dim,
                    });
                }
            }
            KernelSpec::Scaled { alpha, inner } => {
                if *alpha <= 0.0 {
                    return Err(KernelError::InvalidSpec(format!(
                        "scale must be positive, got {alpha}"
                    )));
                }
                inner.validate(dim)?;
            }
            KernelSpec::Product {
                left,
                right,
                left_slice,
                right_slice,
            } => {
                for s in [left_slice, right_slice] {
                    if s[0] >= s[1] || s[1] > dim {
                        return Err(KernelError::InvalidSpec(format!(
                            "slice [{}, {}) invalid for input dimension {dim}",
                            s[0], s[1]
                        )));
                    }
                }
                left.validate(left_slice[1] - left_slice[0])?;
                right.validate(right_slice[1] - right_slice[0])?;
            }
        }
        Ok(())
    }

    /// Kernel value `k(u, v)` with dimension and domain checks.
    pub fn eval(&self, u: &[f64], v: &[f64]) -> Result<f64, KernelError> {
        if u.len() != v.len() {
            return Err(KernelError::DimensionMismatch {
                expected: format!("{}", u.len()),
                got: v.len(),
            });
        }
        self.validate(u.len())?;
        self.check_domain(u)?;
        self.check_domain(v)?;
        Ok(self.eval_unchecked(u, v))
    }

    /// Domain checks (currently only the min kernel's `[0, upper]` box).
    pub fn check_domain(&self, u: &[f64]) -> Result<(), KernelError> {
        match self {
            KernelSpec::Min { upper } => {
                let y = u[0];
                if !(0.0..=*upper).contains(&y) {
                    return Err(KernelError::MinOutOfDomain {
                        value: y,
                        upper: *upper,
                    });
                }
            }
            KernelSpec::Scaled { inner, .. } => inner.check_domain(u)?,
            KernelSpec::Product {
                left,
                right,
                left_slice,
                right_slice,
            } => {
                left.check_domain(&u[left_slice[0]..left_slice[1]])?;
                right.check_domain(&u[right_slice[0]..right_slice[1]])?;
            }
            _ => {}
        }
        Ok(())
    }

    /// Kernel value without validation; hot path for the estimators, which
    /// validate dimensions once per batch.
    pub fn eval_unchecked(&self, u: &[f64], v: &[f64]) -> f64 {
        match self {
            KernelSpec::Rbf { bandwidth } => {
                let d2: f64 = u.iter().zip(v).map(|(a, b)| (a - b) * (a - b)).sum();
                (-d2 / (2.0 * bandwidth * bandwidth)).exp()
            }
            KernelSpec::Linear => u.iter().zip(v).map(|(a, b)| a * b).sum(),
            KernelSpec::Moment => {
                let (y, yp) = (u[0], v[0]);
                y * yp + y * y * yp * yp
            }
            KernelSpec::Min { .. } => u[0].min(v[0]),
            KernelSpec::TanhThreshold { c } => (u[0] - c).tanh() * (v[0] - c).tanh(),
            KernelSpec::Delta => {
                if u == v {
                    1.0
                } else {
                    0.0
                }
            }
            KernelSpec::Scaled { alpha, inner } => alpha * inner.eval_unchecked(u, v),
            KernelSpec::Product {
                left,
                right,
                left_slice,
                right_slice,
            } => {
                left.eval_unchecked(
                    &u[left_slice[0]..left_slice[1]],
                    &v[left_slice[0]..left_slice[1]],
                ) * right.eval_unchecked(
                    &u[right_slice[0]..right_slice[1]],
                    &v[right_slice[0]..right_slice[1]],
                )
            }
        }
    }

    /// Accumulate `scale · ∂k(u,v)/∂u` into `out` (same length as `u`).
    ///
    /// The delta kernel contributes nothing: its inputs are discrete codes
    /// that never depend on model parameters. The min kernel uses the
    /// symmetric subgradient 1/2 at ties.
    pub fn grad_u_scaled(&self, u: &[f64], v: &[f64], scale: f64, out: &mut [f64]) {
        match self {
            KernelSpec::Rbf { bandwidth } => {
                let k = self.eval_unchecked(u, v);
                let inv_bw2 = 1.0 / (bandwidth * bandwidth);
                for i in 0..u.len() {
                    out[i] += scale * k * (v[i] - u[i]) * inv_bw2;
                }
            }
            KernelSpec::Linear => {
                for i in 0..u.len() {
                    out[i] += scale * v[i];
                }
            }
            KernelSpec::Moment => {
                let (y, yp) = (u[0], v[0]);
                out[0] += scale * (yp + 2.0 * y * yp * yp);
            }
            KernelSpec::Min { .. } => {
                let d = match u[0].partial_cmp(&v[0]) {
                    Some(std::cmp::Ordering::Less) => 1.0,
                    Some(std::cmp::Ordering::Equal) => 0.5,
                    _ => 0.0,
                };
                out[0] += scale * d;
            }
            KernelSpec::TanhThreshold { c } => {
                let t = (u[0] - c).tanh();
                out[0] += scale * (1.0 - t * t) * (v[0] - c).tanh();
            }
            KernelSpec::Delta => {}
            KernelSpec::Scaled { alpha, inner } => {
                inner.grad_u_scaled(u, v, scale * alpha, out);
            }
            KernelSpec::Product {
                left,
                right,
                left_slice,
                right_slice,
            } => {
                let ul = &u[left_slice[0]..left_slice[1]];
                let vl = &v[left_slice[0]..left_slice[1]];
                let ur = &u[right_slice[0]..right_slice[1]];
                let vr = &v[right_slice[0]..right_slice[1]];
                let kl = left.eval_unchecked(ul, vl);
                let kr = right.eval_unchecked(ur, vr);
                left.grad_u_scaled(ul, vl, scale * kr, &mut out[left_slice[0]..left_slice[1]]);
                right.grad_u_scaled(ur, vr, scale * kl, &mut out[right_slice[0]..right_slice[1]]);
            }
        }
    }
}

/// Gram block `G[i][j] = k(U_i, V_j)` over row sets `U` and `V`.
pub fn gram(
    spec: &KernelSpec,
    u: ArrayView2<f64>,
    v: ArrayView2<f64>,
) -> Result<Array2<f64>, KernelError> {
    if u.ncols() != v.ncols() {
        return Err(KernelError::DimensionMismatch {
            expected: format!("{}", u.ncols()),
            got: v.ncols(),
        });
    }
    spec.validate(u.ncols())?;
    for row in u.rows().into_iter().chain(v.rows()) {
        spec.check_domain(row.as_standard_layout().as_slice().unwrap())?;
    }
    let mut out = Array2::zeros((u.nrows(), v.nrows()));
    for (i, ui) in u.rows().into_iter().enumerate() {
        let ui = ui.as_standard_layout();
        let ui = ui.as_slice().unwrap();
        for (j, vj) in v.rows().into_iter().enumerate() {
            let vj = vj.as_standard_layout();
            out[(i, j)] = spec.eval_unchecked(ui, vj.as_slice().unwrap());
        }
    }
    Ok(out)
}

/// Smallest eigenvalue of a symmetric matrix.
pub fn min_symmetric_eigenvalue(m: &Array2<f64>) -> f64 {
    let n = m.nrows();
    let dm = nalgebra::DMatrix::from_fn(n, n, |i, j| m[(i, j)]);
    let eig = dm.symmetric_eigenvalues();
    eig.iter().cloned().fold(f64::INFINITY, f64::min)
}

/// Numerical PSD check: true iff the Gram matrix on `samples` has smallest
/// eigenvalue ≥ −tol·trace.
pub fn psd_check(
    spec: &KernelSpec,
    samples: ArrayView2<f64>,
    tol: f64,
) -> Result<bool, KernelError> {
    if samples.nrows() < 2 {
        return Err(KernelError::InvalidSpec(
            "psd_check needs at least 2 samples".into(),
        ));
    }
    let g = gram(spec, samples, samples)?;
    let trace: f64 = (0..g.nrows()).map(|i| g[(i, i)]).sum();
    Ok(min_symmetric_eigenvalue(&g) >= -tol * trace.abs().max(1.0))
}
