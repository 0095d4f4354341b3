//! Importance processes from Gaussian one-step-ahead approximations.
//!
//! Starting from a particle (zero covariance), the extended Kalman moment
//! equations are integrated to the next measurement, conditioned on it, and
//! the noise-driven block is steered towards the conditioned mean by a
//! constant-drift bridge whose endpoint variance matches the conditioned
//! covariance.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::girsanov::ImportanceSpec;
use crate::particle_filter::{Measurement, Particle, ProposalBuilder};
use crate::rao_blackwell::{covariance_euler_step, kalman_update, GaussianBlock};
use crate::sde_core::{SdeModel, TimeGrid};
use crate::{Error, Real, Result};

/// Gaussian approximation `N(m, P)` of the full state.
pub type EkfMoments<T> = GaussianBlock<T>;

/// Relative floor applied to the bridge endpoint variance.
pub const VARIANCE_FLOOR: f64 = 1e-8;

/// Euler integration of `dm/dt = f(m)`, `dP/dt = F(m) P + P F(m)ᵀ + Q(t)`,
/// with `project` applied to the mean after every step.
pub fn ekf_predict<T: Real>(
    moments: &EkfMoments<T>,
    f: &dyn Fn(&DVector<T>, T) -> DVector<T>,
    jacobian: &dyn Fn(&DVector<T>, T) -> DMatrix<T>,
    q: &dyn Fn(T) -> DMatrix<T>,
    project: &dyn Fn(&mut DVector<T>),
    grid: &TimeGrid<T>,
) -> Result<EkfMoments<T>> {
    let dt = grid.dt();
    let mut m = moments.m.clone();
    let mut p = moments.p.clone();
    for j in 0..grid.n_steps() {
        let t = grid.time(j);
        let jac = jacobian(&m, t);
        if jac.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                what: "Jacobian",
                t: t.to_f64_lossy(),
                step: j,
                state: m.iter().map(|v| v.to_f64_lossy()).collect(),
            });
        }
        let drift = f(&m, t);
        p = covariance_euler_step(&p, &jac, &q(t), dt);
        m += drift * dt;
        project(&mut m);
        if m.iter().chain(p.iter()).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                what: "EKF moments",
                t: t.to_f64_lossy(),
                step: j,
                state: m.iter().map(|v| v.to_f64_lossy()).collect(),
            });
        }
    }
    Ok(GaussianBlock { m, p })
}

/// Gaussian conditioning on `y = H x + r`, `r ~ N(0, R)`.
pub fn ekf_condition<T: Real>(moments: &EkfMoments<T>, h: &DMatrix<T>, r: &DMatrix<T>, y: &DVector<T>) -> Result<EkfMoments<T>> {
    Ok(kalman_update(moments, h, r, y)?.block)
}

/// Constant-drift bridge for the noise-driven block over an interval of
/// length `dt`:
///
/// ```text
/// g = (m₂ − x₂,prev) / Δt,   B Q Bᵀ Δt = P₂₂
/// ```
///
/// `x_prev` and `posterior` are full states; `block` selects the noise-driven
/// components. `P₂₂` is floored at `1e−8 · (L Q Lᵀ) Δt` in the eigenbasis.
pub fn build_bridge<T: Real>(
    x_prev: &DVector<T>,
    posterior: &EkfMoments<T>,
    dt: T,
    q: &DMatrix<T>,
    l: &DMatrix<T>,
    block: std::ops::Range<usize>,
) -> Result<ImportanceSpec<T>> {
    if !(dt > T::zero()) {
        return Err(Error::InvalidParameter("bridge interval must be positive".into()));
    }
    let ns = block.len();
    if block.end > x_prev.len() || posterior.dim() != x_prev.len() || q.shape() != (ns, ns) || l.shape() != (ns, ns) {
        return Err(Error::Dimension(format!(
            "bridge over components {block:?} of a {}-dimensional state with Q {:?} and L {:?}",
            x_prev.len(),
            q.shape(),
            l.shape()
        )));
    }
    let m2 = posterior.m.rows(block.start, ns).into_owned();
    let x2 = x_prev.rows(block.start, ns).into_owned();
    let g = (m2 - x2) / dt;

    let p22 = posterior.p.view((block.start, block.start), (ns, ns)).into_owned();
    let prior_var = l * q * l.transpose();
    let floor = T::lit(VARIANCE_FLOOR) * prior_var.clone().symmetric_eigenvalues().min() * dt;
    let eig = ((&p22 + p22.transpose()) * T::lit(0.5)).symmetric_eigen();
    let floored = eig.eigenvalues.map(|v| v.max(floor));
    let v = &eig.eigenvectors;
    let p22 = v * DMatrix::from_diagonal(&floored) * v.transpose();
    let p22 = (&p22 + p22.transpose()) * T::lit(0.5);

    let target = p22 / dt;
    let c = target.cholesky().ok_or(Error::SingularMatrix {
        name: "P₂₂",
        t: f64::NAN,
        cond: f64::INFINITY,
    })?;
    let qc = q.clone().cholesky().ok_or(Error::SingularMatrix {
        name: "Q",
        t: f64::NAN,
        cond: f64::INFINITY,
    })?;
    let qc_inv = qc.l().try_inverse().ok_or(Error::SingularMatrix {
        name: "Q",
        t: f64::NAN,
        cond: f64::INFINITY,
    })?;
    let b = c.l() * qc_inv;
    if g.iter().chain(b.iter()).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            what: "bridge coefficients",
            t: f64::NAN,
            step: 0,
            state: x_prev.iter().map(|v| v.to_f64_lossy()).collect(),
        });
    }
    Ok(ImportanceSpec::constant(g, b))
}

/// Linearised measurement used for the conditioning step: `y_eff ≈ H x + r`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearizedMeasurement<T: Real> {
    pub h: DMatrix<T>,
    pub r: DMatrix<T>,
    pub y: DVector<T>,
}

/// Builds `H`, `R` and the effective measurement for one particle from its
/// previous state, side information and the predicted moments.
pub type Linearizer<T, A> =
    Arc<dyn Fn(&DVector<T>, &A, &EkfMoments<T>, &DVector<T>) -> Result<LinearizedMeasurement<T>> + Send + Sync>;

/// Per-particle EKF bridge proposal.
pub struct EkfBridgeProposal<T: Real, A> {
    model: SdeModel<T>,
    linearize: Linearizer<T, A>,
}

impl<T: Real, A> Clone for EkfBridgeProposal<T, A> {
    fn clone(&self) -> Self {
        Self {
            model: self.model.clone(),
            linearize: self.linearize.clone(),
        }
    }
}

impl<T: Real, A> EkfBridgeProposal<T, A> {
    /// The model must carry the Jacobian of its full drift.
    pub fn new(
        model: SdeModel<T>,
        linearize: impl Fn(&DVector<T>, &A, &EkfMoments<T>, &DVector<T>) -> Result<LinearizedMeasurement<T>>
            + Send
            + Sync
            + 'static,
    ) -> Result<Self> {
        if model.jacobian().is_none() {
            return Err(Error::InvalidParameter("EKF bridge needs the drift Jacobian".into()));
        }
        if model.dim_noise() != model.dim_stoch() {
            return Err(Error::Dimension("EKF bridge needs a square dispersion".into()));
        }
        Ok(Self {
            model,
            linearize: Arc::new(linearize),
        })
    }

    /// Predicted moments from a Dirac start at `x_prev`.
    pub fn predict(&self, x_prev: &DVector<T>, grid: &TimeGrid<T>) -> Result<EkfMoments<T>> {
        predict_from(&self.model, &GaussianBlock::point(x_prev.clone()), grid)
    }

    pub fn build_for(&self, x_prev: &DVector<T>, aux: &A, grid: &TimeGrid<T>, y: &DVector<T>) -> Result<ImportanceSpec<T>> {
        let predicted = self.predict(x_prev, grid)?;
        let lin = (self.linearize)(x_prev, aux, &predicted, y)?;
        let posterior = ekf_condition(&predicted, &lin.h, &lin.r, &lin.y)?;
        let t = grid.t0();
        build_bridge(
            x_prev,
            &posterior,
            grid.span(),
            &self.model.diffusion().matrix_at(t),
            &self.model.dispersion().at(t),
            self.model.stoch_range(),
        )
    }
}

fn predict_from<T: Real>(model: &SdeModel<T>, start: &EkfMoments<T>, grid: &TimeGrid<T>) -> Result<EkfMoments<T>> {
    let jac = model
        .jacobian()
        .ok_or(Error::InvalidParameter("EKF prediction needs the drift Jacobian".into()))?;
    ekf_predict(
        start,
        &|x: &DVector<T>, t: T| model.full_drift(x, t),
        &|x: &DVector<T>, t: T| jac(x, t),
        &|t: T| model.full_process_noise(t),
        &|x: &mut DVector<T>| model.project(x),
        grid,
    )
}

impl<T: Real, A: Sync> ProposalBuilder<T, A> for EkfBridgeProposal<T, A> {
    fn build(&self, particle: &Particle<T, A>, grid: &TimeGrid<T>, y: &DVector<T>) -> Result<ImportanceSpec<T>> {
        self.build_for(&particle.state, &particle.aux, grid, y)
    }
}

/// Continuous-discrete extended Kalman filter with a linear measurement,
/// returning the posterior after each measurement.
pub fn cd_ekf<T: Real>(
    model: &SdeModel<T>,
    initial: &EkfMoments<T>,
    t0: T,
    measurements: &[Measurement<T>],
    h: &DMatrix<T>,
    r: &DMatrix<T>,
    n_steps: usize,
) -> Result<Vec<EkfMoments<T>>> {
    let mut out = Vec::with_capacity(measurements.len());
    let mut current = initial.clone();
    let mut t = t0;
    for (k, meas) in measurements.iter().enumerate() {
        let grid = TimeGrid::new(t, meas.t, n_steps).map_err(|e| e.at_step(k + 1))?;
        let predicted = predict_from(model, &current, &grid).map_err(|e| e.at_step(k + 1))?;
        current = ekf_condition(&predicted, h, r, &meas.y).map_err(|e| e.at_step(k + 1))?;
        out.push(current.clone());
        t = meas.t;
    }
    Ok(out)
}
