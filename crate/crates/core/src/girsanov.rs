//! Scaled importance processes and Girsanov log-likelihood ratios.
//!
//! Given a target `dx = f dt + L dβ` and a proposal `ds = g dt + B dβ` driven
//! by the same Brownian motion, the scaled process `ds* = L B⁻¹ ds` is a weak
//! solution of the target under the measure with density `Z = exp(Λ)`, where
//!
//! ```text
//! dΛ = dᵀ L⁻ᵀ Q⁻¹ dβ − ½ dᵀ (L Q Lᵀ)⁻¹ d dt,    d = f(s*, t) − L B⁻¹ g(s, t).
//! ```
//!
//! For singular models only the noise-driven block enters `d`; the
//! deterministic block of both `s` and `s*` follows its own ODE.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::sde_core::{ensure_finite, SdeModel, TimeGrid, TimeMatrix, VectorField, BrownianIncrements};
use crate::{Error, Real, Result};

/// Largest condition number accepted when inverting `L`, `B` or `Q`.
pub const DEFAULT_MAX_CONDITION: f64 = 1e12;

/// Proposal process `ds₂ = g(s, t) dt + B(t) dβ` for the noise-driven block.
#[derive(Clone)]
pub struct ImportanceSpec<T: Real> {
    drift: VectorField<T>,
    dispersion: TimeMatrix<T>,
}

impl<T: Real> std::fmt::Debug for ImportanceSpec<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ImportanceSpec").field("dispersion", &self.dispersion).finish_non_exhaustive()
    }
}

impl<T: Real> ImportanceSpec<T> {
    pub fn new(
        drift: impl Fn(&DVector<T>, T) -> DVector<T> + Send + Sync + 'static,
        dispersion: TimeMatrix<T>,
    ) -> Self {
        Self {
            drift: Arc::new(drift),
            dispersion,
        }
    }

    /// The model's own dynamics (`g = f`, `B = L`): the bootstrap proposal.
    pub fn prior(model: &SdeModel<T>) -> Self {
        Self {
            drift: model.drift_field().clone(),
            dispersion: model.dispersion().clone(),
        }
    }

    /// Constant drift and dispersion.
    pub fn constant(drift: DVector<T>, dispersion: DMatrix<T>) -> Self {
        Self {
            drift: Arc::new(move |_x: &DVector<T>, _t: T| drift.clone()),
            dispersion: TimeMatrix::Constant(dispersion),
        }
    }

    pub fn drift(&self, s: &DVector<T>, t: T) -> DVector<T> {
        (self.drift)(s, t)
    }

    pub fn dispersion(&self) -> &TimeMatrix<T> {
        &self.dispersion
    }
}

/// Inverse of a square matrix, refusing singular or badly conditioned input.
pub fn guarded_inverse<T: Real>(m: &DMatrix<T>, name: &'static str, t: T, max_condition: f64) -> Result<DMatrix<T>> {
    if m.nrows() != m.ncols() || m.nrows() == 0 {
        return Err(Error::Dimension(format!(
            "{name} must be square and non-empty to be inverted, got {}x{}",
            m.nrows(),
            m.ncols()
        )));
    }
    let singular = |cond: f64| Error::SingularMatrix {
        name,
        t: t.to_f64_lossy(),
        cond,
    };
    let sv = m.clone().singular_values();
    let smax = sv.max().to_f64_lossy();
    let smin = sv.min().to_f64_lossy();
    if !(smin > 0.0) || !smax.is_finite() {
        return Err(singular(f64::INFINITY));
    }
    let cond = smax / smin;
    if cond > max_condition {
        return Err(singular(cond));
    }
    m.clone().try_inverse().ok_or_else(|| singular(cond))
}

/// Matrices entering one Euler step of the coupled system, all evaluated at
/// the left end of the interval.
#[derive(Debug, Clone)]
pub struct GirsanovFactors<T: Real> {
    pub l_inv: DMatrix<T>,
    pub b: DMatrix<T>,
    /// `L B⁻¹`; exactly the identity when `L` and `B` are equal.
    pub scale: DMatrix<T>,
    pub q_inv: DMatrix<T>,
    scale_is_identity: bool,
}

impl<T: Real> GirsanovFactors<T> {
    pub fn from_matrices(l: &DMatrix<T>, b: &DMatrix<T>, q_inv: DMatrix<T>, t: T, max_condition: f64) -> Result<Self> {
        if l.shape() != b.shape() {
            return Err(Error::Dimension(format!(
                "target dispersion is {:?} but proposal dispersion is {:?}",
                l.shape(),
                b.shape()
            )));
        }
        let l_inv = guarded_inverse(l, "L", t, max_condition)?;
        let b_inv = guarded_inverse(b, "B", t, max_condition)?;
        let scale_is_identity = l == b;
        let scale = if scale_is_identity {
            DMatrix::identity(l.nrows(), l.ncols())
        } else {
            l * b_inv
        };
        Ok(Self {
            l_inv,
            b: b.clone(),
            scale,
            q_inv,
            scale_is_identity,
        })
    }

    pub fn at(model: &SdeModel<T>, imp: &ImportanceSpec<T>, t: T, max_condition: f64) -> Result<Self> {
        let q_inv = model.diffusion().inverse_at(t)?.into_owned();
        Self::from_matrices(&model.dispersion().at(t), &imp.dispersion().at(t), q_inv, t, max_condition)
    }

    /// `L B⁻¹ v`.
    pub fn apply_scale(&self, v: &DVector<T>) -> DVector<T> {
        if self.scale_is_identity {
            v.clone()
        } else {
            &self.scale * v
        }
    }

    /// Increment of `Λ` over one step with `d = f_star − L B⁻¹ g`.
    pub fn llr_increment(&self, f_star: &DVector<T>, g: &DVector<T>, dt: T, dbeta: &DVector<T>) -> T {
        let d = f_star - self.apply_scale(g);
        let a = &self.l_inv * d; // L⁻¹ d
        let u = &self.q_inv * &a; // Q⁻¹ L⁻¹ d
        u.dot(dbeta) - T::lit(0.5) * u.dot(&a) * dt
    }
}

/// Running log-likelihood ratio `Λ`; zero at the start of every interval.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LlrAccumulator<T>(T);

impl<T: Real> LlrAccumulator<T> {
    pub fn new() -> Self {
        Self(T::zero())
    }

    pub fn value(&self) -> T {
        self.0
    }

    /// `Z = exp(Λ)`. Filters combine `Λ` with log-weights directly instead.
    pub fn likelihood_ratio(&self) -> T {
        self.0.exp()
    }

    pub fn add(&mut self, increment: T) {
        self.0 += increment;
    }
}

/// One step of the scaled process: `s* + L B⁻¹ Δs`.
pub fn step_scaled_process<T: Real>(
    s_star: &DVector<T>,
    l: &DMatrix<T>,
    b: &DMatrix<T>,
    t: T,
    ds: &DVector<T>,
) -> Result<DVector<T>> {
    let factors = GirsanovFactors::from_matrices(l, b, DMatrix::identity(l.ncols(), l.ncols()), t, DEFAULT_MAX_CONDITION)?;
    Ok(s_star + factors.apply_scale(ds))
}

#[allow(clippy::too_many_arguments)]
/// `Λ + dᵀ L⁻ᵀ Q⁻¹ Δβ − ½ dᵀ (L Q Lᵀ)⁻¹ d Δt` with `d = f(s*) − L B⁻¹ g(s)`.
pub fn step_llr<T: Real>(
    llr: T,
    f_at_sstar: &DVector<T>,
    g_at_s: &DVector<T>,
    l: &DMatrix<T>,
    b: &DMatrix<T>,
    q: &DMatrix<T>,
    t: T,
    dt: T,
    dbeta: &DVector<T>,
) -> Result<T> {
    let q_inv = guarded_inverse(q, "Q", t, DEFAULT_MAX_CONDITION)?;
    let factors = GirsanovFactors::from_matrices(l, b, q_inv, t, DEFAULT_MAX_CONDITION)?;
    let d = f_at_sstar - factors.apply_scale(g_at_s);
    if d.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            what: "drift difference",
            t: t.to_f64_lossy(),
            step: 0,
            state: d.iter().map(|v| v.to_f64_lossy()).collect(),
        });
    }
    Ok(llr + factors.llr_increment(f_at_sstar, g_at_s, dt, dbeta))
}

#[allow(clippy::too_many_arguments)]
/// Same arithmetic as [`step_llr`]; `f₂` and `g₂` are the drifts of the
/// noise-driven block evaluated at the joint states `(s₁*, s₂*)` and `(s₁, s₂)`.
pub fn step_llr_singular<T: Real>(
    llr: T,
    f2_at_sstar: &DVector<T>,
    g2_at_s: &DVector<T>,
    l: &DMatrix<T>,
    b: &DMatrix<T>,
    q: &DMatrix<T>,
    t: T,
    dt: T,
    dbeta: &DVector<T>,
) -> Result<T> {
    step_llr(llr, f2_at_sstar, g2_at_s, l, b, q, t, dt, dbeta)
}

/// Proposal path, scaled path and `Λ` at the end of an interval.
#[derive(Debug, Clone, PartialEq)]
pub struct CoupledPathState<T: Real> {
    pub s: DVector<T>,
    pub s_star: DVector<T>,
    pub llr: LlrAccumulator<T>,
}

impl<T: Real> CoupledPathState<T> {
    /// The new particle state `s*(t_k)`.
    pub fn state(&self) -> &DVector<T> {
        &self.s_star
    }
}

/// Callback invoked before every Euler step with `(j, t_j, Δt, s*(t_j))`.
pub type SubstepVisitor<'a, T> = dyn FnMut(usize, T, T, &DVector<T>) -> Result<()> + 'a;

/// Co-advance `s`, `s*` and `Λ` over `grid` from `x_prev` for a non-singular model.
pub fn propagate_coupled<T: Real>(
    model: &SdeModel<T>,
    imp: &ImportanceSpec<T>,
    x_prev: &DVector<T>,
    grid: &TimeGrid<T>,
    increments: &BrownianIncrements<T>,
) -> Result<CoupledPathState<T>> {
    if model.is_singular() {
        return Err(Error::InvalidParameter(
            "model has a deterministic block; use propagate_coupled_singular".into(),
        ));
    }
    propagate_coupled_with(model, imp, x_prev, grid, increments, DEFAULT_MAX_CONDITION, &mut |_, _, _, _| Ok(()))
}

/// As [`propagate_coupled`] for a model split into deterministic and
/// noise-driven blocks; the deterministic blocks of `s` and `s*` are
/// integrated with forward Euler on the same grid.
pub fn propagate_coupled_singular<T: Real>(
    model: &SdeModel<T>,
    imp: &ImportanceSpec<T>,
    x_prev: &DVector<T>,
    grid: &TimeGrid<T>,
    increments: &BrownianIncrements<T>,
) -> Result<CoupledPathState<T>> {
    propagate_coupled_with(model, imp, x_prev, grid, increments, DEFAULT_MAX_CONDITION, &mut |_, _, _, _| Ok(()))
}

/// General coupled propagation with a per-step visitor (used to co-advance
/// Rao-Blackwellised blocks along `s*`).
pub fn propagate_coupled_with<T: Real>(
    model: &SdeModel<T>,
    imp: &ImportanceSpec<T>,
    x_prev: &DVector<T>,
    grid: &TimeGrid<T>,
    increments: &BrownianIncrements<T>,
    max_condition: f64,
    visit: &mut SubstepVisitor<'_, T>,
) -> Result<CoupledPathState<T>> {
    let n = model.dim_state();
    let nd = model.dim_det();
    let ns = model.dim_stoch();
    if x_prev.len() != n {
        return Err(Error::Dimension(format!("particle has {} components, model has {n}", x_prev.len())));
    }
    if increments.len() != grid.n_steps() {
        return Err(Error::Dimension(format!(
            "{} increments for a grid of {} steps",
            increments.len(),
            grid.n_steps()
        )));
    }
    if model.dim_noise() != ns {
        return Err(Error::Dimension(format!(
            "likelihood ratios need a square dispersion; noise has {} components, block has {ns}",
            model.dim_noise()
        )));
    }
    ensure_finite(x_prev, "initial state", grid.t0(), 0, x_prev)?;

    let dt = grid.dt();
    let constant = model.dispersion().is_constant() && imp.dispersion().is_constant() && model.diffusion().is_constant();
    let cached = if constant {
        Some(GirsanovFactors::at(model, imp, grid.t0(), max_condition)?)
    } else {
        None
    };

    let mut s = x_prev.clone();
    let mut s_star = x_prev.clone();
    let mut llr = LlrAccumulator::new();
    for (j, dbeta) in increments.iter().enumerate() {
        let t = grid.time(j);
        let owned;
        let factors = match &cached {
            Some(f) => f,
            None => {
                owned = GirsanovFactors::at(model, imp, t, max_condition)?;
                &owned
            }
        };
        visit(j, t, dt, &s_star)?;

        let g = imp.drift(&s, t);
        let f_star = model.drift(&s_star, t);
        if g.len() != ns || f_star.len() != ns {
            return Err(Error::Dimension(format!(
                "drifts of the noise-driven block returned {} (proposal) and {} (target) components, expected {ns}",
                g.len(),
                f_star.len()
            )));
        }
        ensure_finite(&g, "proposal drift", t, j, &s)?;
        ensure_finite(&f_star, "target drift", t, j, &s_star)?;
        let increment = factors.llr_increment(&f_star, &g, dt, dbeta);
        if !increment.is_finite() {
            return Err(Error::NonFinite {
                what: "log-likelihood ratio",
                t: t.to_f64_lossy(),
                step: j,
                state: s_star.iter().map(|v| v.to_f64_lossy()).collect(),
            });
        }
        llr.add(increment);

        let g_dt = g * dt;
        let b_db = &factors.b * dbeta;
        if nd > 0 {
            let det_s = model.det_field(&s, t);
            let det_star = model.det_field(&s_star, t);
            ensure_finite(&det_s, "deterministic field", t, j, &s)?;
            ensure_finite(&det_star, "deterministic field", t, j, &s_star)?;
            let mut head = s.rows_mut(0, nd);
            head += det_s * dt;
            let mut head = s_star.rows_mut(0, nd);
            head += det_star * dt;
        }
        let mut tail = s_star.rows_mut(nd, ns);
        if factors.scale_is_identity {
            tail += &g_dt;
            tail += &b_db;
        } else {
            tail += &factors.scale * (&g_dt + &b_db);
        }
        let mut tail = s.rows_mut(nd, ns);
        tail += g_dt;
        tail += b_db;
        model.project(&mut s);
        model.project(&mut s_star);
        ensure_finite(&s_star, "scaled state", t, j, &s_star)?;
        ensure_finite(&s, "proposal state", t, j, &s)?;
    }
    Ok(CoupledPathState { s, s_star, llr })
}

/// Per-path values of `½ Σ_j (f − f_L)ᵀ Σ⁻¹ (f − f_L) Δt` along paths
/// simulated under the `q`-law (drift `f_L`). Each path holds the states at
/// the points of `grid`; integrands use the left end of every step.
pub fn kl_path_integrals<T: Real>(
    f: &dyn Fn(&DVector<T>, T) -> DVector<T>,
    f_l: &dyn Fn(&DVector<T>, T) -> DVector<T>,
    sigma: &DMatrix<T>,
    grid: &TimeGrid<T>,
    paths: &[Vec<DVector<T>>],
) -> Result<Vec<T>> {
    if paths.is_empty() {
        return Err(Error::InvalidParameter("KL estimate needs at least one path".into()));
    }
    let chol = sigma
        .clone()
        .cholesky()
        .ok_or(Error::InvalidParameter("Σ must be symmetric positive definite".into()))?;
    let dt = grid.dt();
    paths
        .iter()
        .enumerate()
        .map(|(p, path)| {
            if path.len() < grid.n_steps() {
                return Err(Error::Dimension(format!(
                    "path {p} has {} points, grid has {} steps",
                    path.len(),
                    grid.n_steps()
                )));
            }
            let mut acc = T::zero();
            for (j, x) in path.iter().take(grid.n_steps()).enumerate() {
                let t = grid.time(j);
                let d = f(x, t) - f_l(x, t);
                acc += d.dot(&chol.solve(&d)) * dt;
            }
            Ok(T::lit(0.5) * acc)
        })
        .collect()
}

/// Monte Carlo estimate of `KL[q | p] = E_q[½ ∫ (f − f_L)ᵀ Σ⁻¹ (f − f_L) dt]`,
/// the mean of [`kl_path_integrals`].
pub fn estimate_kl<T: Real>(
    f: &dyn Fn(&DVector<T>, T) -> DVector<T>,
    f_l: &dyn Fn(&DVector<T>, T) -> DVector<T>,
    sigma: &DMatrix<T>,
    grid: &TimeGrid<T>,
    paths: &[Vec<DVector<T>>],
) -> Result<T> {
    let values = kl_path_integrals(f, f_l, sigma, grid, paths)?;
    let total = values.iter().fold(T::zero(), |a, &v| a + v);
    Ok(total / T::from_usize_exact(values.len()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{Purpose, StreamFactory};
    use crate::sde_core::{sample_brownian_increments, DiffusionSpec};
    use approx::assert_relative_eq;

    fn v(x: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(x)
    }

    fn m1(x: f64) -> DMatrix<f64> {
        DMatrix::from_element(1, 1, x)
    }

    fn constant_drift_model(a: f64, q: f64) -> SdeModel<f64> {
        SdeModel::new(
            1,
            move |_x: &DVector<f64>, _t| v(&[a]),
            TimeMatrix::scalar(1.0),
            DiffusionSpec::scalar(q).unwrap(),
            |_| DVector::zeros(1),
        )
        .unwrap()
    }

    #[test]
    fn scaled_process_examples() {
        let l = DMatrix::identity(2, 2) * 2.0;
        let out = step_scaled_process(&v(&[0.0, 0.0]), &l, &DMatrix::identity(2, 2), 0.0, &v(&[1.0, 0.0])).unwrap();
        assert_eq!(out, v(&[2.0, 0.0]));

        let b = DMatrix::from_row_slice(2, 2, &[0.3, 0.1, 0.0, 0.7]);
        let out = step_scaled_process(&v(&[1.0, 2.0]), &b, &b, 0.0, &v(&[0.123, -4.5])).unwrap();
        assert_eq!(out, v(&[1.123, 2.0 - 4.5]));

        // Pendulum bridge: L = 1, B = sqrt(P₂₂/(qΔt)) scales increments by sqrt(qΔt/P₂₂).
        let (q, dt, p22) = (0.01_f64, 0.1, 0.004);
        let b = (p22 / (q * dt)).sqrt();
        let out = step_scaled_process(&v(&[0.0]), &m1(1.0), &m1(b), 0.0, &v(&[1.0])).unwrap();
        assert_relative_eq!(out[0], (q * dt / p22).sqrt(), epsilon = 1e-14);

        assert!(matches!(
            step_scaled_process(&v(&[0.0]), &m1(1.0), &m1(0.0), 0.5, &v(&[1.0])),
            Err(Error::SingularMatrix { name: "B", .. })
        ));
        let nearly_singular = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 1e-14]);
        assert!(matches!(
            step_scaled_process(&v(&[0.0, 0.0]), &DMatrix::identity(2, 2), &nearly_singular, 0.0, &v(&[1.0, 1.0])),
            Err(Error::SingularMatrix { .. })
        ));
    }

    #[test]
    fn llr_is_unchanged_when_proposal_equals_target() {
        let f = v(&[0.37, -1.2]);
        let l = DMatrix::from_row_slice(2, 2, &[1.0, 0.2, 0.0, 0.5]);
        let q = DMatrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 1.0]);
        let out = step_llr(-0.8125, &f, &f, &l, &l, &q, 0.0, 0.1, &v(&[0.3, -0.2])).unwrap();
        assert_eq!(out, -0.8125);
        let out = step_llr_singular(1.5, &f, &f, &l, &l, &q, 0.0, 0.1, &v(&[0.3, -0.2])).unwrap();
        assert_eq!(out, 1.5);
    }

    #[test]
    fn llr_singular_pendulum_increment() {
        // d = −sin(π/2) − 0 = −1, L⁻ᵀQ⁻¹ = 100.
        let f2 = v(&[-(std::f64::consts::FRAC_PI_2).sin()]);
        let out = step_llr_singular(0.0, &f2, &v(&[0.0]), &m1(1.0), &m1(1.0), &m1(0.01), 0.0, 0.1, &v(&[0.01])).unwrap();
        assert_relative_eq!(out, -6.0, epsilon = 1e-12);
    }

    #[test]
    fn llr_rejects_singular_dispersion() {
        assert!(matches!(
            step_llr(0.0, &v(&[1.0]), &v(&[0.0]), &m1(0.0), &m1(1.0), &m1(1.0), 0.2, 0.1, &v(&[0.1])),
            Err(Error::SingularMatrix { name: "L", .. })
        ));
        assert!(step_llr(0.0, &v(&[f64::NAN]), &v(&[0.0]), &m1(1.0), &m1(1.0), &m1(1.0), 0.2, 0.1, &v(&[0.1])).is_err());
    }

    /// Closed form for constant drifts: Λ(T) = ((a−b)/q) β(T) − ((a−b)²/(2q)) T.
    fn analytic_constant_llr(a: f64, b: f64, q: f64, horizon: f64, beta_t: f64) -> f64 {
        (a - b) / q * beta_t - (a - b).powi(2) / (2.0 * q) * horizon
    }

    #[test]
    fn constant_drift_llr_matches_closed_form() {
        assert_eq!(analytic_constant_llr(1.0, 0.0, 1.0, 1.0, 0.5), 0.0);
        assert_eq!(analytic_constant_llr(1.0, 0.0, 1.0, 1.0, 1.0), 0.5);

        let grid = TimeGrid::new(0.0, 1.0, 100).unwrap();
        for (target_beta, expected) in [(0.5, 0.0), (1.0, 0.5)] {
            // Increments summing to the requested β(1).
            let inc = BrownianIncrements::from_vec(vec![v(&[target_beta / 100.0]); 100]);
            let state = propagate_coupled(
                &constant_drift_model(1.0, 1.0),
                &ImportanceSpec::constant(v(&[0.0]), m1(1.0)),
                &v(&[0.0]),
                &grid,
                &inc,
            )
            .unwrap();
            assert_relative_eq!(state.llr.value(), expected, epsilon = 1e-12);
        }

        let mut rng = StreamFactory::new(17).stream(Purpose::Auxiliary, 0, 0);
        let q = 0.7;
        let inc = sample_brownian_increments(&grid, &DiffusionSpec::scalar(q).unwrap(), &mut rng).unwrap();
        let state = propagate_coupled(
            &constant_drift_model(1.3, q),
            &ImportanceSpec::constant(v(&[-0.4]), m1(1.0)),
            &v(&[0.0]),
            &grid,
            &inc,
        )
        .unwrap();
        let expected = analytic_constant_llr(1.3, -0.4, q, 1.0, inc.total()[0]);
        assert_relative_eq!(state.llr.value(), expected, epsilon = 1e-12);
        assert!(state.llr.likelihood_ratio() > 0.0);
    }

    #[test]
    fn bootstrap_proposal_reproduces_prior_path_with_unit_weight() {
        let model = SdeModel::new(
            2,
            |x: &DVector<f64>, _t| v(&[x[1].sin(), -x[0]]),
            TimeMatrix::Constant(DMatrix::from_row_slice(2, 2, &[0.5, 0.1, 0.0, 0.3])),
            DiffusionSpec::identity(2).unwrap(),
            |_| DVector::zeros(2),
        )
        .unwrap();
        let grid = TimeGrid::new(0.0, 1.0, 25).unwrap();
        let mut rng = StreamFactory::new(21).stream(Purpose::Auxiliary, 0, 0);
        let inc = sample_brownian_increments(&grid, model.diffusion(), &mut rng).unwrap();
        let x0 = v(&[0.2, -0.1]);
        let out = propagate_coupled(&model, &ImportanceSpec::prior(&model), &x0, &grid, &inc).unwrap();
        let prior_path = crate::sde_core::integrate_sde(&model, &x0, &grid, &inc).unwrap();
        assert_eq!(out.llr.value(), 0.0);
        assert_eq!(out.llr.likelihood_ratio(), 1.0);
        assert_eq!(&out.s_star, prior_path.last().unwrap());
        assert_eq!(out.s, out.s_star);
    }

    #[test]
    fn singular_deterministic_block_matches_with_equal_dispersions() {
        let model = SdeModel::split(
            1,
            |x: &DVector<f64>, _t| v(&[x[1]]),
            1,
            |x: &DVector<f64>, _t| v(&[-x[0].sin()]),
            TimeMatrix::scalar(1.0),
            DiffusionSpec::scalar(0.01).unwrap(),
            |_| DVector::zeros(2),
        )
        .unwrap();
        let grid = TimeGrid::new(0.0, 0.1, 10).unwrap();
        let mut rng = StreamFactory::new(2).stream(Purpose::Auxiliary, 0, 0);
        let inc = sample_brownian_increments(&grid, model.diffusion(), &mut rng).unwrap();
        // A different drift but the same dispersion: s and s* coincide pathwise.
        let imp = ImportanceSpec::new(|_s: &DVector<f64>, _t| v(&[0.3]), TimeMatrix::scalar(1.0));
        let mut det_star = Vec::new();
        let out = propagate_coupled_with(&model, &imp, &v(&[0.5, 0.0]), &grid, &inc, DEFAULT_MAX_CONDITION, &mut |_, _, _, s| {
            det_star.push(s[0]);
            Ok(())
        })
        .unwrap();
        assert_eq!(out.s[0], out.s_star[0]);
        assert_eq!(out.s, out.s_star);
        assert_eq!(det_star.len(), 10);
        assert_ne!(out.llr.value(), 0.0);
    }

    #[test]
    fn non_singular_entry_point_rejects_split_models() {
        let model = SdeModel::split(
            1,
            |x: &DVector<f64>, _t| v(&[x[1]]),
            1,
            |_x: &DVector<f64>, _t| v(&[0.0]),
            TimeMatrix::scalar(1.0),
            DiffusionSpec::scalar(1.0).unwrap(),
            |_| DVector::zeros(2),
        )
        .unwrap();
        let grid = TimeGrid::new(0.0, 1.0, 2).unwrap();
        let inc = BrownianIncrements::from_vec(vec![v(&[0.0]); 2]);
        assert!(propagate_coupled(&model, &ImportanceSpec::prior(&model), &v(&[0.0, 0.0]), &grid, &inc).is_err());
    }

    #[test]
    fn kl_examples() {
        let grid = TimeGrid::new(0.0, 2.0, 20).unwrap();
        let path: Vec<DVector<f64>> = (0..=20).map(|j| v(&[j as f64 * 0.1])).collect();
        let paths = vec![path.clone(), path];
        let f = |x: &DVector<f64>, _t: f64| -x;
        let zero = estimate_kl(&f, &f, &m1(1.0), &grid, &paths).unwrap();
        assert_eq!(zero, 0.0);

        let a = |_x: &DVector<f64>, _t: f64| v(&[1.0]);
        let b = |_x: &DVector<f64>, _t: f64| v(&[0.0]);
        assert_relative_eq!(estimate_kl(&a, &b, &m1(1.0), &grid, &paths).unwrap(), 1.0, epsilon = 1e-14);
        assert_relative_eq!(
            estimate_kl(&a, &b, &m1(0.5), &grid, &paths[..1]).unwrap(),
            0.5 * 2.0 / 0.5,
            epsilon = 1e-14
        );
        assert!(estimate_kl(&a, &b, &m1(-1.0), &grid, &paths).is_err());
    }

    #[test]
    fn time_varying_dispersion_is_refactored_each_step() {
        let model = SdeModel::new(
            1,
            |_x: &DVector<f64>, _t| v(&[0.0]),
            TimeMatrix::Varying(std::sync::Arc::new(|t: f64| m1(1.0 - t))),
            DiffusionSpec::scalar(1.0).unwrap(),
            |_| DVector::zeros(1),
        )
        .unwrap();
        let grid = TimeGrid::new(0.0, 2.0, 4).unwrap();
        let inc = BrownianIncrements::from_vec(vec![v(&[0.1]); 4]);
        let err = propagate_coupled(
            &model,
            &ImportanceSpec::constant(v(&[0.0]), m1(1.0)),
            &v(&[0.0]),
            &grid,
            &inc,
        )
        .unwrap_err();
        match err {
            Error::SingularMatrix { name, t, .. } => {
                assert_eq!(name, "L");
                assert_eq!(t, 1.0);
            }
            e => panic!("{e:?}"),
        }
    }
}
