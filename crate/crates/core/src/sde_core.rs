//! Time grids, Brownian increments and Euler–Maruyama integration.
//!
//! All integrands are evaluated at the left end of each grid interval (Itô
//! convention). Every step checks its output for non-finite values and
//! reports the time and state instead of letting NaN reach the weights.

use std::borrow::Cow;
use std::fmt;
use std::ops::Range;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::RngCore;

use crate::rng::{standard_normal, ParticleRng};
use crate::{Error, Real, Result};

pub type VectorField<T> = Arc<dyn Fn(&DVector<T>, T) -> DVector<T> + Send + Sync>;
pub type MatrixField<T> = Arc<dyn Fn(&DVector<T>, T) -> DMatrix<T> + Send + Sync>;
pub type InitialSampler<T> = Arc<dyn Fn(&mut ParticleRng) -> DVector<T> + Send + Sync>;
pub type StateProjection<T> = Arc<dyn Fn(&mut DVector<T>) + Send + Sync>;

/// A matrix that is either fixed or a function of time.
#[derive(Clone)]
pub enum TimeMatrix<T: Real> {
    Constant(DMatrix<T>),
    Varying(Arc<dyn Fn(T) -> DMatrix<T> + Send + Sync>),
}

impl<T: Real> TimeMatrix<T> {
    pub fn scalar(v: T) -> Self {
        TimeMatrix::Constant(DMatrix::from_element(1, 1, v))
    }

    pub fn at(&self, t: T) -> Cow<'_, DMatrix<T>> {
        match self {
            TimeMatrix::Constant(m) => Cow::Borrowed(m),
            TimeMatrix::Varying(f) => Cow::Owned(f(t)),
        }
    }

    pub fn is_constant(&self) -> bool {
        matches!(self, TimeMatrix::Constant(_))
    }
}

impl<T: Real> From<DMatrix<T>> for TimeMatrix<T> {
    fn from(m: DMatrix<T>) -> Self {
        TimeMatrix::Constant(m)
    }
}

impl<T: Real> fmt::Debug for TimeMatrix<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TimeMatrix::Constant(m) => write!(f, "Constant({m:?})"),
            TimeMatrix::Varying(_) => write!(f, "Varying(..)"),
        }
    }
}

/// Uniform grid over one inter-measurement interval `[t0, t1]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeGrid<T> {
    t0: T,
    t1: T,
    n_steps: usize,
}

impl<T: Real> TimeGrid<T> {
    pub fn new(t0: T, t1: T, n_steps: usize) -> Result<Self> {
        if n_steps == 0 {
            return Err(Error::InvalidGrid("n_steps must be at least 1".into()));
        }
        if !(t1 > t0) || !t0.is_finite() || !t1.is_finite() {
            return Err(Error::InvalidGrid(format!(
                "need finite t0 < t1, got [{}, {}]",
                t0.to_f64_lossy(),
                t1.to_f64_lossy()
            )));
        }
        Ok(Self { t0, t1, n_steps })
    }

    pub fn t0(&self) -> T {
        self.t0
    }

    pub fn t1(&self) -> T {
        self.t1
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    pub fn span(&self) -> T {
        self.t1 - self.t0
    }

    pub fn dt(&self) -> T {
        (self.t1 - self.t0) / T::from_usize_exact(self.n_steps)
    }

    /// Grid point `j`, with the last point pinned to `t1`.
    pub fn time(&self, j: usize) -> T {
        if j >= self.n_steps {
            self.t1
        } else {
            self.t0 + self.dt() * T::from_usize_exact(j)
        }
    }

    pub fn points(&self) -> Vec<T> {
        (0..=self.n_steps).map(|j| self.time(j)).collect()
    }
}

/// Diffusion matrix `Q(t)` of the driving Brownian motion.
///
/// The lower Cholesky factor and the inverse are cached when `Q` does not
/// depend on time.
#[derive(Clone, Debug)]
pub struct DiffusionSpec<T: Real> {
    dim: usize,
    q: TimeMatrix<T>,
    factor: Option<DMatrix<T>>,
    inverse: Option<DMatrix<T>>,
}

impl<T: Real> DiffusionSpec<T> {
    pub fn constant(q: DMatrix<T>) -> Result<Self> {
        let dim = q.nrows();
        if q.ncols() != dim || dim == 0 {
            return Err(Error::Dimension(format!(
                "diffusion matrix must be square and non-empty, got {}x{}",
                q.nrows(),
                q.ncols()
            )));
        }
        let factor = cholesky_factor(&q, T::zero())?;
        let inverse = invert_spd(&q, T::zero())?;
        Ok(Self {
            dim,
            q: TimeMatrix::Constant(q),
            factor: Some(factor),
            inverse: Some(inverse),
        })
    }

    pub fn scalar(q: T) -> Result<Self> {
        Self::constant(DMatrix::from_element(1, 1, q))
    }

    pub fn identity(dim: usize) -> Result<Self> {
        Self::constant(DMatrix::identity(dim, dim))
    }

    /// `Q(t)` supplied as a function. Positive definiteness is checked at
    /// every grid point where it is used.
    pub fn time_varying(dim: usize, q: impl Fn(T) -> DMatrix<T> + Send + Sync + 'static) -> Self {
        Self {
            dim,
            q: TimeMatrix::Varying(Arc::new(q)),
            factor: None,
            inverse: None,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn is_constant(&self) -> bool {
        self.q.is_constant()
    }

    pub fn matrix_at(&self, t: T) -> Cow<'_, DMatrix<T>> {
        self.q.at(t)
    }

    /// Lower Cholesky factor of `Q(t)`.
    pub fn factor_at(&self, t: T) -> Result<Cow<'_, DMatrix<T>>> {
        match &self.factor {
            Some(f) => Ok(Cow::Borrowed(f)),
            None => cholesky_factor(&self.q.at(t), t).map(Cow::Owned),
        }
    }

    pub fn inverse_at(&self, t: T) -> Result<Cow<'_, DMatrix<T>>> {
        match &self.inverse {
            Some(i) => Ok(Cow::Borrowed(i)),
            None => invert_spd(&self.q.at(t), t).map(Cow::Owned),
        }
    }
}

fn check_symmetric<T: Real>(q: &DMatrix<T>, t: T) -> Result<()> {
    let n = q.nrows();
    if q.ncols() != n {
        return Err(Error::Dimension(format!("Q(t) is {}x{}", q.nrows(), q.ncols())));
    }
    let scale = q.amax();
    for i in 0..n {
        for j in 0..i {
            if (q[(i, j)] - q[(j, i)]).abs() > T::lit(1e-12) * scale {
                return Err(Error::DiffusionNotPositiveDefinite { t: t.to_f64_lossy() });
            }
        }
    }
    Ok(())
}

fn cholesky_factor<T: Real>(q: &DMatrix<T>, t: T) -> Result<DMatrix<T>> {
    check_symmetric(q, t)?;
    q.clone()
        .cholesky()
        .map(|c| c.l())
        .ok_or(Error::DiffusionNotPositiveDefinite { t: t.to_f64_lossy() })
}

fn invert_spd<T: Real>(q: &DMatrix<T>, t: T) -> Result<DMatrix<T>> {
    check_symmetric(q, t)?;
    q.clone()
        .cholesky()
        .map(|c| c.inverse())
        .ok_or(Error::DiffusionNotPositiveDefinite { t: t.to_f64_lossy() })
}

/// One realisation of the driving noise on a grid: `Δβ_j ~ N(0, Q(t_j) Δt)`.
#[derive(Debug, Clone, PartialEq)]
pub struct BrownianIncrements<T: Real>(Vec<DVector<T>>);

impl<T: Real> BrownianIncrements<T> {
    pub fn from_vec(increments: Vec<DVector<T>>) -> Self {
        Self(increments)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[DVector<T>] {
        &self.0
    }

    pub fn iter(&self) -> std::slice::Iter<'_, DVector<T>> {
        self.0.iter()
    }

    /// `β(t1) - β(t0)`.
    pub fn total(&self) -> DVector<T> {
        let dim = self.0.first().map_or(0, |v| v.len());
        self.0.iter().fold(DVector::zeros(dim), |acc, v| acc + v)
    }

    /// Sum adjacent pairs, giving the same path on a grid with half the steps.
    pub fn coarsen(&self) -> Self {
        Self(self.0.chunks(2).map(|c| c.iter().fold(DVector::zeros(c[0].len()), |a, v| a + v)).collect())
    }
}

/// Draw `Δβ_j = chol(Q(t_j) Δt) ξ_j` for every interval of `grid`.
pub fn sample_brownian_increments<T: Real, R: RngCore + ?Sized>(
    grid: &TimeGrid<T>,
    diffusion: &DiffusionSpec<T>,
    rng: &mut R,
) -> Result<BrownianIncrements<T>> {
    let sqrt_dt = grid.dt().sqrt();
    let s = diffusion.dim();
    let mut out = Vec::with_capacity(grid.n_steps());
    for j in 0..grid.n_steps() {
        let factor = diffusion.factor_at(grid.time(j))?;
        let xi = DVector::from_fn(s, |_, _| standard_normal::<T, _>(rng));
        out.push(factor.as_ref() * xi * sqrt_dt);
    }
    Ok(BrownianIncrements(out))
}

fn non_finite<T: Real>(what: &'static str, t: T, step: usize, x: &DVector<T>) -> Error {
    Error::NonFinite {
        what,
        t: t.to_f64_lossy(),
        step,
        state: x.iter().map(|v| v.to_f64_lossy()).collect(),
    }
}

pub(crate) fn ensure_finite<T: Real>(
    v: &DVector<T>,
    what: &'static str,
    t: T,
    step: usize,
    state: &DVector<T>,
) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(non_finite(what, t, step, state))
    }
}

/// `x + f(x,t) Δt + L(t) Δβ`.
pub fn euler_maruyama_step<T: Real>(
    x: &DVector<T>,
    drift: &dyn Fn(&DVector<T>, T) -> DVector<T>,
    dispersion: &DMatrix<T>,
    t: T,
    dt: T,
    dbeta: &DVector<T>,
) -> Result<DVector<T>> {
    em_step(x, drift, dispersion, t, dt, dbeta, 0)
}

fn em_step<T: Real>(
    x: &DVector<T>,
    drift: &dyn Fn(&DVector<T>, T) -> DVector<T>,
    dispersion: &DMatrix<T>,
    t: T,
    dt: T,
    dbeta: &DVector<T>,
    step: usize,
) -> Result<DVector<T>> {
    if !(dt > T::zero()) {
        return Err(Error::InvalidGrid(format!("step size must be positive, got {}", dt.to_f64_lossy())));
    }
    if dispersion.ncols() != dbeta.len() || dispersion.nrows() != x.len() {
        return Err(Error::Dimension(format!(
            "dispersion is {}x{} but state has {} and noise {} components",
            dispersion.nrows(),
            dispersion.ncols(),
            x.len(),
            dbeta.len()
        )));
    }
    let f = drift(x, t);
    if f.len() != x.len() {
        return Err(Error::Dimension(format!("drift returned {} components for a {}-state", f.len(), x.len())));
    }
    ensure_finite(&f, "drift", t, step, x)?;
    let next = x + f * dt + dispersion * dbeta;
    ensure_finite(&next, "state", t, step, x)?;
    Ok(next)
}

/// Deterministic vector field of an embedded ODE sub-system.
#[derive(Clone)]
pub struct OdeField<T: Real>(pub VectorField<T>);

impl<T: Real> OdeField<T> {
    pub fn new(f: impl Fn(&DVector<T>, T) -> DVector<T> + Send + Sync + 'static) -> Self {
        Self(Arc::new(f))
    }

    pub fn eval(&self, y: &DVector<T>, t: T) -> DVector<T> {
        (self.0)(y, t)
    }
}

/// Forward Euler path of `dy/dt = field(y, t)` on `grid` (including both ends).
pub fn integrate_ode<T: Real>(field: &OdeField<T>, y0: &DVector<T>, grid: &TimeGrid<T>) -> Result<Vec<DVector<T>>> {
    let dt = grid.dt();
    let mut path = Vec::with_capacity(grid.n_steps() + 1);
    path.push(y0.clone());
    for j in 0..grid.n_steps() {
        let t = grid.time(j);
        let y = &path[j];
        let v = field.eval(y, t);
        ensure_finite(&v, "ODE field", t, j, y)?;
        let next = y + v * dt;
        ensure_finite(&next, "state", t, j, y)?;
        path.push(next);
    }
    Ok(path)
}

/// State-space SDE model, optionally split into a deterministic block `x₁`
/// (leading components, `dx₁/dt = f₁(x,t)`) and a noise-driven block `x₂`
/// (`dx₂ = f₂(x,t) dt + L(t) dβ`). Without a deterministic block this is the
/// plain model `dx = f dt + L dβ`.
#[derive(Clone)]
pub struct SdeModel<T: Real> {
    n_det: usize,
    n_stoch: usize,
    det_field: Option<VectorField<T>>,
    drift: VectorField<T>,
    dispersion: TimeMatrix<T>,
    diffusion: DiffusionSpec<T>,
    initial: InitialSampler<T>,
    jacobian: Option<MatrixField<T>>,
    projection: Option<StateProjection<T>>,
}

impl<T: Real> fmt::Debug for SdeModel<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SdeModel")
            .field("n_det", &self.n_det)
            .field("n_stoch", &self.n_stoch)
            .field("dispersion", &self.dispersion)
            .field("diffusion", &self.diffusion)
            .finish_non_exhaustive()
    }
}

impl<T: Real> SdeModel<T> {
    /// `dx = f(x,t) dt + L(t) dβ` with `n` state components.
    pub fn new(
        n: usize,
        drift: impl Fn(&DVector<T>, T) -> DVector<T> + Send + Sync + 'static,
        dispersion: TimeMatrix<T>,
        diffusion: DiffusionSpec<T>,
        initial: impl Fn(&mut ParticleRng) -> DVector<T> + Send + Sync + 'static,
    ) -> Result<Self> {
        Self::build(0, None, n, Arc::new(drift), dispersion, diffusion, Arc::new(initial))
    }

    /// Singular model: `n_det` deterministic components followed by `n_stoch`
    /// noise-driven ones. Both fields receive the full joint state.
    pub fn split(
        n_det: usize,
        det_field: impl Fn(&DVector<T>, T) -> DVector<T> + Send + Sync + 'static,
        n_stoch: usize,
        drift: impl Fn(&DVector<T>, T) -> DVector<T> + Send + Sync + 'static,
        dispersion: TimeMatrix<T>,
        diffusion: DiffusionSpec<T>,
        initial: impl Fn(&mut ParticleRng) -> DVector<T> + Send + Sync + 'static,
    ) -> Result<Self> {
        Self::build(
            n_det,
            Some(Arc::new(det_field)),
            n_stoch,
            Arc::new(drift),
            dispersion,
            diffusion,
            Arc::new(initial),
        )
    }

    fn build(
        n_det: usize,
        det_field: Option<VectorField<T>>,
        n_stoch: usize,
        drift: VectorField<T>,
        dispersion: TimeMatrix<T>,
        diffusion: DiffusionSpec<T>,
        initial: InitialSampler<T>,
    ) -> Result<Self> {
        if n_stoch == 0 {
            return Err(Error::Dimension("model needs at least one noise-driven component".into()));
        }
        if let TimeMatrix::Constant(l) = &dispersion {
            if l.nrows() != n_stoch || l.ncols() != diffusion.dim() {
                return Err(Error::Dimension(format!(
                    "dispersion is {}x{}, expected {}x{}",
                    l.nrows(),
                    l.ncols(),
                    n_stoch,
                    diffusion.dim()
                )));
            }
        }
        Ok(Self {
            n_det,
            n_stoch,
            det_field,
            drift,
            dispersion,
            diffusion,
            initial,
            jacobian: None,
            projection: None,
        })
    }

    /// Jacobian of the full drift `(f₁, f₂)` with respect to the full state,
    /// used by EKF-based proposals.
    pub fn with_jacobian(mut self, j: impl Fn(&DVector<T>, T) -> DMatrix<T> + Send + Sync + 'static) -> Self {
        self.jacobian = Some(Arc::new(j));
        self
    }

    /// Constraint applied to the state after every integration step.
    pub fn with_projection(mut self, p: impl Fn(&mut DVector<T>) + Send + Sync + 'static) -> Self {
        self.projection = Some(Arc::new(p));
        self
    }

    pub fn with_initial(mut self, initial: impl Fn(&mut ParticleRng) -> DVector<T> + Send + Sync + 'static) -> Self {
        self.initial = Arc::new(initial);
        self
    }

    pub fn dim_state(&self) -> usize {
        self.n_det + self.n_stoch
    }

    pub fn dim_det(&self) -> usize {
        self.n_det
    }

    pub fn dim_stoch(&self) -> usize {
        self.n_stoch
    }

    pub fn dim_noise(&self) -> usize {
        self.diffusion.dim()
    }

    pub fn is_singular(&self) -> bool {
        self.n_det > 0
    }

    pub fn stoch_range(&self) -> Range<usize> {
        self.n_det..self.n_det + self.n_stoch
    }

    pub fn dispersion(&self) -> &TimeMatrix<T> {
        &self.dispersion
    }

    pub fn diffusion(&self) -> &DiffusionSpec<T> {
        &self.diffusion
    }

    pub fn drift(&self, x: &DVector<T>, t: T) -> DVector<T> {
        (self.drift)(x, t)
    }

    pub fn drift_field(&self) -> &VectorField<T> {
        &self.drift
    }

    pub fn det_field(&self, x: &DVector<T>, t: T) -> DVector<T> {
        match &self.det_field {
            Some(f) => f(x, t),
            None => DVector::zeros(0),
        }
    }

    pub fn jacobian(&self) -> Option<&MatrixField<T>> {
        self.jacobian.as_ref()
    }

    /// `(f₁(x,t), f₂(x,t))`.
    pub fn full_drift(&self, x: &DVector<T>, t: T) -> DVector<T> {
        let mut out = DVector::zeros(self.dim_state());
        if self.n_det > 0 {
            out.rows_mut(0, self.n_det).copy_from(&self.det_field(x, t));
        }
        out.rows_mut(self.n_det, self.n_stoch).copy_from(&self.drift(x, t));
        out
    }

    /// `L Q Lᵀ` embedded in the full state (zero on the deterministic block).
    pub fn full_process_noise(&self, t: T) -> DMatrix<T> {
        let l = self.dispersion.at(t);
        let lql = l.as_ref() * self.diffusion.matrix_at(t).as_ref() * l.transpose();
        let n = self.dim_state();
        let mut out = DMatrix::zeros(n, n);
        out.view_mut((self.n_det, self.n_det), (self.n_stoch, self.n_stoch)).copy_from(&lql);
        out
    }

    pub fn sample_initial(&self, rng: &mut ParticleRng) -> DVector<T> {
        (self.initial)(rng)
    }

    pub fn project(&self, x: &mut DVector<T>) {
        if let Some(p) = &self.projection {
            p(x);
        }
    }
}

/// Euler–Maruyama path of `model` driven by `increments` (both grid ends included).
pub fn integrate_sde<T: Real>(
    model: &SdeModel<T>,
    x0: &DVector<T>,
    grid: &TimeGrid<T>,
    increments: &BrownianIncrements<T>,
) -> Result<Vec<DVector<T>>> {
    if increments.len() != grid.n_steps() {
        return Err(Error::Dimension(format!(
            "{} increments for a grid of {} steps",
            increments.len(),
            grid.n_steps()
        )));
    }
    if x0.len() != model.dim_state() {
        return Err(Error::Dimension(format!(
            "initial state has {} components, model has {}",
            x0.len(),
            model.dim_state()
        )));
    }
    let dt = grid.dt();
    let n = model.dim_state();
    let nd = model.dim_det();
    let mut path = Vec::with_capacity(grid.n_steps() + 1);
    path.push(x0.clone());
    for (j, db) in increments.iter().enumerate() {
        let t = grid.time(j);
        let x = &path[j];
        let l = model.dispersion().at(t);
        // The deterministic block has a zero dispersion row.
        let mut full_l = DMatrix::zeros(n, l.ncols());
        full_l.view_mut((nd, 0), (model.dim_stoch(), l.ncols())).copy_from(l.as_ref());
        let mut next = em_step(x, &|x, t| model.full_drift(x, t), &full_l, t, dt, db, j)?;
        model.project(&mut next);
        path.push(next);
    }
    Ok(path)
}
