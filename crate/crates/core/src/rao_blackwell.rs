//! Rao-Blackwellised filtering.
//!
//! Two variants: a conditionally Gaussian linear block carried as a mean and
//! covariance per particle and updated by a Kalman step, and a static
//! parameter with a conjugate prior carried as sufficient statistics.

use std::fmt::Debug;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::girsanov::propagate_coupled_with;
use crate::particle_filter::{
    filter_step, FilterConfig, Measurement, Particle, ParticleSet, Propagated, ProposalBuilder, StepKernel, Summary,
};
use crate::rng::ParticleRng;
use crate::sde_core::{sample_brownian_increments, DiffusionSpec, MatrixField, SdeModel, TimeGrid, VectorField};
use crate::special::{ln_gamma, mvn_log_pdf, student_t_log_pdf};
use crate::{Error, Real, Result};

/// Mean and covariance of a Gaussian sub-state.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianBlock<T: Real> {
    pub m: DVector<T>,
    pub p: DMatrix<T>,
}

impl<T: Real> GaussianBlock<T> {
    pub fn new(m: DVector<T>, p: DMatrix<T>) -> Result<Self> {
        if p.nrows() != m.len() || p.ncols() != m.len() {
            return Err(Error::Dimension(format!(
                "mean has {} components but covariance is {}x{}",
                m.len(),
                p.nrows(),
                p.ncols()
            )));
        }
        let block = Self { m, p };
        block.check(T::lit(1e-10))?;
        Ok(block)
    }

    /// Dirac start: zero covariance.
    pub fn point(m: DVector<T>) -> Self {
        let n = m.len();
        Self { m, p: DMatrix::zeros(n, n) }
    }

    pub fn dim(&self) -> usize {
        self.m.len()
    }

    /// Symmetric within `tol` and no eigenvalue below `−tol`.
    pub fn check(&self, tol: T) -> Result<()> {
        let asym = (&self.p - self.p.transpose()).amax();
        if asym > tol {
            return Err(Error::InvalidParameter(format!(
                "covariance asymmetric by {}",
                asym.to_f64_lossy()
            )));
        }
        if self.dim() > 0 {
            let min = self.p.clone().symmetric_eigenvalues().min();
            if min < -tol {
                return Err(Error::InvalidParameter(format!(
                    "covariance has negative eigenvalue {}",
                    min.to_f64_lossy()
                )));
            }
        }
        Ok(())
    }
}

/// `(P + Pᵀ)/2`, then eigenvalues clamped at zero if any is negative; a
/// successful Cholesky factorisation certifies positive definiteness.
pub(crate) fn stabilize_covariance<T: Real>(p: &mut DMatrix<T>) {
    let half = T::lit(0.5);
    let n = p.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let avg = (p[(i, j)] + p[(j, i)]) * half;
            p[(i, j)] = avg;
            p[(j, i)] = avg;
        }
    }
    if n == 0 || p.clone().cholesky().is_some() {
        return;
    }
    let eig = p.clone().symmetric_eigen();
    if eig.eigenvalues.iter().any(|&l| l < T::zero()) {
        let clamped = eig.eigenvalues.map(|l| l.max(T::zero()));
        let v = &eig.eigenvectors;
        let rebuilt = v * DMatrix::from_diagonal(&clamped) * v.transpose();
        *p = (&rebuilt + rebuilt.transpose()) * half;
    }
}

/// One Euler step of `dP/dt = F P + P Fᵀ + W` for symmetric `P`.
pub(crate) fn covariance_euler_step<T: Real>(p: &DMatrix<T>, f: &DMatrix<T>, w: &DMatrix<T>, dt: T) -> DMatrix<T> {
    let fp = f * p;
    let mut next = w * dt;
    next += p;
    for i in 0..next.nrows() {
        for j in 0..next.ncols() {
            next[(i, j)] += (fp[(i, j)] + fp[(j, i)]) * dt;
        }
    }
    stabilize_covariance(&mut next);
    next
}

fn finite_or_error<T: Real>(block: &GaussianBlock<T>, what: &'static str, t: T) -> Result<()> {
    if block.m.iter().chain(block.p.iter()).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            what,
            t: t.to_f64_lossy(),
            step: 0,
            state: block.m.iter().map(|v| v.to_f64_lossy()).collect(),
        });
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
/// Euler step of `dm/dt = F m + f₁`, `dP/dt = F P + P Fᵀ + V Q_η Vᵀ`.
pub fn propagate_gaussian_block<T: Real>(
    block: &GaussianBlock<T>,
    f: &DMatrix<T>,
    f1: &DVector<T>,
    v: &DMatrix<T>,
    q_eta: &DMatrix<T>,
    t: T,
    dt: T,
) -> Result<GaussianBlock<T>> {
    if !(dt > T::zero()) {
        return Err(Error::InvalidGrid("time step must be positive".into()));
    }
    let p = block.dim();
    if f.shape() != (p, p) || f1.len() != p || v.nrows() != p || q_eta.shape() != (v.ncols(), v.ncols()) {
        return Err(Error::Dimension(format!(
            "block of dimension {p} with F {:?}, f₁ {}, V {:?}, Q_η {:?}",
            f.shape(),
            f1.len(),
            v.shape(),
            q_eta.shape()
        )));
    }
    let m = &block.m + (f * &block.m + f1) * dt;
    let w = v * q_eta * v.transpose();
    let out = GaussianBlock {
        m,
        p: covariance_euler_step(&block.p, f, &w, dt),
    };
    finite_or_error(&out, "Gaussian block", t)?;
    Ok(out)
}

/// Result of a Kalman update: posterior block and the innovation moments.
#[derive(Debug, Clone, PartialEq)]
pub struct KalmanUpdate<T: Real> {
    pub block: GaussianBlock<T>,
    pub mu: DVector<T>,
    pub s: DMatrix<T>,
}

impl<T: Real> KalmanUpdate<T> {
    /// `log N(y | μ, S)`.
    pub fn log_likelihood(&self, y: &DVector<T>) -> Result<T> {
        mvn_log_pdf(y, &self.mu, &self.s)
    }
}

/// `μ = H m⁻`, `S = H P⁻ Hᵀ + R`, `K = P⁻ Hᵀ S⁻¹`, `m = m⁻ + K (y − μ)`,
/// `P = P⁻ − K S Kᵀ`.
pub fn kalman_update<T: Real>(block: &GaussianBlock<T>, h: &DMatrix<T>, r: &DMatrix<T>, y: &DVector<T>) -> Result<KalmanUpdate<T>> {
    let p = block.dim();
    let dy = y.len();
    if h.shape() != (dy, p) || r.shape() != (dy, dy) {
        return Err(Error::Dimension(format!(
            "y has {dy} components, block {p}, H {:?}, R {:?}",
            h.shape(),
            r.shape()
        )));
    }
    let mu = h * &block.m;
    let hp = h * &block.p;
    let mut s = &hp * h.transpose() + r;
    s = (&s + s.transpose()) * T::lit(0.5);
    let chol = s.clone().cholesky().ok_or(Error::SingularMatrix {
        name: "S",
        t: f64::NAN,
        cond: f64::INFINITY,
    })?;
    // Kᵀ = S⁻¹ H P (P symmetric).
    let k = chol.solve(&hp).transpose();
    let m = &block.m + &k * (y - &mu);
    let mut pp = &block.p - &k * &s * k.transpose();
    stabilize_covariance(&mut pp);
    let out = GaussianBlock { m, p: pp };
    finite_or_error(&out, "Kalman update", T::zero())?;
    Ok(KalmanUpdate { block: out, mu, s })
}

/// Model with a linear block `x₁` and a sampled part `(x₂, x₃)`:
///
/// ```text
/// dx₁ = (F(x₂,x₃,t) x₁ + f₁(x₂,x₃,t)) dt + V(x₂,x₃,t) dη,   η ~ Q_η
/// (x₂, x₃) follows `sampled`,                               β ~ Q_β
/// y_k = H(x₂,x₃) x₁(t_k) + r_k,   r_k ~ N(0, R(x₂,x₃))
/// ```
#[derive(Clone)]
pub struct CondGaussModel<T: Real> {
    pub sampled: SdeModel<T>,
    pub f: MatrixField<T>,
    pub f1: VectorField<T>,
    pub v: MatrixField<T>,
    pub q_eta: DiffusionSpec<T>,
    pub h: MatrixField<T>,
    pub r: MatrixField<T>,
}

impl<T: Real> CondGaussModel<T> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        sampled: SdeModel<T>,
        f: impl Fn(&DVector<T>, T) -> DMatrix<T> + Send + Sync + 'static,
        f1: impl Fn(&DVector<T>, T) -> DVector<T> + Send + Sync + 'static,
        v: impl Fn(&DVector<T>, T) -> DMatrix<T> + Send + Sync + 'static,
        q_eta: DiffusionSpec<T>,
        h: impl Fn(&DVector<T>, T) -> DMatrix<T> + Send + Sync + 'static,
        r: impl Fn(&DVector<T>, T) -> DMatrix<T> + Send + Sync + 'static,
    ) -> Self {
        Self {
            sampled,
            f: Arc::new(f),
            f1: Arc::new(f1),
            v: Arc::new(v),
            q_eta,
            h: Arc::new(h),
            r: Arc::new(r),
        }
    }
}

/// Kernel co-advancing each particle's Gaussian block along its scaled path.
pub struct CdrbGaussKernel<'a, T: Real, P> {
    pub model: &'a CondGaussModel<T>,
    pub proposal: &'a P,
    pub max_condition: f64,
}

impl<T, P> StepKernel<T, GaussianBlock<T>> for CdrbGaussKernel<'_, T, P>
where
    T: Real,
    P: ProposalBuilder<T, GaussianBlock<T>>,
{
    fn propagate(
        &self,
        particle: &Particle<T, GaussianBlock<T>>,
        grid: &TimeGrid<T>,
        y: &DVector<T>,
        rng: &mut ParticleRng,
    ) -> Result<Propagated<T, GaussianBlock<T>>> {
        let model = self.model;
        let imp = self.proposal.build(particle, grid, y)?;
        let incs = sample_brownian_increments(grid, model.sampled.diffusion(), rng)?;
        let mut block = particle.aux.clone();
        let path = propagate_coupled_with(
            &model.sampled,
            &imp,
            &particle.state,
            grid,
            &incs,
            self.max_condition,
            &mut |_, t, dt, s_star| {
                let q = model.q_eta.matrix_at(t);
                block = propagate_gaussian_block(
                    &block,
                    &(model.f)(s_star, t),
                    &(model.f1)(s_star, t),
                    &(model.v)(s_star, t),
                    &q,
                    t,
                    dt,
                )?;
                Ok(())
            },
        )?;
        let tk = grid.t1();
        let update = kalman_update(&block, &(model.h)(&path.s_star, tk), &(model.r)(&path.s_star, tk), y)?;
        let llr = path.llr.value();
        let ll = update.log_likelihood(y)?;
        Ok(Propagated {
            log_increment: llr + ll,
            llr,
            state: path.s_star,
            aux: update.block,
        })
    }
}

/// One step of the conditionally Gaussian Rao-Blackwellised recursion.
pub fn cdrb_sir_step<T, P>(
    set: &mut ParticleSet<T, GaussianBlock<T>>,
    model: &CondGaussModel<T>,
    proposal: &P,
    measurement: &Measurement<T>,
    config: &FilterConfig,
) -> Result<Summary<T>>
where
    T: Real,
    P: ProposalBuilder<T, GaussianBlock<T>>,
{
    let kernel = CdrbGaussKernel {
        model,
        proposal,
        max_condition: config.max_condition,
    };
    filter_step(set, &kernel, measurement, config)
}

/// `Σ wᵢ N(x₁ | mᵢ, Pᵢ)`.
pub fn eval_mixture<T: Real>(set: &ParticleSet<T, GaussianBlock<T>>, x1: &DVector<T>) -> T {
    if x1.iter().any(|v| !v.is_finite()) {
        return T::zero();
    }
    set.particles().iter().fold(T::zero(), |acc, p| {
        let lp = mvn_log_pdf(x1, &p.aux.m, &p.aux.p).unwrap_or_else(|_| T::neg_infinity());
        acc + (p.log_weight + lp).exp()
    })
}

/// Weighted posterior mean of the linear block, `Σ wᵢ mᵢ`.
pub fn mixture_mean<T: Real>(set: &ParticleSet<T, GaussianBlock<T>>) -> DVector<T> {
    let dim = set.particles()[0].aux.dim();
    set.particles().iter().fold(DVector::zeros(dim), |acc, p| acc + &p.aux.m * p.log_weight.exp())
}

/// Conjugate prior for a static parameter: `T_k = Φ(T_{k−1}, x_{k−1}, x_k, y_k)`
/// and the parameter-marginalised likelihood `p(y_k | x, T)`.
pub trait ConjugateFamily<T: Real>: Sync {
    type Stats: Clone + Debug + Send + Sync;

    fn prior(&self) -> Self::Stats;

    fn update(&self, stats: &Self::Stats, x_prev: &DVector<T>, x: &DVector<T>, y: &DVector<T>) -> Result<Self::Stats>;

    fn marginal_log_likelihood(&self, y: &DVector<T>, x_prev: &DVector<T>, x: &DVector<T>, stats: &Self::Stats) -> T;
}

/// Scaled inverse chi-squared statistics `(ν, s²)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InvChi2Stats<T> {
    pub nu: T,
    pub s2: T,
}

impl<T: Real> InvChi2Stats<T> {
    pub fn new(nu: T, s2: T) -> Result<Self> {
        if !(nu > T::zero() && s2 > T::zero()) || !nu.is_finite() || !s2.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "Inv-χ² needs ν > 0 and s² > 0, got ({}, {})",
                nu.to_f64_lossy(),
                s2.to_f64_lossy()
            )));
        }
        Ok(Self { nu, s2 })
    }

    /// Posterior after observing one Gaussian residual.
    pub fn update(&self, residual: T) -> Result<Self> {
        let nu = self.nu + T::one();
        Self::new(nu, (self.nu * self.s2 + residual * residual) / nu)
    }

    /// Student-t with `ν` degrees of freedom and scale² `s²`.
    pub fn log_marginal(&self, residual: T) -> T {
        student_t_log_pdf(residual, self.nu, T::zero(), self.s2)
    }

    /// `E[σ²] = ν s² / (ν − 2)` when `ν > 2`, otherwise `s²`.
    pub fn posterior_mean(&self) -> T {
        let two = T::lit(2.0);
        if self.nu > two {
            self.nu * self.s2 / (self.nu - two)
        } else {
            self.s2
        }
    }
}

/// Unknown measurement variance: `y ~ N(x[component], σ²)`, `σ² ~ Inv-χ²(ν₀, s₀²)`.
#[derive(Debug, Clone, Copy)]
pub struct InvChi2Family<T> {
    pub prior: InvChi2Stats<T>,
    pub component: usize,
}

/// Conjugate family for the variance of `y = x[component] + r`.
pub fn invchi2_family<T: Real>(nu0: T, s2_0: T, component: usize) -> Result<InvChi2Family<T>> {
    Ok(InvChi2Family {
        prior: InvChi2Stats::new(nu0, s2_0)?,
        component,
    })
}

impl<T: Real> InvChi2Family<T> {
    fn residual(&self, y: &DVector<T>, x: &DVector<T>) -> T {
        y[0] - x[self.component]
    }
}

impl<T: Real> ConjugateFamily<T> for InvChi2Family<T> {
    type Stats = InvChi2Stats<T>;

    fn prior(&self) -> Self::Stats {
        self.prior
    }

    fn update(&self, stats: &Self::Stats, _x_prev: &DVector<T>, x: &DVector<T>, y: &DVector<T>) -> Result<Self::Stats> {
        stats.update(self.residual(y, x))
    }

    fn marginal_log_likelihood(&self, y: &DVector<T>, _x_prev: &DVector<T>, x: &DVector<T>, stats: &Self::Stats) -> T {
        stats.log_marginal(self.residual(y, x))
    }
}

/// Gamma statistics `(α, β)` with rate parametrisation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GammaStats<T> {
    pub alpha: T,
    pub beta: T,
}

impl<T: Real> GammaStats<T> {
    pub fn new(alpha: T, beta: T) -> Result<Self> {
        if !(alpha > T::zero() && beta > T::zero()) || !alpha.is_finite() || !beta.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "Gamma needs α > 0 and β > 0, got ({}, {})",
                alpha.to_f64_lossy(),
                beta.to_f64_lossy()
            )));
        }
        Ok(Self { alpha, beta })
    }

    /// Posterior after a Poisson count `d` with exposure `θ`.
    pub fn update(&self, theta: T, d: T) -> Result<Self> {
        if !(theta > T::zero()) {
            return Err(Error::InvalidParameter(format!(
                "exposure θ must be positive, got {}",
                theta.to_f64_lossy()
            )));
        }
        Self::new(self.alpha + d, self.beta + theta)
    }

    /// Negative binomial: `∫ Poisson(d | Nθ) Gamma(N | α, β) dN`.
    pub fn log_marginal(&self, theta: T, d: T) -> T {
        let (a, b) = (self.alpha, self.beta);
        let bt = b + theta;
        let mut out = ln_gamma(a + d) - ln_gamma(a) - ln_gamma(d + T::one()) + a * (b / bt).ln();
        if d > T::zero() {
            out += d * (theta / bt).ln();
        }
        out
    }

    pub fn mean(&self) -> T {
        self.alpha / self.beta
    }
}

/// Exposure `θ_k` computed from the states at both ends of the interval.
pub type ExposureFn<T> = Arc<dyn Fn(&DVector<T>, &DVector<T>) -> T + Send + Sync>;

/// Poisson counts `d_k ~ Poisson(N θ_k)` with `N ~ Gamma(α₀, β₀)`.
#[derive(Clone)]
pub struct GammaPoissonFamily<T: Real> {
    pub prior: GammaStats<T>,
    pub exposure: ExposureFn<T>,
}

impl<T: Real> Debug for GammaPoissonFamily<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("GammaPoissonFamily").field("prior", &self.prior).finish_non_exhaustive()
    }
}

/// Conjugate family for an unknown Poisson scale with exposure `θ(x_prev, x)`.
pub fn gamma_poisson_family<T: Real>(
    alpha0: T,
    beta0: T,
    exposure: impl Fn(&DVector<T>, &DVector<T>) -> T + Send + Sync + 'static,
) -> Result<GammaPoissonFamily<T>> {
    Ok(GammaPoissonFamily {
        prior: GammaStats::new(alpha0, beta0)?,
        exposure: Arc::new(exposure),
    })
}

impl<T: Real> ConjugateFamily<T> for GammaPoissonFamily<T> {
    type Stats = GammaStats<T>;

    fn prior(&self) -> Self::Stats {
        self.prior
    }

    fn update(&self, stats: &Self::Stats, x_prev: &DVector<T>, x: &DVector<T>, y: &DVector<T>) -> Result<Self::Stats> {
        stats.update((self.exposure)(x_prev, x), y[0])
    }

    fn marginal_log_likelihood(&self, y: &DVector<T>, x_prev: &DVector<T>, x: &DVector<T>, stats: &Self::Stats) -> T {
        let theta = (self.exposure)(x_prev, x);
        if !(theta > T::zero()) {
            return T::neg_infinity();
        }
        stats.log_marginal(theta, y[0])
    }
}

/// Kernel for static parameters with a conjugate prior. The weight uses the
/// statistic from before the update.
pub struct CdrbParamKernel<'a, T: Real, P, F> {
    pub model: &'a SdeModel<T>,
    pub proposal: &'a P,
    pub family: &'a F,
    pub max_condition: f64,
}

impl<T, P, F> StepKernel<T, F::Stats> for CdrbParamKernel<'_, T, P, F>
where
    T: Real,
    F: ConjugateFamily<T>,
    P: ProposalBuilder<T, F::Stats>,
{
    fn propagate(
        &self,
        particle: &Particle<T, F::Stats>,
        grid: &TimeGrid<T>,
        y: &DVector<T>,
        rng: &mut ParticleRng,
    ) -> Result<Propagated<T, F::Stats>> {
        let imp = self.proposal.build(particle, grid, y)?;
        let incs = sample_brownian_increments(grid, self.model.diffusion(), rng)?;
        let path = propagate_coupled_with(
            self.model,
            &imp,
            &particle.state,
            grid,
            &incs,
            self.max_condition,
            &mut |_, _, _, _| Ok(()),
        )?;
        let llr = path.llr.value();
        let ll = self
            .family
            .marginal_log_likelihood(y, &particle.state, &path.s_star, &particle.aux);
        let aux = self.family.update(&particle.aux, &particle.state, &path.s_star, y)?;
        Ok(Propagated {
            log_increment: llr + ll,
            llr,
            state: path.s_star,
            aux,
        })
    }
}

/// One step of the recursion with a conjugate static parameter.
pub fn cdrb_param_step<T, P, F>(
    set: &mut ParticleSet<T, F::Stats>,
    model: &SdeModel<T>,
    proposal: &P,
    family: &F,
    measurement: &Measurement<T>,
    config: &FilterConfig,
) -> Result<Summary<T>>
where
    T: Real,
    F: ConjugateFamily<T>,
    P: ProposalBuilder<T, F::Stats>,
{
    let kernel = CdrbParamKernel {
        model,
        proposal,
        family,
        max_condition: config.max_condition,
    };
    filter_step(set, &kernel, measurement, config)
}
