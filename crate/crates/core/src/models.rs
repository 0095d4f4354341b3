//! Concrete models: the noisy pendulum, the stochastic SIR epidemic, and
//! linear test models with exact Kalman solutions.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Beta, Distribution, Gamma, Poisson};
use rayon::prelude::*;

use crate::importance_builder::{EkfBridgeProposal, LinearizedMeasurement};
use crate::particle_filter::{systematic_indices, Measurement, ParticleSet};
use crate::rao_blackwell::{CondGaussModel, GammaStats, InvChi2Stats};
use crate::rng::{standard_normal, ParticleRng, Purpose, StreamFactory};
use crate::sde_core::{integrate_sde, sample_brownian_increments, DiffusionSpec, SdeModel, TimeGrid, TimeMatrix};
use crate::{Error, Real, Result};

/// Lower bound on the per-interval exposure `θ_k`.
pub const THETA_FLOOR: f64 = 1e-12;
/// Bound on `|λ|` keeping `exp(λ)` finite.
pub const LAMBDA_BOUND: f64 = 20.0;

fn positive<T: Real>(name: &str, v: T) -> Result<()> {
    if v > T::zero() && v.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidParameter(format!("{name} must be positive and finite, got {}", v.to_f64_lossy())))
    }
}

/// Sampler for `N(mean, cov)`; `cov` may be singular.
pub fn gaussian_sampler<T: Real>(
    mean: DVector<T>,
    cov: DMatrix<T>,
) -> Result<impl Fn(&mut ParticleRng) -> DVector<T> + Send + Sync + 'static> {
    if cov.shape() != (mean.len(), mean.len()) {
        return Err(Error::Dimension(format!(
            "mean has {} components, covariance is {:?}",
            mean.len(),
            cov.shape()
        )));
    }
    let eig = ((&cov + cov.transpose()) * T::lit(0.5)).symmetric_eigen();
    if eig.eigenvalues.iter().any(|&l| l < -T::lit(1e-12) * cov.amax()) {
        return Err(Error::InvalidParameter("initial covariance must be positive semidefinite".into()));
    }
    let sqrt = &eig.eigenvectors * DMatrix::from_diagonal(&eig.eigenvalues.map(|l| l.max(T::zero()).sqrt()));
    Ok(move |rng: &mut ParticleRng| {
        let z = DVector::from_fn(mean.len(), |_, _| standard_normal::<T, _>(rng));
        &mean + &sqrt * z
    })
}

/// `dx₁/dt = x₂`, `dx₂ = −a² sin(x₁) dt + dβ`, `E[dβ²] = q dt`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PendulumModel<T> {
    pub a: T,
    pub q: T,
}

impl<T: Real> PendulumModel<T> {
    pub fn new(a: T, q: T) -> Result<Self> {
        positive("a", a)?;
        positive("q", q)?;
        Ok(Self { a, q })
    }

    /// Split form with drift Jacobian; the initial state defaults to zero.
    pub fn sde(&self) -> SdeModel<T> {
        let a2 = self.a * self.a;
        SdeModel::split(
            1,
            |x: &DVector<T>, _t| DVector::from_element(1, x[1]),
            1,
            move |x: &DVector<T>, _t| DVector::from_element(1, -a2 * x[0].sin()),
            TimeMatrix::scalar(T::one()),
            DiffusionSpec::scalar(self.q).expect("q validated positive"),
            |_| DVector::zeros(2),
        )
        .expect("pendulum dimensions are consistent")
        .with_jacobian(move |x: &DVector<T>, _t| {
            DMatrix::from_row_slice(2, 2, &[T::zero(), T::one(), -a2 * x[0].cos(), T::zero()])
        })
    }

    /// `½ x₂² + a² (1 − cos x₁)`.
    pub fn energy(&self, x: &DVector<T>) -> T {
        T::lit(0.5) * x[1] * x[1] + self.a * self.a * (T::one() - x[0].cos())
    }
}

/// The pendulum in the split form used by the singular recursion.
pub fn pendulum_model<T: Real>(a: T, q: T) -> Result<SdeModel<T>> {
    Ok(PendulumModel::new(a, q)?.sde())
}

/// States at the measurement times (first entry is the start) and the
/// generated measurements.
#[derive(Debug, Clone, PartialEq)]
pub struct SimulatedData<T: Real> {
    pub truth: Vec<(T, DVector<T>)>,
    pub measurements: Vec<Measurement<T>>,
}

#[allow(clippy::too_many_arguments)]
/// Fine-grid Euler simulation with `y_k ~ N(x₁(t_k), σ²)`.
pub fn pendulum_simulate<T: Real>(
    model: &PendulumModel<T>,
    x0: &DVector<T>,
    dt_meas: T,
    n_meas: usize,
    sigma2: T,
    substeps: usize,
    seed: u64,
) -> Result<SimulatedData<T>> {
    positive("σ²", sigma2)?;
    let sde = model.sde();
    let h = DMatrix::from_row_slice(1, 2, &[T::one(), T::zero()]);
    simulate_linear_gaussian(&sde, x0, dt_meas, n_meas, &h, &DMatrix::from_element(1, 1, sigma2), substeps, seed)
}

#[allow(clippy::too_many_arguments)]
/// Euler simulation of any model with `y_k ~ N(H x(t_k), R)`.
pub fn simulate_linear_gaussian<T: Real>(
    sde: &SdeModel<T>,
    x0: &DVector<T>,
    dt_meas: T,
    n_meas: usize,
    h: &DMatrix<T>,
    r: &DMatrix<T>,
    substeps: usize,
    seed: u64,
) -> Result<SimulatedData<T>> {
    positive("measurement interval", dt_meas)?;
    let chol = r
        .clone()
        .cholesky()
        .ok_or(Error::InvalidParameter("measurement covariance must be positive definite".into()))?;
    let streams = StreamFactory::new(seed);
    let mut truth = vec![(T::zero(), x0.clone())];
    let mut measurements = Vec::with_capacity(n_meas);
    let mut x = x0.clone();
    for k in 1..=n_meas {
        let t0 = dt_meas * T::from_usize_exact(k - 1);
        let t1 = dt_meas * T::from_usize_exact(k);
        let grid = TimeGrid::new(t0, t1, substeps)?;
        let mut rng = streams.stream(Purpose::Simulate, 0, k as u64);
        let incs = sample_brownian_increments(&grid, sde.diffusion(), &mut rng)?;
        x = integrate_sde(sde, &x, &grid, &incs)?.pop().expect("non-empty path");
        let mut mrng = streams.stream(Purpose::Measurement, 0, k as u64);
        let z = DVector::from_fn(h.nrows(), |_, _| standard_normal::<T, _>(&mut mrng));
        measurements.push(Measurement::new(t1, h * &x + chol.l() * z));
        truth.push((t1, x.clone()));
    }
    Ok(SimulatedData { truth, measurements })
}

/// EKF bridge for the pendulum whose measurement variance is conditioned on
/// each particle's current posterior mean of `σ²`.
pub fn pendulum_proposal<T: Real>(model: &PendulumModel<T>) -> Result<EkfBridgeProposal<T, InvChi2Stats<T>>> {
    EkfBridgeProposal::new(model.sde(), |_x_prev, stats: &InvChi2Stats<T>, _pred, y: &DVector<T>| {
        Ok(LinearizedMeasurement {
            h: DMatrix::from_row_slice(1, 2, &[T::one(), T::zero()]),
            r: DMatrix::from_element(1, 1, stats.posterior_mean()),
            y: y.clone(),
        })
    })
}

/// Same bridge with a known measurement variance.
pub fn pendulum_proposal_known<T: Real>(model: &PendulumModel<T>, sigma2: T) -> Result<EkfBridgeProposal<T, ()>> {
    positive("σ²", sigma2)?;
    EkfBridgeProposal::new(model.sde(), move |_x_prev, _aux: &(), _pred, y: &DVector<T>| {
        Ok(LinearizedMeasurement {
            h: DMatrix::from_row_slice(1, 2, &[T::one(), T::zero()]),
            r: DMatrix::from_element(1, 1, sigma2),
            y: y.clone(),
        })
    })
}

/// Initial distribution of the epidemic: `y(0) ~ Beta(a, b)`, `x(0) = 1 − y(0)`,
/// `λ(0) ~ N(mean, var)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpidemicPrior {
    pub y0_alpha: f64,
    pub y0_beta: f64,
    pub lambda_mean: f64,
    pub lambda_var: f64,
}

impl Default for EpidemicPrior {
    fn default() -> Self {
        Self {
            y0_alpha: 1.0,
            y0_beta: 100.0,
            lambda_mean: 5.0_f64.ln(),
            lambda_var: 4.0,
        }
    }
}

impl EpidemicPrior {
    pub fn validate(&self) -> Result<()> {
        positive("y0_alpha", self.y0_alpha)?;
        positive("y0_beta", self.y0_beta)?;
        if !self.lambda_mean.is_finite() {
            return Err(Error::InvalidParameter("lambda_mean must be finite".into()));
        }
        if !(self.lambda_var >= 0.0 && self.lambda_var.is_finite()) {
            return Err(Error::InvalidParameter("lambda_var must be nonnegative".into()));
        }
        Ok(())
    }
}

/// Proportions `(x, y)` of susceptibles and infectives with log contact
/// number `λ`:
///
/// ```text
/// dx/dt = −g e^λ y x,   dy/dt = g e^λ y x − g y,   dλ = q^{1/2} dβ
/// ```
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpidemicModel<T> {
    pub g: T,
    pub q: T,
    pub prior: EpidemicPrior,
}

impl<T: Real> EpidemicModel<T> {
    pub fn new(g: T, q: T) -> Result<Self> {
        positive("g", g)?;
        positive("q", q)?;
        Ok(Self {
            g,
            q,
            prior: EpidemicPrior::default(),
        })
    }

    /// Constant contact number (`q = 0`); usable for simulation only.
    pub fn constant_contact(g: T) -> Result<Self> {
        positive("g", g)?;
        Ok(Self {
            g,
            q: T::zero(),
            prior: EpidemicPrior::default(),
        })
    }

    pub fn with_prior(mut self, prior: EpidemicPrior) -> Result<Self> {
        prior.validate()?;
        self.prior = prior;
        Ok(self)
    }

    pub fn drift_xy(&self, s: &DVector<T>) -> (T, T) {
        let infect = self.g * s[2].exp() * s[1] * s[0];
        (-infect, infect - self.g * s[1])
    }

    pub fn sde(&self) -> SdeModel<T> {
        let me = *self;
        let g = self.g;
        let prior = self.prior;
        let bound = T::lit(LAMBDA_BOUND);
        SdeModel::split(
            2,
            move |s: &DVector<T>, _t| {
                let (dx, dy) = me.drift_xy(s);
                DVector::from_column_slice(&[dx, dy])
            },
            1,
            |_s: &DVector<T>, _t| DVector::zeros(1),
            TimeMatrix::scalar(self.q.sqrt()),
            DiffusionSpec::scalar(T::one()).expect("unit diffusion"),
            move |rng: &mut ParticleRng| {
                let beta = Beta::new(prior.y0_alpha, prior.y0_beta).expect("prior validated");
                let y0: f64 = beta.sample(rng);
                let z: f64 = standard_normal(rng);
                let lam = prior.lambda_mean + prior.lambda_var.sqrt() * z;
                DVector::from_column_slice(&[T::lit(1.0 - y0), T::lit(y0), T::lit(lam.clamp(-LAMBDA_BOUND, LAMBDA_BOUND))])
            },
        )
        .expect("epidemic dimensions are consistent")
        .with_jacobian(move |s: &DVector<T>, _t| {
            let sig = s[2].exp();
            let (x, y) = (s[0], s[1]);
            let gs = g * sig;
            DMatrix::from_row_slice(
                3,
                3,
                &[
                    -gs * y,
                    -gs * x,
                    -gs * x * y,
                    gs * y,
                    gs * x - g,
                    gs * x * y,
                    T::zero(),
                    T::zero(),
                    T::zero(),
                ],
            )
        })
        .with_projection(move |s: &mut DVector<T>| {
            s[0] = s[0].max(T::zero()).min(T::one());
            s[1] = s[1].max(T::zero()).min(T::one());
            s[2] = s[2].max(-bound).min(bound);
        })
    }
}

/// The epidemic in the split form used by the singular recursion.
pub fn epidemic_model<T: Real>(g: T, q: T) -> Result<SdeModel<T>> {
    Ok(EpidemicModel::new(g, q)?.sde())
}

/// `x(t_{k−1}) − x(t_k) + y(t_{k−1}) − y(t_k)` without the floor.
pub fn epidemic_theta_raw<T: Real>(prev: &DVector<T>, cur: &DVector<T>) -> T {
    prev[0] - cur[0] + prev[1] - cur[1]
}

/// Exposure `θ_k`, floored at [`THETA_FLOOR`].
pub fn epidemic_theta<T: Real>(prev: &DVector<T>, cur: &DVector<T>) -> T {
    epidemic_theta_raw(prev, cur).max(T::lit(THETA_FLOOR))
}

/// Weekly death counts.
#[derive(Debug, Clone, PartialEq)]
pub struct CountSeries<T> {
    pub times: Vec<T>,
    pub counts: Vec<u64>,
}

impl<T: Real> CountSeries<T> {
    pub fn new(times: Vec<T>, counts: Vec<u64>) -> Result<Self> {
        if times.len() != counts.len() {
            return Err(Error::Dimension("times and counts differ in length".into()));
        }
        if times.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::InvalidGrid("count times must be strictly increasing".into()));
        }
        Ok(Self { times, counts })
    }

    pub fn measurements(&self) -> Vec<Measurement<T>> {
        self.times
            .iter()
            .zip(&self.counts)
            .map(|(&t, &d)| Measurement::scalar(t, T::lit(d as f64)))
            .collect()
    }
}

/// Simulated epidemic: states at the measurement times, exposures and counts.
#[derive(Debug, Clone, PartialEq)]
pub struct EpidemicData<T: Real> {
    pub truth: Vec<(T, DVector<T>)>,
    pub thetas: Vec<T>,
    pub counts: CountSeries<T>,
}

#[allow(clippy::too_many_arguments)]
/// Simulates the epidemic from `init` and draws `d_k ~ Poisson(N θ_k)`.
pub fn epidemic_simulate<T: Real>(
    model: &EpidemicModel<T>,
    init: &DVector<T>,
    n_true: f64,
    dt_meas: T,
    n_meas: usize,
    substeps: usize,
    seed: u64,
) -> Result<EpidemicData<T>> {
    positive("N", n_true)?;
    positive("measurement interval", dt_meas)?;
    let sde = model.sde();
    let streams = StreamFactory::new(seed);
    let mut truth = vec![(T::zero(), init.clone())];
    let mut thetas = Vec::with_capacity(n_meas);
    let mut times = Vec::with_capacity(n_meas);
    let mut counts = Vec::with_capacity(n_meas);
    let mut x = init.clone();
    for k in 1..=n_meas {
        let t0 = dt_meas * T::from_usize_exact(k - 1);
        let t1 = dt_meas * T::from_usize_exact(k);
        let grid = TimeGrid::new(t0, t1, substeps)?;
        let mut rng = streams.stream(Purpose::Simulate, 0, k as u64);
        let incs = sample_brownian_increments(&grid, sde.diffusion(), &mut rng)?;
        let next = integrate_sde(&sde, &x, &grid, &incs)?.pop().expect("non-empty path");
        let theta = epidemic_theta_raw(&x, &next).max(T::zero());
        let rate = n_true * theta.to_f64_lossy();
        let mut mrng = streams.stream(Purpose::Measurement, 0, k as u64);
        let d = if rate > 0.0 {
            Poisson::new(rate)
                .map_err(|e| Error::InvalidParameter(format!("Poisson rate {rate}: {e}")))?
                .sample(&mut mrng) as u64
        } else {
            0
        };
        thetas.push(theta);
        times.push(t1);
        counts.push(d);
        truth.push((t1, next.clone()));
        x = next;
    }
    Ok(EpidemicData {
        truth,
        thetas,
        counts: CountSeries::new(times, counts)?,
    })
}

/// Weighted estimate of `σ(t) x(t) = e^λ x`.
pub fn epidemic_indicator<T: Real, A: Clone>(set: &ParticleSet<T, A>) -> T {
    set.weighted_sum(|p| p.state[2].exp() * p.state[0])
}

/// EKF bridge for the epidemic: `E[d_k] ≈ N̂ θ_k` is linear in the state at
/// `t_k`, with `N̂ = α/β` from the particle's statistics and a negative
/// binomial variance (floored at one) as the measurement noise.
pub fn epidemic_proposal<T: Real>(model: &EpidemicModel<T>) -> Result<EkfBridgeProposal<T, GammaStats<T>>> {
    EkfBridgeProposal::new(
        model.sde(),
        |x_prev: &DVector<T>, stats: &GammaStats<T>, pred, y: &DVector<T>| {
            let n_hat = stats.mean();
            let theta = epidemic_theta(x_prev, &pred.m);
            let mu = n_hat * theta;
            let r = (mu + mu * mu / stats.alpha).max(T::one());
            Ok(LinearizedMeasurement {
                h: DMatrix::from_row_slice(1, 3, &[-n_hat, -n_hat, T::zero()]),
                r: DMatrix::from_element(1, 1, r),
                y: DVector::from_element(1, y[0] - n_hat * (x_prev[0] + x_prev[1])),
            })
        },
    )
}

/// Forecast draws: interval (0-based, counted from the current time) with
/// the largest number of deaths, total deaths `N z` at the horizon and the
/// part of it occurring after the current time.
#[derive(Debug, Clone, PartialEq)]
pub struct EpidemicForecast {
    pub peak_interval: Vec<usize>,
    pub total_deaths: Vec<f64>,
    pub future_deaths: Vec<f64>,
}

#[allow(clippy::too_many_arguments)]
/// Forward simulation of `n_sims` systematically resampled particles over
/// `horizon` measurement intervals; each draw takes `N` from its particle's
/// Gamma posterior.
pub fn epidemic_predict<T: Real>(
    set: &ParticleSet<T, GammaStats<T>>,
    model: &EpidemicModel<T>,
    dt_meas: T,
    horizon: usize,
    substeps: usize,
    n_sims: usize,
    seed: u64,
) -> Result<EpidemicForecast> {
    if n_sims == 0 {
        return Err(Error::InvalidParameter("n_sims must be at least 1".into()));
    }
    let streams = StreamFactory::new(seed);
    let mut pick_rng = streams.stream(Purpose::Forecast, u64::MAX >> 8, 0);
    let weights = set.weights();
    let u0: f64 = pick_rng.random();
    let ancestors = systematic_indices_n(&weights, n_sims, u0);
    let sde = model.sde();
    let t_start = set.time();
    let removed = |s: &DVector<T>| (T::one() - s[0] - s[1]).max(T::zero()).to_f64_lossy();
    let draws: Vec<(usize, f64, f64)> = ancestors
        .par_iter()
        .enumerate()
        .map(|(s, &a)| {
            let p = &set.particles()[a];
            let mut rng = streams.stream(Purpose::Forecast, s as u64, 0);
            let n_pop: f64 = Gamma::new(p.aux.alpha.to_f64_lossy(), 1.0 / p.aux.beta.to_f64_lossy())
                .map_err(|e| Error::InvalidParameter(format!("population posterior: {e}")))?
                .sample(&mut rng);
            let mut x = p.state.clone();
            let mut best = (0usize, T::neg_infinity());
            for j in 0..horizon {
                let t0 = t_start + dt_meas * T::from_usize_exact(j);
                let grid = TimeGrid::new(t0, t0 + dt_meas, substeps)?;
                let incs = sample_brownian_increments(&grid, sde.diffusion(), &mut rng)?;
                let next = integrate_sde(&sde, &x, &grid, &incs)?.pop().expect("non-empty path");
                let theta = epidemic_theta_raw(&x, &next);
                if theta > best.1 {
                    best = (j, theta);
                }
                x = next;
            }
            let z_now = removed(&p.state);
            let z = removed(&x);
            Ok((best.0, n_pop * z, n_pop * (z - z_now).max(0.0)))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EpidemicForecast {
        peak_interval: draws.iter().map(|d| d.0).collect(),
        total_deaths: draws.iter().map(|d| d.1).collect(),
        future_deaths: draws.iter().map(|d| d.2).collect(),
    })
}

/// Systematic selection of `n` indices (possibly different from the number
/// of weights).
fn systematic_indices_n<T: Real>(weights: &[T], n: usize, u0: f64) -> Vec<usize> {
    if n == weights.len() {
        return systematic_indices(weights, u0);
    }
    let total: f64 = weights.iter().map(|w| w.to_f64_lossy()).sum();
    let mut out = Vec::with_capacity(n);
    let mut i = 0;
    let mut next = weights[0].to_f64_lossy() / total;
    for m in 0..n {
        let u = (u0 + m as f64) / n as f64;
        while next <= u && i + 1 < weights.len() {
            i += 1;
            next += weights[i].to_f64_lossy() / total;
        }
        out.push(i);
    }
    out
}

/// `dx = −λ x dt + dβ`, `E[dβ²] = q dt`, `x(0) ~ N(m0, p0)`.
pub fn ou_model<T: Real>(lambda: T, q: T, m0: T, p0: T) -> Result<SdeModel<T>> {
    positive("q", q)?;
    let init = gaussian_sampler(DVector::from_element(1, m0), DMatrix::from_element(1, 1, p0))?;
    SdeModel::new(
        1,
        move |x: &DVector<T>, _t| x * (-lambda),
        TimeMatrix::scalar(T::one()),
        DiffusionSpec::scalar(q)?,
        init,
    )
    .map(|m| m.with_jacobian(move |_x: &DVector<T>, _t| DMatrix::from_element(1, 1, -lambda)))
}

/// `dx₁/dt = x₂`, `dx₂ = −x₂ dt + dβ`, `x(0) ~ N(m0, P0)`.
pub fn integrated_ou_model<T: Real>(q: T, m0: DVector<T>, p0: DMatrix<T>) -> Result<SdeModel<T>> {
    positive("q", q)?;
    let init = gaussian_sampler(m0, p0)?;
    SdeModel::split(
        1,
        |x: &DVector<T>, _t| DVector::from_element(1, x[1]),
        1,
        |x: &DVector<T>, _t| DVector::from_element(1, -x[1]),
        TimeMatrix::scalar(T::one()),
        DiffusionSpec::scalar(q)?,
        init,
    )
    .map(|m| {
        m.with_jacobian(|_x: &DVector<T>, _t| {
            DMatrix::from_row_slice(2, 2, &[T::zero(), T::one(), T::zero(), -T::one()])
        })
    })
}

/// Conditionally Gaussian test model with a linear block `x₁` driven by a
/// sampled OU state `x₃`:
///
/// ```text
/// dx₁ = (−x₁ + x₃) dt + dη,   dx₃ = −x₃ dt + dβ,   y_k = x₁(t_k) + r_k
/// ```
///
/// Returns the Rao-Blackwellised form (particles carry `x₃`, blocks carry
/// `x₁`) and the augmented model on `(x₁, x₃)`. Both start from `N(0, p0 I)`.
pub fn cond_gauss_test_model<T: Real>(q_eta: T, q_beta: T, r: T, p0: T) -> Result<(CondGaussModel<T>, SdeModel<T>)> {
    positive("q_eta", q_eta)?;
    positive("q_beta", q_beta)?;
    positive("r", r)?;
    let sampled = SdeModel::new(
        1,
        |x: &DVector<T>, _t| -x,
        TimeMatrix::scalar(T::one()),
        DiffusionSpec::scalar(q_beta)?,
        gaussian_sampler(DVector::zeros(1), DMatrix::from_element(1, 1, p0))?,
    )?;
    let rb = CondGaussModel::new(
        sampled,
        |_s: &DVector<T>, _t| DMatrix::from_element(1, 1, -T::one()),
        |s: &DVector<T>, _t| DVector::from_element(1, s[0]),
        |_s: &DVector<T>, _t| DMatrix::identity(1, 1),
        DiffusionSpec::scalar(q_eta)?,
        |_s: &DVector<T>, _t| DMatrix::identity(1, 1),
        move |_s: &DVector<T>, _t| DMatrix::from_element(1, 1, r),
    );
    let augmented = SdeModel::new(
        2,
        |x: &DVector<T>, _t| DVector::from_column_slice(&[-x[0] + x[1], -x[1]]),
        TimeMatrix::Constant(DMatrix::identity(2, 2)),
        DiffusionSpec::constant(DMatrix::from_diagonal(&DVector::from_column_slice(&[q_eta, q_beta])))?,
        gaussian_sampler(DVector::zeros(2), DMatrix::identity(2, 2) * p0)?,
    )?;
    Ok((rb, augmented))
}
