//! Continuous-discrete sequential importance resampling.
//!
//! Each measurement step propagates every particle through a coupled
//! importance/scaled path, adds `Λ + log p(y | x)` to its log-weight,
//! normalizes, and resamples systematically when the effective sample size
//! drops below a fraction of `N` (default one half).

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rayon::prelude::*;

use crate::girsanov::{propagate_coupled_with, ImportanceSpec, DEFAULT_MAX_CONDITION};
use crate::rng::{ParticleRng, Purpose, StreamFactory};
use crate::sde_core::{sample_brownian_increments, SdeModel, TimeGrid};
use crate::special::mvn_log_pdf;
use crate::{Error, Real, Result};

/// One weighted sample. `aux` carries per-particle side information such as
/// a Gaussian block or sufficient statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct Particle<T: Real, A = ()> {
    pub state: DVector<T>,
    pub log_weight: T,
    pub aux: A,
}

/// Filter settings shared by every step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FilterConfig {
    /// Euler steps per inter-measurement interval.
    pub n_steps: usize,
    /// Resample when `ESS < ess_fraction · N`.
    pub ess_fraction: f64,
    /// Condition-number guard for `L`, `B` and `Q`.
    pub max_condition: f64,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self {
            n_steps: 10,
            ess_fraction: 0.5,
            max_condition: DEFAULT_MAX_CONDITION,
        }
    }
}

impl FilterConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_steps == 0 {
            return Err(Error::InvalidParameter("n_steps must be at least 1".into()));
        }
        if !(self.ess_fraction > 0.0 && self.ess_fraction <= 1.0) {
            return Err(Error::InvalidParameter(format!(
                "ESS threshold fraction must lie in (0, 1], got {}",
                self.ess_fraction
            )));
        }
        if !(self.max_condition > 1.0) {
            return Err(Error::InvalidParameter("condition-number guard must exceed 1".into()));
        }
        Ok(())
    }
}

/// A measurement `y_k` taken at time `t_k`.
#[derive(Debug, Clone, PartialEq)]
pub struct Measurement<T: Real> {
    pub t: T,
    pub y: DVector<T>,
}

impl<T: Real> Measurement<T> {
    pub fn new(t: T, y: DVector<T>) -> Self {
        Self { t, y }
    }

    pub fn scalar(t: T, y: T) -> Self {
        Self {
            t,
            y: DVector::from_element(1, y),
        }
    }
}

/// Weighted posterior summary after a measurement step (`k = 0` is the prior).
#[derive(Debug, Clone, PartialEq)]
pub struct Summary<T: Real> {
    pub k: usize,
    pub t: T,
    pub mean: DVector<T>,
    pub var_diag: DVector<T>,
    pub ess: T,
    pub log_marginal: T,
    pub resampled: bool,
}

/// `N` particles, the stream factory they draw from and the filter clock.
#[derive(Debug, Clone)]
pub struct ParticleSet<T: Real, A = ()> {
    particles: Vec<Particle<T, A>>,
    streams: StreamFactory,
    step: usize,
    time: T,
    log_marginal: T,
    last_llr: Vec<T>,
}

impl<T: Real, A: Clone> ParticleSet<T, A> {
    /// Wraps existing particles; log-weights are normalized.
    pub fn new(particles: Vec<Particle<T, A>>, time: T, seed: u64) -> Result<Self> {
        if particles.is_empty() {
            return Err(Error::InvalidParameter("a particle set needs at least one particle".into()));
        }
        let n = particles.len();
        let mut set = Self {
            particles,
            streams: StreamFactory::new(seed),
            step: 0,
            time,
            log_marginal: T::zero(),
            last_llr: vec![T::zero(); n],
        };
        let logs: Vec<T> = set.particles.iter().map(|p| p.log_weight).collect();
        let (normalized, _) = normalize_log_domain(&logs, 0)?;
        for (p, lw) in set.particles.iter_mut().zip(normalized) {
            p.log_weight = lw;
        }
        Ok(set)
    }

    /// `N` equally weighted draws from the model's initial distribution,
    /// with side information produced by `aux`.
    pub fn from_prior_with(
        model: &SdeModel<T>,
        n: usize,
        t0: T,
        seed: u64,
        aux: impl Fn(usize, &DVector<T>) -> A,
    ) -> Result<Self> {
        if n == 0 {
            return Err(Error::InvalidParameter("number of particles must be at least 1".into()));
        }
        let streams = StreamFactory::new(seed);
        let lw = -T::from_usize_exact(n).ln();
        let particles = (0..n)
            .map(|i| {
                let mut rng = streams.stream(Purpose::Initial, i as u64, 0);
                let state = model.sample_initial(&mut rng);
                if state.len() != model.dim_state() {
                    return Err(Error::Dimension(format!(
                        "initial sampler returned {} components, model has {}",
                        state.len(),
                        model.dim_state()
                    )));
                }
                let aux = aux(i, &state);
                Ok(Particle {
                    state,
                    log_weight: lw,
                    aux,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            particles,
            streams,
            step: 0,
            time: t0,
            log_marginal: T::zero(),
            last_llr: vec![T::zero(); n],
        })
    }

    pub fn len(&self) -> usize {
        self.particles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.particles.is_empty()
    }

    pub fn particles(&self) -> &[Particle<T, A>] {
        &self.particles
    }

    pub fn particles_mut(&mut self) -> &mut [Particle<T, A>] {
        &mut self.particles
    }

    pub fn streams(&self) -> &StreamFactory {
        &self.streams
    }

    /// Index `k` of the last processed measurement.
    pub fn step(&self) -> usize {
        self.step
    }

    pub fn time(&self) -> T {
        self.time
    }

    /// Cumulative `log p(y_1:k)` estimate.
    pub fn log_marginal(&self) -> T {
        self.log_marginal
    }

    /// `Λ⁽ⁱ⁾` of the most recent step, indexed as the particles were before
    /// resampling.
    pub fn last_llr(&self) -> &[T] {
        &self.last_llr
    }

    pub fn weights(&self) -> Vec<T> {
        self.particles.iter().map(|p| p.log_weight.exp()).collect()
    }

    pub fn ess(&self) -> T {
        effective_sample_size(&self.weights()).unwrap_or_else(|_| T::one())
    }

    pub fn weighted_mean(&self) -> DVector<T> {
        let dim = self.particles[0].state.len();
        let mut mean = DVector::zeros(dim);
        for p in &self.particles {
            mean.axpy(p.log_weight.exp(), &p.state, T::one());
        }
        mean
    }

    pub fn weighted_covariance(&self) -> DMatrix<T> {
        let mean = self.weighted_mean();
        let dim = mean.len();
        let mut cov = DMatrix::zeros(dim, dim);
        for p in &self.particles {
            let d = &p.state - &mean;
            cov.ger(p.log_weight.exp(), &d, &d, T::one());
        }
        cov
    }

    /// Weighted mean of an arbitrary per-particle quantity.
    pub fn weighted_sum(&self, f: impl Fn(&Particle<T, A>) -> T) -> T {
        self.particles
            .iter()
            .fold(T::zero(), |acc, p| acc + p.log_weight.exp() * f(p))
    }

    pub fn summary(&self, resampled: bool) -> Summary<T> {
        let cov = self.weighted_covariance();
        Summary {
            k: self.step,
            t: self.time,
            mean: self.weighted_mean(),
            var_diag: cov.diagonal(),
            ess: self.ess(),
            log_marginal: self.log_marginal,
            resampled,
        }
    }

    /// Replace the population by the given ancestors with equal weights.
    pub fn resample_from(&mut self, ancestors: &[usize]) {
        let lw = -T::from_usize_exact(ancestors.len()).ln();
        let next = ancestors
            .iter()
            .map(|&a| {
                let mut p = self.particles[a].clone();
                p.log_weight = lw;
                p
            })
            .collect();
        self.particles = next;
    }

    /// Systematic resampling with the set's own resampling stream for the
    /// current step.
    pub fn resample(&mut self) -> Result<()> {
        let mut rng = self.streams.stream(Purpose::Resample, 0, self.step as u64);
        let ancestors = systematic_resample(&self.weights(), &mut rng)?;
        self.resample_from(&ancestors);
        Ok(())
    }
}

/// Output of propagating one particle across an interval.
#[derive(Debug, Clone)]
pub struct Propagated<T: Real, A> {
    pub state: DVector<T>,
    /// `Λ` over the interval.
    pub llr: T,
    /// Total log-weight increment (`Λ` plus the measurement term).
    pub log_increment: T,
    pub aux: A,
}

/// Per-particle work of one filter step.
pub trait StepKernel<T: Real, A>: Sync {
    fn propagate(
        &self,
        particle: &Particle<T, A>,
        grid: &TimeGrid<T>,
        y: &DVector<T>,
        rng: &mut ParticleRng,
    ) -> Result<Propagated<T, A>>;
}

/// `log p(y | x)`; `−∞` marks an impossible observation.
pub trait MeasurementModel<T: Real>: Sync {
    fn log_likelihood(&self, y: &DVector<T>, x: &DVector<T>) -> T;
}

impl<T: Real, F> MeasurementModel<T> for F
where
    F: Fn(&DVector<T>, &DVector<T>) -> T + Sync,
{
    fn log_likelihood(&self, y: &DVector<T>, x: &DVector<T>) -> T {
        self(y, x)
    }
}

/// `y = H x + r`, `r ~ N(0, R)`.
#[derive(Debug, Clone)]
pub struct LinearGaussianMeasurement<T: Real> {
    pub h: DMatrix<T>,
    pub r: DMatrix<T>,
}

impl<T: Real> LinearGaussianMeasurement<T> {
    pub fn new(h: DMatrix<T>, r: DMatrix<T>) -> Result<Self> {
        if r.nrows() != h.nrows() || r.ncols() != h.nrows() {
            return Err(Error::Dimension(format!(
                "H is {}x{} but R is {}x{}",
                h.nrows(),
                h.ncols(),
                r.nrows(),
                r.ncols()
            )));
        }
        if r.clone().cholesky().is_none() {
            return Err(Error::InvalidParameter("measurement covariance must be positive definite".into()));
        }
        Ok(Self { h, r })
    }
}

impl<T: Real> MeasurementModel<T> for LinearGaussianMeasurement<T> {
    fn log_likelihood(&self, y: &DVector<T>, x: &DVector<T>) -> T {
        mvn_log_pdf(y, &(&self.h * x), &self.r).unwrap_or_else(|_| T::neg_infinity())
    }
}

/// Builds the importance process for one particle over one interval.
pub trait ProposalBuilder<T: Real, A>: Sync {
    fn build(&self, particle: &Particle<T, A>, grid: &TimeGrid<T>, y: &DVector<T>) -> Result<ImportanceSpec<T>>;
}

/// A fixed importance process shared by all particles; with
/// [`ImportanceSpec::prior`] this is the bootstrap filter.
impl<T: Real, A> ProposalBuilder<T, A> for ImportanceSpec<T> {
    fn build(&self, _particle: &Particle<T, A>, _grid: &TimeGrid<T>, _y: &DVector<T>) -> Result<ImportanceSpec<T>> {
        Ok(self.clone())
    }
}

/// Kernel for the plain and singular continuous-discrete SIR recursions.
pub struct CdSirKernel<'a, T: Real, P, M> {
    pub model: &'a SdeModel<T>,
    pub proposal: &'a P,
    pub measurement: &'a M,
    pub max_condition: f64,
}

impl<T, A, P, M> StepKernel<T, A> for CdSirKernel<'_, T, P, M>
where
    T: Real,
    A: Clone + Send + Sync,
    P: ProposalBuilder<T, A>,
    M: MeasurementModel<T>,
{
    fn propagate(
        &self,
        particle: &Particle<T, A>,
        grid: &TimeGrid<T>,
        y: &DVector<T>,
        rng: &mut ParticleRng,
    ) -> Result<Propagated<T, A>> {
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
        let ll = self.measurement.log_likelihood(y, &path.s_star);
        Ok(Propagated {
            log_increment: llr + ll,
            llr,
            state: path.s_star,
            aux: particle.aux.clone(),
        })
    }
}

/// `(weights, log of the mean unnormalized weight)`.
pub fn normalize_log_weights<T: Real>(log_weights: &[T]) -> Result<(Vec<T>, T)> {
    if log_weights.is_empty() {
        return Err(Error::InvalidWeights("no weights to normalize".into()));
    }
    let (normalized, lse) = normalize_log_domain(log_weights, 0)?;
    let weights = normalized.into_iter().map(|l| l.exp()).collect();
    Ok((weights, lse - T::from_usize_exact(log_weights.len()).ln()))
}

/// Normalized log-weights and `log Σ exp(lw)`.
fn normalize_log_domain<T: Real>(log_weights: &[T], step: usize) -> Result<(Vec<T>, T)> {
    if log_weights.iter().any(|l| l.is_nan_value() || l.is_pos_infinity()) {
        return Err(Error::InvalidWeights(format!(
            "log-weights must be finite or −∞ (step {step})"
        )));
    }
    let max = log_weights
        .iter()
        .copied()
        .fold(T::neg_infinity(), |a, b| if b > a { b } else { a });
    if max.is_neg_infinity() {
        return Err(Error::Degenerate { step });
    }
    let sum = log_weights.iter().fold(T::zero(), |acc, &l| acc + (l - max).exp());
    let lse = max + sum.ln();
    Ok((log_weights.iter().map(|&l| l - lse).collect(), lse))
}

/// `1 / Σ wᵢ²` for normalized weights, clamped to `[1, N]`.
pub fn effective_sample_size<T: Real>(weights: &[T]) -> Result<T> {
    if weights.is_empty() {
        return Err(Error::InvalidWeights("no weights".into()));
    }
    let total = weights.iter().fold(T::zero(), |a, &w| a + w);
    if weights.iter().any(|w| !w.is_finite() || *w < T::zero()) || (total - T::one()).abs() > T::lit(1e-8) {
        return Err(Error::InvalidWeights(format!(
            "weights must be nonnegative and sum to one, sum is {}",
            total.to_f64_lossy()
        )));
    }
    let sq = weights.iter().fold(T::zero(), |a, &w| a + w * w);
    let n = T::from_usize_exact(weights.len());
    Ok((T::one() / sq).max(T::one()).min(n))
}

/// Ancestor indices for one systematic draw `u₀ ∈ [0, 1)`.
pub fn systematic_indices<T: Real>(weights: &[T], u0: f64) -> Vec<usize> {
    let n = weights.len();
    let total: f64 = weights.iter().map(|w| w.to_f64_lossy()).sum();
    let mut out = Vec::with_capacity(n);
    let mut i = 0;
    let mut next = weights[0].to_f64_lossy() / total;
    for m in 0..n {
        let u = (u0 + m as f64) / n as f64;
        while next <= u && i + 1 < n {
            i += 1;
            next += weights[i].to_f64_lossy() / total;
        }
        out.push(i);
    }
    out
}

/// Systematic resampling: one uniform shift of `N` evenly spaced strata.
pub fn systematic_resample<T: Real, R: Rng + ?Sized>(weights: &[T], rng: &mut R) -> Result<Vec<usize>> {
    effective_sample_size(weights)?;
    let u0: f64 = rng.random();
    Ok(systematic_indices(weights, u0))
}

/// One measurement step with an arbitrary kernel: parallel propagation and
/// weighting, then serial normalization and optional resampling.
pub fn filter_step<T, A, K>(
    set: &mut ParticleSet<T, A>,
    kernel: &K,
    measurement: &Measurement<T>,
    config: &FilterConfig,
) -> Result<Summary<T>>
where
    T: Real,
    A: Clone + Send + Sync,
    K: StepKernel<T, A> + ?Sized,
{
    config.validate()?;
    let k = set.step + 1;
    let grid = TimeGrid::new(set.time, measurement.t, config.n_steps).map_err(|e| e.at_step(k))?;
    let streams = set.streams;
    let results: Vec<Propagated<T, A>> = set
        .particles
        .par_iter()
        .enumerate()
        .map(|(i, p)| {
            let mut rng = streams.stream(Purpose::Propagate, i as u64, k as u64);
            kernel.propagate(p, &grid, &measurement.y, &mut rng)
        })
        .collect::<Result<Vec<_>>>()
        .map_err(|e| e.at_step(k))?;

    let mut logs = Vec::with_capacity(results.len());
    let mut llrs = Vec::with_capacity(results.len());
    for (p, r) in set.particles.iter_mut().zip(results) {
        if r.log_increment.is_nan_value() {
            return Err(Error::NonFinite {
                what: "log-weight increment",
                t: measurement.t.to_f64_lossy(),
                step: k,
                state: r.state.iter().map(|v| v.to_f64_lossy()).collect(),
            }
            .at_step(k));
        }
        logs.push(p.log_weight + r.log_increment);
        llrs.push(r.llr);
        p.state = r.state;
        p.aux = r.aux;
    }
    let (normalized, lse) = normalize_log_domain(&logs, k)?;
    for (p, lw) in set.particles.iter_mut().zip(normalized) {
        p.log_weight = lw;
    }
    set.step = k;
    set.time = measurement.t;
    set.log_marginal += lse;
    set.last_llr = llrs;

    let summary_before = set.summary(false);
    let threshold = T::lit(config.ess_fraction) * T::from_usize_exact(set.len());
    let resampled = summary_before.ess < threshold;
    if resampled {
        set.resample().map_err(|e| e.at_step(k))?;
    }
    Ok(Summary {
        resampled,
        ..summary_before
    })
}

/// One step of the recursion for a model without a deterministic block.
pub fn cd_sir_step<T, A, P, M>(
    set: &mut ParticleSet<T, A>,
    model: &SdeModel<T>,
    proposal: &P,
    measurement_model: &M,
    measurement: &Measurement<T>,
    config: &FilterConfig,
) -> Result<Summary<T>>
where
    T: Real,
    A: Clone + Send + Sync,
    P: ProposalBuilder<T, A>,
    M: MeasurementModel<T>,
{
    if model.is_singular() {
        return Err(Error::InvalidParameter(
            "model has a deterministic block; use cd_sir_singular_step".into(),
        ));
    }
    let kernel = CdSirKernel {
        model,
        proposal,
        measurement: measurement_model,
        max_condition: config.max_condition,
    };
    filter_step(set, &kernel, measurement, config)
}

/// One step of the recursion for a model split into a deterministic block
/// and a noise-driven block with invertible dispersion.
pub fn cd_sir_singular_step<T, A, P, M>(
    set: &mut ParticleSet<T, A>,
    model: &SdeModel<T>,
    proposal: &P,
    measurement_model: &M,
    measurement: &Measurement<T>,
    config: &FilterConfig,
) -> Result<Summary<T>>
where
    T: Real,
    A: Clone + Send + Sync,
    P: ProposalBuilder<T, A>,
    M: MeasurementModel<T>,
{
    if !model.is_singular() {
        return Err(Error::InvalidParameter("model has no deterministic block; use cd_sir_step".into()));
    }
    let kernel = CdSirKernel {
        model,
        proposal,
        measurement: measurement_model,
        max_condition: config.max_condition,
    };
    filter_step(set, &kernel, measurement, config)
}

/// Callback invoked after every step with the set and its summary.
pub type Observer<'a, T, A> = dyn FnMut(&ParticleSet<T, A>, &Summary<T>) -> Result<()> + 'a;

/// Runs `kernel` over all measurements; returns the prior summary followed
/// by one summary per measurement. `observe` sees the set after every step
/// (after any resampling).
pub fn run_filter<T, A, K>(
    set: &mut ParticleSet<T, A>,
    kernel: &K,
    measurements: &[Measurement<T>],
    config: &FilterConfig,
    observe: &mut Observer<'_, T, A>,
) -> Result<Vec<Summary<T>>>
where
    T: Real,
    A: Clone + Send + Sync,
    K: StepKernel<T, A> + ?Sized,
{
    config.validate()?;
    let mut last = set.time;
    for (k, m) in measurements.iter().enumerate() {
        if !(m.t > last) {
            return Err(Error::InvalidGrid(format!(
                "measurement times must be strictly increasing and after the start time (measurement {})",
                k + 1
            )));
        }
        last = m.t;
    }
    let initial = set.summary(false);
    observe(set, &initial)?;
    let mut out = vec![initial];
    for m in measurements {
        let s = filter_step(set, kernel, m, config)?;
        observe(set, &s)?;
        out.push(s);
    }
    Ok(out)
}
