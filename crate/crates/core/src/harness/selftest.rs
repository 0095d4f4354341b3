//! Fast oracle checks run by the `selftest` subcommand.

use nalgebra::{DMatrix, DVector};

use crate::girsanov::{estimate_kl, propagate_coupled, ImportanceSpec};
use crate::models::{ou_model, simulate_linear_gaussian};
use crate::particle_filter::{
    normalize_log_weights, run_filter, systematic_indices, CdSirKernel, FilterConfig, LinearGaussianMeasurement,
    ParticleSet,
};
use crate::rao_blackwell::{GammaStats, InvChi2Stats};
use crate::rng::{Purpose, StreamFactory};
use crate::sde_core::{integrate_sde, sample_brownian_increments, DiffusionSpec, SdeModel, TimeGrid, TimeMatrix};

/// Outcome of one check.
#[derive(Debug, Clone)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    fn new(name: &'static str, passed: bool, detail: String) -> Self {
        Self { name, passed, detail }
    }

    fn failed(name: &'static str, e: impl std::fmt::Display) -> Self {
        Self::new(name, false, format!("error: {e}"))
    }

    /// `PASS name: detail` or `FAIL name: detail`.
    pub fn line(&self) -> String {
        format!("{} {}: {}", if self.passed { "PASS" } else { "FAIL" }, self.name, self.detail)
    }
}

fn constant_model(a: f64, q: f64) -> crate::Result<SdeModel<f64>> {
    SdeModel::new(
        1,
        move |_x: &DVector<f64>, _t| DVector::from_element(1, a),
        TimeMatrix::scalar(1.0),
        DiffusionSpec::scalar(q)?,
        |_| DVector::zeros(1),
    )
}

fn llr_zero_for_prior_proposal() -> crate::Result<Check> {
    let model = ou_model(1.0, 0.5, 0.0, 1.0)?;
    let grid = TimeGrid::new(0.0, 1.0, 50)?;
    let mut rng = StreamFactory::new(11).stream(Purpose::Auxiliary, 0, 0);
    let incs = sample_brownian_increments(&grid, model.diffusion(), &mut rng)?;
    let x0 = DVector::from_element(1, 0.3);
    let out = propagate_coupled(&model, &ImportanceSpec::prior(&model), &x0, &grid, &incs)?;
    let path = integrate_sde(&model, &x0, &grid, &incs)?;
    let ok = out.llr.value() == 0.0 && out.s == path[path.len() - 1];
    Ok(Check::new("girsanov_prior_proposal", ok, format!("log-ratio {:e}", out.llr.value())))
}

fn llr_constant_drift_closed_form() -> crate::Result<Check> {
    // Λ = (a−b)/q · (x(T) − x(0) − b T) − ½ (a² − b²)/q · T along a path with drift b.
    let (a, b, q) = (1.0, 0.5, 2.0);
    let model = constant_model(a, q)?;
    let imp = ImportanceSpec::constant(DVector::from_element(1, b), DMatrix::from_element(1, 1, 1.0));
    let grid = TimeGrid::new(0.0, 1.5, 30)?;
    let mut rng = StreamFactory::new(5).stream(Purpose::Auxiliary, 1, 0);
    let incs = sample_brownian_increments(&grid, model.diffusion(), &mut rng)?;
    let x0 = DVector::zeros(1);
    let out = propagate_coupled(&model, &imp, &x0, &grid, &incs)?;
    let beta = incs.total()[0];
    let expected = (a - b) / q * beta - 0.5 * (a - b) * (a - b) / q * 1.5;
    let err = (out.llr.value() - expected).abs();
    Ok(Check::new("girsanov_constant_drift", err < 1e-12, format!("|Λ − closed form| = {err:.2e}")))
}

fn kl_constant() -> crate::Result<Check> {
    let grid = TimeGrid::new(0.0, 2.0, 40)?;
    let paths = vec![vec![DVector::zeros(1); 41]; 3];
    let kl: f64 = estimate_kl(
        &|_x, _t| DVector::from_element(1, 1.0),
        &|_x, _t| DVector::from_element(1, 0.0),
        &DMatrix::from_element(1, 1, 1.0),
        &grid,
        &paths,
    )?;
    Ok(Check::new("kl_constant_drift", (kl - 1.0).abs() < 1e-12, format!("estimate {kl}, expected 1")))
}

fn resampling_offspring() -> Check {
    let w = [0.1, 0.2, 0.3, 0.4];
    let idx = systematic_indices(&w, 0.5);
    let counts: Vec<usize> = (0..4).map(|i| idx.iter().filter(|&&j| j == i).count()).collect();
    let ok = counts.iter().zip(w).all(|(&c, w)| (c as f64 - 4.0 * w).abs() < 1.0);
    Check::new("systematic_offspring", ok, format!("counts {counts:?}"))
}

fn weight_normalization() -> crate::Result<Check> {
    let (w, lse) = normalize_log_weights(&[-1000.0, -1000.0 + 2f64.ln()])?;
    let ok = (w[0] - 1.0 / 3.0).abs() < 1e-12 && (w[1] - 2.0 / 3.0).abs() < 1e-12;
    Ok(Check::new("log_weight_normalization", ok, format!("weights {w:?}, log mean weight {lse:.6}")))
}

fn conjugate_updates() -> crate::Result<Check> {
    let s = InvChi2Stats::new(2.0f64, 1.0)?.update(2.0)?;
    let g = GammaStats::new(10.0f64, 0.001)?.update(1e-3, 50.0)?;
    let ok = s.nu == 3.0 && (s.s2 - 2.0).abs() < 1e-15 && g.alpha == 60.0 && (g.beta - 0.002).abs() < 1e-15;
    Ok(Check::new(
        "conjugate_updates",
        ok,
        format!("inv-chi2 ({}, {}), gamma ({}, {})", s.nu, s.s2, g.alpha, g.beta),
    ))
}

/// Filter mean for a scalar OU process against the Kalman filter of the
/// same Euler chain.
fn ou_filter_vs_kalman() -> crate::Result<Check> {
    let (lambda, q, r, dt, steps) = (1.0, 0.5, 0.25, 0.5, 10usize);
    let sde = ou_model(lambda, q, 0.0, 1.0)?;
    let data = simulate_linear_gaussian(
        &sde,
        &DVector::from_element(1, 0.5),
        dt,
        10,
        &DMatrix::identity(1, 1),
        &DMatrix::from_element(1, 1, r),
        steps,
        3,
    )?;
    let meas = LinearGaussianMeasurement::new(DMatrix::identity(1, 1), DMatrix::from_element(1, 1, r))?;
    let prior = ImportanceSpec::prior(&sde);
    let kernel = CdSirKernel { model: &sde, proposal: &prior, measurement: &meas, max_condition: 1e12 };
    let config = FilterConfig { n_steps: steps, ..FilterConfig::default() };
    let mut set = ParticleSet::from_prior_with(&sde, 4000, 0.0, 17, |_, _| ())?;
    let summaries = run_filter(&mut set, &kernel, &data.measurements, &config, &mut |_, _| Ok(()))?;

    let h = dt / steps as f64;
    let (mut m, mut p, mut worst) = (0.0f64, 1.0f64, 0.0f64);
    for (meas, s) in data.measurements.iter().zip(&summaries[1..]) {
        for _ in 0..steps {
            m *= 1.0 - lambda * h;
            p = (1.0 - lambda * h).powi(2) * p + q * h;
        }
        let k = p / (p + r);
        m += k * (meas.y[0] - m);
        p *= 1.0 - k;
        worst = worst.max((s.mean[0] - m).abs() / p.sqrt());
    }
    Ok(Check::new(
        "ou_filter_vs_kalman",
        worst < 0.2,
        format!("max |mean − Kalman| / posterior sd = {worst:.4}"),
    ))
}

/// Runs every check.
pub fn run_all() -> Vec<Check> {
    let wrap = |name: &'static str, r: crate::Result<Check>| r.unwrap_or_else(|e| Check::failed(name, e));
    vec![
        wrap("girsanov_prior_proposal", llr_zero_for_prior_proposal()),
        wrap("girsanov_constant_drift", llr_constant_drift_closed_form()),
        wrap("kl_constant_drift", kl_constant()),
        resampling_offspring(),
        wrap("log_weight_normalization", weight_normalization()),
        wrap("conjugate_updates", conjugate_updates()),
        wrap("ou_filter_vs_kalman", ou_filter_vs_kalman()),
    ]
}
