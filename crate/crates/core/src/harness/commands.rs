//! `simulate`, `filter` and `kl`.

use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use statrs::function::gamma::{gamma_lr, gamma_ur};

use super::config::{ExperimentConfig, FilterKind, KlKind, ModelConfig, ProposalKind};
use super::io::{fmt_f64, read_counts, read_series, write_csv};
use super::HarnessError;
use crate::girsanov::{kl_path_integrals, ImportanceSpec};
use crate::models::{
    cond_gauss_test_model, epidemic_indicator, epidemic_predict, epidemic_proposal, epidemic_simulate, epidemic_theta,
    gaussian_sampler, integrated_ou_model, ou_model, pendulum_proposal, pendulum_proposal_known, pendulum_simulate,
    simulate_linear_gaussian, EpidemicModel, EpidemicPrior, PendulumModel, SimulatedData,
};
use crate::particle_filter::{
    run_filter, CdSirKernel, FilterConfig, LinearGaussianMeasurement, Measurement, ParticleSet, StepKernel,
};
use crate::rao_blackwell::{
    gamma_poisson_family, invchi2_family, mixture_mean, CdrbGaussKernel, CdrbParamKernel, ConjugateFamily, GammaStats,
    GaussianBlock, InvChi2Stats,
};
use crate::rng::{Purpose, StreamFactory};
use crate::sde_core::{integrate_sde, sample_brownian_increments, DiffusionSpec, SdeModel, TimeGrid, TimeMatrix};

/// Stream index reserved for ground-truth initial states.
const TRUTH_STREAM: u64 = (1 << 56) - 1;

/// Lines for the terminal and the files written.
#[derive(Debug, Default, Clone)]
pub struct Report {
    pub lines: Vec<String>,
    pub files: Vec<PathBuf>,
}

fn diag(v: &[f64]) -> DMatrix<f64> {
    DMatrix::from_diagonal(&DVector::from_column_slice(v))
}

fn state_names(model: &ModelConfig) -> Vec<&'static str> {
    match model {
        ModelConfig::Pendulum(_) => vec!["x1", "x2"],
        ModelConfig::Epidemic(_) => vec!["x", "y", "lambda"],
        ModelConfig::Ou(_) => vec!["x"],
        ModelConfig::IntegratedOu(_) => vec!["x1", "x2"],
        ModelConfig::CondGauss(_) => vec!["x1", "x3"],
    }
}

fn filter_config(cfg: &ExperimentConfig) -> FilterConfig {
    FilterConfig {
        n_steps: cfg.filter.n_steps,
        ess_fraction: cfg.filter.ess_threshold,
        max_condition: cfg.filter.max_condition,
    }
}

fn initial_state(cfg: &ExperimentConfig, model: &SdeModel<f64>) -> Result<DVector<f64>, HarnessError> {
    let x0 = &cfg.simulate.x0;
    if x0.is_empty() {
        let mut rng = StreamFactory::new(cfg.run.seed).stream(Purpose::Initial, TRUTH_STREAM, 0);
        Ok(model.sample_initial(&mut rng))
    } else if x0.len() == model.dim_state() {
        Ok(DVector::from_column_slice(x0))
    } else {
        Err(HarnessError::Config(format!(
            "simulate.x0 must have {} entries, got {}",
            model.dim_state(),
            x0.len()
        )))
    }
}

fn epidemic_model_of(cfg: &ExperimentConfig) -> Result<EpidemicModel<f64>, HarnessError> {
    let ModelConfig::Epidemic(e) = &cfg.model else {
        unreachable!("caller matched the epidemic model")
    };
    Ok(EpidemicModel::new(e.g, e.q)?.with_prior(EpidemicPrior {
        y0_alpha: e.y0_alpha,
        y0_beta: e.y0_beta,
        lambda_mean: e.lambda_mean,
        lambda_var: e.lambda_var,
    })?)
}

fn pendulum_sde(model: &PendulumModel<f64>, m0: &[f64], p0: &[f64]) -> Result<SdeModel<f64>, HarnessError> {
    Ok(model
        .sde()
        .with_initial(gaussian_sampler(DVector::from_column_slice(m0), diag(p0))?))
}

fn write_gaussian_data(
    cfg: &ExperimentConfig,
    data: &SimulatedData<f64>,
    report: &mut Report,
) -> Result<(), HarnessError> {
    let header = cfg.header();
    let out = cfg.out_dir();
    let names = state_names(&cfg.model);
    let mut cols = vec!["t".to_string()];
    cols.extend(names.iter().map(|s| s.to_string()));
    let rows: Vec<Vec<String>> = data
        .truth
        .iter()
        .map(|(t, x)| std::iter::once(fmt_f64(*t)).chain(x.iter().map(|v| fmt_f64(*v))).collect())
        .collect();
    let truth = out.join("truth.csv");
    write_csv(&truth, &header, &cols, &rows)?;
    let ny = data.measurements.first().map_or(1, |m| m.y.len());
    let mut cols = vec!["t".to_string()];
    cols.extend((0..ny).map(|i| if ny == 1 { "y".to_string() } else { format!("y{}", i + 1) }));
    let rows: Vec<Vec<String>> = data
        .measurements
        .iter()
        .map(|m| std::iter::once(fmt_f64(m.t)).chain(m.y.iter().map(|v| fmt_f64(*v))).collect())
        .collect();
    let meas = out.join("measurements.csv");
    write_csv(&meas, &header, &cols, &rows)?;
    report.files.push(truth);
    report.files.push(meas);
    Ok(())
}

/// Synthetic ground truth and measurements.
pub fn cmd_simulate(cfg: &ExperimentConfig) -> Result<Report, HarnessError> {
    let mut report = Report::default();
    report.lines.push(format!("seed = {}", cfg.run.seed));
    let s = &cfg.simulate;
    let seed = cfg.run.seed;
    match &cfg.model {
        ModelConfig::Pendulum(p) => {
            let model = PendulumModel::new(p.a, p.q)?;
            let x0 = initial_state(cfg, &pendulum_sde(&model, &p.m0, &p.p0)?)?;
            let data = pendulum_simulate(&model, &x0, s.dt, s.n_meas, s.sigma2, s.substeps, seed)?;
            write_gaussian_data(cfg, &data, &mut report)?;
        }
        ModelConfig::Ou(o) => {
            let sde = ou_model(o.lambda, o.q, o.m0, o.p0)?;
            let x0 = initial_state(cfg, &sde)?;
            let data = simulate_linear_gaussian(&sde, &x0, s.dt, s.n_meas, &diag(&[1.0]), &diag(&[s.sigma2]), s.substeps, seed)?;
            write_gaussian_data(cfg, &data, &mut report)?;
        }
        ModelConfig::IntegratedOu(o) => {
            let sde = integrated_ou_model(o.q, DVector::from_column_slice(&o.m0), diag(&o.p0))?;
            let x0 = initial_state(cfg, &sde)?;
            let h = DMatrix::from_row_slice(1, 2, &[1.0, 0.0]);
            let data = simulate_linear_gaussian(&sde, &x0, s.dt, s.n_meas, &h, &diag(&[s.sigma2]), s.substeps, seed)?;
            write_gaussian_data(cfg, &data, &mut report)?;
        }
        ModelConfig::CondGauss(c) => {
            let (_, aug) = cond_gauss_test_model(c.q_eta, c.q_beta, s.sigma2, c.p0)?;
            let x0 = initial_state(cfg, &aug)?;
            let h = DMatrix::from_row_slice(1, 2, &[1.0, 0.0]);
            let data = simulate_linear_gaussian(&aug, &x0, s.dt, s.n_meas, &h, &diag(&[s.sigma2]), s.substeps, seed)?;
            write_gaussian_data(cfg, &data, &mut report)?;
        }
        ModelConfig::Epidemic(_) => {
            let filter_model = epidemic_model_of(cfg)?;
            let truth_model = if s.constant_contact {
                EpidemicModel::constant_contact(filter_model.g)?
            } else {
                filter_model
            };
            let x0 = if s.x0.is_empty() {
                let mut rng = StreamFactory::new(seed).stream(Purpose::Initial, TRUTH_STREAM, 0);
                let mut x = filter_model.sde().sample_initial(&mut rng);
                x[2] = s.sigma_true.ln();
                x
            } else {
                initial_state(cfg, &filter_model.sde())?
            };
            let data = epidemic_simulate(&truth_model, &x0, s.n_true, 1.0, s.n_meas, s.substeps, seed)?;
            let header = cfg.header();
            let out = cfg.out_dir();
            let rows: Vec<Vec<String>> = data
                .counts
                .times
                .iter()
                .zip(&data.counts.counts)
                .map(|(t, d)| vec![format!("{}", t.round() as i64), d.to_string()])
                .collect();
            let meas = out.join("measurements.csv");
            write_csv(&meas, &header, &["week".into(), "deaths".into()], &rows)?;
            let cols: Vec<String> = ["week", "x", "y", "lambda", "theta", "z"].iter().map(|s| s.to_string()).collect();
            let rows: Vec<Vec<String>> = data
                .truth
                .iter()
                .enumerate()
                .map(|(k, (t, x))| {
                    let theta = if k == 0 { 0.0 } else { data.thetas[k - 1] };
                    vec![
                        format!("{}", t.round() as i64),
                        fmt_f64(x[0]),
                        fmt_f64(x[1]),
                        fmt_f64(x[2]),
                        fmt_f64(theta),
                        fmt_f64(1.0 - x[0] - x[1]),
                    ]
                })
                .collect();
            let truth = out.join("truth.csv");
            write_csv(&truth, &header, &cols, &rows)?;
            report.files.push(truth);
            report.files.push(meas);
        }
    }
    Ok(report)
}

type SetColumns<'a, A> = Box<dyn Fn(&ParticleSet<f64, A>) -> Vec<f64> + 'a>;
type ParticleColumns<'a, A> = Box<dyn Fn(&A) -> Vec<f64> + 'a>;

/// Extra per-step summary columns.
struct Extras<'a, A> {
    names: Vec<String>,
    eval: SetColumns<'a, A>,
}

impl<A> Extras<'_, A> {
    fn none() -> Self {
        Self {
            names: Vec::new(),
            eval: Box::new(|_| Vec::new()),
        }
    }
}

/// Per-particle side information written to particle dumps.
struct AuxColumns<'a, A> {
    names: Vec<String>,
    eval: ParticleColumns<'a, A>,
}

impl<A> AuxColumns<'_, A> {
    fn none() -> Self {
        Self {
            names: Vec::new(),
            eval: Box::new(|_| Vec::new()),
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn run_to_csv<A, K>(
    cfg: &ExperimentConfig,
    names: &[&str],
    set: &mut ParticleSet<f64, A>,
    kernel: &K,
    measurements: &[Measurement<f64>],
    extras: &Extras<'_, A>,
    aux: &AuxColumns<'_, A>,
    report: &mut Report,
) -> Result<(), HarnessError>
where
    A: Clone + Send + Sync,
    K: StepKernel<f64, A>,
{
    let header = cfg.header();
    let out = cfg.out_dir();
    let mut rows = Vec::with_capacity(measurements.len());
    let mut dumps = Vec::new();
    run_filter(set, kernel, measurements, &filter_config(cfg), &mut |set, s| {
        if s.k == 0 {
            return Ok(());
        }
        let mut row = vec![s.k.to_string(), fmt_f64(s.t)];
        row.extend(s.mean.iter().map(|v| fmt_f64(*v)));
        row.extend(s.var_diag.iter().map(|v| fmt_f64(*v)));
        row.push(fmt_f64(s.ess));
        row.push(fmt_f64(s.log_marginal));
        row.push(u8::from(s.resampled).to_string());
        row.extend((extras.eval)(set).into_iter().map(fmt_f64));
        rows.push(row);
        if cfg.filter.dump_steps.contains(&s.k) {
            let dump: Vec<Vec<String>> = set
                .particles()
                .iter()
                .enumerate()
                .map(|(i, p)| {
                    let mut r = vec![i.to_string(), fmt_f64(p.log_weight)];
                    r.extend(p.state.iter().map(|v| fmt_f64(*v)));
                    r.extend((aux.eval)(&p.aux).into_iter().map(fmt_f64));
                    r
                })
                .collect();
            dumps.push((s.k, dump));
        }
        Ok(())
    })?;

    let mut cols: Vec<String> = vec!["k".into(), "t".into()];
    cols.extend(names.iter().map(|n| format!("mean_{n}")));
    cols.extend(names.iter().map(|n| format!("var_{n}")));
    cols.extend(["ess", "log_marginal", "resampled"].iter().map(|s| s.to_string()));
    cols.extend(extras.names.iter().cloned());
    let path = out.join("summary.csv");
    write_csv(&path, &header, &cols, &rows)?;
    report.files.push(path);

    let mut dump_cols: Vec<String> = vec!["i".into(), "log_weight".into()];
    dump_cols.extend(names.iter().map(|n| n.to_string()));
    dump_cols.extend(aux.names.iter().cloned());
    for (k, dump) in dumps {
        let path = out.join(format!("particles_k{k}.csv"));
        write_csv(&path, &header, &dump_cols, &dump)?;
        report.files.push(path);
    }
    report.lines.push(format!(
        "processed {} measurements with {} particles, log-marginal {:.6}",
        measurements.len(),
        set.len(),
        set.log_marginal()
    ));
    Ok(())
}

/// Weighted mixture of per-particle distributions, grouped by identical
/// statistics in a fixed order.
fn grouped<A: Copy>(set: &ParticleSet<f64, A>, key: impl Fn(&A) -> (u64, u64)) -> Vec<(f64, A)> {
    let mut items: Vec<((u64, u64), f64, A)> = set
        .particles()
        .iter()
        .map(|p| (key(&p.aux), p.log_weight.exp(), p.aux))
        .filter(|(_, w, _)| *w > 0.0)
        .collect();
    items.sort_by_key(|it| it.0);
    let mut out: Vec<((u64, u64), f64, A)> = Vec::new();
    for it in items {
        match out.last_mut() {
            Some(last) if last.0 == it.0 => last.1 += it.1,
            _ => out.push(it),
        }
    }
    out.into_iter().map(|(_, w, a)| (w, a)).collect()
}

/// Quantile of a positive mixture distribution by bisection in log space.
fn mixture_quantile(cdf: &dyn Fn(f64) -> f64, p: f64, start: f64) -> f64 {
    let mut hi = if start.is_finite() && start > 0.0 { start } else { 1.0 };
    let mut guard = 0;
    while cdf(hi) < p && guard < 200 {
        hi *= 2.0;
        guard += 1;
    }
    let mut lo = hi;
    guard = 0;
    while cdf(lo) > p && guard < 200 {
        lo *= 0.5;
        guard += 1;
    }
    let (mut a, mut b) = (lo.ln(), hi.ln());
    for _ in 0..60 {
        let m = 0.5 * (a + b);
        if cdf(m.exp()) < p {
            a = m;
        } else {
            b = m;
        }
    }
    (0.5 * (a + b)).exp()
}

const QUANTILES: [f64; 3] = [0.05, 0.5, 0.95];

fn invchi2_columns(set: &ParticleSet<f64, InvChi2Stats<f64>>, with_quantiles: bool) -> Vec<f64> {
    let groups = grouped(set, |s| (s.nu.to_bits(), s.s2.to_bits()));
    let mean = groups.iter().map(|(w, s)| w * s.posterior_mean()).sum::<f64>();
    let mut out = vec![mean];
    if with_quantiles {
        // P(σ² ≤ v) = Q(ν/2, ν s² / (2v)).
        let cdf = |v: f64| {
            groups
                .iter()
                .map(|(w, s)| w * gamma_ur(0.5 * s.nu, 0.5 * s.nu * s.s2 / v))
                .sum::<f64>()
        };
        let start = groups.iter().map(|(w, s)| w * s.s2).sum::<f64>();
        out.extend(QUANTILES.iter().map(|&p| mixture_quantile(&cdf, p, start)));
    }
    out
}

fn gamma_columns(set: &ParticleSet<f64, GammaStats<f64>>, with_quantiles: bool) -> Vec<f64> {
    let groups = grouped(set, |s| (s.alpha.to_bits(), s.beta.to_bits()));
    let mean = groups.iter().map(|(w, s)| w * s.mean()).sum::<f64>();
    let mut out = vec![mean];
    if with_quantiles {
        let cdf = |v: f64| groups.iter().map(|(w, s)| w * gamma_lr(s.alpha, s.beta * v)).sum::<f64>();
        out.extend(QUANTILES.iter().map(|&p| mixture_quantile(&cdf, p, mean)));
    }
    out
}

fn param_names(prefix: &str, with_quantiles: bool) -> Vec<String> {
    let mut names = vec![format!("{prefix}_mean")];
    if with_quantiles {
        names.extend(["q05", "q50", "q95"].iter().map(|q| format!("{prefix}_{q}")));
    }
    names
}

fn gaussian_measurements(path: &Path, dim: usize) -> Result<Vec<Measurement<f64>>, HarnessError> {
    let ms = read_series(path)?;
    if let Some(m) = ms.iter().find(|m| m.y.len() != dim) {
        return Err(HarnessError::Io(format!(
            "{}: expected {dim} measurement column(s), found {}",
            path.display(),
            m.y.len()
        )));
    }
    Ok(ms)
}

/// Runs the configured filter over the measurement file.
pub fn cmd_filter(cfg: &ExperimentConfig) -> Result<Report, HarnessError> {
    let mut report = Report::default();
    report.lines.push(format!("seed = {}", cfg.run.seed));
    let f = &cfg.filter;
    let seed = cfg.run.seed;
    let n = f.particles;
    let mc = f.max_condition;
    let meas_path = PathBuf::from(&f.measurements);
    if !meas_path.exists() {
        return Err(HarnessError::Config(format!(
            "filter.measurements: file {} does not exist",
            meas_path.display()
        )));
    }
    let quant = f.quantiles;
    let names = state_names(&cfg.model);
    match &cfg.model {
        ModelConfig::Pendulum(p) => {
            let ms = gaussian_measurements(&meas_path, 1)?;
            let model = PendulumModel::new(p.a, p.q)?;
            let sde = pendulum_sde(&model, &p.m0, &p.p0)?;
            match f.kind {
                FilterKind::CdrbParam => {
                    let family = invchi2_family(f.prior_nu, f.prior_s2, 0)?;
                    let mut set = ParticleSet::from_prior_with(&sde, n, 0.0, seed, |_, _| family.prior())?;
                    let extras = Extras {
                        names: param_names("sigma2", quant),
                        eval: Box::new(|s: &ParticleSet<f64, InvChi2Stats<f64>>| invchi2_columns(s, quant)),
                    };
                    let aux = AuxColumns {
                        names: vec!["nu".into(), "s2".into()],
                        eval: Box::new(|s: &InvChi2Stats<f64>| vec![s.nu, s.s2]),
                    };
                    if f.proposal == ProposalKind::Ekf {
                        let proposal = pendulum_proposal(&model)?;
                        let kernel = CdrbParamKernel { model: &sde, proposal: &proposal, family: &family, max_condition: mc };
                        run_to_csv(cfg, &names, &mut set, &kernel, &ms, &extras, &aux, &mut report)?;
                    } else {
                        let proposal = ImportanceSpec::prior(&sde);
                        let kernel = CdrbParamKernel { model: &sde, proposal: &proposal, family: &family, max_condition: mc };
                        run_to_csv(cfg, &names, &mut set, &kernel, &ms, &extras, &aux, &mut report)?;
                    }
                }
                _ => {
                    let meas = LinearGaussianMeasurement::new(DMatrix::from_row_slice(1, 2, &[1.0, 0.0]), diag(&[f.sigma2]))?;
                    let mut set = ParticleSet::from_prior_with(&sde, n, 0.0, seed, |_, _| ())?;
                    if f.proposal == ProposalKind::Ekf {
                        let proposal = pendulum_proposal_known(&model, f.sigma2)?;
                        let kernel = CdSirKernel { model: &sde, proposal: &proposal, measurement: &meas, max_condition: mc };
                        run_to_csv(cfg, &names, &mut set, &kernel, &ms, &Extras::none(), &AuxColumns::none(), &mut report)?;
                    } else {
                        let proposal = ImportanceSpec::prior(&sde);
                        let kernel = CdSirKernel { model: &sde, proposal: &proposal, measurement: &meas, max_condition: mc };
                        run_to_csv(cfg, &names, &mut set, &kernel, &ms, &Extras::none(), &AuxColumns::none(), &mut report)?;
                    }
                }
            }
        }
        ModelConfig::Epidemic(_) => {
            let counts = read_counts(&meas_path)?;
            let ms = counts.measurements();
            let model = epidemic_model_of(cfg)?;
            let sde = model.sde();
            let family = gamma_poisson_family(f.prior_alpha, f.prior_beta, epidemic_theta)?;
            let mut set = ParticleSet::from_prior_with(&sde, n, 0.0, seed, |_, _| family.prior())?;
            let mut extra_names = param_names("population", quant);
            extra_names.push("indicator".into());
            let extras = Extras {
                names: extra_names,
                eval: Box::new(|s: &ParticleSet<f64, GammaStats<f64>>| {
                    let mut v = gamma_columns(s, quant);
                    v.push(epidemic_indicator(s));
                    v
                }),
            };
            let aux = AuxColumns {
                names: vec!["alpha".into(), "beta".into()],
                eval: Box::new(|s: &GammaStats<f64>| vec![s.alpha, s.beta]),
            };
            if f.proposal == ProposalKind::Ekf {
                let proposal = epidemic_proposal(&model)?;
                let kernel = CdrbParamKernel { model: &sde, proposal: &proposal, family: &family, max_condition: mc };
                run_to_csv(cfg, &names, &mut set, &kernel, &ms, &extras, &aux, &mut report)?;
            } else {
                let proposal = ImportanceSpec::prior(&sde);
                let kernel = CdrbParamKernel { model: &sde, proposal: &proposal, family: &family, max_condition: mc };
                run_to_csv(cfg, &names, &mut set, &kernel, &ms, &extras, &aux, &mut report)?;
            }
            if f.forecast_horizon > 0 {
                let fc = epidemic_predict(&set, &model, 1.0, f.forecast_horizon, f.forecast_substeps, f.forecast_sims, seed)?;
                let t_now = set.time();
                let rows: Vec<Vec<String>> = (0..fc.peak_interval.len())
                    .map(|i| {
                        vec![
                            i.to_string(),
                            format!("{}", (t_now + 1.0 + fc.peak_interval[i] as f64).round() as i64),
                            fmt_f64(fc.total_deaths[i]),
                            fmt_f64(fc.future_deaths[i]),
                        ]
                    })
                    .collect();
                let cols: Vec<String> = ["draw", "peak_week", "total_deaths", "future_deaths"].iter().map(|s| s.to_string()).collect();
                let path = cfg.out_dir().join("forecast.csv");
                write_csv(&path, &cfg.header(), &cols, &rows)?;
                report.files.push(path);
            }
        }
        ModelConfig::Ou(o) => {
            let ms = gaussian_measurements(&meas_path, 1)?;
            let sde = ou_model(o.lambda, o.q, o.m0, o.p0)?;
            let meas = LinearGaussianMeasurement::new(diag(&[1.0]), diag(&[f.sigma2]))?;
            let mut set = ParticleSet::from_prior_with(&sde, n, 0.0, seed, |_, _| ())?;
            let proposal = ImportanceSpec::prior(&sde);
            let kernel = CdSirKernel { model: &sde, proposal: &proposal, measurement: &meas, max_condition: mc };
            run_to_csv(cfg, &names, &mut set, &kernel, &ms, &Extras::none(), &AuxColumns::none(), &mut report)?;
        }
        ModelConfig::IntegratedOu(o) => {
            let ms = gaussian_measurements(&meas_path, 1)?;
            let sde = integrated_ou_model(o.q, DVector::from_column_slice(&o.m0), diag(&o.p0))?;
            let meas = LinearGaussianMeasurement::new(DMatrix::from_row_slice(1, 2, &[1.0, 0.0]), diag(&[f.sigma2]))?;
            let mut set = ParticleSet::from_prior_with(&sde, n, 0.0, seed, |_, _| ())?;
            let proposal = ImportanceSpec::prior(&sde);
            let kernel = CdSirKernel { model: &sde, proposal: &proposal, measurement: &meas, max_condition: mc };
            run_to_csv(cfg, &names, &mut set, &kernel, &ms, &Extras::none(), &AuxColumns::none(), &mut report)?;
        }
        ModelConfig::CondGauss(c) => {
            let ms = gaussian_measurements(&meas_path, 1)?;
            let (rb, aug) = cond_gauss_test_model(c.q_eta, c.q_beta, f.sigma2, c.p0)?;
            if f.kind == FilterKind::CdrbGauss {
                let p0 = c.p0;
                let mut set = ParticleSet::from_prior_with(&rb.sampled, n, 0.0, seed, |_, _| {
                    GaussianBlock::new(DVector::zeros(1), DMatrix::from_element(1, 1, p0)).expect("positive variance")
                })?;
                let proposal = ImportanceSpec::prior(&rb.sampled);
                let kernel = CdrbGaussKernel { model: &rb, proposal: &proposal, max_condition: mc };
                let extras = Extras {
                    names: vec!["block_mean_x1".into(), "block_var_x1".into()],
                    eval: Box::new(|s: &ParticleSet<f64, GaussianBlock<f64>>| {
                        let m = mixture_mean(s)[0];
                        let second = s.weighted_sum(|p| p.aux.p[(0, 0)] + p.aux.m[0] * p.aux.m[0]);
                        vec![m, second - m * m]
                    }),
                };
                let aux = AuxColumns {
                    names: vec!["m_x1".into(), "p_x1".into()],
                    eval: Box::new(|b: &GaussianBlock<f64>| vec![b.m[0], b.p[(0, 0)]]),
                };
                run_to_csv(cfg, &["x3"], &mut set, &kernel, &ms, &extras, &aux, &mut report)?;
            } else {
                let meas = LinearGaussianMeasurement::new(DMatrix::from_row_slice(1, 2, &[1.0, 0.0]), diag(&[f.sigma2]))?;
                let mut set = ParticleSet::from_prior_with(&aug, n, 0.0, seed, |_, _| ())?;
                let proposal = ImportanceSpec::prior(&aug);
                let kernel = CdSirKernel { model: &aug, proposal: &proposal, measurement: &meas, max_condition: mc };
                run_to_csv(cfg, &names, &mut set, &kernel, &ms, &Extras::none(), &AuxColumns::none(), &mut report)?;
            }
        }
    }
    Ok(report)
}

fn kl_reference(k: &super::config::KlConfig) -> f64 {
    match k.kind {
        KlKind::Constant => 0.5 * (k.a - k.b).powi(2) * k.horizon / k.sigma2,
        KlKind::Ou => {
            let dt = k.horizon / k.n_steps as f64;
            let sum: f64 = (0..k.n_steps).map(|j| k.x0 * k.x0 + k.sigma2 * j as f64 * dt).sum();
            0.5 / k.sigma2 * sum * dt
        }
    }
}

/// Monte Carlo KL estimate between two drifts under the `f_L` law.
pub fn cmd_kl(cfg: &ExperimentConfig) -> Result<Report, HarnessError> {
    let k = &cfg.kl;
    let mut report = Report::default();
    report.lines.push(format!("seed = {}", cfg.run.seed));
    let (a, b) = (k.a, k.b);
    type Field = Box<dyn Fn(&DVector<f64>, f64) -> DVector<f64> + Send + Sync>;
    let (f, f_l): (Field, Field) = match k.kind {
        KlKind::Constant => (
            Box::new(move |_x, _t| DVector::from_element(1, a)),
            Box::new(move |_x, _t| DVector::from_element(1, b)),
        ),
        KlKind::Ou => (Box::new(|x: &DVector<f64>, _t| -x), Box::new(|_x: &DVector<f64>, _t| DVector::zeros(1))),
    };
    let law = {
        let (kind, b) = (k.kind, k.b);
        SdeModel::new(
            1,
            move |_x: &DVector<f64>, _t| match kind {
                KlKind::Constant => DVector::from_element(1, b),
                KlKind::Ou => DVector::zeros(1),
            },
            TimeMatrix::scalar(1.0),
            DiffusionSpec::scalar(k.sigma2)?,
            |_| DVector::zeros(1),
        )?
    };
    let grid = TimeGrid::new(0.0, k.horizon, k.n_steps)?;
    let streams = StreamFactory::new(cfg.run.seed);
    let x0 = DVector::from_element(1, k.x0);
    let paths = (0..k.paths)
        .into_par_iter()
        .map(|i| {
            let mut rng = streams.stream(Purpose::Simulate, i as u64, 0);
            let incs = sample_brownian_increments(&grid, law.diffusion(), &mut rng)?;
            integrate_sde(&law, &x0, &grid, &incs)
        })
        .collect::<crate::Result<Vec<_>>>()?;
    let values = kl_path_integrals(&*f, &*f_l, &DMatrix::from_element(1, 1, k.sigma2), &grid, &paths)?;
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = if values.len() > 1 {
        values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    let se = (var / n).sqrt();
    let reference = kl_reference(k);
    let path = cfg.out_dir().join("kl.csv");
    let cols: Vec<String> = ["estimate", "std_error", "paths", "reference"].iter().map(|s| s.to_string()).collect();
    write_csv(
        &path,
        &cfg.header(),
        &cols,
        &[vec![fmt_f64(mean), fmt_f64(se), values.len().to_string(), fmt_f64(reference)]],
    )?;
    report.lines.push(format!("KL estimate {mean:.6} (SE {se:.2e}, reference {reference:.6})"));
    report.files.push(path);
    Ok(report)
}
