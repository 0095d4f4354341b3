//! Statistical properties of the numerical modules, each checked against an
//! independent reference at a fixed seed.

mod common;

use cdpf::girsanov::{propagate_coupled, ImportanceSpec};
use cdpf::importance_builder::{build_bridge, ekf_condition, EkfBridgeProposal, LinearizedMeasurement};
use cdpf::models::{ou_model, simulate_linear_gaussian, PendulumModel};
use cdpf::particle_filter::{
    run_filter, systematic_resample, systematic_indices, CdSirKernel, FilterConfig, LinearGaussianMeasurement, Measurement,
    ParticleSet, ProposalBuilder,
};
use cdpf::rng::{Purpose, StreamFactory};
use cdpf::sde_core::{
    integrate_ode, integrate_sde, sample_brownian_increments, BrownianIncrements, DiffusionSpec, OdeField, SdeModel, TimeGrid,
    TimeMatrix,
};
use common::{ks_statistic, mean_se, rms, LinearChain, NormalSource};
use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

fn v(x: &[f64]) -> DVector<f64> {
    DVector::from_column_slice(x)
}

fn m1(x: f64) -> DMatrix<f64> {
    DMatrix::from_element(1, 1, x)
}

fn increments(grid: &TimeGrid<f64>, q: &DiffusionSpec<f64>, seed: u64, index: u64) -> BrownianIncrements<f64> {
    let mut rng = StreamFactory::new(seed).stream(Purpose::Auxiliary, index, 0);
    sample_brownian_increments(grid, q, &mut rng).unwrap()
}

fn sum_chunks(fine: &[f64], factor: usize) -> BrownianIncrements<f64> {
    BrownianIncrements::from_vec(fine.chunks(factor).map(|c| v(&[c.iter().sum()])).collect())
}

/// Means and variances of 100 batch estimates: `(mean, SE)` of the
/// weighted mean and of the weighted variance.
fn batch_moments(x: &[f64], w: &[f64]) -> ((f64, f64), (f64, f64)) {
    let batch = x.len() / 100;
    let (means, vars): (Vec<f64>, Vec<f64>) = x
        .chunks(batch)
        .zip(w.chunks(batch))
        .map(|(xs, ws)| {
            let total: f64 = ws.iter().sum();
            let m = xs.iter().zip(ws).map(|(x, w)| x * w).sum::<f64>() / total;
            let var = xs.iter().zip(ws).map(|(x, w)| w * (x - m) * (x - m)).sum::<f64>() / total;
            (m, var)
        })
        .unzip();
    (mean_se(&means), mean_se(&vars))
}

#[test]
fn euler_strong_error_halves_with_step_on_ou() {
    let (lambda, x0, horizon, paths) = (1.0, 1.0, 1.0, 1000u64);
    let model = ou_model(lambda, 1.0, 0.0, 1.0).unwrap();
    let (n_coarse, n_fine) = (50usize, 6400usize);
    let h = horizon / n_fine as f64;
    let errors: Vec<(f64, f64)> = (0..paths)
        .into_par_iter()
        .map(|i| {
            let mut src = NormalSource::new(20_000 + i);
            let fine: Vec<f64> = (0..n_fine).map(|_| src.next() * h.sqrt()).collect();
            let end = |n: usize| {
                let grid = TimeGrid::new(0.0, horizon, n).unwrap();
                integrate_sde(&model, &v(&[x0]), &grid, &sum_chunks(&fine, n_fine / n)).unwrap().last().unwrap()[0]
            };
            let reference = end(n_fine);
            (end(n_coarse) - reference, end(2 * n_coarse) - reference)
        })
        .collect();
    let e1 = rms(&errors.iter().map(|e| e.0).collect::<Vec<_>>());
    let e2 = rms(&errors.iter().map(|e| e.1).collect::<Vec<_>>());
    let ratio = e1 / e2;
    println!("OU strong error {e1:.3e} -> {e2:.3e}, ratio {ratio:.3}");
    assert!((1.5..=2.5).contains(&ratio), "ratio {ratio}");
}

/// `Λ` for target `dx = −x dt + dβ` and the driftless proposal, from Itô's
/// formula for `∫ s ds` and a fine trapezoid for `∫ s² dt`.
fn ou_llr_reference(x0: f64, fine: &[f64], h: f64) -> f64 {
    let mut s = x0;
    let mut quad = 0.0;
    for db in fine {
        let next = s + db;
        quad += 0.5 * (s * s + next * next) * h;
        s = next;
    }
    let horizon = h * fine.len() as f64;
    -0.5 * (s * s - x0 * x0 - horizon) - 0.5 * quad
}

#[test]
fn log_ratio_error_shrinks_with_step() {
    let ou = SdeModel::new(1, |x: &DVector<f64>, _t| -x, TimeMatrix::scalar(1.0), DiffusionSpec::scalar(1.0).unwrap(), |_| {
        DVector::zeros(1)
    })
    .unwrap();
    let free = ImportanceSpec::constant(v(&[0.0]), m1(1.0));
    let (n_coarse, n_fine, x0) = (50usize, 12_800usize, 1.0);
    let h = 1.0 / n_fine as f64;
    let errors: Vec<(f64, f64)> = (0..1000u64)
        .into_par_iter()
        .map(|i| {
            let mut src = NormalSource::new(30_000 + i);
            let fine: Vec<f64> = (0..n_fine).map(|_| src.next() * h.sqrt()).collect();
            let exact = ou_llr_reference(x0, &fine, h);
            let err = |n: usize| {
                let grid = TimeGrid::new(0.0, 1.0, n).unwrap();
                propagate_coupled(&ou, &free, &v(&[x0]), &grid, &sum_chunks(&fine, n_fine / n)).unwrap().llr.value() - exact
            };
            (err(n_coarse), err(2 * n_coarse))
        })
        .collect();
    let ratio = rms(&errors.iter().map(|e| e.0).collect::<Vec<_>>()) / rms(&errors.iter().map(|e| e.1).collect::<Vec<_>>());
    println!("log-ratio RMS error ratio {ratio:.3}");
    assert!((1.3..=2.8).contains(&ratio), "ratio {ratio}");
}

#[test]
fn two_dimensional_likelihood_ratio_is_a_martingale() {
    let q = DMatrix::from_row_slice(2, 2, &[1.0, 0.3, 0.3, 0.5]);
    let model = SdeModel::new(
        2,
        |x: &DVector<f64>, _t| v(&[x[1].sin(), -x[0] + 0.5 * x[0].cos()]),
        TimeMatrix::Constant(DMatrix::identity(2, 2)),
        DiffusionSpec::constant(q).unwrap(),
        |_| DVector::zeros(2),
    )
    .unwrap();
    let imp = ImportanceSpec::constant(v(&[0.2, 0.0]), DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.5, 1.5]));
    let grid = TimeGrid::new(0.0, 1.0, 50).unwrap();
    let z: Vec<f64> = (0..100_000u64)
        .into_par_iter()
        .map(|i| {
            let incs = increments(&grid, model.diffusion(), 41, i);
            propagate_coupled(&model, &imp, &v(&[0.5, -0.5]), &grid, &incs).unwrap().llr.likelihood_ratio()
        })
        .collect();
    let (mean, se) = mean_se(&z);
    println!("2-D mean Z {mean:.5} ± {se:.5}");
    assert!((mean - 1.0).abs() <= 3.0 * se);
}

#[test]
fn weighted_scaled_process_has_the_target_law() {
    let model = ou_model(1.0, 1.0, 0.0, 1.0).unwrap();
    let imp = ImportanceSpec::constant(v(&[1.0]), m1(2.0));
    let grid = TimeGrid::new(0.0, 1.0, 50).unwrap();
    let x0 = v(&[0.5]);
    let n = 100_000u64;
    let weighted: Vec<(f64, f64)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let out = propagate_coupled(&model, &imp, &x0, &grid, &increments(&grid, model.diffusion(), 51, i)).unwrap();
            (out.s_star[0], out.llr.likelihood_ratio())
        })
        .collect();
    let direct: Vec<f64> = (0..n)
        .into_par_iter()
        .map(|i| integrate_sde(&model, &x0, &grid, &increments(&grid, model.diffusion(), 52, i)).unwrap().last().unwrap()[0])
        .collect();
    let (xs, ws): (Vec<f64>, Vec<f64>) = weighted.into_iter().unzip();
    let ((mw, mw_se), (vw, vw_se)) = batch_moments(&xs, &ws);
    let ((md, md_se), (vd, vd_se)) = batch_moments(&direct, &vec![1.0; direct.len()]);
    println!("weighted mean {mw:.4} var {vw:.4}; direct mean {md:.4} var {vd:.4}");
    assert!((mw - md).abs() <= 3.0 * (mw_se * mw_se + md_se * md_se).sqrt());
    assert!((vw - vd).abs() <= 3.0 * (vw_se * vw_se + vd_se * vd_se).sqrt());
}

#[test]
fn systematic_resampling_is_unbiased() {
    let mut src = NormalSource::new(61);
    let raw: Vec<f64> = (0..10).map(|_| src.next().abs() + 0.05).collect();
    let total: f64 = raw.iter().sum();
    let w: Vec<f64> = raw.iter().map(|x| x / total).collect();
    let trials = 10_000u64;
    let counts: Vec<Vec<f64>> = (0..trials)
        .map(|t| {
            let mut rng = StreamFactory::new(62).stream(Purpose::Resample, t, 0);
            let mut c = vec![0.0; w.len()];
            for i in systematic_resample(&w, &mut rng).unwrap() {
                c[i] += 1.0;
            }
            c
        })
        .collect();
    for (i, wi) in w.iter().enumerate() {
        let (mean, se) = mean_se(&counts.iter().map(|c| c[i]).collect::<Vec<_>>());
        let expected = w.len() as f64 * wi;
        assert!((mean - expected).abs() <= 3.0 * se + 1e-12, "particle {i}: {mean} vs {expected} (SE {se})");
    }
}

/// RMS deviation of filter means and variances from the exact chain Kalman filter.
fn kalman_gap(n: usize) -> (f64, f64) {
    let (lambda, q, r, substeps) = (1.0, 0.5, 0.25, 10);
    let model = ou_model(lambda, q, 0.0, 1.0).unwrap();
    let chain = LinearChain::ou(lambda, q, r, 0.1 / substeps as f64, substeps);
    let meas = LinearGaussianMeasurement::new(m1(1.0), m1(r)).unwrap();
    let prior = ImportanceSpec::prior(&model);
    let kernel = CdSirKernel { model: &model, proposal: &prior, measurement: &meas, max_condition: 1e12 };
    let config = FilterConfig { n_steps: substeps, ..FilterConfig::default() };
    let (mut dm, mut dv) = (Vec::new(), Vec::new());
    for seed in 0..4u64 {
        let data = simulate_linear_gaussian(&model, &v(&[0.3]), 0.1, 20, &m1(1.0), &m1(r), substeps, 70 + seed).unwrap();
        let ys: Vec<DVector<f64>> = data.measurements.iter().map(|m| m.y.clone()).collect();
        let kf = chain.filter(v(&[0.0]), m1(1.0), &ys);
        let mut set = ParticleSet::from_prior_with(&model, n, 0.0, 80 + seed, |_, _| ()).unwrap();
        let summaries = run_filter(&mut set, &kernel, &data.measurements, &config, &mut |_, _| Ok(())).unwrap();
        for (s, (m, p)) in summaries[1..].iter().zip(&kf) {
            dm.push(s.mean[0] - m[0]);
            dv.push(s.var_diag[0] - p[(0, 0)]);
        }
    }
    (rms(&dm), rms(&dv))
}

#[test]
fn filter_converges_to_kalman_with_particle_count() {
    let gaps: Vec<(f64, f64)> = [100, 1000, 10_000].iter().map(|&n| kalman_gap(n)).collect();
    println!("Kalman gaps (mean, var) at N = 1e2, 1e3, 1e4: {gaps:?}");
    assert!(gaps.windows(2).all(|g| g[1].0 < g[0].0 && g[1].1 < g[0].1));
}

#[test]
fn bridge_endpoint_matches_conditioned_moments() {
    let model = ou_model(1.0, 0.5, 0.0, 1.0).unwrap();
    let x_prev = v(&[1.0]);
    let grid = TimeGrid::new(0.0, 0.5, 10).unwrap();
    let proposal = EkfBridgeProposal::new(model.clone(), |_: &DVector<f64>, _: &(), _, y: &DVector<f64>| {
        Ok(LinearizedMeasurement { h: m1(1.0), r: m1(0.1), y: y.clone() })
    })
    .unwrap();
    let predicted = proposal.predict(&x_prev, &grid).unwrap();
    let posterior = ekf_condition(&predicted, &m1(1.0), &m1(0.1), &v(&[0.2])).unwrap();
    let imp = build_bridge(&x_prev, &posterior, grid.span(), &m1(0.5), &m1(1.0), 0..1).unwrap();
    let ends: Vec<f64> = (0..100_000u64)
        .into_par_iter()
        .map(|i| propagate_coupled(&model, &imp, &x_prev, &grid, &increments(&grid, model.diffusion(), 91, i)).unwrap().s[0])
        .collect();
    let (mean, se) = mean_se(&ends);
    let var = common::sample_var(&ends);
    let var_se = var * (2.0 / (ends.len() - 1) as f64).sqrt();
    let (m2, p22) = (posterior.m[0], posterior.p[(0, 0)]);
    println!("bridge end mean {mean:.5} vs {m2:.5}, var {var:.5} vs {p22:.5}");
    assert!((mean - m2).abs() <= 3.0 * se);
    assert!((var - p22).abs() <= 3.0 * var_se);
}

/// Equally weighted draws representing the weighted filter output.
fn filtered_draws<P: ProposalBuilder<f64, ()>>(model: &SdeModel<f64>, proposal: &P, y: f64, seed: u64) -> Vec<f64> {
    let meas = LinearGaussianMeasurement::new(m1(1.0), m1(0.5)).unwrap();
    let kernel = CdSirKernel { model, proposal, measurement: &meas, max_condition: 1e12 };
    let config = FilterConfig { ess_fraction: 1e-9, ..FilterConfig::default() };
    let mut set = ParticleSet::from_prior_with(model, 10_000, 0.0, seed, |_, _| ()).unwrap();
    run_filter(&mut set, &kernel, &[Measurement::scalar(0.5, y)], &config, &mut |_, _| Ok(())).unwrap();
    let idx = systematic_indices(&set.weights(), 0.5);
    idx.into_iter().map(|i| set.particles()[i].state[0]).collect()
}

#[test]
fn uninformative_bridge_matches_bootstrap_in_distribution() {
    let model = ou_model(1.0, 0.5, 0.0, 1.0).unwrap();
    let bridge = EkfBridgeProposal::new(model.clone(), |_: &DVector<f64>, _: &(), _, y: &DVector<f64>| {
        Ok(LinearizedMeasurement { h: m1(1.0), r: m1(1e12), y: y.clone() })
    })
    .unwrap();
    let prior = ImportanceSpec::prior(&model);
    let a = filtered_draws(&model, &bridge, 0.7, 101);
    let b = filtered_draws(&model, &prior, 0.7, 102);
    let d = ks_statistic(&a, &b);
    let critical = 1.36 * (2.0 / 10_000.0f64).sqrt();
    println!("KS statistic {d:.4}, 5% critical value {critical:.4}");
    assert!(d <= critical);
}

#[test]
fn pendulum_energy_error_is_first_order() {
    let model = PendulumModel::new(1.0, 1.0).unwrap();
    let sde = model.sde();
    let field = OdeField::new(move |x: &DVector<f64>, t| sde.full_drift(x, t));
    let x0 = v(&[1.5, 0.0]);
    let e0 = model.energy(&x0);
    let err = |n: usize| {
        let path = integrate_ode(&field, &x0, &TimeGrid::new(0.0, 10.0, n).unwrap()).unwrap();
        (model.energy(path.last().unwrap()) - e0).abs()
    };
    let errors: Vec<f64> = [1000, 2000, 4000].iter().map(|&n| err(n)).collect();
    for pair in errors.windows(2) {
        let ratio = pair[0] / pair[1];
        println!("energy error {:.4e} -> {:.4e}, ratio {ratio:.3}", pair[0], pair[1]);
        assert!((1.5..=2.7).contains(&ratio), "ratio {ratio}");
    }
}
