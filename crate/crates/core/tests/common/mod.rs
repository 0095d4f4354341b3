//! Independent oracles shared by the integration tests.
#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};

/// Linear Euler chain `x ← A x + w`, `w ~ N(0, W)` applied `substeps` times
/// between measurements `y = H x + r`, `r ~ N(0, R)`.
pub struct LinearChain {
    pub a: DMatrix<f64>,
    pub w: DMatrix<f64>,
    pub h: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub substeps: usize,
}

impl LinearChain {
    /// Scalar OU `dx = −λ x dt + dβ`, `E[dβ²] = q dt`, observed directly.
    pub fn ou(lambda: f64, q: f64, r: f64, dt_sub: f64, substeps: usize) -> Self {
        Self {
            a: DMatrix::from_element(1, 1, 1.0 - lambda * dt_sub),
            w: DMatrix::from_element(1, 1, q * dt_sub),
            h: DMatrix::identity(1, 1),
            r: DMatrix::from_element(1, 1, r),
            substeps,
        }
    }

    /// Integrated OU `dx₁ = x₂ dt`, `dx₂ = −x₂ dt + dβ`, observing `x₁`.
    pub fn integrated_ou(q: f64, r: f64, dt_sub: f64, substeps: usize) -> Self {
        Self {
            a: DMatrix::from_row_slice(2, 2, &[1.0, dt_sub, 0.0, 1.0 - dt_sub]),
            w: DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 0.0, q * dt_sub]),
            h: DMatrix::from_row_slice(1, 2, &[1.0, 0.0]),
            r: DMatrix::from_element(1, 1, r),
            substeps,
        }
    }

    /// Exact Kalman filter of the chain; posterior `(m, P)` after each
    /// measurement.
    pub fn filter(&self, m0: DVector<f64>, p0: DMatrix<f64>, ys: &[DVector<f64>]) -> Vec<(DVector<f64>, DMatrix<f64>)> {
        let (mut m, mut p) = (m0, p0);
        let mut out = Vec::with_capacity(ys.len());
        for y in ys {
            for _ in 0..self.substeps {
                m = &self.a * &m;
                p = &self.a * &p * self.a.transpose() + &self.w;
            }
            let s = &self.h * &p * self.h.transpose() + &self.r;
            let k = &p * self.h.transpose() * s.clone().try_inverse().expect("S invertible");
            m = &m + &k * (y - &self.h * &m);
            p = &p - &k * &s * k.transpose();
            p = (&p + p.transpose()) * 0.5;
            out.push((m.clone(), p.clone()));
        }
        out
    }
}

/// `log ∫₀^∞ e^{f(v)} dv` by the trapezoid rule in `u = ln v` over
/// `[lo, hi]`; spectrally accurate for smooth integrands decaying at both ends.
pub fn log_integral_positive(log_f: impl Fn(f64) -> f64, lo: f64, hi: f64, n: usize) -> f64 {
    let h = (hi - lo) / n as f64;
    let vals: Vec<f64> = (0..=n)
        .map(|i| {
            let u = lo + h * i as f64;
            let w: f64 = if i == 0 || i == n { 0.5 } else { 1.0 };
            log_f(u.exp()) + u + w.ln()
        })
        .collect();
    logsumexp(&vals) + h.ln()
}

pub fn logsumexp(v: &[f64]) -> f64 {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

pub fn ln_factorial(n: u64) -> f64 {
    (1..=n).map(|k| (k as f64).ln()).sum()
}

/// Sample mean and its standard error.
pub fn mean_se(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

pub fn sample_var(v: &[f64]) -> f64 {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
}

pub fn rms(v: &[f64]) -> f64 {
    (v.iter().map(|x| x * x).sum::<f64>() / v.len() as f64).sqrt()
}

/// Two-sample Kolmogorov–Smirnov statistic.
pub fn ks_statistic(a: &[f64], b: &[f64]) -> f64 {
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (mut i, mut j, mut d) = (0usize, 0usize, 0.0f64);
    while i < a.len() && j < b.len() {
        let x = a[i].min(b[j]);
        while i < a.len() && a[i] <= x {
            i += 1;
        }
        while j < b.len() && b[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / a.len() as f64 - j as f64 / b.len() as f64).abs());
    }
    d
}

/// Deterministic standard normal draws from a seed (Box–Muller over a
/// ChaCha stream), independent of the crate's stream layout.
pub struct NormalSource(rand_chacha::ChaCha8Rng);

impl NormalSource {
    pub fn new(seed: u64) -> Self {
        use rand::SeedableRng;
        Self(rand_chacha::ChaCha8Rng::seed_from_u64(seed))
    }

    pub fn next(&mut self) -> f64 {
        use rand::Rng;
        let u1: f64 = 1.0 - self.0.random::<f64>();
        let u2: f64 = self.0.random();
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }
}
