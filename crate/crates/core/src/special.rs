//! Log-densities and the log-gamma function used by the likelihood terms.

use nalgebra::{DMatrix, DVector};

use crate::{Error, Real, Result};

const LANCZOS_G: f64 = 7.0;
const LANCZOS: [f64; 9] = [
    0.999_999_999_999_809_9,
    676.520_368_121_885_1,
    -1_259.139_216_722_402_8,
    771.323_428_777_653_1,
    -176.615_029_162_140_6,
    12.507_343_278_686_905,
    -0.138_571_095_265_720_12,
    9.984_369_578_019_572e-6,
    1.505_632_735_149_311_6e-7,
];

/// `ln Γ(x)` for `x > 0` (Lanczos approximation, reflection below 1/2).
pub fn ln_gamma<T: Real>(x: T) -> T {
    let half = T::lit(0.5);
    if x < half {
        // Γ(x)Γ(1-x) = π / sin(πx)
        let pi = T::pi();
        return (pi / (pi * x).sin().abs()).ln() - ln_gamma(T::one() - x);
    }
    let x = x - T::one();
    let mut acc = T::lit(LANCZOS[0]);
    for (i, &c) in LANCZOS.iter().enumerate().skip(1) {
        acc += T::lit(c) / (x + T::from_usize_exact(i));
    }
    let t = x + T::lit(LANCZOS_G) + half;
    half * T::two_pi().ln() + (x + half) * t.ln() - t + acc.ln()
}

/// `ln N(y | mean, var)` for scalars.
pub fn normal_log_pdf<T: Real>(y: T, mean: T, var: T) -> T {
    let r = y - mean;
    -T::lit(0.5) * ((T::two_pi() * var).ln() + r * r / var)
}

/// `ln N(y | mean, cov)` via a Cholesky factorisation of `cov`.
pub fn mvn_log_pdf<T: Real>(y: &DVector<T>, mean: &DVector<T>, cov: &DMatrix<T>) -> Result<T> {
    let n = y.len();
    if mean.len() != n || cov.nrows() != n || cov.ncols() != n {
        return Err(Error::Dimension(format!(
            "Gaussian density of a {n}-vector with mean {} and covariance {}x{}",
            mean.len(),
            cov.nrows(),
            cov.ncols()
        )));
    }
    let chol = cov.clone().cholesky().ok_or(Error::SingularMatrix {
        name: "innovation covariance",
        t: f64::NAN,
        cond: f64::INFINITY,
    })?;
    let r = y - mean;
    let z = chol.l().solve_lower_triangular(&r).ok_or(Error::SingularMatrix {
        name: "innovation covariance",
        t: f64::NAN,
        cond: f64::INFINITY,
    })?;
    let log_det: T = chol
        .l()
        .diagonal()
        .iter()
        .fold(T::zero(), |acc, &d| acc + d.ln())
        * T::lit(2.0);
    Ok(-T::lit(0.5) * (T::from_usize_exact(n) * T::two_pi().ln() + log_det + z.dot(&z)))
}

/// Log density of a location-scale Student-t with `nu` degrees of freedom,
/// location `loc` and squared scale `scale2`.
pub fn student_t_log_pdf<T: Real>(y: T, nu: T, loc: T, scale2: T) -> T {
    let half = T::lit(0.5);
    let r = y - loc;
    ln_gamma(half * (nu + T::one())) - ln_gamma(half * nu)
        - half * (nu * T::pi() * scale2).ln()
        - half * (nu + T::one()) * (T::one() + r * r / (nu * scale2)).ln()
}
