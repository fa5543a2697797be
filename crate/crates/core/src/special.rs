//! Scalar special functions.
//!
//! The centrepiece is `E[ln (a + s e)^2]` for `e ~ N(0, 1)`, the expected log
//! of a squared Gaussian. With `z = a^2 / (2 s^2)` it equals
//!
//! ```text
//! ln(s^2 / 2) - C + sum_j Pois(j; z) h_j,     h_j = sum_{i<j} 2 / (2i + 1)
//! ```
//!
//! (`C` the Euler–Mascheroni constant), i.e. the mean log of a scaled
//! noncentral chi-square with one degree of freedom. For large `z` the
//! Poisson weights spread over many terms, and the asymptotic expansion in
//! `r^2 = s^2 / a^2` is both cheaper and exact to machine precision.

pub const EULER_GAMMA: f64 = 0.577_215_664_901_532_9;

/// Above this value of `z` the asymptotic expansion is used.
const Z_ASYMPTOTIC: f64 = 100.0;

pub fn erf(x: f64) -> f64 {
    libm::erf(x)
}

/// Value and partial derivatives of `E[ln (a + sqrt(v) e)^2]`, `e ~ N(0,1)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogSquareMoment {
    pub value: f64,
    /// Derivative with respect to the mean `a`.
    pub d_mean: f64,
    /// Derivative with respect to the variance `v`.
    pub d_var: f64,
}

/// `E[ln (a + sqrt(v) e)^2]` with its gradient. Requires `v > 0`.
pub fn expected_log_square(a: f64, v: f64) -> LogSquareMoment {
    debug_assert!(v > 0.0, "variance must be positive");
    let z = a * a / (2.0 * v);
    if z > Z_ASYMPTOTIC {
        return asymptotic(a, v);
    }
    // Poisson weights p_j = e^{-z} z^j / j!, built up iteratively.
    let mut p = (-z).exp();
    let mut h = 0.0;
    let mut series = 0.0;
    let mut slope = 0.0;
    let jmax = (z + 12.0 * z.sqrt() + 40.0) as usize;
    for j in 0..=jmax {
        let step = 2.0 / (2.0 * j as f64 + 1.0);
        series += p * h;
        slope += p * step;
        h += step;
        p *= z / (j as f64 + 1.0);
    }
    let value = (v / 2.0).ln() - EULER_GAMMA + series;
    // dz/da = a / v, dz/dv = -z / v
    LogSquareMoment { value, d_mean: slope * a / v, d_var: (1.0 - z * slope) / v }
}

fn asymptotic(a: f64, v: f64) -> LogSquareMoment {
    // E ln (1 + r e)^2 = sum_k c_k r^{2k},  c_k = -(2k-1)!! / k
    let a2 = a * a;
    let r2 = v / a2;
    let mut value = a2.ln();
    let mut dr2 = 0.0; // d/d(r^2) of the series
    let mut dfact = 1.0; // (2k-1)!!
    let mut pow = 1.0; // r^{2(k-1)}
    for k in 1..=20 {
        let kf = k as f64;
        dfact *= 2.0 * kf - 1.0;
        let c = -dfact / kf;
        dr2 += c * kf * pow;
        pow *= r2;
        value += c * pow;
        if (c * pow).abs() < 1e-18 * value.abs().max(1.0) {
            break;
        }
    }
    // r^2 = v / a^2: dr2/dv = 1/a^2, dr2/da = -2 v / a^3
    LogSquareMoment { value, d_mean: 2.0 / a + dr2 * (-2.0 * v / (a2 * a)), d_var: dr2 / a2 }
}

/// Gauss–Hermite nodes and weights for `int e^{-x^2} f(x) dx`.
///
/// Newton iteration on the orthonormal Hermite recurrence; accurate to about
/// 1e-14 for `n` up to a few hundred.
pub fn gauss_hermite(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n >= 1);
    let pim4 = std::f64::consts::PI.powf(-0.25);
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    let m = n.div_ceil(2);
    let nf = n as f64;
    let mut z = 0.0f64;
    for i in 0..m {
        z = match i {
            0 => (2.0 * nf + 1.0).sqrt() - 1.85575 * (2.0 * nf + 1.0).powf(-0.16667),
            1 => z - 1.14 * nf.powf(0.426) / z,
            2 => 1.86 * z - 0.86 * x[0],
            3 => 1.91 * z - 0.91 * x[1],
            _ => 2.0 * z - x[i - 2],
        };
        let mut pp = 0.0;
        for _ in 0..100 {
            let mut p1 = pim4;
            let mut p2 = 0.0;
            for j in 0..n {
                let p3 = p2;
                p2 = p1;
                let jf = j as f64;
                p1 = z * (2.0 / (jf + 1.0)).sqrt() * p2 - (jf / (jf + 1.0)).sqrt() * p3;
            }
            pp = (2.0 * nf).sqrt() * p2;
            let z1 = z;
            z = z1 - p1 / pp;
            if (z - z1).abs() <= 1e-15 * z.abs().max(1.0) {
                break;
            }
        }
        x[i] = z;
        x[n - 1 - i] = -z;
        w[i] = 2.0 / (pp * pp);
        w[n - 1 - i] = w[i];
    }
    (x, w)
}

/// `E[f(X)]` for `X ~ N(mean, var)` by `n`-node Gauss–Hermite quadrature.
pub fn gauss_hermite_expectation(mean: f64, var: f64, n: usize, f: impl Fn(f64) -> f64) -> f64 {
    let (x, w) = gauss_hermite(n);
    let s = (2.0 * var).sqrt();
    x.iter().zip(&w).map(|(xi, wi)| wi * f(mean + s * xi)).sum::<f64>() / std::f64::consts::PI.sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn centred_case_is_minus_euler_gamma() {
        let m = expected_log_square(0.0, 2.0);
        assert!((m.value + EULER_GAMMA).abs() < 1e-14);
    }

    #[test]
    fn hermite_weights_integrate_polynomials() {
        let (x, w) = gauss_hermite(50);
        let sqpi = std::f64::consts::PI.sqrt();
        assert!((w.iter().sum::<f64>() - sqpi).abs() < 1e-12);
        let m2: f64 = x.iter().zip(&w).map(|(x, w)| w * x * x).sum();
        assert!((m2 - sqpi / 2.0).abs() < 1e-12);
        let m8: f64 = x.iter().zip(&w).map(|(x, w)| w * x.powi(8)).sum();
        assert!((m8 - 105.0 / 16.0 * sqpi).abs() < 1e-10);
    }

    #[test]
    fn series_and_asymptotic_meet_at_the_switch() {
        let v = 0.3;
        let a = (2.0 * v * Z_ASYMPTOTIC).sqrt();
        let below = expected_log_square(a * (1.0 - 1e-12), v);
        let above = asymptotic(a, v);
        assert!((below.value - above.value).abs() < 1e-10);
        assert!((below.d_mean - above.d_mean).abs() < 1e-9);
        assert!((below.d_var - above.d_var).abs() < 1e-9);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        for &(a, v) in &[(0.0, 1.0), (0.3, 0.5), (-1.2, 0.2), (2.0, 0.01), (5.0, 0.1), (0.01, 3.0)] {
            let m = expected_log_square(a, v);
            let h = 1e-6;
            let da = (expected_log_square(a + h, v).value - expected_log_square(a - h, v).value) / (2.0 * h);
            let dv = (expected_log_square(a, v + h * v).value - expected_log_square(a, v - h * v).value) / (2.0 * h * v);
            assert!((da - m.d_mean).abs() < 1e-6 * (1.0 + da.abs()), "a={a} v={v}: {da} vs {}", m.d_mean);
            assert!((dv - m.d_var).abs() < 1e-6 * (1.0 + dv.abs()), "a={a} v={v}: {dv} vs {}", m.d_var);
        }
    }

    #[test]
    fn hermite_agrees_where_integrand_is_smooth() {
        // Far from the log singularity at zero (z >= 30) the 50-node rule is accurate.
        for &(a, v) in &[(3.0, 0.1), (1.0, 0.01), (-6.0, 0.5)] {
            let gh = gauss_hermite_expectation(a, v, 50, |x| (x * x).ln());
            let cf = expected_log_square(a, v).value;
            assert!((gh - cf).abs() < 1e-6, "a={a} v={v}: gh {gh} vs {cf}");
        }
    }
}
