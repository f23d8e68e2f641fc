//! Gauss-Legendre quadrature, computed rather than tabulated.

use std::f64::consts::PI;

/// Nodes and weights of the `n`-point Gauss-Legendre rule on `[-1, 1]`.
///
/// Newton iteration on the three-term Legendre recurrence, seeded with the
/// Chebyshev angle estimate; converges to machine precision in a handful of
/// steps for any practical `n`.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n >= 1);
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    let m = n.div_ceil(2);
    for i in 0..m {
        let mut z = (PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0f64, 0.0f64);
            for k in 0..n {
                let p2 = p1;
                p1 = p0;
                p0 = ((2 * k + 1) as f64 * z * p1 - k as f64 * p2) / (k + 1) as f64;
            }
            // p0 = P_n(z), p1 = P_{n-1}(z).
            dp = n as f64 * (z * p0 - p1) / (z * z - 1.0);
            let dz = p0 / dp;
            z -= dz;
            if dz.abs() <= 1e-15 {
                break;
            }
        }
        x[i] = -z;
        x[n - 1 - i] = z;
        w[i] = 2.0 / ((1.0 - z * z) * dp * dp);
        w[n - 1 - i] = w[i];
    }
    (x, w)
}

/// Average of `f` over `[a, b]` with a given rule on `[-1, 1]`.
pub fn cell_average(f: impl Fn(f64) -> f64, a: f64, b: f64, nodes: &[f64], weights: &[f64]) -> f64 {
    let mid = 0.5 * (a + b);
    let half = 0.5 * (b - a);
    let sum: f64 = nodes.iter().zip(weights).map(|(x, w)| w * f(mid + half * x)).sum();
    0.5 * sum
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn weights_sum_to_two() {
        for n in [1, 2, 5, 16, 40] {
            let (_, w) = gauss_legendre(n);
            let s: f64 = w.iter().sum();
            assert!((s - 2.0).abs() < 1e-14, "n={n}: {s}");
        }
    }

    #[test]
    fn rule_is_exact_for_polynomials_up_to_degree_2n_minus_1() {
        let (x, w) = gauss_legendre(16);
        for k in 0..=31usize {
            let got: f64 = x.iter().zip(&w).map(|(xi, wi)| wi * xi.powi(k as i32)).sum();
            let want = if k % 2 == 1 { 0.0 } else { 2.0 / (k as f64 + 1.0) };
            assert!((got - want).abs() < 1e-13, "k={k}: {got} vs {want}");
        }
    }

    #[test]
    fn cell_average_of_affine_is_midpoint_value() {
        let (x, w) = gauss_legendre(16);
        let avg = cell_average(|t| 3.0 * t - 1.0, 0.2, 0.7, &x, &w);
        assert!((avg - (3.0 * 0.45 - 1.0)).abs() < 1e-14);
    }

    #[test]
    fn cell_average_of_gaussian_matches_fine_simpson() {
        let (x, w) = gauss_legendre(16);
        let f = |t: f64| (-(t - 0.5) * (t - 0.5) / 0.02).exp();
        let (a, b) = (0.3, 0.45);
        let avg = cell_average(f, a, b, &x, &w);
        // Composite Simpson oracle on 10_000 panels.
        let m = 10_000;
        let h = (b - a) / m as f64;
        let mut s = f(a) + f(b);
        for i in 1..m {
            s += f(a + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
        }
        let want = s * h / 3.0 / (b - a);
        assert!((avg - want).abs() < 1e-12, "{avg} vs {want}");
    }
}
