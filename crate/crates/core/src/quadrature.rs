//! One-dimensional adaptive quadrature.

/// Adaptive Simpson on [a, b] to absolute tolerance `tol`.
pub fn adaptive_simpson(f: &dyn Fn(f64) -> f64, a: f64, b: f64, tol: f64, max_depth: u32) -> f64 {
    let fa = f(a);
    let fb = f(b);
    let m = 0.5 * (a + b);
    let fm = f(m);
    let whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb);
    refine(f, a, b, fa, fm, fb, whole, tol, max_depth)
}

#[allow(clippy::too_many_arguments)]
fn refine(f: &dyn Fn(f64) -> f64, a: f64, b: f64, fa: f64, fm: f64, fb: f64, whole: f64, tol: f64, depth: u32) -> f64 {
    let m = 0.5 * (a + b);
    let lm = 0.5 * (a + m);
    let rm = 0.5 * (m + b);
    let flm = f(lm);
    let frm = f(rm);
    let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
    let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
    let diff = left + right - whole;
    if depth == 0 || diff.abs() <= 15.0 * tol {
        return left + right + diff / 15.0;
    }
    refine(f, a, m, fa, flm, fm, left, tol / 2.0, depth - 1) + refine(f, m, b, fm, frm, fb, right, tol / 2.0, depth - 1)
}

/// ∫ f over the real line for integrands concentrated near `center` on
/// length `scale`: [center − 40·scale, center + 40·scale] cut into unit pieces.
pub fn integrate_line(f: &dyn Fn(f64) -> f64, center: f64, scale: f64, tol: f64) -> f64 {
    let pieces = 80;
    let lo = center - 40.0 * scale;
    let h = 80.0 * scale / pieces as f64;
    (0..pieces).map(|i| adaptive_simpson(f, lo + i as f64 * h, lo + (i + 1) as f64 * h, tol / pieces as f64, 16)).sum()
}

/// ∫_a^∞ f for integrands with Gaussian-like tails on length `scale`.
pub fn integrate_upper(f: &dyn Fn(f64) -> f64, a: f64, scale: f64, tol: f64) -> f64 {
    let pieces = 80;
    let h = 80.0 * scale / pieces as f64;
    (0..pieces).map(|i| adaptive_simpson(f, a + i as f64 * h, a + (i + 1) as f64 * h, tol / pieces as f64, 16)).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn polynomials_are_exact() {
        let v = adaptive_simpson(&|x| x * x * x - 2.0 * x, 0.0, 2.0, 1e-12, 20);
        assert!((v - 0.0).abs() < 1e-12);
    }

    #[test]
    fn gaussian_mass_and_tail() {
        let pdf = |x: f64| (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
        assert!((integrate_line(&pdf, 0.0, 1.0, 1e-12) - 1.0).abs() < 1e-10);
        let tail = integrate_upper(&pdf, 2.0, 1.0, 1e-13);
        assert!((tail - 0.022750131948179195).abs() < 1e-10);
    }
}
