//! Zero finding for analytic functions of one complex variable.

use num_complex::Complex64;

/// Damped Newton iteration on an analytic `f` returning `(f(z), f'(z))`.
///
/// Steps are capped at `max_step` and halved until `|f|` decreases. Returns the zero
/// once the step falls below `x_tol` and `|f| <= f_tol`.
pub fn newton_zero<F>(f: &F, z0: Complex64, max_step: f64, x_tol: f64, f_tol: f64) -> Option<Complex64>
where
    F: Fn(Complex64) -> (Complex64, Complex64),
{
    let mut z = z0;
    let (mut g, mut dg) = f(z);
    for _ in 0..200 {
        if g.norm() == 0.0 {
            return Some(z);
        }
        let mut step = -g / dg;
        if !step.re.is_finite() || !step.im.is_finite() {
            return None;
        }
        if step.norm() > max_step {
            step *= max_step / step.norm();
        }
        let mut accepted = false;
        for _ in 0..40 {
            let (g1, dg1) = f(z + step);
            if g1.norm() < g.norm() {
                z += step;
                g = g1;
                dg = dg1;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted || step.norm() < x_tol {
            return if g.norm() <= f_tol { Some(z) } else { None };
        }
    }
    if g.norm() <= f_tol {
        Some(z)
    } else {
        None
    }
}

/// Square grid of seeds with spacing `h` inside the disk of radius `radius` about `center`.
pub fn seed_grid(center: Complex64, radius: f64, h: f64) -> Vec<Complex64> {
    let n = (radius / h).floor() as i64;
    let mut out = Vec::new();
    for i in -n..=n {
        for j in -n..=n {
            let p = Complex64::new(j as f64 * h, i as f64 * h);
            if p.norm() <= radius {
                out.push(center + p);
            }
        }
    }
    out
}

/// Keeps the first of any group of points closer than `tol`.
pub fn dedup(points: &[Complex64], tol: f64) -> Vec<Complex64> {
    let mut out: Vec<Complex64> = Vec::new();
    for p in points {
        if out.iter().all(|q| (p - q).norm() > tol) {
            out.push(*p);
        }
    }
    out
}

/// All zeros of the monic polynomial with coefficients `c` (`z^n + c[n-1] z^(n-1) + … + c[0]`),
/// by simultaneous Aberth iteration.
pub fn polynomial_roots(c: &[Complex64]) -> Vec<Complex64> {
    let n = c.len();
    if c.iter().all(|v| v.norm() == 0.0) {
        return vec![Complex64::new(0.0, 0.0); n];
    }
    let eval = |z: Complex64| {
        let mut p = Complex64::new(1.0, 0.0);
        let mut dp = Complex64::new(0.0, 0.0);
        for k in (0..n).rev() {
            dp = dp * z + p;
            p = p * z + c[k];
        }
        (p, dp)
    };
    // Fujiwara-type radius of the root cloud
    let r0 = c.iter().enumerate().map(|(k, v)| v.norm().powf(1.0 / (n - k) as f64)).fold(0.0, f64::max);
    let mut z: Vec<Complex64> =
        (0..n).map(|k| Complex64::from_polar(r0, 0.4 + 2.0 * std::f64::consts::PI * k as f64 / n as f64)).collect();
    for _ in 0..500 {
        let mut moved = 0.0f64;
        for i in 0..n {
            let (p, dp) = eval(z[i]);
            if p.norm() == 0.0 {
                continue;
            }
            let ratio = p / dp;
            let s: Complex64 = (0..n).filter(|&j| j != i).map(|j| 1.0 / (z[i] - z[j])).sum();
            let w = ratio / (1.0 - ratio * s);
            if w.re.is_finite() && w.im.is_finite() {
                z[i] -= w;
                moved = moved.max(w.norm() / (z[i].norm() + r0));
            }
        }
        if moved < 1e-16 {
            break;
        }
    }
    z
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cubic_roots() {
        // (z-1)(z+2)(z-i)
        let r = [Complex64::new(1.0, 0.0), Complex64::new(-2.0, 0.0), Complex64::new(0.0, 1.0)];
        let e1 = r[0] + r[1] + r[2];
        let e2 = r[0] * r[1] + r[0] * r[2] + r[1] * r[2];
        let e3 = r[0] * r[1] * r[2];
        let found = polynomial_roots(&[-e3, e2, -e1]);
        for want in r {
            assert!(found.iter().any(|z| (z - want).norm() < 1e-13), "{found:?}");
        }
    }

    #[test]
    fn newton_finds_cube_root() {
        let f = |z: Complex64| (z * z * z - 8.0, 3.0 * z * z);
        let z = newton_zero(&f, Complex64::new(1.5, 0.3), 1.0, 1e-15, 1e-12).unwrap();
        assert!((z - 2.0).norm() < 1e-13);
    }

    #[test]
    fn grid_and_dedup() {
        let g = seed_grid(Complex64::new(0.0, 0.0), 1.0, 0.5);
        assert_eq!(g.len(), 13);
        let d = dedup(&[Complex64::new(0.0, 0.0), Complex64::new(1e-9, 0.0), Complex64::new(1.0, 0.0)], 1e-6);
        assert_eq!(d.len(), 2);
    }
}
