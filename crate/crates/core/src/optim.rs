//! Derivative-free Nelder–Mead simplex minimizer.

#[derive(Debug, Clone, Copy)]
pub struct NelderMead {
    pub max_evals: usize,
    /// Stop when the simplex spread in every coordinate is below this.
    pub x_tol: f64,
    /// Stop when the spread of function values is below this.
    pub f_tol: f64,
}

impl Default for NelderMead {
    fn default() -> Self {
        NelderMead { max_evals: 4000, x_tol: 1e-9, f_tol: 0.0 }
    }
}

#[derive(Debug, Clone)]
pub struct Minimum {
    pub x: Vec<f64>,
    pub f: f64,
    pub evals: usize,
    pub converged: bool,
}

impl NelderMead {
    /// Minimizes `f` from `x0` with an initial simplex of per-coordinate `steps`.
    pub fn minimize<F: FnMut(&[f64]) -> f64>(&self, mut f: F, x0: &[f64], steps: &[f64]) -> Minimum {
        let n = x0.len();
        assert_eq!(steps.len(), n);
        let mut simplex: Vec<Vec<f64>> = vec![x0.to_vec()];
        for i in 0..n {
            let mut p = x0.to_vec();
            p[i] += steps[i];
            simplex.push(p);
        }
        let mut fx: Vec<f64> = simplex.iter().map(|p| f(p)).collect();
        let mut evals = n + 1;
        let (alpha, gamma, rho, sigma) = (1.0, 2.0, 0.5, 0.5);
        let mut converged = false;

        while evals < self.max_evals {
            let mut order: Vec<usize> = (0..=n).collect();
            order.sort_by(|&a, &b| fx[a].total_cmp(&fx[b]));
            simplex = order.iter().map(|&i| simplex[i].clone()).collect();
            fx = order.iter().map(|&i| fx[i]).collect();

            let x_spread = (0..n)
                .map(|j| {
                    simplex.iter().map(|p| (p[j] - simplex[0][j]).abs()).fold(0.0, f64::max)
                })
                .fold(0.0, f64::max);
            if x_spread <= self.x_tol || fx[n] - fx[0] <= self.f_tol {
                converged = true;
                break;
            }

            let mut centroid = vec![0.0; n];
            for p in &simplex[..n] {
                for j in 0..n {
                    centroid[j] += p[j] / n as f64;
                }
            }
            let along = |t: f64| -> Vec<f64> {
                (0..n).map(|j| centroid[j] + t * (simplex[n][j] - centroid[j])).collect()
            };

            let xr = along(-alpha);
            let fr = f(&xr);
            evals += 1;
            if fr < fx[0] {
                let xe = along(-gamma);
                let fe = f(&xe);
                evals += 1;
                if fe < fr {
                    simplex[n] = xe;
                    fx[n] = fe;
                } else {
                    simplex[n] = xr;
                    fx[n] = fr;
                }
            } else if fr < fx[n - 1] {
                simplex[n] = xr;
                fx[n] = fr;
            } else {
                let (xc, fc) = if fr < fx[n] {
                    let xc = along(-rho);
                    let fc = f(&xc);
                    (xc, fc)
                } else {
                    let xc = along(rho);
                    let fc = f(&xc);
                    (xc, fc)
                };
                evals += 1;
                if fc < fx[n].min(fr) {
                    simplex[n] = xc;
                    fx[n] = fc;
                } else {
                    for i in 1..=n {
                        for j in 0..n {
                            simplex[i][j] = simplex[0][j] + sigma * (simplex[i][j] - simplex[0][j]);
                        }
                        fx[i] = f(&simplex[i]);
                    }
                    evals += n;
                }
            }
        }
        let best = (0..=n).min_by(|&a, &b| fx[a].total_cmp(&fx[b])).unwrap();
        Minimum { x: simplex[best].clone(), f: fx[best], evals, converged }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rosenbrock() {
        let nm = NelderMead { max_evals: 20000, x_tol: 1e-10, f_tol: 0.0 };
        let r = nm.minimize(
            |x| (1.0 - x[0]).powi(2) + 100.0 * (x[1] - x[0] * x[0]).powi(2),
            &[-1.2, 1.0],
            &[0.1, 0.1],
        );
        assert!(r.converged);
        assert!((r.x[0] - 1.0).abs() < 1e-7 && (r.x[1] - 1.0).abs() < 1e-7, "{:?}", r.x);
    }

    #[test]
    fn quadratic_4d() {
        let c = [0.05, -0.02, 0.03, 0.01];
        let r = NelderMead::default().minimize(
            |x| x.iter().zip(c).map(|(a, b)| (a - b).powi(2) * 1e4).sum(),
            &[0.0; 4],
            &[0.01; 4],
        );
        for (a, b) in r.x.iter().zip(c) {
            assert!((a - b).abs() < 1e-8);
        }
    }
}
