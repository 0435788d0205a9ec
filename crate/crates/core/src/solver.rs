//! Boundary-value solver for circular conductors in the open plane.
//!
//! The potential is written as
//! `Φ(z) = C + Σ_j [q_j·ln|z − z_j| + Re Σ_n α_jn·(ρ_j/(z − z_j))^n]`
//! with `Σ q_j = 0`. Block Gauss–Seidel sweeps alternate between the charges/constant
//! (small dense solve, mean-value property on each circle) and the multipole
//! coefficients of each circle (FFT of the residual boundary data).

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rayon::prelude::*;
use rustfft::{Fft, FftPlanner};

use crate::error::{Result, TrapError};
use crate::geometry::ElectrodeLayout;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Conductor {
    pub center: Complex64,
    pub radius: f64,
    pub potential: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverSettings {
    /// Multipole terms per circle.
    pub terms: usize,
    /// Collocation points per circle (power of two recommended).
    pub collocation: usize,
    /// Convergence threshold on the coefficient update, relative to max |potential|.
    pub tolerance: f64,
    pub max_sweeps: usize,
}

impl Default for SolverSettings {
    fn default() -> Self {
        SolverSettings { terms: 48, collocation: 256, tolerance: 1e-13, max_sweeps: 400 }
    }
}

/// Taylor expansion of the complex potential about the origin, `Σ γ_p (z/R)^p`.
#[derive(Debug, Clone)]
struct LocalExpansion {
    radius: f64,
    gamma: Vec<Complex64>,
}

impl LocalExpansion {
    fn eval(&self, z: Complex64) -> (Complex64, Complex64, Complex64) {
        let u = z / self.radius;
        let mut f = Complex64::new(0.0, 0.0);
        let mut d1 = Complex64::new(0.0, 0.0);
        let mut d2 = Complex64::new(0.0, 0.0);
        for g in self.gamma.iter().rev() {
            d2 = d2 * u + 2.0 * d1;
            d1 = d1 * u + f;
            f = f * u + g;
        }
        (f, d1 / self.radius, d2 / (self.radius * self.radius))
    }
}

#[derive(Debug, Clone)]
pub struct FieldSolution {
    pub conductors: Vec<Conductor>,
    pub charges: Vec<f64>,
    pub constant: f64,
    pub multipoles: Vec<Vec<Complex64>>,
    pub sweeps: usize,
    /// Last coefficient update (V).
    pub residual: f64,
    local: Option<LocalExpansion>,
}

impl FieldSolution {
    pub fn for_layout(layout: &ElectrodeLayout, settings: &SolverSettings) -> Result<Self> {
        let conductors = (0..8)
            .map(|k| Conductor { center: layout.centers[k], radius: layout.rd, potential: layout.potential(k) })
            .collect();
        Self::solve(conductors, settings)
    }

    pub fn solve(conductors: Vec<Conductor>, settings: &SolverSettings) -> Result<Self> {
        let k_n = conductors.len();
        let n_t = settings.terms;
        let m = settings.collocation;
        let vmax = conductors.iter().map(|c| c.potential.abs()).fold(0.0, f64::max);
        let mut sol = FieldSolution {
            conductors: conductors.clone(),
            charges: vec![0.0; k_n],
            constant: 0.0,
            multipoles: vec![vec![Complex64::new(0.0, 0.0); n_t]; k_n],
            sweeps: 0,
            residual: 0.0,
            local: None,
        };
        if k_n == 0 {
            return Ok(sol);
        }
        let fft: Arc<dyn Fft<f64>> = FftPlanner::new().plan_fft_forward(m);
        let ring: Vec<Complex64> =
            (0..m).map(|i| Complex64::from_polar(1.0, 2.0 * std::f64::consts::PI * i as f64 / m as f64)).collect();
        let mut buf = vec![Complex64::new(0.0, 0.0); m];
        let mut converged = false;

        for sweep in 0..settings.max_sweeps {
            // charges and constant
            let mut a = DMatrix::<f64>::zeros(k_n + 1, k_n + 1);
            let mut b = DVector::<f64>::zeros(k_n + 1);
            for k in 0..k_n {
                let ck = &conductors[k];
                let mut rhs = ck.potential;
                for j in 0..k_n {
                    if j == k {
                        a[(k, j)] = ck.radius.ln();
                    } else {
                        let cj = &conductors[j];
                        a[(k, j)] = (ck.center - cj.center).norm().ln();
                        rhs -= sol.multipole_part(j, ck.center).re;
                    }
                }
                a[(k, k_n)] = 1.0;
                b[k] = rhs;
            }
            for j in 0..k_n {
                a[(k_n, j)] = 1.0;
            }
            let x = a
                .lu()
                .solve(&b)
                .ok_or_else(|| TrapError::NotConverged { sweeps: sweep, residual: f64::INFINITY })?;
            sol.charges = x.iter().take(k_n).copied().collect();
            sol.constant = x[k_n];

            let mut change = 0.0f64;
            for k in 0..k_n {
                let ck = conductors[k];
                for (i, e) in ring.iter().enumerate() {
                    let p = ck.center + ck.radius * e;
                    let mut g = ck.potential - sol.constant;
                    for j in 0..k_n {
                        if j != k {
                            let cj = &conductors[j];
                            g -= sol.charges[j] * (p - cj.center).norm().ln() + sol.multipole_part(j, p).re;
                        }
                    }
                    buf[i] = Complex64::new(g, 0.0);
                }
                fft.process(&mut buf);
                for n in 0..n_t {
                    let an = (buf[n + 1] * (2.0 / m as f64)).conj();
                    change = change.max((an - sol.multipoles[k][n]).norm());
                    sol.multipoles[k][n] = an;
                }
            }
            sol.sweeps = sweep + 1;
            sol.residual = change;
            if change <= settings.tolerance * vmax.max(1e-300) {
                converged = true;
                break;
            }
        }
        if !converged {
            return Err(TrapError::NotConverged { sweeps: sol.sweeps, residual: sol.residual });
        }
        sol.build_local_expansion();
        Ok(sol)
    }

    /// `Σ_n α_jn (ρ_j/(z − z_j))^n` for conductor `j`.
    fn multipole_part(&self, j: usize, z: Complex64) -> Complex64 {
        let c = &self.conductors[j];
        let w = c.radius / (z - c.center);
        let mut acc = Complex64::new(0.0, 0.0);
        for a in self.multipoles[j].iter().rev() {
            acc = (acc + a) * w;
        }
        acc
    }

    /// Complex potential and its first two derivatives by direct summation.
    pub fn eval_direct(&self, z: Complex64) -> (Complex64, Complex64, Complex64) {
        let mut f = Complex64::new(self.constant, 0.0);
        let mut d1 = Complex64::new(0.0, 0.0);
        let mut d2 = Complex64::new(0.0, 0.0);
        for (j, c) in self.conductors.iter().enumerate() {
            let d = z - c.center;
            let inv = 1.0 / d;
            let w = c.radius * inv;
            let q = self.charges[j];
            f += q * d.ln();
            d1 += q * inv;
            d2 -= q * inv * inv;
            // Horner for Σ α_n w^n, Σ n α_n w^n, Σ n(n+1) α_n w^n
            let mut s0 = Complex64::new(0.0, 0.0);
            let mut s1 = Complex64::new(0.0, 0.0);
            let mut s2 = Complex64::new(0.0, 0.0);
            for (n, a) in self.multipoles[j].iter().enumerate().rev() {
                let nn = (n + 1) as f64;
                s0 = (s0 + a) * w;
                s1 = (s1 + a * nn) * w;
                s2 = (s2 + a * (nn * (nn + 1.0))) * w;
            }
            f += s0;
            d1 -= s1 * inv;
            d2 += s2 * inv * inv;
        }
        (f, d1, d2)
    }

    fn build_local_expansion(&mut self) {
        let clear = self
            .conductors
            .iter()
            .map(|c| c.center.norm() - c.radius)
            .fold(f64::INFINITY, f64::min);
        if !(clear > 0.0) || self.conductors.is_empty() {
            return;
        }
        let radius = 0.7 * clear;
        let m = 512;
        let mut buf: Vec<Complex64> = (0..m)
            .map(|i| {
                let z = Complex64::from_polar(radius, 2.0 * std::f64::consts::PI * i as f64 / m as f64);
                Complex64::new(self.eval_direct(z).0.re, 0.0)
            })
            .collect();
        FftPlanner::new().plan_fft_forward(m).process(&mut buf);
        let mut gamma: Vec<Complex64> = Vec::with_capacity(m / 2);
        gamma.push(buf[0] / m as f64);
        for p in 1..m / 2 {
            gamma.push(buf[p] * (2.0 / m as f64));
        }
        let peak = gamma.iter().map(|g| g.norm()).fold(0.0, f64::max);
        while gamma.len() > 1 && gamma.last().unwrap().norm() < 1e-17 * peak {
            gamma.pop();
        }
        self.local = Some(LocalExpansion { radius, gamma });
    }

    /// Radius of the disk where the fast local expansion is used (0 if none).
    pub fn local_radius(&self) -> f64 {
        self.local.as_ref().map_or(0.0, |l| l.radius)
    }

    /// `(F, F', F'')` with `Φ = Re F`; `∇Φ = (Re F', −Im F')`.
    pub fn eval(&self, z: Complex64) -> (Complex64, Complex64, Complex64) {
        match &self.local {
            Some(l) if z.norm() < l.radius => l.eval(z),
            _ => self.eval_direct(z),
        }
    }

    pub fn potential(&self, z: Complex64) -> f64 {
        match &self.local {
            Some(l) if z.norm() < l.radius => l.eval(z).0.re,
            _ => self.eval_direct(z).0.re,
        }
    }

    /// Complex field `F'(z)`; `|E| = |F'|`.
    pub fn field(&self, z: Complex64) -> Complex64 {
        self.eval(z).1
    }

    /// Largest boundary-condition violation, sampled at `samples` points per circle.
    pub fn boundary_error(&self, samples: usize) -> f64 {
        let mut err = 0.0f64;
        for c in &self.conductors {
            for i in 0..samples {
                let p = c.center
                    + Complex64::from_polar(c.radius, 2.0 * std::f64::consts::PI * (i as f64 + 0.5) / samples as f64);
                err = err.max((self.eval_direct(p).0.re - c.potential).abs());
            }
        }
        err
    }

    /// Whether `z` lies inside any conductor.
    pub fn inside(&self, z: Complex64) -> bool {
        self.conductors.iter().any(|c| (z - c.center).norm() <= c.radius)
    }
}

/// Solutions with one conductor at 1 V and the others grounded; any potential assignment
/// on the same geometry is their linear combination.
#[derive(Debug, Clone)]
pub struct UnitResponses {
    pub units: Vec<FieldSolution>,
}

impl UnitResponses {
    pub fn for_layout(layout: &ElectrodeLayout, settings: &SolverSettings) -> Result<Self> {
        let units = (0..8)
            .into_par_iter()
            .map(|k| {
                let conductors = (0..8)
                    .map(|j| Conductor {
                        center: layout.centers[j],
                        radius: layout.rd,
                        potential: if j == k { 1.0 } else { 0.0 },
                    })
                    .collect();
                FieldSolution::solve(conductors, settings)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(UnitResponses { units })
    }

    /// Solution with conductor `k` held at `potentials[k]`.
    pub fn combine(&self, potentials: &[f64]) -> FieldSolution {
        assert_eq!(potentials.len(), self.units.len());
        let first = &self.units[0];
        let mut out = FieldSolution {
            conductors: first.conductors.clone(),
            charges: vec![0.0; first.charges.len()],
            constant: 0.0,
            multipoles: first.multipoles.iter().map(|m| vec![Complex64::new(0.0, 0.0); m.len()]).collect(),
            sweeps: 0,
            residual: 0.0,
            local: None,
        };
        let mut gamma: Vec<Complex64> = Vec::new();
        for (u, &v) in self.units.iter().zip(potentials) {
            out.constant += v * u.constant;
            out.sweeps = out.sweeps.max(u.sweeps);
            out.residual += v.abs() * u.residual;
            for (a, b) in out.charges.iter_mut().zip(&u.charges) {
                *a += v * b;
            }
            for (ma, mb) in out.multipoles.iter_mut().zip(&u.multipoles) {
                for (a, b) in ma.iter_mut().zip(mb) {
                    *a += v * b;
                }
            }
            if let Some(l) = &u.local {
                if gamma.len() < l.gamma.len() {
                    gamma.resize(l.gamma.len(), Complex64::new(0.0, 0.0));
                }
                for (a, b) in gamma.iter_mut().zip(&l.gamma) {
                    *a += v * b;
                }
            }
        }
        for (c, &v) in out.conductors.iter_mut().zip(potentials) {
            c.potential = v;
        }
        if let Some(l) = &first.local {
            out.local = Some(LocalExpansion { radius: l.radius, gamma });
        }
        out
    }

    pub fn for_amplitudes(&self, layout: &ElectrodeLayout) -> FieldSolution {
        let p: Vec<f64> = (0..8).map(|k| layout.potential(k)).collect();
        self.combine(&p)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{ElectrodeLayout, TrapConfig};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn perfect(v: f64) -> FieldSolution {
        let cfg = TrapConfig { v_rf: v, ..TrapConfig::default() };
        FieldSolution::for_layout(&ElectrodeLayout::ideal(&cfg), &SolverSettings::default()).unwrap()
    }

    #[test]
    fn boundary_conditions_hold() {
        let s = perfect(1.0);
        assert!(s.boundary_error(300) < 1e-12, "{}", s.boundary_error(300));
        assert!(s.potential(Complex64::new(0.0, 0.0)).abs() < 1e-12);
        assert!(s.sweeps < 100);
    }

    #[test]
    fn single_conductor() {
        let c = Conductor { center: Complex64::new(1e-3, 0.0), radius: 5e-4, potential: 1.0 };
        let s = FieldSolution::solve(vec![c], &SolverSettings::default()).unwrap();
        let p = Complex64::new(1.5e-3, 0.0);
        assert!((s.eval_direct(p).0.re - 1.0).abs() < 1e-15);
    }

    #[test]
    fn central_region_is_octupole() {
        let s = perfect(1.0);
        let r0 = 4e-3;
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let pts: Vec<Complex64> =
            (0..400).map(|_| Complex64::from_polar(rng.gen_range(0.0..0.4 * r0), rng.gen_range(0.0..6.3))).collect();
        let u4: Vec<f64> = pts.iter().map(|p| (p / r0).powi(4).re).collect();
        let v: Vec<f64> = pts.iter().map(|p| s.potential(*p)).collect();
        let c = u4.iter().zip(&v).map(|(a, b)| a * b).sum::<f64>() / u4.iter().map(|a| a * a).sum::<f64>();
        let res = u4.iter().zip(&v).map(|(a, b)| (c * a - b).powi(2)).sum::<f64>().sqrt();
        let norm = v.iter().map(|b| b * b).sum::<f64>().sqrt();
        assert!(res < 0.01 * norm, "{res} {norm}");
        assert!((c - 1.0043).abs() < 2e-3, "{c}");
    }

    #[test]
    fn local_expansion_matches_direct() {
        let cfg = TrapConfig::default();
        let layout = crate::geometry::random_layout(4, 0.03, &cfg).unwrap();
        let s = FieldSolution::for_layout(&layout, &SolverSettings::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..300 {
            let z = Complex64::from_polar(rng.gen_range(0.0..s.local_radius() * 0.999), rng.gen_range(0.0..6.3));
            let (a0, a1, a2) = s.eval(z);
            let (b0, b1, b2) = s.eval_direct(z);
            assert!((a0.re - b0.re).abs() < 1e-11 * 200.0);
            assert!((a1 - b1).norm() < 1e-9 * b1.norm().max(1e3));
            assert!((a2 - b2).norm() < 1e-7 * b2.norm().max(1e6));
        }
    }

    #[test]
    fn field_is_gradient() {
        let s = perfect(200.0);
        let z = Complex64::new(1.1e-3, -0.7e-3);
        let h = 1e-8;
        let gx = (s.potential(z + h) - s.potential(z - h)) / (2.0 * h);
        let gy = (s.potential(z + Complex64::new(0.0, h)) - s.potential(z - Complex64::new(0.0, h))) / (2.0 * h);
        let f = s.field(z);
        assert!((f.re - gx).abs() < 1e-5 * f.norm() && (-f.im - gy).abs() < 1e-5 * f.norm());
    }

    #[test]
    fn rotation_symmetry_of_field_magnitude() {
        let s = perfect(200.0);
        let rot = Complex64::from_polar(1.0, std::f64::consts::FRAC_PI_4);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..200 {
            let z = Complex64::from_polar(rng.gen_range(0.0..2.4e-3), rng.gen_range(0.0..6.3));
            let (a, b) = (s.field(z).norm(), s.field(z * rot).norm());
            // absolute floor: field scale V_rf/r0 = 5e4 V/m
            assert!((a - b).abs() <= 1e-9 * a + 5e-6, "{a} {b} {z}");
        }
    }

    #[test]
    fn unit_responses_superpose() {
        let cfg = TrapConfig::default();
        let layout = crate::geometry::random_layout(3, 0.01, &cfg).unwrap();
        let amps = [200.0, 201.0, 199.5, 200.2, 198.0, 200.0, 203.0, 200.1];
        let layout = layout.with_amplitudes(amps);
        let direct = FieldSolution::for_layout(&layout, &SolverSettings::default()).unwrap();
        let units = UnitResponses::for_layout(&layout, &SolverSettings::default()).unwrap();
        let comb = units.for_amplitudes(&layout);
        assert!(comb.boundary_error(64) < 1e-9);
        for z in [Complex64::new(0.0, 0.0), Complex64::new(3e-4, -1e-3), Complex64::new(2.5e-3, 1e-3)] {
            let (a, b) = (direct.eval(z), comb.eval(z));
            assert!((a.0.re - b.0.re).abs() < 1e-9);
            assert!((a.1 - b.1).norm() < 1e-6);
        }
    }
}
