//! Analytic model: multipole surfaces, defect-to-coefficient map, pseudo-potential and minima.
//!
//! In complex form the perturbed surface is `Re f(w)` with `w = z/r̄0` and
//! `f(w) = h0·(w⁴ − A·w² − B·w)`, `A = a1 − i·a2`, `B = a3 − i·a4`.

use std::f64::consts::PI;

use num_complex::Complex64;

use crate::error::{Result, TrapError};
use crate::geometry::{DefectSet, TrapConfig};
use crate::pattern::MinimaPattern;
use crate::roots::{dedup, newton_zero, polynomial_roots, seed_grid};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Basis {
    U1,
    V1,
    U2,
    V2,
    U4,
    V4,
}

pub fn basis_eval(kind: Basis, p: Complex64, r_norm: f64) -> f64 {
    let (x, y) = (p.re / r_norm, p.im / r_norm);
    match kind {
        Basis::U1 => x,
        Basis::V1 => y,
        Basis::U2 => x * x - y * y,
        Basis::V2 => 2.0 * x * y,
        Basis::U4 => x.powi(4) - 6.0 * x * x * y * y + y.powi(4),
        Basis::V4 => 4.0 * x.powi(3) * y - 4.0 * x * y.powi(3),
    }
}

/// How the shearing constant is chosen.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ShearScaling {
    /// Reference value 1.404, confirmed by the shearing calibration run.
    Reference,
    /// Tabulated polynomial in rd/r0 (gives ≈5.59 at 0.375).
    Polynomial,
    Fixed(f64),
}

pub const REFERENCE_HH: f64 = 1.404;
pub const HP_PRIME: f64 = 0.1;
pub const RATIO_RANGE: (f64, f64) = (0.02, 0.55);

pub const H0_POLY: [f64; 7] = [-0.4557, -7.028, 53.7, -254.0, 687.0, -973.0, 556.0];
pub const HC_POLY: [f64; 5] = [0.565, 1.138, -2.073, 3.021, -1.995];
pub const HL_POLY: [f64; 5] = [1.141, 4.869, -5.880, 10.696, -6.975];
pub const HP_POLY: [f64; 5] = [0.614, 5.639, -16.260, 29.980, -22.084];
pub const HH_POLY: [f64; 5] = [4.208, 4.989, -3.753, -0.0025, 2.1279];

pub fn poly_eval(c: &[f64], x: f64) -> f64 {
    c.iter().rev().fold(0.0, |acc, v| acc * x + v)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScalingCoeffs {
    pub h0: f64,
    pub hc: f64,
    pub hl: f64,
    pub hp: f64,
    pub hp_prime: f64,
    pub hh: f64,
    /// Set when the ratio lies outside the fitted range.
    pub extrapolated: bool,
}

pub fn scaling_coeffs(ratio: f64) -> ScalingCoeffs {
    scaling_coeffs_with(ratio, ShearScaling::Reference)
}

pub fn scaling_coeffs_with(ratio: f64, shear: ShearScaling) -> ScalingCoeffs {
    let hh = match shear {
        ShearScaling::Reference => REFERENCE_HH,
        ShearScaling::Polynomial => poly_eval(&HH_POLY, ratio),
        ShearScaling::Fixed(v) => v,
    };
    ScalingCoeffs {
        h0: poly_eval(&H0_POLY, ratio),
        hc: poly_eval(&HC_POLY, ratio),
        hl: poly_eval(&HL_POLY, ratio),
        hp: poly_eval(&HP_POLY, ratio),
        hp_prime: HP_PRIME,
        hh,
        extrapolated: !(RATIO_RANGE.0..=RATIO_RANGE.1).contains(&ratio),
    }
}

/// Weights of U2, V2, U1, V1 in the perturbation, with global scale and normalization radius.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PerturbationCoeffs {
    pub a: [f64; 4],
    pub h0: f64,
    pub r_bar0: f64,
}

pub const COEFF_BOUND: f64 = 0.15;

impl PerturbationCoeffs {
    pub fn new(a: [f64; 4], cfg: &TrapConfig) -> Self {
        PerturbationCoeffs { a, h0: scaling_coeffs(cfg.ratio()).h0, r_bar0: cfg.r0 }
    }

    pub fn zero(cfg: &TrapConfig) -> Self {
        Self::new([0.0; 4], cfg)
    }

    pub fn with_a(&self, a: [f64; 4]) -> Self {
        PerturbationCoeffs { a, ..*self }
    }

    pub fn quadrupole(&self) -> Complex64 {
        Complex64::new(self.a[0], -self.a[1])
    }

    pub fn dipole(&self) -> Complex64 {
        Complex64::new(self.a[2], -self.a[3])
    }

    pub fn check_bounds(&self) -> Result<()> {
        for (i, v) in self.a.iter().enumerate() {
            if !(v.abs() <= COEFF_BOUND) {
                const N: [&str; 4] = ["a1", "a2", "a3", "a4"];
                return Err(TrapError::OutOfBounds { name: N[i], value: *v });
            }
        }
        Ok(())
    }

    /// Dimensionless field polynomial `g(w) = 4w³ − 2A·w − B` and its derivative.
    pub fn field_poly(&self, w: Complex64) -> (Complex64, Complex64) {
        let (qa, qb) = (self.quadrupole(), self.dipole());
        (4.0 * w * w * w - 2.0 * qa * w - qb, 12.0 * w * w - 2.0 * qa)
    }

    /// Zeros of the field polynomial (positions in m); the pseudo-potential vanishes there.
    pub fn critical_points(&self) -> [Complex64; 3] {
        let (qa, qb) = (self.quadrupole(), self.dipole());
        let r = polynomial_roots(&[-qb / 4.0, -qa / 2.0, Complex64::new(0.0, 0.0)]);
        [r[0] * self.r_bar0, r[1] * self.r_bar0, r[2] * self.r_bar0]
    }
}

/// Switches for parts of the defect-to-coefficient map.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelOptions {
    /// Include the quadrupole correction of the splitting term.
    pub split_correction: bool,
}

impl Default for ModelOptions {
    fn default() -> Self {
        ModelOptions { split_correction: true }
    }
}

pub fn coeffs_from_defects(d: &DefectSet, s: &ScalingCoeffs) -> PerturbationCoeffs {
    coeffs_from_defects_with(d, s, ModelOptions::default())
}

pub fn coeffs_from_defects_with(d: &DefectSet, s: &ScalingCoeffs, opts: ModelOptions) -> PerturbationCoeffs {
    let f1 = 1.0 + d.delta.abs() / PI;
    let f2 = 1.0 + 2.0 * d.delta.abs() / PI;
    let dr = d.delta_r / d.r_bar0;
    let (c2, s2) = ((2.0 * d.delta).cos(), (2.0 * d.delta).sin());
    let (c1, s1) = (d.delta.cos(), d.delta.sin());
    let bt = d.beta_t * (1.0 - 3.0 * dr);
    let bs = d.beta_s * (1.0 + 3.0 * dr);

    let norm = d.x0.hypot(d.y0);
    let (q1, q2) = if opts.split_correction && norm > 0.0 {
        (-s.hp_prime * (d.x0 * d.x0 - d.y0 * d.y0) / norm, s.hp_prime * 2.0 * d.x0 * d.y0 / norm)
    } else {
        (0.0, 0.0)
    };

    let a1 = s.hc * f2 * (d.l_s * c2 - d.l_t * s2) + s.hh * f1 * (bt * c1 + bs * s1) + q1;
    let a2 = s.hc * f2 * (d.l_t * c2 - d.l_s * s2) + s.hh * f1 * (bt * s1 + bs * c1) + q2;

    let k = 4.0 * d.beta_t / PI;
    let cross = (2.0 * d.beta_t).sin() * (2.0 * d.beta_s).cos();
    let sbs = (2.0 * d.beta_s).sin();
    let a3 = f2
        * (s.hl * ((1.0 + k) * d.xl_s + d.xl_t - k * d.yl_t) + s.hp * (1.0 + cross) * d.x0
            - sbs * d.y0);
    let a4 = f2
        * (s.hl * ((1.0 - k) * d.yl_s + d.yl_t - k * d.xl_t) + s.hp * (1.0 - cross) * d.y0
            - sbs * d.x0);
    PerturbationCoeffs { a: [a1, a2, a3, a4], h0: s.h0, r_bar0: d.r_bar0 }
}

/// `U_R = h0·(U4 − W)`.
pub fn analytic_rf_surface(c: &PerturbationCoeffs, p: Complex64) -> f64 {
    let r = c.r_bar0;
    let w = basis_eval(Basis::U2, p, r) * c.a[0]
        + basis_eval(Basis::V2, p, r) * c.a[1]
        + basis_eval(Basis::U1, p, r) * c.a[2]
        + basis_eval(Basis::V1, p, r) * c.a[3];
    c.h0 * (basis_eval(Basis::U4, p, r) - w)
}

/// Complex field `F'(z)` of the RF potential `V_rf·U_R` (V/m); `|E| = |F'|`.
pub fn analytic_field(c: &PerturbationCoeffs, cfg: &TrapConfig, p: Complex64) -> Complex64 {
    let (g, _) = c.field_poly(p / c.r_bar0);
    g * (cfg.v_rf * c.h0 / c.r_bar0)
}

/// Pseudo-potential (J) and its gradient (J/m).
pub fn analytic_pseudo(c: &PerturbationCoeffs, cfg: &TrapConfig, p: Complex64) -> (f64, [f64; 2]) {
    let scale = cfg.v_rf * c.h0 / c.r_bar0;
    let (g, dg) = c.field_poly(p / c.r_bar0);
    let f1 = g * scale;
    let f2 = dg * (scale / c.r_bar0);
    let pre = cfg.pseudo_prefactor();
    let prod = f1.conj() * f2;
    (pre * f1.norm_sqr(), [2.0 * pre * prod.re, -2.0 * pre * prod.im])
}

/// Local minima of the analytic pseudo-potential inside the disk of radius 0.6·r̄0.
///
/// Minima of |F'|² are the zeros of F'; they are located by damped Newton from a seed
/// grid of spacing r̄0/16 and merged within `cfg.pixel/4`.
pub fn analytic_minima(c: &PerturbationCoeffs, cfg: &TrapConfig) -> Result<MinimaPattern> {
    if c.a.iter().all(|v| *v == 0.0) {
        return Ok(MinimaPattern::single(Complex64::new(0.0, 0.0)));
    }
    let f = |w: Complex64| c.field_poly(w);
    let scale = 1.0 + c.a.iter().map(|v| v.abs()).sum::<f64>();
    let mut found = Vec::new();
    for seed in seed_grid(Complex64::new(0.0, 0.0), 0.6, 1.0 / 16.0) {
        if let Some(w) = newton_zero(&f, seed, 0.05, 1e-14, 1e-13 * scale) {
            if w.norm() <= 0.6 {
                found.push(w * c.r_bar0);
            }
        }
    }
    let pts = dedup(&found, cfg.pixel / 4.0);
    match pts.len() {
        0 => Err(TrapError::FlatField),
        n if n > 3 => Err(TrapError::ModelViolation { count: n }),
        _ => Ok(MinimaPattern::new(pts)),
    }
}

/// Minima of the model from the cubic's roots (no grid search); merged within `tol`.
pub fn model_minima(c: &PerturbationCoeffs, tol: f64) -> MinimaPattern {
    MinimaPattern::new(dedup(&c.critical_points(), tol))
}

/// Exact coefficients whose three critical points equal a barycentred triple `p` (m).
pub fn coeffs_through_points(p: &[Complex64; 3], r_bar0: f64, h0: f64) -> PerturbationCoeffs {
    let w: Vec<Complex64> = p.iter().map(|z| z / r_bar0).collect();
    let e2 = w[0] * w[1] + w[0] * w[2] + w[1] * w[2];
    let e3 = w[0] * w[1] * w[2];
    // 4(w³ + e2·w − e3) = 4w³ − 2A·w − B
    let qa = -2.0 * e2;
    let qb = 4.0 * e3;
    PerturbationCoeffs { a: [qa.re, -qa.im, qb.re, -qb.im], h0, r_bar0 }
}
