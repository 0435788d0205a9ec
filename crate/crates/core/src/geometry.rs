//! Electrode layouts, the five-defect parameterization and its inverse.
//!
//! Electrode `k` sits nominally at angle `90° − 45°·k` (y up). Even indices form the
//! S-set (facing pairs along x and y), odd indices the T-set (facing pairs along the
//! diagonals). Even indices carry phase +1.

use std::f64::consts::{FRAC_PI_2, FRAC_PI_4, PI};

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Result, TrapError};

pub const ELEMENTARY_CHARGE: f64 = 1.602_176_634e-19;
pub const ATOMIC_MASS: f64 = 1.660_539_066_60e-27;
pub const BOLTZMANN: f64 = 1.380_649e-23;

/// Physical and numerical settings of a trap.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrapConfig {
    pub r0: f64,
    pub rd: f64,
    pub v_rf: f64,
    pub omega_rf: f64,
    pub charge: f64,
    pub mass: f64,
    pub pixel: f64,
}

impl Default for TrapConfig {
    fn default() -> Self {
        TrapConfig {
            r0: 4e-3,
            rd: 1.5e-3,
            v_rf: 200.0,
            omega_rf: 2.0 * PI * 3e6,
            charge: ELEMENTARY_CHARGE,
            mass: 40.0 * ATOMIC_MASS,
            pixel: 4e-6,
        }
    }
}

impl TrapConfig {
    pub fn new(r0: f64, rd: f64) -> Result<Self> {
        let cfg = TrapConfig { r0, rd, ..Default::default() };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn with_pixel(mut self, pixel: f64) -> Self {
        self.pixel = pixel;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(TrapError::InvalidConfig(m.to_string()));
        if !(self.r0 > 0.0) {
            return bad("r0 must be positive");
        }
        if !(self.rd > 0.0 && self.rd < self.r0) {
            return bad("rd must satisfy 0 < rd < r0");
        }
        if !(self.pixel > 0.0) {
            return bad("pixel must be positive");
        }
        if self.pixel > self.r0 / 100.0 * (1.0 + 1e-12) {
            return bad("pixel must not exceed r0/100");
        }
        if !(self.omega_rf > 0.0 && self.mass > 0.0) {
            return bad("omega_rf and mass must be positive");
        }
        Ok(())
    }

    pub fn ratio(&self) -> f64 {
        self.rd / self.r0
    }

    /// Nominal distance of electrode centers from the trap axis.
    pub fn center_radius(&self) -> f64 {
        self.r0 + self.rd
    }

    /// Prefactor turning |E|² (V²/m²) into pseudo-potential energy (J).
    pub fn pseudo_prefactor(&self) -> f64 {
        self.charge * self.charge / (4.0 * self.mass * self.omega_rf * self.omega_rf)
    }
}

/// Nominal polar angle of electrode `k`.
pub fn nominal_angle(k: usize) -> f64 {
    FRAC_PI_2 - FRAC_PI_4 * k as f64
}

pub fn phase_sign(k: usize) -> f64 {
    if k % 2 == 0 {
        1.0
    } else {
        -1.0
    }
}

/// Composition of the five basic defects.
///
/// Dimensionless entries are normalized by `r_bar0`. Conventions: `delta > 0` turns
/// the S-set clockwise and the T-set counter-clockwise; `beta_s > 0` tilts the x-facing
/// S axis clockwise and the y-facing one counter-clockwise; `beta_t > 0` tilts the
/// (x−y) T axis counter-clockwise and the (x+y) one clockwise; `(x0, y0)` is the S
/// centre relative to the T centre; sliding is normalized by half the as-built
/// facing distance, with the sign reversed for the T-set.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct DefectSet {
    pub l_s: f64,
    pub l_t: f64,
    pub xl_s: f64,
    pub yl_s: f64,
    pub xl_t: f64,
    pub yl_t: f64,
    pub x0: f64,
    pub y0: f64,
    pub beta_s: f64,
    pub beta_t: f64,
    pub delta: f64,
    pub r_bar0: f64,
    pub delta_r: f64,
}

pub const ANGLE_BOUND: f64 = PI / 15.0;
pub const DIMENSIONLESS_BOUND: f64 = 0.15;

impl DefectSet {
    pub const NAMES: [&'static str; 13] = [
        "l_s", "l_t", "xl_s", "yl_s", "xl_t", "yl_t", "x0", "y0", "beta_s", "beta_t", "delta",
        "r_bar0", "delta_r",
    ];

    pub fn ideal(r0: f64) -> Self {
        DefectSet { r_bar0: r0, ..Default::default() }
    }

    pub fn to_array(&self) -> [f64; 13] {
        [
            self.l_s, self.l_t, self.xl_s, self.yl_s, self.xl_t, self.yl_t, self.x0, self.y0,
            self.beta_s, self.beta_t, self.delta, self.r_bar0, self.delta_r,
        ]
    }

    pub fn from_array(a: [f64; 13]) -> Self {
        DefectSet {
            l_s: a[0],
            l_t: a[1],
            xl_s: a[2],
            yl_s: a[3],
            xl_t: a[4],
            yl_t: a[5],
            x0: a[6],
            y0: a[7],
            beta_s: a[8],
            beta_t: a[9],
            delta: a[10],
            r_bar0: a[11],
            delta_r: a[12],
        }
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        Self::NAMES.iter().position(|n| *n == name).map(|i| self.to_array()[i])
    }

    pub fn set(&mut self, name: &str, value: f64) -> Result<()> {
        let i = Self::NAMES
            .iter()
            .position(|n| *n == name)
            .ok_or_else(|| TrapError::InvalidConfig(format!("unknown defect parameter `{name}`")))?;
        let mut a = self.to_array();
        a[i] = value;
        *self = Self::from_array(a);
        Ok(())
    }

    /// Checks the validity bounds of the parameterization.
    pub fn check_bounds(&self) -> Result<()> {
        let a = self.to_array();
        if !(self.r_bar0 > 0.0) {
            return Err(TrapError::OutOfBounds { name: "r_bar0", value: self.r_bar0 });
        }
        for (i, name) in Self::NAMES.iter().enumerate().take(11) {
            let bound = if i >= 8 { ANGLE_BOUND } else { DIMENSIONLESS_BOUND };
            if !(a[i].abs() <= bound * (1.0 + 1e-12)) {
                return Err(TrapError::OutOfBounds { name, value: a[i] });
            }
        }
        let dr = self.delta_r / self.r_bar0;
        if !(dr.abs() <= DIMENSIONLESS_BOUND) {
            return Err(TrapError::OutOfBounds { name: "delta_r", value: self.delta_r });
        }
        Ok(())
    }
}

/// Eight circular electrodes with their RF amplitudes.
#[derive(Debug, Clone, PartialEq)]
pub struct ElectrodeLayout {
    pub centers: [Complex64; 8],
    pub rd: f64,
    pub amplitudes: [f64; 8],
    pub phase_sign: [f64; 8],
}

impl ElectrodeLayout {
    pub fn new(centers: [Complex64; 8], rd: f64, v_rf: f64) -> Result<Self> {
        let layout = ElectrodeLayout {
            centers,
            rd,
            amplitudes: [v_rf; 8],
            phase_sign: std::array::from_fn(phase_sign),
        };
        layout.validate()?;
        Ok(layout)
    }

    pub fn ideal(cfg: &TrapConfig) -> Self {
        let centers =
            std::array::from_fn(|k| Complex64::from_polar(cfg.center_radius(), nominal_angle(k)));
        ElectrodeLayout::new(centers, cfg.rd, cfg.v_rf).expect("ideal layout is valid")
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.rd > 0.0) {
            return Err(TrapError::InvalidGeometry("electrode radius must be positive".into()));
        }
        for i in 0..8 {
            if self.phase_sign[i] != phase_sign(i) {
                return Err(TrapError::InvalidGeometry(format!("phase sign of electrode {i}")));
            }
            for j in i + 1..8 {
                if (self.centers[i] - self.centers[j]).norm() <= 2.0 * self.rd {
                    return Err(TrapError::InvalidGeometry(format!(
                        "electrodes {i} and {j} overlap"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Signed electrode potential `phase_sign·amplitude` (V).
    pub fn potential(&self, k: usize) -> f64 {
        self.phase_sign[k] * self.amplitudes[k]
    }

    pub fn with_amplitudes(&self, amplitudes: [f64; 8]) -> Self {
        ElectrodeLayout { amplitudes, ..self.clone() }
    }

    pub fn transformed(&self, rotation: f64, translation: Complex64) -> Self {
        let rot = Complex64::from_polar(1.0, rotation);
        let centers = std::array::from_fn(|k| self.centers[k] * rot + translation);
        ElectrodeLayout { centers, ..self.clone() }
    }

    /// Smallest distance from the origin to an electrode surface.
    pub fn clear_radius(&self) -> f64 {
        self.centers.iter().map(|c| c.norm() - self.rd).fold(f64::INFINITY, f64::min)
    }
}

struct SetFrame {
    rot: f64,
    beta: f64,
    center: Complex64,
    d_a: f64,
    d_b: f64,
    slide: Complex64,
}

// (A+, A−, B+, B−) electrode indices for each set.
const S_LINES: [usize; 4] = [2, 6, 0, 4];
const T_LINES: [usize; 4] = [3, 7, 1, 5];

fn axis_angles(is_s: bool, beta: f64, rot: f64) -> (f64, f64) {
    if is_s {
        (-beta + rot, FRAC_PI_2 + beta + rot)
    } else {
        (-FRAC_PI_4 + beta + rot, FRAC_PI_4 - beta + rot)
    }
}

fn build_set(is_s: bool, f: &SetFrame, centers: &mut [Complex64; 8]) -> Result<()> {
    let (aa, ab) = axis_angles(is_s, f.beta, f.rot);
    let ua = Complex64::from_polar(1.0, aa);
    let ub = Complex64::from_polar(1.0, ab);
    // t_a·ua/(d_a/2) + t_b·ub/(d_b/2) = slide
    let (pa, pb) = (ua / (0.5 * f.d_a), ub / (0.5 * f.d_b));
    let det = pa.re * pb.im - pa.im * pb.re;
    if det.abs() < 1e-12 * pa.norm() * pb.norm() {
        return Err(TrapError::InvalidGeometry("facing axes are parallel".into()));
    }
    let t_a = (f.slide.re * pb.im - f.slide.im * pb.re) / det;
    let t_b = (pa.re * f.slide.im - pa.im * f.slide.re) / det;
    let idx = if is_s { S_LINES } else { T_LINES };
    centers[idx[0]] = f.center + ua * (t_a + 0.5 * f.d_a);
    centers[idx[1]] = f.center + ua * (t_a - 0.5 * f.d_a);
    centers[idx[2]] = f.center + ub * (t_b + 0.5 * f.d_b);
    centers[idx[3]] = f.center + ub * (t_b - 0.5 * f.d_b);
    Ok(())
}

/// Builds the electrode layout realizing a defect composition. Bounds are enforced.
pub fn layout_from_defects(d: &DefectSet, cfg: &TrapConfig) -> Result<ElectrodeLayout> {
    d.check_bounds()?;
    layout_from_defects_unchecked(d, cfg)
}

/// Same as [`layout_from_defects`] without the parameter bounds check; electrode
/// overlap is still rejected.
pub fn layout_from_defects_unchecked(d: &DefectSet, cfg: &TrapConfig) -> Result<ElectrodeLayout> {
    if !(d.r_bar0 > 0.0) {
        return Err(TrapError::OutOfBounds { name: "r_bar0", value: d.r_bar0 });
    }
    let rb = d.r_bar0;
    let rd = cfg.rd;
    let split = Complex64::new(d.x0, d.y0) * rb;
    let r_s = rb - 0.5 * d.delta_r;
    let r_t = rb + 0.5 * d.delta_r;
    let s = SetFrame {
        rot: -d.delta,
        beta: d.beta_s,
        center: 0.5 * split,
        d_a: 2.0 * (r_s + rd) + 0.5 * d.l_s * rb,
        d_b: 2.0 * (r_s + rd) - 0.5 * d.l_s * rb,
        slide: Complex64::new(d.xl_s, d.yl_s),
    };
    let t = SetFrame {
        rot: d.delta,
        beta: d.beta_t,
        center: -0.5 * split,
        d_a: 2.0 * (r_t + rd) + 0.5 * d.l_t * rb,
        d_b: 2.0 * (r_t + rd) - 0.5 * d.l_t * rb,
        slide: -Complex64::new(d.xl_t, d.yl_t),
    };
    if s.d_b <= 0.0 || t.d_b <= 0.0 {
        return Err(TrapError::InvalidGeometry("negative facing distance".into()));
    }
    let mut centers = [Complex64::new(0.0, 0.0); 8];
    build_set(true, &s, &mut centers)?;
    build_set(false, &t, &mut centers)?;
    ElectrodeLayout::new(centers, rd, cfg.v_rf)
}

/// Result of projecting a layout onto the defect basis.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Decomposition {
    pub defects: DefectSet,
    /// Global rotation removed before measuring (rad).
    pub rotation: f64,
    /// Global translation removed after derotation (m).
    pub translation: Complex64,
    /// RMS of the 16 center coordinates between the layout and its reconstruction (m).
    pub residual: f64,
}

impl Decomposition {
    pub fn reconstruct(&self, cfg: &TrapConfig) -> Result<ElectrodeLayout> {
        let base = layout_from_defects_unchecked(&self.defects, cfg)?;
        Ok(base.transformed(0.0, self.translation).transformed(self.rotation, Complex64::new(0.0, 0.0)))
    }
}

fn wrap(a: f64) -> f64 {
    (a + PI).rem_euclid(2.0 * PI) - PI
}

fn measure_set(is_s: bool, c: &[Complex64; 8]) -> Result<SetFrame> {
    let idx = if is_s { S_LINES } else { T_LINES };
    let (nom_a, nom_b) = axis_angles(is_s, 0.0, 0.0);
    let va = c[idx[0]] - c[idx[1]];
    let vb = c[idx[2]] - c[idx[3]];
    let ma = 0.5 * (c[idx[0]] + c[idx[1]]);
    let mb = 0.5 * (c[idx[2]] + c[idx[3]]);
    let ea = wrap(va.arg() - nom_a);
    let eb = wrap(vb.arg() - nom_b);
    let (ua, ub) = (va / va.norm(), vb / vb.norm());
    // intersection of ma + s·ua and mb + s'·ub
    let cross = ua.re * ub.im - ua.im * ub.re;
    let center = if cross.abs() < 1e-12 {
        0.5 * (ma + mb)
    } else {
        let w = mb - ma;
        let s = (w.re * ub.im - w.im * ub.re) / cross;
        ma + ua * s
    };
    let dot = |u: Complex64, v: Complex64| u.re * v.re + u.im * v.im;
    let t_a = dot(ma - center, ua);
    let t_b = dot(mb - center, ub);
    let (d_a, d_b) = (va.norm(), vb.norm());
    let slide = ua * (t_a / (0.5 * d_a)) + ub * (t_b / (0.5 * d_b));
    let (rot, beta) = if is_s {
        (0.5 * (ea + eb), 0.5 * (eb - ea))
    } else {
        (0.5 * (ea + eb), 0.5 * (ea - eb))
    };
    Ok(SetFrame { rot, beta, center, d_a, d_b, slide })
}

fn rms_distance(a: &[Complex64; 8], b: &[Complex64; 8]) -> f64 {
    let s: f64 = a.iter().zip(b).map(|(p, q)| (p - q).norm_sqr()).sum();
    (s / 16.0).sqrt()
}

/// Projects an arbitrary layout onto the defect basis.
///
/// The global rotation is removed first, then the translation; both are reported.
pub fn decompose_layout(layout: &ElectrodeLayout) -> Result<Decomposition> {
    let rd = layout.rd;
    let c = &layout.centers;
    let centroid: Complex64 = c.iter().sum::<Complex64>() / 8.0;
    let nominal_r = c.iter().map(|p| (p - centroid).norm()).sum::<f64>() / 8.0;
    for (k, p) in c.iter().enumerate() {
        let ideal = centroid + Complex64::from_polar(nominal_r, nominal_angle(k));
        if (p - ideal).norm() > 0.15 * nominal_r {
            return Err(TrapError::InvalidGeometry(format!(
                "electrode {k} is too far from its nominal site"
            )));
        }
    }

    let s0 = measure_set(true, c)?;
    let t0 = measure_set(false, c)?;
    let gamma = 0.5 * (s0.rot + t0.rot);
    let derot = Complex64::from_polar(1.0, -gamma);
    let c1: [Complex64; 8] = std::array::from_fn(|k| c[k] * derot);
    let s = measure_set(true, &c1)?;
    let t = measure_set(false, &c1)?;
    let translation = 0.5 * (s.center + t.center);

    let r_s = 0.25 * (s.d_a + s.d_b) - rd;
    let r_t = 0.25 * (t.d_a + t.d_b) - rd;
    let rb = 0.5 * (r_s + r_t);
    let split = (s.center - t.center) / rb;
    let slide_t = -t.slide;
    let defects = DefectSet {
        l_s: (s.d_a - s.d_b) / rb,
        l_t: (t.d_a - t.d_b) / rb,
        xl_s: s.slide.re,
        yl_s: s.slide.im,
        xl_t: slide_t.re,
        yl_t: slide_t.im,
        x0: split.re,
        y0: split.im,
        beta_s: s.beta,
        beta_t: t.beta,
        delta: 0.5 * (t.rot - s.rot),
        r_bar0: rb,
        delta_r: r_t - r_s,
    };
    let cfg = TrapConfig { rd, ..TrapConfig::default() };
    let mut dec = Decomposition { defects, rotation: gamma, translation, residual: 0.0 };
    let rebuilt = dec
        .reconstruct(&cfg)
        .map_err(|_| TrapError::DecompositionFailed { residual: f64::INFINITY })?;
    dec.residual = rms_distance(&rebuilt.centers, c);
    if !(dec.residual <= 1e-9 * nominal_r) {
        return Err(TrapError::DecompositionFailed { residual: dec.residual });
    }
    Ok(dec)
}

/// Rotates a layout about the origin so that its global rotation vanishes.
pub fn remove_global_rotation(layout: &ElectrodeLayout) -> Result<ElectrodeLayout> {
    let dec = decompose_layout(layout)?;
    Ok(layout.transformed(-dec.rotation, Complex64::new(0.0, 0.0)))
}

/// Ideal layout with each center displaced by `fraction·(r0+rd)` in a random direction.
pub fn random_layout(seed: u64, fraction: f64, cfg: &TrapConfig) -> Result<ElectrodeLayout> {
    if !(0.0..=0.04).contains(&fraction) {
        return Err(TrapError::InvalidConfig(format!("fraction {fraction} outside [0, 0.04]")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shift = fraction * cfg.center_radius();
    let centers = std::array::from_fn(|k| {
        let phi: f64 = rng.gen_range(0.0..2.0 * PI);
        Complex64::from_polar(cfg.center_radius(), nominal_angle(k)) + Complex64::from_polar(shift, phi)
    });
    ElectrodeLayout::new(centers, cfg.rd, cfg.v_rf)
}
