//! Coefficient diagnosis from observed minima, the coefficient-to-bias voltage map,
//! its calibration against the solver, and the cumulative correction loop.

use std::f64::consts::SQRT_2;
use std::fmt::Write as _;

use num_complex::Complex64;

use crate::analytic::{analytic_minima, coeffs_through_points, PerturbationCoeffs};
use crate::error::{Result, TrapError};
use crate::geometry::{phase_sign, ElectrodeLayout, TrapConfig, BOLTZMANN};
use crate::grid::{numeric_minima, GridMinima};
use crate::io::fmt_num;
use crate::optim::NelderMead;
use crate::pattern::{matched_distance, MinimaPattern};
use crate::solver::{FieldSolution, SolverSettings, UnitResponses};

/// Bias quantum (V); biases are multiples of it so that sums over electrodes are exact.
pub const BIAS_QUANTUM: f64 = 1.0 / (1u64 << 40) as f64;

/// Reference calibration at rd/r0 = 0.375.
pub const REFERENCE_D_CAL: f64 = 0.912;
pub const REFERENCE_Q_CAL: f64 = 0.796;

/// A fit is reported as failed above this many pixels of residual.
pub const FIT_FAILURE_PX: f64 = 5.0;

/// Per-electrode amplitude biases (V), added to the signed RF potential of each electrode.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct VoltageBias(pub [f64; 8]);

impl VoltageBias {
    pub fn zero() -> Self {
        VoltageBias([0.0; 8])
    }

    pub fn sum(&self) -> f64 {
        self.0.iter().sum()
    }

    pub fn add(&self, other: &VoltageBias) -> Self {
        let mut v = self.0;
        for (a, b) in v.iter_mut().zip(other.0) {
            *a += b;
        }
        VoltageBias(v)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CalibrationConstants {
    pub d_cal: f64,
    pub q_cal: f64,
    pub d_px_used: f64,
    pub ratio: f64,
}

impl CalibrationConstants {
    pub fn reference() -> Self {
        CalibrationConstants { d_cal: REFERENCE_D_CAL, q_cal: REFERENCE_Q_CAL, d_px_used: 1e-6, ratio: 0.375 }
    }

    pub fn new(d_cal: f64, q_cal: f64, d_px_used: f64, ratio: f64) -> Result<Self> {
        if !(d_cal > 0.0 && q_cal > 0.0) {
            return Err(TrapError::Calibration("calibration constants must be positive".into()));
        }
        Ok(CalibrationConstants { d_cal, q_cal, d_px_used, ratio })
    }

    pub fn to_csv(&self) -> String {
        format!(
            "d_cal,q_cal,d_px_um,ratio\n{},{},{},{}\n",
            fmt_num(self.d_cal),
            fmt_num(self.q_cal),
            fmt_num(self.d_px_used * 1e6),
            fmt_num(self.ratio)
        )
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines.next().ok_or_else(|| TrapError::Parse("empty calibration file".into()))?;
        if header.trim() != "d_cal,q_cal,d_px_um,ratio" {
            return Err(TrapError::Parse(format!("unexpected calibration header `{header}`")));
        }
        let row = lines.next().ok_or_else(|| TrapError::Parse("missing calibration row".into()))?;
        let v: Vec<f64> = row
            .split(',')
            .map(|s| s.trim().parse::<f64>().map_err(|_| TrapError::Parse(format!("bad number `{s}`"))))
            .collect::<Result<_>>()?;
        if v.len() != 4 {
            return Err(TrapError::Parse("calibration row needs 4 fields".into()));
        }
        Self::new(v[0], v[1], v[2] * 1e-6, v[3])
    }
}

fn quantize(v: f64) -> f64 {
    (v / BIAS_QUANTUM).round() * BIAS_QUANTUM
}

/// Biases producing the perturbation `coeffs` on a perfect trap; electrode `k` as in
/// [`ElectrodeLayout`].
pub fn voltages_from_coeffs(coeffs: &PerturbationCoeffs, cfg: &TrapConfig, cal: &CalibrationConstants) -> VoltageBias {
    let v = cfg.v_rf;
    let [a1, a2, a3, a4] = coeffs.a;
    let p = quantize(v * a1 / cal.q_cal);
    let r = quantize(v * a2 / cal.q_cal);
    let t = quantize(v * a3 / cal.d_cal);
    let s = quantize(v * a4 / cal.d_cal);
    let u = quantize(v * (a3 + a4) / (SQRT_2 * cal.d_cal));
    let w = quantize(v * (a3 - a4) / (SQRT_2 * cal.d_cal));
    VoltageBias([p - s, -r - u, -p - t, r - w, p + s, -r + u, -p + t, r + w])
}

/// Layout with amplitudes `v_rf + s_k·δV_k`, so the signed potential of electrode `k`
/// becomes `s_k·v_rf + δV_k`.
pub fn apply_bias(layout: &ElectrodeLayout, cfg: &TrapConfig, bias: &VoltageBias) -> ElectrodeLayout {
    let mut amps = [0.0; 8];
    for k in 0..8 {
        amps[k] = cfg.v_rf + phase_sign(k) * bias.0[k];
    }
    layout.with_amplitudes(amps)
}

/// Inverse use of the voltage map: biases creating the pattern of `target` on a
/// compensated trap.
pub fn designed_pattern(target: &PerturbationCoeffs, cfg: &TrapConfig, cal: &CalibrationConstants) -> VoltageBias {
    voltages_from_coeffs(target, cfg, cal)
}

/// Barycentred point triples standing for an observation; two points are expanded by
/// doubling either one (a merged pair of minima).
fn observation_triples(observed: &MinimaPattern) -> Vec<[Complex64; 3]> {
    let c = observed.centered().points;
    let center = |t: [Complex64; 3]| {
        let b = (t[0] + t[1] + t[2]) / 3.0;
        [t[0] - b, t[1] - b, t[2] - b]
    };
    match c.len() {
        2 => vec![center([c[0], c[0], c[1]]), center([c[0], c[1], c[1]])],
        _ => vec![[c[0], c[1], c[2]]],
    }
}

fn fit_objective(a: &[f64], triples: &[[Complex64; 3]], base: &PerturbationCoeffs) -> f64 {
    let roots = base.with_a([a[0], a[1], a[2], a[3]]).critical_points();
    triples.iter().map(|t| matched_distance(t, &roots)).fold(f64::INFINITY, f64::min)
}

/// Coefficients whose analytic minima best match `observed` (barycentre-referenced), and
/// the mean matched distance `d̄` (m).
///
/// More than three observed points are reduced to the first three; callers should pass
/// the deepest ones.
pub fn fit_coefficients(
    observed: &MinimaPattern,
    cfg: &TrapConfig,
    guess: &PerturbationCoeffs,
) -> Result<(PerturbationCoeffs, f64)> {
    let base = PerturbationCoeffs { r_bar0: cfg.r0, ..*guess };
    if observed.len() <= 1 {
        return Ok((base.with_a([0.0; 4]), 0.0));
    }
    let observed = if observed.len() > 3 { MinimaPattern::new(observed.points[..3].to_vec()) } else { observed.clone() };
    let triples = observation_triples(&observed);
    let mut starts: Vec<[f64; 4]> = triples.iter().map(|t| coeffs_through_points(t, cfg.r0, base.h0).a).collect();
    starts.push(guess.a);
    let nm = NelderMead { max_evals: 3000, x_tol: 1e-8, f_tol: 0.0 };
    let run = |x0: &[f64; 4]| {
        let m = nm.minimize(|a| fit_objective(a, &triples, &base), x0, &[2e-3; 4]);
        (m.x, m.f)
    };
    let mut best = (guess.a.to_vec(), f64::INFINITY);
    for s in &starts {
        let r = run(s);
        if r.1 < best.1 {
            best = r;
        }
    }
    if best.1 > 0.1 * cfg.pixel {
        for pattern in 0..8u32 {
            let sgn = |b: u32| if pattern & (1 << b) == 0 { 0.05 } else { -0.05 };
            let s = [sgn(0), sgn(1), sgn(2), if pattern.count_ones() % 2 == 0 { 0.05 } else { -0.05 }];
            let r = run(&s);
            if r.1 < best.1 {
                best = r;
            }
        }
    }
    if best.1 > FIT_FAILURE_PX * cfg.pixel {
        return Err(TrapError::DiagnosisFailed { residual: best.1 });
    }
    let a = [best.0[0], best.0[1], best.0[2], best.0[3]];
    Ok((base.with_a(a), best.1))
}

/// The coefficient family of the voltage-map scan, for `j` in `0..=0.1`.
pub fn calibration_family(j: f64) -> [f64; 4] {
    [0.4 * (0.1 - j), 0.2 * j, -0.1 * (0.1 - j), 0.2 * j]
}

/// Points of the calibration scan (steps of 0.01).
pub fn calibration_scan() -> Vec<[f64; 4]> {
    (0..=10).map(|i| calibration_family(i as f64 * 0.01)).collect()
}

/// Numeric minima of a perfect trap driven with the biases encoding `a`.
pub fn voltage_generated_minima(
    units: &UnitResponses,
    a: [f64; 4],
    cfg: &TrapConfig,
    cal: &CalibrationConstants,
    d_px: f64,
) -> Result<GridMinima> {
    let layout = ElectrodeLayout::ideal(cfg);
    let bias = voltages_from_coeffs(&PerturbationCoeffs::new(a, cfg), cfg, cal);
    let sol = units.for_amplitudes(&apply_bias(&layout, cfg, &bias));
    numeric_minima(&sol, cfg, d_px)
}

/// Mean distance between analytic and voltage-generated minima; count mismatches are
/// matched partially and charged one pixel per missing point.
pub fn superposition_error(analytic: &MinimaPattern, numeric: &MinimaPattern, d_px: f64) -> f64 {
    let (a, b) = (&analytic.points, &numeric.points);
    let (small, large) = if a.len() <= b.len() { (a, b) } else { (b, a) };
    let large = if large.len() > 6 { &large[..6] } else { &large[..] };
    matched_distance(small, large) + d_px * (large.len() - small.len()) as f64
}

/// Fits `(d_cal, q_cal)` so that voltage-generated minima superpose on analytic ones
/// along the calibration scan, at pixel pitch `d_px`.
pub fn calibrate_voltage_map_with(cfg: &TrapConfig, d_px: f64) -> Result<CalibrationConstants> {
    let layout = ElectrodeLayout::ideal(cfg);
    let units = UnitResponses::for_layout(&layout, &SolverSettings::default())?;
    let pix = TrapConfig { pixel: d_px, ..*cfg };
    let scan = calibration_scan();
    let targets: Vec<MinimaPattern> = scan
        .iter()
        .map(|a| analytic_minima(&PerturbationCoeffs::new(*a, cfg), &pix))
        .collect::<Result<_>>()?;

    // Linear estimate: with unit constants the realised coefficients are a·q_cal (a·d_cal).
    let unit = CalibrationConstants { d_cal: 1.0, q_cal: 1.0, d_px_used: d_px, ratio: cfg.ratio() };
    let (mut nq, mut dq, mut nd, mut dd) = (0.0, 0.0, 0.0, 0.0);
    for a in &scan {
        let m = voltage_generated_minima(&units, *a, cfg, &unit, d_px)?;
        let pat = m.refined_pattern()?;
        if pat.len() != 3 {
            continue;
        }
        let (fit, _) = fit_coefficients(&pat, &pix, &PerturbationCoeffs::new(*a, cfg))?;
        nq += fit.a[0] * a[0] + fit.a[1] * a[1];
        dq += a[0] * a[0] + a[1] * a[1];
        nd += fit.a[2] * a[2] + fit.a[3] * a[3];
        dd += a[2] * a[2] + a[3] * a[3];
    }
    if dq == 0.0 || dd == 0.0 {
        return Err(TrapError::Calibration("no usable scan points".into()));
    }
    let x0 = [nd / dd, nq / dq];

    let objective = |x: &[f64]| -> f64 {
        if !(x[0] > 0.0 && x[1] > 0.0) {
            return f64::INFINITY;
        }
        let cal = CalibrationConstants { d_cal: x[0], q_cal: x[1], d_px_used: d_px, ratio: cfg.ratio() };
        let mut total = 0.0;
        for (a, t) in scan.iter().zip(&targets) {
            match voltage_generated_minima(&units, *a, cfg, &cal, d_px).and_then(|m| m.refined_pattern()) {
                Ok(p) => total += superposition_error(t, &p, d_px),
                Err(_) => return f64::INFINITY,
            }
        }
        total / scan.len() as f64
    };
    let nm = NelderMead { max_evals: 200, x_tol: 1e-5, f_tol: 0.0 };
    let m = nm.minimize(objective, &x0, &[0.01, 0.01]);
    let cal = CalibrationConstants::new(m.x[0], m.x[1], d_px, cfg.ratio())?;
    let within = |v: f64, r: f64| (v - r).abs() <= 0.2 * r;
    if !(within(cal.d_cal, REFERENCE_D_CAL) && within(cal.q_cal, REFERENCE_Q_CAL)) {
        return Err(TrapError::Calibration(format!(
            "d_cal = {:.4}, q_cal = {:.4} outside ±20% of the reference values",
            cal.d_cal, cal.q_cal
        )));
    }
    Ok(cal)
}

/// Calibration at 1 μm pixels.
pub fn calibrate_voltage_map(cfg: &TrapConfig) -> Result<CalibrationConstants> {
    calibrate_voltage_map_with(cfg, 1e-6)
}

/// Highest pseudo-potential (μK) along the segments joining the minima, above the
/// deepest minimum.
pub fn pattern_depth(sol: &FieldSolution, cfg: &TrapConfig, points: &[Complex64]) -> f64 {
    let pre = cfg.pseudo_prefactor() / BOLTZMANN * 1e6;
    let v = |z: Complex64| pre * sol.field(z).norm_sqr();
    let floor = points.iter().map(|p| v(*p)).fold(f64::INFINITY, f64::min);
    let mut top = floor;
    for i in 0..points.len() {
        for j in i + 1..points.len() {
            for s in 1..64 {
                let t = s as f64 / 64.0;
                top = top.max(v(points[i] + (points[j] - points[i]) * t));
            }
        }
    }
    if points.is_empty() {
        0.0
    } else {
        top - floor
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CorrectionOptions {
    pub max_steps: usize,
    /// Stop once d_b changes by less than one pixel on two consecutive steps.
    pub early_stop: bool,
    /// Observe pixel-snapped rather than sub-pixel positions.
    pub snapped: bool,
}

impl Default for CorrectionOptions {
    fn default() -> Self {
        CorrectionOptions { max_steps: 10, early_stop: true, snapped: true }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorrectionStep {
    pub step: usize,
    pub observed: MinimaPattern,
    pub fitted: PerturbationCoeffs,
    /// Bias in place when `observed` was taken.
    pub bias: VoltageBias,
    /// Correction added after this observation.
    pub increment: VoltageBias,
    pub d_b: f64,
    pub d_res: f64,
    pub depth_uk: f64,
    pub degenerate: bool,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct CorrectionHistory {
    pub steps: Vec<CorrectionStep>,
}

impl CorrectionHistory {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,d_b_um,d_res_um,a1,a2,a3,a4");
        for k in 0..8 {
            let _ = write!(s, ",dv{k}_V");
        }
        s.push('\n');
        for st in &self.steps {
            let _ = write!(s, "{},{},{}", st.step, fmt_num(st.d_b * 1e6), fmt_num(st.d_res * 1e6));
            for a in st.fitted.a {
                let _ = write!(s, ",{}", fmt_num(a));
            }
            for v in st.bias.0 {
                let _ = write!(s, ",{}", fmt_num(v));
            }
            s.push('\n');
        }
        s
    }

    pub fn d_b(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.d_b).collect()
    }
}

/// Observed minima for the loop: the three deepest, pixel-snapped or refined.
fn observe(m: &GridMinima, snapped: bool) -> MinimaPattern {
    let mut idx: Vec<usize> = (0..m.values.len()).collect();
    idx.sort_by(|&a, &b| m.values[a].total_cmp(&m.values[b]));
    idx.truncate(3);
    let src = if snapped { &m.snapped } else { &m.refined };
    MinimaPattern::new(idx.iter().map(|&i| src[i]).collect())
}

/// Cumulative correction: observe, fit, add the biases encoding `−a`, repeat.
pub fn iterate_correction(
    layout: &ElectrodeLayout,
    cfg: &TrapConfig,
    cal: &CalibrationConstants,
    opts: &CorrectionOptions,
) -> Result<CorrectionHistory> {
    let units = UnitResponses::for_layout(layout, &SolverSettings::default())?;
    let mut bias = VoltageBias::zero();
    let mut history = CorrectionHistory::default();
    let mut guess = PerturbationCoeffs::zero(cfg);
    let mut quiet = 0;
    for step in 0..=opts.max_steps {
        let sol = units.for_amplitudes(&apply_bias(layout, cfg, &bias));
        let m = numeric_minima(&sol, cfg, cfg.pixel)?;
        let observed = observe(&m, opts.snapped);
        let (fitted, d_res) = fit_coefficients(&observed, cfg, &guess)?;
        let depth_uk = pattern_depth(&sol, cfg, &observed.points);
        let neg = fitted.with_a(fitted.a.map(|v| -v));
        let increment = voltages_from_coeffs(&neg, cfg, cal);
        let d_b = observed.d_b;
        if let Some(prev) = history.steps.last() {
            let prev: &CorrectionStep = prev;
            quiet = if (prev.d_b - d_b).abs() < cfg.pixel { quiet + 1 } else { 0 };
        }
        history.steps.push(CorrectionStep {
            step,
            degenerate: observed.len() < 3,
            observed,
            fitted,
            bias,
            increment,
            d_b,
            d_res,
            depth_uk,
        });
        if opts.early_stop && quiet >= 2 {
            break;
        }
        bias = bias.add(&increment);
        guess = PerturbationCoeffs::zero(cfg);
    }
    Ok(history)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analytic::model_minima;
    use crate::geometry::{random_layout, remove_global_rotation};
    use crate::pattern::{minima_metrics, PatternKind};
    use proptest::prelude::*;

    fn cfg() -> TrapConfig {
        TrapConfig::default()
    }

    #[test]
    fn reference_bias_pattern() {
        let cfg = TrapConfig { v_rf: 100.0, ..cfg() };
        let cal = CalibrationConstants::reference();
        let b = voltages_from_coeffs(&PerturbationCoeffs::new([cal.q_cal * 0.1, 0.0, 0.0, 0.0], &cfg), &cfg, &cal);
        let expect = [10.0, 0.0, -10.0, 0.0, 10.0, 0.0, -10.0, 0.0];
        for k in 0..8 {
            assert!((b.0[k] - expect[k]).abs() < 1e-9, "{:?}", b);
        }
        let b = voltages_from_coeffs(&PerturbationCoeffs::new([0.0, 0.0, 0.05, 0.0], &cfg), &cfg, &cal);
        assert!((b.0[2] + 100.0 * 0.05 / cal.d_cal).abs() < 1e-9);
        assert!((b.0[6] - 100.0 * 0.05 / cal.d_cal).abs() < 1e-9);
        assert_eq!(b.0[0], 0.0);
        assert_eq!(b.0[4], 0.0);
    }

    #[test]
    fn zero_target_zero_bias() {
        let cfg = cfg();
        let b = designed_pattern(&PerturbationCoeffs::zero(&cfg), &cfg, &CalibrationConstants::reference());
        assert_eq!(b, VoltageBias::zero());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(500))]
        #[test]
        fn bias_sums_to_zero(a in prop::array::uniform4(-0.1f64..0.1)) {
            let cfg = cfg();
            let b = voltages_from_coeffs(&PerturbationCoeffs::new(a, &cfg), &cfg, &CalibrationConstants::reference());
            prop_assert_eq!(b.sum(), 0.0);
            let mut rev = 0.0;
            for v in b.0.iter().rev() {
                rev += v;
            }
            prop_assert_eq!(rev, 0.0);
        }

        #[test]
        fn bias_is_linear(
            a in prop::array::uniform4(-0.1f64..0.1),
            b in prop::array::uniform4(-0.1f64..0.1),
            al in -3.0f64..3.0,
            be in -3.0f64..3.0,
        ) {
            let cfg = cfg();
            let cal = CalibrationConstants::reference();
            let v = |x: [f64; 4]| voltages_from_coeffs(&PerturbationCoeffs::new(x, &cfg), &cfg, &cal).0;
            let mix = [0, 1, 2, 3].map(|i| al * a[i] + be * b[i]);
            let (va, vb, vm) = (v(a), v(b), v(mix));
            for k in 0..8 {
                prop_assert!((vm[k] - (al * va[k] + be * vb[k])).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn dyadic_linearity_is_exact() {
        let cfg = cfg();
        let cal = CalibrationConstants::reference();
        let v = |x: [f64; 4]| voltages_from_coeffs(&PerturbationCoeffs::new(x, &cfg), &cfg, &cal).0;
        let a = [0.0625, -0.03125, 0.015625, 0.0078125];
        let b = [-0.015625, 0.0625, 0.03125, -0.0625];
        let m = [0, 1, 2, 3].map(|i| 2.0 * a[i] - 4.0 * b[i]);
        let (va, vb, vm) = (v(a), v(b), v(m));
        for k in 0..8 {
            assert!((vm[k] - (2.0 * va[k] - 4.0 * vb[k])).abs() <= 8.0 * BIAS_QUANTUM);
        }
    }

    #[test]
    fn calibration_file_round_trip() {
        let c = CalibrationConstants::new(0.91, 0.8, 1e-6, 0.375).unwrap();
        let back = CalibrationConstants::from_csv(&c.to_csv()).unwrap();
        assert_eq!(back.to_csv(), c.to_csv());
        assert!(CalibrationConstants::new(-1.0, 0.8, 1e-6, 0.375).is_err());
        assert!(CalibrationConstants::from_csv("x\n1,2,3,4").is_err());
    }

    #[test]
    fn coincident_points_fit_to_zero() {
        let cfg = cfg();
        let o = MinimaPattern::new(vec![Complex64::new(0.0, 0.0); 3]);
        let (c, d) = fit_coefficients(&o, &cfg, &PerturbationCoeffs::zero(&cfg)).unwrap();
        assert!(c.a.iter().all(|v| v.abs() < 1e-6), "{:?}", c.a);
        assert!(d < 1e-9);
    }

    #[test]
    fn fit_recovers_known_coefficients() {
        let cfg = cfg();
        let truth = PerturbationCoeffs::new([0.05, -0.02, 0.03, 0.01], &cfg);
        let snap = |z: Complex64| Complex64::new((z.re / cfg.pixel).round(), (z.im / cfg.pixel).round()) * cfg.pixel;
        let pts: Vec<Complex64> = truth.critical_points().iter().map(|z| snap(*z)).collect();
        let (fit, d) = fit_coefficients(&MinimaPattern::new(pts), &cfg, &PerturbationCoeffs::zero(&cfg)).unwrap();
        assert!(d < cfg.pixel);
        assert!((fit.a[0] - 0.05).abs() < 3.0 * 8.2e-4);
        assert!((fit.a[2] - 0.03).abs() < 3.0 * 4.7e-4);
    }

    #[test]
    fn two_point_fit_uses_merged_minimum() {
        let cfg = cfg();
        let truth = PerturbationCoeffs::new([0.06, 0.0, 0.0, 0.0], &cfg);
        let p = truth.critical_points();
        let two: Vec<Complex64> = p.iter().filter(|z| z.norm() > 1e-6).copied().collect();
        assert_eq!(two.len(), 2);
        let (fit, d) = fit_coefficients(&MinimaPattern::new(two), &cfg, &PerturbationCoeffs::zero(&cfg)).unwrap();
        let m = model_minima(&fit, cfg.pixel);
        assert!(d < cfg.pixel);
        assert!(m.len() >= 2);
    }

    #[test]
    fn designed_line_on_perfect_trap() {
        let cfg = cfg();
        let cal = CalibrationConstants::reference();
        let units = UnitResponses::for_layout(&ElectrodeLayout::ideal(&cfg), &SolverSettings::default()).unwrap();
        let m = voltage_generated_minima(&units, [0.02, 0.0, 0.0, 0.0], &cfg, &cal, cfg.pixel).unwrap();
        let p = m.refined_pattern().unwrap();
        assert_eq!(p.kind, PatternKind::Line);
        let sp = p.points.iter().map(|z| (z - p.barycenter).norm()).fold(0.0, f64::max);
        assert!((sp - cfg.r0 * 0.01f64.sqrt()).abs() < 2.0 * cfg.pixel, "{sp}");

        let m = voltage_generated_minima(&units, [0.0, 0.0, -0.05, 0.0], &cfg, &cal, cfg.pixel).unwrap();
        assert_eq!(m.refined_pattern().unwrap().kind, PatternKind::Triangle);

        let m = voltage_generated_minima(&units, [0.0; 4], &cfg, &cal, cfg.pixel).unwrap();
        assert_eq!(m.snapped, vec![Complex64::new(0.0, 0.0)]);
    }

    #[test]
    fn reference_calibration_superposes_scan() {
        let cfg = cfg();
        let cal = CalibrationConstants::reference();
        let units = UnitResponses::for_layout(&ElectrodeLayout::ideal(&cfg), &SolverSettings::default()).unwrap();
        let d_px = 4e-6;
        for a in calibration_scan() {
            let num = voltage_generated_minima(&units, a, &cfg, &cal, d_px).unwrap().refined_pattern().unwrap();
            let ana = analytic_minima(&PerturbationCoeffs::new(a, &cfg), &cfg).unwrap();
            let (d, _) = minima_metrics(&num, &ana).unwrap();
            assert!(d < 4.0 * d_px, "{a:?} {d}");
        }
    }

    #[test]
    fn perfect_trap_is_a_fixed_point() {
        let cfg = cfg();
        let h = iterate_correction(
            &ElectrodeLayout::ideal(&cfg),
            &cfg,
            &CalibrationConstants::reference(),
            &CorrectionOptions { max_steps: 1, ..Default::default() },
        )
        .unwrap();
        assert_eq!(h.steps[0].d_b, 0.0);
        assert!(h.steps[0].fitted.a.iter().all(|v| v.abs() < 1e-6));
        assert_eq!(h.steps[1].bias, VoltageBias::zero());
    }

    #[test]
    fn correction_reduces_spread() {
        let cfg = cfg();
        let layout = remove_global_rotation(&random_layout(1, 0.02, &cfg).unwrap()).unwrap();
        let h = iterate_correction(
            &layout,
            &cfg,
            &CalibrationConstants::reference(),
            &CorrectionOptions { max_steps: 3, early_stop: false, snapped: true },
        )
        .unwrap();
        let db = h.d_b();
        assert!(db[3] < 0.15 * db[0], "{db:?}");
        let mut cum = VoltageBias::zero();
        for st in &h.steps {
            assert_eq!(st.bias, cum);
            cum = cum.add(&st.increment);
        }
        assert!(h.to_csv().starts_with("step,d_b_um,d_res_um,a1,a2,a3,a4,dv0_V,"));
    }
}
