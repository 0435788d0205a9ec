//! Sampled maps, pixel-level minima extraction and the numeric minima pipeline.

use std::fmt::Write as _;
use std::sync::OnceLock;

use nalgebra::{DMatrix, Matrix2, Vector2};
use num_complex::Complex64;
use rayon::prelude::*;

use crate::error::{Result, TrapError};
use crate::geometry::{ElectrodeLayout, TrapConfig};
use crate::pattern::MinimaPattern;
use crate::roots::{dedup, newton_zero, seed_grid};
use crate::solver::{FieldSolution, SolverSettings};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MapKind {
    Potential,
    FieldMagnitude,
    Pseudo,
}

/// Square `n×n` map (n odd) centred on `origin`; row index runs along y.
#[derive(Debug, Clone, PartialEq)]
pub struct PotentialGrid {
    pub origin: Complex64,
    pub d_px: f64,
    pub n: usize,
    pub values: Vec<f64>,
    pub mask: Vec<bool>,
    pub kind: MapKind,
}

impl PotentialGrid {
    /// Samples `f` on the grid; `None` marks a masked pixel.
    pub fn sample<F>(origin: Complex64, d_px: f64, n: usize, kind: MapKind, f: F) -> Self
    where
        F: Fn(Complex64) -> Option<f64> + Sync,
    {
        assert!(n % 2 == 1, "grid size must be odd");
        let c = (n / 2) as f64;
        let rows: Vec<Vec<Option<f64>>> = (0..n)
            .into_par_iter()
            .map(|i| {
                (0..n)
                    .map(|j| f(origin + Complex64::new((j as f64 - c) * d_px, (i as f64 - c) * d_px)))
                    .collect()
            })
            .collect();
        let mut values = Vec::with_capacity(n * n);
        let mut mask = Vec::with_capacity(n * n);
        for v in rows.into_iter().flatten() {
            values.push(v.unwrap_or(f64::NAN));
            mask.push(v.is_none());
        }
        PotentialGrid { origin, d_px, n, values, mask, kind }
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.n + j]
    }

    pub fn masked(&self, i: usize, j: usize) -> bool {
        self.mask[i * self.n + j]
    }

    pub fn position(&self, i: usize, j: usize) -> Complex64 {
        let c = (self.n / 2) as f64;
        self.origin + Complex64::new((j as f64 - c) * self.d_px, (i as f64 - c) * self.d_px)
    }

    /// CSV `x_um,y_um,value`, masked pixels omitted.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("x_um,y_um,value\n");
        for i in 0..self.n {
            for j in 0..self.n {
                if !self.masked(i, j) {
                    let p = self.position(i, j);
                    let _ = writeln!(s, "{:.4},{:.4},{:.9e}", p.re * 1e6, p.im * 1e6, self.at(i, j));
                }
            }
        }
        s
    }
}

/// Laplace problem on a square window.
#[derive(Debug, Clone)]
pub struct BoundaryProblem {
    pub layout: ElectrodeLayout,
    pub half_width: f64,
    pub d_px: f64,
}

impl BoundaryProblem {
    pub fn new(layout: ElectrodeLayout, half_width: f64, d_px: f64) -> Result<Self> {
        if !(d_px > 0.0 && half_width > 0.0) {
            return Err(TrapError::InvalidConfig("window and pixel must be positive".into()));
        }
        if half_width < layout.clear_radius() {
            return Err(TrapError::InvalidConfig("window must cover the inner region".into()));
        }
        let k = half_width / d_px;
        if (k - k.round()).abs() > 1e-6 {
            return Err(TrapError::InvalidConfig("pixel must divide the window".into()));
        }
        Ok(BoundaryProblem { layout, half_width, d_px })
    }

    pub fn size(&self) -> usize {
        2 * (self.half_width / self.d_px).round() as usize + 1
    }
}

pub fn solve_laplace(problem: &BoundaryProblem) -> Result<PotentialGrid> {
    Ok(solve_laplace_with(problem, &SolverSettings::default())?.1)
}

pub fn solve_laplace_with(problem: &BoundaryProblem, settings: &SolverSettings) -> Result<(FieldSolution, PotentialGrid)> {
    let sol = FieldSolution::for_layout(&problem.layout, settings)?;
    let grid = PotentialGrid::sample(Complex64::new(0.0, 0.0), problem.d_px, problem.size(), MapKind::Potential, |z| {
        if sol.inside(z) {
            None
        } else {
            Some(sol.potential(z))
        }
    });
    Ok((sol, grid))
}

/// Pseudo-potential map (J) from a potential map by central differences.
pub fn pseudo_map(grid: &PotentialGrid, cfg: &TrapConfig) -> PotentialGrid {
    let n = grid.n;
    let pre = cfg.pseudo_prefactor();
    let h2 = 2.0 * grid.d_px;
    let mut values = vec![f64::NAN; n * n];
    let mut mask = vec![true; n * n];
    for i in 1..n.saturating_sub(1) {
        for j in 1..n - 1 {
            let nb = [(i, j), (i + 1, j), (i - 1, j), (i, j + 1), (i, j - 1)];
            if nb.iter().any(|&(a, b)| grid.masked(a, b)) {
                continue;
            }
            let ex = (grid.at(i, j + 1) - grid.at(i, j - 1)) / h2;
            let ey = (grid.at(i + 1, j) - grid.at(i - 1, j)) / h2;
            values[i * n + j] = pre * (ex * ex + ey * ey);
            mask[i * n + j] = false;
        }
    }
    PotentialGrid { values, mask, kind: MapKind::Pseudo, ..grid.clone() }
}

/// Pixel-level minima with their paraboloid-refined positions.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GridMinima {
    pub snapped: Vec<Complex64>,
    pub refined: Vec<Complex64>,
    pub values: Vec<f64>,
}

impl GridMinima {
    pub fn refined_pattern(&self) -> Result<MinimaPattern> {
        if self.refined.is_empty() {
            return Err(TrapError::FlatField);
        }
        Ok(MinimaPattern::new(self.refined.clone()))
    }

    pub fn snapped_pattern(&self) -> Result<MinimaPattern> {
        if self.snapped.is_empty() {
            return Err(TrapError::FlatField);
        }
        Ok(MinimaPattern::new(self.snapped.clone()))
    }

    fn push_unique(&mut self, other: GridMinima, tol: f64) {
        for k in 0..other.snapped.len() {
            if self.snapped.iter().all(|p| (p - other.snapped[k]).norm() > tol) {
                self.snapped.push(other.snapped[k]);
                self.refined.push(other.refined[k]);
                self.values.push(other.values[k]);
            }
        }
    }
}

// Least-squares projector for f = c0 + c1 x + c2 y + c3 x² + c4 xy + c5 y² on the 3×3 stencil.
fn quad_projector() -> &'static DMatrix<f64> {
    static P: OnceLock<DMatrix<f64>> = OnceLock::new();
    P.get_or_init(|| {
        let mut a = DMatrix::<f64>::zeros(9, 6);
        for (r, (dy, dx)) in (-1..=1).flat_map(|y| (-1..=1).map(move |x| (y as f64, x as f64))).enumerate() {
            let row = [1.0, dx, dy, dx * dx, dx * dy, dy * dy];
            for (c, v) in row.iter().enumerate() {
                a[(r, c)] = *v;
            }
        }
        let ata = a.transpose() * &a;
        ata.try_inverse().unwrap() * a.transpose()
    })
}

fn refine(grid: &PotentialGrid, i: usize, j: usize) -> Complex64 {
    let mut f = DMatrix::<f64>::zeros(9, 1);
    let mut r = 0;
    for di in 0..3 {
        for dj in 0..3 {
            f[(r, 0)] = grid.at(i + di - 1, j + dj - 1);
            r += 1;
        }
    }
    let c = quad_projector() * f;
    let h = Matrix2::new(2.0 * c[3], c[4], c[4], 2.0 * c[5]);
    let g = Vector2::new(c[1], c[2]);
    let base = grid.position(i, j);
    if h.determinant() <= 0.0 || h[(0, 0)] <= 0.0 {
        return base;
    }
    match h.try_inverse() {
        Some(inv) => {
            let d = -(inv * g);
            let (dx, dy) = (d[0].clamp(-1.0, 1.0), d[1].clamp(-1.0, 1.0));
            base + Complex64::new(dx * grid.d_px, dy * grid.d_px)
        }
        None => base,
    }
}

/// Strict 3×3 local minima of an unmasked neighbourhood within `radius` of the axis.
pub fn grid_minima(grid: &PotentialGrid, radius: f64) -> GridMinima {
    let n = grid.n;
    let mut out = GridMinima::default();
    for i in 1..n.saturating_sub(1) {
        for j in 1..n - 1 {
            if grid.masked(i, j) || grid.position(i, j).norm() > radius {
                continue;
            }
            let v = grid.at(i, j);
            let mut strict = true;
            'nb: for di in 0..3 {
                for dj in 0..3 {
                    if di == 1 && dj == 1 {
                        continue;
                    }
                    let (a, b) = (i + di - 1, j + dj - 1);
                    if grid.masked(a, b) || !(grid.at(a, b) > v) {
                        strict = false;
                        break 'nb;
                    }
                }
            }
            if strict {
                out.snapped.push(grid.position(i, j));
                out.refined.push(refine(grid, i, j));
                out.values.push(v);
            }
        }
    }
    out
}

/// Refined strict minima of a pseudo-potential map inside the disk of radius `radius`.
pub fn find_minima_numeric(grid: &PotentialGrid, radius: f64) -> Result<MinimaPattern> {
    grid_minima(grid, radius).refined_pattern()
}

/// Pixel minima of `f` in small windows around each of `centers`, on the lattice of pitch
/// `d_px` anchored at the origin.
pub fn pixel_minima_near<F>(centers: &[Complex64], d_px: f64, half: usize, f: F) -> GridMinima
where
    F: Fn(Complex64) -> f64 + Sync,
{
    let n = 2 * half + 1;
    let mut out = GridMinima::default();
    for c in centers {
        let origin = Complex64::new((c.re / d_px).round() * d_px, (c.im / d_px).round() * d_px);
        let g = PotentialGrid::sample(origin, d_px, n, MapKind::Pseudo, |z| Some(f(z)));
        out.push_unique(grid_minima(&g, f64::INFINITY), 0.5 * d_px);
    }
    out
}

/// Pseudo-potential (J) at `z` from central differences of the potential with step `h`.
pub fn pseudo_fd(sol: &FieldSolution, cfg: &TrapConfig, z: Complex64, h: f64) -> f64 {
    let dx = Complex64::new(h, 0.0);
    let dy = Complex64::new(0.0, h);
    let ex = (sol.potential(z + dx) - sol.potential(z - dx)) / (2.0 * h);
    let ey = (sol.potential(z + dy) - sol.potential(z - dy)) / (2.0 * h);
    cfg.pseudo_prefactor() * (ex * ex + ey * ey)
}

/// Field zeros of a solution inside the disk of radius `radius`.
pub fn field_zeros(sol: &FieldSolution, r0: f64, radius: f64) -> Vec<Complex64> {
    let vmax = sol.conductors.iter().map(|c| c.potential.abs()).fold(0.0, f64::max);
    let scale = vmax.max(1e-300) / r0;
    let f = |z: Complex64| {
        let (_, d1, d2) = sol.eval(z);
        (d1, d2)
    };
    let seeds = seed_grid(Complex64::new(0.0, 0.0), radius, r0 / 16.0);
    let found: Vec<Complex64> = seeds
        .par_iter()
        .filter_map(|s| newton_zero(&f, *s, 0.05 * r0, 1e-14 * r0, 1e-9 * scale))
        .filter(|z| z.norm() <= radius)
        .collect();
    dedup(&found, 1e-7 * r0)
}

/// Numeric minima of a layout's pseudo-potential at pixel pitch `d_px`.
///
/// Field zeros are located first; the pixel map is then sampled by central differences in
/// a window around each, and strict 3×3 minima are kept and refined.
pub fn numeric_minima(sol: &FieldSolution, cfg: &TrapConfig, d_px: f64) -> Result<GridMinima> {
    let radius = 0.6 * cfg.r0;
    let zeros = field_zeros(sol, cfg.r0, radius);
    if zeros.is_empty() {
        return Err(TrapError::FlatField);
    }
    let m = pixel_minima_near(&zeros, d_px, 4, |z| pseudo_fd(sol, cfg, z, d_px));
    let keep: Vec<usize> = (0..m.snapped.len()).filter(|&k| m.snapped[k].norm() <= radius).collect();
    let out = GridMinima {
        snapped: keep.iter().map(|&k| m.snapped[k]).collect(),
        refined: keep.iter().map(|&k| m.refined[k]).collect(),
        values: keep.iter().map(|&k| m.values[k]).collect(),
    };
    if out.snapped.is_empty() {
        return Err(TrapError::FlatField);
    }
    Ok(out)
}

/// Solves a layout and extracts its minima.
pub fn solve_and_locate(layout: &ElectrodeLayout, cfg: &TrapConfig, d_px: f64) -> Result<(FieldSolution, GridMinima)> {
    let sol = FieldSolution::for_layout(layout, &SolverSettings::default())?;
    let m = numeric_minima(&sol, cfg, d_px)?;
    Ok((sol, m))
}
