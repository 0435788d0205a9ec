//! Minima patterns and pattern-to-pattern distances.

use num_complex::Complex64;

use crate::error::{Result, TrapError};

/// Relative height (triangle height over longest side) below which three points count as a line.
pub const LINE_TOLERANCE: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PatternKind {
    Single,
    Line,
    Triangle,
}

impl PatternKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            PatternKind::Single => "single",
            PatternKind::Line => "line",
            PatternKind::Triangle => "triangle",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MinimaPattern {
    pub points: Vec<Complex64>,
    pub barycenter: Complex64,
    pub d_b: f64,
    pub kind: PatternKind,
}

impl MinimaPattern {
    pub fn new(points: Vec<Complex64>) -> Self {
        Self::with_tolerance(points, LINE_TOLERANCE)
    }

    pub fn with_tolerance(points: Vec<Complex64>, line_tol: f64) -> Self {
        assert!(!points.is_empty(), "pattern needs at least one point");
        let n = points.len() as f64;
        let barycenter = points.iter().sum::<Complex64>() / n;
        let d_b = points.iter().map(|p| (p - barycenter).norm()).sum::<f64>() / n;
        let mut pat = MinimaPattern { points, barycenter, d_b, kind: PatternKind::Single };
        pat.kind = match pat.points.len() {
            1 => PatternKind::Single,
            2 => PatternKind::Line,
            _ if pat.flatness() <= line_tol => PatternKind::Line,
            _ => PatternKind::Triangle,
        };
        pat
    }

    pub fn single(p: Complex64) -> Self {
        Self::new(vec![p])
    }

    /// Height of the third point over the longest side, relative to that side; 0 for a line.
    pub fn flatness(&self) -> f64 {
        if self.points.len() < 3 {
            return 0.0;
        }
        let p = &self.points;
        let mut best = (0.0, 0, 1, 2);
        for (i, j, k) in [(0, 1, 2), (1, 2, 0), (0, 2, 1)] {
            let len = (p[i] - p[j]).norm();
            if len > best.0 {
                best = (len, i, j, k);
            }
        }
        let (len, i, j, k) = best;
        if len == 0.0 {
            return 0.0;
        }
        let u = (p[j] - p[i]) / len;
        let v = p[k] - p[i];
        (u.re * v.im - u.im * v.re).abs() / len
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Same pattern referenced to its barycenter.
    pub fn centered(&self) -> Self {
        let pts = self.points.iter().map(|p| p - self.barycenter).collect();
        MinimaPattern { points: pts, barycenter: Complex64::new(0.0, 0.0), ..self.clone() }
    }

    pub fn translated(&self, t: Complex64) -> Self {
        let pts = self.points.iter().map(|p| p + t).collect();
        MinimaPattern { points: pts, barycenter: self.barycenter + t, ..self.clone() }
    }

    /// Points sorted by x, then y.
    pub fn sorted_points(&self) -> Vec<Complex64> {
        let mut p = self.points.clone();
        p.sort_by(|a, b| a.re.total_cmp(&b.re).then(a.im.total_cmp(&b.im)));
        p
    }
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    match n {
        0 => vec![vec![]],
        _ => {
            let mut out = Vec::new();
            for p in permutations(n - 1) {
                for pos in 0..=p.len() {
                    let mut q = p.clone();
                    q.insert(pos, n - 1);
                    out.push(q);
                }
            }
            out
        }
    }
}

/// Mean distance of the best injective matching of `a` into `b` (`a.len() <= b.len()`).
pub fn matched_distance(a: &[Complex64], b: &[Complex64]) -> f64 {
    assert!(!a.is_empty() && a.len() <= b.len() && b.len() <= 6);
    let mut best = f64::INFINITY;
    for perm in permutations(b.len()) {
        let s: f64 = a.iter().zip(&perm).map(|(p, &j)| (p - b[j]).norm()).sum();
        best = best.min(s);
    }
    best / a.len() as f64
}

/// Mean matched distance `d̄` and its ratio `d̄_s = d̄ / d_b(b)`.
pub fn minima_metrics(a: &MinimaPattern, b: &MinimaPattern) -> Result<(f64, f64)> {
    if a.len() != b.len() {
        return Err(TrapError::PatternMismatch { left: a.len(), right: b.len() });
    }
    let d = matched_distance(&a.points, &b.points);
    let ds = if d == 0.0 { 0.0 } else { d / b.d_b };
    Ok((d, ds))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn c(x: f64, y: f64) -> Complex64 {
        Complex64::new(x, y)
    }

    #[test]
    fn barycenter_and_db() {
        let p = MinimaPattern::new(vec![c(-1.0, 0.0), c(0.0, 0.0), c(1.0, 0.0)]);
        assert_eq!(p.barycenter, c(0.0, 0.0));
        assert!((p.d_b - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(p.kind, PatternKind::Line);
        let t = MinimaPattern::new(vec![c(1.0, 0.0), c(-0.5, 0.8), c(-0.5, -0.8)]);
        assert_eq!(t.kind, PatternKind::Triangle);
        assert_eq!(MinimaPattern::single(c(0.0, 0.0)).kind, PatternKind::Single);
    }

    #[test]
    fn metrics_identity_and_offset() {
        let a = MinimaPattern::new(vec![c(1e-4, 0.0), c(-5e-5, 8e-5), c(-5e-5, -8e-5)]);
        assert_eq!(minima_metrics(&a, &a).unwrap(), (0.0, 0.0));
        let b = a.translated(c(0.0, 4e-6));
        let (d, _) = minima_metrics(&b, &a).unwrap();
        assert!((d - 4e-6).abs() < 1e-18);
        let shuffled = MinimaPattern::new(vec![a.points[2], a.points[0], a.points[1]]);
        assert_eq!(minima_metrics(&shuffled, &a).unwrap().0, 0.0);
    }

    #[test]
    fn mismatch_is_error() {
        let a = MinimaPattern::new(vec![c(0.0, 0.0)]);
        let b = MinimaPattern::new(vec![c(0.0, 0.0), c(1.0, 0.0)]);
        assert!(matches!(minima_metrics(&a, &b), Err(TrapError::PatternMismatch { .. })));
    }

    #[test]
    fn partial_matching() {
        let d = matched_distance(&[c(1.0, 0.0), c(-1.0, 0.0)], &[c(-1.0, 0.0), c(5.0, 5.0), c(1.0, 0.0)]);
        assert_eq!(d, 0.0);
        assert_eq!(permutations(3).len(), 6);
    }
}
